"""Final frame reconstruction: per-scale zero-init cross-attention fusion.

At each scale the temporal feature queries the (channel-mapped) prior
feature; the attention output passes through a convolution whose weights and
bias start at exactly zero, gets scaled by a fixed control constant, and is
added residually to the temporal feature. A freshly initialized block is
therefore an exact identity on the temporal pathway, and the prior influence
grows only as the zero-init convolution trains away from zero.
"""

from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import Upsample, inverse_tonemap_mu
from .datapipe import HDRFrame


def _window_tokens(x: torch.Tensor, w: int) -> torch.Tensor:
    b, c, hh, ww = x.shape
    x = x.view(b, c, hh // w, w, ww // w, w)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, w * w, c)


def _window_untokens(t: torch.Tensor, w: int, b: int, c: int, hh: int, ww: int) -> torch.Tensor:
    x = t.view(b, hh // w, ww // w, w, w, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, hh, ww)


class ZeroInitCrossAttention(nn.Module):
    """Residual cross-attention correction gated by a zero-initialized conv.

    The query comes from the temporal feature, key and value from the prior
    feature after it is mapped to the temporal channel count. Attention runs
    over flattened spatial tokens; when the token count exceeds
    ``window_threshold`` it is windowed into non-overlapping ``window`` x
    ``window`` tiles to bound memory. ``control_scale`` is a fixed constant,
    not a parameter.
    """

    def __init__(
        self,
        temporal_channels: int,
        prior_channels: int,
        control_scale: float = 1.0,
        window: int = 8,
        window_threshold: int = 1024,
    ):
        super().__init__()
        c = temporal_channels
        self.control_scale = float(control_scale)
        self.window = window
        self.window_threshold = window_threshold
        self.channel_map = nn.Conv2d(prior_channels, c, 1)
        # single-group normalization: stays well-defined down to one spatial token
        self.norm_q = nn.GroupNorm(1, c)
        self.norm_kv = nn.GroupNorm(1, c)
        self.to_q = nn.Linear(c, c)
        self.to_k = nn.Linear(c, c)
        self.to_v = nn.Linear(c, c)
        self.zero_conv = nn.Conv2d(c, c, 1)
        nn.init.zeros_(self.zero_conv.weight)
        nn.init.zeros_(self.zero_conv.bias)

    def _tokens(self, f_r: torch.Tensor, f_d: torch.Tensor):
        b, c, h, w = f_r.shape
        q_in = self.norm_q(f_r)
        kv_in = self.norm_kv(f_d)
        if h * w > self.window_threshold and h % self.window == 0 and w % self.window == 0:
            win = self.window
            q = _window_tokens(q_in, win)
            kv = _window_tokens(kv_in, win)
        else:
            win = None
            q = q_in.reshape(b, c, -1).transpose(1, 2)
            kv = kv_in.reshape(b, c, -1).transpose(1, 2)
        return q, kv, win

    def attention_weights(self, f_r: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
        """Softmax attention matrix, shape (groups, tokens_q, tokens_k)."""
        f_d = self.channel_map(f_d)
        q_in, kv_in, _ = self._tokens(f_r, f_d)
        q = self.to_q(q_in)
        k = self.to_k(kv_in)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)

    def forward(self, f_r: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
        if f_r.shape[-2:] != f_d.shape[-2:]:
            raise ValueError(
                f"temporal/prior spatial dims differ: {tuple(f_r.shape[-2:])} vs {tuple(f_d.shape[-2:])}"
            )
        b, c, h, w = f_r.shape
        f_d = self.channel_map(f_d)
        q_in, kv_in, win = self._tokens(f_r, f_d)
        q = self.to_q(q_in)
        k = self.to_k(kv_in)
        v = self.to_v(kv_in)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c), dim=-1)
        out = attn @ v
        if win is None:
            out = out.transpose(1, 2).reshape(b, c, h, w)
        else:
            out = _window_untokens(out, win, b, c, h, w)
        return f_r + self.control_scale * self.zero_conv(out)


def attention_rowsum_check(
    block: ZeroInitCrossAttention, f_r: torch.Tensor, f_d: torch.Tensor
) -> float:
    """Max over rows of |sum(softmax weights) - 1|; diagnostic only."""
    with torch.no_grad():
        weights = block.attention_weights(f_r, f_d)
        return float((weights.sum(dim=-1) - 1.0).abs().max().item())


class ReconstructionHead(nn.Module):
    """Fuses per-scale temporal and prior features into a tonemapped frame.

    One zero-init cross-attention block per scale, then coarse-to-fine
    nearest+conv upsampling with concatenation fusion, and a sigmoid head in
    tonemapped space.
    """

    def __init__(
        self,
        temporal_channels: int,
        prior_channels: dict[int, int],
        scale_keys: tuple[int, ...] = (1, 2, 4, 8),
        control_scale: float = 1.0,
        attn_window: int = 8,
    ):
        super().__init__()
        self.scale_keys = tuple(sorted(scale_keys))
        self.control_scale = float(control_scale)
        c = temporal_channels
        self.zica = nn.ModuleDict(
            {
                str(s): ZeroInitCrossAttention(
                    c, prior_channels[s], control_scale, window=attn_window
                )
                for s in self.scale_keys
            }
        )
        self.up_blocks = nn.ModuleDict(
            {str(s): Upsample(c, c) for s in self.scale_keys[1:]}
        )
        self.fuse_blocks = nn.ModuleDict(
            {str(s): nn.Conv2d(2 * c, c, 3, padding=1) for s in self.scale_keys[1:]}
        )
        self.head = nn.Conv2d(c, 3, 3, padding=1)

    def forward(
        self, temporal: dict[int, torch.Tensor], prior: dict[int, torch.Tensor]
    ) -> torch.Tensor:
        if set(temporal.keys()) != set(self.scale_keys) or set(prior.keys()) != set(
            self.scale_keys
        ):
            raise ValueError(
                f"scale sets must equal {self.scale_keys}; got temporal "
                f"{sorted(temporal)} and prior {sorted(prior)}"
            )
        fused = {
            s: self.zica[str(s)](temporal[s], prior[s]) for s in self.scale_keys
        }
        x = fused[self.scale_keys[0]]
        for s in self.scale_keys[1:]:
            x = self.up_blocks[str(s)](x)
            x = F.leaky_relu(self.fuse_blocks[str(s)](torch.cat([x, fused[s]], dim=1)), 0.1)
        return torch.sigmoid(self.head(x))


def zica_fuse(
    block: ZeroInitCrossAttention, f_r: torch.Tensor, f_d: torch.Tensor
) -> torch.Tensor:
    """Single-scale fusion; thin functional alias over the block call."""
    return block(f_r, f_d)


def reconstruct(
    head: ReconstructionHead,
    temporal: dict[int, torch.Tensor],
    prior: dict[int, torch.Tensor],
    hdr_peak: float,
    mu: float = 5000.0,
    index: int = 0,
) -> HDRFrame:
    """Run the head and map its tonemapped output back to scene-linear HDR."""
    with torch.no_grad():
        tonemapped = head(temporal, prior)
    img = tonemapped[0].permute(1, 2, 0).numpy().astype(np.float64)
    linear = inverse_tonemap_mu(img, mu) * hdr_peak
    return HDRFrame(pixels=linear.astype(np.float32), index=index)


def save_reconstruction(head: ReconstructionHead, path: str, extra_manifest: dict | None = None):
    manifest = {
        "temporal_channels": head.head.in_channels,
        "prior_channels": {str(s): head.zica[str(s)].channel_map.in_channels for s in head.scale_keys},
        "scale_keys": list(head.scale_keys),
        "control_scale": head.control_scale,
        "attn_window": head.zica[str(head.scale_keys[0])].window,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    torch.save(
        {"state_dict": head.state_dict(), "manifest_json": json.dumps(manifest, sort_keys=True)},
        path,
    )


def load_reconstruction(path: str) -> tuple[ReconstructionHead, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    manifest = json.loads(blob["manifest_json"])
    head = ReconstructionHead(
        temporal_channels=manifest["temporal_channels"],
        prior_channels={int(k): v for k, v in manifest["prior_channels"].items()},
        scale_keys=tuple(manifest["scale_keys"]),
        control_scale=manifest["control_scale"],
        attn_window=manifest["attn_window"],
    )
    head.load_state_dict(blob["state_dict"])
    head.eval()
    return head, manifest
