"""Exposure-conditioned latent denoising network, its loss, and prior sampling.

The denoiser is a small two-scale U-Net over the channel concatenation of the
noisy latent and the LDR condition latent. The timestep embedding and the
exposure embedding are summed and injected into every residual block;
self-attention stages use block-local attention (non-overlapping window
attention followed by grid-dilated attention, single head).
"""

from __future__ import annotations

import json
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import LatentAutoencoder, LatentCode, Upsample
from .datapipe import NetworkInput
from .diffusion import DiffusionSchedule, SamplerConfig, sample


def exposure_embedding(e: float, d: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar exposure value.

    Component 2n is sin(e / 10000**(2n/d)) and component 2n+1 is
    cos(e / 10000**((2n+1)/d)); the divisor exponent advances with the
    absolute component index, for cosines as well (unlike the shared
    pair-exponent convention). All components lie in [-1, 1].
    """
    if d < 2 or d % 2 != 0:
        raise ValueError(f"embedding dimension must be even and >= 2, got {d}")
    idx = np.arange(d, dtype=np.float64)
    args = float(e) / np.power(10000.0, idx / d)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(args[0::2])
    out[1::2] = np.cos(args[1::2])
    return out


def sinusoidal_embedding_t(values: torch.Tensor, d: int) -> torch.Tensor:
    """Torch batch version of :func:`exposure_embedding`; values shape (B,)."""
    idx = torch.arange(d, dtype=values.dtype, device=values.device)
    args = values[:, None] / torch.pow(
        torch.tensor(10000.0, dtype=values.dtype, device=values.device), idx / d
    )
    out = torch.empty_like(args)
    out[:, 0::2] = torch.sin(args[:, 0::2])
    out[:, 1::2] = torch.cos(args[:, 1::2])
    return out


class EmbResBlock(nn.Module):
    """Residual block with an additive conditioning-vector injection."""

    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def _window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    # (B, C, H, W) -> (B * nH * nW, w * w, C)
    b, c, hh, ww = x.shape
    x = x.view(b, c, hh // w, w, ww // w, w)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, w * w, c)


def _window_merge(tokens: torch.Tensor, w: int, b: int, c: int, hh: int, ww: int) -> torch.Tensor:
    x = tokens.view(b, hh // w, ww // w, w, w, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, hh, ww)


def _grid_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    # tokens strided across the image: attend over the (H/w, W/w) axes
    b, c, hh, ww = x.shape
    x = x.view(b, c, hh // w, w, ww // w, w)
    return x.permute(0, 3, 5, 2, 4, 1).reshape(-1, (hh // w) * (ww // w), c)


def _grid_merge(tokens: torch.Tensor, w: int, b: int, c: int, hh: int, ww: int) -> torch.Tensor:
    x = tokens.view(b, w, w, hh // w, ww // w, c)
    return x.permute(0, 5, 3, 1, 4, 2).reshape(b, c, hh, ww)


class BlockLocalAttention(nn.Module):
    """Window attention then grid-dilated attention, one head each."""

    def __init__(self, channels, window: int = 4):
        super().__init__()
        self.window = window
        self.norm1 = nn.GroupNorm(min(8, channels), channels)
        self.qkv1 = nn.Linear(channels, 3 * channels)
        self.proj1 = nn.Linear(channels, channels)
        self.norm2 = nn.GroupNorm(min(8, channels), channels)
        self.qkv2 = nn.Linear(channels, 3 * channels)
        self.proj2 = nn.Linear(channels, channels)

    def _attend(self, tokens, qkv, proj):
        q, k, v = qkv(tokens).chunk(3, dim=-1)
        scale = q.shape[-1] ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        return proj(attn @ v)

    def forward(self, x):
        b, c, hh, ww = x.shape
        w = min(self.window, hh, ww)
        if hh % w or ww % w:
            raise ValueError(f"spatial dims ({hh}, {ww}) not divisible by window {w}")
        t = _window_partition(self.norm1(x), w)
        x = x + _window_merge(self._attend(t, self.qkv1, self.proj1), w, b, c, hh, ww)
        t = _grid_partition(self.norm2(x), w)
        x = x + _grid_merge(self._attend(t, self.qkv2, self.proj2), w, b, c, hh, ww)
        return x


class ExposureCondUNet(nn.Module):
    """Noise predictor for latents conditioned on an LDR latent and exposure.

    Inputs are concatenated along channels at the stem; the sum of the
    timestep and exposure embeddings feeds every residual block. With
    ``exposure_encoding="log2"`` the raw relative exposure is mapped through
    log2 before embedding (so a {1, 8} pattern embeds {0, 3}); ``"raw"``
    embeds the multiplier unchanged.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        base_width: int = 64,
        embed_dim: int = 256,
        window: int = 4,
        exposure_encoding: str = "log2",
    ):
        super().__init__()
        if exposure_encoding not in ("log2", "raw"):
            raise ValueError(f"unknown exposure_encoding: {exposure_encoding!r}")
        self.latent_channels = latent_channels
        self.base_width = base_width
        self.embed_dim = embed_dim
        self.exposure_encoding = exposure_encoding
        w = base_width
        self.emb_mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim)
        )
        self.stem = nn.Conv2d(2 * latent_channels, w, 3, padding=1)
        self.res1a = EmbResBlock(w, w, embed_dim)
        self.res1b = EmbResBlock(w, w, embed_dim)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.res2a = EmbResBlock(2 * w, 2 * w, embed_dim)
        self.attn2 = BlockLocalAttention(2 * w, window)
        self.res2b = EmbResBlock(2 * w, 2 * w, embed_dim)
        self.up = Upsample(2 * w, w)
        self.fuse = nn.Conv2d(2 * w, w, 3, padding=1)
        self.res3a = EmbResBlock(w, w, embed_dim)
        self.res3b = EmbResBlock(w, w, embed_dim)
        self.head_norm = nn.GroupNorm(min(8, w), w)
        self.head = nn.Conv2d(w, latent_channels, 3, padding=1)

    def _embedding(self, t, exposures, exposure_embedding_override=None):
        t_emb = sinusoidal_embedding_t(t, self.embed_dim)
        if exposure_embedding_override is not None:
            e_emb = exposure_embedding_override.to(t_emb.dtype)
        else:
            if (exposures <= 0).any():
                raise ValueError("exposures must be positive")
            vals = torch.log2(exposures) if self.exposure_encoding == "log2" else exposures
            e_emb = sinusoidal_embedding_t(vals, self.embed_dim)
        return self.emb_mlp(t_emb + e_emb)

    def forward(
        self,
        z_t: torch.Tensor,
        cond: torch.Tensor,
        t: torch.Tensor,
        exposures: torch.Tensor,
        exposure_embedding_override: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if z_t.shape[-2:] != cond.shape[-2:]:
            raise ValueError(
                f"noisy latent {tuple(z_t.shape[-2:])} and condition "
                f"{tuple(cond.shape[-2:])} spatial dims differ"
            )
        dtype = next(self.parameters()).dtype
        t = torch.as_tensor(t, dtype=dtype, device=z_t.device)
        exposures = torch.as_tensor(exposures, dtype=dtype, device=z_t.device)
        emb = self._embedding(t, exposures, exposure_embedding_override)
        x = self.stem(torch.cat([z_t, cond], dim=1))
        x = self.res1a(x, emb)
        skip = self.res1b(x, emb)
        x = self.down(skip)
        x = self.res2a(x, emb)
        x = self.attn2(x)
        x = self.res2b(x, emb)
        x = self.fuse(torch.cat([self.up(x), skip], dim=1))
        x = self.res3a(x, emb)
        x = self.res3b(x, emb)
        return self.head(F.silu(self.head_norm(x)))


def denoising_loss(
    denoiser,
    schedule: DiffusionSchedule,
    z0: torch.Tensor,
    cond: torch.Tensor,
    exposures: torch.Tensor,
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE at uniformly sampled timesteps.

    Draws t ~ U[1, T] and standard Gaussian noise per batch element (unless
    given explicitly), forms the noisy latent via the closed-form jump, and
    returns the mean squared error between the true and predicted noise.
    """
    b = z0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator, device=z0.device)
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, device=z0.device, dtype=z0.dtype)
    ab = torch.as_tensor(schedule.alpha_bars, dtype=z0.dtype, device=z0.device)[t - 1]
    ab = ab.view(b, *([1] * (z0.ndim - 1)))
    z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise
    pred = denoiser(z_t, cond, t, exposures)
    loss = F.mse_loss(pred, noise)
    if not torch.isfinite(loss):
        raise RuntimeError(f"denoising loss is non-finite: {loss.item()}")
    return loss


def generate_prior(
    condition: NetworkInput,
    ae: LatentAutoencoder,
    denoiser: ExposureCondUNet,
    schedule: DiffusionSchedule,
    sampler_config: SamplerConfig,
) -> tuple[LatentCode, list[np.ndarray]]:
    """Sample one latent conditioned on an LDR frame and decode its features.

    Encodes the condition frame, runs the short-step sampler with the frozen
    denoiser, decodes the sampled latent, and returns it together with the
    decoder's multi-scale feature taps. Deterministic for eta = 0 and a fixed
    seed.
    """
    cond_latent = ae.encode(condition.ldr, source_kind="ldr_condition")
    cond_t = torch.from_numpy(cond_latent.values).permute(2, 0, 1).unsqueeze(0)
    e_t = torch.tensor([condition.exposure])

    @torch.no_grad()
    def closure(z, _cond, t):
        z_t = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float32))
        z_t = z_t.permute(2, 0, 1).unsqueeze(0)
        eps = denoiser(z_t, cond_t, torch.tensor([float(t)]), e_t)
        return eps[0].permute(1, 2, 0).numpy().astype(np.float64)

    z = sample(closure, cond_latent.values, schedule, sampler_config)
    latent = LatentCode(
        values=z.astype(np.float32),
        source_kind="hdr_tonemapped",
        image_size=cond_latent.image_size,
    )
    _, features = ae.decode(latent)
    return latent, features


def save_denoiser(model: ExposureCondUNet, path: str, extra_manifest: dict | None = None):
    manifest = {
        "latent_channels": model.latent_channels,
        "base_width": model.base_width,
        "embed_dim": model.embed_dim,
        "window": model.attn2.window,
        "exposure_encoding": model.exposure_encoding,
        "conditioning": "channel_concat",
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    torch.save(
        {"state_dict": model.state_dict(), "manifest_json": json.dumps(manifest, sort_keys=True)},
        path,
    )


def load_denoiser(path: str) -> tuple[ExposureCondUNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    manifest = json.loads(blob["manifest_json"])
    model = ExposureCondUNet(
        latent_channels=manifest["latent_channels"],
        base_width=manifest["base_width"],
        embed_dim=manifest["embed_dim"],
        window=manifest["window"],
        exposure_encoding=manifest["exposure_encoding"],
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest
