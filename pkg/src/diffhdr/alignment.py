"""Multi-scale alignment of moving frames to a reference, plus temporal merging.

One aligner instance (shared weights) processes every reference/moving pair
coarse-to-fine: sigmoid spatial-attention gating at quarter resolution,
modulated deformable convolution at half resolution, and normalized
cross-correlation patch matching at full resolution, with progressive
upsample-and-fuse back to the input size. A channel-attention transformer
decoder merges the aligned features into per-scale temporal features and a
full-resolution tonemapped output used for direct supervision.
"""

from __future__ import annotations

import json
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import Upsample

logger = logging.getLogger(__name__)

FLAT_PATCH_EPS = 1e-12


class SpatialAttentionGate(nn.Module):
    """Gates moving features by reference-conditioned sigmoid attention."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1)
        self.conv2 = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def attention(self, ref_feat, mov_feat, logit_bias: float = 0.0):
        if ref_feat.shape != mov_feat.shape:
            raise ValueError(
                f"gate inputs must share shape, got {tuple(ref_feat.shape)} vs {tuple(mov_feat.shape)}"
            )
        logits = self.conv2(F.leaky_relu(self.conv1(torch.cat([ref_feat, mov_feat], dim=1)), 0.1))
        return torch.sigmoid(logits + logit_bias)

    def forward(self, ref_feat, mov_feat, logit_bias: float = 0.0):
        return mov_feat * self.attention(ref_feat, mov_feat, logit_bias)


def bilinear_sample_zeros(x: torch.Tensor, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Sample (B, C, H, W) maps at float positions; out-of-bounds reads zero.

    py, px have shape (B, K, H, W); returns (B, C, K, H, W).
    """
    b, c, h, w = x.shape
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = py - y0
    wx = px - x0
    flat = x.reshape(b, c, h * w)
    out = None
    for dy, dx, wgt in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).long()
        vals = flat.gather(2, idx.reshape(b, 1, -1).expand(b, c, -1))
        vals = vals.reshape(b, c, *py.shape[1:]) * valid.unsqueeze(1)
        term = vals * wgt.unsqueeze(1)
        out = term if out is None else out + term
    return out


def deform_conv_soft(
    x: torch.Tensor,
    offsets: torch.Tensor,
    masks: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Modulated deformable convolution via explicit bilinear gathers.

    offsets: (B, 2K, H, W) as (dy, dx) per kernel tap, masks: (B, K, H, W).
    With zero offsets and unit masks this reduces exactly to a zero-padded
    standard convolution with the same kernel.
    """
    b, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    k = kh * kw
    if offsets.shape != (b, 2 * k, h, w):
        raise ValueError(f"offsets shape {tuple(offsets.shape)} != {(b, 2 * k, h, w)}")
    if masks.shape != (b, k, h, w):
        raise ValueError(f"masks shape {tuple(masks.shape)} != {(b, k, h, w)}")
    dt, dev = x.dtype, x.device
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=dt, device=dev), torch.arange(w, dtype=dt, device=dev), indexing="ij"
    )
    ky, kx = torch.meshgrid(
        torch.arange(kh, dtype=dt, device=dev) - kh // 2,
        torch.arange(kw, dtype=dt, device=dev) - kw // 2,
        indexing="ij",
    )
    off = offsets.reshape(b, k, 2, h, w)
    py = gy + ky.reshape(1, k, 1, 1) + off[:, :, 0]
    px = gx + kx.reshape(1, k, 1, 1) + off[:, :, 1]
    sampled = bilinear_sample_zeros(x, py, px) * masks.unsqueeze(1)
    out = torch.einsum("bckhw,ock->bohw", sampled, weight.reshape(c_out, c_in, k))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class DeformableAlign(nn.Module):
    """Aligns moving features by deformable convolution with predicted offsets.

    Offset and modulation predictions come from the concatenated
    reference/moving features; the predictor's last layer starts at zero so
    training begins from the undeformed kernel.
    """

    def __init__(self, channels, kernel_size: int = 3):
        super().__init__()
        k = kernel_size * kernel_size
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2)
        self.pred1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.pred2 = nn.Conv2d(channels, 3 * k, 3, padding=1)
        nn.init.zeros_(self.pred2.weight)
        nn.init.zeros_(self.pred2.bias)

    def forward(self, ref_feat, mov_feat, zero_offsets: bool = False, unit_masks: bool = False):
        if ref_feat.shape != mov_feat.shape:
            raise ValueError(
                f"deformable inputs must share shape, got {tuple(ref_feat.shape)} vs {tuple(mov_feat.shape)}"
            )
        k = self.kernel_size * self.kernel_size
        pred = self.pred2(F.leaky_relu(self.pred1(torch.cat([ref_feat, mov_feat], dim=1)), 0.1))
        offsets, mask_logits = pred[:, : 2 * k], pred[:, 2 * k :]
        masks = torch.sigmoid(mask_logits)
        if zero_offsets:
            offsets = torch.zeros_like(offsets)
        if unit_masks:
            masks = torch.ones_like(masks)
        return deform_conv_soft(mov_feat, offsets, masks, self.conv.weight, self.conv.bias)


def _patch_stack(x: np.ndarray, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean patch vectors and their norms for every pixel (edge-padded)."""
    c, h, w = x.shape
    pad = patch_size // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (patch_size, patch_size), axis=(1, 2))
    vecs = windows.transpose(1, 2, 0, 3, 4).reshape(h, w, -1).astype(np.float64)
    vecs = vecs - vecs.mean(axis=2, keepdims=True)
    return vecs, np.linalg.norm(vecs, axis=2)


def candidate_displacements(radius: int) -> list[tuple[int, int]]:
    """All displacements within the search square, ordered by preference.

    Smallest squared magnitude first, then raster order (dy, then dx); the
    matcher keeps the first candidate attaining the maximal score, which
    realizes the tie-breaking contract.
    """
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(cands, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))


def match_patches(
    ref: np.ndarray, mov: np.ndarray, patch_size: int = 3, radius: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Best moving-patch displacement per reference pixel by correlation.

    Scores are zero-mean normalized cross-correlations of edge-padded
    ``patch_size`` x ``patch_size`` patches; a pairing involving a flat patch
    scores 0. Candidate centers must stay inside the image. Returns int
    (dy, dx) maps of shape (H, W).
    """
    ref = np.asarray(ref, dtype=np.float64)
    mov = np.asarray(mov, dtype=np.float64)
    if ref.ndim != 3 or ref.shape != mov.shape:
        raise ValueError(f"need matching (C, H, W) arrays, got {ref.shape} vs {mov.shape}")
    _, h, w = ref.shape
    ref_vecs, ref_norms = _patch_stack(ref, patch_size)
    mov_vecs, mov_norms = _patch_stack(mov, patch_size)
    best_score = np.full((h, w), -np.inf)
    best_dy = np.zeros((h, w), dtype=np.int32)
    best_dx = np.zeros((h, w), dtype=np.int32)
    for dy, dx in candidate_displacements(radius):
        ry0, ry1 = max(0, -dy), min(h, h - dy)
        rx0, rx1 = max(0, -dx), min(w, w - dx)
        if ry0 >= ry1 or rx0 >= rx1:
            continue
        q = ref_vecs[ry0:ry1, rx0:rx1]
        t = mov_vecs[ry0 + dy : ry1 + dy, rx0 + dx : rx1 + dx]
        denom = ref_norms[ry0:ry1, rx0:rx1] * mov_norms[ry0 + dy : ry1 + dy, rx0 + dx : rx1 + dx]
        num = np.einsum("ijk,ijk->ij", q, t)
        score = np.where(denom > FLAT_PATCH_EPS, num / np.where(denom > 0, denom, 1.0), 0.0)
        better = np.full((h, w), False)
        better[ry0:ry1, rx0:rx1] = score > best_score[ry0:ry1, rx0:rx1]
        best_score[better] = score[better[ry0:ry1, rx0:rx1]]
        best_dy[better] = dy
        best_dx[better] = dx
    return best_dy, best_dx


def gather_displaced(feat: torch.Tensor, dy: np.ndarray, dx: np.ndarray) -> torch.Tensor:
    """Pull (C, H, W) features from displaced positions onto the query grid."""
    _, h, w = feat.shape
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = torch.from_numpy(gy + dy).long()
    sx = torch.from_numpy(gx + dx).long()
    return feat[:, sy, sx]


class MultiScaleAligner(nn.Module):
    """Coarse-to-fine alignment of one moving frame to the reference frame."""

    def __init__(self, in_channels: int = 6, width: int = 32, patch_size: int = 3, radius: int = 4):
        super().__init__()
        self.width = width
        self.patch_size = patch_size
        self.radius = radius
        c = width
        self.stem1 = nn.Conv2d(in_channels, c, 3, padding=1)
        self.stem2 = nn.Conv2d(c, c, 3, padding=1)
        self.down1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.gate = SpatialAttentionGate(c)
        self.up_coarse = Upsample(c, c)
        self.fuse_mid = nn.Conv2d(2 * c, c, 3, padding=1)
        self.deform = DeformableAlign(c)
        self.up_mid = Upsample(c, c)
        self.fuse_fine = nn.Conv2d(2 * c, c, 3, padding=1)
        self.match_proj = nn.Conv2d(c, c, 3, padding=1)
        self.out_conv = nn.Conv2d(c, c, 3, padding=1)

    def extract_pyramid(self, frames: torch.Tensor):
        f1 = self.stem2(F.leaky_relu(self.stem1(frames), 0.1))
        f2 = F.leaky_relu(self.down1(f1), 0.1)
        f4 = F.leaky_relu(self.down2(f2), 0.1)
        return f1, f2, f4

    def matched_features(
        self, ref_full: torch.Tensor, mov_full: torch.Tensor, identity_matches: bool = False
    ) -> torch.Tensor:
        if identity_matches:
            return mov_full
        out = []
        for b in range(ref_full.shape[0]):
            dy, dx = match_patches(
                ref_full[b].detach().cpu().numpy(),
                mov_full[b].detach().cpu().numpy(),
                self.patch_size,
                self.radius,
            )
            out.append(gather_displaced(mov_full[b], dy, dx))
        return torch.stack(out, dim=0)

    def forward(
        self,
        ref: torch.Tensor,
        mov: torch.Tensor,
        zero_offsets: bool = False,
        unit_masks: bool = False,
        identity_matches: bool = False,
    ) -> torch.Tensor:
        if ref.shape != mov.shape:
            raise ValueError(
                f"reference/moving shapes differ: {tuple(ref.shape)} vs {tuple(mov.shape)}"
            )
        r1, r2, r4 = self.extract_pyramid(ref)
        m1, m2, m4 = self.extract_pyramid(mov)
        g4 = self.gate(r4, m4)
        mid = F.leaky_relu(self.fuse_mid(torch.cat([m2, self.up_coarse(g4)], dim=1)), 0.1)
        d2 = self.deform(r2, mid, zero_offsets=zero_offsets, unit_masks=unit_masks)
        fine = F.leaky_relu(self.fuse_fine(torch.cat([m1, self.up_mid(d2)], dim=1)), 0.1)
        matched = self.matched_features(r1, m1, identity_matches)
        return self.out_conv(fine + self.match_proj(matched))


class ChannelAttentionBlock(nn.Module):
    """Transposed self-attention across channels plus a gated conv FFN."""

    def __init__(self, channels, ffn_expansion: float = 2.0):
        super().__init__()
        hidden = int(channels * ffn_expansion)
        self.norm1 = nn.GroupNorm(1, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.qkv_dw = nn.Conv2d(3 * channels, 3 * channels, 3, padding=1, groups=3 * channels)
        self.temperature = nn.Parameter(torch.ones(1))
        self.proj = nn.Conv2d(channels, channels, 1)
        self.norm2 = nn.GroupNorm(1, channels)
        self.ffn_in = nn.Conv2d(channels, 2 * hidden, 1)
        self.ffn_dw = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1, groups=2 * hidden)
        self.ffn_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(self.norm1(x))).chunk(3, dim=1)
        q = F.normalize(q.reshape(b, c, -1), dim=-1)
        k = F.normalize(k.reshape(b, c, -1), dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        out = (attn @ v.reshape(b, c, -1)).reshape(b, c, h, w)
        x = x + self.proj(out)
        gate, val = self.ffn_dw(self.ffn_in(self.norm2(x))).chunk(2, dim=1)
        return x + self.ffn_out(F.gelu(gate) * val)


class TemporalMergeDecoder(nn.Module):
    """Merges reference and aligned features into per-scale temporal features.

    Emits features keyed by scale relative to the latent resolution
    (image resolution / 8): {1, 2, 4, 8}, 8 being full resolution, plus a
    full-resolution tonemapped image for direct supervision. Inputs are
    concatenated in fixed temporal order, reference first, then aligned
    features of earlier neighbors before later ones.
    """

    scale_keys = (1, 2, 4, 8)

    def __init__(self, width: int = 32, num_moving: int = 2):
        super().__init__()
        self.width = width
        self.num_moving = num_moving
        c = width
        self.reduce = nn.Conv2d(c * (1 + num_moving), c, 3, padding=1)
        self.block_full = ChannelAttentionBlock(c)
        self.down_a = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.block_half = ChannelAttentionBlock(c)
        self.down_b = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.block_quarter = ChannelAttentionBlock(c)
        self.down_c = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.block_eighth = ChannelAttentionBlock(c)
        self.merged_head = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, ref_feat: torch.Tensor, aligned: list[torch.Tensor]):
        if len(aligned) == 0:
            raise ValueError("temporal decoder needs at least one aligned feature")
        if len(aligned) != self.num_moving:
            raise ValueError(
                f"decoder configured for {self.num_moving} moving frames, got {len(aligned)}"
            )
        for a in aligned:
            if a.shape != ref_feat.shape:
                raise ValueError("all aligned features must match the reference feature shape")
        x = F.leaky_relu(self.reduce(torch.cat([ref_feat] + aligned, dim=1)), 0.1)
        s8 = self.block_full(x)
        s4 = self.block_half(F.leaky_relu(self.down_a(s8), 0.1))
        s2 = self.block_quarter(F.leaky_relu(self.down_b(s4), 0.1))
        s1 = self.block_eighth(F.leaky_relu(self.down_c(s2), 0.1))
        merged = torch.sigmoid(self.merged_head(s8))
        return {1: s1, 2: s2, 4: s4, 8: s8}, merged


class AlignMergeModel(nn.Module):
    """Shared-weight aligner applied to every moving frame, then the decoder."""

    def __init__(
        self,
        width: int = 32,
        num_moving: int = 2,
        patch_size: int = 3,
        radius: int = 4,
        in_channels: int = 6,
    ):
        super().__init__()
        self.aligner = MultiScaleAligner(in_channels, width, patch_size, radius)
        self.decoder = TemporalMergeDecoder(width, num_moving)

    def forward(self, window: torch.Tensor, ref_index: int):
        """window: (N, 6, H, W) frames in temporal order; returns (features, merged)."""
        n = window.shape[0]
        if not 0 <= ref_index < n:
            raise ValueError(f"ref_index {ref_index} out of range for window of {n}")
        ref = window[ref_index : ref_index + 1]
        ref_feat, _, _ = self.aligner.extract_pyramid(ref)
        aligned = [
            self.aligner(ref, window[i : i + 1]) for i in range(n) if i != ref_index
        ]
        return self.decoder(ref_feat, aligned)


class PerceptualFeatures(nn.Module):
    """Fixed random conv feature stack for the perceptual loss term.

    Self-contained substitute for an externally pretrained feature network;
    weights are drawn once from a published seed and frozen.
    """

    def __init__(self, seed: int = 1234, width: int = 16, depth: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        in_ch = 3
        for _ in range(depth):
            conv = nn.Conv2d(in_ch, width, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            layers.append(conv)
            in_ch = width
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def composite_recon_loss(
    prediction: torch.Tensor,
    ground_truth: torch.Tensor,
    l1_weight: float = 1.0,
    temporal_weight: float = 0.1,
    perceptual_weight: float = 0.1,
    perceptual_net: PerceptualFeatures | None = None,
    return_parts: bool = False,
):
    """Weighted sum of L1, temporal-gradient, and perceptual terms.

    Both arguments are tonemapped (N, 3, H, W) sequences in [0, 1], N being
    consecutive frames. The temporal term penalizes the L1 distance between
    consecutive-frame differences of prediction and ground truth; it is
    dropped (with a logged notice) for single-frame sequences.
    """
    if prediction.shape != ground_truth.shape:
        raise ValueError(
            f"prediction/ground truth shapes differ: {tuple(prediction.shape)} vs {tuple(ground_truth.shape)}"
        )
    l1 = (prediction - ground_truth).abs().mean()
    if prediction.shape[0] >= 2:
        pred_d = prediction[1:] - prediction[:-1]
        gt_d = ground_truth[1:] - ground_truth[:-1]
        temporal = (pred_d - gt_d).abs().mean()
    else:
        logger.info("single-frame sequence: temporal loss term disabled")
        temporal = prediction.new_zeros(())
    if perceptual_net is None:
        perceptual_net = PerceptualFeatures().to(prediction.dtype)
    pf = perceptual_net(prediction)
    gf = perceptual_net(ground_truth)
    perceptual = sum((a - b).abs().mean() for a, b in zip(pf, gf)) / len(pf)
    total = l1_weight * l1 + temporal_weight * temporal + perceptual_weight * perceptual
    if return_parts:
        return total, {"l1": l1, "temporal": temporal, "perceptual": perceptual}
    return total


def save_alignment(model: AlignMergeModel, path: str, extra_manifest: dict | None = None):
    manifest = {
        "width": model.aligner.width,
        "num_moving": model.decoder.num_moving,
        "patch_size": model.aligner.patch_size,
        "radius": model.aligner.radius,
        "scale_keys": list(TemporalMergeDecoder.scale_keys),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    torch.save(
        {"state_dict": model.state_dict(), "manifest_json": json.dumps(manifest, sort_keys=True)},
        path,
    )


def load_alignment(path: str) -> tuple[AlignMergeModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    manifest = json.loads(blob["manifest_json"])
    model = AlignMergeModel(
        width=manifest["width"],
        num_moving=manifest["num_moving"],
        patch_size=manifest["patch_size"],
        radius=manifest["radius"],
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest
