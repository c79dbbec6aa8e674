"""Mu-law tonemapping and the compact convolutional latent autoencoder.

The autoencoder compresses [0, 1] images (tonemapped HDR frames or LDR
condition frames, both handled by one shared checkpoint) by a factor f = 8
per side into a small latent volume, and its decoder exposes one feature tap
per resolution stage for downstream cross-attention fusion. The design is
deliberately norm-free so that eval-mode encoding is trivially deterministic.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_MU = 5000.0


def tonemap_mu(x, mu: float = DEFAULT_MU):
    """Mu-law range compressor log(1 + mu*x) / log(1 + mu) on [0, 1] inputs.

    Accepts numpy arrays or torch tensors (including scalars); strictly
    increasing and maps [0, 1] onto [0, 1] bijectively.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if torch.is_tensor(x):
        if (x < 0).any():
            raise ValueError("tonemap_mu input must be nonnegative")
        return torch.log1p(mu * x) / math.log1p(mu)
    x = np.asarray(x)
    if (x < 0).any():
        raise ValueError("tonemap_mu input must be nonnegative")
    return np.log1p(mu * x) / np.log1p(mu)


def inverse_tonemap_mu(y, mu: float = DEFAULT_MU):
    """Exact inverse of :func:`tonemap_mu`: ((1 + mu)**y - 1) / mu."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if torch.is_tensor(y):
        if (y < 0).any() or (y > 1).any():
            raise ValueError("inverse_tonemap_mu input must lie in [0, 1]")
        return torch.expm1(y * math.log1p(mu)) / mu
    y = np.asarray(y)
    if (y < 0).any() or (y > 1).any():
        raise ValueError("inverse_tonemap_mu input must lie in [0, 1]")
    return np.expm1(y * np.log1p(mu)) / mu


@dataclass
class LatentCode:
    """Encoded image: float32 (h, w, c) values plus source bookkeeping."""

    values: np.ndarray
    source_kind: str = "hdr_tonemapped"
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"latent values must be (h, w, c), got {self.values.shape}")
        if self.source_kind not in ("hdr_tonemapped", "ldr_condition"):
            raise ValueError(f"unknown source_kind: {self.source_kind!r}")


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv2(F.silu(self.conv1(F.silu(x))))
        return x + h


class Upsample(nn.Module):
    """Nearest-neighbor x2 followed by a conv (avoids checkerboard artifacts)."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class LatentAutoencoder(nn.Module):
    """Norm-free conv autoencoder with a diagonal-Gaussian latent head.

    Encoder: stem + 3 stride-2 stages (f = 8). Decoder mirrors with
    nearest+conv upsampling and exposes 4 feature taps at 1x, 2x, 4x and 8x
    the latent resolution; the last tap is the pre-output activation at image
    resolution.
    """

    downsample_factor = 8

    def __init__(self, base_width: int = 32, latent_channels: int = 4):
        super().__init__()
        self.base_width = base_width
        self.latent_channels = latent_channels
        w = base_width
        self.enc_stem = nn.Conv2d(3, w, 3, padding=1)
        self.enc_down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc_res1 = ResBlock(2 * w)
        self.enc_down2 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.enc_res2 = ResBlock(2 * w)
        self.enc_down3 = nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1)
        self.enc_res3 = ResBlock(2 * w)
        self.enc_head = nn.Conv2d(2 * w, 2 * latent_channels, 3, padding=1)

        self.dec_stem = nn.Conv2d(latent_channels, 2 * w, 3, padding=1)
        self.dec_res0 = ResBlock(2 * w)
        self.dec_up1 = Upsample(2 * w, 2 * w)
        self.dec_res1 = ResBlock(2 * w)
        self.dec_up2 = Upsample(2 * w, w)
        self.dec_res2 = ResBlock(w)
        self.dec_up3 = Upsample(w, w)
        self.dec_res3 = ResBlock(w)
        self.dec_head = nn.Conv2d(w, 3, 3, padding=1)

    @property
    def feature_channels(self) -> list[int]:
        w = self.base_width
        return [2 * w, 2 * w, w, w]

    def encode_moments(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior mean and log-variance for a (B, 3, H, W) batch in [0, 1]."""
        h = F.silu(self.enc_stem(x))
        h = self.enc_res1(F.silu(self.enc_down1(h)))
        h = self.enc_res2(F.silu(self.enc_down2(h)))
        h = self.enc_res3(F.silu(self.enc_down3(h)))
        moments = self.enc_head(h)
        mean, logvar = torch.chunk(moments, 2, dim=1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def decode_with_features(
        self, z: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Decode (B, C, h, w) latents; returns image in [0, 1] and 4 taps."""
        if z.shape[1] != self.latent_channels:
            raise ValueError(
                f"latent has {z.shape[1]} channels, model expects {self.latent_channels}"
            )
        h = self.dec_res0(self.dec_stem(z))
        taps = [h]
        h = self.dec_res1(self.dec_up1(h))
        taps.append(h)
        h = self.dec_res2(self.dec_up2(h))
        taps.append(h)
        h = self.dec_res3(self.dec_up3(h))
        taps.append(h)
        image = torch.sigmoid(self.dec_head(h))
        return image, taps

    def forward(self, x: torch.Tensor, sample_posterior: bool = True):
        mean, logvar = self.encode_moments(x)
        if sample_posterior and self.training:
            z = mean + torch.exp(0.5 * logvar) * torch.randn_like(mean)
        else:
            z = mean
        image, _ = self.decode_with_features(z)
        return image, mean, logvar

    # numpy-facing surface -------------------------------------------------

    def _prepare(self, image: np.ndarray) -> tuple[torch.Tensor, tuple[int, int]]:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        if not np.isfinite(image).all():
            raise ValueError("image contains non-finite values")
        h, w = image.shape[:2]
        f = self.downsample_factor
        pad_h = (-h) % f
        pad_w = (-w) % f
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        t = t.permute(2, 0, 1).unsqueeze(0)
        if pad_h or pad_w:
            t = F.pad(t, (0, pad_w, 0, pad_h), mode="reflect")
        return t, (h, w)

    @torch.no_grad()
    def encode(self, image: np.ndarray, source_kind: str = "hdr_tonemapped") -> LatentCode:
        """Deterministically encode one (H, W, 3) image in [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            t, size = self._prepare(image)
            mean, _ = self.encode_moments(t.to(next(self.parameters()).dtype))
        finally:
            self.train(was_training)
        values = mean[0].permute(1, 2, 0).numpy().astype(np.float32)
        return LatentCode(values=values, source_kind=source_kind, image_size=size)

    @torch.no_grad()
    def decode(self, latent: LatentCode) -> tuple[np.ndarray, list[np.ndarray]]:
        """Decode a latent back to an (H, W, 3) image plus per-scale features."""
        was_training = self.training
        self.eval()
        try:
            z = torch.from_numpy(latent.values).permute(2, 0, 1).unsqueeze(0)
            image, taps = self.decode_with_features(z.to(next(self.parameters()).dtype))
        finally:
            self.train(was_training)
        img = image[0].permute(1, 2, 0).numpy().astype(np.float32)
        feats = [t[0].permute(1, 2, 0).numpy().astype(np.float32) for t in taps]
        if latent.image_size is not None:
            h, w = latent.image_size
            img = img[:h, :w]
        return img, feats


def autoencoder_loss(
    model: LatentAutoencoder, batch: torch.Tensor, kl_weight: float = 1e-6
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    mean, logvar = model.encode_moments(batch)
    z = mean + torch.exp(0.5 * logvar) * torch.randn_like(mean)
    recon, _ = model.decode_with_features(z)
    rec_loss = F.mse_loss(recon, batch)
    kl = 0.5 * torch.mean(torch.sum(mean**2 + torch.exp(logvar) - 1.0 - logvar, dim=1))
    return rec_loss + kl_weight * kl, rec_loss, kl


def train_autoencoder(
    images: np.ndarray,
    steps: int = 2000,
    batch_size: int = 8,
    lr: float = 2e-4,
    kl_weight: float = 1e-6,
    base_width: int = 32,
    latent_channels: int = 4,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[LatentAutoencoder, list[float]]:
    """Fit the autoencoder on an (N, H, W, 3) stack of [0, 1] images.

    Aborts with a diagnostic if the loss stops being finite. Returns the
    trained model and the per-step loss history.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    torch.manual_seed(seed)
    model = LatentAutoencoder(base_width=base_width, latent_channels=latent_channels)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    data = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    rng = np.random.default_rng(seed)
    history = []
    model.train()
    for step in range(steps):
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        batch = data[torch.from_numpy(idx)]
        loss, rec, kl = autoencoder_loss(model, batch, kl_weight)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"autoencoder training diverged at step {step}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
        if log_every and (step + 1) % log_every == 0:
            print(f"[autoencoder] step {step + 1}/{steps} loss {loss.item():.5f}")
    model.eval()
    return model, history


def save_autoencoder(model: LatentAutoencoder, path: str, extra_manifest: dict | None = None):
    """Single-file checkpoint: weights plus a JSON manifest of hyperparameters."""
    manifest = {
        "base_width": model.base_width,
        "latent_channels": model.latent_channels,
        "downsample_factor": model.downsample_factor,
        "feature_channels": model.feature_channels,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    torch.save(
        {"state_dict": model.state_dict(), "manifest_json": json.dumps(manifest, sort_keys=True)},
        path,
    )


def load_autoencoder(path: str) -> tuple[LatentAutoencoder, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    manifest = json.loads(blob["manifest_json"])
    model = LatentAutoencoder(
        base_width=manifest["base_width"], latent_channels=manifest["latent_channels"]
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, manifest
