"""Synthetic HDR test scenes: moving bright blobs over a smooth background.

Scenes are built to exercise the interesting regimes deliberately: a dim
region that only the long exposure resolves, highlights well above 1.0 that
every exposure clips somewhere, and constant-velocity motion so alignment
has real work to do.
"""

from __future__ import annotations

import os

import numpy as np

from .datapipe import FrameSequence, HDRFrame, make_sequence, save_sequence


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 8) -> np.ndarray:
    coarse = rng.random((cells, cells))
    reps = size // cells + 1
    field = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    # cheap blur to remove the block edges
    for _ in range(3):
        field = (
            field
            + np.roll(field, 1, 0)
            + np.roll(field, -1, 0)
            + np.roll(field, 1, 1)
            + np.roll(field, -1, 1)
        ) / 5.0
    return field


def make_toy_hdr_video(
    num_frames: int = 6, size: int = 64, seed: int = 0, peak: float = 4.0
) -> list[HDRFrame]:
    """Deterministic scene-linear frames with moving highlights and shadows."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = np.stack([_smooth_field(rng, size) for _ in range(3)], axis=2)
    base = 0.02 + 0.25 * base
    # dim corner: radiance around 1e-3..1e-2, invisible at short exposure
    shade = np.exp(-((yy / size) ** 2 + (xx / size) ** 2) * 6.0)[:, :, None]
    base = base * (1.0 - 0.97 * shade) + 0.002

    n_blobs = 3
    centers = rng.random((n_blobs, 2)) * size
    velocity = rng.uniform(-2.0, 2.0, size=(n_blobs, 2))
    amps = rng.uniform(0.5, 1.0, size=n_blobs) * peak
    tints = 0.6 + 0.4 * rng.random((n_blobs, 3))
    widths = rng.uniform(3.0, 7.0, size=n_blobs)

    frames = []
    for k in range(num_frames):
        img = base.copy()
        for b in range(n_blobs):
            cy, cx = centers[b] + velocity[b] * k
            cy %= size
            cx %= size
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blob = amps[b] * np.exp(-d2 / (2 * widths[b] ** 2))
            img = img + blob[:, :, None] * tints[b]
        frames.append(HDRFrame(pixels=img.astype(np.float32), index=k))
    return frames


def make_toy_dataset(
    out_dir: str,
    num_sequences: int = 8,
    frames_per_sequence: int = 6,
    size: int = 64,
    exposure_pattern: list[float] = (1.0, 8.0),
    seed: int = 0,
    peak: float = 4.0,
) -> list[str]:
    """Write toy sequences under ``out_dir``; returns the sequence paths."""
    paths = []
    for s in range(num_sequences):
        hdr = make_toy_hdr_video(frames_per_sequence, size, seed=seed + s, peak=peak)
        seq = make_sequence(hdr, list(exposure_pattern))
        path = os.path.join(out_dir, f"seq_{s:03d}")
        save_sequence(seq, path)
        paths.append(path)
    return paths


def toy_sequences(
    num_sequences: int = 8,
    frames_per_sequence: int = 6,
    size: int = 64,
    exposure_pattern: list[float] = (1.0, 8.0),
    seed: int = 0,
    peak: float = 4.0,
) -> list[FrameSequence]:
    """In-memory variant of :func:`make_toy_dataset`."""
    seqs = []
    for s in range(num_sequences):
        hdr = make_toy_hdr_video(frames_per_sequence, size, seed=seed + s, peak=peak)
        seqs.append(make_sequence(hdr, list(exposure_pattern)))
    return seqs
