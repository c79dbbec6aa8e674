"""Alternating-exposure LDR synthesis and frame sequence I/O.

HDR frames are scene-linear radiance maps (float32, values >= 0). LDR frames
are display-referred captures simulated by exposing, clipping, gamma-encoding
(gamma = 2.2) and quantizing to a fixed bit depth. Each LDR frame is expanded
into a 6-channel network input: the display-referred pixels concatenated with
their linearized counterpart pixels**gamma / exposure.

On disk a sequence is a directory of per-frame files plus one JSON sidecar:

    hdr_0000.npy ...   float32 (H, W, 3) scene-linear radiance, lossless
    ldr_0000.png ...   8-bit RGB PNG, lossless
    sequence.json      exposure pattern, per-frame exposures, gamma,
                       bit depth, reference index, radiance peak
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

DEFAULT_GAMMA = 2.2
SIDECAR_NAME = "sequence.json"


def _require_hwc3(pixels: np.ndarray, name: str) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {pixels.shape}")
    if not np.isfinite(pixels).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class HDRFrame:
    """Scene-linear radiance frame, float32 (H, W, 3), all values >= 0."""

    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        _require_hwc3(self.pixels, "HDRFrame.pixels")
        if (self.pixels < 0).any():
            raise ValueError("HDRFrame pixels must be nonnegative")


@dataclass
class LDRFrame:
    """Display-referred frame, float32 (H, W, 3) in [0, 1], with its exposure."""

    pixels: np.ndarray
    exposure: float
    index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        _require_hwc3(self.pixels, "LDRFrame.pixels")
        if (self.pixels < 0).any() or (self.pixels > 1).any():
            raise ValueError("LDRFrame pixels must lie in [0, 1]")
        if not self.exposure > 0:
            raise ValueError(f"exposure must be positive, got {self.exposure}")


@dataclass
class NetworkInput:
    """6-channel input: LDR pixels stacked with pixels**gamma / exposure."""

    channels: np.ndarray
    exposure: float
    index: int = 0

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[2] != 6:
            raise ValueError(
                f"NetworkInput.channels must have shape (H, W, 6), got {self.channels.shape}"
            )
        if not self.exposure > 0:
            raise ValueError(f"exposure must be positive, got {self.exposure}")

    @property
    def ldr(self) -> np.ndarray:
        return self.channels[:, :, :3]

    @property
    def linear(self) -> np.ndarray:
        return self.channels[:, :, 3:]


@dataclass
class FrameSequence:
    """Ordered network inputs paired with ground-truth HDR frames.

    ``exposure_pattern`` (length 2 or 3) cycles over the frames, so
    ``frames[i].exposure == exposure_pattern[i % len(pattern)]``.
    ``hdr_peak`` is the fixed normalization radiance (99.9th percentile of the
    ground truth) used before mu-law tonemapping anywhere downstream.
    """

    frames: list[NetworkInput]
    hdr_targets: list[HDRFrame]
    exposure_pattern: list[float]
    reference_index: int
    gamma: float = DEFAULT_GAMMA
    bit_depth: int = 8
    hdr_peak: float = 1.0

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("FrameSequence needs at least one frame")
        if len(self.frames) != len(self.hdr_targets):
            raise ValueError("frames and hdr_targets must have equal length")
        if len(self.exposure_pattern) not in (2, 3):
            raise ValueError(
                f"exposure pattern length must be 2 or 3, got {len(self.exposure_pattern)}"
            )
        if not all(e > 0 for e in self.exposure_pattern):
            raise ValueError("all exposures must be positive")
        if not 0 <= self.reference_index < len(self.frames):
            raise ValueError(
                f"reference_index {self.reference_index} out of range for {len(self.frames)} frames"
            )
        n = len(self.exposure_pattern)
        for i, frame in enumerate(self.frames):
            expected = self.exposure_pattern[i % n]
            if frame.exposure != expected:
                raise ValueError(
                    f"frame {i} exposure {frame.exposure} does not match pattern value {expected}"
                )

    def __len__(self) -> int:
        return len(self.frames)


def quantize(values: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Round values in [0, 1] to the uniform grid of a given bit depth."""
    if bit_depth < 1:
        raise ValueError(f"bit depth must be >= 1, got {bit_depth}")
    levels = float(2**bit_depth - 1)
    codes = np.round(np.asarray(values, dtype=np.float32) * levels)
    return (codes / np.float32(levels)).astype(np.float32)


def synthesize_ldr(
    hdr: HDRFrame,
    exposure: float,
    gamma: float = DEFAULT_GAMMA,
    bit_depth: int = 8,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LDRFrame:
    """Simulate an LDR capture of an HDR frame at a given relative exposure.

    The scene radiance is scaled by ``exposure``, optionally perturbed by
    additive Gaussian read noise, clipped to [0, 1], gamma-encoded with
    ``1/gamma`` and quantized to ``bit_depth`` bits. Deterministic unless
    ``noise_sigma > 0``, in which case ``rng`` must be provided.
    """
    if not exposure > 0:
        raise ValueError(f"exposure must be positive, got {exposure}")
    exposed = hdr.pixels.astype(np.float64) * exposure
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        exposed = exposed + noise_sigma * rng.standard_normal(exposed.shape)
    clipped = np.clip(exposed, 0.0, 1.0)
    display = np.power(clipped, 1.0 / gamma)
    return LDRFrame(
        pixels=quantize(display.astype(np.float32), bit_depth),
        exposure=float(exposure),
        index=hdr.index,
    )


def linearize(ldr: LDRFrame, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Map display-referred pixels back to exposure-normalized linear values."""
    lin = np.power(ldr.pixels.astype(np.float64), gamma) / ldr.exposure
    return lin.astype(np.float32)


def build_network_input(ldr: LDRFrame, gamma: float = DEFAULT_GAMMA) -> NetworkInput:
    """Stack an LDR frame with its linearized counterpart into 6 channels."""
    channels = np.concatenate([ldr.pixels, linearize(ldr, gamma)], axis=2)
    return NetworkInput(channels=channels, exposure=ldr.exposure, index=ldr.index)


def quantization_bound(
    ldr_pixels: np.ndarray, exposure: float, gamma: float = DEFAULT_GAMMA, bit_depth: int = 8
) -> np.ndarray:
    """Per-pixel bound on |linearize(ldr) - hdr| for well-exposed pixels.

    Quantization moves the display-domain value by at most half a code step
    h; the gamma curve amplifies that by at most gamma * (x + h)**(gamma-1)
    around display value x, and the exposure division rescales it.
    """
    h = 0.5 / (2**bit_depth - 1)
    disp = ldr_pixels.astype(np.float64)
    return gamma * np.power(disp + h, gamma - 1.0) * h / exposure


def make_sequence(
    hdr_frames: list[HDRFrame],
    exposure_pattern: list[float],
    reference_index: int | None = None,
    gamma: float = DEFAULT_GAMMA,
    bit_depth: int = 8,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> FrameSequence:
    """Synthesize an alternating-exposure sequence from ground-truth HDR frames.

    Frame i is captured with ``exposure_pattern[i % len(pattern)]``. The
    reference defaults to the temporal center. The 99.9th-percentile radiance
    over all frames is recorded as ``hdr_peak``.
    """
    if len(hdr_frames) == 0:
        raise ValueError("hdr_frames must not be empty")
    if len(exposure_pattern) not in (2, 3):
        raise ValueError(
            f"exposure pattern length must be 2 or 3, got {len(exposure_pattern)}"
        )
    if not all(e > 0 for e in exposure_pattern):
        raise ValueError("all exposures must be positive")
    if reference_index is None:
        reference_index = len(hdr_frames) // 2
    rng = np.random.default_rng(seed) if noise_sigma > 0 else None
    frames = []
    n = len(exposure_pattern)
    for i, hdr in enumerate(hdr_frames):
        hdr.index = i
        ldr = synthesize_ldr(
            hdr, exposure_pattern[i % n], gamma, bit_depth, noise_sigma, rng
        )
        frames.append(build_network_input(ldr, gamma))
    peak = float(np.percentile(np.stack([h.pixels for h in hdr_frames]), 99.9))
    return FrameSequence(
        frames=frames,
        hdr_targets=hdr_frames,
        exposure_pattern=[float(e) for e in exposure_pattern],
        reference_index=reference_index,
        gamma=gamma,
        bit_depth=bit_depth,
        hdr_peak=max(peak, np.finfo(np.float32).tiny),
    )


def save_sequence(sequence: FrameSequence, path: str) -> None:
    """Write a sequence to a directory: npy HDR, png LDR, JSON sidecar."""
    if sequence.bit_depth != 8:
        raise ValueError(
            f"on-disk LDR format is 8-bit; cannot save bit depth {sequence.bit_depth}"
        )
    os.makedirs(path, exist_ok=True)
    for i, (frame, hdr) in enumerate(zip(sequence.frames, sequence.hdr_targets)):
        np.save(os.path.join(path, f"hdr_{i:04d}.npy"), hdr.pixels)
        codes = np.round(frame.ldr * 255.0).astype(np.uint8)
        Image.fromarray(codes, mode="RGB").save(os.path.join(path, f"ldr_{i:04d}.png"))
    sidecar = {
        "num_frames": len(sequence),
        "exposure_pattern": sequence.exposure_pattern,
        "exposures": [f.exposure for f in sequence.frames],
        "gamma": sequence.gamma,
        "bit_depth": sequence.bit_depth,
        "reference_index": sequence.reference_index,
        "hdr_peak": sequence.hdr_peak,
    }
    with open(os.path.join(path, SIDECAR_NAME), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_sequence(path: str) -> FrameSequence:
    """Load a sequence saved by :func:`save_sequence`."""
    sidecar_path = os.path.join(path, SIDECAR_NAME)
    if not os.path.isfile(sidecar_path):
        raise FileNotFoundError(f"missing sequence sidecar: {sidecar_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    frames = []
    hdr_targets = []
    for i in range(meta["num_frames"]):
        hdr_path = os.path.join(path, f"hdr_{i:04d}.npy")
        ldr_path = os.path.join(path, f"ldr_{i:04d}.png")
        for p in (hdr_path, ldr_path):
            if not os.path.isfile(p):
                raise FileNotFoundError(f"missing sequence frame file: {p}")
        hdr_targets.append(HDRFrame(pixels=np.load(hdr_path), index=i))
        codes = np.asarray(Image.open(ldr_path).convert("RGB"), dtype=np.uint8)
        ldr = LDRFrame(
            pixels=codes.astype(np.float32) / np.float32(255.0),
            exposure=float(meta["exposures"][i]),
            index=i,
        )
        frames.append(build_network_input(ldr, meta["gamma"]))
    return FrameSequence(
        frames=frames,
        hdr_targets=hdr_targets,
        exposure_pattern=[float(e) for e in meta["exposure_pattern"]],
        reference_index=int(meta["reference_index"]),
        gamma=float(meta["gamma"]),
        bit_depth=int(meta["bit_depth"]),
        hdr_peak=float(meta["hdr_peak"]),
    )


def sequences_equal(a: FrameSequence, b: FrameSequence) -> bool:
    """Field-by-field equality, exact on all pixel data."""
    if len(a) != len(b):
        return False
    if a.exposure_pattern != b.exposure_pattern or a.reference_index != b.reference_index:
        return False
    if a.gamma != b.gamma or a.bit_depth != b.bit_depth or a.hdr_peak != b.hdr_peak:
        return False
    for fa, fb in zip(a.frames, b.frames):
        if fa.exposure != fb.exposure or not np.array_equal(fa.channels, fb.channels):
            return False
    for ha, hb in zip(a.hdr_targets, b.hdr_targets):
        if not np.array_equal(ha.pixels, hb.pixels):
            return False
    return True
