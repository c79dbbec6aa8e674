"""Noise schedules, forward diffusion, and a deterministic short-step sampler.

Everything here is framework-agnostic: schedule coefficients are Python
floats, so the array operations broadcast identically over numpy arrays and
torch tensors. Timesteps are 1-based; the cumulative signal level at t = 0 is
defined as 1 so that a final update step can land exactly on the clean
estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep noise variances and derived cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal level, with the t = 0 convention alpha_bar = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


@dataclass
class NoisySample:
    """A noised latent together with the timestep and the exact noise used."""

    latent: object
    timestep: int
    noise: object


@dataclass
class SamplerConfig:
    num_steps: int = 10
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")


def make_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> DiffusionSchedule:
    """Build a variance schedule of length T.

    ``linear``: betas evenly spaced from beta_start to beta_end.
    ``cosine``: betas derived from a squared-cosine cumulative signal curve
    (offset 0.008), clipped into (beta_start, beta_end-compatible) bounds.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        curve = np.cos((grid + s) / (1 + s) * math.pi / 2) ** 2
        curve /= curve[0]
        betas = np.clip(1.0 - curve[1:] / curve[:-1], beta_start, 0.999)
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_shapes(a, b, what: str) -> None:
    if tuple(np.shape(a)) != tuple(np.shape(b)):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_step(z_prev, t: int, schedule: DiffusionSchedule, noise):
    """One step of the forward noising recursion."""
    _check_shapes(z_prev, noise, "forward_step")
    a = schedule.alpha(t)
    return math.sqrt(a) * z_prev + math.sqrt(1.0 - a) * noise


def q_sample(z0, t: int, schedule: DiffusionSchedule, noise) -> NoisySample:
    """Jump directly to timestep t via the closed form of the recursion."""
    _check_shapes(z0, noise, "q_sample")
    ab = schedule.alpha_bar(t)
    latent = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise
    return NoisySample(latent=latent, timestep=t, noise=noise)


def ddim_step(
    z_t,
    eps_hat,
    t: int,
    t_prev: int,
    schedule: DiffusionSchedule,
    eta: float = 0.0,
    noise=None,
):
    """Move a latent from timestep t to t_prev given a noise prediction.

    Predicts the clean latent, then re-noises it to level t_prev. With
    eta = 0 the update is deterministic; eta > 0 blends in fresh noise with
    the usual variance interpolation.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    if eta > 0 and noise is None:
        raise ValueError("eta > 0 requires a noise array")
    _check_shapes(z_t, eps_hat, "ddim_step")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
    out = math.sqrt(ab_p) * z0_hat + math.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps_hat
    if eta > 0:
        out = out + sigma * noise
    return out


def sampling_timesteps(T: int, num_steps: int) -> list[int]:
    """Descending timestep subsequence: uniform stride from T down to 1."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    ts = np.unique(np.round(np.linspace(1, T, num_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def sample(
    denoiser,
    condition,
    schedule: DiffusionSchedule,
    config: SamplerConfig,
    shape: tuple[int, ...] | None = None,
):
    """Draw one latent by iterating ddim_step over a short timestep subsequence.

    ``denoiser(z_t, condition, t)`` must return the predicted noise. The
    trajectory starts from standard Gaussian noise seeded by ``config.seed``,
    visits ``num_steps`` uniformly strided timesteps ending at the smallest
    scheduled one, and finishes with a projection to t = 0. Deterministic and
    repeat-run identical when eta = 0.
    """
    if shape is None:
        shape = np.shape(condition)
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal(shape)
    ts = sampling_timesteps(schedule.T, config.num_steps)
    for t, t_prev in zip(ts, ts[1:] + [0]):
        eps_hat = denoiser(z, condition, t)
        _check_shapes(z, eps_hat, "sample: denoiser output")
        step_noise = rng.standard_normal(shape) if config.eta > 0 else None
        z = ddim_step(z, eps_hat, t, t_prev, schedule, config.eta, step_noise)
    return z
