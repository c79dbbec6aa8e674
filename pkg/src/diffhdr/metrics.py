"""Tonemapped-domain evaluation metrics and the patch-distribution figure.

PSNR and SSIM are computed on mu-law tonemapped frames after normalizing
both inputs by a shared radiance peak. The distribution tool embeds
tonemapped patches from several labeled sources into 2-D with a
deterministic-given-seed neighbor embedding and emits a scatter figure plus
the raw coordinates.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .autoencoder import DEFAULT_MU, tonemap_mu
from .datapipe import SIDECAR_NAME, HDRFrame

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _as_pixels(frame) -> np.ndarray:
    if isinstance(frame, HDRFrame):
        return frame.pixels
    return np.asarray(frame)


def _tonemapped(frame, mu: float, peak: float) -> np.ndarray:
    x = _as_pixels(frame).astype(np.float64)
    if (x < 0).any():
        raise ValueError("frames must be nonnegative")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    return tonemap_mu(np.clip(x / peak, 0.0, 1.0), mu)


def psnr_t(pred, gt, mu: float = DEFAULT_MU, cap: float = PSNR_CAP_DB, peak: float = 1.0) -> float:
    """PSNR in dB between mu-law tonemapped frames; identical frames hit the cap."""
    p = _tonemapped(pred, mu, peak)
    g = _tonemapped(gt, mu, peak)
    if p.shape != g.shape:
        raise ValueError(f"frame shapes differ: {p.shape} vs {g.shape}")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def _gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    phi = np.exp(-0.5 / (sigma * sigma) * x * x)
    return phi / phi.sum()


def ssim_t(pred, gt, mu: float = DEFAULT_MU, peak: float = 1.0) -> float:
    """Structural similarity on tonemapped frames.

    Gaussian window 11x11 (sigma 1.5), stabilizers C1 = 0.01^2 and
    C2 = 0.03^2 on unit dynamic range; the border band where the window
    leaves the frame is cropped before averaging over pixels and channels.
    """
    p = _tonemapped(pred, mu, peak)
    g = _tonemapped(gt, mu, peak)
    if p.shape != g.shape:
        raise ValueError(f"frame shapes differ: {p.shape} vs {g.shape}")
    pad = (SSIM_WINDOW - 1) // 2
    if p.shape[0] < SSIM_WINDOW or p.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window: {p.shape}"
        )
    g1d = _gaussian_kernel_1d(SSIM_SIGMA, pad)
    kernel = np.outer(g1d, g1d)
    c1 = 0.01**2
    c2 = 0.03**2

    def filt(x):
        return correlate(x, kernel, mode="nearest")

    values = []
    for ch in range(p.shape[2]):
        x, y = p[:, :, ch], g[:, :, ch]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        values.append((num / den)[pad:-pad, pad:-pad])
    return float(np.mean(values))


@dataclass
class MetricReport:
    """Per-frame tonemapped metrics plus their arithmetic means."""

    frame_names: list[str]
    psnr_values: list[float]
    ssim_values: list[float]
    mu: float
    peak: float

    @property
    def frame_count(self) -> int:
        return len(self.frame_names)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_values))

    def to_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "mu": self.mu,
            "peak": self.peak,
            "psnr_tonemapped_mean": self.psnr_mean,
            "ssim_tonemapped_mean": self.ssim_mean,
            "frames": [
                {"name": n, "psnr_tonemapped": p, "ssim_tonemapped": s}
                for n, p, s in zip(self.frame_names, self.psnr_values, self.ssim_values)
            ],
            # reserved for perceptual-model metrics when external weights exist
            "lpips": None,
            "musiq": None,
            "hdr_vdp2": None,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _frame_files(directory: str) -> dict[str, str]:
    return {
        name: os.path.join(directory, name)
        for name in sorted(os.listdir(directory))
        if name.endswith(".npy")
    }


def evaluate_run(
    pred_dir: str,
    gt_dir: str,
    mu: float = DEFAULT_MU,
    peak: float | None = None,
    cap: float = PSNR_CAP_DB,
) -> MetricReport:
    """Per-frame tonemapped metrics for name-matched .npy frames.

    If ``peak`` is not given it is taken from the ground-truth directory's
    sequence sidecar, falling back to the 99.9th-percentile radiance of the
    ground-truth frames.
    """
    preds = _frame_files(pred_dir)
    gts = _frame_files(gt_dir)
    missing = sorted(set(preds) ^ set(gts))
    if missing:
        raise ValueError(f"unpaired frames between pred and gt: {missing}")
    if not preds:
        raise ValueError(f"no .npy frames found in {pred_dir}")
    gt_frames = {n: np.load(p) for n, p in gts.items()}
    if peak is None:
        sidecar = os.path.join(gt_dir, SIDECAR_NAME)
        if os.path.isfile(sidecar):
            with open(sidecar) as fh:
                peak = float(json.load(fh)["hdr_peak"])
        else:
            peak = float(np.percentile(np.stack(list(gt_frames.values())), 99.9))
    names = sorted(preds)
    psnrs, ssims = [], []
    for name in names:
        pred = np.load(preds[name])
        gt = gt_frames[name]
        psnrs.append(psnr_t(pred, gt, mu=mu, cap=cap, peak=peak))
        ssims.append(ssim_t(pred, gt, mu=mu, peak=peak))
    return MetricReport(names, psnrs, ssims, mu=mu, peak=peak)


def hash_patches(patches: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(patches).tobytes()).hexdigest()


def distribution_plot(
    patch_sets: list[tuple[str, np.ndarray]],
    out_path: str,
    seed: int = 0,
    perplexity: float = 10.0,
    mu: float = DEFAULT_MU,
    peak: float = 1.0,
) -> np.ndarray:
    """Embed labeled patch sets into 2-D and emit a scatter figure.

    ``patch_sets`` is a list of (label, patches) with patches shaped
    (N, h, w, 3); at least two sets of at least 20 patches each. Patches are
    tonemapped, flattened, and embedded with a seeded exact-method
    t-distributed stochastic neighbor embedding; the coordinates (with the
    recorded perplexity) are written next to the figure as a CSV file.
    Returns the (total, 2) coordinates in input order.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from sklearn.manifold import TSNE

    if len(patch_sets) < 2:
        raise ValueError(f"need at least 2 patch sets, got {len(patch_sets)}")
    for label, patches in patch_sets:
        patches = np.asarray(patches)
        if patches.ndim != 4 or patches.shape[3] != 3:
            raise ValueError(f"{label}: patches must be (N, h, w, 3), got {patches.shape}")
        if patches.shape[0] < 20:
            raise ValueError(f"{label}: need at least 20 patches, got {patches.shape[0]}")
    rows = []
    labels = []
    for label, patches in patch_sets:
        tm = _tonemapped(np.asarray(patches, dtype=np.float64), mu, peak)
        rows.append(tm.reshape(tm.shape[0], -1))
        labels.extend([label] * tm.shape[0])
    x = np.concatenate(rows, axis=0)
    perplexity = min(perplexity, (len(x) - 1) / 3.0)
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        random_state=seed,
        init="pca",
        method="exact",
        n_jobs=1,
    )
    coords = tsne.fit_transform(x).astype(np.float64)

    coords_path = os.path.splitext(out_path)[0] + "_coords.csv"
    with open(coords_path, "w") as fh:
        fh.write(f"# seed={seed} perplexity={perplexity}\n")
        fh.write("label,x,y\n")
        for label, (cx, cy) in zip(labels, coords):
            fh.write(f"{label},{cx:.10e},{cy:.10e}\n")

    fig, ax = plt.subplots(figsize=(6, 5))
    start = 0
    for label, patches in patch_sets:
        n = len(patches)
        ax.scatter(coords[start : start + n, 0], coords[start : start + n, 1], s=12, label=label)
        start += n
    ax.legend()
    ax.set_xlabel("embedding dim 1")
    ax.set_ylabel("embedding dim 2")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return coords
