import os

import numpy as np
import pytest
import torch

from diffhdr.config import ExperimentConfig, StageSettings
from diffhdr.toydata import make_toy_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def micro_config(tmp_dir, data_dir, seed=0):
    """Smallest settings that still exercise every stage end to end."""
    return ExperimentConfig(
        seed=seed,
        data_dir=data_dir,
        work_dir=os.path.join(tmp_dir, "run"),
        exposure_pattern=[1.0, 8.0],
        image_size=32,
        ae_base_width=8,
        latent_channels=4,
        unet_base_width=8,
        embed_dim=16,
        timesteps=50,
        sampler_steps=4,
        align_width=8,
        stages={
            "autoencoder": StageSettings(steps=40, lr=2e-3, batch_size=4),
            "ldm": StageSettings(steps=30, lr=1e-3, batch_size=4),
            "tcam": StageSettings(steps=8, lr=2e-4, batch_size=1),
            "recon": StageSettings(steps=6, lr=1e-4, batch_size=1),
        },
    )


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    data_dir = str(tmp_path_factory.mktemp("data"))
    make_toy_dataset(data_dir, num_sequences=2, frames_per_sequence=4, size=32, seed=0)
    return data_dir


@pytest.fixture(scope="session")
def trained_pipeline(tmp_path_factory, toy_data):
    from diffhdr.training import run_stage

    tmp_dir = str(tmp_path_factory.mktemp("work"))
    config = micro_config(tmp_dir, toy_data)
    manifests = {
        stage: run_stage(stage, config) for stage in ("autoencoder", "ldm", "tcam", "recon")
    }
    return config, manifests


def finite_difference_check(
    loss_fn, parameters, h: float = 1e-6, max_coords_per_param: int = 40, seed: int = 0
):
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be a deterministic closure over float64 parameters.
    Returns the worst error max|ga - gn| / max(|ga| + |gn|, scale) over the
    sampled coordinates of every parameter tensor, where scale is 1e-6 of the
    largest analytic gradient magnitude: coordinates whose true gradient sits
    at the finite-difference noise floor cannot drown out real mismatches.
    """
    parameters = [p for p in parameters if p.requires_grad]
    for p in parameters:
        assert p.dtype == torch.float64, "finite differences need float64 parameters"
        p.grad = None
    loss = loss_fn()
    loss.backward()
    max_grad = max(p.grad.abs().max().item() for p in parameters if p.grad is not None)
    # the difference quotient carries absolute noise ~ eps * |loss| / h; keep
    # the denominator floor three decades above it so noise-floor coordinates
    # cannot trip the 1e-3 criterion while real mismatches still would
    fd_noise = 2.3e-16 * abs(loss.item()) / h
    scale = max(1e-8, 1e-6 * max_grad, 1e4 * fd_noise)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in parameters:
        flat = p.data.view(-1)
        gflat = p.grad.view(-1)
        n = flat.numel()
        coords = (
            np.arange(n)
            if n <= max_coords_per_param
            else rng.choice(n, size=max_coords_per_param, replace=False)
        )
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + h
            with torch.no_grad():
                lp = loss_fn().item()
            flat[i] = orig - h
            with torch.no_grad():
                lm = loss_fn().item()
            flat[i] = orig
            gn = (lp - lm) / (2 * h)
            ga = gflat[i].item()
            rel = abs(ga - gn) / max(abs(ga) + abs(gn), scale)
            worst = max(worst, rel)
    return worst
