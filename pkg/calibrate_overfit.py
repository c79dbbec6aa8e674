"""Calibration run for the end-to-end overfit acceptance thresholds."""

import os
import shutil
import sys
import time

import numpy as np
import torch

from diffhdr.config import ExperimentConfig, StageSettings
from diffhdr.datapipe import load_sequence
from diffhdr.denoiser import generate_prior
from diffhdr.diffusion import SamplerConfig, make_schedule
from diffhdr.metrics import psnr_t
from diffhdr.toydata import make_toy_dataset
from diffhdr.training import (
    PipelineModels,
    checkpoint_path,
    infer_sequence,
    infer_temporal_only,
    linearization_baseline,
    load_sequences,
    run_stage,
)
from diffhdr.autoencoder import load_autoencoder, tonemap_mu

ROOT = sys.argv[1] if len(sys.argv) > 1 else "/tmp/calib"
shutil.rmtree(ROOT, ignore_errors=True)
DATA = os.path.join(ROOT, "data")
WORK = os.path.join(ROOT, "work")
os.makedirs(DATA, exist_ok=True)

t0 = time.time()


def log(msg):
    print(f"[{time.time()-t0:7.0f}s] {msg}", flush=True)


make_toy_dataset(DATA, num_sequences=8, frames_per_sequence=6, size=64, seed=0)
log("toy dataset written")

config = ExperimentConfig(
    seed=0,
    data_dir=DATA,
    work_dir=WORK,
    exposure_pattern=[1.0, 8.0],
    image_size=64,
    ae_base_width=32,
    latent_channels=4,
    unet_base_width=64,
    embed_dim=64,
    timesteps=1000,
    sampler_steps=10,
    align_width=32,
    stages={
        "autoencoder": StageSettings(steps=4000, lr=2e-3, batch_size=8),
        "ldm": StageSettings(steps=5000, lr=1e-3, batch_size=16),
        "tcam": StageSettings(steps=1200, lr=5e-4, batch_size=1),
        "recon": StageSettings(steps=800, lr=1e-3, batch_size=1),
    },
)

seqs = load_sequences(DATA)
peak = max(s.hdr_peak for s in seqs)
log(f"dataset peak {peak:.3f}")

# stage 1: autoencoder
m = run_stage("autoencoder", config)
log(f"autoencoder done, final loss {np.mean(m.loss_history[-100:]):.5f}")
ae, _ = load_autoencoder(checkpoint_path(WORK, "autoencoder"))
vals = []
for seq in seqs[:4]:
    for hdr in seq.hdr_targets[:3]:
        tm = tonemap_mu(np.clip(hdr.pixels.astype(np.float64) / peak, 0, 1), 5000.0).astype(
            np.float32
        )
        rec, _ = ae.decode(ae.encode(tm))
        mse = float(np.mean((rec - tm) ** 2))
        vals.append(10 * np.log10(1 / mse) if mse > 0 else 99.0)
log(f"AE tonemapped recon PSNR: mean {np.mean(vals):.2f} min {np.min(vals):.2f}")

# stage 2: denoiser
m = run_stage("ldm", config)
log(f"ldm done, final loss {np.mean(m.loss_history[-100:]):.5f} (init {np.mean(m.loss_history[:100]):.4f})")

from diffhdr.denoiser import load_denoiser

dn, dn_man = load_denoiser(checkpoint_path(WORK, "ldm"))
schedule = make_schedule(1000, 1e-4, 0.02)
prior_vals = []
for si, seq in enumerate(seqs[:4]):
    for r in (1, 3):
        latent, _ = generate_prior(
            seq.frames[r], ae, dn, schedule, SamplerConfig(num_steps=10, seed=100 + si * 10 + r)
        )
        img, _ = ae.decode(latent)
        gt_tm = tonemap_mu(
            np.clip(seq.hdr_targets[r].pixels.astype(np.float64) / peak, 0, 1), 5000.0
        )
        mse = float(np.mean((img.astype(np.float64) - gt_tm) ** 2))
        prior_vals.append(10 * np.log10(1 / mse) if mse > 0 else 99.0)
log(f"decoded prior PSNR_T: mean {np.mean(prior_vals):.2f} min {np.min(prior_vals):.2f}")

# stage 3: alignment
m = run_stage("tcam", config)
log(f"tcam done, final loss {np.mean(m.loss_history[-50:]):.5f} (init {np.mean(m.loss_history[:50]):.4f})")

from diffhdr.alignment import load_alignment

align, al_man = load_alignment(checkpoint_path(WORK, "tcam"))
stage2_vals = []
for seq in seqs:
    frames = infer_temporal_only(seq, align, 3, peak, 5000.0)
    for est, gt in zip(frames, seq.hdr_targets):
        stage2_vals.append(psnr_t(est, gt, peak=peak))
log(f"stage-2 temporal-only PSNR_T: mean {np.mean(stage2_vals):.2f} min {np.min(stage2_vals):.2f}")

baseline_vals = []
for seq in seqs:
    for est, gt in zip(linearization_baseline(seq), seq.hdr_targets):
        baseline_vals.append(psnr_t(est, gt, peak=peak))
log(f"LDR-linearization baseline PSNR_T: mean {np.mean(baseline_vals):.2f}")

# stage 4: reconstruction
m = run_stage("recon", config)
log(f"recon done, final loss {np.mean(m.loss_history[-50:]):.5f} (init {np.mean(m.loss_history[:50]):.4f})")

models = PipelineModels(WORK)
stage3_vals = []
for seq in seqs:
    frames = infer_sequence(seq, models, SamplerConfig(num_steps=10, seed=0))
    for est, gt in zip(frames, seq.hdr_targets):
        stage3_vals.append(psnr_t(est, gt, peak=peak))
log(f"stage-3 reconstruction PSNR_T: mean {np.mean(stage3_vals):.2f} min {np.min(stage3_vals):.2f}")

log(
    f"SUMMARY baseline {np.mean(baseline_vals):.2f} | stage2 {np.mean(stage2_vals):.2f} | "
    f"stage3 {np.mean(stage3_vals):.2f} | prior {np.mean(prior_vals):.2f} | AE {np.mean(vals):.2f}"
)
