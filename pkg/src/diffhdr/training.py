"""Staged training orchestrator and full-pipeline inference.

Four stages, each owning exactly one checkpoint:

    autoencoder   latent autoencoder on tonemapped HDR + LDR frames
    ldm           exposure-conditioned latent denoiser (needs autoencoder)
    tcam          aligner + temporal merge decoder, supervised directly
    recon         zero-init cross-attention head (needs all of the above,
                  which stay frozen and digest-verified)

Every run writes a manifest with the resolved config, a content hash of the
package source, loss curves, timings, and checkpoint digests; identical
config + seed reproduces identical checkpoint bytes in deterministic mode.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import (
    AlignMergeModel,
    PerceptualFeatures,
    composite_recon_loss,
    load_alignment,
    save_alignment,
)
from .autoencoder import (
    load_autoencoder,
    save_autoencoder,
    tonemap_mu,
    train_autoencoder,
)
from .config import ConfigurationError, ConfigView, ExperimentConfig
from .datapipe import FrameSequence, HDRFrame, load_sequence
from .denoiser import (
    ExposureCondUNet,
    denoising_loss,
    generate_prior,
    load_denoiser,
    save_denoiser,
)
from .diffusion import SamplerConfig, make_schedule
from .reconstruction import (
    ReconstructionHead,
    load_reconstruction,
    save_reconstruction,
)

STAGES = ("autoencoder", "ldm", "tcam", "recon")
PREREQUISITES = {
    "autoencoder": (),
    "ldm": ("autoencoder",),
    "tcam": (),
    "recon": ("autoencoder", "ldm", "tcam"),
}


def checkpoint_path(work_dir: str, stage: str) -> str:
    return os.path.join(work_dir, f"{stage}.pt")


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_hash() -> str:
    """Content hash over the installed package source files."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        if name.endswith(".py"):
            with open(os.path.join(root, name), "rb") as fh:
                h.update(name.encode())
                h.update(fh.read())
    return h.hexdigest()


def derive_seed(*parts) -> int:
    """Deterministic sub-seed from any hashable parts."""
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunManifest:
    stage: str
    config: dict
    code_hash: str
    consumed_keys: list[str]
    loss_history: list[float]
    wall_seconds: float
    checkpoint_digest: str
    frozen_digests: dict[str, str]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "config": self.config,
            "code_hash": self.code_hash,
            "consumed_keys": self.consumed_keys,
            "loss_history": self.loss_history,
            "wall_seconds": self.wall_seconds,
            "checkpoint_digest": self.checkpoint_digest,
            "frozen_digests": self.frozen_digests,
            "extra": self.extra,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_sequences(data_dir: str) -> list[FrameSequence]:
    if not os.path.isdir(data_dir):
        raise ConfigurationError(f"data directory does not exist: {data_dir}")
    seqs = []
    for name in sorted(os.listdir(data_dir)):
        path = os.path.join(data_dir, name)
        if os.path.isdir(path) and os.path.isfile(os.path.join(path, "sequence.json")):
            seqs.append(load_sequence(path))
    if not seqs:
        raise ConfigurationError(f"no sequences found under {data_dir}")
    return seqs


def dataset_peak(sequences: list[FrameSequence]) -> float:
    return max(seq.hdr_peak for seq in sequences)


def _window_indices(i: int, n: int, window: int) -> list[int]:
    half = window // 2
    return [min(max(j, 0), n - 1) for j in range(i - half, i + half + 1)]


def _window_tensor(seq: FrameSequence, i: int, window: int) -> torch.Tensor:
    idxs = _window_indices(i, len(seq), window)
    stack = np.stack([seq.frames[j].channels for j in idxs])
    return torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()


def _tonemapped_target(seq: FrameSequence, i: int, peak: float, mu: float) -> torch.Tensor:
    tm = tonemap_mu(np.clip(seq.hdr_targets[i].pixels.astype(np.float64) / peak, 0.0, 1.0), mu)
    return torch.from_numpy(tm.astype(np.float32)).permute(2, 0, 1)


def linearization_baseline(sequence: FrameSequence) -> list[HDRFrame]:
    """Per-frame HDR estimate from the reference alone: its linearized pixels."""
    return [
        HDRFrame(pixels=frame.linear.copy(), index=frame.index)
        for frame in sequence.frames
    ]


# ---------------------------------------------------------------------------
# stage bodies


def _stage_autoencoder(cfg) -> tuple[list[float], dict]:
    seqs = load_sequences(cfg.data_dir)
    peak = dataset_peak(seqs)
    images = []
    for seq in seqs:
        for hdr in seq.hdr_targets:
            normalized = np.clip(hdr.pixels.astype(np.float64) / peak, 0.0, 1.0)
            images.append(tonemap_mu(normalized, cfg.mu).astype(np.float32))
        for frame in seq.frames:
            images.append(frame.ldr)
    settings = cfg.stages["autoencoder"]
    model, losses = train_autoencoder(
        np.stack(images),
        steps=settings.steps,
        batch_size=settings.batch_size,
        lr=settings.lr,
        kl_weight=cfg.kl_weight,
        base_width=cfg.ae_base_width,
        latent_channels=cfg.latent_channels,
        seed=derive_seed(cfg.seed, "autoencoder"),
    )
    save_autoencoder(
        model,
        checkpoint_path(cfg.work_dir, "autoencoder"),
        extra_manifest={"mu": cfg.mu, "dataset_peak": peak},
    )
    return losses, {"dataset_peak": peak, "num_images": len(images)}


def _stage_ldm(cfg) -> tuple[list[float], dict]:
    ae, ae_manifest = load_autoencoder(checkpoint_path(cfg.work_dir, "autoencoder"))
    peak = ae_manifest["dataset_peak"]
    seqs = load_sequences(cfg.data_dir)
    z0s, conds, exposures = [], [], []
    for seq in seqs:
        for hdr, frame in zip(seq.hdr_targets, seq.frames):
            normalized = np.clip(hdr.pixels.astype(np.float64) / peak, 0.0, 1.0)
            tm = tonemap_mu(normalized, cfg.mu).astype(np.float32)
            z0s.append(ae.encode(tm, "hdr_tonemapped").values)
            conds.append(ae.encode(frame.ldr, "ldr_condition").values)
            exposures.append(frame.exposure)
    z0 = torch.from_numpy(np.stack(z0s)).permute(0, 3, 1, 2).contiguous()
    cond = torch.from_numpy(np.stack(conds)).permute(0, 3, 1, 2).contiguous()
    e = torch.tensor(exposures, dtype=torch.float32)

    torch.manual_seed(derive_seed(cfg.seed, "ldm", "init"))
    model = ExposureCondUNet(
        latent_channels=cfg.latent_channels,
        base_width=cfg.unet_base_width,
        embed_dim=cfg.embed_dim,
        window=cfg.attn_window,
        exposure_encoding=cfg.exposure_encoding,
    )
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)
    settings = cfg.stages["ldm"]
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "ldm", "noise"))
    rng = np.random.default_rng(derive_seed(cfg.seed, "ldm", "batch"))
    losses = []
    model.train()
    for _ in range(settings.steps):
        idx = torch.from_numpy(rng.integers(0, len(z0), size=min(settings.batch_size, len(z0))))
        loss = denoising_loss(model, schedule, z0[idx], cond[idx], e[idx], generator=gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    model.eval()
    save_denoiser(
        model,
        checkpoint_path(cfg.work_dir, "ldm"),
        extra_manifest={
            "timesteps": cfg.timesteps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
            "schedule_kind": cfg.schedule_kind,
            "mu": cfg.mu,
            "dataset_peak": peak,
        },
    )
    return losses, {"num_latents": len(z0)}


def _stage_tcam(cfg) -> tuple[list[float], dict]:
    seqs = load_sequences(cfg.data_dir)
    peak = dataset_peak(seqs)
    window = cfg.window_size
    torch.manual_seed(derive_seed(cfg.seed, "tcam", "init"))
    model = AlignMergeModel(
        width=cfg.align_width,
        num_moving=window - 1,
        patch_size=cfg.patch_size,
        radius=cfg.search_radius,
    )
    perceptual = PerceptualFeatures(cfg.perceptual_seed)
    settings = cfg.stages["tcam"]
    opt = torch.optim.Adam(model.parameters(), lr=settings.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "tcam", "batch"))
    losses = []
    model.train()
    for _ in range(settings.steps):
        seq = seqs[rng.integers(0, len(seqs))]
        r = int(rng.integers(0, len(seq) - 1))
        preds, targets = [], []
        for rr in (r, r + 1):
            _, merged = model(_window_tensor(seq, rr, window), window // 2)
            preds.append(merged[0])
            targets.append(_tonemapped_target(seq, rr, peak, cfg.mu))
        loss = composite_recon_loss(
            torch.stack(preds),
            torch.stack(targets),
            l1_weight=cfg.l1_weight,
            temporal_weight=cfg.temporal_weight,
            perceptual_weight=cfg.perceptual_weight,
            perceptual_net=perceptual,
        )
        if not torch.isfinite(loss):
            raise RuntimeError(f"alignment training diverged: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    model.eval()
    save_alignment(
        model,
        checkpoint_path(cfg.work_dir, "tcam"),
        extra_manifest={
            "mu": cfg.mu,
            "dataset_peak": peak,
            "window_size": window,
            "loss_weights": [cfg.l1_weight, cfg.temporal_weight, cfg.perceptual_weight],
        },
    )
    return losses, {"dataset_peak": peak}


def _prior_feature_dict(features: list[np.ndarray]) -> dict[int, torch.Tensor]:
    scales = (1, 2, 4, 8)
    out = {}
    for s, feat in zip(scales, features):
        out[s] = torch.from_numpy(feat).permute(2, 0, 1).unsqueeze(0)
    return out


def _precompute_recon_inputs(cfg, seqs, ae, denoiser, align, schedule, peak):
    """Frozen producers: cache temporal and prior features per reference frame."""
    window = cfg.window_size
    cache = []
    for s_idx, seq in enumerate(seqs):
        per_seq = []
        for r in range(len(seq)):
            with torch.no_grad():
                temporal, _ = align(_window_tensor(seq, r, window), window // 2)
            sampler = SamplerConfig(
                num_steps=cfg.sampler_steps,
                eta=cfg.sampler_eta,
                seed=derive_seed(cfg.seed, "prior", s_idx, r),
            )
            _, features = generate_prior(seq.frames[r], ae, denoiser, schedule, sampler)
            per_seq.append(
                {
                    "temporal": {k: v.detach() for k, v in temporal.items()},
                    "prior": _prior_feature_dict(features),
                    "target": _tonemapped_target(seq, r, peak, cfg.mu),
                }
            )
        cache.append(per_seq)
    return cache


def _stage_recon(cfg) -> tuple[list[float], dict]:
    ae, ae_manifest = load_autoencoder(checkpoint_path(cfg.work_dir, "autoencoder"))
    denoiser, dn_manifest = load_denoiser(checkpoint_path(cfg.work_dir, "ldm"))
    align, _ = load_alignment(checkpoint_path(cfg.work_dir, "tcam"))
    for m in (ae, denoiser, align):
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
    peak = ae_manifest["dataset_peak"]
    schedule = make_schedule(
        dn_manifest["timesteps"],
        dn_manifest["beta_start"],
        dn_manifest["beta_end"],
        dn_manifest["schedule_kind"],
    )
    seqs = load_sequences(cfg.data_dir)
    cache = _precompute_recon_inputs(cfg, seqs, ae, denoiser, align, schedule, peak)

    prior_ch = {s: c for s, c in zip((1, 2, 4, 8), ae.feature_channels)}
    torch.manual_seed(derive_seed(cfg.seed, "recon", "init"))
    head = ReconstructionHead(
        temporal_channels=cfg.align_width,
        prior_channels=prior_ch,
        control_scale=cfg.control_scale,
        attn_window=cfg.recon_attn_window,
    )
    perceptual = PerceptualFeatures(cfg.perceptual_seed)
    settings = cfg.stages["recon"]
    opt = torch.optim.Adam(head.parameters(), lr=settings.lr)
    rng = np.random.default_rng(derive_seed(cfg.seed, "recon", "batch"))
    losses = []
    head.train()
    for _ in range(settings.steps):
        s = int(rng.integers(0, len(seqs)))
        r = int(rng.integers(0, len(seqs[s]) - 1))
        preds, targets = [], []
        for rr in (r, r + 1):
            entry = cache[s][rr]
            preds.append(head(entry["temporal"], entry["prior"])[0])
            targets.append(entry["target"])
        loss = composite_recon_loss(
            torch.stack(preds),
            torch.stack(targets),
            l1_weight=cfg.l1_weight,
            temporal_weight=cfg.temporal_weight,
            perceptual_weight=cfg.perceptual_weight,
            perceptual_net=perceptual,
        )
        if not torch.isfinite(loss):
            raise RuntimeError(f"reconstruction training diverged: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    head.eval()
    save_reconstruction(
        head,
        checkpoint_path(cfg.work_dir, "recon"),
        extra_manifest={"mu": cfg.mu, "dataset_peak": peak},
    )
    return losses, {"dataset_peak": peak}


_STAGE_BODIES = {
    "autoencoder": _stage_autoencoder,
    "ldm": _stage_ldm,
    "tcam": _stage_tcam,
    "recon": _stage_recon,
}


def run_stage(stage: str, config: ExperimentConfig) -> RunManifest:
    """Train one stage; frozen checkpoints are digest-verified afterwards."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}; choose from {STAGES}")
    for prereq in PREREQUISITES[stage]:
        if not os.path.isfile(checkpoint_path(config.work_dir, prereq)):
            raise ConfigurationError(f"missing prerequisite: {prereq}")
    os.makedirs(config.work_dir, exist_ok=True)
    view = ConfigView(config)
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(derive_seed(config.seed, stage))
    np.random.seed(derive_seed(config.seed, stage) % (2**31))

    frozen_before = {
        s: file_digest(checkpoint_path(config.work_dir, s))
        for s in STAGES
        if s != stage and os.path.isfile(checkpoint_path(config.work_dir, s))
    }
    t0 = time.perf_counter()
    losses, extra = _STAGE_BODIES[stage](view)
    wall = time.perf_counter() - t0
    for s, digest in frozen_before.items():
        after = file_digest(checkpoint_path(config.work_dir, s))
        if after != digest:
            raise RuntimeError(f"frozen checkpoint changed during stage {stage!r}: {s}")

    consumed = sorted(view.consumed)
    config_dict = config.to_dict()
    missing = sorted(set(consumed) - set(config_dict))
    if missing:
        raise RuntimeError(f"consumed config keys missing from manifest: {missing}")
    manifest = RunManifest(
        stage=stage,
        config=config_dict,
        code_hash=code_hash(),
        consumed_keys=consumed,
        loss_history=losses,
        wall_seconds=wall,
        checkpoint_digest=file_digest(checkpoint_path(config.work_dir, stage)),
        frozen_digests=frozen_before,
        extra=extra,
    )
    manifest.save(os.path.join(config.work_dir, f"{stage}_manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# inference


class PipelineModels:
    """All four frozen checkpoints loaded together for inference."""

    def __init__(self, work_dir: str):
        for stage in STAGES:
            if not os.path.isfile(checkpoint_path(work_dir, stage)):
                raise ConfigurationError(f"missing checkpoint for stage: {stage}")
        self.ae, self.ae_manifest = load_autoencoder(checkpoint_path(work_dir, "autoencoder"))
        self.denoiser, self.dn_manifest = load_denoiser(checkpoint_path(work_dir, "ldm"))
        self.align, self.align_manifest = load_alignment(checkpoint_path(work_dir, "tcam"))
        self.head, self.head_manifest = load_reconstruction(checkpoint_path(work_dir, "recon"))
        self.schedule = make_schedule(
            self.dn_manifest["timesteps"],
            self.dn_manifest["beta_start"],
            self.dn_manifest["beta_end"],
            self.dn_manifest["schedule_kind"],
        )
        self.peak = self.ae_manifest["dataset_peak"]
        self.mu = self.ae_manifest["mu"]
        self.window = self.align_manifest["window_size"]


def infer_sequence(
    sequence: FrameSequence,
    checkpoints: str | PipelineModels,
    sampler_config: SamplerConfig | None = None,
) -> list[HDRFrame]:
    """Reconstruct an HDR frame for every position of the sequence.

    Windows past the sequence boundary are replicate-edge padded. The prior
    sampler seed for frame i derives from ``sampler_config.seed`` and i, so
    repeat runs are bit-identical.
    """
    models = checkpoints if isinstance(checkpoints, PipelineModels) else PipelineModels(checkpoints)
    if sampler_config is None:
        sampler_config = SamplerConfig()
    out = []
    from .autoencoder import inverse_tonemap_mu

    for i in range(len(sequence)):
        with torch.no_grad():
            temporal, _ = models.align(
                _window_tensor(sequence, i, models.window), models.window // 2
            )
        sampler = SamplerConfig(
            num_steps=sampler_config.num_steps,
            eta=sampler_config.eta,
            seed=derive_seed(sampler_config.seed, "infer", i),
        )
        _, features = generate_prior(
            sequence.frames[i], models.ae, models.denoiser, models.schedule, sampler
        )
        with torch.no_grad():
            tonemapped = models.head(temporal, _prior_feature_dict(features))
        img = tonemapped[0].permute(1, 2, 0).numpy().astype(np.float64)
        linear = inverse_tonemap_mu(img, models.mu) * models.peak
        out.append(HDRFrame(pixels=linear.astype(np.float32), index=i))
    return out


def infer_temporal_only(
    sequence: FrameSequence, align: AlignMergeModel, window: int, peak: float, mu: float
) -> list[HDRFrame]:
    """Stage-2 baseline: the temporal decoder's merged output, no prior."""
    from .autoencoder import inverse_tonemap_mu

    out = []
    for i in range(len(sequence)):
        with torch.no_grad():
            _, merged = align(_window_tensor(sequence, i, window), window // 2)
        img = merged[0].permute(1, 2, 0).numpy().astype(np.float64)
        out.append(
            HDRFrame(pixels=(inverse_tonemap_mu(img, mu) * peak).astype(np.float32), index=i)
        )
    return out
