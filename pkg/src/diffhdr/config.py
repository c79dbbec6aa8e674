"""Experiment configuration: one dataclass, serialized verbatim everywhere.

Configs load from YAML with strict key checking (any unknown key is an
error), and every run manifest embeds the fully resolved config so a run is
reproducible from its manifest alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml


class ConfigurationError(Exception):
    pass


@dataclass
class StageSettings:
    steps: int
    lr: float
    batch_size: int


def _default_stages() -> dict[str, StageSettings]:
    return {
        "autoencoder": StageSettings(steps=2500, lr=2e-3, batch_size=8),
        "ldm": StageSettings(steps=5000, lr=2e-4, batch_size=16),
        "tcam": StageSettings(steps=1200, lr=2e-4, batch_size=1),
        "recon": StageSettings(steps=600, lr=1e-4, batch_size=1),
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_dir: str = "data"
    work_dir: str = "runs/default"
    exposure_pattern: list[float] = field(default_factory=lambda: [1.0, 8.0])
    image_size: int = 64
    gamma: float = 2.2
    bit_depth: int = 8
    noise_sigma: float = 0.0
    mu: float = 5000.0
    latent_channels: int = 4
    ae_base_width: int = 32
    kl_weight: float = 1e-6
    unet_base_width: int = 64
    embed_dim: int = 256
    exposure_encoding: str = "log2"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"
    sampler_steps: int = 10
    sampler_eta: float = 0.0
    align_width: int = 32
    patch_size: int = 3
    search_radius: int = 4
    attn_window: int = 4
    control_scale: float = 1.0
    recon_attn_window: int = 8
    l1_weight: float = 1.0
    temporal_weight: float = 0.1
    perceptual_weight: float = 0.1
    perceptual_seed: int = 1234
    deterministic: bool = True
    stages: dict[str, StageSettings] = field(default_factory=_default_stages)

    def __post_init__(self):
        if len(self.exposure_pattern) not in (2, 3):
            raise ConfigurationError(
                f"exposure pattern length must be 2 or 3, got {len(self.exposure_pattern)}"
            )
        if self.exposure_encoding not in ("log2", "raw"):
            raise ConfigurationError(f"unknown exposure_encoding {self.exposure_encoding!r}")
        for name in ("autoencoder", "ldm", "tcam", "recon"):
            if name not in self.stages:
                raise ConfigurationError(f"missing stage settings for {name!r}")

    @property
    def window_size(self) -> int:
        """Frames per reconstruction window: every exposure appears at least once."""
        return 3 if len(self.exposure_pattern) == 2 else 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = {k: asdict(v) for k, v in self.stages.items()}
        d["window_size"] = self.window_size
        return d


def load_config(path: str) -> ExperimentConfig:
    """Read a YAML config; unknown keys anywhere are a hard error."""
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(data).__name__}")
    data.pop("window_size", None)  # derived field, present in saved manifests
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    if "stages" in data:
        stage_known = {f.name for f in fields(StageSettings)}
        stages = dict(_default_stages())
        for name, settings in data["stages"].items():
            if name not in stages:
                raise ConfigurationError(f"unknown stage name: {name!r}")
            bad = sorted(set(settings) - stage_known)
            if bad:
                raise ConfigurationError(f"unknown keys in stage {name!r}: {bad}")
            stages[name] = StageSettings(**{**asdict(stages[name]), **settings})
        data["stages"] = stages
    return ExperimentConfig(**data)


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


class ConfigView:
    """Read-through wrapper that records which config fields a run consumed."""

    def __init__(self, config: ExperimentConfig):
        object.__setattr__(self, "_config", config)
        object.__setattr__(self, "consumed", set())

    def __getattr__(self, name):
        value = getattr(object.__getattribute__(self, "_config"), name)
        object.__getattribute__(self, "consumed").add(name)
        return value

    def __setattr__(self, name, value):
        raise AttributeError("config is read-only during a run")
