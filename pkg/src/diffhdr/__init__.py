"""HDR video reconstruction from alternating-exposure LDR frames.

A latent-diffusion prior over single HDR frames (conditioned on the LDR frame
and its exposure), a multi-scale temporal alignment module, and a zero-init
cross-attention reconstruction head, trained in stages and evaluated with
mu-law tonemapped metrics.
"""

from .autoencoder import (
    LatentAutoencoder,
    LatentCode,
    inverse_tonemap_mu,
    load_autoencoder,
    save_autoencoder,
    tonemap_mu,
    train_autoencoder,
)
from .alignment import (
    AlignMergeModel,
    DeformableAlign,
    MultiScaleAligner,
    SpatialAttentionGate,
    TemporalMergeDecoder,
    composite_recon_loss,
    match_patches,
)
from .config import ConfigurationError, ExperimentConfig, StageSettings, load_config, save_config
from .datapipe import (
    FrameSequence,
    HDRFrame,
    LDRFrame,
    NetworkInput,
    build_network_input,
    linearize,
    load_sequence,
    make_sequence,
    save_sequence,
    synthesize_ldr,
)
from .denoiser import (
    ExposureCondUNet,
    denoising_loss,
    exposure_embedding,
    generate_prior,
    load_denoiser,
    save_denoiser,
)
from .diffusion import (
    DiffusionSchedule,
    NoisySample,
    SamplerConfig,
    ddim_step,
    forward_step,
    make_schedule,
    q_sample,
    sample,
)
from .metrics import MetricReport, distribution_plot, evaluate_run, psnr_t, ssim_t
from .reconstruction import (
    ReconstructionHead,
    ZeroInitCrossAttention,
    attention_rowsum_check,
    load_reconstruction,
    reconstruct,
    save_reconstruction,
    zica_fuse,
)
from .training import (
    RunManifest,
    infer_sequence,
    infer_temporal_only,
    linearization_baseline,
    run_stage,
)

__version__ = "0.1.0"
