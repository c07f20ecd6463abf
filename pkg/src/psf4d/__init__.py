"""Structured-noise sampling and view-consistent refinement for windowed
4D latent editing, at a desk-checkable scale.

The package is organized as a functional core (every operation is a
plain function over float64 numpy arrays) with estimator-style wrappers
following sklearn conventions where a fit/transform shape is natural.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .exceptions import (
    DivergenceError,
    FormatError,
    MagicMismatchError,
    NotSupportedError,
    ParameterError,
    PredictorContractError,
    PSF4DError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .metrics import (
    MetricsReport,
    cross_view_inconsistency,
    empirical_correlation,
    flicker_report,
    psnr,
    ssim,
    temporal_flicker,
    temporal_flicker_components,
)
from .noise import (
    NoiseConfig,
    StructuredNoise,
    StructuredNoiseSampler,
    apply_cross_view,
    correlation_table,
    empirical_correlation_table,
    sample_ar,
    sample_structured,
    theoretical_correlation,
)
from .pipeline import (
    ABLATIONS,
    IterationRecord,
    PipelineConfig,
    PipelineResult,
    PSF4DEditor,
    RefinementState,
    edit_timestep,
    initial_edit,
    omega_schedule,
    rectify,
    refine_step,
    run_psf4d,
)
from .rng import RngState, stream_id
from .scene import (
    EditOperator,
    SceneConsensusModel,
    SceneModel,
    SyntheticScene,
    ViewMap,
    default_scene,
    fit_scene_model,
    render_views,
)
from .schedule import (
    DiffusionSchedule,
    GaussianOracle,
    ddim_invert,
    ddim_sample,
    ddim_step,
    forward_diffuse,
    guided_predictor,
    oracle_predict,
    roundtrip_error,
    zero_predictor,
)
from .tensor import load_tensor, loads_tensor, read_header, save_tensor, standard_normal
from .viewenc import (
    CameraPose,
    ViewEncoder,
    ViewPositionEncoder,
    combined_embedding,
    diffusion_loss,
    diffusion_loss_grad,
    encode_view,
    encode_views,
    grad_output_sum,
    load_encoder,
    new_encoder,
    save_encoder,
    time_embedding,
    train_encoder_toy,
    zero_encoder,
)

__all__ = [
    "ABLATIONS",
    "CameraPose",
    "DiffusionSchedule",
    "DivergenceError",
    "EditOperator",
    "FormatError",
    "GaussianOracle",
    "IterationRecord",
    "MagicMismatchError",
    "MetricsReport",
    "NoiseConfig",
    "NotSupportedError",
    "PSF4DEditor",
    "PSF4DError",
    "ParameterError",
    "PipelineConfig",
    "PipelineResult",
    "PredictorContractError",
    "RefinementState",
    "RngState",
    "SceneConsensusModel",
    "SceneModel",
    "ShapeError",
    "StructuredNoise",
    "StructuredNoiseSampler",
    "SyntheticScene",
    "TruncatedPayloadError",
    "VersionMismatchError",
    "ViewEncoder",
    "ViewMap",
    "ViewPositionEncoder",
    "apply_cross_view",
    "combined_embedding",
    "correlation_table",
    "cross_view_inconsistency",
    "ddim_invert",
    "ddim_sample",
    "ddim_step",
    "default_scene",
    "diffusion_loss",
    "diffusion_loss_grad",
    "edit_timestep",
    "empirical_correlation",
    "empirical_correlation_table",
    "encode_view",
    "encode_views",
    "fit_scene_model",
    "flicker_report",
    "forward_diffuse",
    "grad_output_sum",
    "guided_predictor",
    "initial_edit",
    "load_encoder",
    "load_tensor",
    "loads_tensor",
    "new_encoder",
    "omega_schedule",
    "oracle_predict",
    "psnr",
    "read_header",
    "rectify",
    "refine_step",
    "render_views",
    "roundtrip_error",
    "run_psf4d",
    "sample_ar",
    "sample_structured",
    "save_encoder",
    "save_tensor",
    "ssim",
    "standard_normal",
    "stream_id",
    "temporal_flicker",
    "temporal_flicker_components",
    "theoretical_correlation",
    "time_embedding",
    "train_encoder_toy",
    "zero_encoder",
    "zero_predictor",
]
