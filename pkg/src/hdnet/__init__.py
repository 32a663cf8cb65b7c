"""Hierarchical dynamic image harmonization on a float64 autograd core."""

from .autograd import (
    ContractError,
    DimensionError,
    GradCheckReport,
    Tensor,
    activation_elu,
    backward,
    concat_channels,
    conv2d,
    debug_checks,
    grad_check,
    no_grad,
    resample,
    softmax,
)
from .data import (
    BAND_ORDER,
    BANDS,
    CompositeSample,
    GenerationError,
    PerturbParams,
    generate_sample,
    load_image,
    load_mask,
    load_samples,
    make_manifest_entries,
    mask_binarize,
    read_manifest,
    save_image,
    save_mask,
    write_manifest,
)
from .estimator import HDNetHarmonizer
from .metrics import MetricsReport, compute_report, fmse, mean_report, mse, psnr, ssim
from .model import (
    VARIANTS,
    ConvParams,
    DegenerateMaskError,
    GeneratorParams,
    LDParams,
    LossConfig,
    MGDParams,
    Mask,
    adaptive_fuse,
    compose_image,
    cosine_similarity_map,
    count_parameters,
    foreground_mse_loss,
    fuse_reference,
    generator_forward,
    generator_params_from_arrays,
    init_generator_params,
    knn_select,
    ld_forward,
    mgd_forward,
    split_locals,
)
from .selftest import run_selftest
from .train import (
    AdamState,
    TrainerConfig,
    adam_step,
    composite_baseline,
    evaluate,
    fit_samples,
    init_adam_state,
    k_sweep,
    load_adam_state,
    load_checkpoint,
    lr_at_epoch,
    save_adam_state,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BANDS",
    "BAND_ORDER",
    "AdamState",
    "CompositeSample",
    "ContractError",
    "ConvParams",
    "DegenerateMaskError",
    "DimensionError",
    "GenerationError",
    "GeneratorParams",
    "GradCheckReport",
    "HDNetHarmonizer",
    "LDParams",
    "LossConfig",
    "MGDParams",
    "Mask",
    "MetricsReport",
    "PerturbParams",
    "Tensor",
    "TrainerConfig",
    "VARIANTS",
    "activation_elu",
    "adam_step",
    "adaptive_fuse",
    "backward",
    "compose_image",
    "composite_baseline",
    "compute_report",
    "concat_channels",
    "conv2d",
    "cosine_similarity_map",
    "count_parameters",
    "debug_checks",
    "evaluate",
    "fit_samples",
    "fmse",
    "foreground_mse_loss",
    "fuse_reference",
    "generate_sample",
    "generator_forward",
    "generator_params_from_arrays",
    "grad_check",
    "init_adam_state",
    "init_generator_params",
    "k_sweep",
    "knn_select",
    "ld_forward",
    "load_adam_state",
    "load_checkpoint",
    "load_image",
    "load_mask",
    "load_samples",
    "lr_at_epoch",
    "make_manifest_entries",
    "mask_binarize",
    "mean_report",
    "mgd_forward",
    "mse",
    "no_grad",
    "psnr",
    "read_manifest",
    "resample",
    "run_selftest",
    "save_adam_state",
    "save_checkpoint",
    "save_image",
    "save_mask",
    "softmax",
    "split_locals",
    "ssim",
    "train",
    "write_manifest",
]
