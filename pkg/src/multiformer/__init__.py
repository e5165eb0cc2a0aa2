"""Multiscale spectral-spatial convolutional transformer for
hyperspectral pixel classification, built on a minimal reverse-mode
tensor engine."""

from .autodiff import (
    GradCheckReport,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    mean_pool_spatial,
    mul,
    narrow,
    reshape,
    scale,
    softmax,
    sum_all,
    transpose,
    zero_grads,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    HsiCube,
    LabelRaster,
    SplitSpec,
    extract_patch,
    extract_patches,
    load_cube,
    load_labels,
    load_split,
    normalize,
    save_cube,
    save_labels,
    save_split,
    stratified_split,
    synth_dataset,
)
from .estimator import MultiscaleFormerClassifier
from .metrics import (
    average_accuracy,
    confusion_matrix,
    default_palette,
    format_report,
    kappa,
    overall_accuracy,
    per_class_accuracy,
    render_map,
)
from .model import (
    ModelConfig,
    attention,
    forward,
    init_params,
    inner_block,
    msa,
    multiscale_spatial_embed,
    outer_block,
    parameter_count,
    project_and_inject,
    scaf_spatial,
    scaf_spectral,
)
from .train import (
    TrainConfig,
    adam_step,
    cross_entropy,
    evaluate,
    fit_patches,
    gradient_suite,
    train,
)

__version__ = "0.1.0"
