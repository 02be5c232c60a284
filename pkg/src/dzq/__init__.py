"""Joint pruning and quantization with a learnable dead-zone quantizer."""

from .autodiff import (
    Tape,
    TensorNode,
    backward,
    conv2d,
    masked_clip,
    matmul,
    maxpool2,
    relu,
    softmax_cross_entropy,
    ste_clip,
    ste_relu,
    ste_round,
    stop_gradient,
    zero_grad_sign,
)
from .data import Dataset, batches, load_csv, load_idx, synthetic_blobs
from .errors import ConfigError, DivergenceError, FormatError
from .metrics import CompressionReport, bops_layer, build_report, macs_dense
from .models import (
    Layer,
    LayerSpec,
    Model,
    build_mini_cnn,
    build_mlp,
    forward,
    load_checkpoint,
    run_forward,
    save_checkpoint,
)
from .pruning import Mask, equivalence_oracle, magnitude_mask, sparsity
from .quantizers import (
    LayerQuantState,
    QuantOutcome,
    absmax_recovery_fixed_point,
    absmax_scale,
    deadzone_quantize,
    deadzone_width,
    learnable_bit,
    learnable_scale,
    pruning_aware_scale,
    quantize_layer,
    range_stat,
    uniform_quantize,
)
from .trainer import TrainConfig, SgdMomentum, regularized_loss, train

__version__ = "0.1.0"

__all__ = [
    "Tape", "TensorNode", "backward", "conv2d", "masked_clip", "matmul",
    "maxpool2", "relu", "softmax_cross_entropy", "ste_clip", "ste_relu",
    "ste_round", "stop_gradient", "zero_grad_sign",
    "Dataset", "batches", "load_csv", "load_idx", "synthetic_blobs",
    "ConfigError", "DivergenceError", "FormatError",
    "CompressionReport", "bops_layer", "build_report", "macs_dense",
    "Layer", "LayerSpec", "Model", "build_mini_cnn", "build_mlp", "forward",
    "load_checkpoint", "run_forward", "save_checkpoint",
    "Mask", "equivalence_oracle", "magnitude_mask", "sparsity",
    "LayerQuantState", "QuantOutcome", "absmax_recovery_fixed_point",
    "absmax_scale", "deadzone_quantize", "deadzone_width", "learnable_bit",
    "learnable_scale", "pruning_aware_scale", "quantize_layer", "range_stat",
    "uniform_quantize",
    "TrainConfig", "SgdMomentum", "regularized_loss", "train",
]
