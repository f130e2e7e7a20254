"""Self-contained CPU engine for a lightweight portrait matting network.

Everything runs on numpy: the float forward path, tape-based reverse-mode
autodiff for training, post-training int8 quantization with an exhaustive
two-class softmax lookup table, and a binary model container.
"""

from .arch import (
    MMNetConfig,
    architecture_hash,
    build_mmnet,
    forward,
    init_weights,
    param_count,
    run_graph,
    shape_trace,
)
from .bench import BenchReport, run_benchmark
from .data import AugmentConfig, Sample, augment, composite, load_dataset, synth_fixtures
from .losses import (
    LossBreakdown,
    LossWeights,
    loss_alpha,
    loss_aux,
    loss_combined,
    loss_compositional,
    loss_gradient,
    loss_kl,
    metric_gradient_error,
    metric_mad,
)
from .modelfile import ArchitectureMismatchError, ModelFileError, load_model, save_model
from .quant import (
    QuantParams,
    QuantizedModel,
    build_softmax_lut,
    load_quantized,
    quantize_model,
    run_quantized,
    save_quantized,
)
from .train import AdamState, TrainConfig, TrainReport, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ArchitectureMismatchError",
    "AugmentConfig",
    "BenchReport",
    "LossBreakdown",
    "LossWeights",
    "MMNetConfig",
    "ModelFileError",
    "QuantParams",
    "QuantizedModel",
    "Sample",
    "TrainConfig",
    "TrainReport",
    "architecture_hash",
    "augment",
    "build_mmnet",
    "build_softmax_lut",
    "composite",
    "forward",
    "init_weights",
    "load_checkpoint",
    "load_dataset",
    "load_model",
    "load_quantized",
    "loss_alpha",
    "loss_aux",
    "loss_combined",
    "loss_compositional",
    "loss_gradient",
    "loss_kl",
    "metric_gradient_error",
    "metric_mad",
    "param_count",
    "quantize_model",
    "run_benchmark",
    "run_graph",
    "run_quantized",
    "save_checkpoint",
    "save_model",
    "save_quantized",
    "shape_trace",
    "synth_fixtures",
    "train_loop",
]
