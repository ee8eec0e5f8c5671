"""quantguard: post-training weight quantization with backdoor-aware rounding."""

__version__ = "0.1.0"

from .efrap import (
    EfrapConfig,
    efrap_quantize,
    loss_activation,
    loss_flip,
    loss_penalty,
    optimize_layer,
)
from .estimators import (
    EfrapGraphQuantizer,
    FlipGraphQuantizer,
    NearestGraphQuantizer,
    OmseGraphQuantizer,
)
from .inference import (
    ExecutionMode,
    calibrate_activation_ranges,
    capture_activations,
    forward,
)
from .io import (
    Dataset,
    ModelGraph,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .metrics import EvalReport, attack_success_rate, clean_accuracy, dtm
from .planted import build_planted_qcb
from .quantize import (
    NearestQuantizer,
    QuantConfig,
    QuantizedTensor,
    RoundingState,
    clip_bounds,
    make_config,
    quantize_nearest,
    quantize_with_strategy,
    soft_quantize,
)
from .rounding import flip_fraction, flip_fraction_graph, omse_search

__all__ = [
    "__version__",
    "EfrapConfig",
    "efrap_quantize",
    "loss_activation",
    "loss_flip",
    "loss_penalty",
    "optimize_layer",
    "EfrapGraphQuantizer",
    "FlipGraphQuantizer",
    "NearestGraphQuantizer",
    "OmseGraphQuantizer",
    "ExecutionMode",
    "calibrate_activation_ranges",
    "capture_activations",
    "forward",
    "Dataset",
    "ModelGraph",
    "load_dataset",
    "load_model",
    "save_dataset",
    "save_model",
    "EvalReport",
    "attack_success_rate",
    "clean_accuracy",
    "dtm",
    "build_planted_qcb",
    "NearestQuantizer",
    "QuantConfig",
    "QuantizedTensor",
    "RoundingState",
    "clip_bounds",
    "make_config",
    "quantize_nearest",
    "quantize_with_strategy",
    "soft_quantize",
    "flip_fraction",
    "flip_fraction_graph",
    "omse_search",
]
