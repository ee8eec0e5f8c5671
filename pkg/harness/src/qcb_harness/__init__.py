"""qcb_harness: trains quantization-conditioned backdoors for the engine to defuse."""

__version__ = "0.1.0"

from .data import TriggerSpec, apply_trigger, load_upscaled_digits
from .quant import clip_bounds, fake_quant, maxabs_scale, quant_codes
from .train import AttackConfig, TrainingFailed, export_bundle, train_adaptive, train_qcb

__all__ = [
    "__version__",
    "TriggerSpec", "apply_trigger", "load_upscaled_digits",
    "clip_bounds", "fake_quant", "maxabs_scale", "quant_codes",
    "AttackConfig", "TrainingFailed", "export_bundle", "train_adaptive", "train_qcb",
]
