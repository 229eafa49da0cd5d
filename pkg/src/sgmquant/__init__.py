"""Quantization-aware training that pulls weights onto power-of-two fixed-point grids."""

from .engine import Network, lenet5
from .export import export, import_model, integer_forward, verify_equivalence
from .fixed_point import FixedPointCode, QuantizerSpec, decode, encode, quantize_tensor, quantize_value
from .regularizer import LambdaSchedule, lambda_at, reg_grad, reg_loss, search_step_exponent
from .trainer import TrainConfig, evaluate, hard_quantize, train_float_baseline, train_sgm

__all__ = [
    "FixedPointCode",
    "LambdaSchedule",
    "Network",
    "QuantizerSpec",
    "TrainConfig",
    "decode",
    "encode",
    "evaluate",
    "export",
    "hard_quantize",
    "import_model",
    "integer_forward",
    "lambda_at",
    "lenet5",
    "quantize_tensor",
    "quantize_value",
    "reg_grad",
    "reg_loss",
    "search_step_exponent",
    "train_float_baseline",
    "train_sgm",
    "verify_equivalence",
]
