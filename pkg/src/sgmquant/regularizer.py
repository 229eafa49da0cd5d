"""Multimodal Gaussian regularizer pulling each weight toward its quantization level.

For layer ``l`` with ``M_l`` regularized weights the penalty is

    sum_i lambda / (2 * M_l) * (w_i - Q(w_i))**2

and its gradient ``lambda / M_l * (w_i - Q(w_i))``.  Dividing by the layer size
rates every layer's quantization error equally, so large layers keep more
per-weight freedom.  ``dQ/dw`` is taken as zero everywhere; the half-step
discontinuities are a measure-zero set for real-valued weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fixed_point import QuantizationError, QuantizerSpec, quantize_tensor

DEFAULT_F_RANGE = (-8, 8)


class RegularizerError(ValueError):
    pass


@dataclass(frozen=True)
class LayerQuantState:
    layer_id: int
    spec: QuantizerSpec
    weight_count: int

    @classmethod
    def for_weights(cls, layer_id: int, spec: QuantizerSpec, w: np.ndarray) -> "LayerQuantState":
        return cls(layer_id=layer_id, spec=spec, weight_count=int(np.asarray(w).size))


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_start: float
    lambda_end: float
    total_epochs: int

    def __post_init__(self) -> None:
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise RegularizerError("lambda endpoints must be non-negative")
        if self.total_epochs < 1:
            raise RegularizerError("total_epochs must be >= 1")

    @property
    def is_zero(self) -> bool:
        return self.lambda_start == 0 and self.lambda_end == 0


def lambda_at(schedule: LambdaSchedule, epoch: int) -> float:
    """Linear per-epoch ramp hitting both endpoints exactly."""
    if not 0 <= epoch < schedule.total_epochs:
        raise RegularizerError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    return linear_ramp(schedule.lambda_start, schedule.lambda_end, epoch, schedule.total_epochs)


def linear_ramp(start: float, end: float, epoch: int, total: int) -> float:
    if total == 1 or epoch == 0:
        return float(start)
    if epoch == total - 1:
        return float(end)
    return float(start + (end - start) * epoch / (total - 1))


def _check(weights_by_layer: Sequence[np.ndarray], states: Sequence[LayerQuantState], lam: float) -> None:
    if len(weights_by_layer) != len(states):
        raise RegularizerError(f"{len(weights_by_layer)} weight tensors but {len(states)} layer states")
    if lam < 0:
        raise RegularizerError(f"lambda must be non-negative, got {lam}")
    for w, st in zip(weights_by_layer, states):
        if np.asarray(w).size != st.weight_count:
            raise RegularizerError(
                f"layer {st.layer_id}: state says {st.weight_count} weights, tensor has {np.asarray(w).size}"
            )


def layer_residual(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """``w - Q(w)``; raises on non-finite weights."""
    try:
        return w - quantize_tensor(w, spec)
    except QuantizationError as exc:
        raise RegularizerError(str(exc)) from exc


def reg_loss(weights_by_layer: Sequence[np.ndarray], states: Sequence[LayerQuantState], lam: float) -> float:
    _check(weights_by_layer, states, lam)
    total = 0.0
    for w, st in zip(weights_by_layer, states):
        r = layer_residual(np.asarray(w, dtype=np.float64), st.spec)
        total += lam / (2.0 * st.weight_count) * float(np.dot(r.ravel(), r.ravel()))
    return total


def reg_grad(
    weights_by_layer: Sequence[np.ndarray], states: Sequence[LayerQuantState], lam: float
) -> list[np.ndarray]:
    _check(weights_by_layer, states, lam)
    grads = []
    for w, st in zip(weights_by_layer, states):
        w = np.asarray(w)
        scale = np.asarray(lam / st.weight_count, dtype=w.dtype)
        grads.append(scale * layer_residual(w, st.spec))
    return grads


def layer_residual_sq(w: np.ndarray, spec: QuantizerSpec) -> float:
    r = layer_residual(np.asarray(w, dtype=np.float64), spec).ravel()
    return float(np.dot(r, r))


@dataclass(frozen=True)
class StepSearch:
    spec: QuantizerSpec
    residual: float
    degenerate: bool = False


def search_step_exponent(
    layer_weights: np.ndarray, bits: int, f_range: tuple[int, int] = DEFAULT_F_RANGE
) -> StepSearch:
    """Pick the exponent in ``f_range`` minimizing the layer's squared quantization residual.

    Ties go to the larger exponent (finer grid).  An all-zero layer attains zero
    residual everywhere; it gets ``f_max`` and ``degenerate=True``.
    """
    f_min, f_max = f_range
    if f_min > f_max:
        raise RegularizerError(f"empty exponent range [{f_min}, {f_max}]")
    w = np.asarray(layer_weights, dtype=np.float64)
    if w.size == 0:
        raise RegularizerError("cannot search a step for an empty layer")
    if not np.all(np.isfinite(w)):
        raise RegularizerError("layer weights contain non-finite values")
    if not np.any(w):
        return StepSearch(QuantizerSpec(bits, f_max), 0.0, degenerate=True)

    best_f, best_r = f_min, np.inf
    for f in range(f_min, f_max + 1):
        r = layer_residual_sq(w, QuantizerSpec(bits, f))
        if r <= best_r:
            best_f, best_r = f, r
    return StepSearch(QuantizerSpec(bits, best_f), best_r)
