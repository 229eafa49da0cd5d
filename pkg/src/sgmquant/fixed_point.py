"""Fixed-point codes and the symmetric power-of-two step quantizer.

A weight ``w`` is quantized to ``clip(round(w / step), -k_max, k_max) * step``
with ``step = 2**-exponent`` and ``k_max = 2**(bits - 1) - 1``.  Because the
step is a power of two, every output is exactly ``(-1)**sign * mantissa *
2**-exponent`` and can be stored as an N-bit integer plus a shared exponent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_EXPONENT = 60


class QuantizationError(ValueError):
    """Raised for invalid quantizer inputs or values that are not on the grid."""


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    exponent: int

    def __post_init__(self) -> None:
        if int(self.bits) != self.bits or self.bits < 2:
            raise QuantizationError(f"bit width must be an integer >= 2, got {self.bits}")
        if int(self.exponent) != self.exponent or abs(self.exponent) > MAX_EXPONENT:
            raise QuantizationError(
                f"exponent must be an integer in [-{MAX_EXPONENT}, {MAX_EXPONENT}], got {self.exponent}"
            )
        object.__setattr__(self, "bits", int(self.bits))
        object.__setattr__(self, "exponent", int(self.exponent))

    @property
    def step(self) -> float:
        return math.ldexp(1.0, -self.exponent)

    @property
    def max_index(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def level_count(self) -> int:
        return 2 * self.max_index + 1

    def levels(self) -> np.ndarray:
        k = np.arange(-self.max_index, self.max_index + 1, dtype=np.float64)
        return np.ldexp(k, -self.exponent)


@dataclass(frozen=True)
class FixedPointCode:
    sign: int
    mantissa: int
    exponent: int

    def __post_init__(self) -> None:
        if self.sign not in (0, 1):
            raise QuantizationError(f"sign must be 0 or 1, got {self.sign}")
        if self.mantissa < 0:
            raise QuantizationError(f"mantissa must be non-negative, got {self.mantissa}")
        if self.mantissa == 0 and self.sign == 1:
            raise QuantizationError("zero must be encoded with sign 0")
        if abs(self.exponent) > MAX_EXPONENT:
            raise QuantizationError(f"exponent {self.exponent} out of range")


def step_size(spec: QuantizerSpec) -> float:
    """Return the step ``2**-f`` of ``spec``; exact in binary floating point."""
    return spec.step


def _level_index(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Clipped level index as float64 (exact small integers)."""
    s = np.array(w, dtype=np.float64)
    with np.errstate(over="ignore"):
        # scaling by a power of two is exact; overflow to inf is absorbed by the clip
        s *= 2.0**spec.exponent
    bound = spec.max_index + 1
    np.clip(s, -bound, bound, out=s)
    k = np.trunc(s, out=np.empty_like(s))
    s -= k  # fractional part, exact
    k += s >= 0.5
    k -= s <= -0.5
    return np.clip(k, -spec.max_index, spec.max_index, out=k)


def mode_indices(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Integer level index ``k`` of every entry of ``w`` (clipped to the level range)."""
    return _level_index(np.asarray(w), spec).astype(np.int64)


def _check_finite(w: np.ndarray) -> None:
    if np.isfinite(w).all():
        return
    idx = tuple(int(i) for i in np.argwhere(~np.isfinite(w))[0])
    raise QuantizationError(f"non-finite value {float(w[idx])!r} at index {idx}")


def quantize_tensor(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Elementwise quantization; shape and floating dtype are preserved."""
    w = np.asarray(w)
    _check_finite(w)
    out = _level_index(w, spec) * 2.0**-spec.exponent
    if np.issubdtype(w.dtype, np.floating):
        return out.astype(w.dtype, copy=False)
    return out


def quantize_value(x: float, spec: QuantizerSpec) -> float:
    if not math.isfinite(x):
        raise QuantizationError(f"non-finite input {x!r}")
    return float(quantize_tensor(np.float64(x), spec))


def encode(x_q: float, spec: QuantizerSpec) -> FixedPointCode:
    """Encode an on-grid value as sign/mantissa/exponent."""
    if not math.isfinite(x_q):
        raise QuantizationError(f"non-finite input {x_q!r}")
    m = math.ldexp(abs(x_q), spec.exponent)
    if m != math.floor(m):
        raise QuantizationError(f"{x_q!r} is not a multiple of step 2**-{spec.exponent}")
    m = int(m)
    if m > spec.max_index:
        raise QuantizationError(f"mantissa {m} overflows {spec.bits}-bit range (max {spec.max_index})")
    return FixedPointCode(sign=1 if (x_q < 0 and m != 0) else 0, mantissa=m, exponent=spec.exponent)


def decode(code: FixedPointCode) -> float:
    value = math.ldexp(float(code.mantissa), -code.exponent)
    return -value if code.sign else value


def encode_tensor(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Signed integer mantissas of an on-grid tensor (vector form of :func:`encode`)."""
    w = np.asarray(w, dtype=np.float64)
    _check_finite(w)
    m = np.ldexp(w, spec.exponent)
    off = m != np.trunc(m)
    if off.any():
        idx = tuple(int(i) for i in np.argwhere(off)[0])
        raise QuantizationError(f"value {float(w[idx])!r} at index {idx} is off the 2**-{spec.exponent} grid")
    over = np.abs(m) > spec.max_index
    if over.any():
        idx = tuple(int(i) for i in np.argwhere(over)[0])
        raise QuantizationError(f"mantissa {int(m[idx])} at index {idx} overflows {spec.bits}-bit range")
    return m.astype(np.int64)


def decode_tensor(mantissas: np.ndarray, exponent: int) -> np.ndarray:
    return np.ldexp(np.asarray(mantissas, dtype=np.float64), -exponent)
