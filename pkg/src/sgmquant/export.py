"""SGMQ fixed-point model files and integer-mantissa inference.

File layout (v1, little-endian)::

    b"SGMQ" | u16 version=1 | u16 layer_count
    per layer:
        u8 kind | u16 name_len + UTF-8 name | u8 rank + u32 dims
        [conv2d only: u8 stride, u8 padding]
        u8 bits | i16 exponent | i8 mantissas (prod(dims), row-major)
        u32 bias_count + f32 biases
    u32 CRC32 of all preceding bytes

Parameter layers carry their weight shape in ``dims``.  Parameter-free layers
store ``bits = 0``, no mantissas and no biases; max-pool uses ``dims =
[window, stride]``, ReLU and flatten use rank 0.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU, conv2d_core
from .fixed_point import QuantizationError, QuantizerSpec, encode_tensor

MAGIC = b"SGMQ"
VERSION = 1
KIND_TAGS = {"linear": 1, "conv2d": 2, "maxpool": 3, "relu": 4, "flatten": 5}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
MANTISSA_BITS = 8  # one signed byte per weight in v1


class ExportError(ValueError):
    pass


@dataclass(eq=False)
class QuantizedLayer:
    kind: str
    name: str
    dims: tuple[int, ...] = ()
    bits: int = 0
    exponent: int = 0
    mantissas: np.ndarray | None = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    stride: int = 1
    padding: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in ("linear", "conv2d")

    def decoded_weight(self) -> np.ndarray:
        return np.ldexp(self.mantissas.astype(np.float64), -self.exponent)


@dataclass(eq=False)
class QuantizedModel:
    layers: list[QuantizedLayer]

    def validate(self) -> None:
        for q in self.layers:
            if not q.has_params:
                continue
            if q.bits < 2 or q.bits > MANTISSA_BITS:
                raise ExportError(f"{q.name}: bit width {q.bits} unsupported by format v1")
            if q.mantissas.shape != tuple(q.dims):
                raise ExportError(f"{q.name}: mantissa shape {q.mantissas.shape} != dims {q.dims}")
            k = 2 ** (q.bits - 1) - 1
            m = q.mantissas.astype(np.int64)
            if m.size and (m.min() < -k or m.max() > k):
                bad = int(m.flat[np.argmax(np.abs(m) > k)])
                raise ExportError(f"{q.name}: mantissa {bad} outside [-{k}, {k}] for N={q.bits}")
            if q.bias is not None and q.bias.shape != (q.dims[0],):
                raise ExportError(f"{q.name}: {q.bias.size} biases for {q.dims[0]} outputs")

    def specs(self) -> list[QuantizerSpec]:
        return [QuantizerSpec(q.bits, q.exponent) for q in self.layers if q.has_params]

    def to_network(self, dtype=np.float64) -> Network:
        """Float network over the decoded weights (the reference for integer inference)."""
        dtype = np.dtype(dtype)
        layers, lid = [], 0
        for q in self.layers:
            if q.kind == "linear" or q.kind == "conv2d":
                lid += 1
                w = q.decoded_weight().astype(dtype)
                b = None if q.bias is None else q.bias.astype(dtype)
                if q.kind == "linear":
                    layers.append(Linear(q.name, w, b, lid))
                else:
                    layers.append(Conv2d(q.name, w, b, lid, q.stride, q.padding))
            elif q.kind == "maxpool":
                layers.append(MaxPool2d(q.name, q.dims[0], q.dims[1]))
            elif q.kind == "relu":
                layers.append(ReLU(q.name))
            elif q.kind == "flatten":
                layers.append(Flatten(q.name))
        return Network(layers, dtype=dtype)


def biases_are_f32_exact(network: Network) -> bool:
    return all(
        l.bias is None or np.array_equal(l.bias.astype(np.float32).astype(l.bias.dtype), l.bias)
        for l in network.param_layers
    )


def round_biases_to_f32(network: Network) -> Network:
    """Round biases to float32 precision in place (SGMQ stores biases as f32)."""
    for l in network.param_layers:
        if l.bias is not None:
            l.bias[...] = l.bias.astype(np.float32)
    return network


def quantized_model(network: Network, specs) -> QuantizedModel:
    """Encode a hard-quantized network; refuses off-grid weights and non-f32 biases."""
    if len(specs) != len(network.param_layers):
        raise ExportError(f"{len(specs)} specs for {len(network.param_layers)} parameter layers")
    if not biases_are_f32_exact(network):
        raise ExportError("biases are not exactly representable as float32; round them first")
    spec_iter = iter(specs)
    out = []
    for l in network.layers:
        if l.has_params:
            spec = next(spec_iter)
            if spec.bits > MANTISSA_BITS:
                raise ExportError(f"{l.name}: {spec.bits}-bit weights do not fit format v1")
            try:
                m = encode_tensor(l.weight, spec)
            except QuantizationError as exc:
                raise ExportError(f"{l.name}: {exc}; apply hard_quantize before export") from exc
            bias = None if l.bias is None else l.bias.astype(np.float32)
            q = QuantizedLayer(l.kind, l.name, tuple(l.weight.shape), spec.bits, spec.exponent,
                               m.astype(np.int8), bias)
            if isinstance(l, Conv2d):
                q.stride, q.padding = l.stride, l.padding
        elif isinstance(l, MaxPool2d):
            q = QuantizedLayer(l.kind, l.name, (l.window, l.stride))
        elif l.kind in KIND_TAGS:
            q = QuantizedLayer(l.kind, l.name)
        else:
            raise ExportError(f"layer kind {l.kind!r} not supported by SGMQ")
        out.append(q)
    model = QuantizedModel(out)
    model.validate()
    return model


def to_bytes(model: QuantizedModel) -> bytes:
    model.validate()
    parts = [MAGIC, struct.pack("<HH", VERSION, len(model.layers))]
    for q in model.layers:
        name = q.name.encode("utf-8")
        parts.append(struct.pack(f"<BH{len(name)}sB", KIND_TAGS[q.kind], len(name), name, len(q.dims)))
        parts.append(struct.pack(f"<{len(q.dims)}I", *q.dims))
        if q.kind == "conv2d":
            parts.append(struct.pack("<BB", q.stride, q.padding))
        parts.append(struct.pack("<Bh", q.bits, q.exponent))
        if q.has_params:
            parts.append(np.ascontiguousarray(q.mantissas, dtype=np.int8).tobytes())
        bias = np.zeros(0, np.float32) if q.bias is None else q.bias
        parts.append(struct.pack("<I", bias.size) + np.ascontiguousarray(bias, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ExportError("truncated payload")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def from_bytes(buf: bytes) -> QuantizedModel:
    if buf[:4] != MAGIC:
        raise ExportError("bad magic")
    if len(buf) < 12:
        raise ExportError("truncated payload")
    cur = _Cursor(buf[:-4])
    cur.take(4)
    version, count = cur.unpack("HH")
    if version != VERSION:
        raise ExportError(f"version mismatch: file has {version}, reader supports {VERSION}")
    layers = []
    for _ in range(count):
        tag, nlen = cur.unpack("BH")
        if tag not in TAG_KINDS:
            raise ExportError(f"unknown layer kind tag {tag}")
        name = cur.take(nlen).decode("utf-8")
        (rank,) = cur.unpack("B")
        dims = cur.unpack(f"{rank}I")
        q = QuantizedLayer(TAG_KINDS[tag], name, tuple(dims))
        if q.kind == "conv2d":
            q.stride, q.padding = cur.unpack("BB")
        q.bits, q.exponent = cur.unpack("Bh")
        if q.has_params:
            n = int(np.prod(dims))
            q.mantissas = np.frombuffer(cur.take(n), dtype=np.int8).reshape(dims).copy()
        (nb,) = cur.unpack("I")
        bias = np.frombuffer(cur.take(4 * nb), dtype="<f4").astype(np.float32)
        q.bias = bias if q.has_params else None
        layers.append(q)
    if cur.pos != len(cur.buf):
        raise ExportError("trailing bytes before checksum")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise ExportError("CRC mismatch")
    model = QuantizedModel(layers)
    model.validate()
    return model


def export(network: Network, specs, path) -> QuantizedModel:
    model = quantized_model(network, specs)
    Path(path).write_bytes(to_bytes(model))
    return model


def import_model(path) -> QuantizedModel:
    return from_bytes(Path(path).read_bytes())


def integer_forward(model: QuantizedModel, x: np.ndarray, dtype=None) -> np.ndarray:
    """Logits computed from integer mantissas with one ``2**-f`` shift per layer.

    Every product is ``mantissa * activation`` and the accumulated sum is scaled
    once by the power-of-two step; since that scale is exact in binary floating
    point, the result matches the float forward over decoded weights bit for bit.
    """
    dtype = np.dtype(dtype or (x.dtype if np.issubdtype(np.asarray(x).dtype, np.floating) else np.float64))
    h = np.asarray(x, dtype=dtype)
    for q in model.layers:
        if q.kind == "linear":
            m = q.mantissas.astype(dtype)
            if h.ndim != 2 or h.shape[1] != m.shape[1]:
                raise ExportError(f"{q.name}: input {h.shape} incompatible with {m.shape}")
            h = np.ldexp(h @ m.T, -q.exponent).astype(dtype, copy=False)
            if q.bias is not None:
                h = h + q.bias.astype(dtype)
        elif q.kind == "conv2d":
            m = q.mantissas.astype(dtype)
            if h.ndim != 4 or h.shape[1] != m.shape[1]:
                raise ExportError(f"{q.name}: input {h.shape} incompatible with {m.shape}")
            acc, _ = conv2d_core(h, m, q.stride, q.padding)
            h = np.ldexp(acc, -q.exponent).astype(dtype, copy=False)
            if q.bias is not None:
                h = h + q.bias.astype(dtype)[:, None, None]
        elif q.kind == "maxpool":
            h, _ = MaxPool2d(q.name, q.dims[0], q.dims[1]).forward(h)
        elif q.kind == "relu":
            h, _ = ReLU(q.name).forward(h)
        elif q.kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    return h


@dataclass(frozen=True)
class EquivalenceReport:
    samples: int
    max_abs_deviation: float
    agreement: float

    @property
    def ok(self) -> bool:
        return self.max_abs_deviation == 0.0 and self.agreement == 1.0


def verify_equivalence(model: QuantizedModel, reference: Network, x: np.ndarray) -> EquivalenceReport:
    ref_arch = [(l.kind, tuple(getattr(l, "weight", np.empty(0)).shape) if l.has_params else ())
                for l in reference.layers]
    q_arch = [(q.kind, tuple(q.dims) if q.has_params else ()) for q in model.layers]
    if ref_arch != q_arch:
        raise ExportError("architecture mismatch between quantized model and reference network")
    x = np.asarray(x, dtype=reference.dtype)
    ref = reference.predict(x)
    got = integer_forward(model, x, dtype=reference.dtype)
    dev = float(np.max(np.abs(ref.astype(np.float64) - got.astype(np.float64)))) if len(x) else 0.0
    agree = float(np.mean(ref.argmax(axis=1) == got.argmax(axis=1))) if len(x) else 1.0
    return EquivalenceReport(len(x), dev, agree)
