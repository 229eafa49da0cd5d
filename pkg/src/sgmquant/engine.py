"""Small deterministic numpy network engine with hand-written reverse mode.

Supports exactly what LeNet-class CNNs need: linear, 2-D convolution,
max-pooling, ReLU, flatten and softmax cross-entropy, trained with plain SGD.
Forward passes return explicit records; nothing is stashed on the layers, so
forward/backward never mutate their inputs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class EngineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Kernels


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise EngineError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    y = x @ W.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise EngineError(f"linear: bias {b.shape} does not match {W.shape[0]} outputs")
        y = y + b
    return y


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Rows are receptive fields ordered (b, i, j); columns are (c, ki, kj)."""
    B, C, H, W = x.shape
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise EngineError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)


def conv2d_core(x: np.ndarray, K: np.ndarray, stride: int = 1, padding: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Bias-free cross-correlation; returns (output [B,F,Ho,Wo], im2col matrix)."""
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1]:
        raise EngineError(f"conv2d: input {x.shape} incompatible with kernel {K.shape}")
    B, _, H, W = x.shape
    F, _, kh, kw = K.shape
    cols = im2col(x, kh, kw, stride, padding)
    Ho, Wo = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    y = cols @ K.reshape(F, -1).T
    return y.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2), cols


def conv2d_forward(
    x: np.ndarray, K: np.ndarray, b: np.ndarray | None, stride: int = 1, padding: int = 0
) -> np.ndarray:
    y, _ = conv2d_core(x, K, stride, padding)
    if b is not None:
        if b.shape != (K.shape[0],):
            raise EngineError(f"conv2d: bias {b.shape} does not match {K.shape[0]} filters")
        y = y + b[:, None, None]
    return y


def maxpool_forward(x: np.ndarray, window: int, stride: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Window maxima plus the flat in-window argmax (first max in row-major order)."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise EngineError(f"maxpool expects [B,C,H,W], got {x.shape}")
    if window > x.shape[2] or window > x.shape[3]:
        raise EngineError(f"pool window {window} larger than input {x.shape[2:]}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], window * window)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(dy: np.ndarray, arg: np.ndarray, in_shape: tuple, window: int, stride: int) -> np.ndarray:
    B, C, Ho, Wo = dy.shape
    rows = np.arange(Ho)[:, None] * stride + arg // window
    cols = np.arange(Wo)[None, :] * stride + arg % window
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    dx = np.zeros(in_shape, dtype=dy.dtype)
    if stride >= window:
        dx[bi, ci, rows, cols] = dy
    else:
        np.add.at(dx, (bi, ci, rows, cols), dy)
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise EngineError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise EngineError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(B)
    loss = -float(np.mean(logp[rows, labels], dtype=np.float64))
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= B
    return loss, grad


# ---------------------------------------------------------------------------
# Layers


@dataclass(eq=False)
class Layer:
    name: str
    kind = "layer"
    has_params = False

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, rec: Any, need_dx: bool = True):
        raise NotImplementedError

    def hyper(self) -> dict:
        return {}


@dataclass(eq=False)
class ParamLayer(Layer):
    weight: np.ndarray = field(default=None, repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)
    layer_id: int = 0
    has_params = True


@dataclass(eq=False)
class Linear(ParamLayer):
    kind = "linear"

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias), x

    def backward(self, dy, x, need_dx=True):
        dW = dy.T @ x
        db = dy.sum(axis=0)
        dx = dy @ self.weight if need_dx else None
        return dx, (dW, db)


@dataclass(eq=False)
class Conv2d(ParamLayer):
    stride: int = 1
    padding: int = 0
    kind = "conv2d"

    def forward(self, x):
        y, cols = conv2d_core(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias[:, None, None]
        return y, (x.shape, cols)

    def backward(self, dy, rec, need_dx=True):
        in_shape, cols = rec
        F, C, kh, kw = self.weight.shape
        B, _, Ho, Wo = dy.shape
        dym = dy.transpose(0, 2, 3, 1).reshape(-1, F)
        dW = (dym.T @ cols).reshape(self.weight.shape)
        db = dym.sum(axis=0)
        if not need_dx:
            return None, (dW, db)
        # channel-major layout keeps every scatter-add below on contiguous blocks
        dcols = (self.weight.reshape(F, -1).T @ dym.T).reshape(C, kh, kw, B, Ho, Wo)
        s, p = self.stride, self.padding
        H, W = in_shape[2] + 2 * p, in_shape[3] + 2 * p
        dxp = np.zeros((C, B, H, W), dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, i, j]
        dx = dxp.transpose(1, 0, 2, 3)
        dx = np.ascontiguousarray(dx[:, :, p : H - p, p : W - p] if p else dx)
        return dx, (dW, db)

    def hyper(self):
        return {"stride": self.stride, "padding": self.padding}


@dataclass(eq=False)
class MaxPool2d(Layer):
    window: int = 2
    stride: int = 2
    kind = "maxpool"

    def forward(self, x):
        y, arg = maxpool_forward(x, self.window, self.stride)
        return y, (x.shape, arg)

    def backward(self, dy, rec, need_dx=True):
        in_shape, arg = rec
        return maxpool_backward(dy, arg, in_shape, self.window, self.stride), None

    def hyper(self):
        return {"window": self.window, "stride": self.stride}


@dataclass(eq=False)
class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, dy, mask, need_dx=True):
        return np.where(mask, dy, 0).astype(dy.dtype, copy=False), None


@dataclass(eq=False)
class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape, need_dx=True):
        return dy.reshape(shape), None


LAYER_KINDS = {cls.kind: cls for cls in (Linear, Conv2d, MaxPool2d, ReLU, Flatten)}


# ---------------------------------------------------------------------------
# Network


class Network:
    def __init__(self, layers: Sequence[Layer], dtype=np.float64):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        ids = [l.layer_id for l in self.param_layers]
        if ids != list(range(1, len(ids) + 1)):
            raise EngineError(f"layer ids must be dense 1..L, got {ids}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise EngineError(f"layer names must be unique, got {names}")

    @property
    def param_layers(self) -> list[ParamLayer]:
        return [l for l in self.layers if l.has_params]

    def weights(self) -> list[np.ndarray]:
        return [l.weight for l in self.param_layers]

    def layer(self, key: int | str) -> ParamLayer:
        for l in self.param_layers:
            if l.layer_id == key or l.name == key:
                return l
        raise KeyError(key)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        h = np.asarray(x, dtype=self.dtype)
        records = []
        for layer in self.layers:
            h, rec = layer.forward(h)
            records.append(rec)
        return h, records

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, records: list, dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if len(records) != len(self.layers):
            raise EngineError("missing forward records")
        grads: dict[int, tuple] = {}
        dy = dlogits
        first_param = next((i for i, l in enumerate(self.layers) if l.has_params), 0)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dy, g = layer.backward(dy, records[i], need_dx=i > first_param)
            if layer.has_params:
                grads[layer.layer_id] = g
            if dy is None:
                break
        return [grads[l.layer_id] for l in self.param_layers]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        """Copy with parameters cast to ``dtype``."""
        out = self.copy()
        out.dtype = np.dtype(dtype)
        for l in out.param_layers:
            l.weight = l.weight.astype(out.dtype)
            if l.bias is not None:
                l.bias = l.bias.astype(out.dtype)
        return out

    def architecture(self) -> list[dict]:
        arch = []
        for l in self.layers:
            entry = {"kind": l.kind, "name": l.name, **l.hyper()}
            if l.has_params:
                entry["layer_id"] = l.layer_id
                entry["weight_shape"] = list(l.weight.shape)
                entry["bias"] = l.bias is not None
            arch.append(entry)
        return arch

    @classmethod
    def from_architecture(cls, arch: list[dict], dtype=np.float64) -> "Network":
        """Build a zero-initialized network from :meth:`architecture` output."""
        dtype = np.dtype(dtype)
        layers = []
        for e in arch:
            kind = LAYER_KINDS[e["kind"]]
            kw = {k: v for k, v in e.items() if k not in ("kind", "weight_shape", "bias")}
            if kind.has_params:
                kw["weight"] = np.zeros(e["weight_shape"], dtype=dtype)
                kw["bias"] = np.zeros(e["weight_shape"][0], dtype=dtype) if e["bias"] else None
            layers.append(kind(**kw))
        return cls(layers, dtype=dtype)


def loss_and_grads(network: Network, x: np.ndarray, labels: np.ndarray):
    logits, records = network.forward(x)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return loss, network.backward(records, dlogits)


def backward(network: Network, x: np.ndarray, labels: np.ndarray):
    """Mean batch loss and exact gradients ``[(dW, db), ...]`` per parameter layer."""
    return loss_and_grads(network, x, labels)


def sgd_step(network: Network, task_grads, reg_grads, eta: float) -> Network:
    """``w <- w - eta * (task + reg)`` for weights; biases only see the task gradient."""
    layers = network.param_layers
    if len(task_grads) != len(layers) or (reg_grads is not None and len(reg_grads) != len(layers)):
        raise EngineError("gradient list does not match parameter layers")
    for i, layer in enumerate(layers):
        dW, db = task_grads[i]
        if dW.shape != layer.weight.shape or (layer.bias is not None and db.shape != layer.bias.shape):
            raise EngineError(f"{layer.name}: gradient shape mismatch")
        g = dW if reg_grads is None else dW + reg_grads[i]
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(db))):
            raise EngineError(f"{layer.name}: non-finite gradient")
        layer.weight -= eta * g
        if layer.bias is not None:
            layer.bias -= eta * db
    return network


# ---------------------------------------------------------------------------
# Builders


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def lenet5(seed: int = 0, dtype=np.float64) -> Network:
    """conv 20x5x5 -> pool 2 -> conv 50x5x5 -> pool 2 -> fc 500 -> fc 10, ReLU after each hidden stage."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)

    def conv(name, lid, f, c, k):
        return Conv2d(name, he_uniform(rng, (f, c, k, k), c * k * k, dt), np.zeros(f, dt), lid)

    def fc(name, lid, o, i):
        return Linear(name, he_uniform(rng, (o, i), i, dt), np.zeros(o, dt), lid)

    return Network(
        [
            conv("conv1", 1, 20, 1, 5),
            MaxPool2d("pool1", 2, 2),
            ReLU("relu1"),
            conv("conv2", 2, 50, 20, 5),
            MaxPool2d("pool2", 2, 2),
            ReLU("relu2"),
            Flatten("flatten"),
            fc("fc1", 3, 500, 800),
            ReLU("relu3"),
            fc("fc2", 4, 10, 500),
        ],
        dtype=dt,
    )


def mlp(sizes: Sequence[int], seed: int = 0, dtype=np.float64) -> Network:
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    layers: list[Layer] = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        layers.append(Linear(f"fc{i}", he_uniform(rng, (n_out, n_in), n_in, dt), np.zeros(n_out, dt), i))
        if i < len(sizes) - 1:
            layers.append(ReLU(f"relu{i}"))
    return Network(layers, dtype=dt)


def tiny_cnn(seed: int = 0, dtype=np.float64) -> Network:
    """conv 4x5x5 -> pool 4 -> ReLU -> fc 10; a seconds-per-epoch stand-in for smoke runs."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype)
    return Network(
        [
            Conv2d("conv1", he_uniform(rng, (4, 1, 5, 5), 25, dt), np.zeros(4, dt), 1),
            MaxPool2d("pool1", 4, 4),
            ReLU("relu1"),
            Flatten("flatten"),
            Linear("fc1", he_uniform(rng, (10, 144), 144, dt), np.zeros(10, dt), 2),
        ],
        dtype=dt,
    )


ARCHITECTURES = {"lenet5": lenet5, "tiny": tiny_cnn}
