"""Training protocol: float pretraining, step search, SGM fine-tuning, hard quantization.

Learning rate and regularization strength are constant within an epoch and
interpolate linearly between their endpoints across epochs.  Batch order is a
function of ``(seed, epoch)`` only, so a run resumed from a checkpoint replays
exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .data import Dataset, batches, centered, pixel_mean
from .engine import ARCHITECTURES, EngineError, Network, loss_and_grads, sgd_step
from .fixed_point import QuantizerSpec, quantize_tensor
from .regularizer import (
    DEFAULT_F_RANGE,
    LambdaSchedule,
    LayerQuantState,
    lambda_at,
    layer_residual_sq,
    linear_ramp,
    reg_grad,
    search_step_exponent,
)
from .telemetry import (
    ModeSnapshot,
    snapshot_modes,
    weight_histogram,
    write_histogram,
    write_mode_counts,
    write_switches,
)

log = logging.getLogger(__name__)

EVAL_BATCH = 1000
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    bits: int = 2
    epochs: int = 80
    batch_size: int = 64
    lr_start: float = 0.01
    lr_end: float = 0.001
    lambda_schedule: LambdaSchedule | None = None
    seed: int = 0
    f_range: tuple[int, int] = DEFAULT_F_RANGE
    init: str = "fresh"
    arch: str = "lenet5"
    dtype: str = "float64"
    hist_bins: int = 81

    def __post_init__(self) -> None:
        if self.lambda_schedule is None:
            self.lambda_schedule = LambdaSchedule(0.0, 1000.0, self.epochs)
        self.f_range = tuple(self.f_range)
        self.validate()

    def validate(self) -> None:
        if self.bits < 2:
            raise ConfigError(f"bits must be >= 2, got {self.bits}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}:{self.lr_end}")
        if self.lambda_schedule.total_epochs != self.epochs:
            raise ConfigError("lambda schedule length must equal epochs")
        if self.f_range[0] > self.f_range[1]:
            raise ConfigError(f"empty exponent range {self.f_range}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["f_range"] = list(self.f_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lambda_schedule"] = LambdaSchedule(**d["lambda_schedule"])
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    return linear_ramp(config.lr_start, config.lr_end, epoch, config.epochs)


@dataclass
class CheckpointRecord:
    phase: str  # "baseline" or "sgm"
    epoch: int  # completed epochs
    network: Network
    specs: list[QuantizerSpec] | None
    lam: float
    lr: float
    train_loss: float
    test_error: float
    config: TrainConfig
    input_mean: float
    history: list[list] = field(default_factory=list)
    snapshots: list[ModeSnapshot] = field(default_factory=list)
    guard: dict = field(default_factory=lambda: {"initial_loss": None, "strikes": 0})

    def save(self, path) -> None:
        arrays = {}
        for l in self.network.param_layers:
            arrays[f"param/{l.name}/weight"] = l.weight
            if l.bias is not None:
                arrays[f"param/{l.name}/bias"] = l.bias
        for snap in self.snapshots:
            for lid, m in snap.modes.items():
                arrays[f"modes/{snap.epoch:05d}/{lid}"] = m
        meta = {
            "phase": self.phase,
            "epoch": self.epoch,
            "architecture": self.network.architecture(),
            "dtype": self.network.dtype.name,
            "specs": None if self.specs is None else [[s.bits, s.exponent] for s in self.specs],
            "lambda": self.lam,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "test_error": self.test_error,
            "config": self.config.to_dict(),
            "input_mean": self.input_mean,
            "history": self.history,
            "snapshot_epochs": [s.epoch for s in self.snapshots],
            "guard": self.guard,
        }
        ckpt.save(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "CheckpointRecord":
        meta, arrays = ckpt.load(path)
        try:
            net = Network.from_architecture(meta["architecture"], dtype=meta["dtype"])
            for l in net.param_layers:
                l.weight[...] = arrays[f"param/{l.name}/weight"]
                if l.bias is not None:
                    l.bias[...] = arrays[f"param/{l.name}/bias"]
            specs = None if meta["specs"] is None else [QuantizerSpec(b, f) for b, f in meta["specs"]]
            snapshots = []
            if specs is not None:
                spec_map = {l.layer_id: s for l, s in zip(net.param_layers, specs)}
                for e in meta["snapshot_epochs"]:
                    modes = {l.layer_id: arrays[f"modes/{e:05d}/{l.layer_id}"] for l in net.param_layers}
                    snapshots.append(ModeSnapshot(e, modes, spec_map))
            return cls(
                phase=meta["phase"], epoch=meta["epoch"], network=net, specs=specs, lam=meta["lambda"],
                lr=meta["lr"], train_loss=meta["train_loss"], test_error=meta["test_error"],
                config=TrainConfig.from_dict(meta["config"]), input_mean=meta["input_mean"],
                history=meta["history"], snapshots=snapshots, guard=meta["guard"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ckpt.CheckpointError(f"malformed checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Building blocks


def build_network(config: TrainConfig) -> Network:
    return ARCHITECTURES[config.arch](seed=config.seed, dtype=np.dtype(config.dtype))


def resolve_specs(network: Network, bits: int, f_range=DEFAULT_F_RANGE) -> list[QuantizerSpec]:
    specs = []
    for l in network.param_layers:
        found = search_step_exponent(l.weight, bits, f_range)
        if found.degenerate:
            raise ConfigError(f"layer {l.name} is all zeros; its step size is undetermined")
        specs.append(found.spec)
    return specs


def layer_states(network: Network, specs: Sequence[QuantizerSpec]) -> list[LayerQuantState]:
    return [LayerQuantState.for_weights(l.layer_id, s, l.weight) for l, s in zip(network.param_layers, specs)]


def hard_quantize(network: Network, specs: Sequence[QuantizerSpec]) -> Network:
    """Copy of ``network`` with every weight tensor snapped to its grid; biases untouched."""
    if len(specs) != len(network.param_layers):
        raise ConfigError(f"{len(specs)} specs for {len(network.param_layers)} parameter layers")
    out = network.copy()
    for l, s in zip(out.param_layers, specs):
        l.weight[...] = quantize_tensor(l.weight, s)
    return out


def predict_classes(network: Network, images: np.ndarray, input_mean: float = 0.0) -> np.ndarray:
    preds = [
        network.predict(centered(images[i : i + EVAL_BATCH], input_mean, network.dtype)).argmax(axis=1)
        for i in range(0, len(images), EVAL_BATCH)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def evaluate(network: Network, dataset: Dataset, input_mean: float = 0.0) -> float:
    """Fraction of misclassified samples."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    return float(np.mean(predict_classes(network, dataset.images, input_mean) != dataset.labels))


def layer_residuals(network: Network, specs) -> list[float]:
    """Per-layer ``sum (w - Q(w))**2 / (2 M)``, i.e. the regularizer with lambda = 1."""
    return [layer_residual_sq(l.weight, s) / (2 * l.weight.size) for l, s in zip(network.param_layers, specs)]


# ---------------------------------------------------------------------------
# Training loop


def metrics_header(network: Network) -> list[str]:
    return ["epoch", "lr", "lambda", "train_loss", "test_error"] + [
        f"resid_{l.name}" for l in network.param_layers
    ]


def write_metrics(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _run_epochs(
    rec: CheckpointRecord,
    train: Dataset,
    test: Dataset | None,
    regularize: bool,
    out_dir: Path | None,
    max_steps: int | None = None,
    on_epoch: Callable[[CheckpointRecord], None] | None = None,
    stop_epoch: int | None = None,
) -> CheckpointRecord:
    config, net = rec.config, rec.network
    last = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    dtype = net.dtype
    steps = 0
    names = {l.layer_id: l.name for l in net.param_layers}
    while rec.epoch < last:
        epoch = rec.epoch
        lam = lambda_at(config.lambda_schedule, epoch)
        eta = lr_at(config, epoch)
        states = layer_states(net, rec.specs) if regularize else None
        total, seen = 0.0, 0
        for xb, yb in batches(train, config.batch_size, config.seed, epoch):
            if max_steps is not None and steps >= max_steps:
                return rec
            loss, grads = loss_and_grads(net, centered(xb, rec.input_mean, dtype), yb)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {steps}")
            rg = reg_grad(net.weights(), states, lam) if regularize else None
            try:
                sgd_step(net, grads, rg, eta)
            except EngineError as exc:
                raise DivergenceError(f"epoch {epoch}, step {steps}: {exc}") from exc
            total += loss * len(yb)
            seen += len(yb)
            steps += 1
        train_loss = total / seen
        _guard(rec.guard, train_loss, epoch)
        test_error = evaluate(net, test, rec.input_mean) if test is not None and len(test) else float("nan")
        specs = rec.specs
        resid = layer_residuals(net, specs) if specs is not None else [float("nan")] * len(names)
        rec.history.append([epoch, eta, lam, train_loss, test_error, *resid])
        rec.epoch, rec.lam, rec.lr, rec.train_loss, rec.test_error = epoch + 1, lam, eta, train_loss, test_error
        log.info("%s epoch %d lr=%.5g lambda=%.5g loss=%.5f test_err=%.4f",
                 rec.phase, epoch, eta, lam, train_loss, test_error)
        if specs is not None:
            rec.snapshots.append(snapshot_modes(net, specs, rec.epoch))
        if out_dir is not None:
            _write_outputs(rec, out_dir)
        if on_epoch is not None:
            on_epoch(rec)
    return rec


def _guard(state: dict, loss: float, epoch: int) -> None:
    if state["initial_loss"] is None:
        state["initial_loss"] = loss
        return
    if loss > DIVERGENCE_FACTOR * state["initial_loss"]:
        state["strikes"] += 1
        if state["strikes"] >= DIVERGENCE_PATIENCE:
            raise DivergenceError(
                f"train loss {loss:.4g} above {DIVERGENCE_FACTOR}x initial for {DIVERGENCE_PATIENCE} epochs (epoch {epoch})"
            )
    else:
        state["strikes"] = 0


def _write_outputs(rec: CheckpointRecord, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = rec.network
    write_metrics(out_dir / f"metrics_{rec.phase}.csv", metrics_header(net), rec.history)
    if rec.specs is not None:
        tdir = out_dir / "telemetry"
        tdir.mkdir(exist_ok=True)
        names = {l.layer_id: l.name for l in net.param_layers}
        write_mode_counts(tdir, rec.snapshots, names)
        write_switches(tdir, rec.snapshots, names)
        _write_histograms(tdir, rec, rec.epoch)
    rec.save(out_dir / f"{rec.phase}.sgmc")


def _write_histograms(tdir: Path, rec: CheckpointRecord, epoch: int) -> None:
    tdir.mkdir(parents=True, exist_ok=True)
    for l, s in zip(rec.network.param_layers, rec.specs):
        write_histogram(tdir, weight_histogram(rec.network, l.layer_id, s, rec.config.hist_bins, epoch), l.name)


def train_float_baseline(
    config: TrainConfig,
    train: Dataset,
    test: Dataset | None = None,
    network: Network | None = None,
    out_dir: Path | None = None,
    max_steps: int | None = None,
    input_mean: float | None = None,
) -> CheckpointRecord:
    """Plain SGD with the regularizer off; produces the SGM initialization."""
    if not config.lambda_schedule.is_zero:
        raise ConfigError("float baseline requires a zero lambda schedule")
    net = network if network is not None else build_network(config)
    mean = pixel_mean(train) if input_mean is None else input_mean
    rec = CheckpointRecord("baseline", 0, net, None, 0.0, lr_at(config, 0), float("nan"), float("nan"), config, mean)
    return _run_epochs(rec, train, test, regularize=False, out_dir=out_dir, max_steps=max_steps)


def train_sgm(
    config: TrainConfig,
    init_network: Network | None,
    train: Dataset,
    test: Dataset | None = None,
    out_dir: Path | None = None,
    resume: CheckpointRecord | None = None,
    input_mean: float | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[CheckpointRecord], None] | None = None,
) -> CheckpointRecord:
    """SGM fine-tuning: one-shot step search on the initial weights, then regularized SGD.

    ``stop_after`` ends the run after that many completed epochs (used to
    produce resumable mid-run checkpoints).
    """
    if resume is not None:
        if resume.phase != "sgm" or resume.specs is None:
            raise ConfigError("can only resume from an SGM checkpoint")
        if resume.config.to_dict() != config.to_dict():
            raise ConfigError("resume config differs from the checkpoint's config")
        rec = resume
    else:
        if init_network is None:
            raise ConfigError("train_sgm needs an initial network")
        net = init_network.copy()
        if net.dtype != np.dtype(config.dtype):
            raise ConfigError(f"network dtype {net.dtype} != config dtype {config.dtype}")
        specs = resolve_specs(net, config.bits, config.f_range)
        mean = pixel_mean(train) if input_mean is None else input_mean
        rec = CheckpointRecord("sgm", 0, net, specs, 0.0, lr_at(config, 0), float("nan"), float("nan"), config, mean)
        rec.snapshots.append(snapshot_modes(net, specs, 0))
        if out_dir is not None:
            _write_histograms(Path(out_dir) / "telemetry", rec, 0)
    return _run_epochs(rec, train, test, regularize=True, out_dir=out_dir, on_epoch=on_epoch,
                       stop_epoch=stop_after)
