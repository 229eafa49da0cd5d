"""Mode tracking: which quantization level each weight sits nearest to, over time.

Snapshots are raw per-epoch mode indices; switch ratios over any interval and
per-epoch weight histograms are derived views written as CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fixed_point import QuantizerSpec, mode_indices

DEFAULT_BINS = 81


class TelemetryError(ValueError):
    pass


@dataclass(frozen=True)
class ModeSnapshot:
    epoch: int
    modes: Mapping[int, np.ndarray]  # layer_id -> int8 indices, flattened
    specs: Mapping[int, QuantizerSpec]


@dataclass(frozen=True)
class HistogramRecord:
    epoch: int
    layer_id: int
    edges: np.ndarray
    counts: np.ndarray


def snapshot_modes(network, specs: Sequence[QuantizerSpec], epoch: int) -> ModeSnapshot:
    layers = network.param_layers
    if len(specs) != len(layers):
        raise TelemetryError(f"{len(specs)} specs for {len(layers)} layers")
    modes, spec_map = {}, {}
    for layer, spec in zip(layers, specs):
        if spec.bits > 8:
            raise TelemetryError("mode indices are stored as int8; bits must be <= 8")
        modes[layer.layer_id] = mode_indices(layer.weight, spec).astype(np.int8).ravel()
        spec_map[layer.layer_id] = spec
    return ModeSnapshot(epoch, modes, spec_map)


def switch_ratio(a: ModeSnapshot, b: ModeSnapshot, layer_id: int) -> float:
    """Fraction of the layer's weights whose mode index differs between snapshots."""
    if layer_id not in a.modes or layer_id not in b.modes:
        raise TelemetryError(f"layer {layer_id} missing from a snapshot")
    ma, mb = a.modes[layer_id], b.modes[layer_id]
    if ma.shape != mb.shape:
        raise TelemetryError(f"layer {layer_id}: shape {ma.shape} vs {mb.shape}")
    if a.specs.get(layer_id) != b.specs.get(layer_id):
        raise TelemetryError(f"layer {layer_id}: snapshots use different quantizers")
    if ma.size == 0:
        return 0.0
    return float(np.count_nonzero(ma != mb)) / ma.size


def weight_histogram(network, layer_id: int, spec: QuantizerSpec, bins: int = DEFAULT_BINS, epoch: int = -1):
    """Uniform histogram over ``[-2**(N-1) * step, 2**(N-1) * step]``; outliers land in the end bins."""
    if bins < 3:
        raise TelemetryError("bins must be >= 3")
    w = np.asarray(network.layer(layer_id).weight, dtype=np.float64).ravel()
    if w.size == 0:
        raise TelemetryError(f"layer {layer_id} is empty")
    half = 2 ** (spec.bits - 1) * spec.step
    edges = np.linspace(-half, half, bins + 1)
    counts, _ = np.histogram(np.clip(w, -half, half), bins=edges)
    return HistogramRecord(epoch, layer_id, edges, counts.astype(np.int64))


def near_level_fraction(w: np.ndarray, spec: QuantizerSpec, tol_steps: float = 0.1) -> float:
    """Fraction of weights within ``tol_steps * step`` of a representable level."""
    w = np.asarray(w, dtype=np.float64).ravel()
    levels = np.ldexp(mode_indices(w, spec).astype(np.float64), -spec.exponent)
    return float(np.mean(np.abs(w - levels) <= tol_steps * spec.step))


# ---------------------------------------------------------------------------
# CSV writers


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_mode_counts(out_dir: Path, snapshots: Sequence[ModeSnapshot], names: Mapping[int, str]) -> None:
    """``modes_<layer>.csv``: one row per epoch, one count column per mode index."""
    if not snapshots:
        return
    for lid, name in names.items():
        k = snapshots[0].specs[lid].max_index
        header = ["epoch"] + [f"k{i}" for i in range(-k, k + 1)]
        rows = []
        for snap in snapshots:
            counts = np.bincount(snap.modes[lid].astype(np.int64) + k, minlength=2 * k + 1)
            rows.append([snap.epoch, *counts.tolist()])
        _write_csv(Path(out_dir) / f"modes_{name}.csv", header, rows)


def switch_rows(snapshots: Sequence[ModeSnapshot], names: Mapping[int, str], intervals=(1, 10)):
    by_epoch = {s.epoch: s for s in snapshots}
    rows = []
    for interval in intervals:
        for snap in snapshots:
            later = by_epoch.get(snap.epoch + interval)
            if later is None:
                continue
            for lid, name in names.items():
                rows.append([snap.epoch, later.epoch, name, f"{switch_ratio(snap, later, lid):.6f}"])
    return rows


def write_switches(out_dir: Path, snapshots, names, intervals=(1, 10)) -> None:
    """``switches.csv``: epoch_from, epoch_to, layer, ratio."""
    _write_csv(Path(out_dir) / "switches.csv", ["epoch_from", "epoch_to", "layer", "ratio"],
               switch_rows(snapshots, names, intervals))


def write_histogram(out_dir: Path, rec: HistogramRecord, name: str) -> None:
    """``hist_<layer>_<epoch>.csv``: bin_left, bin_right, count."""
    rows = [[repr(float(l)), repr(float(r)), int(c)] for l, r, c in zip(rec.edges[:-1], rec.edges[1:], rec.counts)]
    _write_csv(Path(out_dir) / f"hist_{name}_{rec.epoch}.csv", ["bin_left", "bin_right", "count"], rows)
