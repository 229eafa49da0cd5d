"""Command-line entry point: ``python -m sgmquant <command>``.

Commands
    train     float baseline (unless ``--init`` names a checkpoint), then SGM fine-tuning
    quantize  snap a checkpoint's weights onto its grid and report the error change
    eval      test error of a checkpoint (.sgmc) or exported model (.sgmq)
    export    write an SGMQ file and verify integer inference against the float network
    inspect   per-layer bit width, exponent and mode histogram

Exit codes: 0 success, 2 usage error, 3 data or file error, 4 divergence,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import DataError, Dataset, load_mnist, pixel_mean
from .engine import ARCHITECTURES
from .export import (
    ExportError,
    biases_are_f32_exact,
    export,
    import_model,
    integer_forward,
    round_biases_to_f32,
    verify_equivalence,
)
from .fixed_point import QuantizationError, QuantizerSpec, mode_indices, quantize_tensor
from .regularizer import DEFAULT_F_RANGE, LambdaSchedule, RegularizerError
from .trainer import (
    CheckpointRecord,
    ConfigError,
    DivergenceError,
    TrainConfig,
    evaluate,
    hard_quantize,
    resolve_specs,
    train_float_baseline,
    train_sgm,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4, 5
DEFAULT_DATA_DIR = "/root/data/mnist"
VERIFY_SAMPLES = 1000

log = logging.getLogger("sgmquant")


class UsageError(Exception):
    pass


class VerificationError(Exception):
    pass


def parse_range(text: str) -> tuple[float, float]:
    """``"0.01:0.001"`` -> (0.01, 0.001); a single number means a constant."""
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:end, got {text!r}") from None
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected start:end, got {text!r}")
    return vals[0], vals[1]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS; identical output bytes for identical inputs")
    common.add_argument("--data-dir", default=os.environ.get("SGM_DATA_DIR", DEFAULT_DATA_DIR),
                        help="MNIST IDX directory (default: $SGM_DATA_DIR or %(default)s)")
    common.add_argument("--limit", type=int, default=None, metavar="K", help="use at most K samples per split")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sgmquant", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="baseline + SGM fine-tuning")
    t.add_argument("--arch", choices=sorted(ARCHITECTURES), default="lenet5")
    t.add_argument("--bits", type=int, default=2)
    t.add_argument("--epochs", type=int, default=80)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--lr", type=parse_range, default=(0.01, 0.001), metavar="START:END")
    t.add_argument("--lambda", dest="lam", type=parse_range, default=(0.0, 1000.0), metavar="START:END")
    t.add_argument("--f-range", type=parse_range, default=DEFAULT_F_RANGE, metavar="MIN:MAX")
    t.add_argument("--init", default="fresh", help="'fresh' or a checkpoint to fine-tune from")
    t.add_argument("--resume", default=None, metavar="SGMC", help="continue an interrupted SGM run")
    t.add_argument("--baseline-epochs", type=int, default=10)
    t.add_argument("--baseline-lr", type=parse_range, default=(0.05, 0.005), metavar="START:END")
    t.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    t.add_argument("--validation", action="store_true", help="hold out the last 10k training images and report on them")
    t.add_argument("--runs-root", default="runs")
    t.add_argument("--run-dir", default=None, help="explicit output directory (default: <runs-root>/<timestamp>-<seed>)")

    q = sub.add_parser("quantize", parents=[common], help="hard-quantize a checkpoint")
    q.add_argument("checkpoint")
    q.add_argument("--bits", type=int, default=None, help="only used when the checkpoint has no step sizes yet")
    q.add_argument("--out", default=None)

    e = sub.add_parser("eval", parents=[common], help="test error of a .sgmc or .sgmq file")
    e.add_argument("model")
    e.add_argument("--split", choices=["test", "val"], default="test")

    x = sub.add_parser("export", parents=[common], help="write SGMQ and verify integer inference")
    x.add_argument("checkpoint")
    x.add_argument("--out", default=None)

    i = sub.add_parser("inspect", parents=[common], help="per-layer N, f and mode histogram")
    i.add_argument("model")
    return p


# ---------------------------------------------------------------------------
# helpers


def _load_split(args, split: str) -> Dataset:
    ds = load_mnist(args.data_dir, split, validation=getattr(args, "validation", False))
    return ds.limit(args.limit)


def _input_mean(args) -> float:
    """Mean pixel of the full official training file; a property of the data, not the run."""
    return pixel_mean(load_mnist(args.data_dir, "train"))


def _load_record(path) -> CheckpointRecord:
    try:
        return CheckpointRecord.load(path)
    except FileNotFoundError:
        raise DataError(f"no such checkpoint: {path}") from None


def _run_dir(args) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        d = Path(args.runs_root) / f"{stamp}-{args.seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _pct(err: float) -> str:
    return f"{100 * err:.2f}%"


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    if args.bits < 2:
        raise UsageError(f"--bits must be >= 2 (got {args.bits})")
    if args.limit is not None and args.limit < 1:
        raise UsageError("--limit must be positive")
    f_range = (int(args.f_range[0]), int(args.f_range[1]))
    sgm_cfg = TrainConfig(
        bits=args.bits, epochs=args.epochs, batch_size=args.batch, lr_start=args.lr[0], lr_end=args.lr[1],
        lambda_schedule=LambdaSchedule(args.lam[0], args.lam[1], args.epochs), seed=args.seed, f_range=f_range,
        init=args.init, arch=args.arch, dtype=args.dtype,
    )
    base_cfg = None
    if args.init == "fresh" and args.resume is None:
        base_cfg = TrainConfig(
            bits=args.bits, epochs=args.baseline_epochs, batch_size=args.batch,
            lr_start=args.baseline_lr[0], lr_end=args.baseline_lr[1],
            lambda_schedule=LambdaSchedule(0.0, 0.0, args.baseline_epochs), seed=args.seed,
            f_range=f_range, arch=args.arch, dtype=args.dtype,
        )

    train = _load_split(args, "train")
    held_out = _load_split(args, "val" if args.validation else "test")
    mean = _input_mean(args)
    out = _run_dir(args)
    (out / "command.json").write_text(json.dumps({k: v for k, v in vars(args).items() if k != "func"},
                                                 sort_keys=True, indent=1) + "\n")
    print(f"run directory: {out}")

    resume = None
    if args.resume is not None:
        resume = _load_record(args.resume)
        init_net = None
    elif base_cfg is not None:
        base = train_float_baseline(base_cfg, train, held_out, out_dir=out, input_mean=mean)
        print(f"baseline: {base_cfg.epochs} epochs, {held_out.split_tag} error {_pct(base.test_error)}")
        init_net = base.network
    else:
        init_rec = _load_record(args.init)
        init_net = init_rec.network
        if init_net.dtype != np.dtype(args.dtype):
            init_net = init_net.astype(args.dtype)

    rec = train_sgm(sgm_cfg, init_net, train, held_out, out_dir=out, resume=resume, input_mean=mean)
    hard = hard_quantize(rec.network, rec.specs)
    hard_err = evaluate(hard, held_out, rec.input_mean)
    for l, s in zip(rec.network.param_layers, rec.specs):
        log.info("%s: N=%d f=%d", l.name, s.bits, s.exponent)
    print(f"sgm: {rec.epoch} epochs, {held_out.split_tag} error soft {_pct(rec.test_error)} hard {_pct(hard_err)}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    rec = _load_record(args.checkpoint)
    test = _load_split(args, "test")
    specs = rec.specs
    if specs is None:
        bits = args.bits if args.bits is not None else rec.config.bits
        if bits < 2:
            raise UsageError(f"--bits must be >= 2 (got {bits})")
        specs = resolve_specs(rec.network, bits, rec.config.f_range)
    before = evaluate(rec.network, test, rec.input_mean)
    hard = round_biases_to_f32(hard_quantize(rec.network, specs))
    after = evaluate(hard, test, rec.input_mean)
    rec.network, rec.specs, rec.test_error = hard, specs, after
    rec.phase = "quantized"
    path = Path(args.out) if args.out else Path(args.checkpoint).with_name(Path(args.checkpoint).stem + "-hard.sgmc")
    rec.save(path)
    print(f"test error soft {_pct(before)} hard {_pct(after)} delta {100 * (after - before):+.2f} pp")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_split(args, args.split)
    if len(ds) == 0:
        raise DataError(f"{args.split} split is empty")
    path = Path(args.model)
    if path.suffix == ".sgmq":
        model = _import(path)
        x = (ds.images - _input_mean(args)).astype(np.float32)
        preds = np.concatenate([integer_forward(model, x[i : i + 1000]).argmax(axis=1) for i in range(0, len(x), 1000)])
        err = float(np.mean(preds != ds.labels))
    else:
        rec = _load_record(path)
        err = evaluate(rec.network, ds, rec.input_mean)
    print(f"{args.split} error {_pct(err)} ({len(ds)} samples)")
    return EXIT_OK


def _import(path):
    try:
        return import_model(path)
    except FileNotFoundError:
        raise DataError(f"no such model file: {path}") from None


def cmd_export(args) -> int:
    rec = _load_record(args.checkpoint)
    if rec.specs is None:
        raise UsageError("checkpoint has no step sizes; run `quantize` first")
    off_grid = [l.name for l, s in zip(rec.network.param_layers, rec.specs)
                if not np.array_equal(quantize_tensor(l.weight, s), l.weight)]
    if off_grid:
        raise UsageError(f"weights of {', '.join(off_grid)} are off-grid; run `quantize` first")
    if not biases_are_f32_exact(rec.network):
        raise UsageError("biases are not float32-exact; run `quantize` first")
    path = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".sgmq")
    export(rec.network, rec.specs, path)
    model = import_model(path)
    test = _load_split(args, "test").limit(VERIFY_SAMPLES)
    x = (test.images - rec.input_mean).astype(np.float32)
    # the source weights and biases are exact in float32, so the cast loses nothing
    report = verify_equivalence(model, rec.network.astype(np.float32), x)
    print(f"wrote {path} ({path.stat().st_size} bytes)")
    print(f"integer vs float on {report.samples} samples: max |dlogit| {report.max_abs_deviation:g}, "
          f"agreement {100 * report.agreement:.2f}%")
    if not report.ok:
        raise VerificationError(f"integer inference deviates from the float network (max {report.max_abs_deviation:g})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.model)
    if path.suffix == ".sgmq":
        model = _import(path)
        rows = [(q.name, q.bits, q.exponent, q.mantissas.astype(np.int64)) for q in model.layers if q.has_params]
    else:
        rec = _load_record(path)
        if rec.specs is None:
            print(f"{path}: float checkpoint ({rec.phase}, epoch {rec.epoch}); no step sizes yet")
            return EXIT_OK
        rows = [(l.name, s.bits, s.exponent, mode_indices(l.weight, s))
                for l, s in zip(rec.network.param_layers, rec.specs)]
        print(f"{path}: phase {rec.phase}, epoch {rec.epoch}, test error {_pct(rec.test_error)}")
    for name, bits, f, k in rows:
        kmax = 2 ** (bits - 1) - 1
        counts = np.bincount(k.ravel() + kmax, minlength=2 * kmax + 1)
        hist = " ".join(f"{i:+d}:{c}" for i, c in zip(range(-kmax, kmax + 1), counts))
        print(f"{name:10s} N={bits} f={f:+d} step={QuantizerSpec(bits, f).step:g} M={k.size}  {hist}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "quantize": cmd_quantize, "eval": cmd_eval, "export": cmd_export, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, RegularizerError, QuantizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
