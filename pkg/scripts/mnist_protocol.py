"""Full MNIST protocol: float baseline, SGM fine-tuning, hard quantization, export check.

Writes everything under --out and finishes with ``summary.json``:

    python scripts/mnist_protocol.py --out runs/protocol --sgm-epochs 40
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from sgmquant.data import load_mnist, pixel_mean
from sgmquant.export import export, import_model, round_biases_to_f32, verify_equivalence
from sgmquant.regularizer import LambdaSchedule
from sgmquant.telemetry import near_level_fraction
from sgmquant.trainer import TrainConfig, evaluate, hard_quantize, train_float_baseline, train_sgm


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data-dir", default="/root/data/mnist")
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--baseline-epochs", type=int, default=10)
    p.add_argument("--sgm-epochs", type=int, default=40)
    p.add_argument("--lambda-end", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="float32")
    p.add_argument("--limit", type=int, default=None, help="use only the first K training images")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train, test = load_mnist(args.data_dir, "train"), load_mnist(args.data_dir, "test")
    mean = pixel_mean(train)  # full training file, as the CLI does
    train = train.limit(args.limit)
    t0 = time.time()
    base_cfg = TrainConfig(epochs=args.baseline_epochs, lr_start=0.05, lr_end=0.005, seed=args.seed,
                           lambda_schedule=LambdaSchedule(0, 0, args.baseline_epochs), dtype=args.dtype)
    base = train_float_baseline(base_cfg, train, test, out_dir=args.out / "baseline", input_mean=mean)
    sgm_cfg = TrainConfig(bits=args.bits, epochs=args.sgm_epochs, seed=args.seed, dtype=args.dtype,
                          lambda_schedule=LambdaSchedule(0, args.lambda_end, args.sgm_epochs))
    sgm = train_sgm(sgm_cfg, base.network, train, test, out_dir=args.out / "sgm", input_mean=mean)
    minutes = (time.time() - t0) / 60

    hard = round_biases_to_f32(hard_quantize(sgm.network, sgm.specs))
    hard_err = evaluate(hard, test, mean)
    export(hard, sgm.specs, args.out / "model.sgmq")
    # on-grid weights and f32-exact biases make the float32 cast lossless
    x = (test.images[:1000] - mean).astype(np.float32)
    report = verify_equivalence(import_model(args.out / "model.sgmq"), hard.astype(np.float32), x)
    summary = {
        "baseline_error": base.test_error,
        "sgm_soft_error": sgm.test_error,
        "sgm_hard_error": hard_err,
        "layers": {
            l.name: {"exponent": s.exponent, "near_level_fraction": near_level_fraction(l.weight, s),
                     "mean_abs_residual_steps": float(np.mean(np.abs(l.weight - h.weight)) / s.step)}
            for l, h, s in zip(sgm.network.param_layers, hard.param_layers, sgm.specs)
        },
        "export_max_deviation": report.max_abs_deviation,
        "export_agreement": report.agreement,
        "train_minutes": minutes,
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
