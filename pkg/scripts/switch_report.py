"""Mode-switch and collapse report for a finished run directory.

Reads ``telemetry/switches.csv`` and ``telemetry/modes_*.csv`` and prints, per
layer, the ratio of weights changing mode over every 10-epoch interval and the
final occupancy of each mode:

    python scripts/switch_report.py runs/20261015-120000-0
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path


def read(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("run_dir", type=Path)
    p.add_argument("--interval", type=int, default=10)
    args = p.parse_args()
    tel = args.run_dir / "telemetry"

    _, rows = read(tel / "switches.csv")
    by_layer = defaultdict(list)
    for start, end, layer, ratio in rows:
        if int(end) - int(start) == args.interval:
            by_layer[layer].append((int(start), int(end), float(ratio)))
    print(f"fraction of weights switching mode over {args.interval}-epoch intervals")
    for layer, items in by_layer.items():
        cells = "  ".join(f"{a}->{b}: {100 * r:5.2f}%" for a, b, r in items[:: args.interval])
        print(f"  {layer:8s} {cells}")

    print("final mode occupancy")
    for path in sorted(tel.glob("modes_*.csv")):
        header, rows = read(path)
        counts = [int(c) for c in rows[-1][1:]]
        total = sum(counts)
        cells = "  ".join(f"{h}: {100 * c / total:5.1f}%" for h, c in zip(header[1:], counts))
        print(f"  {path.stem[6:]:8s} epoch {rows[-1][0]}  {cells}")


if __name__ == "__main__":
    main()
