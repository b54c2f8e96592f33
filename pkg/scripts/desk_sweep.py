"""Desk-scale lambda sweep: Adam baseline plus AdaBreg over a lambda grid.

    python3 scripts/desk_sweep.py --out runs/desk --lambdas 0,0.05,0.1,0.12,0.5

Writes sweep.csv / aggregate.csv (and one metrics CSV per run) under --out for
each optimizer, then prints a summary table.
"""
import argparse
from pathlib import Path

from bregsnn.optim import OptimConfig
from bregsnn.train import TrainConfig, lambda_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--lambdas", default="0.05,0.1,0.12,0.5")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()

    lambdas = [float(x) for x in args.lambdas.split(",")]
    base = TrainConfig(epochs=args.epochs)
    adam = TrainConfig(epochs=args.epochs, optimizer=OptimConfig("adam", mu=base.optimizer.mu))

    _, adam_agg = lambda_sweep(adam, [0.0], args.repeats, out_dir=args.out / "adam", workers=args.workers)
    _, aggs = lambda_sweep(base, lambdas, args.repeats, out_dir=args.out / "adabreg", workers=args.workers)

    print(f"{'run':<16}{'peak_val':>10}{'nonzero':>10}{'test':>10}")
    a = adam_agg[0]
    print(f"{'adam':<16}{a.mean_peak_val_acc:>10.4f}{a.mean_final_nonzero_frac:>10.3f}{a.mean_test_acc:>10.4f}")
    for a in aggs:
        label = f"adabreg {a.lam:g}"
        print(f"{label:<16}{a.mean_peak_val_acc:>10.4f}{a.mean_final_nonzero_frac:>10.3f}{a.mean_test_acc:>10.4f}")


if __name__ == "__main__":
    main()
