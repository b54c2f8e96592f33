"""Command-line entry point.

Exit codes: 0 success, 1 I/O or format failure, 2 usage error, 3 divergence.
Sweep parallelism is capped by the BREG_SNN_THREADS environment variable.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .bregman import sparsity_report
from .config import ConfigError, RunConfig, apply_overrides, dumps, load_config
from .numerics import Rng
from .optim import Algorithm, CheckpointError, DivergenceError, load_checkpoint
from .snn import Network
from .train import METRICS_HEADER, evaluate, lambda_sweep, load_splits, run_training

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="TOML run config (defaults used when omitted)")
    p.add_argument("--lambda", dest="lam", type=float, help="sparsity threshold lambda")
    p.add_argument("--optimizer", choices=[a.value for a in Algorithm])
    p.add_argument("--lr", type=float, help="base / peak learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="SPK1 dataset file (overrides [data])")
    p.add_argument("--out", dest="out_dir", help="output directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--no-scheduler", dest="scheduler", action="store_false", default=None,
                   help="constant learning rate instead of OneCycle")
    g.add_argument("--scheduler", dest="scheduler", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bregsnn", description="Sparse SNN training with linearized Bregman iterations."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic SPK1 dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--task", choices=["pattern", "seqpixels"], default="pattern")
    g.add_argument("--seed", type=int, default=1234)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--timesteps", type=int, default=50, help="pattern task T")
    g.add_argument("--channels", type=int, default=40, help="pattern task C before binning")
    g.add_argument("--base-rate", type=float, default=1.0)
    g.add_argument("--jitter", type=int, default=2, help="max template shift in time bins")
    g.add_argument("--per-class", type=int, default=80)
    g.add_argument("--bin", type=int, default=1, help="channel binning factor")
    g.add_argument("--glyph-size", type=int, default=8, help="seqpixels image side")
    g.add_argument("--perm-seed", type=int, default=7, help="seqpixels permutation; -1 for raster order")
    g.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", help="train one network")
    _add_run_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_run_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")

    s = sub.add_parser("sweep", help="lambda sweep over several seeds")
    _add_run_flags(s)
    s.add_argument("--lambdas", type=_float_list, required=True, help="e.g. 0,0.05,0.1")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--workers", type=int, help="parallel runs (default: BREG_SNN_THREADS or cpu count)")

    i = sub.add_parser("inspect", help="per-group sparsity of a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("--csv", help="also write the table as CSV")
    return parser


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(
        rc, lam=args.lam, optimizer=args.optimizer, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed, scheduler=args.scheduler,
        data=args.data, out_dir=args.out_dir,
    )


def cmd_gen_data(args) -> int:
    rng = Rng(args.seed)
    if args.task == "pattern":
        ds = data_mod.gen_pattern_task(rng, args.classes, args.timesteps, args.channels,
                                       args.base_rate, args.jitter, args.per_class)
    else:
        images, labels = data_mod.make_glyphs(rng, args.classes, args.per_class, args.glyph_size)
        perm = None if args.perm_seed < 0 else args.perm_seed
        ds = data_mod.gen_sequential_pixels(images, labels, args.classes, perm)
    if args.bin != 1:
        ds = data_mod.bin_channels(ds, args.bin)
    ds.name = Path(args.output).stem
    data_mod.save(ds, args.output)
    print(ds.summary())
    return EXIT_OK


def _echo(rc: RunConfig) -> None:
    print("# effective config")
    print(dumps(rc).rstrip())
    print("# end config", flush=True)


def cmd_train(args) -> int:
    rc = _run_config(args)
    _echo(rc)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dumps(rc))
    try:
        res = run_training(rc.train, metrics_path=out / "metrics.csv",
                           checkpoint_path=out / "checkpoint.snnc", best_checkpoint_path=out / "best.snnc")
    except DivergenceError as err:
        print(str(err), file=sys.stderr)
        return EXIT_DIVERGED
    print(f"best val acc {res.best_val_acc:.4f} (epoch {res.best_epoch})")
    if res.test_acc is not None:
        print(f"test loss {res.test_loss:.4f} acc {res.test_acc:.4f} (final model)")
    print(res.final_report.format_table())
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _run_config(args)
    states = load_checkpoint(args.checkpoint)
    splits = dict(zip(("train", "val", "test"), load_splits(rc.train.data)))
    net = Network(rc.train.network, {n: s.theta for n, s in states.items()})
    loss, acc = evaluate(net, splits[args.split])
    print(f"{args.split}: loss {loss:.6f} acc {acc:.4f} n={len(splits[args.split])}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    _echo(rc)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if not args.lambdas:
        raise UsageError("--lambdas is empty")
    runs, aggs = lambda_sweep(rc.train, args.lambdas, args.repeats, out_dir=rc.out_dir, workers=args.workers)
    print("lambda  peak_val_acc  final_nonzero_frac  test_acc  completed  diverged")
    for a in aggs:
        print(f"{a.lam:<7g} {a.mean_peak_val_acc:>12.4f} {a.mean_final_nonzero_frac:>19.4f} "
              f"{a.mean_test_acc:>9.4f} {a.completed:>10d} {a.diverged:>9d}")
    return EXIT_OK if any(not r.diverged for r in runs) else EXIT_DIVERGED


def cmd_inspect(args) -> int:
    states = load_checkpoint(args.checkpoint)
    rep = sparsity_report((n, s.theta) for n, s in states.items())
    print(rep.format_table())
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, data_mod.DatasetFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
