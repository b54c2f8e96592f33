"""Training loop: cross-entropy, mini-batches, epoch metrics, divergence, lambda sweeps."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as data_mod
from .bregman import ProxSpec, SparsityReport, sparsity_report
from .numerics import Rng
from .optim import (
    Algorithm,
    DivergenceError,
    LrSchedule,
    OptimConfig,
    Optimizer,
    ParamState,
    ScheduleKind,
    checkpoint_bytes,
    init_param_state,
    lr_at,
)
from .snn import Network, NetworkSpec, backward, build_network, forward

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "loss", "accuracy", "nonzero_count", "nonzero_fraction", "lr"]
SWEEP_HEADER = ["lambda", "seed", "peak_val_acc", "final_nonzero_frac", "diverged"]
AGGREGATE_HEADER = [
    "lambda",
    "mean_peak_val_acc",
    "mean_final_nonzero_frac",
    "mean_test_acc",
    "completed",
    "diverged",
]
BREGMAN = (Algorithm.LINBREG, Algorithm.ADABREG)


@dataclass
class DataConfig:
    """Where the samples come from: an SPK1 file or one of the generators."""

    path: str | None = None
    task: str = "pattern"
    seed: int = 1234
    num_classes: int = 10
    T: int = 50
    channels: int = 40
    base_rate: float = 1.0
    jitter: int = 2
    n_per_class: int = 80
    bin: int = 1
    glyph_size: int = 8
    perm_seed: int | None = 7  # None or negative: identity order
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if self.perm_seed is not None and self.perm_seed < 0:
            self.perm_seed = None


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: OptimConfig = field(default_factory=lambda: OptimConfig(Algorithm.ADABREG, mu=5e-3))
    lam: float = 0.0
    scheduler: bool = True
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec.desk)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")

    def schedule(self, steps_per_epoch: int) -> LrSchedule:
        return LrSchedule(
            ScheduleKind.ONECYCLE if self.scheduler else ScheduleKind.CONSTANT,
            max_lr=self.optimizer.mu,
            total_steps=self.epochs * steps_per_epoch,
            pct_start=self.pct_start,
            div_factor=self.div_factor,
            final_div_factor=self.final_div_factor,
        )


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    accuracy: float
    nonzero_count: int
    nonzero_fraction: float
    lr: float

    def row(self) -> list:
        return [self.epoch, self.split, repr(self.loss), repr(self.accuracy), self.nonzero_count,
                repr(self.nonzero_fraction), repr(self.lr)]


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, label):
    """Softmax cross-entropy. Returns (loss, dloss/dlogits).

    Accepts one logit vector with an int label, or a batch ``[B, K]`` with a
    label array, in which case the loss and its gradient are batch means.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    K = z2.shape[1]
    if y.shape != (z2.shape[0],) or np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"label out of range for {K} classes: {label}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    losses = lse - shifted[rows, y]
    probs = np.exp(shifted - lse[:, None])
    probs[rows, y] -= 1.0
    if single:
        return float(losses[0]), probs[0]
    return float(losses.mean()), probs / len(y)


# ---------------------------------------------------------------------------
# one run


@dataclass
class TrainingContext:
    """Mutable per-run state threaded through train_epoch."""

    optimizer: Optimizer
    schedule: LrSchedule
    rng: Rng
    step: int = 0
    epoch: int = 0


def make_states(net: Network, config: TrainConfig) -> dict[str, ParamState]:
    """Weights get L1(lam) under the Bregman optimizers; biases are never regularized.

    Each network tensor is replaced by its state's theta so the optimizer updates
    the network in place.
    """
    bregman = config.optimizer.algorithm in BREGMAN
    states = {}
    for name, p in net.params.items():
        is_weight = not name.endswith(".b")
        prox = ProxSpec.l1(config.lam) if is_weight else ProxSpec()
        states[name] = init_param_state(p, prox, regularized=bregman and is_weight)
        net.params[name] = states[name].theta
    return states


def network_sparsity(net: Network) -> SparsityReport:
    return sparsity_report(net.params.items())


def train_epoch(net: Network, ds: data_mod.SpikeDataset, config: TrainConfig, ctx: TrainingContext) -> EpochLog:
    ctx.epoch += 1
    order = ctx.rng.permutation(len(ds))
    total_loss = 0.0
    correct = 0
    lr = lr_at(ctx.schedule, ctx.step)
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        x = ds.samples[idx].astype(np.float64)
        y = ds.labels[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            logits, state = forward(net, x)
            loss, dlogits = cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"diverged at epoch {ctx.epoch} (step {ctx.step}): non-finite loss",
                ctx.epoch, ctx.step,
            )
        with np.errstate(over="ignore", invalid="ignore"):
            grads = backward(net, state, dlogits)
        lr = lr_at(ctx.schedule, ctx.step)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                ctx.optimizer.step(grads, lr)
        except DivergenceError as err:
            raise DivergenceError(f"diverged at epoch {ctx.epoch} (step {ctx.step}): {err}", ctx.epoch, ctx.step) from err
        ctx.step += 1
        total_loss += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    mean_loss = total_loss / len(ds)
    if not np.isfinite(mean_loss):
        raise DivergenceError(f"diverged at epoch {ctx.epoch} (step {ctx.step}): non-finite epoch loss", ctx.epoch, ctx.step)
    rep = network_sparsity(net)
    return EpochLog(ctx.epoch, "train", mean_loss, correct / len(ds), rep.nonzero, rep.nonzero_fraction, lr)


def evaluate(net: Network, ds: data_mod.SpikeDataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and argmax accuracy (ties go to the lowest class index)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total, correct = 0.0, 0
    for start in range(0, len(ds), batch_size):
        x = ds.samples[start : start + batch_size].astype(np.float64)
        y = ds.labels[start : start + batch_size]
        with np.errstate(over="ignore", invalid="ignore"):
            logits, _ = forward(net, x)
            loss, _ = cross_entropy(logits, y)
        total += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total / len(ds), correct / len(ds)


def load_splits(cfg: DataConfig):
    if cfg.path:
        ds = data_mod.load(cfg.path)
    elif cfg.task == "pattern":
        ds = data_mod.gen_pattern_task(
            Rng(cfg.seed), cfg.num_classes, cfg.T, cfg.channels, cfg.base_rate, cfg.jitter, cfg.n_per_class
        )
    elif cfg.task == "seqpixels":
        rng = Rng(cfg.seed)
        images, labels = data_mod.make_glyphs(rng, cfg.num_classes, cfg.n_per_class, cfg.glyph_size)
        ds = data_mod.gen_sequential_pixels(images, labels, cfg.num_classes, cfg.perm_seed)
    else:
        raise ValueError(f"unknown task {cfg.task!r}")
    if cfg.bin != 1:
        ds = data_mod.bin_channels(ds, cfg.bin)
    return data_mod.split(ds, cfg.split, Rng(cfg.split_seed))


@dataclass
class RunResult:
    logs: list[EpochLog]
    best_val_acc: float
    best_epoch: int
    built_report: SparsityReport  # network as drawn, before the first prox
    init_report: SparsityReport  # after the initial prox (step 0)
    final_report: SparsityReport
    checkpoint: bytes  # SNNC bytes of the best-validation parameters
    final_checkpoint: bytes
    test_loss: float | None = None
    test_acc: float | None = None
    best_val_test_acc: float | None = None

    def val_logs(self) -> list[EpochLog]:
        return [l for l in self.logs if l.split == "val"]

    def train_logs(self) -> list[EpochLog]:
        return [l for l in self.logs if l.split == "train"]


class MetricsWriter:
    """Appends EpochLog rows to a CSV, flushing after every row."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._w = csv.writer(self._fh, lineterminator="\n")
            self._w.writerow(METRICS_HEADER)
            self._fh.flush()

    def write(self, entry: EpochLog) -> None:
        if self._fh:
            self._w.writerow(entry.row())
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def run_training(
    config: TrainConfig,
    metrics_path=None,
    checkpoint_path=None,
    best_checkpoint_path=None,
    splits=None,
) -> RunResult:
    """Train for ``config.epochs``; evaluates validation every epoch and test at the end.

    ``checkpoint_path`` receives the final optimizer states, ``best_checkpoint_path``
    the states from the epoch with the best validation accuracy.

    On divergence the DivergenceError is re-raised with the logs so far attached
    as ``err.logs``; rows already written to ``metrics_path`` stay on disk.
    """
    train_ds, val_ds, test_ds = splits if splits is not None else load_splits(config.data)
    if train_ds.C != config.network.in_dim:
        raise ValueError(f"dataset has {train_ds.C} channels, network expects {config.network.in_dim}")
    if len(train_ds) == 0:
        raise ValueError("empty training split")
    if config.lam > 0 and config.optimizer.algorithm not in BREGMAN:
        log.warning("lambda=%g is ignored by %s", config.lam, config.optimizer.algorithm.value)
    root = Rng(config.seed)
    net = build_network(config.network, root.spawn(0))
    built_report = network_sparsity(net)
    states = make_states(net, config)
    steps_per_epoch = -(-len(train_ds) // config.batch_size)
    ctx = TrainingContext(Optimizer(config.optimizer, states), config.schedule(steps_per_epoch), root.spawn(1))
    init_report = network_sparsity(net)
    logs: list[EpochLog] = []
    best_acc, best_epoch, best_ckpt = -1.0, 0, checkpoint_bytes(states)
    best_params = {n: p.copy() for n, p in net.params.items()}
    writer = MetricsWriter(metrics_path)
    try:
        for _ in range(config.epochs):
            try:
                entry = train_epoch(net, train_ds, config, ctx)
            except DivergenceError as err:
                err.logs = logs
                raise
            logs.append(entry)
            writer.write(entry)
            if len(val_ds):
                vloss, vacc = evaluate(net, val_ds)
                if not np.isfinite(vloss):
                    err = DivergenceError(f"diverged at epoch {ctx.epoch}: non-finite validation loss", ctx.epoch, ctx.step)
                    err.logs = logs
                    raise err
                ventry = replace(entry, split="val", loss=vloss, accuracy=vacc)
                logs.append(ventry)
                writer.write(ventry)
                if vacc > best_acc:
                    best_acc, best_epoch = vacc, ctx.epoch
                    best_ckpt = checkpoint_bytes(states)
                    best_params = {n: p.copy() for n, p in net.params.items()}
        final_report = network_sparsity(net)
        result = RunResult(logs, max(best_acc, 0.0), best_epoch, built_report, init_report, final_report,
                           best_ckpt, checkpoint_bytes(states))
        if len(test_ds):
            result.test_loss, result.test_acc = evaluate(net, test_ds)
            if config.epochs:
                last_lr = logs[-1].lr
                tentry = EpochLog(ctx.epoch, "test", result.test_loss, result.test_acc,
                                  final_report.nonzero, final_report.nonzero_fraction, last_lr)
                writer.write(tentry)
            best_net = Network(net.spec, best_params)
            result.best_val_test_acc = evaluate(best_net, test_ds)[1]
    finally:
        writer.close()
    if checkpoint_path:
        Path(checkpoint_path).write_bytes(result.final_checkpoint)
    if best_checkpoint_path:
        Path(best_checkpoint_path).write_bytes(result.checkpoint)
    return result


# ---------------------------------------------------------------------------
# lambda sweeps


@dataclass
class SweepRun:
    lam: float
    seed: int
    peak_val_acc: float
    final_nonzero_frac: float
    test_acc: float
    diverged: bool
    nonzero_trajectory: list[int] = field(default_factory=list)
    built_nonzero: int = 0
    init_nonzero: int = 0

    def row(self) -> list:
        return [repr(self.lam), self.seed, repr(self.peak_val_acc), repr(self.final_nonzero_frac), int(self.diverged)]


@dataclass
class SweepAggregate:
    lam: float
    mean_peak_val_acc: float
    mean_final_nonzero_frac: float
    mean_test_acc: float
    completed: int
    diverged: int

    def row(self) -> list:
        return [repr(self.lam), repr(self.mean_peak_val_acc), repr(self.mean_final_nonzero_frac),
                repr(self.mean_test_acc), self.completed, self.diverged]


def _sweep_worker(args) -> SweepRun:
    config, lam, seed, metrics_path = args
    cfg = replace(config, lam=lam, seed=seed)
    try:
        res = run_training(cfg, metrics_path=metrics_path)
    except DivergenceError:
        nan = float("nan")
        return SweepRun(lam, seed, nan, nan, nan, True)
    traj = [l.nonzero_count for l in res.train_logs()]
    return SweepRun(lam, seed, res.best_val_acc, res.final_report.nonzero_fraction,
                    res.test_acc if res.test_acc is not None else float("nan"), False, traj,
                    res.built_report.nonzero, res.init_report.nonzero)


def default_workers() -> int:
    env = os.environ.get("BREG_SNN_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def lambda_sweep(
    config: TrainConfig,
    lambdas: Sequence[float],
    repeats: int = 3,
    out_dir=None,
    workers: int | None = None,
) -> tuple[list[SweepRun], list[SweepAggregate]]:
    """Train every (lambda, seed) pair; seeds are ``config.seed + r`` for r < repeats.

    Diverged runs are kept in the per-run list and left out of the means.
    """
    if not lambdas:
        raise ValueError("need at least one lambda")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = Path(out_dir) if out_dir else None
    jobs = []
    for lam in lambdas:
        for r in range(repeats):
            seed = config.seed + r
            mpath = out / "runs" / f"lambda_{lam:g}_seed_{seed}.csv" if out else None
            jobs.append((config, float(lam), seed, mpath))
    workers = min(workers or default_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_sweep_worker, jobs))
    else:
        runs = [_sweep_worker(j) for j in jobs]
    aggs = []
    for i, lam in enumerate(lambdas):
        group = runs[i * repeats : (i + 1) * repeats]
        ok = [r for r in group if not r.diverged]
        mean = (lambda xs: float(np.mean(xs)) if xs else float("nan"))
        aggs.append(SweepAggregate(
            float(lam),
            mean([r.peak_val_acc for r in ok]),
            mean([r.final_nonzero_frac for r in ok]),
            mean([r.test_acc for r in ok]),
            len(ok),
            len(group) - len(ok),
        ))
    if out:
        write_sweep_csvs(out, runs, aggs)
    return runs, aggs


def write_sweep_csvs(out_dir, runs: Sequence[SweepRun], aggs: Sequence[SweepAggregate]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        w.writerows(r.row() for r in runs)
    with open(out / "sweep_aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        w.writerows(a.row() for a in aggs)
