import dataclasses
import math

import numpy as np
import pytest

from bregsnn.bregman import sparsity_report
from bregsnn.data import SpikeDataset
from bregsnn.numerics import Rng, checksum
from bregsnn.optim import Algorithm, DivergenceError, OptimConfig, parse_checkpoint
from bregsnn.snn import LayerSpec, NetworkSpec, build_network
from bregsnn.train import (
    TrainConfig,
    cross_entropy,
    evaluate,
    lambda_sweep,
    load_splits,
    make_states,
    run_training,
    train_epoch,
    TrainingContext,
)
from bregsnn.optim import Optimizer

from conftest import tiny_config


def test_cross_entropy_examples():
    loss, d = cross_entropy(np.zeros(7), 3)
    assert loss == pytest.approx(math.log(7), rel=1e-15)
    loss, d = cross_entropy(np.array([100.0, -100.0]), 0)
    assert 0 <= loss < 1e-80 and np.all(np.isfinite(d))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(3), 3)


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(0)
    z = rng.normal(size=6) * 3
    _, d = cross_entropy(z, 2)
    h = 1e-6
    fd = np.array([(cross_entropy(z + h * e, 2)[0] - cross_entropy(z - h * e, 2)[0]) / (2 * h) for e in np.eye(6)])
    assert np.max(np.abs(fd - d) / np.maximum(np.abs(fd), 1e-3)) < 1e-8


def test_cross_entropy_batch_is_mean():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    loss, d = cross_entropy(z, y)
    singles = [cross_entropy(z[i], y[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-14)
    np.testing.assert_allclose(d, np.array([s[1] for s in singles]) / 4, rtol=1e-14)


def _uniform_net(K, C=3):
    net = build_network(NetworkSpec([LayerSpec("readout", C, K)]), Rng(0))
    net.params["0.W"][:] = 0.0
    return net


def test_evaluate_tie_break_and_purity():
    K = 4
    ds = SpikeDataset(np.ones((8, 2, 3)), np.repeat(np.arange(K), 2), K)
    net = _uniform_net(K)
    loss, acc = evaluate(net, ds)
    assert acc == 1 / K and loss == pytest.approx(math.log(K))
    before = checksum(net.params.values())
    assert evaluate(net, ds) == (loss, acc)
    assert checksum(net.params.values()) == before
    with pytest.raises(ValueError):
        evaluate(net, SpikeDataset(np.zeros((0, 2, 3)), [], K))


def test_evaluate_matches_recount():
    cfg = tiny_config()
    _, val, _ = load_splits(cfg.data)
    net = build_network(cfg.network, Rng(3))
    _, acc = evaluate(net, val, batch_size=5)
    from bregsnn.snn import forward

    hits = sum(int(np.argmax(forward(net, s.astype(float))[0]) == y) for s, y in zip(val.samples, val.labels))
    assert acc == hits / len(val)


def _ctx(net, cfg, steps_per_epoch):
    states = make_states(net, cfg)
    return TrainingContext(Optimizer(cfg.optimizer, states), cfg.schedule(steps_per_epoch), Rng(9))


def test_zero_lr_epoch_changes_nothing():
    cfg = tiny_config(scheduler=False)
    cfg.optimizer.mu = 1e-300  # stand-in for lr = 0; OptimConfig requires lr > 0
    train, _, _ = load_splits(cfg.data)
    net = build_network(cfg.network, Rng(0))
    ctx = _ctx(net, cfg, 10)
    ctx.schedule.max_lr = 0.0
    before = checksum(net.params.values())
    a = train_epoch(net, train, cfg, ctx)
    b = train_epoch(net, train, cfg, ctx)
    assert checksum(net.params.values()) == before
    assert a.loss == pytest.approx(b.loss, rel=1e-12)


def test_epoch_reduces_loss_on_separable_toy():
    rng = Rng(4)
    n = 60
    labels = np.arange(n) % 2
    samples = np.zeros((n, 5, 4), dtype=np.int64)
    samples[labels == 0, :, :2] = 2
    samples[labels == 1, :, 2:] = 2
    ds = SpikeDataset(samples, labels, 2)
    spec = NetworkSpec.from_dims([4, 6, 2], ["feedforward", "readout"])
    cfg = TrainConfig(epochs=1, batch_size=10, optimizer=OptimConfig("adam", mu=0.05), network=spec, scheduler=False)
    net = build_network(spec, rng)
    ctx = _ctx(net, cfg, 6)
    before, _ = evaluate(net, ds)
    train_epoch(net, ds, cfg, ctx)
    after, _ = evaluate(net, ds)
    assert after < before


def test_run_training_deterministic(tmp_path):
    cfg = tiny_config()
    a = run_training(cfg, metrics_path=tmp_path / "a.csv")
    b = run_training(cfg, metrics_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.checkpoint == b.checkpoint and a.final_checkpoint == b.final_checkpoint
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "epoch,split,loss,accuracy,nonzero_count,nonzero_fraction,lr"
    assert len(rows) == 1 + 2 * cfg.epochs + 1
    assert rows[-1].split(",")[1] == "test"


def test_zero_epochs():
    cfg = tiny_config(epochs=0, lam=0.05)
    res = run_training(cfg)
    assert res.logs == []
    assert res.final_report == res.init_report


def test_lambda0_adabreg_equals_adam(tmp_path):
    a = run_training(tiny_config(lam=0.0), metrics_path=tmp_path / "a.csv")
    b = run_training(tiny_config(lam=0.0, optimizer=OptimConfig("adam", mu=5e-3)), metrics_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_logged_nonzero_matches_recount():
    cfg = tiny_config(lam=0.05, epochs=4)
    res = run_training(cfg)
    final = [l for l in res.logs if l.epoch == cfg.epochs]
    states = parse_checkpoint(res.final_checkpoint)
    rep = sparsity_report((n, s.theta) for n, s in states.items())
    assert all(l.nonzero_count == rep.nonzero for l in final)
    assert all(0 <= l.accuracy <= 1 and np.isfinite(l.loss) for l in res.logs)


def test_lambda_run_sparsifies():
    cfg = tiny_config(lam=0.1, epochs=6)
    res = run_training(cfg)
    assert res.final_report.nonzero < res.built_report.nonzero
    assert res.init_report.nonzero <= res.built_report.nonzero


def test_divergence_preserves_logs(tmp_path):
    cfg = tiny_config(epochs=5, lam=1e3, optimizer=OptimConfig("adabreg", mu=1e308))
    with pytest.raises(DivergenceError) as info:
        run_training(cfg, metrics_path=tmp_path / "m.csv")
    assert info.value.epoch is not None and info.value.epoch <= 5
    text = (tmp_path / "m.csv").read_text().lower()
    assert "nan" not in text and "inf" not in text


def test_sweep_shapes(tmp_path):
    cfg = tiny_config(epochs=2)
    runs, aggs = lambda_sweep(cfg, [0.0, 0.05, 1.0], repeats=2, out_dir=tmp_path, workers=1)
    assert [(r.lam, r.seed) for r in runs] == [(l, s) for l in (0.0, 0.05, 1.0) for s in (0, 1)]
    assert [a.lam for a in aggs] == [0.0, 0.05, 1.0]
    fracs = [a.mean_final_nonzero_frac for a in aggs]
    assert fracs[0] >= fracs[1] >= fracs[2]
    assert (tmp_path / "sweep.csv").read_text().splitlines()[0] == "lambda,seed,peak_val_acc,final_nonzero_frac,diverged"
    assert len((tmp_path / "sweep_aggregate.csv").read_text().splitlines()) == 4
    assert len(list((tmp_path / "runs").glob("*.csv"))) == 6


def test_sweep_single_is_plain_run():
    cfg = tiny_config(epochs=2, lam=0.05)
    runs, aggs = lambda_sweep(cfg, [0.05], repeats=1, workers=1)
    res = run_training(cfg)
    assert runs[0].peak_val_acc == res.best_val_acc
    assert runs[0].final_nonzero_frac == res.final_report.nonzero_fraction
    assert aggs[0].completed == 1


def test_sweep_parallel_matches_serial():
    cfg = tiny_config(epochs=1)
    serial = lambda_sweep(cfg, [0.0, 0.1], repeats=1, workers=1)
    parallel = lambda_sweep(cfg, [0.0, 0.1], repeats=1, workers=2)
    assert serial == parallel


def test_sweep_records_divergence():
    cfg = tiny_config(epochs=2, optimizer=OptimConfig("adabreg", mu=1e308))
    runs, aggs = lambda_sweep(cfg, [1e3], repeats=1, workers=1)
    assert runs[0].diverged and aggs[0].diverged == 1 and aggs[0].completed == 0
