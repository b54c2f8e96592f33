"""Run configuration files (TOML) and flag overrides.

Example::

    [train]
    epochs = 100
    batch_size = 32
    lambda = 0.12
    scheduler = true          # OneCycle; false = constant lr
    seed = 0
    out_dir = "runs/adabreg"

    [optimizer]
    algorithm = "adabreg"     # sgd | adam | linbreg | adabreg
    lr = 0.005

    [data]
    task = "pattern"          # or: path = "train.spk1"
    channels = 40

    [network]
    preset = "desk"           # desk | shd | ssc | psmnist, or a [[network.layers]] list

Unknown sections or keys raise ConfigError.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any

import toml

from .optim import OptimConfig
from .snn import PRESETS, LayerSpec, LIFParams, NetworkSpec
from .train import DataConfig, TrainConfig


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = {
    "epochs", "batch_size", "lambda", "scheduler", "pct_start", "div_factor",
    "final_div_factor", "seed", "out_dir",
}
_OPT_KEYS = {"algorithm", "lr", "beta1", "beta2", "epsilon"}
_DATA_KEYS = {f.name for f in dataclasses.fields(DataConfig)}
_LAYER_KEYS = {"kind", "in_dim", "out_dim", "beta", "u_th", "k"}


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    out_dir: str = "runs/default"


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _network_from(table: dict) -> NetworkSpec:
    _check_keys("network", table, {"preset", "layers", "beta", "u_th", "k"})
    lif_over = {k: table[k] for k in ("beta", "u_th", "k") if k in table}
    if "layers" in table:
        if "preset" in table:
            raise ConfigError("[network] takes either preset or layers, not both")
        layers = []
        for i, l in enumerate(table["layers"]):
            _check_keys(f"network.layers[{i}]", l, _LAYER_KEYS)
            lif = LIFParams(**{**lif_over, **{k: l[k] for k in ("beta", "u_th", "k") if k in l}})
            layers.append(LayerSpec(l["kind"], int(l["in_dim"]), int(l["out_dim"]), lif))
        return NetworkSpec(layers)
    preset = table.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown network preset {preset!r}")
    spec = PRESETS[preset]()
    if lif_over:
        for l in spec.layers:
            if l.lif is not None:
                l.lif = LIFParams(**{**dataclasses.asdict(l.lif), **lif_over})
    return spec


def from_dict(raw: dict[str, Any]) -> RunConfig:
    _check_keys("top level", raw, {"train", "optimizer", "data", "network"})
    tr = dict(raw.get("train", {}))
    op = dict(raw.get("optimizer", {}))
    da = dict(raw.get("data", {}))
    _check_keys("train", tr, _TRAIN_KEYS)
    _check_keys("optimizer", op, _OPT_KEYS)
    _check_keys("data", da, _DATA_KEYS)
    try:
        defaults = TrainConfig()
        opt = dataclasses.replace(defaults.optimizer, **{("mu" if k == "lr" else k): v for k, v in op.items()})
        data = DataConfig(**da)
        out_dir = tr.pop("out_dir", RunConfig.out_dir)
        if "lambda" in tr:
            tr["lam"] = tr.pop("lambda")
        network = _network_from(raw["network"]) if "network" in raw else defaults.network
        train = TrainConfig(optimizer=opt, data=data, network=network, **tr)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return RunConfig(train, out_dir)


def load_config(path) -> RunConfig:
    try:
        raw = toml.loads(Path(path).read_text())
    except toml.TomlDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return from_dict(raw)


def to_dict(rc: RunConfig) -> dict[str, Any]:
    t = rc.train
    o = t.optimizer
    data = {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in dataclasses.asdict(t.data).items() if v is not None}
    if t.data.perm_seed is None:
        data["perm_seed"] = -1
    layers = []
    for l in t.network.layers:
        d = {"kind": l.kind.value, "in_dim": l.in_dim, "out_dim": l.out_dim}
        if l.lif is not None:
            d.update(beta=l.lif.beta, u_th=l.lif.u_th, k=l.lif.k)
        layers.append(d)
    return {
        "train": {
            "epochs": t.epochs, "batch_size": t.batch_size, "lambda": t.lam,
            "scheduler": t.scheduler, "pct_start": t.pct_start, "div_factor": t.div_factor,
            "final_div_factor": t.final_div_factor, "seed": t.seed, "out_dir": rc.out_dir,
        },
        "optimizer": {"algorithm": o.algorithm.value, "lr": o.mu, "beta1": o.beta1,
                      "beta2": o.beta2, "epsilon": o.epsilon},
        "data": data,
        "network": {"layers": layers},
    }


def dumps(rc: RunConfig) -> str:
    return toml.dumps(to_dict(rc))


def apply_overrides(rc: RunConfig, **over) -> RunConfig:
    """Flag values (anything not None) replace file values."""
    t = rc.train
    opt_changes = {}
    if over.get("optimizer") is not None:
        opt_changes["algorithm"] = over["optimizer"]
    if over.get("lr") is not None:
        opt_changes["mu"] = over["lr"]
    train_changes = {}
    for flag, field in (("lam", "lam"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                        ("seed", "seed"), ("scheduler", "scheduler")):
        if over.get(flag) is not None:
            train_changes[field] = over[flag]
    data = t.data
    if over.get("data") is not None:
        data = dataclasses.replace(data, path=str(over["data"]))
    try:
        opt = dataclasses.replace(t.optimizer, **opt_changes)
        train = dataclasses.replace(t, optimizer=opt, data=data, **train_changes)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    out_dir = over.get("out_dir") or rc.out_dir
    return RunConfig(train, str(out_dir))
