import numpy as np
import pytest

from bregsnn.numerics import Rng
from bregsnn.snn import NetworkSpec, build_network
from bregsnn.train import DataConfig, TrainConfig
from bregsnn.optim import OptimConfig


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def small_net(rng):
    spec = NetworkSpec.from_dims([6, 8, 7, 4], ["feedforward", "recurrent", "readout"])
    return build_network(spec, rng)


def tiny_config(**kw) -> TrainConfig:
    """A few-second training config on a shrunken pattern task."""
    data = DataConfig(num_classes=3, T=12, channels=8, n_per_class=20, base_rate=2.0, jitter=1)
    net = NetworkSpec.from_dims([8, 12, 12, 3], ["feedforward", "recurrent", "readout"])
    base = dict(epochs=3, batch_size=8, optimizer=OptimConfig("adabreg", mu=5e-3), data=data, network=net)
    base.update(kw)
    return TrainConfig(**base)


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {key}: {detail}")
