"""SGD, Adam, LinBreg and AdaBreg on per-tensor parameter states, plus lr schedules.

Every state keeps the shadow variable ``v`` next to the parameters ``theta``.
The unregularized optimizers simply keep ``theta == v``; the Bregman ones keep
``theta == soft_threshold(v, lam)``. Updates descend the loss.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .bregman import ProxKind, ProxSpec, soft_threshold


class DivergenceError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class Algorithm(str, Enum):
    SGD = "sgd"
    ADAM = "adam"
    LINBREG = "linbreg"
    ADABREG = "adabreg"


@dataclass
class OptimConfig:
    algorithm: Algorithm = Algorithm.ADABREG
    mu: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        if not self.mu > 0:
            raise ValueError(f"learning rate must be positive, got {self.mu}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ParamState:
    theta: np.ndarray
    v: np.ndarray
    m: np.ndarray
    s: np.ndarray
    t: int = 0
    prox: ProxSpec = field(default_factory=ProxSpec)
    regularized: bool = False

    @property
    def lam(self) -> float:
        return self.prox.threshold if self.regularized else 0.0

    def project(self) -> None:
        """Refresh theta from v in place (theta keeps its identity)."""
        theta = soft_threshold(self.v, self.lam) if self.regularized else self.v
        np.copyto(self.theta, theta)


def init_param_state(theta_init, prox: ProxSpec, regularized: bool) -> ParamState:
    """Fresh state: v = theta_init, zero moments, theta = prox(v) from step 0."""
    v = np.array(theta_init, dtype=np.float64)
    state = ParamState(
        theta=np.empty_like(v),
        v=v,
        m=np.zeros_like(v),
        s=np.zeros_like(v),
        t=0,
        prox=prox,
        regularized=bool(regularized),
    )
    state.project()
    return state


def _check_grad(state: ParamState, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.v.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.v.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    return grad


def _commit(state: ParamState, new_v: np.ndarray) -> None:
    if not np.all(np.isfinite(new_v)):
        raise DivergenceError("non-finite parameter update")
    np.copyto(state.v, new_v)
    state.t += 1
    state.project()


def _moments(state: ParamState, grad: np.ndarray, beta1: float, beta2: float):
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    s = beta2 * state.s + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    s_hat = s / (1.0 - beta2**t)
    return m, s, m_hat, s_hat


def sgd_step(state: ParamState, grad, lr: float) -> None:
    grad = _check_grad(state, grad)
    with np.errstate(over="ignore", invalid="ignore"):
        new_v = state.v - lr * grad
    _commit(state, new_v)


def linbreg_step(state: ParamState, grad, lr: float) -> None:
    # same shadow update as SGD; the prox in project() is what differs
    sgd_step(state, grad, lr)


def adam_step(
    state: ParamState, grad, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> None:
    grad = _check_grad(state, grad)
    with np.errstate(over="ignore", invalid="ignore"):
        m, s, m_hat, s_hat = _moments(state, grad, beta1, beta2)
        new_v = state.v - lr * m_hat / (np.sqrt(s_hat) + eps)
    if not np.all(np.isfinite(new_v)):
        raise DivergenceError("non-finite parameter update")
    state.m, state.s = m, s
    _commit(state, new_v)


def adabreg_step(
    state: ParamState, grad, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> None:
    adam_step(state, grad, lr, beta1, beta2, eps)


class Optimizer:
    """Applies one configured algorithm to a named collection of ParamStates."""

    def __init__(self, config: OptimConfig, states: Mapping[str, ParamState]):
        self.config = config
        self.states = dict(states)

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.config.mu if lr is None else lr
        cfg = self.config
        for name, state in self.states.items():
            g = grads[name]
            if cfg.algorithm is Algorithm.SGD:
                sgd_step(state, g, lr)
            elif cfg.algorithm is Algorithm.LINBREG:
                linbreg_step(state, g, lr)
            elif cfg.algorithm is Algorithm.ADAM:
                adam_step(state, g, lr, cfg.beta1, cfg.beta2, cfg.epsilon)
            else:
                adabreg_step(state, g, lr, cfg.beta1, cfg.beta2, cfg.epsilon)


# ---------------------------------------------------------------------------
# learning-rate schedules


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    ONECYCLE = "onecycle"


@dataclass
class LrSchedule:
    kind: ScheduleKind = ScheduleKind.ONECYCLE
    max_lr: float = 1e-3
    total_steps: int = 1
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        self.kind = ScheduleKind(self.kind)
        if not 0 < self.pct_start < 1:
            raise ValueError("pct_start must lie in (0, 1)")
        if not (self.div_factor > 1 and self.final_div_factor > 1):
            raise ValueError("div factors must exceed 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")

    @property
    def peak_step(self) -> int:
        return int(round(self.pct_start * self.total_steps))


def _cos_interp(start: float, end: float, frac: float) -> float:
    w = 0.5 * (1.0 + math.cos(math.pi * frac))  # 1 -> 0; exact at both ends
    return start * w + end * (1.0 - w)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a global optimizer step.

    OneCycle warms from max_lr/div_factor to max_lr over the first
    round(pct_start * total_steps) steps, then anneals to max_lr/final_div_factor
    at total_steps. Both legs are half cosines. Out-of-range steps clamp.
    """
    if schedule.kind is ScheduleKind.CONSTANT:
        return schedule.max_lr
    total = schedule.total_steps
    step = min(max(int(step), 0), total)
    start = schedule.max_lr / schedule.div_factor
    final = schedule.max_lr / schedule.final_div_factor
    peak = schedule.peak_step
    if step == total:
        return final
    if step <= peak:
        return _cos_interp(start, schedule.max_lr, step / peak) if peak else schedule.max_lr
    return _cos_interp(schedule.max_lr, final, (step - peak) / (total - peak))


# ---------------------------------------------------------------------------
# SNNC checkpoints
#
# little-endian: b"SNNC", u32 version, u32 n_groups, then per group
#   u32 name_len, name (utf-8), u32 ndim, u32 dims[ndim],
#   f64 theta[n], f64 v[n], f64 m[n], f64 s[n], u64 t, f64 lambda, u8 regularized

CHECKPOINT_MAGIC = b"SNNC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def checkpoint_bytes(states: Mapping[str, ParamState]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(states))]
    for name, st in states.items():
        raw = name.encode("utf-8")
        shape = st.v.shape
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        for arr in (st.theta, st.v, st.m, st.s):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        parts.append(struct.pack("<QdB", st.t, st.prox.lam, 1 if st.regularized else 0))
    return b"".join(parts)


def save_checkpoint(path, states: Mapping[str, ParamState]) -> None:
    Path(path).write_bytes(checkpoint_bytes(states))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> dict[str, ParamState]:
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointMagicError("not an SNNC checkpoint (bad magic)")
    version, n_groups = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    states: dict[str, ParamState] = {}
    for _ in range(n_groups):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arrs = [np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape) for _ in range(4)]
        t, lam, reg = r.unpack("<QdB")
        prox = ProxSpec(ProxKind.L1 if reg else ProxKind.NONE, lam)
        states[name] = ParamState(*arrs, t=t, prox=prox, regularized=bool(reg))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last group")
    return states


def load_checkpoint(path) -> dict[str, ParamState]:
    return parse_checkpoint(Path(path).read_bytes())
