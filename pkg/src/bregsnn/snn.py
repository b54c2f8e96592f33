"""Discrete-time LIF networks with surrogate-gradient BPTT.

Per timestep a LIF layer integrates, thresholds, then subtract-resets::

    u' = beta * u + I            I = W x + b (+ R s_prev for recurrent layers)
    s  = H(u' - u_th)            H(x) = 1 if x > 0 else 0
    u  = u' - u_th * s

The backward pass replaces dH/dx by ``1 / (1 + k|x|)**2`` and keeps the reset
pathway. A LinearReadout layer (only allowed last) produces ``y_t = W x_t + b``
and the logits are its time average; if the last layer is LIF the logits are
its mean spike count.

``soft=True`` swaps H for the sigmoid ``1 / (1 + exp(-k x))`` and drops the
reset (unless ``soft_reset=True``), which makes the whole map smooth so the
backward pass can be checked against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from .numerics import Rng, rand_uniform


class LayerKind(str, Enum):
    FEEDFORWARD = "feedforward"
    RECURRENT = "recurrent"
    READOUT = "readout"


@dataclass
class LIFParams:
    beta: float = 0.9
    u_th: float = 1.0
    reset: str = "subtract"
    k: float = 10.0

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.u_th > 0:
            raise ValueError("u_th must be positive")
        if not self.k > 0:
            raise ValueError("surrogate slope must be positive")
        if self.reset != "subtract":
            raise ValueError(f"unsupported reset {self.reset!r}")


@dataclass
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    lif: LIFParams | None = field(default_factory=LIFParams)

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        if isinstance(self.lif, dict):
            self.lif = LIFParams(**self.lif)
        if self.kind is LayerKind.READOUT:
            self.lif = None
        elif self.lif is None:
            self.lif = LIFParams()
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        for l in self.layers[:-1]:
            if l.kind is LayerKind.READOUT:
                raise ValueError("LinearReadout is only allowed as the final layer")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            d = {"kind": l.kind.value, "in_dim": l.in_dim, "out_dim": l.out_dim}
            if l.lif is not None:
                d["lif"] = asdict(l.lif)
            out.append(d)
        return {"layers": out}

    @classmethod
    def from_dims(cls, dims, kinds, lif: LIFParams | None = None) -> "NetworkSpec":
        lif = lif or LIFParams()
        return cls([LayerSpec(k, a, b, lif) for k, a, b in zip(kinds, dims[:-1], dims[1:])])

    # architectures with the layer pattern of the three benchmark networks

    @classmethod
    def desk(cls) -> "NetworkSpec":
        return cls.from_dims([40, 64, 64, 10], ["feedforward", "recurrent", "readout"])

    @classmethod
    def shd(cls) -> "NetworkSpec":
        return cls.from_dims([140, 256, 256, 20], ["feedforward", "recurrent", "feedforward"])

    @classmethod
    def ssc(cls) -> "NetworkSpec":
        return cls.from_dims([140, 256, 256, 256, 35], ["recurrent"] * 3 + ["readout"])

    @classmethod
    def psmnist(cls) -> "NetworkSpec":
        return cls.from_dims([1, 64, 212, 212, 10], ["recurrent"] * 3 + ["readout"])


PRESETS = {"desk": NetworkSpec.desk, "shd": NetworkSpec.shd, "ssc": NetworkSpec.ssc, "psmnist": NetworkSpec.psmnist}


class Network:
    """A NetworkSpec plus its named parameter tensors (``"<i>.W"``, ``"<i>.R"``, ``"<i>.b"``)."""

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        missing = [n for n in param_shapes(spec) if n not in params]
        if missing:
            raise ValueError(f"missing parameters: {missing}")

    def weight_names(self) -> list[str]:
        return [n for n in self.params if not n.endswith(".b")]


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, l in enumerate(spec.layers):
        shapes[f"{i}.W"] = (l.out_dim, l.in_dim)
        if l.kind is LayerKind.RECURRENT:
            shapes[f"{i}.R"] = (l.out_dim, l.out_dim)
        shapes[f"{i}.b"] = (l.out_dim,)
    return shapes


def build_network(spec: NetworkSpec, rng: Rng) -> Network:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(1.0 / shape[1])
            params[name] = rand_uniform(rng, shape, -bound, bound)
    return Network(spec, params)


def lif_step(u, input_current, p: LIFParams):
    """One integrate / threshold / subtract-reset update. Returns (u_next, spikes)."""
    u = np.asarray(u, dtype=np.float64)
    cur = np.asarray(input_current, dtype=np.float64)
    if u.shape != cur.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {cur.shape}")
    u_pre = p.beta * u + cur
    spikes = (u_pre > p.u_th).astype(np.float64)
    return u_pre - p.u_th * spikes, spikes


def surrogate_grad(x, k: float) -> np.ndarray:
    if not k > 0:
        raise ValueError("surrogate slope must be positive")
    return 1.0 / (1.0 + k * np.abs(x)) ** 2


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class NetworkState:
    """Per-layer caches from one forward pass, all time-major ``[T, B, dim]``."""

    inputs: list[np.ndarray]
    u_pre: list[np.ndarray | None]
    spikes: list[np.ndarray | None]
    soft: bool
    soft_reset: bool
    batched: bool

    @property
    def T(self) -> int:
        return self.inputs[0].shape[0]


def forward(net: Network, sample, soft: bool = False, soft_reset: bool = False):
    """Run a sample ``[T, C]`` or a batch ``[B, T, C]``; returns (logits, state)."""
    x = np.asarray(sample, dtype=np.float64)
    batched = x.ndim == 3
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != net.spec.in_dim:
        raise ValueError(f"expected input [.., T, {net.spec.in_dim}], got {np.shape(sample)}")
    if x.shape[1] == 0:
        raise ValueError("empty time axis")
    h = np.ascontiguousarray(x.transpose(1, 0, 2))
    T, B, _ = h.shape
    P = net.params
    inputs, u_pres, spikes_all = [], [], []
    logits = None
    for i, layer in enumerate(net.spec.layers):
        inputs.append(h)
        W, b = P[f"{i}.W"], P[f"{i}.b"]
        cur = (h.reshape(T * B, -1) @ W.T).reshape(T, B, -1) + b
        if layer.kind is LayerKind.READOUT:
            u_pres.append(None)
            spikes_all.append(None)
            logits = cur.mean(axis=0)
            break
        p = layer.lif
        R = P.get(f"{i}.R")
        u = np.zeros((B, layer.out_dim))
        s = np.zeros((B, layer.out_dim))
        u_pre = np.empty_like(cur)
        out = np.empty_like(cur)
        for t in range(T):
            c = cur[t] if R is None else cur[t] + s @ R.T
            up = p.beta * u + c
            if soft:
                s = _sigmoid(p.k * (up - p.u_th))
                u = up - p.u_th * s if soft_reset else up
            else:
                s = (up > p.u_th).astype(np.float64)
                u = up - p.u_th * s
            u_pre[t] = up
            out[t] = s
        u_pres.append(u_pre)
        spikes_all.append(out)
        h = out
    if logits is None:
        logits = h.mean(axis=0)
    state = NetworkState(inputs, u_pres, spikes_all, soft, soft_reset, batched)
    return (logits if batched else logits[0]), state


def backward(net: Network, state: NetworkState | None, dlogits) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogits * logits)`` for every parameter, summed over batch and time."""
    if state is None or not state.inputs:
        raise ValueError("backward needs the cached state of a matching forward pass")
    g = np.asarray(dlogits, dtype=np.float64)
    if not state.batched:
        g = g[None]
    T = state.T
    P = net.params
    grads: dict[str, np.ndarray] = {}
    # cotangent of the last layer's per-step output
    g_out = np.broadcast_to(g / T, (T,) + g.shape)
    for i in range(len(net.spec.layers) - 1, -1, -1):
        layer = net.spec.layers[i]
        x = state.inputs[i]
        W = P[f"{i}.W"]
        if layer.kind is LayerKind.READOUT:
            dcur = g_out
        else:
            dcur = _lif_backward(layer, P.get(f"{i}.R"), state.u_pre[i], g_out, state)
            if layer.kind is LayerKind.RECURRENT:
                s = state.spikes[i]
                o = layer.out_dim
                grads[f"{i}.R"] = dcur[1:].reshape(-1, o).T @ s[:-1].reshape(-1, o)
        flat = dcur.reshape(-1, layer.out_dim)
        grads[f"{i}.W"] = flat.T @ x.reshape(-1, layer.in_dim)
        grads[f"{i}.b"] = flat.sum(axis=0)
        if i > 0:
            g_out = (flat @ W).reshape(x.shape)
    return {n: grads[n] for n in P}


def _lif_backward(layer: LayerSpec, R, u_pre, ds_ext, state: NetworkState) -> np.ndarray:
    p = layer.lif
    T, B, O = u_pre.shape
    xs = u_pre - p.u_th
    if state.soft:
        sig = _sigmoid(p.k * xs)
        dsdu = p.k * sig * (1.0 - sig)
        reset = state.soft_reset
    else:
        dsdu = surrogate_grad(xs, p.k)
        reset = True
    dcur = np.empty_like(u_pre)
    g_u = np.zeros((B, O))  # dL/du_t (post reset) flowing back from t+1
    g_next = None  # dL/dcur_{t+1}, reaches s_t through R
    for t in range(T - 1, -1, -1):
        ds = ds_ext[t] if (R is None or g_next is None) else ds_ext[t] + g_next @ R
        if reset:
            gu_pre = g_u + (ds - p.u_th * g_u) * dsdu[t]
        else:
            gu_pre = g_u + ds * dsdu[t]
        dcur[t] = gu_pre
        g_u = p.beta * gu_pre
        g_next = gu_pre
    return dcur
