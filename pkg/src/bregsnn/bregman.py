"""l1 proximal machinery: soft-thresholding, sub-gradients, Bregman distance, sparsity counts."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np


class ProxKind(str, Enum):
    NONE = "none"
    L1 = "l1"


@dataclass(frozen=True)
class ProxSpec:
    kind: ProxKind = ProxKind.NONE
    lam: float = 0.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        object.__setattr__(self, "kind", ProxKind(self.kind))

    @classmethod
    def l1(cls, lam: float) -> "ProxSpec":
        return cls(ProxKind.L1, float(lam))

    @property
    def threshold(self) -> float:
        return self.lam if self.kind is ProxKind.L1 else 0.0

    def value(self, x: np.ndarray) -> float:
        """J(x) = lam * ||x||_1 (zero for kind NONE)."""
        return self.threshold * float(np.sum(np.abs(x)))


def soft_threshold(v, lam) -> np.ndarray:
    """sign(v) * max(0, |v| - lam), with literal +0.0 wherever |v| <= lam.

    ``lam`` is a scalar or an array broadcastable against ``v``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(lam >= 0):
        raise ValueError(f"lambda must be non-negative, got {lam}")
    v = np.asarray(v, dtype=np.float64)
    if lam.ndim == 0 and lam == 0:
        return v + 0.0  # copy; -0.0 becomes +0.0
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0) + 0.0


def subgradient_l1(y, lam: float) -> np.ndarray:
    """lam * sign(y); picks 0 from [-lam, lam] at y == 0."""
    if not lam >= 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return lam * np.sign(np.asarray(y, dtype=np.float64))


def bregman_distance(prox: ProxSpec, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    lam = prox.threshold
    p = subgradient_l1(y, lam)
    d = prox.value(x) - prox.value(y) - float(np.sum(p * (x - y)))
    # exact arithmetic gives d >= 0; clip summation round-off
    return max(d, 0.0)


@dataclass
class GroupCount:
    name: str
    total: int
    nonzero: int


@dataclass
class SparsityReport:
    groups: list[GroupCount] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(g.total for g in self.groups)

    @property
    def nonzero(self) -> int:
        return sum(g.nonzero for g in self.groups)

    @property
    def nonzero_fraction(self) -> float:
        return self.nonzero / self.total if self.total else 0.0

    def rows(self) -> list[tuple[str, int, int]]:
        out = [(g.name, g.total, g.nonzero) for g in self.groups]
        out.append(("TOTAL", self.total, self.nonzero))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "total", "nonzero"])
        w.writerows(self.rows())
        return buf.getvalue()

    def format_table(self) -> str:
        width = max([len("group")] + [len(r[0]) for r in self.rows()])
        lines = [f"{'group':<{width}}  {'total':>8}  {'nonzero':>8}  {'fraction':>8}"]
        for name, total, nz in self.rows():
            frac = nz / total if total else 0.0
            lines.append(f"{name:<{width}}  {total:>8d}  {nz:>8d}  {frac:>8.4f}")
        return "\n".join(lines)


def sparsity_report(groups: Iterable[tuple[str, np.ndarray]]) -> SparsityReport:
    return SparsityReport(
        [GroupCount(name, int(np.size(t)), int(np.count_nonzero(t))) for name, t in groups]
    )
