"""Spike-count datasets, the SPK1 file format, channel binning, and synthetic tasks.

SPK1 layout (little-endian)::

    b"SPK1" | u32 version=1 | u32 N | u32 T | u32 C | u32 num_classes
    N x ( u16 label | T*C x u16 counts, time-major )
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng

SPK_MAGIC = b"SPK1"
SPK_VERSION = 1
_HEADER = struct.Struct("<4s5I")


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass
class SpikeDataset:
    samples: np.ndarray  # int64 [N, T, C], non-negative counts
    labels: np.ndarray  # int64 [N]
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.samples.ndim != 3:
            raise ValueError(f"samples must be [N, T, C], got shape {self.samples.shape}")
        if len(self.labels) != len(self.samples):
            raise ValueError("one label per sample required")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.samples.size and self.samples.min() < 0:
            raise ValueError("spike counts must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.samples.shape[1]

    @property
    def C(self) -> int:
        return self.samples.shape[2]

    def subset(self, idx, name: str | None = None) -> "SpikeDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SpikeDataset(self.samples[idx], self.labels[idx], self.num_classes, name or self.name)

    def summary(self) -> str:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return (
            f"{self.name}: N={len(self)} T={self.T} C={self.C} classes={self.num_classes} "
            f"per-class=[{min(counts, default=0)}..{max(counts, default=0)}] "
            f"mean-count={self.samples.mean() if self.samples.size else 0.0:.4f}"
        )


def bin_channels(ds: SpikeDataset, factor: int) -> SpikeDataset:
    """Sum each run of ``factor`` consecutive channels (700 -> 140 for factor 5)."""
    if factor <= 0 or ds.C % factor:
        raise ValueError(f"channel count {ds.C} is not divisible by {factor}")
    n, t, c = ds.samples.shape
    binned = ds.samples.reshape(n, t, c // factor, factor).sum(axis=3)
    return SpikeDataset(binned, ds.labels.copy(), ds.num_classes, ds.name)


# ---------------------------------------------------------------------------
# synthetic tasks


def _shift_time(x: np.ndarray, shift: int) -> np.ndarray:
    if shift == 0:
        return x
    out = np.zeros_like(x)
    if shift > 0:
        out[shift:] = x[:-shift]
    else:
        out[:shift] = x[-shift:]
    return out


def pattern_templates(rng: Rng, num_classes: int, T: int, C: int, smooth: int | None = None) -> np.ndarray:
    """One rate template in [0, 1] per class, smooth along time, shape [K, T, C]."""
    smooth = smooth or max(1, T // 10)
    raw = rng.uniform((num_classes, T + smooth - 1, C))
    kernel = np.ones(smooth) / smooth
    sm = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, raw)
    # stretch to [0, 1] and sharpen so each class has a few strong channel/time regions
    lo = sm.min(axis=(1, 2), keepdims=True)
    hi = sm.max(axis=(1, 2), keepdims=True)
    return ((sm - lo) / np.where(hi > lo, hi - lo, 1.0)) ** 3


def gen_pattern_task(
    rng: Rng,
    num_classes: int = 10,
    T: int = 50,
    C: int = 40,
    base_rate: float = 1.0,
    jitter: int = 2,
    n_per_class: int = 80,
    name: str = "pattern",
) -> SpikeDataset:
    """Event-audio stand-in: Poisson counts around a per-class rate template.

    Each sample is drawn from ``base_rate * template[label]`` after shifting the
    template by a random whole number of time bins in ``[-jitter, jitter]``.
    """
    if num_classes <= 0 or T <= 0 or C <= 0:
        raise ValueError("num_classes, T and C must be positive")
    if base_rate < 0 or jitter < 0:
        raise ValueError("base_rate and jitter must be non-negative")
    templates = pattern_templates(rng, num_classes, T, C)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    shifts = rng.integers(-jitter, jitter + 1, size=len(labels))
    rates = np.stack([_shift_time(templates[k], int(s)) for k, s in zip(labels, shifts)]) if len(labels) else np.zeros((0, T, C))
    samples = rng.poisson(base_rate * rates)
    ds = SpikeDataset(samples, labels, num_classes, name)
    ds.templates = base_rate * templates  # kept for the nearest-template oracle
    return ds


def make_glyphs(rng: Rng, num_classes: int = 10, n_per_class: int = 60, size: int = 8, flip: float = 0.05):
    """Binary H x W glyphs: a random stroke prototype per class plus pixel-flip noise.

    Returns (images [N, H, W] in {0, 1}, labels [N]).
    """
    protos = np.zeros((num_classes, size, size), dtype=np.int64)
    for k in range(num_classes):
        for _ in range(3):
            # a stroke is a random straight segment
            r0, c0, r1, c1 = rng.integers(0, size, size=4)
            n = max(abs(r1 - r0), abs(c1 - c0)) + 1
            rr = np.round(np.linspace(r0, r1, n)).astype(int)
            cc = np.round(np.linspace(c0, c1, n)).astype(int)
            protos[k, rr, cc] = 1
    labels = np.repeat(np.arange(num_classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    noise = rng.uniform((len(labels), size, size)) < flip
    images = np.bitwise_xor(protos[labels], noise.astype(np.int64))
    return images, labels


def sequence_permutation(length: int, perm_seed: int | None) -> np.ndarray:
    """Fixed time-axis permutation; ``None`` gives the identity (raster scan)."""
    if perm_seed is None:
        return np.arange(length)
    return Rng(perm_seed).permutation(length)


def gen_sequential_pixels(
    images, labels, num_classes: int, perm_seed: int | None = None, name: str = "seqpixels"
) -> SpikeDataset:
    """Flatten each image to a [H*W, 1] sequence and apply one shared permutation."""
    images = np.asarray(images, dtype=np.int64)
    n = len(images)
    flat = images.reshape(n, -1)
    perm = sequence_permutation(flat.shape[1], perm_seed)
    ds = SpikeDataset(flat[:, perm][:, :, None], labels, num_classes, name)
    ds.permutation = perm
    return ds


# ---------------------------------------------------------------------------
# splitting


def split(ds: SpikeDataset, fractions: Sequence[float], rng: Rng):
    """Stratified, disjoint (train, val, test) split.

    Per class, counts come from largest-remainder rounding of ``fraction * n_k``
    so every split is within one sample of its ideal share.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    parts: list[list[int]] = [[], [], []]
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        idx = idx[rng.permutation(len(idx))]
        ideal = fr * len(idx)
        counts = np.floor(ideal).astype(int)
        order = np.argsort(-(ideal - counts), kind="stable")
        for j in order[: len(idx) - counts.sum()]:
            counts[j] += 1
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(3):
            parts[j].extend(idx[bounds[j] : bounds[j + 1]].tolist())
    names = ("train", "val", "test")
    return tuple(ds.subset(sorted(p), f"{ds.name}-{nm}") for p, nm in zip(parts, names))


# ---------------------------------------------------------------------------
# SPK1 I/O


def dataset_bytes(ds: SpikeDataset) -> bytes:
    if ds.samples.size and ds.samples.max() > 0xFFFF:
        raise ValueError("spike counts exceed the u16 range of SPK1")
    if ds.num_classes > 0xFFFF:
        raise ValueError("too many classes for SPK1")
    n, t, c = ds.samples.shape
    header = _HEADER.pack(SPK_MAGIC, SPK_VERSION, n, t, c, ds.num_classes)
    rec = np.zeros((n, 1 + t * c), dtype="<u2")
    rec[:, 0] = ds.labels
    rec[:, 1:] = ds.samples.reshape(n, t * c)
    return header + rec.tobytes()


def parse_dataset(buf: bytes, name: str = "dataset") -> SpikeDataset:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the SPK1 magic")
    if buf[:4] != SPK_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {SPK_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated SPK1 header")
    _, version, n, t, c, k = _HEADER.unpack_from(buf)
    if version != SPK_VERSION:
        raise VersionMismatchError(f"SPK1 version {version} not supported (expected {SPK_VERSION})")
    need = _HEADER.size + 2 * n * (1 + t * c)
    if len(buf) < need:
        raise TruncatedFileError(f"truncated SPK1 payload: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise DatasetFormatError(f"{len(buf) - need} trailing bytes after SPK1 payload")
    rec = np.frombuffer(buf, dtype="<u2", offset=_HEADER.size).reshape(n, 1 + t * c)
    return SpikeDataset(rec[:, 1:].reshape(n, t, c), rec[:, 0], k, name)


def save(ds: SpikeDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load(path) -> SpikeDataset:
    path = Path(path)
    return parse_dataset(path.read_bytes(), name=path.stem)
