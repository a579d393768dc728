"""Depth-wise outlier statistics: channel variance, kurtosis and energy concentration.

All moments are population moments accumulated in float64, whatever the
storage precision of the input.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import InsufficientRows, ZeroVariance
from .tensor import ActivationTensor

TOP_FRACTION = 0.01


def _as_f64(t) -> np.ndarray:
    x = t.data if isinstance(t, ActivationTensor) else np.asarray(t)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {x.shape}")
    return x.astype(np.float64, copy=False)


def per_channel_variance(t) -> np.ndarray:
    """Population variance of every column."""
    x = _as_f64(t)
    if x.shape[0] < 2:
        raise InsufficientRows(f"per-channel variance needs >= 2 rows, got {x.shape[0]}")
    return x.var(axis=0)


def kurtosis(t) -> float:
    """Pearson kurtosis ``m4 / m2**2`` over all values jointly (3 for a Gaussian)."""
    x = _as_f64(t).ravel()
    if x.size < 4:
        raise InsufficientRows(f"kurtosis needs >= 4 values, got {x.size}")
    if np.ptp(x) == 0.0:
        raise ZeroVariance("kurtosis of a constant tensor is undefined")
    c = x - x.mean()
    c2 = c * c
    m2 = c2.mean()
    if m2 == 0.0:
        raise ZeroVariance("variance underflows to zero")
    return float(np.mean(c2 * c2) / (m2 * m2))


class EnergyShare(NamedTuple):
    value: float
    degenerate: bool


def top_count(p_fraction: float, width: int) -> int:
    """Number of channels in the top ``p_fraction`` of ``width``, at least 1."""
    # round away representation noise such as 0.01 * 300 = 3.0000000000000004
    return max(1, math.ceil(round(p_fraction * width, 9)))


def top_p_energy(t, p_fraction: float = TOP_FRACTION) -> EnergyShare:
    """Share of total ``sum(x**2)`` held by the highest-energy channels."""
    if not 0.0 < p_fraction < 1.0:
        raise ValueError(f"p_fraction must lie in (0, 1), got {p_fraction!r}")
    x = _as_f64(t)
    energy = np.einsum("ij,ij->j", x, x)
    total = float(energy.sum())
    if total == 0.0:
        return EnergyShare(0.0, True)
    k = top_count(p_fraction, energy.size)
    top = np.partition(energy, energy.size - k)[energy.size - k :]
    return EnergyShare(min(1.0, float(top.sum()) / total), False)


@dataclass(frozen=True)
class LayerStats:
    """Outlier summary of one layer. A field is None when it is undefined for the data."""

    mean_variance: Optional[float]
    kurtosis: Optional[float]
    top1_energy: Optional[float]

    @property
    def degenerate(self) -> bool:
        return None in (self.mean_variance, self.kurtosis, self.top1_energy)


def layer_stats(t, p_fraction: float = TOP_FRACTION) -> LayerStats:
    x = _as_f64(t)
    try:
        mv = float(per_channel_variance(x).mean())
    except InsufficientRows:
        mv = None
    try:
        k = kurtosis(x)
    except (InsufficientRows, ZeroVariance):
        k = None
    share = top_p_energy(x, p_fraction)
    return LayerStats(mv, k, None if share.degenerate else share.value)


@dataclass(frozen=True)
class DepthProfile:
    entries: tuple

    def __post_init__(self):
        entries = tuple((str(label), s) for label, s in self.entries)
        labels = [label for label, _ in entries]
        if len(set(labels)) != len(labels):
            raise ValueError("layer labels must be unique")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.entries]

    def series(self, name: str) -> list[Optional[float]]:
        """One LayerStats field across the profile, e.g. ``series("kurtosis")``."""
        return [getattr(s, name) for _, s in self.entries]


def thread_limit(default: Optional[int] = None) -> int:
    """Worker cap from ``QUANTLAB_THREADS``, else ``default`` or the CPU count."""
    env = os.environ.get("QUANTLAB_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"QUANTLAB_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return max(1, default or os.cpu_count() or 1)


def depth_profile(
    layers: Sequence[tuple],
    p_fraction: float = TOP_FRACTION,
    max_workers: Optional[int] = None,
) -> DepthProfile:
    """LayerStats for each ``(label, tensor)`` pair, in input order.

    Layers are evaluated in parallel; each reduction runs inside one worker
    so the values match a serial run bit for bit.
    """
    layers = list(layers)
    if not layers:
        return DepthProfile(())
    workers = min(len(layers), max_workers or thread_limit())
    if workers == 1:
        stats = [layer_stats(t, p_fraction) for _, t in layers]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(lambda item: layer_stats(item[1], p_fraction), layers))
    return DepthProfile(tuple((label, s) for (label, _), s in zip(layers, stats)))
