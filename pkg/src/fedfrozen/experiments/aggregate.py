"""Median / interquartile summaries across seeds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..matrix_core import ConfigurationError

__all__ = ["AggregateSeries", "quantile", "aggregate_series"]


def quantile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation quantile (Hyndman-Fan type 7, numpy's default)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ConfigurationError("quantile of an empty sample")
    return float(np.quantile(arr, q, method="linear"))


@dataclass(frozen=True)
class AggregateSeries:
    label: str
    x: tuple[float, ...]
    median: tuple[float, ...]
    q25: tuple[float, ...]
    q75: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.x) == len(self.median) == len(self.q25) == len(self.q75)):
            raise ConfigurationError("series columns have different lengths")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "x": list(self.x),
            "median": list(self.median),
            "q25": list(self.q25),
            "q75": list(self.q75),
        }


def aggregate_series(label: str, x: Sequence[float], samples: Sequence[Sequence[float]]) -> AggregateSeries:
    """Summarize ``samples[i]`` (one value per seed) at each ``x[i]``.

    NaN entries (diverged seeds) are dropped per point; a point whose samples
    are all NaN summarizes to NaN.
    """
    if len(x) != len(samples):
        raise ConfigurationError("need one sample list per x value")
    med, lo, hi = [], [], []
    for s in samples:
        arr = np.asarray(s, dtype=np.float64)
        arr = arr[~np.isnan(arr)]
        if arr.size == 0:
            med.append(float("nan"))
            lo.append(float("nan"))
            hi.append(float("nan"))
            continue
        lo.append(quantile(arr, 0.25))
        med.append(quantile(arr, 0.5))
        hi.append(quantile(arr, 0.75))
    return AggregateSeries(label, tuple(float(v) for v in x), tuple(med), tuple(lo), tuple(hi))
