"""Online feature normalisation with streaming mean/variance."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Running statistics over feature columns.

    ``m2`` is the sum of squared deviations from the mean (Chan et al.), kept
    in float64 regardless of model precision.
    """

    count: float
    mean: np.ndarray
    m2: np.ndarray
    updates: int = 0
    freeze_after: int = 10_000

    @classmethod
    def empty(cls, size: int, freeze_after: int = 10_000) -> "Normalizer":
        return cls(0.0, np.zeros(size), np.zeros(size), 0, freeze_after)

    @property
    def frozen(self) -> bool:
        return self.updates >= self.freeze_after

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.ones_like(self.mean)
        return np.maximum(self.m2 / self.count, VARIANCE_FLOOR)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def freeze(self) -> "Normalizer":
        return replace(self, freeze_after=self.updates)


def merge_stats(count_a, mean_a, m2_a, count_b, mean_b, m2_b):
    if count_a == 0:
        return count_b, mean_b, m2_b
    if count_b == 0:
        return count_a, mean_a, m2_a
    n = count_a + count_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (count_b / n)
    m2 = m2_a + m2_b + delta * delta * (count_a * count_b / n)
    return n, mean, m2


def update_normalizer(stats: Normalizer, batch) -> Normalizer:
    """Merge a (rows x features) batch into ``stats``; frozen statistics are returned unchanged."""
    if stats.frozen:
        return stats
    x = np.asarray(batch, dtype=np.float64).reshape(-1, stats.mean.size)
    if x.shape[0] == 0:
        return replace(stats, updates=stats.updates + 1)
    mean_b = x.mean(axis=0)
    m2_b = ((x - mean_b) ** 2).sum(axis=0)
    n, mean, m2 = merge_stats(stats.count, stats.mean, stats.m2, float(x.shape[0]), mean_b, m2_b)
    return Normalizer(n, mean, m2, stats.updates + 1, stats.freeze_after)
