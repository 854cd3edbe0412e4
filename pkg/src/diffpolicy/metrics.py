"""Distribution-level and task-level metrics, plus seed aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist


class MetricError(ValueError):
    pass


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise MetricError("empty sample set")
    x = x.reshape(len(x), -1)
    if not np.all(np.isfinite(x)):
        raise MetricError("sample set contains non-finite values")
    return x


def _mean_pairwise(a: np.ndarray, b: np.ndarray) -> float:
    chunk = max(1, 4_000_000 // len(b))  # bounds the distance block at ~32 MB
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(a, b) -> float:
    """2 E|A - B| - E|A - A'| - E|B - B'| with the V-statistic (all pairs) estimator.

    The V-statistic is non-negative for every pair of sets and zero exactly
    when the two empirical distributions coincide.
    """
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    e = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(e, 0.0)


@dataclass(frozen=True)
class MomentReport:
    mean: np.ndarray
    std: np.ndarray


def moment_report(a) -> MomentReport:
    a = _as_samples(a)
    return MomentReport(a.mean(0), a.std(0))


def ks_statistic(samples, cdf: Callable) -> float:
    """sup |F_n - F| for 1-D samples against a vectorised CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    n = len(x)
    if n == 0:
        raise MetricError("empty sample set")
    f = np.asarray(cdf(x), dtype=np.float64)
    hi = np.arange(1, n + 1) / n - f
    lo = f - np.arange(0, n) / n
    return float(max(hi.max(), lo.max()))


def mode_frequencies(a, centers) -> np.ndarray:
    """Fraction of samples whose nearest centre is each centre."""
    a = _as_samples(a)
    c = np.asarray(centers, dtype=np.float64).reshape(-1, a.shape[1])
    lab = np.argmin(cdist(a, c, "sqeuclidean"), axis=1)
    return np.bincount(lab, minlength=len(c)) / len(a)


@dataclass(frozen=True)
class SeedAggregate:
    mean: float
    std: float  # population std over seeds

    def format(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} (± {self.std:.{digits}f})"


def aggregate_seeds(values) -> SeedAggregate:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(v) == 0:
        raise MetricError("need at least one seed")
    # sorting makes the float summation order independent of the input order
    v = np.sort(v)
    return SeedAggregate(float(v.mean()), float(v.std()))
