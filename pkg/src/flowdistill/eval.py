"""Two-sample distribution metrics for desk-scale distillation checks.

The primary metric is the energy distance

    2 E|a - b| - E|a - a'| - E|b - b'|

with, by default, unbiased within-sample estimators (off-diagonal pair
averages).  Under the default estimator two identical samples score exactly
-2 m / n where m is their mean pairwise distance, i.e. a value of order 1/n
below zero rather than exactly zero; pass `unbiased=False` for the
V-statistic that is exactly zero on identical inputs (and positively biased
otherwise).  Everything here is deterministic given the seed.

The companion metric is a sliced quadratic Wasserstein distance: the mean
over random unit directions of the exact 1-D W2 between the projected
samples, computed from sorted samples (equal sizes) or a merged-breakpoint
quantile integral (unequal sizes).

Pass thresholds are never invented constants: `self_calibrated_threshold`
measures the energy-distance fluctuation scale between independent sample
pairs drawn from the reference itself and returns mean + 3 std.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, ConsistencyError

__all__ = [
    "energy_distance",
    "sliced_w2",
    "self_calibrated_threshold",
    "MetricReport",
    "metric_report",
]


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ConsistencyError("samples must be 2-D arrays (rows are points)")
    if a.shape[1] != b.shape[1]:
        raise ConsistencyError(
            f"sample dimensions differ: {a.shape[1]} vs {b.shape[1]}"
        )
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConsistencyError("need at least 2 points per sample")
    return a, b


def energy_distance(a, b, unbiased: bool = True) -> float:
    """Energy distance between two point clouds; symmetric in (a, b)."""
    a, b = _check_pair(a, b)
    na, nb = a.shape[0], b.shape[0]
    dab = cdist(a, b)
    # averaging the matrix and its transpose makes the value exactly
    # invariant under swapping the arguments
    cross = 0.5 * (dab.mean() + dab.T.mean())
    daa = cdist(a, a)
    dbb = cdist(b, b)
    if unbiased:
        within_a = daa.sum() / (na * (na - 1))
        within_b = dbb.sum() / (nb * (nb - 1))
    else:
        within_a = daa.mean()
        within_b = dbb.mean()
    return 2.0 * cross - (within_a + within_b)


def _w2_one_dim(a_sorted: np.ndarray, b_sorted: np.ndarray) -> float:
    na, nb = a_sorted.shape[0], b_sorted.shape[0]
    if na == nb:
        diff = a_sorted - b_sorted
        return float(np.sqrt(np.mean(diff * diff)))
    # exact integral of the squared quantile-function gap for step quantiles
    edges = np.union1d(np.arange(1, na) / na, np.arange(1, nb) / nb)
    q = np.concatenate([[0.0], edges, [1.0]])
    seg = np.diff(q)
    mid = 0.5 * (q[:-1] + q[1:])
    ia = np.minimum((mid * na).astype(int), na - 1)
    ib = np.minimum((mid * nb).astype(int), nb - 1)
    gap = a_sorted[ia] - b_sorted[ib]
    return float(np.sqrt(np.sum(seg * gap * gap)))


def sliced_w2(a, b, projections: int = 64, rng=0) -> float:
    """Mean over random unit directions of the exact projected 1-D W2."""
    a, b = _check_pair(a, b)
    if projections < 1:
        raise ConfigError("projections must be >= 1")
    gen = np.random.default_rng(rng)
    d = a.shape[1]
    dirs = gen.standard_normal((projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for direction in dirs:
        pa = np.sort(a @ direction)
        pb = np.sort(b @ direction)
        total += _w2_one_dim(pa, pb)
    return total / projections


def self_calibrated_threshold(teacher, n: int = 4096, trials: int = 16, rng=0) -> float:
    """mean + 3 std of null energy distances between fresh teacher sample pairs.

    The returned value is the pass bar for "distribution X matches the
    teacher": anything a teacher-sized sample of the teacher itself would not
    exceed (three sigma, sample std) counts as matching.
    """
    if trials < 10:
        raise ConfigError("need at least 10 calibration trials")
    gen = np.random.default_rng(rng)
    values = np.empty(trials)
    for i in range(trials):
        first = teacher.sample(n, gen)
        second = teacher.sample(n, gen)
        values[i] = energy_distance(first, second)
    return float(values.mean() + 3.0 * values.std(ddof=1))


@dataclass(frozen=True)
class MetricReport:
    """One row of two-sample comparison metrics."""

    energy_distance: float
    sliced_w2: float
    mean_error: float
    cov_frobenius_error: float
    n_a: int
    n_b: int
    seed: int

    CSV_HEADER = "energy_distance,sliced_w2,mean_error,cov_frobenius_error,n_a,n_b,seed"

    def csv_row(self) -> str:
        return (
            f"{self.energy_distance:.9g},{self.sliced_w2:.9g},{self.mean_error:.9g},"
            f"{self.cov_frobenius_error:.9g},{self.n_a},{self.n_b},{self.seed}"
        )


def metric_report(a, b, seed: int = 0, projections: int = 64, unbiased: bool = True) -> MetricReport:
    a, b = _check_pair(a, b)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    return MetricReport(
        energy_distance=float(energy_distance(a, b, unbiased=unbiased)),
        sliced_w2=float(sliced_w2(a, b, projections=projections, rng=seed)),
        mean_error=float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0))),
        cov_frobenius_error=float(np.linalg.norm(cov_a - cov_b, ord="fro")),
        n_a=int(a.shape[0]),
        n_b=int(b.shape[0]),
        seed=int(seed),
    )
