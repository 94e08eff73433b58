"""Sign-flip permutation tests, permuted-slope comparisons and temporal clusters.

p-values use the add-one estimate ``(count(null >= observed) + 1) / (n + 1)``
and are therefore never zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_PERM_ITERATIONS = 20


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class PermTestResult:
    t_obs: float
    p_null: float
    cohens_d: float
    n_iterations: int
    null_distribution: np.ndarray = field(repr=False)

    def to_dict(self, name: str | None = None) -> dict:
        d = {"t_obs": _json_float(self.t_obs), "p_null": self.p_null,
             "cohens_d": _json_float(self.cohens_d), "n_iterations": self.n_iterations}
        if name is not None:
            d = {"test": name, **d}
        return d


@dataclass(frozen=True)
class ClusterReport:
    clusters: list
    p_values: np.ndarray = field(repr=False, default=None)

    def to_list(self) -> list[dict]:
        return [{"start_s": round(float(a), 6), "end_s": round(float(b), 6), "n_timepoints": int(n)}
                for a, b, n in self.clusters]


def _json_float(x: float):
    x = float(x)
    if np.isnan(x):
        return None
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def sign_flips(n_iter: int, n: int, seed) -> np.ndarray:
    """n_iter x n matrix of random +-1 drawn from one seeded generator."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=(n_iter, n), dtype=np.int8) * 2 - 1


def one_sample_t(x, axis: int = -1) -> np.ndarray:
    """t = mean / (sd / sqrt(n)) along ``axis``; +-inf for zero spread, NaN for all-zero."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    mean = x.mean(axis=axis)
    sd = x.std(axis=axis, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return mean / (sd / np.sqrt(n))


def _add_one_p(null_abs, obs_abs) -> float:
    # NaN null values (all-zero flips) count as not exceeding
    exceed = np.sum(np.nan_to_num(null_abs, nan=-np.inf) >= obs_abs)
    return (float(exceed) + 1.0) / (null_abs.shape[0] + 1.0)


def perm_test_vs_zero(x, n_iter: int = 1000, seed=0) -> PermTestResult:
    """One-sample test of mean(x) != 0 by randomly sign-flipping each subject's value."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise StatsError("need a 1-d sample of length >= 2")
    if np.all(x == 0):
        raise StatsError("all values are zero; test undefined")
    t_obs = float(one_sample_t(x))
    flips = sign_flips(n_iter, x.size, seed)
    t_null = one_sample_t(flips * x[None, :], axis=1)
    p = _add_one_p(np.abs(t_null), abs(t_obs))
    sd = x.std(ddof=1)
    d = x.mean() / sd if sd > 0 else np.sign(x.mean()) * np.inf
    return PermTestResult(t_obs, p, float(d), n_iter, t_null)


def perm_ttest_paired(a, b, n_iter: int = 1000, seed=0) -> PermTestResult:
    """Paired test: condition labels swapped within subjects, i.e. sign flips of a - b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise StatsError("a and b must be equal-length 1-d samples of length >= 2")
    diff = a - b
    if diff.std(ddof=1) == 0:
        raise StatsError("differences have zero variance")
    return perm_test_vs_zero(diff, n_iter, seed)


def find_clusters(mask, time_s, min_cluster: int = 1) -> list[tuple[float, float, int]]:
    """Contiguous True runs of at least ``min_cluster`` points as (start_s, end_s, n)."""
    mask = np.asarray(mask, dtype=bool)
    time_s = np.asarray(time_s, dtype=float)
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    out = []
    for start, stop in zip(edges[0::2], edges[1::2]):
        n = stop - start
        if n >= min_cluster:
            out.append((float(time_s[start]), float(time_s[stop - 1]), int(n)))
    return out


def pointwise_sign_flip_p(diff, n_iter: int, seed) -> np.ndarray:
    """Per-column add-one p-values of a sign-flip t-test; diff is subjects x time."""
    diff = np.asarray(diff, dtype=float)
    n, T = diff.shape
    t_obs = np.abs(one_sample_t(diff, axis=0))
    flips = sign_flips(n_iter, n, seed).astype(float)
    p = np.ones(T)
    zero = np.all(diff == 0, axis=0)
    for start in range(0, T, 256):
        sl = slice(start, min(T, start + 256))
        null = np.abs(one_sample_t(flips[:, :, None] * diff[None, :, sl], axis=1))
        null = np.nan_to_num(null, nan=-np.inf)
        exceed = (null >= t_obs[None, sl]).sum(axis=0)
        p[sl] = (exceed + 1.0) / (n_iter + 1.0)
    p[zero] = 1.0
    return p


def timecourse_significance(values, baseline=0.0, time_s=None, alpha: float = 0.05,
                            min_cluster: int = 5, n_iter: int = 1000, seed=0) -> ClusterReport:
    """Pointwise sign-flip tests of ``values - baseline`` (subjects x time), then clustering."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise StatsError("values must be subjects x time with at least 2 subjects")
    diff = values - np.broadcast_to(np.asarray(baseline, dtype=float), values.shape)
    if time_s is None:
        time_s = np.arange(values.shape[1], dtype=float)
    p = pointwise_sign_flip_p(diff, n_iter, seed)
    return ClusterReport(find_clusters(p < alpha, time_s, min_cluster), p)


def slope_vs_permuted(slopes, slope_perm, time_s=None, alpha: float = 0.05,
                      min_cluster: int = 5) -> ClusterReport:
    """Group-mean slope against the distribution of permuted group means (upper tail).

    ``slopes`` is subjects x time, ``slope_perm`` subjects x iterations x time;
    permuted group means pair iteration ``i`` across subjects.
    """
    slopes = np.atleast_2d(np.asarray(slopes, dtype=float))
    perm = np.asarray(slope_perm, dtype=float)
    if perm.ndim == 2:
        perm = perm[None]
    if perm.shape[0] != slopes.shape[0] or perm.shape[2] != slopes.shape[1]:
        raise StatsError(f"shape mismatch: slopes {slopes.shape}, permuted {perm.shape}")
    n_iter = perm.shape[1]
    if n_iter < MIN_PERM_ITERATIONS:
        raise StatsError(f"{n_iter} permutation iterations; at least {MIN_PERM_ITERATIONS} required")
    obs = slopes.mean(axis=0)
    null = perm.mean(axis=0)
    p = ((null >= obs[None, :]).sum(axis=0) + 1.0) / (n_iter + 1.0)
    if time_s is None:
        time_s = np.arange(slopes.shape[1], dtype=float)
    return ClusterReport(find_clusters(p < alpha, time_s, min_cluster), p)
