"""Dependence-adjusted test statistics and FDP-controlling rejection rules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InvalidArgumentError
from .variance import VarianceEstimate


@dataclass
class TestStatistics:
    __test__ = False  # not a pytest class

    values: np.ndarray
    variant: str
    n: int | tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("test statistics must be finite")

    def __len__(self) -> int:
        return self.values.size


@dataclass
class RejectionOutcome:
    threshold: float
    rejected: np.ndarray  # sorted 0-based indices
    pi0_hat: float
    lam: float | None
    alpha: float
    pvalues: np.ndarray


@dataclass
class Metrics:
    fdp: float
    fnr: float
    tpr: float
    false_discoveries: int
    discoveries: int
    missed: int
    p0: int
    p1: int


def _variance_values(var_hats) -> np.ndarray:
    vals = [v.value if isinstance(v, VarianceEstimate) else v for v in np.atleast_1d(var_hats)]
    vals = np.asarray(vals, dtype=float)
    if np.any(~(vals > 0)):
        raise InvalidArgumentError("variance estimates must be positive")
    return vals


def test_statistics(mu_hats, var_hats, n: int, variant: str = "adaptive_huber") -> TestStatistics:
    """``T_j = sqrt(n) * mu_j / sqrt(sigma_j)``."""
    mu = np.asarray(mu_hats, dtype=float)
    return TestStatistics(math.sqrt(n) * mu / np.sqrt(_variance_values(var_hats)), variant, n)


test_statistics.__test__ = False


_TINY = np.finfo(float).tiny


def _two_sided(a) -> np.ndarray:
    # floor at the smallest normal double so P-values stay in (0, 1]
    return np.maximum(2.0 * ndtr(-a), _TINY)


def normal_pvalues(stats) -> np.ndarray:
    """Two-sided normal P-values ``2 Phi(-|T|)``."""
    t = stats.values if isinstance(stats, TestStatistics) else np.asarray(stats, dtype=float)
    return _two_sided(np.abs(t))


def storey_pi0(pvalues, lam: float = 0.5) -> float:
    if not 0 <= lam < 1:
        raise InvalidArgumentError(f"lambda must lie in [0, 1), got {lam}")
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        raise InvalidArgumentError("storey_pi0 needs at least one P-value")
    return float(np.count_nonzero(p > lam) / ((1 - lam) * p.size))


def _abs_values(stats) -> np.ndarray:
    t = stats.values if isinstance(stats, TestStatistics) else np.asarray(stats, dtype=float)
    return np.abs(t)


def fdp_estimate(z: float, stats, pi0_hat: float = 1.0) -> float:
    """``2 p pi0 Phi(-z) / max(R(z), 1)`` with ``R(z) = #{|T_j| >= z}``."""
    if z < 0:
        raise InvalidArgumentError("z must be non-negative")
    a = _abs_values(stats)
    r = np.count_nonzero(a >= z)
    return float(2 * a.size * pi0_hat * ndtr(-z) / max(r, 1))


def rejection_threshold(stats, alpha: float, pi0_hat: float = 1.0, lam: float | None = None) -> RejectionOutcome:
    """Smallest ``z >= 0`` with estimated FDP at most ``alpha``; reject ``|T_j| >= z``.

    ``R(z)`` only changes at the distinct ``|T_j|``, and on each piece the
    estimate decreases in ``z``, so the infimum is found by checking the right
    end of every piece and solving ``Phi(-z) = alpha R / (2 p pi0)`` on the
    first feasible one.
    """
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    a = _abs_values(stats)
    p = a.size
    pvalues = _two_sided(a)
    if pi0_hat <= 0:
        return RejectionOutcome(0.0, np.arange(p), float(pi0_hat), lam, alpha, pvalues)

    levels = np.unique(a)  # ascending, distinct
    # R at each level: count of |T| >= level
    counts = p - np.searchsorted(np.sort(a), levels, side="left")
    # identical floating expression to bh_select, so both routes agree exactly
    feasible = _two_sided(levels) * pi0_hat * p <= alpha * counts
    if np.any(feasible):
        k = int(np.argmax(feasible))
        r = counts[k]
        left = levels[k - 1] if k > 0 else 0.0
    else:
        k = levels.size  # beyond the largest statistic, R = 0
        r = 0
        left = levels[-1] if levels.size else 0.0
    target = alpha * max(r, 1) / (2 * p * pi0_hat)
    z_star = -ndtri(target) if target < 1 else -np.inf
    if k < levels.size:
        if k > 0 and z_star <= left:
            # infimum not attained at `left` itself (R jumps there); step just past it
            z = float(np.nextafter(left, np.inf))
        else:
            z = max(z_star, 0.0)
        z = min(z, levels[k])
        rejected = np.flatnonzero(a >= levels[k])
    else:
        z = max(left, z_star, 0.0)
        if not np.isfinite(z):
            z = math.inf
        rejected = np.array([], dtype=int)
    return RejectionOutcome(float(z), rejected, float(pi0_hat), lam, alpha, pvalues)


def bh_select(pvalues, alpha: float, pi0_hat: float = 1.0) -> np.ndarray:
    """Step-up selection: indices with ``P_j <= P_(k)``, ``k = max{j: P_(j) <= alpha j / (pi0 p)}``."""
    if not 0 < alpha < 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    pv = np.asarray(pvalues, dtype=float)
    p = pv.size
    if p == 0:
        return np.array([], dtype=int)
    srt = np.sort(pv)
    ranks = np.arange(1, p + 1)
    ok = srt * pi0_hat * p <= alpha * ranks
    if not np.any(ok):
        return np.array([], dtype=int)
    k = int(np.flatnonzero(ok)[-1])
    return np.flatnonzero(pv <= srt[k])


def naive_t_statistics(X) -> TestStatistics:
    """Marginal one-sample t statistics, ignoring the factors."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 2:
        raise InvalidArgumentError("naive t statistics need n >= 2")
    sd = X.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise InvalidArgumentError(f"zero-variance columns: {bad.tolist()}")
    return TestStatistics(math.sqrt(n) * X.mean(axis=0) / sd, "naive_marginal_t", n)


def two_sample_statistics(mu1, vars1, n1: int, mu2, vars2, n2: int) -> TestStatistics:
    """``(mu1 - mu2) / sqrt(s1/n1 + s2/n2)`` per hypothesis.

    ``mu1``/``mu2`` may be arrays of intercepts or sequences of fits.
    """
    m1 = _intercepts(mu1)
    m2 = _intercepts(mu2)
    s1 = _variance_values(vars1)
    s2 = _variance_values(vars2)
    return TestStatistics((m1 - m2) / np.sqrt(s1 / n1 + s2 / n2), "two_sample", (n1, n2))


def _intercepts(fits) -> np.ndarray:
    if hasattr(fits, "mu_hat"):
        return np.atleast_1d(np.asarray(fits.mu_hat, dtype=float))
    return np.asarray([getattr(f, "mu_hat", f) for f in np.atleast_1d(fits)], dtype=float)


def covariance_eigenvalues(X) -> np.ndarray:
    """Descending eigenvalues of the sample covariance (via the smaller Gram side)."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    Xc = X - X.mean(axis=0)
    M = Xc.T @ Xc if p <= n else Xc @ Xc.T
    ev = np.linalg.eigvalsh(M / (n - 1))
    return ev[::-1]


def eigenvalue_ratio_k(X, kmax: int) -> int:
    """Factor count maximising consecutive eigenvalue ratios over ``1 < k < kmax``."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if kmax < 3 or kmax >= min(n, p):
        raise InvalidArgumentError(f"need 3 <= kmax < min(n, p) = {min(n, p)}, got {kmax}")
    ev = covariance_eigenvalues(X)
    return ratio_argmax(ev, kmax)


def ratio_argmax(eigenvalues, kmax: int) -> int:
    ev = np.asarray(eigenvalues, dtype=float)
    tol = ev[0] * 1e-12 if ev.size else 0.0
    ks = np.arange(2, kmax)  # 1-based k with 1 < k < kmax
    denom = ev[ks]  # lambda_{k+1} in 1-based terms
    if np.any(denom <= tol):
        raise InvalidArgumentError("sample covariance rank too low for kmax")
    ratios = ev[ks - 1] / denom
    return int(ks[int(np.argmax(ratios))])


def evaluate(outcome, truth) -> Metrics:
    """Realised FDP, FNR and TPR. ``truth[j]`` is True for a true null."""
    null = np.asarray(truth, dtype=bool)
    p = null.size
    rejected = outcome.rejected if isinstance(outcome, RejectionOutcome) else np.asarray(outcome, dtype=int)
    rej = np.zeros(p, dtype=bool)
    rej[rejected] = True
    R = int(rej.sum())
    V = int((rej & null).sum())
    p0 = int(null.sum())
    p1 = p - p0
    missed = int((~rej & ~null).sum())
    fnr = missed / (p - R) if p > R else 0.0
    tpr = (R - V) / p1 if p1 > 0 else 0.0
    return Metrics(V / max(R, 1), fnr, tpr, V, R, missed, p0, p1)
