"""Robust estimates of the idiosyncratic variances.

Two routes: an adaptive Huber estimate of the second moment, and a
median-of-means over decoupled U-statistics between blocks of the sample.
Both subtract the common-factor variance ``b^T Sigma_f b`` when that leaves
a positive number and keep the raw estimate otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DegenerateDataError, InvalidArgumentError
from .huber import HuberFit, huber_locations


@dataclass
class VarianceEstimate:
    value: float
    method: str  # adaptive_huber | median_of_means | median_of_means_modified
    fallback_used: bool
    raw: float
    common: float
    extra: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class BlockPartition:
    V: int
    blocks: tuple[range, ...]

    @property
    def sizes(self) -> list[int]:
        return [len(b) for b in self.blocks]


def factor_cov(F) -> np.ndarray:
    """``n^{-1} sum_i f_i f_i^T`` (uncentred)."""
    F = np.asarray(F, dtype=float)
    if F.ndim != 2:
        raise InvalidArgumentError("F must be an n x K matrix")
    if F.shape[0] < 1:
        raise InvalidArgumentError("factor_cov needs n >= 1")
    return F.T @ F / F.shape[0]


def common_variance(b_hat, sigma_f_hat) -> np.ndarray:
    """``b^T Sigma_f b`` for one loading vector or a ``(p, K)`` stack."""
    b = np.asarray(b_hat, dtype=float)
    S = np.asarray(sigma_f_hat, dtype=float)
    if b.ndim == 1:
        return float(b @ S @ b) if b.size else 0.0
    if b.shape[1] == 0:
        return np.zeros(b.shape[0])
    return np.einsum("pk,kl,pl->p", b, S, b)


def default_gamma(x_sq, c: float = 2.0, p: int = 1):
    n = x_sq.shape[0]
    return c * x_sq.std(axis=0, ddof=1) * math.sqrt(n / math.log(n * p))


def huber_second_moments(X, gammas=None, c: float = 2.0, p: int = 1) -> np.ndarray:
    """Adaptive Huber estimates of ``E X_j^2`` for every column of ``X``."""
    X = np.asarray(X, dtype=float)
    sq = X * X
    if gammas is None:
        gammas = default_gamma(sq, c, p)
    gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (sq.shape[1],)).copy()
    const = np.all(sq == sq[0], axis=0)
    if np.any(const & (sq[0] == 0)):
        j = int(np.flatnonzero(const & (sq[0] == 0))[0])
        raise DegenerateDataError(f"column {j} is identically zero; second moment is not positive")
    out = np.empty(sq.shape[1])
    out[const] = sq[0, const]
    rest = ~const
    if np.any(rest):
        out[rest] = huber_locations(sq[:, rest], gammas[rest])
    if np.any(out[rest] <= 0):
        raise DegenerateDataError("non-positive Huber second-moment estimate")
    return out


def huber_second_moment(x, gamma: float | None = None, c: float = 2.0, p: int = 1) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if gamma is not None and not gamma > 0:
        raise InvalidArgumentError(f"gamma must be positive, got {gamma}")
    return float(huber_second_moments(x[:, None], gamma, c, p)[0])


def _subtract(raw, common, method, **extra) -> VarianceEstimate:
    if raw > common:
        return VarianceEstimate(raw - common, method, False, raw, common, extra)
    return VarianceEstimate(raw, method, True, raw, common, extra)


def adaptive_huber_variance(
    x_j, fit: HuberFit, sigma_f_hat, gamma: float | None = None, c: float = 2.0, p: int = 1
) -> VarianceEstimate:
    theta = huber_second_moment(x_j, gamma, c, p)
    if not theta > 0:
        raise DegenerateDataError("second-moment estimate is not positive")
    common = fit.mu_hat**2 + common_variance(fit.b_hat, sigma_f_hat)
    return _subtract(theta, common, "adaptive_huber", bf=common - fit.mu_hat**2)


def adaptive_huber_variances(X, mu_hat, b_hat, sigma_f_hat, gammas=None, c=2.0, p=None):
    """Vectorised :func:`adaptive_huber_variance` over columns.

    Returns ``(values, fallback)`` arrays.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1] if p is None else p
    theta = huber_second_moments(X, gammas, c, p)
    common = np.asarray(mu_hat) ** 2 + common_variance(b_hat, sigma_f_hat)
    fallback = ~(theta > common)
    return np.where(fallback, theta, theta - common), fallback


def mom_blocks(n: int, V: int) -> BlockPartition:
    """Contiguous blocks of size ``floor(n/V)``; the last absorbs the remainder.

    Indices are 0-based.
    """
    if not isinstance(n, (int, np.integer)) or not isinstance(V, (int, np.integer)):
        raise InvalidArgumentError("n and V must be integers")
    if V < 1 or V >= n:
        raise InvalidArgumentError(f"need 1 <= V < n, got n={n}, V={V}")
    m = n // V
    blocks = [range(k * m, (k + 1) * m) for k in range(V - 1)]
    blocks.append(range((V - 1) * m, n))
    return BlockPartition(V, tuple(blocks))


def pair_statistics(X, V: int) -> np.ndarray:
    """Decoupled U-statistics ``U_{kl}`` for all block pairs, shape ``(pairs, p)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if V < 2:
        raise InvalidArgumentError("median-of-means needs V >= 2 blocks")
    part = mom_blocks(X.shape[0], V)
    out = []
    for k, l in combinations(range(V), 2):
        a = X[part.blocks[k]]
        b = X[part.blocks[l]]
        diff = a[:, None, :] - b[None, :, :]
        sq = (diff * diff).reshape(-1, X.shape[1])
        # cumsum adds strictly in (i, j) order, so results do not depend on
        # numpy's pairwise-summation blocking
        out.append(np.cumsum(sq, axis=0)[-1] / (2 * len(a) * len(b)))
    return np.array(out)


def mom_sigma_columns(X, V: int) -> np.ndarray:
    """Median over block pairs of the decoupled U-statistics, per column.

    An even number of pairs uses the midpoint of the two central values.
    """
    return np.median(pair_statistics(X, V), axis=0)


def mom_sigma_jj(x_j, V: int) -> float:
    """Median-of-means estimate of ``var(X_j)``; 0 for a constant column."""
    return float(mom_sigma_columns(np.asarray(x_j, dtype=float).ravel()[:, None], V)[0])


def default_V(n: int, p: int) -> int:
    return max(2, math.ceil(0.5 * math.log(p * n)))


def mom_variance(x_j, fit: HuberFit, sigma_f_hat, V: int) -> VarianceEstimate:
    s = mom_sigma_jj(x_j, V)
    if not s > 0:
        raise DegenerateDataError("median-of-means variance is zero (constant column)")
    return _subtract(s, common_variance(fit.b_hat, sigma_f_hat), "median_of_means", V=V)


def lower_quantile(values, q: float) -> float:
    """Order statistic ``ceil(q m)`` of ``m`` values (1-based)."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, math.ceil(q * v.size))
    return float(v[k - 1])


def mom_variance_modified(
    x_j, fit: HuberFit, sigma_f_hat, V: int | None = None, p: int = 1, q: float = 0.75
) -> VarianceEstimate:
    """Median-of-means over ``v = 2..V`` blocks, then a 0.75 quantile.

    Estimates at or below ``b^T Sigma_f b`` are discarded before the quantile;
    if none remain this reduces to :func:`mom_variance` with ``V`` blocks.
    """
    x_j = np.asarray(x_j, dtype=float).ravel()
    if V is None:
        V = default_V(x_j.size, p)
    sig = np.array([mom_sigma_jj(x_j, v) for v in range(2, V + 1)])
    common = common_variance(fit.b_hat, sigma_f_hat)
    return _modified_from(sig, common, q, V)


def _modified_from(sig, common, q, V) -> VarianceEstimate:
    survivors = sig[sig > common]
    if survivors.size == 0:
        s = sig[-1]
        if not s > 0:
            raise DegenerateDataError("median-of-means variance is zero (constant column)")
        return VarianceEstimate(s, "median_of_means_modified", True, s, common, {"V": V})
    raw = lower_quantile(survivors, q)
    return VarianceEstimate(
        raw - common, "median_of_means_modified", False, raw, common, {"V": V, "survivors": survivors.size}
    )


def mom_variances_modified(X, b_hat, sigma_f_hat, V: int | None = None, p: int | None = None, q: float = 0.75):
    """Vectorised :func:`mom_variance_modified`; returns ``(values, fallback)``."""
    X = np.asarray(X, dtype=float)
    n, pp = X.shape
    if V is None:
        V = default_V(n, pp if p is None else p)
    sig = np.array([mom_sigma_columns(X, v) for v in range(2, V + 1)])  # (V-1, p)
    common = common_variance(b_hat, sigma_f_hat)
    values = np.empty(pp)
    fallback = np.zeros(pp, dtype=bool)
    for j in range(pp):
        est = _modified_from(sig[:, j], common[j], q, V)
        values[j] = est.value
        fallback[j] = est.fallback_used
    return values, fallback
