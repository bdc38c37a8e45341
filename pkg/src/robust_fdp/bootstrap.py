"""Weighted (multiplier) bootstrap calibration of the robust intercepts."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError
from .huber import DesignMatrix, HuberConfig, HuberFit, HuberFitBatch, fit_huber_columns
from .rng import StreamFactory

log = logging.getLogger(__name__)


class WeightScheme(str, Enum):
    TWO_BERNOULLI_HALF = "two_bernoulli_half"
    EXPONENTIAL_UNIT = "exponential_unit"
    NORMAL_ONE_ONE = "normal_one_one"
    # test hook: every weight equals 1
    CONSTANT_ONE = "constant_one"


class NonconvexObjectiveWarning(RuntimeWarning):
    pass


def draw_weights(scheme, size, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. weights with unit mean and unit variance (except the constant hook)."""
    scheme = WeightScheme(scheme)
    if np.prod(size) < 1:
        raise InvalidArgumentError("need at least one weight")
    if scheme is WeightScheme.TWO_BERNOULLI_HALF:
        return 2.0 * rng.integers(0, 2, size=size)
    if scheme is WeightScheme.EXPONENTIAL_UNIT:
        return rng.standard_exponential(size=size)
    if scheme is WeightScheme.NORMAL_ONE_ONE:
        return rng.normal(1.0, 1.0, size=size)
    return np.ones(size)


def fit_weighted_huber(y, design: DesignMatrix, weights, tau: float, config: HuberConfig | None = None) -> HuberFit:
    """Minimise ``sum_i w_i l_tau(y_i - mu - b^T f_i)``.

    Negative weights make the objective nonconvex; a fit that then fails to
    converge is returned as a best effort with a warning.
    """
    w = np.asarray(weights, dtype=float).ravel()
    if np.all(w == 0):
        raise InvalidArgumentError("all weights are zero")
    cfg = config or HuberConfig()
    batch = fit_huber_columns(np.asarray(y, dtype=float)[:, None], design, cfg, taus=tau, weights=w[:, None],
                              strict=bool(np.all(w >= 0)))
    fit = batch.fit(0)
    if np.any(w < 0) and not fit.converged:
        warnings.warn("weighted Huber objective with negative weights did not converge",
                      NonconvexObjectiveWarning, stacklevel=2)
    return fit


@dataclass
class BootstrapResult:
    B: int
    deviations: np.ndarray  # (p, B), NaN where a replicate failed
    pvalues: np.ndarray
    effective_B: np.ndarray
    failed: int

    @property
    def flagged(self) -> bool:
        return self.failed > 0


def bootstrap_pvalues(
    X,
    F,
    fits: HuberFitBatch,
    B: int,
    scheme=WeightScheme.EXPONENTIAL_UNIT,
    streams: StreamFactory | None = None,
    replication: int = 0,
    config: HuberConfig | None = None,
) -> BootstrapResult:
    """Bootstrap P-values ``P*_j = (B+1)^{-1} #{b : |mu*_jb - mu_j| >= |mu_j|}``.

    Weights for column ``j`` come from the stream ``("bootstrap", replication, j)``
    so columns can be processed in any order. Each column is refitted with its
    own original tau.
    """
    if B < 1:
        raise InvalidArgumentError("B must be >= 1")
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    design = DesignMatrix.from_factors(np.asarray(F, dtype=float).reshape(n, -1))
    streams = streams or StreamFactory(0)
    cfg = config or HuberConfig()
    mu_hat = np.asarray(fits.mu_hat, dtype=float)
    taus = np.asarray(fits.tau_used, dtype=float)

    dev = np.full((p, B), np.nan)
    for j in range(p):
        rng = streams.generator("bootstrap", replication, j)
        W = draw_weights(scheme, (n, B), rng)
        Y = np.repeat(X[:, j:j + 1], B, axis=1)
        good = W.sum(axis=0) > 0
        if not np.any(good):
            continue
        batch = fit_huber_columns(Y[:, good], design, cfg, taus=taus[j], weights=W[:, good], strict=False)
        keep = batch.ok & batch.converged & np.isfinite(batch.mu_hat)
        cols = np.flatnonzero(good)[keep]
        dev[j, cols] = np.abs(batch.mu_hat[keep] - mu_hat[j])

    valid = ~np.isnan(dev)
    eff = valid.sum(axis=1)
    hits = (np.where(valid, dev, -np.inf) >= np.abs(mu_hat)[:, None]).sum(axis=1)
    pvalues = hits / (eff + 1)
    failed = int(p * B - valid.sum())
    if failed:
        log.warning("bootstrap: %d of %d replicate fits failed and were dropped", failed, p * B)
    return BootstrapResult(B, dev, pvalues, eff, failed)
