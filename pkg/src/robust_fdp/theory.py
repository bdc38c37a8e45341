"""Monte Carlo checks of the large-sample behaviour of the adaptive Huber fit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .huber import DesignMatrix, HuberConfig, fit_huber_columns, huber_score, theory_tau
from .rng import StreamFactory

T3_VARIANCE = 3.0


@dataclass
class DeviationRatio:
    z: np.ndarray
    empirical: np.ndarray  # P(|T| >= z)
    gaussian: np.ndarray  # 2 - 2 Phi(z)
    replications: int
    tau: float

    @property
    def ratio(self) -> np.ndarray:
        return self.empirical / self.gaussian


def moderate_deviation_ratio(
    n: int = 500,
    replications: int = 50_000,
    z=(1.0, 2.0, 2.5),
    df: float = 3.0,
    seed: int = 0,
    chunk: int = 5_000,
    tau0_scale: float = 3.0,
) -> DeviationRatio:
    """Tail ratio of ``T = sqrt(n) mu_hat / sigma`` for intercept-only t noise.

    ``tau = tau0 sqrt(n) / sqrt(1 + w_n)`` with ``w_n = n^{1/3}`` and
    ``tau0 = tau0_scale * sigma``; ``sigma`` is the known noise sd.
    """
    sigma = math.sqrt(df / (df - 2))
    tau = theory_tau(n, tau0_scale * sigma, d=1)
    cfg = HuberConfig(tau=tau)
    design = DesignMatrix.intercept_only(n)
    streams = StreamFactory(seed)
    t = np.empty(replications)
    for start in range(0, replications, chunk):
        m = min(chunk, replications - start)
        rng = streams.generator("moderate_deviation", start // chunk)
        Y = rng.standard_t(df, size=(n, m))
        t[start:start + m] = math.sqrt(n) * fit_huber_columns(Y, design, cfg).mu_hat / sigma
    z = np.asarray(z, dtype=float)
    emp = (np.abs(t)[None, :] >= z[:, None]).mean(axis=1)
    return DeviationRatio(z, emp, 2.0 * ndtr(-z), replications, tau)


@dataclass
class RemainderStudy:
    n: int
    norms: np.ndarray

    @property
    def median(self) -> float:
        return float(np.median(self.norms))


def bahadur_remainders(
    n: int, replications: int = 500, d: int = 2, df: float = 3.0, seed: int = 0, tau0_scale: float = 3.0
) -> RemainderStudy:
    """Norms of ``S^{1/2}(theta_hat - theta) - n^{-1} sum psi_tau(nu_i) S^{-1/2} z_i``.

    Design rows are ``(1, f_i)`` with standard Gaussian ``f_i``, so ``S = I``;
    ``theta = 0`` and the noise is symmetric t, so the Huber target is exact.
    """
    sigma = math.sqrt(df / (df - 2))
    tau = theory_tau(n, tau0_scale * sigma, d=d + 1)
    cfg = HuberConfig(tau=tau)
    streams = StreamFactory(seed)
    norms = np.empty(replications)
    for r in range(replications):
        rng = streams.generator("bahadur", n, r)
        F = rng.standard_normal((n, d))
        nu = rng.standard_t(df, size=n)
        design = DesignMatrix.from_factors(F)
        theta_hat = fit_huber_columns(nu, design, cfg).theta[:, 0]
        linear = design.G.T @ huber_score(nu, tau) / n
        norms[r] = np.linalg.norm(theta_hat - linear)
    return RemainderStudy(n, norms)


def bahadur_rate(n_small: int = 100, n_large: int = 400, replications: int = 500, d: int = 2, seed: int = 0) -> float:
    """Ratio of median remainder norms, large n over small n."""
    small = bahadur_remainders(n_small, replications, d, seed=seed)
    large = bahadur_remainders(n_large, replications, d, seed=seed)
    return large.median / small.median
