"""Huber loss and the adaptive Huber regression solver.

The solver is the method of scoring: starting from zero, each iteration
moves along ``(G^T G)^{-1} G^T psi`` scaled by the inverse fraction of
residuals inside ``[-tau, tau]``. Many response columns sharing one design
are fitted together; every column follows its own iteration path and never
influences another column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateScaleError,
    InsufficientDataError,
    InvalidArgumentError,
    RankDeficientDesignError,
)

MAX_HALVINGS = 30
# relative slack when comparing objectives, absorbs rounding near the optimum
_OBJ_SLACK = 1e-12
_TINY_STEP = 1e-8


def _check_tau(tau) -> None:
    t = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(t) | np.isposinf(t)) or np.any(t <= 0):
        raise InvalidArgumentError(f"tau must be positive, got {tau!r}")


def huber_loss(u, tau):
    """Huber loss: ``u^2/2`` inside ``[-tau, tau]``, ``tau|u| - tau^2/2`` outside."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise InvalidArgumentError("huber_loss requires finite arguments")
    a = np.abs(u)
    with np.errstate(invalid="ignore"):
        out = np.where(a <= tau, 0.5 * u * u, tau * a - 0.5 * tau * tau)
    return out[()] if out.ndim == 0 else out


def huber_score(u, tau):
    """Derivative of the Huber loss; ``u`` clipped to ``[-tau, tau]``."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise InvalidArgumentError("huber_score requires finite arguments")
    out = np.clip(u, -tau, tau)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class HuberConfig:
    """Solver settings.

    ``tau`` fixes the robustification parameter; when it is ``None`` the
    practical rule ``tau = c * sigma_ols * sqrt(n / log(n p))`` is used, with
    ``p`` the number of hypotheses the fit belongs to.
    """

    tau: float | None = None
    c: float = 2.0
    candidates: tuple[float, ...] = (0.5, 1.0, 2.0)
    p: int = 1
    max_iterations: int = 100
    convergence_tol: float = 1e-10
    min_active_fraction: float = 0.05

    def __post_init__(self):
        if self.tau is not None and not self.tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")
        if not self.c > 0:
            raise InvalidArgumentError(f"c must be positive, got {self.c}")
        if len(self.candidates) == 0 or any(not x > 0 for x in self.candidates):
            raise InvalidArgumentError("candidates must be a non-empty set of positive reals")
        if self.p < 1:
            raise InvalidArgumentError("p must be >= 1")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise InvalidArgumentError("convergence_tol must be positive")
        if not 0 < self.min_active_fraction <= 1:
            raise InvalidArgumentError("min_active_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class DesignMatrix:
    """``G = [1, F]``: a column of ones followed by the K factor columns."""

    G: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        if G.ndim != 2 or G.shape[1] < 1:
            raise InvalidArgumentError("design must be a 2-d array with an intercept column")
        n, d = G.shape
        if n <= d:
            raise InvalidArgumentError(f"need n > K + 1, got n={n}, K={d - 1}")
        if not np.all(G[:, 0] == 1.0):
            raise InvalidArgumentError("first design column must be identically 1")
        object.__setattr__(self, "G", G)

    @classmethod
    def from_factors(cls, F) -> "DesignMatrix":
        F = np.asarray(F, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        return cls(np.column_stack([np.ones(F.shape[0]), F]))

    @classmethod
    def intercept_only(cls, n: int) -> "DesignMatrix":
        return cls(np.ones((n, 1)))

    @property
    def n(self) -> int:
        return self.G.shape[0]

    @property
    def K(self) -> int:
        return self.G.shape[1] - 1

    @property
    def factors(self) -> np.ndarray:
        return self.G[:, 1:]


@dataclass
class HuberFit:
    mu_hat: float
    b_hat: np.ndarray
    tau_used: float
    iterations: int
    converged: bool
    residuals: np.ndarray
    objective_value: float

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.mu_hat], self.b_hat])


@dataclass
class HuberFitBatch:
    """Fits for the columns of an ``n x m`` response matrix."""

    theta: np.ndarray  # (K+1, m)
    tau_used: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    residuals: np.ndarray  # (n, m)
    objective_value: np.ndarray
    active_fraction: np.ndarray = field(repr=False)
    ok: np.ndarray | None = field(default=None, repr=False)

    @property
    def mu_hat(self) -> np.ndarray:
        return self.theta[0]

    @property
    def b_hat(self) -> np.ndarray:
        return self.theta[1:].T

    def __len__(self) -> int:
        return self.theta.shape[1]

    def fit(self, j: int) -> HuberFit:
        return HuberFit(
            mu_hat=float(self.theta[0, j]),
            b_hat=self.theta[1:, j].copy(),
            tau_used=float(self.tau_used[j]),
            iterations=int(self.iterations[j]),
            converged=bool(self.converged[j]),
            residuals=self.residuals[:, j].copy(),
            objective_value=float(self.objective_value[j]),
        )


def _objective(Z, tau, weights=None):
    a = np.abs(Z)
    loss = np.where(a <= tau, 0.5 * Z * Z, tau * a - 0.5 * tau * tau)
    if weights is not None:
        loss = weights * loss
    return loss.sum(axis=0)


def _gram_solve(G):
    gram = G.T @ G
    if np.linalg.matrix_rank(G) < G.shape[1]:
        raise RankDeficientDesignError("design matrix is rank deficient; G^T G is singular")
    return gram


def _scoring(Y, G, tau, cfg: HuberConfig, weights=None):
    """Method-of-scoring iterations for every column of ``Y``.

    Returns ``(theta, iterations, converged, ok)`` where ``ok`` is False for
    columns whose weighted Hessian was singular.
    """
    n, m = Y.shape
    d = G.shape[1]
    theta = np.zeros((d, m))
    iterations = np.zeros(m, dtype=int)
    converged = np.zeros(m, dtype=bool)
    ok = np.ones(m, dtype=bool)
    live = np.ones(m, dtype=bool)
    tol = cfg.convergence_tol
    floor = cfg.min_active_fraction

    if weights is None:
        gram = _gram_solve(G)
    else:
        wsum = weights.sum(axis=0)

    obj = _objective(Y, tau, weights)
    for _ in range(cfg.max_iterations):
        idx = np.flatnonzero(live)
        if idx.size == 0:
            break
        th = theta[:, idx]
        t = tau[idx]
        Z = Y[:, idx] - G @ th
        active = np.abs(Z) <= t
        psi = np.clip(Z, -t, t)
        if weights is None:
            frac = active.mean(axis=0)
            direction = np.linalg.solve(gram, G.T @ psi)
        else:
            w = weights[:, idx]
            frac = (w * active).sum(axis=0) / wsum[idx]
            H = np.einsum("ni,nm,nj->mij", G, w, G)
            rhs = (G.T @ (w * psi)).T
            cond = np.linalg.cond(H)
            sing = ~np.isfinite(cond) | (cond > 1e12)
            if np.any(sing):
                H[sing] = np.eye(d)
                rhs[sing] = 0.0
                ok[idx[sing]] = False
                live[idx[sing]] = False
            direction = np.linalg.solve(H, rhs[..., None])[..., 0].T
        # damped step while the active set is nearly empty
        step = direction / np.maximum(frac, floor)

        scale = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        cur = obj[idx]
        new_obj = cur.copy()
        w_idx = None if weights is None else weights[:, idx]
        for _h in range(MAX_HALVINGS + 1):
            todo = np.flatnonzero(~accepted)
            if todo.size == 0:
                break
            cand = th[:, todo] + scale[todo] * step[:, todo]
            Zc = Y[:, idx[todo]] - G @ cand
            oc = _objective(Zc, t[todo], None if w_idx is None else w_idx[:, todo])
            # strict descent; rounding-level ties only count for tiny steps
            delta = scale[todo] * np.max(np.abs(step[:, todo]), axis=0)
            tiny = delta <= _TINY_STEP * (1.0 + np.max(np.abs(th[:, todo]), axis=0))
            good = (oc < cur[todo]) | (tiny & (oc <= cur[todo] + _OBJ_SLACK * np.abs(cur[todo])))
            accepted[todo[good]] = True
            new_obj[todo[good]] = oc[good]
            scale[todo[~good]] *= 0.5

        update = scale * step
        moved = np.max(np.abs(update), axis=0) if d else np.zeros(idx.size)
        acc_idx = idx[accepted]
        theta[:, acc_idx] = th[:, accepted] + update[:, accepted]
        obj[acc_idx] = new_obj[accepted]
        iterations[acc_idx] += 1

        done = accepted & (moved <= tol)
        converged[idx[done]] = True
        live[idx[done]] = False
        # no descent possible from here: converged only if the step itself is negligible
        stuck = ~accepted
        if np.any(stuck):
            negligible = np.max(np.abs(step[:, stuck]), axis=0) <= tol
            converged[idx[stuck][negligible]] = True
            live[idx[stuck]] = False
        live &= ok

    return theta, iterations, converged, ok, obj


def ols_residual_sd(Y, G) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, dtype=float).T).T
    coef, *_ = np.linalg.lstsq(G, Y, rcond=None)
    resid = Y - G @ coef
    return resid.std(axis=0, ddof=1)


def practical_tau(y, design: DesignMatrix, c: float = 2.0, p: int = 1):
    """``c * sigma_hat * sqrt(n / log(n p))`` with ``sigma_hat`` the OLS residual sd.

    Accepts a vector or an ``n x m`` matrix (one tau per column).
    """
    n = design.n
    sd = ols_residual_sd(y, design.G)
    tau = c * sd * math.sqrt(n / math.log(n * p))
    return float(tau[0]) if np.ndim(y) == 1 else tau


def theory_tau(n: int, tau0: float, w_n: float | None = None, d: int = 0) -> float:
    """``tau0 * sqrt(n) * (d + w_n)^{-1/2}``; ``w_n`` defaults to ``n^{1/3}``."""
    if w_n is None:
        w_n = n ** (1.0 / 3.0)
    return tau0 * math.sqrt(n) / math.sqrt(d + w_n)


def _as_matrix(Y, n):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise InvalidArgumentError(f"response has {Y.shape[0]} rows, design has {n}")
    if not np.all(np.isfinite(Y)):
        raise InvalidArgumentError("responses must be finite")
    return Y


def fit_huber_columns(
    Y,
    design: DesignMatrix,
    config: HuberConfig | None = None,
    taus=None,
    weights=None,
    strict: bool = True,
) -> HuberFitBatch:
    """Fit every column of ``Y`` against a shared design.

    ``taus`` overrides ``config.tau`` per column. With ``strict`` a column
    whose residuals leave fewer than ``min_active_fraction`` inside
    ``[-tau, tau]`` raises :class:`DegenerateScaleError`.
    """
    cfg = config or HuberConfig()
    G = design.G
    Y = _as_matrix(Y, design.n)
    m = Y.shape[1]
    if taus is not None:
        tau = np.broadcast_to(np.asarray(taus, dtype=float), (m,)).copy()
    elif cfg.tau is not None:
        tau = np.full(m, float(cfg.tau))
    else:
        tau = np.atleast_1d(practical_tau(Y, design, cfg.c, cfg.p)).astype(float)
    if np.any(~(tau > 0)):
        # zero residual sd under the rule: the OLS solution is exact
        zero = ~(tau > 0)
        tau[zero] = np.inf
    if weights is not None:
        weights = _as_matrix(weights, design.n)
        if weights.shape != Y.shape:
            raise InvalidArgumentError("weights must match the response shape")
        if np.any(weights.sum(axis=0) <= 0):
            raise InvalidArgumentError("weights must have a positive sum")
    if weights is None:
        _gram_solve(G)

    finite = np.isfinite(tau)
    theta = np.zeros((G.shape[1], m))
    iterations = np.zeros(m, dtype=int)
    converged = np.ones(m, dtype=bool)
    ok = np.ones(m, dtype=bool)
    if np.any(~finite):
        theta[:, ~finite] = _lstsq(G, Y[:, ~finite], weights if weights is None else weights[:, ~finite])
    if np.any(finite):
        th, it, conv, okf, _ = _scoring(
            Y[:, finite], G, tau[finite], cfg, None if weights is None else weights[:, finite]
        )
        theta[:, finite] = th
        iterations[finite] = it
        converged[finite] = conv
        ok[finite] = okf

    resid = _residuals(Y, G, theta)
    active = np.abs(resid) <= tau
    frac = active.mean(axis=0) if weights is None else (weights * active).sum(0) / weights.sum(0)
    obj = np.where(
        finite,
        _objective(resid, np.where(finite, tau, 1.0), weights),
        0.5 * ((resid**2) if weights is None else weights * resid**2).sum(axis=0),
    )
    if strict:
        if not np.all(ok):
            raise RankDeficientDesignError("weighted Gram matrix is singular")
        bad = np.flatnonzero(finite & (frac < cfg.min_active_fraction))
        if bad.size:
            raise DegenerateScaleError(
                f"only {frac[bad[0]]:.3g} of residuals lie inside [-tau, tau] for column {bad[0]}; "
                "increase tau (or the constant c)"
            )
    return HuberFitBatch(theta, tau, iterations, converged, resid, obj, frac, ok)


def _residuals(Y, G, theta):
    # y - mu - F b, column by column, so a single fit reproduces it exactly
    out = np.empty_like(Y)
    F = G[:, 1:]
    for j in range(Y.shape[1]):
        out[:, j] = Y[:, j] - theta[0, j] - F @ theta[1:, j]
    return out


def _lstsq(G, Y, weights=None):
    if weights is None:
        coef, *_ = np.linalg.lstsq(G, Y, rcond=None)
        return coef
    out = np.empty((G.shape[1], Y.shape[1]))
    for j in range(Y.shape[1]):
        sw = np.sqrt(np.clip(weights[:, j], 0, None))
        out[:, j], *_ = np.linalg.lstsq(G * sw[:, None], Y[:, j] * sw, rcond=None)
    return out


def fit_adaptive_huber(y, design: DesignMatrix, config: HuberConfig | None = None) -> HuberFit:
    """Minimize ``sum_i l_tau(y_i - mu - b^T f_i)`` by the method of scoring."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise InvalidArgumentError("y must be a vector")
    return fit_huber_columns(y, design, config).fit(0)


def huber_location(x, tau: float, config: HuberConfig | None = None) -> float:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise InvalidArgumentError("huber_location needs at least one observation")
    _check_tau(tau)
    if x.size == 1:
        return float(x[0])
    return float(huber_locations(x[:, None], tau, config)[0])


def huber_locations(X, taus, config: HuberConfig | None = None) -> np.ndarray:
    """Column-wise Huber location estimates (intercept-only scoring)."""
    X = np.asarray(X, dtype=float)
    design = DesignMatrix.intercept_only(X.shape[0])
    return fit_huber_columns(X, design, config, taus=taus).mu_hat.copy()


def ols_fit(y, design: DesignMatrix) -> HuberFit:
    """Least squares: the ``tau = infinity`` limit of the Huber fit."""
    y = _as_matrix(y, design.n)[:, 0]
    return ols_columns(y[:, None], design).fit(0)


def ols_columns(Y, design: DesignMatrix) -> HuberFitBatch:
    Y = _as_matrix(Y, design.n)
    _gram_solve(design.G)
    coef, *_ = np.linalg.lstsq(design.G, Y, rcond=None)
    resid = _residuals(Y, design.G, coef)
    m = Y.shape[1]
    return HuberFitBatch(
        theta=coef,
        tau_used=np.full(m, np.inf),
        iterations=np.zeros(m, dtype=int),
        converged=np.ones(m, dtype=bool),
        residuals=resid,
        objective_value=0.5 * (resid**2).sum(axis=0),
        active_fraction=np.ones(m),
    )


def cv_folds(n: int, k: int = 5) -> list[np.ndarray]:
    """Contiguous folds; the first ``n % k`` folds get one extra index."""
    return [np.asarray(f) for f in np.array_split(np.arange(n), k)]


def select_c(
    y,
    design: DesignMatrix,
    candidates=(0.5, 1.0, 2.0),
    p: int = 1,
    folds: int = 5,
    return_scores: bool = False,
):
    """Pick the tau constant ``c`` by k-fold cross-validation.

    Each candidate is scored by mean absolute prediction error on the held-out
    folds, with tau recomputed from the training part. Ties go to the larger c.
    """
    y = np.asarray(y, dtype=float)
    cands = sorted({float(c) for c in candidates})
    if not cands or any(c <= 0 for c in cands):
        raise InvalidArgumentError("candidates must be a non-empty set of positive reals")
    n = design.n
    if n // folds < 5:
        raise InsufficientDataError(f"{folds}-fold CV needs at least 5 observations per fold (n={n})")
    if len(cands) == 1:
        return (cands[0], {cands[0]: float("nan")}) if return_scores else cands[0]

    scores = {}
    for c in cands:
        errs = []
        for hold in cv_folds(n, folds):
            train = np.setdiff1d(np.arange(n), hold)
            dtrain = DesignMatrix(design.G[train])
            fit = fit_adaptive_huber(y[train], dtrain, HuberConfig(c=c, p=p))
            pred = design.G[hold] @ fit.theta
            errs.append(np.abs(y[hold] - pred))
        scores[c] = float(np.mean(np.concatenate(errs)))
    best = min(scores.values())
    chosen = max(c for c, s in scores.items() if s == best)
    return (chosen, scores) if return_scores else chosen
