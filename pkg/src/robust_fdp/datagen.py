"""Synthetic factor-model panels ``X_ij = mu_j + b_j^T f_i + u_ij``.

Error models 1-4 are the headline simulation designs, 5-8 the additional
ones. All draws come from index-derived Philox streams so a panel is fully
determined by ``(seed, replication)``.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import InvalidArgumentError
from .rng import StreamFactory

ERROR_MODELS = tuple(range(1, 9))
LOADING_MODELS = ("uniform_appendix", "calibrated_gaussian")

WEIBULL_SHAPE = 0.75
WEIBULL_SCALE = 0.75
WEIBULL_MEAN = WEIBULL_SCALE * gamma_fn(1.0 + 1.0 / WEIBULL_SHAPE)
LOGNORMAL_MEAN = math.exp(0.5)


@dataclass(frozen=True)
class Calibration:
    """Loading and factor distribution parameters for the Gaussian loading model.

    The shipped defaults are plausible placeholders for a three-factor equity
    model. They are not fitted to any dataset.
    """

    mu_B: tuple[float, ...]
    Sigma_B: tuple[tuple[float, ...], ...]
    Sigma_f: tuple[tuple[float, ...], ...]

    @classmethod
    def default(cls, K: int = 3) -> "Calibration":
        if K == 3:
            return cls(
                mu_B=(0.0047, 0.0007, -1.8078),
                Sigma_B=((0.0767, -0.00004, 0.0087), (-0.00004, 0.0841, 0.0013), (0.0087, 0.0013, 0.1649)),
                Sigma_f=((1.0037, 0.0011, -0.0009), (0.0011, 0.9999, 0.0042), (-0.0009, 0.0042, 0.9973)),
            )
        eye = tuple(tuple(float(i == j) for j in range(K)) for i in range(K))
        return cls(mu_B=(0.0,) * K, Sigma_B=tuple(tuple(0.1 * v for v in r) for r in eye), Sigma_f=eye)

    @property
    def K(self) -> int:
        return len(self.mu_B)

    def arrays(self):
        K = len(self.mu_B)
        mu = np.array(self.mu_B, dtype=float)
        if K == 0:
            return mu, np.zeros((0, 0)), np.zeros((0, 0))
        return mu, np.array(self.Sigma_B, dtype=float), np.array(self.Sigma_f, dtype=float)

    def validate(self) -> None:
        try:
            mu, SB, Sf = self.arrays()
        except ValueError:
            raise InvalidArgumentError("calibration matrices must be K x K") from None
        K = mu.size
        if SB.shape != (K, K) or Sf.shape != (K, K):
            raise InvalidArgumentError("calibration matrices must be K x K")
        for name, M in (("Sigma_B", SB), ("Sigma_f", Sf)):
            if K and (not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0):
                raise InvalidArgumentError(f"{name} must be symmetric positive definite")

    def dumps(self) -> str:
        def vec(v):
            return ", ".join(repr(float(x)) for x in v)

        def mat(m):
            return "; ".join(vec(r) for r in m)

        return (
            "# factor-model calibration (flat key = value; matrix rows separated by ';')\n"
            f"mu_B = {vec(self.mu_B)}\n"
            f"Sigma_B = {mat(self.Sigma_B)}\n"
            f"Sigma_f = {mat(self.Sigma_f)}\n"
        )

    @classmethod
    def loads(cls, text: str) -> "Calibration":
        kv = read_key_values(text)
        try:
            cal = cls(
                mu_B=_parse_vector(kv["mu_B"]),
                Sigma_B=_parse_matrix(kv["Sigma_B"]),
                Sigma_f=_parse_matrix(kv["Sigma_f"]),
            )
        except KeyError as exc:
            raise InvalidArgumentError(f"calibration is missing key {exc.args[0]}") from None
        cal.validate()
        return cal


def read_key_values(text: str) -> dict[str, str]:
    """Parse a flat ``key = value`` file (``#`` comments allowed)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise InvalidArgumentError(f"malformed key-value file: {exc}") from None
    return dict(parser["root"])


def _parse_vector(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _parse_matrix(s: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_parse_vector(r) for r in s.split(";") if r.strip())


def default_signal_c(error_model: int) -> float:
    return 3.0 if error_model == 3 else 2.0


@dataclass(frozen=True)
class FactorModelSpec:
    p: int = 500
    n: int = 100
    K: int = 3
    loading_model: str = "uniform_appendix"
    error_model: int = 1
    pi1: float = 0.25
    signal_c: float | None = None
    seed: int = 0
    calibration: Calibration | None = None

    def __post_init__(self):
        if self.p < 1 or self.n < 2 or self.K < 0:
            raise InvalidArgumentError("need p >= 1, n >= 2, K >= 0")
        if self.loading_model not in LOADING_MODELS:
            raise InvalidArgumentError(f"unknown loading model {self.loading_model!r}")
        if self.error_model not in ERROR_MODELS:
            raise InvalidArgumentError(f"error_model must be one of 1..8, got {self.error_model}")
        if not 0 <= self.pi1 <= 1:
            raise InvalidArgumentError("pi1 must lie in [0, 1]")
        if self.signal_c is not None and self.signal_c < 0:
            raise InvalidArgumentError("signal_c must be non-negative")
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")
        cal = self.calibration or Calibration.default(self.K)
        if cal.K != self.K:
            raise InvalidArgumentError(f"calibration is for K={cal.K}, spec has K={self.K}")
        cal.validate()
        object.__setattr__(self, "calibration", cal)

    @property
    def effective_signal_c(self) -> float:
        return default_signal_c(self.error_model) if self.signal_c is None else float(self.signal_c)

    @property
    def signal(self) -> float:
        return math.sqrt(self.effective_signal_c * math.log(self.p) / self.n)

    @property
    def n_alternatives(self) -> int:
        return int(math.floor(self.pi1 * self.p + 1e-9))

    def echo(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "calibration"}
        out["signal_c"] = self.effective_signal_c
        return out


@dataclass
class Panel:
    X: np.ndarray
    F: np.ndarray
    mu_true: np.ndarray
    spec: dict = field(default_factory=dict)

    @property
    def truth(self) -> np.ndarray:
        """True where the null hypothesis ``mu_j = 0`` holds."""
        return self.mu_true == 0

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.F.shape[1]


def gen_sigma_u(p: int, rng: np.random.Generator) -> np.ndarray:
    """Block-diagonal equicorrelation matrix with 4x4 blocks, ``rho ~ U[0, 0.5]``.

    A trailing block of size ``p mod 4`` uses the same construction.
    """
    S = np.zeros((p, p))
    for start in range(0, p, 4):
        stop = min(start + 4, p)
        rho = rng.uniform(0.0, 0.5)
        S[start:stop, start:stop] = rho
    np.fill_diagonal(S, 1.0)
    return S


def _gaussian(chol, n, rng):
    return rng.standard_normal((n, chol.shape[0])) @ chol.T


def _mvt(chol, n, df, rng):
    z = _gaussian(chol, n, rng)
    chi2 = rng.chisquare(df, size=n)
    return z * np.sqrt(df / chi2)[:, None]


def _weibull(shape, n, p, rng):
    return WEIBULL_SCALE * rng.weibull(WEIBULL_SHAPE, size=(n, p))


def gen_errors(model: int, sigma_u, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. error vectors from error model 1-8."""
    if model not in ERROR_MODELS:
        raise InvalidArgumentError(f"unknown error model {model!r}")
    sigma_u = np.asarray(sigma_u, dtype=float)
    p = sigma_u.shape[0]
    try:
        L = np.linalg.cholesky(sigma_u)
    except np.linalg.LinAlgError:
        raise InvalidArgumentError("Sigma_u must be positive definite") from None

    if model == 1:
        return _gaussian(L, n, rng)
    if model == 2:
        return _mvt(L, n, 2.5, rng) / math.sqrt(5.0)
    if model == 3:
        u_n = _gaussian(L, n, rng)
        u_ln = np.exp(_gaussian(L, n, rng))
        return 0.5 * u_n + 0.5 * (u_ln - LOGNORMAL_MEAN)
    if model == 4:
        u_t = _mvt(L, n, 4.0, rng)
        u_w = _weibull(WEIBULL_SHAPE, n, p, rng)
        return 0.25 * u_t + 0.75 * (u_w - WEIBULL_MEAN)
    if model == 5:
        return _mvt(L, n, 4.0, rng) / math.sqrt(2.0)

    u1 = _mvt(L, n, 4.0, rng) / math.sqrt(2.0)
    if model == 6:
        prob = 0.6
        other = 0.25 * np.exp(_gaussian(L, n, rng)) - 0.25 * np.exp(_gaussian(L, n, rng))
    elif model == 7:
        prob = 0.25
        other = 0.5 * _weibull(WEIBULL_SHAPE, n, p, rng) - 0.5 * _weibull(WEIBULL_SHAPE, n, p, rng)
    else:
        prob = 0.9
        other = _gaussian(L, n, rng)
    pick = rng.random(n) < prob
    return np.where(pick[:, None], u1, other)


def gen_loadings(spec: FactorModelSpec, rng: np.random.Generator) -> np.ndarray:
    p, K = spec.p, spec.K
    if spec.loading_model == "uniform_appendix":
        B = np.empty((p, K))
        for k in range(K):
            lo, hi = (-2.0, -1.0) if k % 2 == 1 else (0.5, 1.5)
            B[:, k] = rng.uniform(lo, hi, size=p)
        return B
    mu_B, Sigma_B, _ = spec.calibration.arrays()
    return rng.multivariate_normal(mu_B, Sigma_B, size=p, method="cholesky")


def gen_panel(spec: FactorModelSpec, replication: int = 0) -> Panel:
    streams = StreamFactory(spec.seed)
    _, _, Sigma_f = spec.calibration.arrays()
    B = gen_loadings(spec, streams.generator("loadings", replication))
    if spec.K:
        F = streams.generator("factors", replication).multivariate_normal(
            np.zeros(spec.K), Sigma_f, size=spec.n, method="cholesky"
        )
    else:
        F = np.zeros((spec.n, 0))
    sigma_u = gen_sigma_u(spec.p, streams.generator("sigma_u", replication))
    U = gen_errors(spec.error_model, sigma_u, spec.n, streams.generator("errors", replication))
    mu = np.zeros(spec.p)
    mu[: spec.n_alternatives] = spec.signal
    X = mu + F @ B.T + U
    echo = spec.echo()
    echo["replication"] = replication
    return Panel(X, F, mu, echo)


def gen_figure1_sample(n: int = 30, count: int = 10000, rng: np.random.Generator | None = None) -> np.ndarray:
    """``count x n`` draws of ``t_{2.5} / sqrt(5)`` (unit variance)."""
    rng = rng or StreamFactory(0).generator("figure1")
    return rng.standard_t(2.5, size=(count, n)) / math.sqrt(5.0)


# ---------------------------------------------------------------- panel files

PANEL_MAGIC = "#robust_fdp panel v1"


def _row(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def dumps_panel(panel: Panel) -> str:
    out = io.StringIO()
    out.write(f"{PANEL_MAGIC}\n")
    out.write(f"#shape n={panel.n} p={panel.p} K={panel.K}\n")
    if panel.spec:
        out.write("#spec " + " ".join(f"{k}={v}" for k, v in panel.spec.items()) + "\n")
    out.write("[hypotheses]\nj,mu_true\n")
    for j, m in enumerate(panel.mu_true, start=1):
        out.write(f"{j},{float(m)!r}\n")
    out.write("[X]\n")
    for row in panel.X:
        out.write(_row(row) + "\n")
    out.write("[F]\n")
    for row in panel.F:
        out.write(_row(row) + "\n")
    return out.getvalue()


def save_panel(panel: Panel, path) -> None:
    Path(path).write_text(dumps_panel(panel))


def loads_panel(text: str) -> Panel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != PANEL_MAGIC:
        raise InvalidArgumentError("not a robust_fdp panel file")
    spec: dict = {}
    sections: dict[str, list[str]] = {}
    current = None
    for line in lines[1:]:
        if line.startswith("#spec "):
            for tok in line[len("#spec "):].split():
                k, _, v = tok.partition("=")
                spec[k] = _coerce(v)
        elif line.startswith("#"):
            continue
        elif line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None and line:
            sections[current].append(line)
    try:
        hyp = sections["hypotheses"][1:]
        mu = np.array([float(r.split(",")[1]) for r in hyp])
        X = np.array([[float(v) for v in r.split(",")] for r in sections["X"]])
        F_rows = sections["F"]
    except (KeyError, IndexError, ValueError) as exc:
        raise InvalidArgumentError(f"malformed panel file: {exc}") from None
    F = np.array([[float(v) for v in r.split(",")] for r in F_rows]) if F_rows and F_rows[0] else np.zeros((X.shape[0], 0))
    if X.shape[1] != mu.size or F.shape[0] != X.shape[0]:
        raise InvalidArgumentError("panel sections have inconsistent shapes")
    return Panel(X, F, mu, spec)


def load_panel(path) -> Panel:
    return loads_panel(Path(path).read_text())


def _coerce(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    if v == "None":
        return None
    return v


def spec_with(spec: FactorModelSpec, **changes) -> FactorModelSpec:
    return replace(spec, **changes)
