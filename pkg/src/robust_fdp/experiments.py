"""Simulation runner: methods, replications, aggregation and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import WeightScheme, bootstrap_pvalues
from .datagen import Calibration, FactorModelSpec, Panel, gen_figure1_sample, gen_panel, read_key_values
from .errors import InvalidArgumentError, RobustFDPError
from .huber import DesignMatrix, HuberConfig, HuberFitBatch, fit_huber_columns, ols_columns
from .rng import StreamFactory
from .testing import (
    Metrics,
    RejectionOutcome,
    TestStatistics,
    bh_select,
    evaluate,
    naive_t_statistics,
    normal_pvalues,
    rejection_threshold,
    storey_pi0,
    test_statistics,
)
from .variance import adaptive_huber_variances, factor_cov, mom_variances_modified

log = logging.getLogger(__name__)

METHODS = ("rd_a_bootstrap", "rd_a_normal", "rd_a_mom", "od_a", "naive")
THREADS_ENV = "ROBUST_FDP_THREADS"
MAX_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class ExperimentConfig:
    spec: FactorModelSpec = field(default_factory=FactorModelSpec)
    methods: tuple[str, ...] = ("rd_a_normal", "od_a", "naive")
    alphas: tuple[float, ...] = (0.05, 0.10, 0.20)
    replications: int = 100
    lam: float = 0.5
    bootstrap_B: int = 500
    c: float = 2.0
    weight_scheme: str = WeightScheme.EXPONENTIAL_UNIT.value

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InvalidArgumentError(f"unknown methods {bad}; choose from {METHODS}")
        if any(not 0 < a < 1 for a in self.alphas):
            raise InvalidArgumentError("alphas must lie strictly inside (0, 1)")
        if self.replications < 1:
            raise InvalidArgumentError("replications must be >= 1")
        if not 0 <= self.lam < 1:
            raise InvalidArgumentError("lambda must lie in [0, 1)")
        if self.bootstrap_B < 1 or not self.c > 0:
            raise InvalidArgumentError("bootstrap_B must be >= 1 and c > 0")
        WeightScheme(self.weight_scheme)

    @property
    def seed(self) -> int:
        return self.spec.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, spec=replace(self.spec, seed=seed))

    def canonical(self) -> dict:
        d = {
            "spec": self.spec.echo(),
            "calibration": asdict(self.spec.calibration),
            "methods": list(self.methods),
            "alphas": list(self.alphas),
            "replications": self.replications,
            "lambda": self.lam,
            "bootstrap_B": self.bootstrap_B,
            "c": self.c,
            "weight_scheme": self.weight_scheme,
        }
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


SPEC_KEYS = {"p": int, "n": int, "K": int, "error_model": int, "loading_model": str, "pi1": float, "seed": int}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a flat ``key = value`` file.

    Recognised keys: ``p n K error_model loading_model pi1 signal_c seed
    calibration methods alphas replications lambda bootstrap_B c weight_scheme``.
    """
    kv = read_key_values(text)
    known = set(SPEC_KEYS) | {"signal_c", "calibration", "methods", "alphas", "replications", "lambda",
                              "bootstrap_B", "c", "weight_scheme"}
    unknown = sorted(set(kv) - known)
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {unknown}")
    try:
        spec_args = {k: cast(kv[k]) for k, cast in SPEC_KEYS.items() if k in kv}
        if kv.get("signal_c", "").strip() not in ("", "auto"):
            spec_args["signal_c"] = float(kv["signal_c"])
        if "calibration" in kv:
            path = Path(kv["calibration"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            spec_args["calibration"] = Calibration.loads(path.read_text())
        args = {}
        if "methods" in kv:
            args["methods"] = tuple(m.strip() for m in kv["methods"].split(",") if m.strip())
        if "alphas" in kv:
            args["alphas"] = tuple(float(a) for a in kv["alphas"].split(",") if a.strip())
        if "replications" in kv:
            args["replications"] = int(kv["replications"])
        if "lambda" in kv:
            args["lam"] = float(kv["lambda"])
        if "bootstrap_B" in kv:
            args["bootstrap_B"] = int(kv["bootstrap_B"])
        if "c" in kv:
            args["c"] = float(kv["c"])
        if "weight_scheme" in kv:
            args["weight_scheme"] = kv["weight_scheme"].strip()
    except ValueError as exc:
        raise InvalidArgumentError(f"bad config value: {exc}") from None
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read calibration file: {exc}") from None
    return ExperimentConfig(spec=FactorModelSpec(**spec_args), **args)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


# ----------------------------------------------------------------- methods


@dataclass
class MethodResult:
    method: str
    pvalues: np.ndarray
    stats: TestStatistics | None = None
    fits: HuberFitBatch | None = None
    variances: np.ndarray | None = None
    fallback: np.ndarray | None = None
    bootstrap_failed: int = 0

    def reject(self, alpha: float, lam: float) -> RejectionOutcome:
        pi0 = storey_pi0(self.pvalues, lam)
        if self.stats is not None:
            return rejection_threshold(self.stats, alpha, pi0, lam)
        # bootstrap calibration: no statistic scale, threshold left undefined
        rejected = bh_select(self.pvalues, alpha, pi0)
        return RejectionOutcome(math.nan, rejected, pi0, lam, alpha, self.pvalues)


class PanelAnalysis:
    """Runs the testing methods on one panel, sharing the Huber fits between them."""

    def __init__(self, panel: Panel, c: float = 2.0, bootstrap_B: int = 500,
                 weight_scheme=WeightScheme.EXPONENTIAL_UNIT, streams: StreamFactory | None = None,
                 replication: int = 0):
        self.panel = panel
        self.c = c
        self.bootstrap_B = bootstrap_B
        self.weight_scheme = weight_scheme
        self.streams = streams or StreamFactory(0)
        self.replication = replication
        self.design = DesignMatrix.from_factors(panel.F)
        self.sigma_f = factor_cov(panel.F)
        self._huber = None

    @property
    def huber(self) -> HuberFitBatch:
        if self._huber is None:
            cfg = HuberConfig(c=self.c, p=self.panel.p)
            self._huber = fit_huber_columns(self.panel.X, self.design, cfg)
        return self._huber

    def run(self, method: str) -> MethodResult:
        X, n, p = self.panel.X, self.panel.n, self.panel.p
        if method == "naive":
            stats = naive_t_statistics(X)
            return MethodResult(method, normal_pvalues(stats), stats)
        if method == "od_a":
            fits = ols_columns(X, self.design)
            vals, fb = adaptive_huber_variances(X, fits.mu_hat, fits.b_hat, self.sigma_f, gammas=np.inf, p=p)
            stats = test_statistics(fits.mu_hat, vals, n, "ols_dependence_adjusted")
            return MethodResult(method, normal_pvalues(stats), stats, fits, vals, fb)
        fits = self.huber
        if method == "rd_a_normal":
            vals, fb = adaptive_huber_variances(X, fits.mu_hat, fits.b_hat, self.sigma_f, c=self.c, p=p)
            stats = test_statistics(fits.mu_hat, vals, n, "adaptive_huber")
            return MethodResult(method, normal_pvalues(stats), stats, fits, vals, fb)
        if method == "rd_a_mom":
            vals, fb = mom_variances_modified(X, fits.b_hat, self.sigma_f, p=p)
            stats = test_statistics(fits.mu_hat, vals, n, "median_of_means")
            return MethodResult(method, normal_pvalues(stats), stats, fits, vals, fb)
        if method == "rd_a_bootstrap":
            res = bootstrap_pvalues(X, self.panel.F, fits, self.bootstrap_B, self.weight_scheme,
                                    self.streams, self.replication)
            return MethodResult(method, res.pvalues, None, fits, bootstrap_failed=res.failed)
        raise InvalidArgumentError(f"unknown method {method!r}")


# ----------------------------------------------------------------- running


@dataclass
class ReportRow:
    method: str
    alpha: float
    fdr: float
    fnr: float
    tpr: float
    se_fdr: float
    se_fnr: float
    se_tpr: float
    reps: int
    failed: int


@dataclass
class ReplicationRecord:
    replication: int
    method: str
    alpha: float
    fdp: float
    fnr: float
    tpr: float
    false_discoveries: int
    discoveries: int


@dataclass
class MetricsReport:
    rows: list[ReportRow]
    provenance: dict
    replications: list[ReplicationRecord] = field(default_factory=list)

    def row(self, method: str, alpha: float) -> ReportRow:
        for r in self.rows:
            if r.method == method and math.isclose(r.alpha, alpha):
                return r
        raise KeyError((method, alpha))


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else 1
    if threads < 1:
        raise InvalidArgumentError("threads must be >= 1")
    return threads


def run_replication(config: ExperimentConfig, rep: int) -> list[ReplicationRecord]:
    panel = gen_panel(config.spec, rep)
    analysis = PanelAnalysis(panel, config.c, config.bootstrap_B, WeightScheme(config.weight_scheme),
                             StreamFactory(config.seed), rep)
    truth = panel.truth
    out = []
    for method in config.methods:
        result = analysis.run(method)
        for alpha in config.alphas:
            m: Metrics = evaluate(result.reject(alpha, config.lam), truth)
            out.append(ReplicationRecord(rep, method, alpha, m.fdp, m.fnr, m.tpr, m.false_discoveries, m.discoveries))
    return out


def _safe_replication(config, rep):
    try:
        return run_replication(config, rep)
    except (RobustFDPError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.warning("replication %d failed: %s", rep, exc)
        return None


def run_experiment(config: ExperimentConfig, threads: int | None = None) -> MetricsReport:
    """Simulate ``config.replications`` panels and aggregate FDR, FNR and TPR.

    Output does not depend on ``threads``: every replication draws from its
    own index-derived streams and results are collected in index order.
    """
    threads = resolve_threads(threads)
    reps = range(config.replications)
    if threads == 1:
        results = [_safe_replication(config, r) for r in reps]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _safe_replication(config, r), reps))
    failed = sum(r is None for r in results)
    if failed > MAX_FAILURE_RATE * config.replications:
        raise RobustFDPError(f"{failed} of {config.replications} replications failed; aborting run")
    records = [rec for r in results if r is not None for rec in r]
    return aggregate(config, records, failed)


def aggregate(config: ExperimentConfig, records: list[ReplicationRecord], failed: int) -> MetricsReport:
    rows = []
    for method in config.methods:
        for alpha in config.alphas:
            sel = [r for r in records if r.method == method and r.alpha == alpha]
            k = len(sel)
            vals = {}
            for name in ("fdp", "fnr", "tpr"):
                arr = np.array([getattr(r, name) for r in sel], dtype=float)
                mean = float(arr.mean()) if k else math.nan
                se = float(arr.std(ddof=1) / math.sqrt(k)) if k > 1 else 0.0
                vals[name] = (mean, se)
            rows.append(ReportRow(method, alpha, vals["fdp"][0], vals["fnr"][0], vals["tpr"][0],
                                  vals["fdp"][1], vals["fnr"][1], vals["tpr"][1], k, failed))
    provenance = {
        "config_hash": config.hash(),
        "seed": config.seed,
        "build": f"robust_fdp {__version__}",
        "config": config.canonical(),
    }
    return MetricsReport(rows, provenance, records)


# ----------------------------------------------------------------- figure 1


@dataclass
class Figure1Result:
    edges: np.ndarray
    robust_counts: np.ndarray
    mean_counts: np.ndarray
    robust_outside: int
    mean_outside: int
    robust: np.ndarray = field(repr=False)
    sample_mean: np.ndarray = field(repr=False)
    seed: int = 0
    n: int = 30
    count: int = 10000
    c: float = 2.0


def figure1_edges(width: float = 0.25, limit: float = 6.0) -> np.ndarray:
    inner = np.linspace(-limit, limit, int(round(2 * limit / width)) + 1)
    return np.concatenate([[-np.inf], inner, [np.inf]])


def figure1_experiment(seed: int = 1, n: int = 30, count: int = 10000, c: float = 2.0, bound: float = 3.0) -> Figure1Result:
    """Histogram ``sqrt(n)`` times robust and plain means of normalised t_2.5 samples."""
    sample = gen_figure1_sample(n, count, StreamFactory(seed).generator("figure1"))
    design = DesignMatrix.intercept_only(n)
    fits = fit_huber_columns(sample.T, design, HuberConfig(c=c, p=count))
    robust = math.sqrt(n) * fits.mu_hat
    plain = math.sqrt(n) * sample.mean(axis=1)
    edges = figure1_edges()
    rc, _ = np.histogram(robust, edges)
    mc, _ = np.histogram(plain, edges)
    return Figure1Result(
        edges, rc, mc,
        int(np.count_nonzero(np.abs(robust) > bound)),
        int(np.count_nonzero(np.abs(plain) > bound)),
        robust, plain, seed, n, count, c,
    )


# ----------------------------------------------------------------- output

CSV_HEADER = ["method", "alpha", "fdr", "fnr", "tpr", "se_fdr", "se_fnr", "se_tpr", "reps", "failed"]


def fmt6(x: float) -> str:
    return f"{x:.6g}"


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        w.writerow([r.method, fmt6(r.alpha), fmt6(r.fdr), fmt6(r.fnr), fmt6(r.tpr),
                    fmt6(r.se_fdr), fmt6(r.se_fnr), fmt6(r.se_tpr), r.reps, r.failed])
    return buf.getvalue()


def report_json(report: MetricsReport) -> str:
    doc = {"rows": [asdict(r) for r in report.rows], "provenance": report.provenance}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> MetricsReport:
    doc = json.loads(text)
    return MetricsReport([ReportRow(**r) for r in doc["rows"]], doc["provenance"])


def replications_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replication", "method", "alpha", "fdp", "fnr", "tpr", "false_discoveries", "discoveries"])
    for r in report.replications:
        w.writerow([r.replication, r.method, repr(r.alpha), repr(r.fdp), repr(r.fnr), repr(r.tpr),
                    r.false_discoveries, r.discoveries])
    return buf.getvalue()


def _write(text: str, path) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_report(report: MetricsReport, fmt: str, path) -> None:
    if fmt == "csv":
        _write(report_csv(report), path)
    elif fmt == "json":
        _write(report_json(report), path)
    else:
        raise InvalidArgumentError(f"unknown format {fmt!r}")


def figure1_csv(res: Figure1Result) -> str:
    buf = io.StringIO()
    buf.write(f"# figure1 n={res.n} count={res.count} seed={res.seed} c={fmt6(res.c)}\n")
    buf.write(f"# outside[-3,3] robust={res.robust_outside} sample_mean={res.mean_outside}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left", "bin_right", "robust", "sample_mean"])
    for lo, hi, a, b in zip(res.edges[:-1], res.edges[1:], res.robust_counts, res.mean_counts):
        w.writerow([fmt6(lo), fmt6(hi), int(a), int(b)])
    return buf.getvalue()


def figure1_json(res: Figure1Result) -> str:
    doc = {
        "n": res.n, "count": res.count, "seed": res.seed, "c": res.c,
        "edges": [None if not np.isfinite(e) else float(e) for e in res.edges],
        "robust_counts": res.robust_counts.tolist(),
        "sample_mean_counts": res.mean_counts.tolist(),
        "outside": {"bound": 3.0, "robust": res.robust_outside, "sample_mean": res.mean_outside},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
