"""Command-line entry point: ``robust-fdp <command> [options]``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import WeightScheme
from .datagen import FactorModelSpec, dumps_panel, gen_panel, load_panel
from .errors import RobustFDPError
from .experiments import (
    METHODS,
    ExperimentConfig,
    PanelAnalysis,
    figure1_csv,
    figure1_experiment,
    figure1_json,
    load_config,
    replications_csv,
    report_csv,
    report_json,
    resolve_threads,
    run_experiment,
)
from .rng import StreamFactory

log = logging.getLogger("robust_fdp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    p.add_argument("--config", type=Path, help="flat key = value experiment file")
    p.add_argument("--out", type=Path, help="output path (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--threads", type=int, help="worker threads (fallback: $ROBUST_FDP_THREADS, then 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="robust-fdp", description="Robust dependence-adjusted multiple testing.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a factor-model panel file")
    s.add_argument("--replication", type=int, default=0)

    for name, help_ in (("fit", "per-hypothesis estimates from a panel file"),
                        ("test", "rejection report for a panel file")):
        f = sub.add_parser(name, parents=[common], help=help_)
        f.add_argument("panel", type=Path)
        f.add_argument("--c", type=float, default=2.0, help="tau constant")
        if name == "fit":
            f.add_argument("--method", choices=("rd_a_normal", "rd_a_mom", "od_a"), default="rd_a_normal")
        else:
            f.add_argument("--method", choices=METHODS, default="rd_a_normal")
            f.add_argument("--alpha", type=float, default=0.10)
            f.add_argument("--lambda", dest="lam", type=float, default=0.5)
            f.add_argument("--B", type=int, default=500, help="bootstrap replicates")
            f.add_argument("--weights", choices=[w.value for w in WeightScheme],
                           default=WeightScheme.EXPONENTIAL_UNIT.value)

    sub.add_parser("bench", parents=[common], help="run a simulation study from a config file")

    g = sub.add_parser("figure1", parents=[common], help="robust vs sample-mean histogram data")
    g.add_argument("--n", type=int, default=30)
    g.add_argument("--count", type=int, default=10000)
    g.add_argument("--c", type=float, default=2.0)
    return parser


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        out.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {out}: {exc.strerror or exc}") from None


def _config(args, required: bool) -> ExperimentConfig | None:
    if args.config is None:
        if required:
            raise UsageError("--config is required")
        return None
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config)


def cmd_simulate(args) -> str:
    cfg = _config(args, required=False)
    spec = cfg.spec if cfg else FactorModelSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    return dumps_panel(gen_panel(spec, args.replication))


def _analysis(args):
    if not args.panel.is_file():
        raise UsageError(f"panel file not found: {args.panel}")
    panel = load_panel(args.panel)
    seed = args.seed if args.seed is not None else int(panel.spec.get("seed", 0))
    kw = {}
    if args.command == "test":
        kw = {"bootstrap_B": args.B, "weight_scheme": WeightScheme(args.weights)}
    return panel, PanelAnalysis(panel, args.c, streams=StreamFactory(seed), **kw)


def _num(x) -> str:
    return repr(float(x))


def cmd_fit(args) -> str:
    panel, analysis = _analysis(args)
    res = analysis.run(args.method)
    fits = res.fits
    K = panel.K
    rows = []
    for j in range(panel.p):
        rows.append({
            "j": j + 1,
            "mu_hat": float(fits.mu_hat[j]),
            **{f"b_{k + 1}": float(fits.b_hat[j, k]) for k in range(K)},
            "tau": float(fits.tau_used[j]),
            "iterations": int(fits.iterations[j]),
            "converged": bool(fits.converged[j]),
            "variance": float(res.variances[j]),
            "fallback": bool(res.fallback[j]),
            "statistic": float(res.stats.values[j]),
            "pvalue": float(res.pvalues[j]),
        })
    if args.format == "json":
        doc = {"method": args.method, "n": panel.n, "p": panel.p, "K": K, "rows": rows}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(rows[0]) if rows else ["j"]
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v
                    for v in r.values()])
    return buf.getvalue()


def cmd_test(args) -> str:
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    if not 0 <= args.lam < 1:
        raise UsageError("--lambda must lie in [0, 1)")
    panel, analysis = _analysis(args)
    res = analysis.run(args.method)
    out = res.reject(args.alpha, args.lam)
    rejected = set(out.rejected.tolist())
    stats = res.stats.values if res.stats is not None else None
    if args.format == "json":
        doc = {
            "method": args.method,
            "alpha": args.alpha,
            "lambda": args.lam,
            "pi0_hat": out.pi0_hat,
            "threshold": None if not np.isfinite(out.threshold) else out.threshold,
            "rejected": [j + 1 for j in sorted(rejected)],
            "statistics": None if stats is None else stats.tolist(),
            "pvalues": out.pvalues.tolist(),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    buf.write(f"# method={args.method} alpha={args.alpha:g} lambda={args.lam:g} "
              f"pi0_hat={out.pi0_hat:.6g} threshold={out.threshold:.6g} rejected={len(rejected)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["j", "statistic", "pvalue", "rejected"])
    for j in range(panel.p):
        w.writerow([j + 1, "" if stats is None else _num(stats[j]), _num(out.pvalues[j]),
                    "true" if j in rejected else "false"])
    return buf.getvalue()


def cmd_bench(args) -> str:
    cfg = _config(args, required=True)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    report = run_experiment(cfg, resolve_threads(args.threads))
    if args.out is not None:
        _emit(replications_csv(report), args.out.with_name(args.out.name + ".replications.csv"))
    return report_json(report) if args.format == "json" else report_csv(report)


def cmd_figure1(args) -> str:
    seed = 1 if args.seed is None else args.seed
    res = figure1_experiment(seed, args.n, args.count, args.c)
    return figure1_json(res) if args.format == "json" else figure1_csv(res)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "test": cmd_test, "bench": cmd_bench, "figure1": cmd_figure1}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        text = COMMANDS[args.command](args)
        _emit(text, args.out)
        return 0
    except UsageError as exc:
        msg = str(exc)
        if not msg.startswith("usage:"):
            msg = f"{parser.format_usage()}robust-fdp: error: {msg}"
        print(msg, file=sys.stderr)
        return 1
    except (RobustFDPError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"robust-fdp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
