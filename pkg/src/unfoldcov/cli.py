"""Command line pipeline: scenario, fits over the tau grid, covariances, summaries.

Run configuration files are INI-style with a single ``[run]`` section::

    [run]
    scenario = double_gaussian        # shipped name or path to a .scenario file
    tau_grid = 0, 1e-6, 1e-5, 5e-5
    methods = inverse_hessian, frequentist_toys, hybrid_toys
    toys = 1000
    seed = 7
    output_dir = out
    n_mc = 1000000
    response_model = quadrature       # or mc
    theta_width = 0.01, 0.05, 0.02    # optional override of the constraint widths

Outputs land in ``<output_dir>/<scenario>/``; per-tau files live under
``tau_<value>/`` where ``<value>`` is the tau string exactly as written in
the config.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .covest import (
    DEFAULT_TOYS,
    METHODS,
    CovarianceEstimate,
    avg_global_correlation,
    avg_rel_error,
    chi2_ndf,
    cov_inverse_hessian,
    default_threads,
    relative_difference,
    run_frequentist_toys,
    run_hybrid_toys,
    sample_covariance,
)
from .errors import ConfigError, NumericalError, UnfoldError
from .fit import FitConfig, FitResult, maximize_phi
from .hist import write_histogram_csv, write_matrix_csv
from .objective import UnfoldingProblem
from .simkit import DEFAULT_N_MC, generate_scenario, load_scenario, make_model, truth_shape

logger = logging.getLogger(__name__)

DEFAULT_TAUS = ("0", "1e-6", "1e-5", "5e-5")
RESPONSE_MODELS = ("quadrature", "mc")
#: Nuisance finite-difference step (in widths) for the frozen-seed MC model.
MC_THETA_STEP = 0.1
FAILURE_MARKER = "FAILED"
SUMMARY_COLUMNS = ("scenario", "method", "tau", "avg_sigma_rel", "avg_global_corr", "chi2_ndf",
                   "T_used", "converged_fraction", "validity")
COMPARISONS = (("hybrid_toys", "hybrid_vs_frequentist"), ("inverse_hessian", "hessian_vs_frequentist"))

_RUN_KEYS = {"scenario", "tau_grid", "methods", "toys", "seed", "output_dir", "n_mc",
             "response_model", "theta_width"}
_REQUIRED = {"scenario"}


@dataclass
class RunConfig:
    scenario: str
    tau_labels: tuple = DEFAULT_TAUS
    methods: tuple = METHODS
    toys: int = DEFAULT_TOYS
    seed: int = 0
    output_dir: str = "out"
    n_mc: int = DEFAULT_N_MC
    response_model: str = "quadrature"
    theta_width: Optional[tuple] = None

    def __post_init__(self):
        self.tau_labels = tuple(str(t).strip() for t in self.tau_labels)
        self.methods = tuple(self.methods)
        if not self.tau_labels:
            raise ConfigError("tau_grid must not be empty")
        taus = self.tau_grid
        if np.any(~np.isfinite(taus)) or np.any(taus < 0):
            raise ConfigError(f"tau_grid entries must be >= 0, got {list(self.tau_labels)}")
        if np.any(np.diff(taus) <= 0):
            raise ConfigError("tau_grid must be strictly increasing")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if self.toys < 2:
            raise ConfigError("toys must be at least 2")
        if self.n_mc < 1:
            raise ConfigError("n_mc must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.response_model not in RESPONSE_MODELS:
            raise ConfigError(f"unknown response_model {self.response_model!r}")
        if self.theta_width is not None:
            self.theta_width = tuple(float(w) for w in self.theta_width)
            if any(not w > 0 for w in self.theta_width):
                raise ConfigError("theta_width entries must be positive")

    @property
    def tau_grid(self) -> np.ndarray:
        try:
            return np.array([float(t) for t in self.tau_labels])
        except ValueError as exc:
            raise ConfigError(f"malformed tau_grid: {exc}") from exc

    def canonical(self) -> dict:
        """Settings that determine the outputs (the output location does not)."""
        return {
            "scenario": self.scenario, "tau_grid": list(self.tau_labels),
            "methods": list(self.methods), "toys": self.toys, "seed": self.seed,
            "n_mc": self.n_mc, "response_model": self.response_model,
            "theta_width": None if self.theta_width is None else list(self.theta_width),
        }

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _split(text: str) -> list:
    return [v for v in text.replace(",", " ").split() if v]


def _integer(text: str, key: str) -> int:
    try:
        value = float(text)
    except ValueError as exc:
        raise ConfigError(f"malformed value for {key}: {text!r}") from exc
    if value != int(value):
        raise ConfigError(f"{key} must be an integer, got {text!r}")
    return int(value)


def parse_config(path) -> RunConfig:
    """Read and validate a run configuration file.

    Relative scenario paths are resolved against the config file's folder.

    Raises:
        ConfigError: unreadable file, missing or unknown key, malformed value.
    """
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with path.open() as fh:
            cp.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not cp.has_section("run"):
        raise ConfigError(f"{path}: missing [run] section")
    sec = dict(cp.items("run"))
    for key in sec:
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown key: {key}")
    for key in sorted(_REQUIRED - sec.keys()):
        raise ConfigError(f"{path}: missing required key {key}")

    scenario = sec["scenario"].strip()
    if scenario not in ("double_gaussian", "exponential"):
        candidate = Path(scenario)
        if not candidate.is_absolute():
            candidate = path.parent / candidate
        scenario = str(candidate)
    kw = {"scenario": scenario}
    if "tau_grid" in sec:
        kw["tau_labels"] = tuple(_split(sec["tau_grid"]))
    if "methods" in sec:
        kw["methods"] = tuple(_split(sec["methods"]))
    if "toys" in sec:
        kw["toys"] = _integer(sec["toys"], "toys")
    if "seed" in sec:
        kw["seed"] = _integer(sec["seed"], "seed")
    if "n_mc" in sec:
        kw["n_mc"] = _integer(sec["n_mc"], "n_mc")
    if "output_dir" in sec:
        kw["output_dir"] = sec["output_dir"].strip()
    if "response_model" in sec:
        kw["response_model"] = sec["response_model"].strip()
    if "theta_width" in sec:
        try:
            kw["theta_width"] = tuple(float(v) for v in _split(sec["theta_width"]))
        except ValueError as exc:
            raise ConfigError(f"malformed value for theta_width: {sec['theta_width']!r}") from exc
    return RunConfig(**kw)


# Pipeline ----------------------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    tau_label: str
    covariance: CovarianceEstimate
    summary: dict
    files: dict = field(default_factory=dict)


@dataclass
class RunReport:
    """Everything a run produced; paths are relative to ``root``."""

    scenario: str
    root: Path
    config: RunConfig
    fits: dict = field(default_factory=dict)
    results: list = field(default_factory=list)
    comparisons: dict = field(default_factory=dict)
    truth: Optional[np.ndarray] = None
    files: dict = field(default_factory=dict)

    def result(self, method: str, tau_label: str) -> MethodResult:
        for r in self.results:
            if r.method == method and r.tau_label == tau_label:
                return r
        raise KeyError((method, tau_label))

    def summary_rows(self) -> list:
        return [r.summary for r in self.results]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "provenance": {"seed": self.config.seed, "config_hash": self.config.digest(),
                           "version": __version__},
            "config": self.config.canonical(),
            "files": self.files,
            "fits": {t: f.to_dict() for t, f in self.fits.items()},
            "results": [{"method": r.method, "tau": r.tau_label, "files": r.files, "summary": r.summary}
                        for r in self.results],
            "comparisons": self.comparisons,
        }


def _fmt(x) -> str:
    return repr(float(x))


def _safe_stat(fn, *args) -> float:
    try:
        return fn(*args)
    except (UnfoldError, ValueError) as exc:
        logger.warning("summary statistic %s unavailable: %s", fn.__name__, exc)
        return float("nan")


def summarize(scenario: str, tau_label: str, cov: CovarianceEstimate, mu_hat, mu_true) -> dict:
    return {
        "scenario": scenario,
        "method": cov.method,
        "tau": tau_label,
        "avg_sigma_rel": _safe_stat(avg_rel_error, cov, mu_hat),
        "avg_global_corr": _safe_stat(avg_global_correlation, cov),
        "chi2_ndf": _safe_stat(chi2_ndf, mu_hat, mu_true, cov),
        "T_used": cov.n_toys_used,
        "converged_fraction": cov.converged_fraction,
        "validity": "ok" if cov.valid else "regularized: RCB assumptions violated",
    }


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_vector_csv(path: Path, columns: dict) -> None:
    names = list(columns)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin"] + names)
        for i, row in enumerate(zip(*columns.values())):
            w.writerow([i] + [_fmt(v) for v in row])


def emit_summary(reports, path) -> Path:
    """Write one CSV row per (scenario, method, tau)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rep in reports:
            for row in rep.summary_rows():
                w.writerow([row[c] if isinstance(row[c], str) else
                            (str(row[c]) if isinstance(row[c], int) else _fmt(row[c]))
                            for c in SUMMARY_COLUMNS])
    return path


class _Stage:
    """Context label used in diagnostics of a failing pipeline step."""

    def __init__(self, scenario):
        self.scenario = scenario
        self.tau = None
        self.method = None

    def describe(self) -> str:
        parts = [f"scenario={self.scenario}"]
        if self.tau is not None:
            parts.append(f"tau={self.tau}")
        if self.method is not None:
            parts.append(f"method={self.method}")
        return ", ".join(parts)


def prepare(config: RunConfig):
    """Scenario, generated data, response model and fit settings of a run."""
    spec = load_scenario(config.scenario)
    nuisance = spec.nuisance
    if config.theta_width is not None:
        if len(config.theta_width) != nuisance.size:
            raise ConfigError(f"theta_width needs {nuisance.size} values")
        nuisance = type(nuisance)(nuisance.values, nuisance.aux, config.theta_width)
    spec = spec.replace(seed=config.seed, nuisance=nuisance)
    data = generate_scenario(spec, n_mc=config.n_mc, min_events=min(config.n_mc, DEFAULT_N_MC))
    model = make_model(spec, config.response_model, config.n_mc)
    return spec, data, model


def make_problem(spec, data, model, config: RunConfig, tau: float) -> UnfoldingProblem:
    kw = {}
    if config.response_model == "mc":
        kw["theta_step"] = MC_THETA_STEP
    return UnfoldingProblem(data.observed, model.response, model.background, spec.nuisance, tau,
                            truth_shape(spec), theta_bounds=model.theta_bounds(), **kw)


def run_scenario(config: RunConfig, threads: int = 1, stages=("response", "fit", "covariance")) -> RunReport:
    """Run the pipeline for one scenario and write every output file.

    ``stages`` limits the work for stagewise debugging: ``response`` writes
    the generated inputs, ``fit`` adds the nominal fits and ``covariance``
    the estimators, relative differences and summary table.

    Raises:
        UnfoldError: any failure, after a failure marker is written.
    """
    stage = _Stage(Path(config.scenario).stem if config.scenario.endswith(".scenario") else config.scenario)
    out = Path(config.output_dir)
    try:
        spec, data, model = prepare(config)
    except UnfoldError as exc:
        _mark_failure(out / stage.scenario, stage, exc)
        raise
    stage.scenario = spec.name
    root = out / spec.name
    root.mkdir(parents=True, exist_ok=True)
    marker = root / FAILURE_MARKER
    if marker.exists():
        marker.unlink()
    report = RunReport(spec.name, root, config, truth=data.truth.contents)
    try:
        _run(config, spec, data, model, report, stage, threads, stages)
    except UnfoldError as exc:
        _mark_failure(root, stage, exc)
        raise
    return report


def _mark_failure(root: Path, stage: _Stage, exc: Exception) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / FAILURE_MARKER).write_text(f"{stage.describe()}: {type(exc).__name__}: {exc}\n")
    exc.args = (f"[{stage.describe()}] {exc}",)


def _run(config, spec, data, model, report, stage, threads, stages):
    root = report.root
    inputs = {"truth": "truth.csv", "observed": "observed.csv",
              "response": "response.csv", "background": "background.csv"}
    write_histogram_csv(data.truth, root / inputs["truth"])
    write_histogram_csv(data.observed, root / inputs["observed"])
    write_matrix_csv(data.response.entries, root / inputs["response"])
    write_histogram_csv(data.background, root / inputs["background"])
    report.files.update(inputs)
    if "fit" not in stages:
        _write_json(report.to_dict(), root / "report.json")
        return

    fit_config = FitConfig()
    for label, tau in zip(config.tau_labels, config.tau_grid):
        stage.tau, stage.method = label, None
        tau_dir = root / f"tau_{label}"
        tau_dir.mkdir(exist_ok=True)
        problem = make_problem(spec, data, model, config, float(tau))
        fit = maximize_phi(problem, fit_config)
        if not fit.converged:
            raise NumericalError(f"nominal fit did not converge: {fit.message}")
        fit.to_json(tau_dir / "fit.json")
        report.fits[label] = fit
        if "covariance" not in stages:
            continue

        covs = {}
        for method in config.methods:
            stage.method = method
            cov = _estimate(method, problem, fit, config, fit_config, threads, spec)
            covs[method] = cov
            mdir = tau_dir / method
            mdir.mkdir(exist_ok=True)
            rel = f"tau_{label}/{method}"
            files = {"covariance": f"{rel}/covariance.csv"}
            write_matrix_csv(cov.matrix, root / files["covariance"])
            if cov.full_matrix is not None:
                files["covariance_full"] = f"{rel}/covariance_full.csv"
                write_matrix_csv(cov.full_matrix, root / files["covariance_full"])
            if method != "inverse_hessian":
                files["toy_mean"] = f"{rel}/toy_mean.csv"
                _write_vector_csv(root / files["toy_mean"], {
                    "mu_hat": fit.mu_hat, "toy_mean": cov.toy_mean,
                    "toy_mean_minus_truth": cov.toy_mean - data.truth.contents})
            summary = summarize(spec.name, label, cov, fit.mu_hat, data.truth.contents)
            report.results.append(MethodResult(method, label, cov, summary, files))
        stage.method = None
        if "frequentist_toys" in covs:
            for other, name in COMPARISONS:
                if other in covs:
                    path = f"tau_{label}/reldiff_{name}.csv"
                    write_matrix_csv(relative_difference(covs[other], covs["frequentist_toys"]), root / path)
                    report.comparisons.setdefault(label, {})[name] = path

    if "covariance" in stages:
        emit_summary([report], root / "summary.csv")
        report.files["summary"] = "summary.csv"
    _write_json(report.to_dict(), root / "report.json")


def _estimate(method, problem, fit, config, fit_config, threads, spec) -> CovarianceEstimate:
    if method == "inverse_hessian":
        return cov_inverse_hessian(problem, fit)
    if method == "frequentist_toys":
        ens = run_frequentist_toys(problem, fit, config.toys, config.seed, fit_config, threads)
    else:
        ens = run_hybrid_toys(problem, fit, config.toys, config.seed, fit_config, threads,
                              theta_check=spec.smear_positive)
    return sample_covariance(ens)


# Command line -------------------------------------------------------------------


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    kw = config.canonical()
    kw["tau_labels"] = tuple(kw.pop("tau_grid"))
    kw["output_dir"] = config.output_dir
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.out is not None:
        kw["output_dir"] = args.out
    if getattr(args, "methods", None):
        kw["methods"] = tuple(_split(args.methods))
    if getattr(args, "toys", None) is not None:
        kw["toys"] = args.toys
    return RunConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unfoldcov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, toys=True):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes for toys (default: available cores)")
        p.add_argument("-v", "--verbose", action="store_true")
        if toys:
            p.add_argument("--methods", help="comma-separated subset of " + ", ".join(METHODS))
            p.add_argument("--toys", type=int, help="pseudo-experiments per toy method")

    common(sub.add_parser("run", help="full pipeline"))
    common(sub.add_parser("gen-response", help="generate data, response and background only"), toys=False)
    common(sub.add_parser("fit", help="nominal fits over the tau grid"), toys=False)
    common(sub.add_parser("toys", help="toy-based covariances only"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _apply_overrides(parse_config(args.config), args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        threads = default_threads() if args.threads is None else args.threads
        if args.command == "gen-response":
            stages = ("response",)
        elif args.command == "fit":
            stages = ("response", "fit")
        else:
            stages = ("response", "fit", "covariance")
        if args.command == "toys":
            methods = tuple(m for m in config.methods if m != "inverse_hessian")
            if not methods:
                raise ConfigError("no toy method selected")
            kw = config.canonical()
            kw["tau_labels"] = tuple(kw.pop("tau_grid"))
            kw.update(methods=methods, output_dir=config.output_dir)
            config = RunConfig(**kw)
        report = run_scenario(config, threads=threads, stages=stages)
    except UnfoldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(report.root / "report.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
