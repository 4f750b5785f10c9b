"""Covariance estimators for the unfolded spectrum and comparison statistics.

Three estimators are provided:

* :func:`cov_inverse_hessian`: ``(-H)^-1`` of the objective at its maximum;
  only meaningful without regularization.
* :func:`run_frequentist_toys`: pseudo-data drawn from the fitted model,
  auxiliary measurements redrawn around the fitted nuisances, full refit.
* :func:`run_hybrid_toys`: nuisances drawn from their prior, pseudo-data from
  the resulting model, unfolded with the nominal machinery.

Each toy draws from its own random stream keyed by (seed, method, index), so
ensembles do not depend on the order or number of workers.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NumericalError, ToyLossError
from .fit import FitConfig, FitResult, maximize_phi
from .objective import ParamVector, UnfoldingProblem, hessian_phi, nu_at, theta_bounds
from .simkit import rng_stream

logger = logging.getLogger(__name__)

METHODS = ("inverse_hessian", "frequentist_toys", "hybrid_toys")
DEFAULT_TOYS = 1000
MAX_TOY_LOSS = 0.05
MAX_REDRAWS = 100
COND_LIMIT = 1e12
SYMMETRY_TOL = 1e-10


@dataclass
class CovarianceEstimate:
    """Covariance of the truth-bin estimators.

    ``valid`` is False for the inverse Hessian of a regularized objective,
    where the bound it relies on does not hold.
    """

    matrix: np.ndarray
    method: str
    n_toys_used: int = 0
    tau: float = 0.0
    valid: bool = True
    n_toys_requested: int = 0
    full_matrix: Optional[np.ndarray] = field(default=None, repr=False)
    toy_mean: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("covariance must be a square matrix")

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def converged_fraction(self) -> float:
        if self.n_toys_requested == 0:
            return 1.0
        return self.n_toys_used / self.n_toys_requested

    def is_symmetric(self, tol: float = SYMMETRY_TOL) -> bool:
        scale = max(float(np.max(np.abs(self.matrix))), np.finfo(float).tiny)
        return bool(np.max(np.abs(self.matrix - self.matrix.T)) <= tol * scale)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())


@dataclass
class ToyEnsemble:
    """Per-toy estimates, ordered by toy index.

    ``mu`` and ``theta`` hold only converged toys; ``converged`` has one flag
    per generated toy.
    """

    mu: np.ndarray
    theta: np.ndarray
    converged: np.ndarray
    mode: str
    tau: float = 0.0

    @property
    def n_requested(self) -> int:
        return int(self.converged.size)

    @property
    def n_used(self) -> int:
        return int(self.mu.shape[0])

    @property
    def estimates(self) -> np.ndarray:
        """Stacked ``(mu, theta)`` per retained toy."""
        return np.hstack([self.mu, self.theta])

    def mean(self) -> np.ndarray:
        return self.mu.mean(axis=0)


# Inverse Hessian -------------------------------------------------------------


def _invert_negative_definite(H: np.ndarray) -> np.ndarray:
    """``(-H)^-1`` after diagonal equilibration.

    Raises:
        NumericalError: if ``-H`` is not positive definite or is ill-conditioned.
    """
    A = -np.asarray(H, dtype=float)
    d = np.diag(A)
    if np.any(d <= 0) or not np.all(np.isfinite(A)):
        k = int(np.argmin(d))
        raise NumericalError(f"-H is not positive definite: diagonal entry {k} is {d[k]!r}")
    s = 1.0 / np.sqrt(d)
    B = A * np.outer(s, s)
    B = 0.5 * (B + B.T)
    eig = np.linalg.eigvalsh(B)
    if eig[0] <= 0:
        raise NumericalError(f"-H is not positive definite: smallest eigenvalue {eig[0]!r} (equilibrated)")
    cond = eig[-1] / eig[0]
    if cond > COND_LIMIT:
        raise NumericalError(f"-H is singular: condition number {cond:.3g} > {COND_LIMIT:.0e}")
    inv = np.linalg.solve(B, np.eye(B.shape[0]))
    inv = inv * np.outer(s, s)
    return 0.5 * (inv + inv.T)


def cov_inverse_hessian(problem: UnfoldingProblem, fit: FitResult) -> CovarianceEstimate:
    """Inverse of ``-H`` at the maximum, restricted to the ``mu`` block.

    The full ``(M+K)`` matrix is inverted first, so the result is marginal
    over the nuisances.

    Raises:
        NumericalError: if the fit did not converge or ``-H`` is not
            positive definite.
    """
    if not fit.converged:
        raise NumericalError("inverse Hessian requested for a non-converged fit")
    H = hessian_phi(problem, fit.params)
    full = _invert_negative_definite(H)
    M = problem.n_truth
    valid = problem.tau == 0
    if not valid:
        logger.warning("inverse Hessian at tau=%g: regularized, bound assumptions violated", problem.tau)
    return CovarianceEstimate(full[:M, :M].copy(), "inverse_hessian", 0, problem.tau, valid, 0, full)


# Toys ------------------------------------------------------------------------


def toy_seed(rng) -> int:
    """Master seed for a toy run; accepts an int or a ``numpy`` Generator."""
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2 ** 63))
    return int(rng)


_SHARED = {}


def _init_worker(shared):
    _SHARED.clear()
    _SHARED.update(shared)


def _frequentist_toy(index):
    problem, fit, seed, config = (_SHARED[k] for k in ("problem", "fit", "seed", "config"))
    rng = rng_stream(seed, "frequentist", index)
    nu = nu_at(problem, fit.mu_hat, fit.theta_hat)
    counts = rng.poisson(nu).astype(float)
    cons = problem.constraints
    aux = rng.normal(fit.theta_hat, cons.widths) if cons.size else cons.aux
    return _refit(problem.with_data(counts, aux), fit, config)


def _draw_prior(problem: UnfoldingProblem, rng, check) -> np.ndarray:
    cons = problem.constraints
    if cons.size == 0:
        return cons.aux.copy()
    for _ in range(MAX_REDRAWS):
        theta = rng.normal(cons.aux, cons.widths)
        if check is None or check(theta):
            return theta
    raise NumericalError(f"no acceptable nuisance draw after {MAX_REDRAWS} attempts")


def _hybrid_toy(index):
    problem, fit, seed, config, check = (_SHARED[k] for k in ("problem", "fit", "seed", "config", "check"))
    rng = rng_stream(seed, "hybrid", index)
    theta = _draw_prior(problem, rng, check)
    nu = nu_at(problem, fit.mu_hat, theta)
    counts = rng.poisson(nu).astype(float)
    return _refit(problem.with_data(counts), fit, config)


def _refit(toy_problem, fit, config):
    lb, ub = theta_bounds(toy_problem)
    start = ParamVector(fit.mu_hat, np.clip(fit.theta_hat, lb, ub))
    try:
        res = maximize_phi(toy_problem, config, start)
    except NumericalError as exc:
        logger.debug("toy fit failed: %s", exc)
        return None
    if not res.converged:
        return None
    return res.mu_hat, res.theta_hat


def _map(fn, shared: dict, T: int, threads):
    """Evaluate ``fn(index)`` for every toy; results come back in index order."""
    threads = 1 if threads is None else int(threads)
    if threads <= 1 or T < 2:
        _init_worker(shared)
        try:
            return [fn(t) for t in range(T)]
        finally:
            _SHARED.clear()
    chunk = max(1, T // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(shared,)) as pool:
        return list(pool.map(fn, range(T), chunksize=chunk))


def _collect(results, mode, problem, T) -> ToyEnsemble:
    K = problem.n_nuisance
    ok = np.array([r is not None for r in results], dtype=bool)
    kept = [r for r in results if r is not None]
    mu = np.array([r[0] for r in kept]).reshape(len(kept), problem.n_truth)
    theta = np.array([r[1] for r in kept]).reshape(len(kept), K)
    lost = T - len(kept)
    if lost > MAX_TOY_LOSS * T:
        raise ToyLossError(f"{mode} toys: {lost} of {T} fits did not converge")
    if lost:
        logger.warning("%s toys: dropped %d of %d non-converged fits", mode, lost, T)
    return ToyEnsemble(mu, theta, ok, mode, problem.tau)


def run_frequentist_toys(problem: UnfoldingProblem, fit: FitResult, T: int, rng,
                         config: FitConfig = None, threads: int = 1) -> ToyEnsemble:
    """Pseudo-experiments around the fitted point ``(mu_hat, theta_hat)``.

    Each toy draws Poisson counts from ``nu(mu_hat, theta_hat)`` and auxiliary
    centers from ``Gaus(theta_hat, width)``, then refits at the same ``tau``.

    Args:
        rng: Master seed (int) or Generator used to derive one.
        threads: Worker processes; the ensemble does not depend on it.

    Raises:
        ToyLossError: if more than 5% of the toy fits fail.
    """
    if T < 2:
        raise ValueError("need at least two toys")
    if not fit.converged:
        raise NumericalError("frequentist toys need a converged nominal fit")
    shared = {"problem": problem, "fit": fit, "seed": toy_seed(rng), "config": config}
    return _collect(_map(_frequentist_toy, shared, T, threads), "frequentist", problem, T)


def run_hybrid_toys(problem: UnfoldingProblem, fit: FitResult, T: int, rng,
                    config: FitConfig = None, threads: int = 1, theta_check=None) -> ToyEnsemble:
    """Pseudo-experiments with nuisances drawn from their prior.

    For each toy ``theta ~ Gaus(aux, width)`` (redrawn while ``theta_check``
    rejects it), counts ``~ Poisson(R(theta) mu_hat + beta(theta))``, and the
    counts are unfolded with ``problem`` unchanged apart from the data.

    Raises:
        NumericalError: if a toy exhausts the nuisance redraw limit.
        ToyLossError: if more than 5% of the toy fits fail.
    """
    if T < 2:
        raise ValueError("need at least two toys")
    shared = {"problem": problem, "fit": fit, "seed": toy_seed(rng), "config": config,
              "check": theta_check}
    return _collect(_map(_hybrid_toy, shared, T, threads), "hybrid", problem, T)


def sample_covariance(ensemble: ToyEnsemble) -> CovarianceEstimate:
    """Unbiased sample covariance of the retained toys (``mu`` block)."""
    if ensemble.n_used < 2:
        raise ValueError("sample covariance needs at least two toys")
    X = ensemble.estimates
    centered = X - X.mean(axis=0)
    full = centered.T @ centered / (X.shape[0] - 1)
    full = 0.5 * (full + full.T)
    M = ensemble.mu.shape[1]
    method = "frequentist_toys" if ensemble.mode == "frequentist" else "hybrid_toys"
    return CovarianceEstimate(full[:M, :M].copy(), method, ensemble.n_used, ensemble.tau,
                              True, ensemble.n_requested, full, ensemble.mean())


# Summary statistics ----------------------------------------------------------


def _matrix(V) -> np.ndarray:
    return V.matrix if isinstance(V, CovarianceEstimate) else np.asarray(V, dtype=float)


def avg_rel_error(V, mu_hat) -> float:
    """Mean of ``sqrt(V_ii) / |mu_hat_i|``.

    Raises:
        ValueError: if some ``mu_hat_i`` is zero (the ratio is undefined).
    """
    m = _matrix(V)
    mu = np.abs(np.asarray(mu_hat, dtype=float))
    if mu.size != m.shape[0]:
        raise ValueError("dimension mismatch")
    if np.any(mu == 0):
        raise ValueError("relative error undefined for a zero estimate")
    return float(np.mean(np.sqrt(np.clip(np.diag(m), 0.0, None)) / mu))


def _inverse(m: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"covariance is singular: condition number {cond:.3g}")
    return np.linalg.solve(m, np.eye(m.shape[0]))


def avg_global_correlation(V) -> float:
    """Mean global correlation ``sqrt(1 - 1/(V_ii (V^-1)_ii))``."""
    m = _matrix(V)
    inv = _inverse(m)
    r = 1.0 - 1.0 / (np.diag(m) * np.diag(inv))
    return float(np.mean(np.sqrt(np.clip(r, 0.0, 1.0))))


def chi2_ndf(mu_hat, mu_true, V) -> float:
    """``(mu_hat - mu_true) V^-1 (mu_hat - mu_true) / M``."""
    m = _matrix(V)
    d = np.asarray(mu_hat, dtype=float) - np.asarray(mu_true, dtype=float)
    if d.size != m.shape[0]:
        raise ValueError("dimension mismatch")
    val = float(d @ _inverse(m) @ d) / d.size
    return max(val, 0.0)


def relative_difference(Va, Vb, eps: float = 1e-12) -> np.ndarray:
    """``100 (Va - Vb) / Vb`` elementwise; NaN where ``|Vb|`` is negligible."""
    a, b = _matrix(Va), _matrix(Vb)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    floor = eps * float(np.max(np.abs(b))) if b.size else 0.0
    small = np.abs(b) <= floor
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 100.0 * (a - b) / b
    out[small] = np.nan
    return out


def mean_abs_diag_difference(Va, Vb) -> float:
    """Mean of ``|Va_ii - Vb_ii| / Vb_ii`` (a fraction, not percent)."""
    a, b = np.diag(_matrix(Va)), np.diag(_matrix(Vb))
    return float(np.mean(np.abs(a - b) / b))


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
