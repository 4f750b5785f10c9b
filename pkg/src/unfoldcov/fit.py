"""Maximization of the regularized objective.

The optimizer is a projected Newton ascent in scaled coordinates
``(mu, pulls)`` with ``theta = aux + width * pull``.  The curvature is the
finite-difference Hessian of ``phi`` assembled from the response Jacobian;
where that is not negative definite (or a nuisance sits at a bound) the
expected Fisher information of the Poisson terms is used instead.  Every
step passes an Armijo backtracking line search, so ``phi`` never decreases
between accepted iterates.  Nuisance bounds are handled with an active set,
and convergence is measured on the projected gradient.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .objective import (
    ParamVector,
    UnfoldingProblem,
    expected_counts,
    gradient_phi,
    nu_at,
    phi,
    second_difference_matrix,
    theta_bounds,
    theta_derivative,
    theta_steps,
)

logger = logging.getLogger(__name__)

MU_FLOOR = 1e-3
#: Consecutive iterations without a representable increase of phi before giving up.
STALL_ITERATIONS = 3
TRANSFORMS = ("linear", "log")
INIT_STRATEGIES = ("bin_matching",)


@dataclass
class FitConfig:
    """Optimizer settings.

    ``gradient_tol`` is relative to ``max(|phi|, 1)``.  With the ``linear``
    transform ``mu`` is free as long as every expected count stays positive;
    ``log`` optimizes ``log(mu)`` and keeps ``mu`` strictly positive.
    """

    gradient_tol: float = 1e-6
    max_iter: int = 500
    init: str = "bin_matching"
    transform: str = "linear"

    def __post_init__(self):
        if not self.gradient_tol > 0:
            raise ValueError("gradient_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"unknown initialization {self.init!r}")


@dataclass
class FitResult:
    mu_hat: np.ndarray
    theta_hat: np.ndarray
    phi_value: float
    converged: bool
    n_iterations: int
    final_gradient_norm: float
    message: str = ""

    @property
    def params(self) -> ParamVector:
        return ParamVector(self.mu_hat, self.theta_hat)

    def to_dict(self) -> dict:
        return {
            "mu_hat": [float(v) for v in self.mu_hat],
            "theta_hat": [float(v) for v in self.theta_hat],
            "phi_value": float(self.phi_value),
            "converged": bool(self.converged),
            "n_iterations": int(self.n_iterations),
            "final_gradient_norm": float(self.final_gradient_norm),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(np.array(d["mu_hat"], dtype=float), np.array(d["theta_hat"], dtype=float),
                   float(d["phi_value"]), bool(d["converged"]), int(d["n_iterations"]),
                   float(d.get("final_gradient_norm", np.nan)))


def initial_point(problem: UnfoldingProblem, floor: float = MU_FLOOR) -> ParamVector:
    """Starting point: nominal nuisances and a background-subtracted guess for ``mu``."""
    theta0 = problem.constraints.aux.copy()
    lb, ub = theta_bounds(problem)
    theta0 = np.clip(theta0, lb, ub)
    R = problem.response_fn(theta0)
    beta = problem.background_fn(theta0).contents
    n = problem.counts
    eff = R.column_sums()
    M = problem.n_truth
    safe_eff = np.where(eff > 0, eff, 1.0)
    if R.truth_edges == R.reco_edges:
        mu0 = (n - beta) / safe_eff
    else:
        shape = problem.truth_shape
        shape = np.full(M, 1.0 / M) if shape is None else np.asarray(shape, dtype=float) / np.sum(shape)
        mu0 = (n.sum() - beta.sum()) / M * (M * shape) / safe_eff
    return ParamVector(np.maximum(mu0, floor), theta0)


def _safe_phi(problem, mu, theta) -> float:
    try:
        return phi(problem, ParamVector(mu, theta))
    except NumericalError:
        return -np.inf


def _curvatures(problem: UnfoldingProblem, mu, theta, skip=None):
    """Fisher matrix ``A`` (positive definite) and Hessian ``H`` of ``phi``.

    Nuisances flagged in ``skip`` (held at a bound) get no second
    derivatives.  ``H`` is None when a remaining stencil would cross a bound.
    """
    R = problem.response_fn(theta).entries
    beta = problem.background_fn(theta).contents
    nu = expected_counts(R, mu, beta)
    n = problem.counts
    M, K = mu.size, theta.size
    h = theta_steps(problem)
    lb, ub = theta_bounds(problem)

    J = np.empty((R.shape[0], M + K))
    J[:, :M] = R
    dR = []
    for k in range(K):
        J[:, M + k] = theta_derivative(lambda t: nu_at(problem, mu, t), theta, k, h[k], lb[k], ub[k])
        dR.append(theta_derivative(lambda t: problem.response_fn(t).entries, theta, k, h[k], lb[k], ub[k]))

    reg = np.zeros((M + K, M + K))
    if problem.tau > 0 and M >= 3:
        D = second_difference_matrix(M)
        reg[:M, :M] = 2.0 * problem.tau * D.T @ D
    if K:
        reg[M:, M:] = np.diag(1.0 / problem.constraints.widths ** 2)

    safe_nu = np.where(nu > 0, nu, 1.0)
    A = J.T @ (J / safe_nu[:, None]) + reg

    skip = np.zeros(K, dtype=bool) if skip is None else np.asarray(skip, dtype=bool)
    use = ~skip
    if not (np.all(theta[use] - 2 * h[use] > lb[use]) and np.all(theta[use] + 2 * h[use] < ub[use])):
        return A, None
    resid = n / safe_nu - 1.0
    H = -(J.T @ (J * (n / safe_nu ** 2)[:, None])) - reg
    for k in np.flatnonzero(use):
        H[:M, M + k] += dR[k].T @ resid
        H[M + k, :M] = H[:M, M + k]
        for l in range(k, K):
            if skip[l]:
                continue
            if k == l:
                e = np.zeros(K)
                e[k] = h[k]
                d2 = (nu_at(problem, mu, theta + e) - 2.0 * nu + nu_at(problem, mu, theta - e)) / h[k] ** 2
            else:
                ek, el = np.zeros(K), np.zeros(K)
                ek[k], el[l] = h[k], h[l]
                d2 = (nu_at(problem, mu, theta + ek + el) - nu_at(problem, mu, theta + ek - el)
                      - nu_at(problem, mu, theta - ek + el) + nu_at(problem, mu, theta - ek - el)) / (4 * h[k] * h[l])
            H[M + k, M + l] += resid @ d2
            H[M + l, M + k] = H[M + k, M + l]
    return A, H


def maximize_phi(problem: UnfoldingProblem, config: FitConfig = None, start: ParamVector = None) -> FitResult:
    """Regularized maximum-likelihood estimates of ``mu`` and ``theta``.

    Non-convergence is reported through ``FitResult.converged`` rather than
    raised.

    Raises:
        NumericalError: if the objective is not finite at the starting point.
    """
    config = config or FitConfig()
    p0 = start or initial_point(problem)
    M = problem.n_truth
    widths = problem.constraints.widths
    aux = problem.constraints.aux
    log_mu = config.transform == "log"
    mu0 = np.maximum(p0.mu, MU_FLOOR) if log_mu else p0.mu

    lb, ub = theta_bounds(problem)
    lo = np.concatenate([np.full(M, -np.inf), (lb - aux) / widths])
    hi = np.concatenate([np.full(M, np.inf), (ub - aux) / widths])

    def to_params(x):
        mu = np.exp(x[:M]) if log_mu else x[:M]
        return mu, aux + widths * x[M:]

    x = np.concatenate([np.log(mu0) if log_mu else mu0, (p0.theta - aux) / widths])
    x = np.clip(x, lo, hi)
    mu, theta = to_params(x)
    f = _safe_phi(problem, mu, theta)
    if not np.isfinite(f):
        raise NumericalError("objective is -inf at the starting point")

    def scaled_gradient(mu, theta):
        g = gradient_phi(problem, ParamVector(mu, theta))
        if log_mu:
            g[:M] *= mu
        g[M:] *= widths
        return g

    def active_set(x, g):
        eps = 1e-12 * np.maximum(1.0, np.abs(x))
        return ((x <= lo + eps) & (g < 0)) | ((x >= hi - eps) & (g > 0))

    n_iter = 0
    stalled = 0
    converged = False
    message = "maximum number of iterations reached"
    g = scaled_gradient(mu, theta)
    active = active_set(x, g)
    gnorm = float(np.linalg.norm(np.where(active, 0.0, g)))
    while True:
        if gnorm <= config.gradient_tol * max(abs(f), 1.0):
            converged = True
            message = "gradient tolerance reached"
            break
        if n_iter >= config.max_iter:
            break
        n_iter += 1

        A, H = _curvatures(problem, mu, theta, skip=active[M:])
        scale = np.concatenate([mu if log_mu else np.ones(M), widths])
        free = ~active
        gf = g[free]
        S = np.outer(scale, scale)
        sub = np.ix_(free, free)
        candidates = []
        if H is not None:
            negH = -H * S
            if log_mu:
                # first-order term of the exp map
                negH[:M, :M] -= np.diag(g[:M])
            candidates.append(negH[sub])
        candidates.append((A * S)[sub])

        direction = None
        for C in candidates:
            try:
                np.linalg.cholesky(C)
                direction = np.linalg.solve(C, gf)
                break
            except np.linalg.LinAlgError:
                continue
        if direction is None:
            Cd = candidates[-1]
            d = np.abs(np.diag(Cd))
            d[d == 0] = 1.0
            direction = gf / d
        step = np.zeros_like(x)
        step[free] = direction

        accepted = False
        alpha = 1.0
        for _ in range(60):
            x_new = np.clip(x + alpha * step, lo, hi)
            mu_new, theta_new = to_params(x_new)
            f_new = _safe_phi(problem, mu_new, theta_new)
            if np.isfinite(f_new) and f_new >= f + 1e-4 * float(g @ (x_new - x)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted or f_new < f:
            message = "line search failed to increase phi"
            break
        stalled = stalled + 1 if f_new - f <= 1e-14 * max(abs(f), 1.0) else 0
        x, mu, theta, f = x_new, mu_new, theta_new, f_new
        try:
            g = scaled_gradient(mu, theta)
        except NumericalError as exc:
            message = f"gradient failed: {exc}"
            break
        active = active_set(x, g)
        gnorm = float(np.linalg.norm(np.where(active, 0.0, g)))
        if stalled >= STALL_ITERATIONS and gnorm > config.gradient_tol * max(abs(f), 1.0):
            message = "stalled: phi no longer increases"
            break

    return FitResult(mu.copy(), theta.copy(), float(f), converged, n_iter, gnorm, message)


def refit_for_toy(problem: UnfoldingProblem, counts, aux=None, config: FitConfig = None) -> FitResult:
    """Refit the same model with toy counts and (optionally) toy auxiliary centers."""
    return maximize_phi(problem.with_data(counts, aux), config)
