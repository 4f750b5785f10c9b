"""Regularized log-objective ``Phi(mu, theta) = log L + tau * S(mu)``.

``log L`` is the Poisson log-likelihood of the observed counts plus the
Gaussian constraint terms of the nuisance parameters (normalization
constants dropped).  ``S`` is the negative sum of squared second
differences of ``mu``.  Derivatives with respect to ``mu`` are analytic;
derivatives with respect to ``theta`` use central differences through the
response and background evaluators.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln

from .errors import NumericalError
from .hist import Histogram1D, ResponseMatrix
from .simkit import NuisanceSet

#: Nuisance finite-difference step in units of the constraint width.
#: Suits smooth response models; frozen-seed MC models need a coarser step.
THETA_STEP = 1e-4
#: Smallest absolute nuisance step, relative to ``max(|aux|, 1)``.
THETA_STEP_FLOOR = 1e-7


@dataclass
class UnfoldingProblem:
    """Data, forward model and regularization strength of one unfolding.

    Attributes:
        observed: Observed counts ``n`` on the reco binning.
        response_fn: ``theta -> ResponseMatrix``.
        background_fn: ``theta -> Histogram1D`` of expected background.
        constraints: Auxiliary measurements and widths of the nuisances.
        tau: Regularization strength.
        truth_shape: Optional truth-bin shape used for the starting point.
        theta_step: Nuisance finite-difference step in constraint widths.
        theta_bounds: Optional ``(lower, upper)`` arrays bounding ``theta``.
    """

    observed: Histogram1D
    response_fn: Callable
    background_fn: Callable
    constraints: NuisanceSet
    tau: float = 0.0
    truth_shape: Optional[np.ndarray] = None
    theta_step: float = THETA_STEP
    theta_bounds: Optional[tuple] = None
    counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"tau must be non-negative, got {self.tau!r}")
        self.observed.validate_counts()
        self.counts = self.observed.contents
        R = self.response_fn(self.constraints.aux)
        if R.shape[0] != self.observed.n_bins:
            raise ValueError("response reco binning does not match the observed histogram")
        self.n_truth = R.shape[1]

    @property
    def n_nuisance(self) -> int:
        return self.constraints.size

    @property
    def n_params(self) -> int:
        return self.n_truth + self.n_nuisance

    def with_data(self, counts, aux=None, tau=None) -> "UnfoldingProblem":
        """Same model with new observed counts and/or auxiliary centers."""
        obs = Histogram1D(self.observed.edges, np.asarray(counts, dtype=float))
        cons = self.constraints if aux is None else self.constraints.with_aux(aux)
        return replace(self, observed=obs, constraints=cons,
                       tau=self.tau if tau is None else tau)

    def frozen(self, theta=None) -> "UnfoldingProblem":
        """Problem without nuisance parameters, response fixed at ``theta``."""
        theta = self.constraints.aux if theta is None else np.asarray(theta, dtype=float)
        fixed = FixedModel(self.response_fn(theta), self.background_fn(theta))
        return replace(self, response_fn=fixed.response, background_fn=fixed.background,
                       constraints=NuisanceSet.empty(), theta_bounds=None)


class FixedModel:
    """Response and background that do not depend on nuisance parameters."""

    def __init__(self, response: ResponseMatrix, background: Histogram1D):
        self._response = response
        self._background = background

    def response(self, theta=None) -> ResponseMatrix:
        return self._response

    def background(self, theta=None) -> Histogram1D:
        return self._background


@dataclass
class ParamVector:
    """Truth-bin expectations and nuisance values, packed as ``(mu, theta)``."""

    mu: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=float).reshape(-1)
        self.theta = np.array(self.theta, dtype=float).reshape(-1)

    @property
    def packed(self) -> np.ndarray:
        return np.concatenate([self.mu, self.theta])

    @classmethod
    def unpack(cls, vec, n_truth: int) -> "ParamVector":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:n_truth], vec[n_truth:])


def _as_param(problem: UnfoldingProblem, p) -> ParamVector:
    return p if isinstance(p, ParamVector) else ParamVector.unpack(p, problem.n_truth)


def expected_counts(R, mu, beta) -> np.ndarray:
    """``nu_i = sum_j R_ij mu_j + beta_i``."""
    entries = R.entries if isinstance(R, ResponseMatrix) else np.asarray(R, dtype=float)
    mu = np.asarray(mu, dtype=float)
    beta = beta.contents if isinstance(beta, Histogram1D) else np.asarray(beta, dtype=float)
    if entries.ndim != 2 or entries.shape[1] != mu.size or entries.shape[0] != beta.size:
        raise ValueError(
            f"dimension mismatch: R {entries.shape}, mu {mu.shape}, beta {beta.shape}"
        )
    return entries @ mu + beta


def poisson_loglik(n, nu) -> float:
    """``sum_i n_i log nu_i - nu_i - log n_i!``; ``-inf`` outside the domain."""
    n = np.asarray(n, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if n.shape != nu.shape:
        raise ValueError("counts and expectations differ in length")
    if np.any(nu < 0) or np.any((nu == 0) & (n > 0)) or not np.all(np.isfinite(nu)):
        return -np.inf
    pos = n > 0
    total = -nu.sum() - gammaln(n + 1.0).sum()
    total += float(np.dot(n[pos], np.log(nu[pos])))
    return float(total)


def constraint_loglik(theta, constraints: NuisanceSet) -> float:
    pulls = (np.asarray(theta, dtype=float) - constraints.aux) / constraints.widths
    return float(-0.5 * np.dot(pulls, pulls))


def second_difference_matrix(m: int) -> np.ndarray:
    """Rows ``(-1, 2, -1)``; shape ``(max(m-2, 0), m)``."""
    D = np.zeros((max(m - 2, 0), m))
    for i in range(m - 2):
        D[i, i:i + 3] = (-1.0, 2.0, -1.0)
    return D


def tikhonov(mu) -> float:
    """Curvature penalty ``-sum (-mu_i + 2 mu_{i+1} - mu_{i+2})^2``."""
    mu = np.asarray(mu, dtype=float)
    if mu.size < 3:
        return 0.0
    d2 = -mu[:-2] + 2.0 * mu[1:-1] - mu[2:]
    return float(-np.dot(d2, d2))


def tikhonov_gradient(mu) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    D = second_difference_matrix(mu.size)
    return -2.0 * D.T @ (D @ mu)


def _loglik_at(problem: UnfoldingProblem, mu, theta) -> float:
    R = problem.response_fn(theta)
    beta = problem.background_fn(theta)
    nu = expected_counts(R, mu, beta)
    return poisson_loglik(problem.counts, nu) + constraint_loglik(theta, problem.constraints)


def phi(problem: UnfoldingProblem, p) -> float:
    """Objective value at ``p`` (``ParamVector`` or packed array)."""
    p = _as_param(problem, p)
    return _loglik_at(problem, p.mu, p.theta) + problem.tau * tikhonov(p.mu)


def theta_steps(problem: UnfoldingProblem) -> np.ndarray:
    """Per-nuisance step, floored so near-degenerate widths stay above roundoff."""
    cons = problem.constraints
    floor = THETA_STEP_FLOOR * np.maximum(np.abs(cons.aux), 1.0)
    return np.maximum(problem.theta_step * cons.widths, floor)


def theta_bounds(problem: UnfoldingProblem):
    """Lower and upper bounds of the nuisance domain (may be infinite)."""
    K = problem.n_nuisance
    if problem.theta_bounds is None:
        return np.full(K, -np.inf), np.full(K, np.inf)
    lb, ub = problem.theta_bounds
    return np.asarray(lb, dtype=float), np.asarray(ub, dtype=float)


def _stencil(x: float, h: float, lo: float, hi: float):
    """Offsets and weights of a second-order first-derivative stencil.

    One-sided near a bound so that no evaluation leaves the domain.
    """
    if x + h > hi:
        return (0, -1, -2), (1.5, -2.0, 0.5)
    if x - h < lo:
        return (0, 1, 2), (-1.5, 2.0, -0.5)
    return (1, -1), (0.5, -0.5)


def theta_derivative(fn, theta, k: int, h: float, lo: float = -np.inf, hi: float = np.inf):
    """Finite-difference derivative of ``fn(theta)`` along ``theta[k]``."""
    offsets, weights = _stencil(theta[k], h, lo, hi)
    acc = 0.0
    for o, w in zip(offsets, weights):
        t = np.array(theta, dtype=float)
        t[k] += o * h
        acc = acc + w * fn(t)
    return acc / h


def nu_at(problem: UnfoldingProblem, mu, theta) -> np.ndarray:
    return expected_counts(problem.response_fn(theta), mu, problem.background_fn(theta))


def gradient_phi(problem: UnfoldingProblem, p) -> np.ndarray:
    """Gradient of ``phi``; analytic in ``mu``, finite differences in ``theta``.

    Raises:
        NumericalError: if ``phi`` is not finite at ``p`` or at a stencil point.
    """
    p = _as_param(problem, p)
    mu, theta = p.mu, p.theta
    R = problem.response_fn(theta)
    nu = expected_counts(R, mu, problem.background_fn(theta))
    if not np.isfinite(poisson_loglik(problem.counts, nu)):
        raise NumericalError("objective is not finite at the gradient point")
    g_mu = R.entries.T @ (problem.counts / nu - 1.0) + problem.tau * tikhonov_gradient(mu)
    h = theta_steps(problem)
    lb, ub = theta_bounds(problem)
    g_theta = np.empty(theta.size)
    for k in range(theta.size):
        try:
            d = theta_derivative(lambda t: _loglik_at(problem, mu, t), theta, k, h[k], lb[k], ub[k])
        except NumericalError as exc:
            raise NumericalError(f"objective undefined at the theta[{k}] stencil: {exc}") from exc
        if not np.isfinite(d):
            raise NumericalError(f"objective is not finite at the theta[{k}] stencil")
        g_theta[k] = d
    return np.concatenate([g_mu, g_theta])


def hessian_steps(problem: UnfoldingProblem, p) -> np.ndarray:
    p = _as_param(problem, p)
    h_mu = np.maximum(1e-3 * np.abs(p.mu), 1e-2)
    return np.concatenate([h_mu, theta_steps(problem)])


def hessian_phi(problem: UnfoldingProblem, p) -> np.ndarray:
    """Symmetrized finite-difference Hessian of ``phi`` built from its gradient."""
    p = _as_param(problem, p)
    x0 = p.packed
    h = hessian_steps(problem, p)
    M = problem.n_truth
    lb, ub = theta_bounds(problem)
    lo = np.concatenate([np.full(M, -np.inf), lb])
    hi = np.concatenate([np.full(M, np.inf), ub])
    n = x0.size
    H = np.empty((n, n))
    for l in range(n):
        offsets, weights = _stencil(x0[l], h[l], lo[l], hi[l])
        col = 0.0
        for o, w in zip(offsets, weights):
            x = x0.copy()
            x[l] += o * h[l]
            col = col + w * gradient_phi(problem, x)
        H[:, l] = col / h[l]
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite Hessian entries")
    return 0.5 * (H + H.T)
