import json

import numpy as np
import pytest

from conftest import scenario_problem, single_bin_problem
from unfoldcov.errors import NumericalError
from unfoldcov.fit import FitConfig, FitResult, initial_point, maximize_phi, refit_for_toy
from unfoldcov.hist import BinEdges, Histogram1D, ResponseMatrix
from unfoldcov.objective import FixedModel, UnfoldingProblem, gradient_phi
from unfoldcov.simkit import NuisanceSet


def identity_problem(n, beta=None, tau=0.0, nuisance=None):
    n = np.asarray(n, dtype=float)
    edges = BinEdges(np.arange(n.size + 1.0))
    beta = np.zeros(n.size) if beta is None else np.asarray(beta, dtype=float)
    model = FixedModel(ResponseMatrix(np.eye(n.size), edges, edges), Histogram1D(edges, beta))
    return UnfoldingProblem(Histogram1D(edges, n), model.response, model.background,
                            nuisance or NuisanceSet.empty(), tau)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(gradient_tol=0)
    with pytest.raises(ValueError):
        FitConfig(transform="sqrt")
    with pytest.raises(ValueError):
        FitConfig(init="random")


def test_initial_point_examples():
    p = initial_point(identity_problem([5.0, 0.0, 12.0]))
    np.testing.assert_allclose(p.mu, [5.0, 1e-3, 12.0])
    p = initial_point(identity_problem([3.0, 4.0], beta=[3.0, 4.0]))
    np.testing.assert_allclose(p.mu, [1e-3, 1e-3])
    assert np.all(initial_point(scenario_problem("exponential")).mu > 0)


@pytest.mark.parametrize("transform", ["linear", "log"])
def test_single_bin_mle(transform):
    fit = maximize_phi(single_bin_problem(100.0), FitConfig(transform=transform))
    assert fit.converged
    assert fit.mu_hat[0] == pytest.approx(100.0, rel=1e-6)


def test_separable_identity_mle():
    n = [7.0, 30.0, 120.0, 2.0]
    fit = maximize_phi(identity_problem(n))
    np.testing.assert_allclose(fit.mu_hat, n, rtol=1e-6)


def test_constraint_only_nuisance():
    cons = NuisanceSet([0.0], [2.0], [0.3])
    fit = maximize_phi(identity_problem([40.0, 60.0], nuisance=cons))
    assert fit.converged
    assert fit.theta_hat[0] == pytest.approx(2.0, abs=1e-6)


def test_refit_examples():
    fit = refit_for_toy(single_bin_problem(100.0), [7.0])
    assert fit.mu_hat[0] == pytest.approx(7.0, rel=1e-6)
    prob = scenario_problem("double_gaussian")
    a = maximize_phi(prob)
    b = refit_for_toy(prob, prob.counts, prob.constraints.aux)
    np.testing.assert_array_equal(a.mu_hat, b.mu_hat)
    np.testing.assert_array_equal(a.theta_hat, b.theta_hat)


def test_poisson_toy_refits(rng):
    prob = single_bin_problem(100.0)
    mus = [refit_for_toy(prob, [k]).mu_hat[0] for k in rng.poisson(100, 100)]
    assert abs(np.mean(mus) - 100) < 3 * np.sqrt(100 / 100)


def test_starting_point_outside_domain():
    edges = BinEdges([0.0, 1.0, 2.0])
    model = FixedModel(ResponseMatrix([[1.0, 0.0], [0.0, 1.0]], edges, edges), Histogram1D(edges, [0.0, 0.0]))
    prob = UnfoldingProblem(Histogram1D(edges, [3.0, 5.0]), model.response, model.background,
                            NuisanceSet.empty())
    from unfoldcov.objective import ParamVector
    with pytest.raises(NumericalError):
        maximize_phi(prob, start=ParamVector([-1.0, 5.0], []))


def test_max_iter_reports_nonconvergence():
    prob = scenario_problem("exponential", tau=1e-5)
    fit = maximize_phi(prob, FitConfig(max_iter=1))
    assert not fit.converged
    assert fit.n_iterations == 1
    assert "maximum" in fit.message


@pytest.mark.parametrize("name", ["double_gaussian", "exponential"])
@pytest.mark.parametrize("tau", [0.0, 1e-6, 1e-5, 5e-5])
def test_scenarios_converge(name, tau):
    prob = scenario_problem(name, tau=tau)
    start = initial_point(prob)
    fit = maximize_phi(prob)
    assert fit.converged, fit.message
    assert fit.final_gradient_norm <= 1e-6 * max(abs(fit.phi_value), 1.0)
    from unfoldcov.objective import phi
    assert fit.phi_value >= phi(prob, start)
    lb, ub = prob.theta_bounds
    assert np.all(fit.theta_hat >= lb) and np.all(fit.theta_hat <= ub)


def test_log_transform_agrees():
    prob = scenario_problem("exponential", tau=1e-6)
    lin = maximize_phi(prob)
    log = maximize_phi(prob, FitConfig(transform="log"))
    assert log.converged
    np.testing.assert_allclose(log.mu_hat, lin.mu_hat, rtol=1e-4)


def test_bound_active_gradient_points_outward():
    # regularization pulls the efficiency against its upper limit of 1
    prob = scenario_problem("double_gaussian", tau=1e-6)
    fit = maximize_phi(prob)
    assert fit.converged
    if fit.theta_hat[2] == 1.0:
        assert gradient_phi(prob, fit.params)[-1] > 0


def test_result_json_round_trip(tmp_path):
    fit = maximize_phi(scenario_problem("double_gaussian"))
    text = fit.to_json(tmp_path / "fit.json")
    assert json.loads((tmp_path / "fit.json").read_text()) == json.loads(text)
    back = FitResult.from_dict(json.loads(text))
    np.testing.assert_array_equal(back.mu_hat, fit.mu_hat)
    np.testing.assert_array_equal(back.theta_hat, fit.theta_hat)
    assert back.phi_value == fit.phi_value and back.converged == fit.converged
