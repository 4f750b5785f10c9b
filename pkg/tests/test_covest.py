import numpy as np
import pytest

from conftest import scenario_problem, single_bin_problem
from unfoldcov.covest import (
    CovarianceEstimate,
    ToyEnsemble,
    avg_global_correlation,
    avg_rel_error,
    chi2_ndf,
    cov_inverse_hessian,
    mean_abs_diag_difference,
    relative_difference,
    run_frequentist_toys,
    run_hybrid_toys,
    sample_covariance,
    toy_seed,
)
from unfoldcov.errors import NumericalError, ToyLossError
from unfoldcov.fit import FitConfig, maximize_phi
from unfoldcov.hist import BinEdges, Histogram1D, ResponseMatrix
from unfoldcov.objective import FixedModel, UnfoldingProblem
from unfoldcov.simkit import NuisanceSet


def ensemble(rows):
    rows = np.asarray(rows, dtype=float)
    return ToyEnsemble(rows, np.zeros((rows.shape[0], 0)), np.ones(rows.shape[0], bool), "frequentist")


def insensitive_problem(width=0.2):
    """Two bins with a nuisance that the data do not depend on."""
    edges = BinEdges([0.0, 1.0, 2.0])
    model = FixedModel(ResponseMatrix(np.eye(2), edges, edges), Histogram1D(edges, [0.0, 0.0]))
    return UnfoldingProblem(Histogram1D(edges, [80.0, 120.0]), model.response, model.background,
                            NuisanceSet([0.0], [1.0], [width]))


def test_estimate_validation():
    with pytest.raises(ValueError):
        CovarianceEstimate(np.eye(2), "bootstrap")
    with pytest.raises(ValueError):
        CovarianceEstimate(np.ones(3), "inverse_hessian")


def test_sample_covariance_examples():
    assert np.all(sample_covariance(ensemble([[1.0, 2.0]] * 5)).matrix == 0)
    np.testing.assert_array_equal(sample_covariance(ensemble([[0, 0], [2, 2]])).matrix, [[2, 2], [2, 2]])
    draws = np.random.default_rng(1).poisson(100, size=(2000, 1))
    v = sample_covariance(ensemble(draws)).matrix[0, 0]
    assert abs(v - 100) < 3 * np.sqrt(2 / 2000) * 100
    with pytest.raises(ValueError):
        sample_covariance(ensemble([[1.0]]))


def test_avg_rel_error_examples():
    assert avg_rel_error(np.zeros((2, 2)), [1, 2]) == 0
    assert avg_rel_error(np.diag([4.0]), [2.0]) == pytest.approx(1.0)
    assert avg_rel_error(np.diag([1.0, 4.0]), [1.0, 2.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        avg_rel_error(np.eye(2), [1.0, 0.0])


def test_global_correlation_examples():
    assert avg_global_correlation(np.diag([1.0, 3.0, 7.0])) == pytest.approx(0, abs=1e-12)
    assert avg_global_correlation([[1.0, 0.6], [0.6, 1.0]]) == pytest.approx(0.6)
    with pytest.raises(NumericalError, match="condition number"):
        avg_global_correlation([[1.0, 1.0], [1.0, 1.0]])


def test_chi2_examples():
    assert chi2_ndf([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0
    assert chi2_ndf([3.0], [1.0], [[4.0]]) == pytest.approx(1.0)
    V = np.diag([4.0, 9.0, 0.25])
    assert chi2_ndf([2.0, 3.0, 0.5], [0, 0, 0], V) == pytest.approx(1.0)


def test_relative_difference_examples():
    V = np.array([[2.0, 0.5], [0.5, 3.0]])
    np.testing.assert_array_equal(relative_difference(V, V), 0)
    np.testing.assert_allclose(relative_difference(1.1 * V, V), 10.0)
    Vb = np.array([[2.0, 0.0], [0.0, 3.0]])
    out = relative_difference(V, Vb)
    assert np.isnan(out[0, 1]) and np.isnan(out[1, 0]) and out[0, 0] == 0
    assert mean_abs_diag_difference(1.1 * V, V) == pytest.approx(0.1)


def test_inverse_hessian_single_bin():
    prob = single_bin_problem(100.0)
    cov = cov_inverse_hessian(prob, maximize_phi(prob))
    assert cov.matrix[0, 0] == pytest.approx(100.0, rel=0.01)
    assert cov.valid and cov.is_symmetric()


def test_inverse_hessian_constraint_block():
    prob = insensitive_problem(0.2)
    cov = cov_inverse_hessian(prob, maximize_phi(prob))
    assert cov.full_matrix[2, 2] == pytest.approx(0.04, rel=1e-6)
    np.testing.assert_allclose(np.diag(cov.matrix), [80.0, 120.0], rtol=1e-4)


def test_inverse_hessian_flags_regularization(caplog):
    prob = scenario_problem("exponential", tau=1e-6)
    cov = cov_inverse_hessian(prob, maximize_phi(prob))
    assert not cov.valid
    assert "regularized" in caplog.text


def test_inverse_hessian_singular():
    edges = BinEdges([0.0, 1.0, 2.0])
    # both truth bins feed the same reco bin, so -H is singular
    model = FixedModel(ResponseMatrix([[0.5, 0.5], [0.0, 0.0]], edges, edges, validate=False),
                       Histogram1D(edges, [0.0, 1.0]))
    prob = UnfoldingProblem(Histogram1D(edges, [50.0, 1.0]), model.response, model.background,
                            NuisanceSet.empty())
    fit = maximize_phi(prob)
    with pytest.raises(NumericalError, match="eigenvalue|condition"):
        cov_inverse_hessian(prob, fit)


def test_frequentist_single_bin_poisson():
    prob = single_bin_problem(100.0)
    ens = run_frequentist_toys(prob, maximize_phi(prob), 2000, 3)
    v = sample_covariance(ens).matrix[0, 0]
    assert abs(v - 100) < 3 * np.sqrt(2 / 2000) * 100


def test_frequentist_insensitive_nuisance():
    prob = insensitive_problem(0.2)
    T = 1000
    ens = run_frequentist_toys(prob, maximize_phi(prob), T, 4)
    var = ens.theta[:, 0].var(ddof=1)
    assert abs(var - 0.04) < 4 * np.sqrt(2 / T) * 0.04


def test_toys_deterministic():
    prob = scenario_problem("double_gaussian")
    fit = maximize_phi(prob)
    a = run_frequentist_toys(prob, fit, 20, 11)
    b = run_frequentist_toys(prob, fit, 20, 11)
    np.testing.assert_array_equal(a.mu, b.mu)
    c = run_hybrid_toys(prob, fit, 20, 11)
    d = run_hybrid_toys(prob, fit, 20, 11)
    np.testing.assert_array_equal(c.mu, d.mu)
    assert not np.array_equal(a.mu, c.mu)


def test_toys_independent_of_threads():
    prob = scenario_problem("double_gaussian")
    fit = maximize_phi(prob)
    one = run_hybrid_toys(prob, fit, 12, 5, threads=1)
    two = run_hybrid_toys(prob, fit, 12, 5, threads=2)
    np.testing.assert_array_equal(one.mu, two.mu)


def test_toy_seed_from_generator():
    assert toy_seed(np.random.default_rng(0)) == toy_seed(np.random.default_rng(0))
    assert toy_seed(42) == 42


def test_toy_loss_error():
    prob = scenario_problem("exponential", tau=1e-5)
    fit = maximize_phi(prob)
    with pytest.raises(ToyLossError):
        run_frequentist_toys(prob, fit, 10, 1, FitConfig(max_iter=1))


def test_hybrid_redraw_limit():
    prob = scenario_problem("double_gaussian")
    fit = maximize_phi(prob)
    with pytest.raises(NumericalError, match="nuisance draw"):
        run_hybrid_toys(prob, fit, 3, 1, theta_check=lambda t: False)


def test_toy_covariances_psd_and_symmetric():
    prob = scenario_problem("double_gaussian", tau=1e-5)
    fit = maximize_phi(prob)
    for run in (run_frequentist_toys, run_hybrid_toys):
        cov = sample_covariance(run(prob, fit, 60, 2))
        assert cov.is_symmetric()
        assert cov.min_eigenvalue() >= -1e-10 * np.trace(cov.matrix)
        assert cov.converged_fraction == 1.0
