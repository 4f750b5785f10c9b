import numpy as np
import pytest

from unfoldcov.hist import BinEdges, Histogram1D, ResponseMatrix
from unfoldcov.objective import FixedModel, UnfoldingProblem
from unfoldcov.simkit import NuisanceSet


def single_bin_problem(n=100.0, tau=0.0):
    """One truth bin, one reco bin, R = 1, no background, no nuisances."""
    edges = BinEdges([0.0, 1.0])
    model = FixedModel(ResponseMatrix([[1.0]], edges, edges), Histogram1D(edges, [0.0]))
    return UnfoldingProblem(Histogram1D(edges, [n]), model.response, model.background,
                            NuisanceSet.empty(), tau)


@pytest.fixture
def single_bin():
    return single_bin_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_SCENARIOS = {}


def scenario_problem(name, tau=0.0, seed=7, n_mc=200_000, widths=None):
    """Quadrature-model problem on one generated dataset (cached per argument set)."""
    from unfoldcov.simkit import generate_scenario, make_model, shipped_scenario, truth_shape

    key = (name, seed, n_mc, None if widths is None else tuple(widths))
    if key not in _SCENARIOS:
        spec = shipped_scenario(name, seed=seed) if widths is None else shipped_scenario(name, seed, widths)
        data = generate_scenario(spec, n_mc=n_mc, min_events=0)
        _SCENARIOS[key] = (spec, data, make_model(spec, "quadrature"))
    spec, data, model = _SCENARIOS[key]
    return UnfoldingProblem(data.observed, model.response, model.background, spec.nuisance, tau,
                            truth_shape(spec), theta_bounds=model.theta_bounds())


#: One line per acceptance criterion, filled by tests/test_acceptance.py.
ACCEPTANCE = {}


def record(criterion, passed, detail):
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
