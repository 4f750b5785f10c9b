import pickle

import numpy as np
import pytest
from hypothesis import given, strategies as st

from unfoldcov.hist import (
    BinEdges,
    Histogram1D,
    ResponseMatrix,
    column_sums,
    fill,
    find_bin,
    find_bins,
    read_histogram_csv,
    read_matrix_csv,
    write_histogram_csv,
    write_matrix_csv,
)

EXPO_TRUTH = [0, 2, 4, 6, 8, 10, 12, 14, 18, 25, 35, 60]


@pytest.mark.parametrize("edges", [[0.0], [1.0, 1.0], [0.0, 2.0, 1.0], [0.0, np.inf], [[0.0, 1.0]]])
def test_bad_edges(edges):
    with pytest.raises(ValueError):
        BinEdges(edges)


def test_edges_properties():
    e = BinEdges([0, 1, 3])
    assert e.n_bins == 2 and len(e) == 2
    np.testing.assert_array_equal(e.widths, [1, 2])
    assert e == BinEdges([0.0, 1.0, 3.0])
    assert e != BinEdges([0, 1, 2])
    assert pickle.loads(pickle.dumps(e)) == e


@pytest.mark.parametrize("x, expected", [(0.5, 0), (2.0, 1), (0.0, 0), (1.0, 1), (-0.1, None), (2.1, None)])
def test_find_bin_small(x, expected):
    assert find_bin([0, 1, 2], x) == expected


def test_find_bin_exponential_truth():
    assert find_bin(EXPO_TRUTH, 20.0) == 8


def test_find_bin_nan_is_out_of_range():
    assert find_bin([0, 1], float("nan")) is None
    assert find_bins([0, 1], [float("nan")])[0] == -1


@given(st.lists(st.floats(-5, 70, allow_nan=False), min_size=1, max_size=50))
def test_find_bins_matches_scalar(xs):
    vec = find_bins(EXPO_TRUTH, xs)
    for x, k in zip(xs, vec):
        scalar = find_bin(EXPO_TRUTH, x)
        assert (k == -1 and scalar is None) or k == scalar


def test_fill_examples():
    h = Histogram1D.empty([0, 1, 2])
    fill(h, 0.5, 1)
    np.testing.assert_array_equal(h.contents, [1, 0])
    h.fill(7.0)
    np.testing.assert_array_equal(h.contents, [1, 0])
    assert h.overflow == 1


def test_fill_conserves_total():
    h = Histogram1D.empty([0, 1, 2])
    for x in np.linspace(0, 2, 10):
        h.fill(x)
    assert h.total() == 10


def test_fill_rejects_negative_weight():
    h = Histogram1D.empty([0, 1])
    with pytest.raises(ValueError):
        h.fill(0.5, -1.0)
    with pytest.raises(ValueError):
        h.fill_many([0.5], -1.0)


def test_fill_many_matches_fill(rng):
    x = rng.uniform(-1, 3, 500)
    a = Histogram1D.empty([0, 0.5, 2])
    b = Histogram1D.empty([0, 0.5, 2])
    a.fill_many(x, 2.0)
    for v in x:
        b.fill(v, 2.0)
    np.testing.assert_allclose(a.contents, b.contents)
    assert a.overflow == b.overflow


def test_histogram_shape_and_add():
    with pytest.raises(ValueError):
        Histogram1D([0, 1, 2], [1.0])
    s = Histogram1D([0, 1, 2], [1, 2]) + Histogram1D([0, 1, 2], [3, 4])
    np.testing.assert_array_equal(s.contents, [4, 6])
    with pytest.raises(ValueError):
        Histogram1D([0, 1, 2], [1, 2]) + Histogram1D([0, 1, 3], [1, 2])


def test_validate_counts():
    Histogram1D([0, 1], [3]).validate_counts()
    for bad in ([-1.0], [0.5]):
        with pytest.raises(ValueError):
            Histogram1D([0, 1], bad).validate_counts()


@pytest.mark.parametrize("entries, expected", [
    (np.eye(3), [1, 1, 1]),
    ([[0.5, 0.0], [0.4, 0.0]], [0.9, 0.0]),
    ([[0.5, 0.0], [0.4, 0.9]], [0.9, 0.9]),
])
def test_column_sums(entries, expected):
    m = np.asarray(entries, dtype=float)
    R = ResponseMatrix(m, np.arange(m.shape[1] + 1), np.arange(m.shape[0] + 1))
    np.testing.assert_allclose(R.column_sums(), expected)
    np.testing.assert_allclose(column_sums(R), expected)


@pytest.mark.parametrize("entries", [[[0.7], [0.4]], [[-0.1], [0.5]], [[np.nan], [0.1]]])
def test_response_invariants(entries):
    with pytest.raises(ValueError):
        ResponseMatrix(entries, [0, 1], [0, 1, 2])


def test_response_shape_mismatch():
    with pytest.raises(ValueError):
        ResponseMatrix(np.eye(2), [0, 1, 2], [0, 1, 2, 3])


def test_csv_round_trip(tmp_path):
    h = Histogram1D([0, 0.1, 2.5], [1 / 3, 7.0])
    write_histogram_csv(h, tmp_path / "h.csv")
    back = read_histogram_csv(tmp_path / "h.csv")
    assert back.edges == h.edges
    np.testing.assert_array_equal(back.contents, h.contents)

    m = np.array([[1 / 3, np.nan], [2e-17, -4.0]])
    write_matrix_csv(m, tmp_path / "m.csv")
    np.testing.assert_array_equal(read_matrix_csv(tmp_path / "m.csv"), m)


def test_read_histogram_rejects_gaps(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("lo,hi,content\n0,1,2\n1.5,2,3\n")
    with pytest.raises(ValueError):
        read_histogram_csv(p)
