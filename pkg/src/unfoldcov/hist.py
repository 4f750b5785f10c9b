"""Binned containers: bin edges, 1D histograms and response matrices.

Bins are half-open ``[lo, hi)`` except the last one, which also contains
the global upper edge.  Values outside the declared range are dropped and
counted in an overflow tally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

#: Largest column sum accepted for a response matrix.
COLUMN_SUM_SLACK = 1e-12


class BinEdges:
    """Strictly increasing bin edges.

    Args:
        edges: At least two strictly increasing, finite values.

    Raises:
        ValueError: If the edges are too few, not finite or not increasing.
    """

    __slots__ = ("_edges",)

    def __init__(self, edges: Iterable[float]):
        arr = np.array(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=float)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("bin edges need at least two values")
        if not np.all(np.isfinite(arr)):
            raise ValueError("bin edges must be finite")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        arr.setflags(write=False)
        self._edges = arr

    @property
    def edges(self) -> np.ndarray:
        return self._edges

    @property
    def n_bins(self) -> int:
        return self._edges.size - 1

    @property
    def lo(self) -> np.ndarray:
        return self._edges[:-1]

    @property
    def hi(self) -> np.ndarray:
        return self._edges[1:]

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self._edges)

    def __len__(self) -> int:
        return self.n_bins

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinEdges):
            return NotImplemented
        return self._edges.shape == other._edges.shape and bool(np.all(self._edges == other._edges))

    def __hash__(self) -> int:
        return hash(self._edges.tobytes())

    def __repr__(self) -> str:
        return f"BinEdges({self._edges.tolist()!r})"

    def __getstate__(self):
        return self._edges.tolist()

    def __setstate__(self, state):
        self.__init__(state)


def as_edges(edges) -> BinEdges:
    return edges if isinstance(edges, BinEdges) else BinEdges(edges)


def find_bin(edges, x: float) -> Optional[int]:
    """Return the index of the bin containing ``x`` or None when out of range."""
    e = as_edges(edges).edges
    if not (e[0] <= x <= e[-1]):
        return None
    if x == e[-1]:
        return e.size - 2
    return int(np.searchsorted(e, x, side="right")) - 1


def find_bins(edges, x) -> np.ndarray:
    """Vectorized :func:`find_bin`; out-of-range entries (and NaN) map to -1."""
    e = as_edges(edges).edges
    x = np.asarray(x, dtype=float)
    idx = np.searchsorted(e, x, side="right") - 1
    idx = np.where(x == e[-1], e.size - 2, idx)
    inside = (x >= e[0]) & (x <= e[-1])
    return np.where(inside, idx, -1)


@dataclass
class Histogram1D:
    """Per-bin real contents on a set of edges.

    The same container holds observed counts, expectations and MC-weighted
    fills. Use :meth:`validate_counts` where integer counts are required.
    """

    edges: BinEdges
    contents: np.ndarray = None
    overflow: float = 0.0

    def __post_init__(self):
        self.edges = as_edges(self.edges)
        if self.contents is None:
            self.contents = np.zeros(self.edges.n_bins)
        else:
            self.contents = np.array(self.contents, dtype=float)
        if self.contents.shape != (self.edges.n_bins,):
            raise ValueError(
                f"histogram has {self.edges.n_bins} bins but {self.contents.size} contents"
            )

    @classmethod
    def empty(cls, edges) -> "Histogram1D":
        return cls(as_edges(edges))

    @property
    def n_bins(self) -> int:
        return self.edges.n_bins

    def total(self) -> float:
        return float(self.contents.sum())

    def copy(self) -> "Histogram1D":
        return Histogram1D(self.edges, self.contents.copy(), self.overflow)

    def fill(self, x: float, weight: float = 1.0) -> "Histogram1D":
        """Add ``weight`` to the bin holding ``x``; out-of-range goes to overflow."""
        if weight < 0:
            raise ValueError(f"negative fill weight {weight}")
        k = find_bin(self.edges, x)
        if k is None:
            self.overflow += weight
        else:
            self.contents[k] += weight
        return self

    def fill_many(self, x, weight: float = 1.0) -> "Histogram1D":
        """Fill an array of values with a common non-negative weight."""
        if weight < 0:
            raise ValueError(f"negative fill weight {weight}")
        idx = find_bins(self.edges, x)
        inside = idx >= 0
        self.contents += weight * np.bincount(idx[inside], minlength=self.n_bins)
        self.overflow += weight * float(np.count_nonzero(~inside))
        return self

    def __add__(self, other: "Histogram1D") -> "Histogram1D":
        if self.edges != other.edges:
            raise ValueError("cannot add histograms with different edges")
        return Histogram1D(self.edges, self.contents + other.contents, self.overflow + other.overflow)

    def validate_counts(self) -> "Histogram1D":
        """Check that the contents are non-negative integers."""
        c = self.contents
        if np.any(c < 0) or np.any(c != np.round(c)):
            raise ValueError("observed counts must be non-negative integers")
        return self

    def to_csv(self, path) -> None:
        write_histogram_csv(self, path)


def fill(hist: Histogram1D, x: float, weight: float = 1.0) -> Histogram1D:
    return hist.fill(x, weight)


@dataclass
class ResponseMatrix:
    """Conditional probabilities ``R[i, j] = P(reco bin i | truth bin j)``.

    Column sums are the reconstruction efficiencies of the truth bins.
    """

    entries: np.ndarray
    truth_edges: BinEdges
    reco_edges: BinEdges
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        self.truth_edges = as_edges(self.truth_edges)
        self.reco_edges = as_edges(self.reco_edges)
        self.entries = np.array(self.entries, dtype=float)
        shape = (self.reco_edges.n_bins, self.truth_edges.n_bins)
        if self.entries.shape != shape:
            raise ValueError(f"response matrix shape {self.entries.shape} != {shape}")
        if self.validate:
            check_response(self.entries)

    @property
    def shape(self):
        return self.entries.shape

    def column_sums(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    def to_csv(self, path) -> None:
        write_matrix_csv(self.entries, path)


def check_response(entries: np.ndarray) -> None:
    """Raise ValueError unless entries are in [0, 1] with column sums <= 1."""
    if not np.all(np.isfinite(entries)):
        raise ValueError("response matrix has non-finite entries")
    if np.any(entries < 0):
        raise ValueError("response matrix has negative entries")
    if np.any(entries > 1):
        raise ValueError("response matrix has entries above 1")
    sums = entries.sum(axis=0)
    bad = np.flatnonzero(sums > 1 + COLUMN_SUM_SLACK)
    if bad.size:
        raise ValueError(f"response column {int(bad[0])} sums to {sums[bad[0]]!r} > 1")


def column_sums(R) -> np.ndarray:
    entries = R.entries if isinstance(R, ResponseMatrix) else np.asarray(R, dtype=float)
    return entries.sum(axis=0)


# CSV ---------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_histogram_csv(hist: Histogram1D, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lo", "hi", "content"])
        for lo, hi, c in zip(hist.edges.lo, hist.edges.hi, hist.contents):
            w.writerow([_fmt(lo), _fmt(hi), _fmt(c)])


def read_histogram_csv(path) -> Histogram1D:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["lo", "hi", "content"]:
        raise ValueError(f"{path}: expected header lo,hi,content")
    body = [[float(v) for v in r] for r in rows[1:] if r]
    if not body:
        raise ValueError(f"{path}: no bins")
    lo = [r[0] for r in body]
    hi = [r[1] for r in body]
    if any(h != l for h, l in zip(hi[:-1], lo[1:])):
        raise ValueError(f"{path}: bins are not contiguous")
    return Histogram1D(BinEdges(lo + [hi[-1]]), [r[2] for r in body])


def write_matrix_csv(matrix, path, row_labels: Sequence = None, col_labels: Sequence = None) -> None:
    """Write a dense grid with a header row and column of bin indices.

    NaN entries are written as ``nan``.
    """
    m = np.asarray(matrix, dtype=float)
    rows = range(m.shape[0]) if row_labels is None else row_labels
    cols = range(m.shape[1]) if col_labels is None else col_labels
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + [str(c) for c in cols])
        for label, row in zip(rows, m):
            w.writerow([str(label)] + [_fmt(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:] if r], dtype=float)
