"""Scenario generators, the parameterized detector and response construction.

Two families of truth-level densities ship with the package:

* ``double_gaussian`` signal, parameters ``(mu1, mu2, sigma1, sigma2)`` with
  equal component weights;
* ``exponential`` signal or background, parameter ``(rate,)``;
* ``uniform`` background, parameters ``(lo, hi)``.

The detector accepts an event with probability ``theta3 - b*|x|/600`` and
smears accepted events by ``theta1 * Gaus(0, theta2 + a*sqrt(x/300))``.

Response matrices are available in two flavours.  :func:`build_response`
is a Monte Carlo construction from simulated events.  :class:`QuadratureModel`
evaluates the same conditional probabilities with fixed Gauss-Legendre
nodes, which makes ``R(theta)`` a smooth function of the nuisance
parameters and cheap enough to call inside a fit.
"""

from __future__ import annotations

import configparser
import logging
import zlib
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

from .errors import ConfigError, NumericalError
from .hist import BinEdges, Histogram1D, ResponseMatrix, as_edges, find_bins

logger = logging.getLogger(__name__)

#: Default number of MC events per response or background build.
DEFAULT_N_MC = 1_000_000
#: Minimum MC events required in every truth bin of a response build.
MIN_EVENTS_PER_BIN = 100

SIGNAL_MODELS = ("double_gaussian", "exponential")
BACKGROUND_MODELS = ("uniform", "exponential")


# Random streams ------------------------------------------------------------


def rng_stream(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Deterministic generator for a (master seed, purpose, replica) triple.

    Distinct labels or indices give independent streams via
    :class:`numpy.random.SeedSequence` spawn keys.
    """
    key = (zlib.crc32(label.encode("utf-8")), int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


# Densities -----------------------------------------------------------------


@dataclass(frozen=True)
class Component:
    """One term of a mixture density on the real line."""

    kind: str
    params: tuple
    weight: float = 1.0

    def __post_init__(self):
        if self.kind == "gauss":
            if self.params[1] <= 0:
                raise ConfigError("gaussian width must be positive")
        elif self.kind == "expo":
            if self.params[0] <= 0:
                raise ConfigError("exponential rate must be positive")
        elif self.kind == "uniform":
            if not self.params[0] < self.params[1]:
                raise ConfigError("uniform range must satisfy lo < hi")
        else:
            raise ConfigError(f"unknown density component {self.kind!r}")

    @property
    def support(self) -> tuple:
        if self.kind == "expo":
            return (0.0, np.inf)
        if self.kind == "uniform":
            return (float(self.params[0]), float(self.params[1]))
        return (-np.inf, np.inf)

    def mean(self) -> float:
        if self.kind == "gauss":
            return float(self.params[0])
        if self.kind == "expo":
            return 1.0 / self.params[0]
        return 0.5 * (self.params[0] + self.params[1])

    def mass(self, lo: float, hi: float) -> float:
        """Probability content of ``[lo, hi]``."""
        s_lo, s_hi = self.support
        lo, hi = max(lo, s_lo), min(hi, s_hi)
        if hi <= lo:
            return 0.0
        if self.kind == "gauss":
            m, s = self.params
            a, b = (lo - m) / s, (hi - m) / s
            if a > 0:
                return float(special.ndtr(-a) - special.ndtr(-b))
            return float(special.ndtr(b) - special.ndtr(a))
        if self.kind == "expo":
            r = self.params[0]
            return float(np.exp(-r * lo) - (0.0 if np.isinf(hi) else np.exp(-r * hi)))
        return (hi - lo) / (self.params[1] - self.params[0])

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "gauss":
            m, s = self.params
            return stats.norm.pdf(x, m, s)
        if self.kind == "expo":
            r = self.params[0]
            return np.where(x >= 0, r * np.exp(-r * np.maximum(x, 0.0)), 0.0)
        lo, hi = self.params
        return np.where((x >= lo) & (x <= hi), 1.0 / (hi - lo), 0.0)

    def ppf_within(self, u, lo: float, hi: float) -> np.ndarray:
        """Inverse CDF of the density truncated to ``[lo, hi]``."""
        u = np.asarray(u, dtype=float)
        s_lo, s_hi = self.support
        lo, hi = max(lo, s_lo), min(hi, s_hi)
        if self.kind == "gauss":
            m, s = self.params
            return stats.truncnorm.ppf(u, (lo - m) / s, (hi - m) / s, loc=m, scale=s)
        if self.kind == "expo":
            r = self.params[0]
            span = -np.expm1(-r * (hi - lo)) if np.isfinite(hi) else 1.0
            return lo - np.log1p(-u * span) / r
        return lo + u * (hi - lo)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gauss":
            return rng.normal(self.params[0], self.params[1], size=n)
        if self.kind == "expo":
            return rng.exponential(1.0 / self.params[0], size=n)
        return rng.uniform(self.params[0], self.params[1], size=n)


def make_density(model: str, params: Sequence[float]) -> tuple:
    """Mixture components for a named density."""
    p = tuple(float(v) for v in params)
    try:
        if model == "double_gaussian":
            mu1, mu2, s1, s2 = p
            return (Component("gauss", (mu1, s1), 0.5), Component("gauss", (mu2, s2), 0.5))
        if model == "exponential":
            (rate,) = p
            return (Component("expo", (rate,)),)
        if model == "uniform":
            lo, hi = p
            return (Component("uniform", (lo, hi)),)
    except ValueError as exc:
        raise ConfigError(f"wrong number of parameters for {model!r}: {p}") from exc
    raise ConfigError(f"unknown density model {model!r}")


def mixture_mass(components, lo: float, hi: float) -> float:
    return sum(c.weight * c.mass(lo, hi) for c in components)


def sample_mixture(components, rng: np.random.Generator, n: int) -> np.ndarray:
    n = int(n)
    if n < 0:
        raise ValueError("sample size must be non-negative")
    if n == 0:
        return np.empty(0)
    if len(components) == 1:
        return components[0].sample(rng, n)
    w = np.array([c.weight for c in components], dtype=float)
    which = rng.choice(len(components), size=n, p=w / w.sum())
    out = np.empty(n)
    for k, comp in enumerate(components):
        sel = which == k
        out[sel] = comp.sample(rng, int(sel.sum()))
    return out


def sample_mixture_within(components, rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    """Draw from the mixture conditioned on ``lo <= x <= hi``.

    Falls back to a uniform draw when the bin carries no representable mass.
    """
    masses = np.array([c.weight * c.mass(lo, hi) for c in components])
    if not masses.sum() > 0:
        logger.warning("density has no mass in [%g, %g]; sampling uniformly", lo, hi)
        return rng.uniform(lo, hi, size=n)
    which = rng.choice(len(components), size=n, p=masses / masses.sum())
    u = rng.random(n)
    out = np.empty(n)
    for k, comp in enumerate(components):
        sel = which == k
        if sel.any():
            out[sel] = comp.ppf_within(u[sel], lo, hi)
    return out


# Scenario description --------------------------------------------------------


@dataclass
class NuisanceSet:
    """Nuisance values, auxiliary measurements and their Gaussian widths."""

    values: np.ndarray
    aux: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float).reshape(-1)
        self.aux = np.array(self.aux, dtype=float).reshape(-1)
        self.widths = np.array(self.widths, dtype=float).reshape(-1)
        if not (self.values.size == self.aux.size == self.widths.size):
            raise ValueError("nuisance values, aux and widths must have equal length")
        if np.any(~(self.widths > 0)):
            raise ValueError("nuisance constraint widths must be positive")

    @property
    def size(self) -> int:
        return self.values.size

    @classmethod
    def empty(cls) -> "NuisanceSet":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    def with_aux(self, aux) -> "NuisanceSet":
        return NuisanceSet(self.values, aux, self.widths)


@dataclass
class ScenarioSpec:
    """Generative setup of one unfolding scenario."""

    name: str
    signal_model: str
    signal_params: tuple
    background_model: str
    background_params: tuple
    n_sig: float
    n_bkg: float
    truth_edges: BinEdges
    reco_edges: BinEdges
    a: float
    b: float
    nuisance: NuisanceSet
    seed: int = 0
    signal: tuple = field(init=False, repr=False)
    background: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.signal_model not in SIGNAL_MODELS:
            raise ConfigError(f"unknown signal model {self.signal_model!r}")
        if self.background_model not in BACKGROUND_MODELS:
            raise ConfigError(f"unknown background model {self.background_model!r}")
        if not self.n_sig > 0:
            raise ConfigError("n_sig must be positive")
        if not self.n_bkg >= 0:
            raise ConfigError("n_bkg must be non-negative")
        if self.nuisance.size != 3:
            raise ConfigError("the detector model needs exactly three nuisance parameters")
        self.truth_edges = as_edges(self.truth_edges)
        self.reco_edges = as_edges(self.reco_edges)
        self.signal_params = tuple(float(v) for v in self.signal_params)
        self.background_params = tuple(float(v) for v in self.background_params)
        self.signal = make_density(self.signal_model, self.signal_params)
        self.background = make_density(self.background_model, self.background_params)
        if self.a != 0 and self.truth_edges.edges[0] < 0:
            raise ConfigError("a != 0 needs non-negative truth values")

    def replace(self, **changes) -> "ScenarioSpec":
        kw = {k: getattr(self, k) for k in (
            "name", "signal_model", "signal_params", "background_model",
            "background_params", "n_sig", "n_bkg", "truth_edges", "reco_edges",
            "a", "b", "nuisance", "seed")}
        kw.update(changes)
        return ScenarioSpec(**kw)

    def smear_positive(self, theta) -> bool:
        """True when ``theta`` gives a positive smearing width everywhere."""
        return self.min_width(theta) > 0

    def min_width(self, theta) -> float:
        """Smallest ``theta2 + a*sqrt(x/300)`` over the truth range."""
        x0 = max(float(self.truth_edges.edges[0]), 0.0)
        return float(theta[1] + self.a * np.sqrt(x0 / 300.0))


DOUBLE_GAUSSIAN = dict(
    name="double_gaussian",
    signal_model="double_gaussian",
    signal_params=(1.5, -1.5, 0.12, 0.12),
    background_model="uniform",
    background_params=(-4.0, 4.0),
    n_sig=50000,
    n_bkg=5000,
    truth_edges=(-4.0, -2.4, -0.8, 0.8, 2.4, 4.0),
    reco_edges=(-4.0, -2.4, -0.8, 0.8, 2.4, 4.0),
    a=0.0,
    b=0.0,
)

EXPONENTIAL = dict(
    name="exponential",
    signal_model="exponential",
    signal_params=(0.14,),
    background_model="exponential",
    background_params=(0.15,),
    n_sig=10000,
    n_bkg=40000,
    truth_edges=(0, 2, 4, 6, 8, 10, 12, 14, 18, 25, 35, 60),
    reco_edges=(0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 20, 25, 30, 35, 45, 60),
    a=1.0,
    b=1.0,
)

NOMINAL_AUX = (1.0, 0.3, 0.95)
NOMINAL_WIDTHS = (0.01, 0.05, 0.02)


def shipped_scenario(name: str, seed: int = 0, widths=NOMINAL_WIDTHS) -> ScenarioSpec:
    """One of the two built-in scenarios with nominal nuisance parameters."""
    table = {"double_gaussian": DOUBLE_GAUSSIAN, "exponential": EXPONENTIAL}
    if name not in table:
        raise ConfigError(f"unknown scenario {name!r}")
    nuis = NuisanceSet(NOMINAL_AUX, NOMINAL_AUX, widths)
    return ScenarioSpec(nuisance=nuis, seed=seed, **table[name])


_SCENARIO_KEYS = {
    "name", "signal_model", "signal_params", "background_model", "background_params",
    "n_sig", "n_bkg", "truth_edges", "reco_edges", "a", "b", "theta", "theta_aux",
    "theta_width", "seed",
}


def _floats(text: str, key: str) -> tuple:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"malformed value for {key}: {text!r}") from exc


def parse_scenario(text: str, source: str = "<string>") -> ScenarioSpec:
    """Read a scenario from the ``[scenario]`` section of a key-value file."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if not cp.has_section("scenario"):
        raise ConfigError(f"{source}: missing [scenario] section")
    sec = dict(cp.items("scenario"))
    for key in sec:
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"unknown key: {key}")
    required = _SCENARIO_KEYS - {"theta", "seed"}
    missing = sorted(required - sec.keys())
    if missing:
        raise ConfigError(f"{source}: missing required key {missing[0]}")

    def scalar(key):
        vals = _floats(sec[key], key)
        if len(vals) != 1:
            raise ConfigError(f"{key} must be a single number")
        return vals[0]

    aux = _floats(sec["theta_aux"], "theta_aux")
    try:
        nuis = NuisanceSet(
            _floats(sec["theta"], "theta") if "theta" in sec else aux,
            aux,
            _floats(sec["theta_width"], "theta_width"),
        )
        return ScenarioSpec(
            name=sec["name"].strip(),
            signal_model=sec["signal_model"].strip(),
            signal_params=_floats(sec["signal_params"], "signal_params"),
            background_model=sec["background_model"].strip(),
            background_params=_floats(sec["background_params"], "background_params"),
            n_sig=scalar("n_sig"),
            n_bkg=scalar("n_bkg"),
            truth_edges=BinEdges(_floats(sec["truth_edges"], "truth_edges")),
            reco_edges=BinEdges(_floats(sec["reco_edges"], "reco_edges")),
            a=scalar("a"),
            b=scalar("b"),
            nuisance=nuis,
            seed=int(scalar("seed")) if "seed" in sec else 0,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_scenario(path_or_name) -> ScenarioSpec:
    """Load a scenario file, or a shipped scenario by name."""
    name = str(path_or_name)
    if name in ("double_gaussian", "exponential"):
        text = resources.files("unfoldcov.configs").joinpath(f"{name}.scenario").read_text()
        return parse_scenario(text, source=name)
    path = Path(name)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    return parse_scenario(text, source=str(path))


# Sampling and detector -------------------------------------------------------


def sample_signal(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. truth values from the scenario's signal density."""
    return sample_mixture(spec.signal, rng, n)


def sample_background(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. truth values from the scenario's background density."""
    return sample_mixture(spec.background, rng, n)


def smear_width(x, theta, a: float) -> np.ndarray:
    """Width ``theta2 + a*sqrt(x/300)`` of the smearing Gaussian, checked."""
    x = np.asarray(x, dtype=float)
    if a != 0:
        if np.any(x < 0):
            raise ValueError("smear width with a != 0 is undefined for negative x")
        w = theta[1] + a * np.sqrt(x / 300.0)
    else:
        w = np.full_like(x, float(theta[1]))
    if np.any(~(w > 0)):
        raise NumericalError(f"non-positive smear width {float(np.min(w))!r} at theta={list(theta)}")
    return w


def efficiency(x, theta, b: float) -> np.ndarray:
    """Acceptance probability ``theta3 - b*|x|/600`` clipped to [0, 1]."""
    return np.clip(theta[2] - b * np.abs(np.asarray(x, dtype=float)) / 600.0, 0.0, 1.0)


def apply_detector(x_true: float, theta, a: float, b: float, rng: np.random.Generator) -> Optional[float]:
    """Reconstruct one event; None when it fails the efficiency cut."""
    width = float(smear_width(x_true, theta, a))
    eps = rng.random()
    if eps < theta[2] - b * abs(x_true) / 600.0:
        return x_true + theta[0] * rng.normal(0.0, width)
    return None


def detect_many(x_true, theta, a: float, b: float, rng: np.random.Generator):
    """Vectorized detector: returns ``(accepted_mask, x_reco)``.

    ``x_reco`` is NaN for rejected events.
    """
    x = np.asarray(x_true, dtype=float)
    width = smear_width(x, theta, a)
    eps = rng.random(x.size)
    z = rng.standard_normal(x.size)
    accepted = eps < theta[2] - b * np.abs(x) / 600.0
    reco = np.where(accepted, x + theta[0] * width * z, np.nan)
    return accepted, reco


def _split_counts(n: int, parts: int) -> list:
    base, rem = divmod(int(n), parts)
    return [base + (1 if j < rem else 0) for j in range(parts)]


def build_response(
    spec: ScenarioSpec,
    theta,
    n_mc: int,
    rng: np.random.Generator,
    min_events: int = DEFAULT_N_MC,
) -> ResponseMatrix:
    """Monte Carlo response matrix.

    The MC sample is stratified over truth bins: each bin receives an equal
    share of ``n_mc`` events drawn from the signal density restricted to the
    bin.  ``R[i, j]`` is the fraction of bin-``j`` events reconstructed in
    reco bin ``i``; lost or out-of-range events only count in the
    denominator.
    """
    if n_mc < min_events:
        raise ValueError(f"n_mc={n_mc} is below the configured minimum {min_events}")
    tedges, redges = spec.truth_edges, spec.reco_edges
    counts = _split_counts(n_mc, tedges.n_bins)
    R = np.zeros((redges.n_bins, tedges.n_bins))
    for j, (lo, hi, nj) in enumerate(zip(tedges.lo, tedges.hi, counts)):
        if nj < MIN_EVENTS_PER_BIN:
            raise NumericalError(
                f"truth bin {j} [{lo:g}, {hi:g}) received {nj} MC events; increase n_mc"
            )
        x = sample_mixture_within(spec.signal, rng, nj, lo, hi)
        accepted, reco = detect_many(x, theta, spec.a, spec.b, rng)
        idx = find_bins(redges, reco[accepted])
        idx = idx[idx >= 0]
        R[:, j] = np.bincount(idx, minlength=redges.n_bins) / nj
    return ResponseMatrix(R, tedges, redges)


def build_background(
    spec: ScenarioSpec,
    theta,
    n_mc: int,
    rng: np.random.Generator,
    min_events: int = DEFAULT_N_MC,
) -> Histogram1D:
    """Expected background on the reco edges; each MC event weighs ``n_bkg/n_mc``."""
    if spec.n_bkg == 0:
        return Histogram1D.empty(spec.reco_edges)
    if n_mc < min_events:
        raise ValueError(f"n_mc={n_mc} is below the configured minimum {min_events}")
    x = sample_background(spec, n_mc, rng)
    accepted, reco = detect_many(x, theta, spec.a, spec.b, rng)
    return Histogram1D.empty(spec.reco_edges).fill_many(reco[accepted], spec.n_bkg / n_mc)


def generate_observed(nu, rng: np.random.Generator) -> Histogram1D:
    """Independent Poisson counts around the expectations ``nu``."""
    if isinstance(nu, Histogram1D):
        edges, mean = nu.edges, nu.contents
    else:
        mean = np.asarray(nu, dtype=float)
        edges = BinEdges(np.arange(mean.size + 1))
    if np.any(~(mean >= 0)):
        raise ValueError("Poisson expectations must be non-negative")
    return Histogram1D(edges, rng.poisson(mean).astype(float))


def truth_histogram(spec: ScenarioSpec) -> Histogram1D:
    """Binned expectation of the signal density scaled to ``n_sig``."""
    e = spec.truth_edges
    mass = [mixture_mass(spec.signal, lo, hi) for lo, hi in zip(e.lo, e.hi)]
    return Histogram1D(e, spec.n_sig * np.array(mass))


def truth_shape(spec: ScenarioSpec) -> np.ndarray:
    """Fraction of the in-range signal density in each truth bin."""
    mu = truth_histogram(spec).contents
    return mu / mu.sum()


# Response models -------------------------------------------------------------


class _CachedModel:
    """Small per-theta cache shared by the response models."""

    cache_size = 64

    def __init__(self):
        self._cache = {}

    def _lookup(self, theta):
        key = tuple(float(t) for t in theta)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._compute(np.array(key))
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = hit
        return hit

    def response(self, theta) -> ResponseMatrix:
        return self._lookup(theta)[0]

    def theta_bounds(self):
        """Nuisance box: with ``b == 0`` the model is flat in ``theta3`` above 1."""
        lb, ub = np.full(3, -np.inf), np.full(3, np.inf)
        if self.spec.b == 0:
            ub[2] = 1.0
        return lb, ub

    def background(self, theta) -> Histogram1D:
        return self._lookup(theta)[1]

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state


def _gauss_legendre01(order: int):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


class QuadratureModel(_CachedModel):
    """Deterministic ``R(theta)`` and ``beta(theta)`` by Gauss-Legendre quadrature.

    For a truth value ``x`` the probability to land in reco bin ``[lo, hi)``
    is ``eff(x) * (Phi((hi-x)/s) - Phi((lo-x)/s))`` with
    ``s = |theta1| * (theta2 + a*sqrt(x/300))``.  Averages over ``x`` use
    quadrature nodes placed at quantiles of the signal (background) density
    restricted to each sub-interval, where sub-intervals are the truth bins
    split at reco edges.

    Args:
        spec: Scenario providing densities, binnings and detector constants.
        order: Gauss-Legendre points per sub-interval and density component.
    """

    def __init__(self, spec: ScenarioSpec, order: int = 24):
        super().__init__()
        self.spec = spec
        self.order = int(order)
        u, w = _gauss_legendre01(self.order)
        self._unit = (u, w)
        redges = spec.reco_edges.edges
        self._reco_edges = redges

        xs, ws, cols = [], [], []
        for j, (lo, hi) in enumerate(zip(spec.truth_edges.lo, spec.truth_edges.hi)):
            total = mixture_mass(spec.signal, lo, hi)
            pieces = self._pieces(lo, hi)
            if not total > 0:
                logger.warning("signal has no mass in truth bin %d; using a flat shape", j)
                for p_lo, p_hi in pieces:
                    xs.append(p_lo + u * (p_hi - p_lo))
                    ws.append(w * (p_hi - p_lo) / (hi - lo))
                    cols.append(np.full(self.order, j))
                continue
            for p_lo, p_hi in pieces:
                for comp in spec.signal:
                    m = comp.weight * comp.mass(p_lo, p_hi)
                    if m <= 0 or m < 1e-16 * total:
                        continue
                    xs.append(comp.ppf_within(u, p_lo, p_hi))
                    ws.append(w * m / total)
                    cols.append(np.full(self.order, j))
        self._sig_x = np.concatenate(xs)
        self._sig_w = np.concatenate(ws)
        self._sig_col = np.concatenate(cols)
        self._sig_scatter = np.zeros((spec.truth_edges.n_bins, self._sig_x.size))
        self._sig_scatter[self._sig_col, np.arange(self._sig_x.size)] = self._sig_w

        xs, ws = [], []
        if spec.n_bkg > 0:
            cuts = np.concatenate(([-np.inf], redges, [np.inf]))
            for p_lo, p_hi in zip(cuts[:-1], cuts[1:]):
                for comp in spec.background:
                    s_lo, s_hi = comp.support
                    lo, hi = max(p_lo, s_lo), min(p_hi, s_hi)
                    if not hi > lo:
                        continue
                    m = comp.weight * comp.mass(lo, hi)
                    if m <= 0:
                        continue
                    xs.append(comp.ppf_within(u, lo, hi))
                    ws.append(w * m)
        total_w = sum(c.weight for c in spec.background)
        self._bkg_x = np.concatenate(xs) if xs else np.empty(0)
        self._bkg_w = (np.concatenate(ws) / total_w) if ws else np.empty(0)

        self._sig_mass = np.array([mixture_mass(spec.signal, lo, hi)
                                   for lo, hi in zip(spec.truth_edges.lo, spec.truth_edges.hi)])

    def _pieces(self, lo, hi, extra=()):
        cuts = np.concatenate((self._reco_edges, np.asarray(extra, dtype=float)))
        inner = np.unique(cuts[(cuts > lo) & (cuts < hi)])
        cuts = np.concatenate(([lo], inner, [hi]))
        return list(zip(cuts[:-1], cuts[1:]))

    def _bin_probs(self, x, theta, eff="clip"):
        """Reco-bin probabilities per node; ``eff`` is clip, linear or none."""
        spec = self.spec
        if eff == "clip":
            eff = efficiency(x, theta, spec.b)
        elif eff == "linear":
            eff = np.maximum(theta[2] - spec.b * np.abs(x) / 600.0, 0.0)
        else:
            eff = np.ones_like(x)
        sigma = abs(theta[0]) * smear_width(x, theta, spec.a)
        e = self._reco_edges
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (e[None, :] - x[:, None]) / sigma[:, None]
            cdf = special.ndtr(z)
        # zero smearing: step function with the last edge inclusive
        if np.any(sigma == 0):
            step = (x[:, None] >= e[None, :]).astype(float)
            step[:, -1] = (x > e[-1]).astype(float)
            cdf = np.where(sigma[:, None] == 0, 1.0 - step, cdf)
        return eff[:, None] * np.diff(cdf, axis=1)

    def _excess(self, components, lo, hi, x_c, theta):
        """Integral of ``pdf * (eff_linear - 1) * P(reco bin)`` over ``|x| < x_c``."""
        out = np.zeros(self._reco_edges.size - 1)
        s_lo = min(c.support[0] for c in components)
        s_hi = max(c.support[1] for c in components)
        lo, hi = max(lo, -x_c, s_lo), min(hi, x_c, s_hi)
        if not hi > lo:
            return out
        u, w = self._unit
        for p_lo, p_hi in self._pieces(lo, hi, extra=(0.0,)):
            x = p_lo + u * (p_hi - p_lo)
            dens = sum(c.weight * c.pdf(x) for c in components)
            excess = theta[2] - self.spec.b * np.abs(x) / 600.0 - 1.0
            out += ((w * (p_hi - p_lo) * dens * excess)[:, None]
                    * self._bin_probs(x, theta, eff="none")).sum(axis=0)
        return out

    def _compute(self, theta):
        spec = self.spec
        # With b > 0 the efficiency saturates at 1 for |x| < x_c.  The fixed
        # nodes integrate the unsaturated line and the saturated excess is
        # removed on nodes that follow x_c, which keeps R smooth in theta3.
        saturates = spec.b > 0 and theta[2] > 1.0
        mode = "linear" if saturates else "clip"
        probs = self._bin_probs(self._sig_x, theta, mode)
        R = (self._sig_scatter @ probs).T
        if self._bkg_x.size:
            beta = spec.n_bkg * (self._bkg_w @ self._bin_probs(self._bkg_x, theta, mode))
        else:
            beta = np.zeros(spec.reco_edges.n_bins)
        if saturates:
            x_c = 600.0 * (theta[2] - 1.0) / spec.b
            for j, (lo, hi) in enumerate(zip(spec.truth_edges.lo, spec.truth_edges.hi)):
                if self._sig_mass[j] > 0:
                    R[:, j] -= self._excess(spec.signal, lo, hi, x_c, theta) / self._sig_mass[j]
            if spec.n_bkg > 0:
                total_w = sum(c.weight for c in spec.background)
                beta = beta - spec.n_bkg * self._excess(spec.background, -np.inf, np.inf, x_c, theta) / total_w
        R = np.clip(R, 0.0, None)
        resp = ResponseMatrix(R, spec.truth_edges, spec.reco_edges, validate=False)
        return resp, Histogram1D(spec.reco_edges, np.clip(beta, 0.0, None))


class MonteCarloModel(_CachedModel):
    """``R(theta)`` and ``beta(theta)`` from MC builds with frozen seeds.

    Every evaluation replays the same random streams, so differences between
    nearby ``theta`` values are free of sampling noise.
    """

    def __init__(self, spec: ScenarioSpec, n_mc: int = DEFAULT_N_MC, seed: int = None,
                 min_events: int = None):
        super().__init__()
        self.spec = spec
        self.n_mc = int(n_mc)
        self.seed = spec.seed if seed is None else int(seed)
        self.min_events = self.n_mc if min_events is None else int(min_events)

    def _compute(self, theta):
        resp = build_response(self.spec, theta, self.n_mc, rng_stream(self.seed, "response"),
                              min_events=self.min_events)
        beta = build_background(self.spec, theta, self.n_mc, rng_stream(self.seed, "background"),
                                min_events=self.min_events)
        return resp, beta


def make_model(spec: ScenarioSpec, kind: str = "quadrature", n_mc: int = DEFAULT_N_MC):
    if kind == "quadrature":
        return QuadratureModel(spec)
    if kind == "mc":
        return MonteCarloModel(spec, n_mc=n_mc, min_events=min(n_mc, DEFAULT_N_MC))
    raise ConfigError(f"unknown response model {kind!r}")


@dataclass
class ScenarioData:
    """Everything generated once per scenario run."""

    spec: ScenarioSpec
    truth: Histogram1D
    response: ResponseMatrix
    background: Histogram1D
    expected: Histogram1D
    observed: Histogram1D


def generate_scenario(spec: ScenarioSpec, n_mc: int = DEFAULT_N_MC, min_events: int = None) -> ScenarioData:
    """Build the nominal response by MC and draw the single observed dataset."""
    theta = spec.nuisance.aux
    min_events = n_mc if min_events is None else min_events
    resp = build_response(spec, theta, n_mc, rng_stream(spec.seed, "data-response"), min_events=min_events)
    beta = build_background(spec, theta, n_mc, rng_stream(spec.seed, "data-background"), min_events=min_events)
    truth = truth_histogram(spec)
    nu = Histogram1D(spec.reco_edges, resp.entries @ truth.contents + beta.contents)
    observed = generate_observed(nu, rng_stream(spec.seed, "observed"))
    return ScenarioData(spec, truth, resp, beta, nu, observed)
