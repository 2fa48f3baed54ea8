"""Synthetic assets: well features, parameter trajectories and separator data.

Three scenarios are provided:

- a constructed three-well case with a single oil-factor jump;
- a synthetic copy whose compositions interpolate a reference well-test
  table while all tuning factors equal one;
- a synthetic random case that starts each composition at a uniform random
  value and replays the reference increments in shuffled order.

One time step is one day.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .choke_model import FluidProperties, WellFeatures
from .errors import ConfigError, ConsistencyError, DatasetParseError, InvalidInputError
from .state_space import (
    AssetState,
    NoiseConfig,
    Observation,
    ObservationKind,
    observation_covariance,
    predicted_separator_rates,
)

logger = logging.getLogger(__name__)

# Choke opening factor per well and choke random-walk step of the wells that
# do not use the shared one, in the constructed case
CONSTRUCTED_CHOKE_SCALE = np.array([1.0, 0.7, 0.3])
CONSTRUCTED_CHOKE_STEPS = {1: 0.1, 2: 0.2}


@dataclass(frozen=True)
class FeatureSpec:
    """Ranges and random-walk step sizes of the generated features.

    Downstream pressure is generated as a fraction of the upstream pressure
    drawn from ``ratio_range``, which keeps ``p2 < p1``.
    """

    u_range: Tuple[float, float] = (0.1, 1.0)
    u_step: float = 0.02
    p1_range: Tuple[float, float] = (40.0e5, 80.0e5)
    p1_step: float = 0.5e5
    ratio_range: Tuple[float, float] = (0.3, 0.9)
    ratio_step: float = 0.01
    t_range: Tuple[float, float] = (320.0, 370.0)
    t_step: float = 0.5
    shut_in_probability: float = 0.0

    def __post_init__(self):
        for name in ("u_range", "p1_range", "ratio_range", "t_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"'{name}' has lower bound above upper bound")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not (0.0 < self.u_range[0] and self.u_range[1] <= 1.0):
            raise ConfigError(f"'u_range' must lie in (0, 1], got {self.u_range}")
        if self.p1_range[0] <= 0 or self.t_range[0] <= 0:
            raise ConfigError("Pressures and temperatures must be positive")
        if not (0.0 < self.ratio_range[0] and self.ratio_range[1] < 1.0):
            raise ConfigError(
                f"'ratio_range' must lie in (0, 1) so that p2 < p1, got {self.ratio_range}"
            )
        for name in ("u_step", "p1_step", "ratio_step", "t_step"):
            if getattr(self, name) < 0:
                raise ConfigError(f"'{name}' must be nonnegative")
        if not 0.0 <= self.shut_in_probability < 1.0:
            raise ConfigError(
                f"Shut-in probability must lie in [0, 1), got {self.shut_in_probability}"
            )


@dataclass(frozen=True)
class ScenarioSpec:
    """Definition of a synthetic asset.

    Parameters
    ----------
    m, n : int
        Number of wells and time steps
    feature_spec : FeatureSpec
        Feature ranges and random walks
    noise : NoiseConfig
        Noise levels of the generated measurements
    seed : int
        Seed used when no generator is passed explicitly
    welltest_schedule : List[Tuple[int, int]]
        ``(t, well)`` pairs; at most one test per step
    true_params : AssetState, optional
        Parameter trajectories of shape ``(n, m)``
    props : FluidProperties
        Fluid and choke constants
    rate_scale : float
        Factor converting measured rates to flow-meter units; generated
        measurements are flow-meter rates divided by it
    noise_enabled : bool
        Add measurement noise
    well_terms : bool
        Include the per-well noise terms, not only the separator term
    """

    m: int
    n: int
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    welltest_schedule: List[Tuple[int, int]] = field(default_factory=list)
    true_params: Optional[AssetState] = None
    props: FluidProperties = field(default_factory=FluidProperties)
    rate_scale: float = 0.1
    noise_enabled: bool = True
    well_terms: bool = True

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError(f"Scenario needs wells and steps, got m={self.m}, n={self.n}")
        if self.rate_scale <= 0:
            raise ConfigError(f"Rate scale must be positive, got {self.rate_scale}")
        times = [t for t, _ in self.welltest_schedule]
        if len(set(times)) != len(times):
            raise ConfigError("Well-test schedule has two tests at one time step")
        for t, j in self.welltest_schedule:
            if not 0 <= t < self.n or not 0 <= j < self.m:
                raise ConfigError(f"Well test ({t}, {j}) lies outside the scenario")
        if self.true_params is not None and self.true_params.beta.shape != (
            self.n,
            self.m,
        ):
            raise ConfigError(
                f"True parameters have shape {self.true_params.beta.shape}, "
                f"expected {(self.n, self.m)}"
            )


@dataclass
class FeatureTable:
    """Features of all wells over time, arrays of shape ``(n, m)``."""

    u: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    temperature: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.p1 = np.asarray(self.p1, dtype=float)
        self.p2 = np.asarray(self.p2, dtype=float)
        self.temperature = np.asarray(self.temperature, dtype=float)
        self.active = np.asarray(self.active, dtype=bool)
        shapes = {
            a.shape for a in (self.u, self.p1, self.p2, self.temperature, self.active)
        }
        if len(shapes) != 1 or self.u.ndim != 2:
            raise InvalidInputError(f"Feature arrays must share one 2-D shape: {shapes}")

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def m(self) -> int:
        return self.u.shape[1]

    def at(self, t: int) -> List[WellFeatures]:
        """Features of every well at step ``t``."""
        return [
            WellFeatures(
                u=float(self.u[t, j]),
                p1=float(self.p1[t, j]),
                p2=float(self.p2[t, j]),
                temperature=float(self.temperature[t, j]),
                active=bool(self.active[t, j]),
            )
            for j in range(self.m)
        ]

    def rows(self) -> List[List[WellFeatures]]:
        return [self.at(t) for t in range(self.n)]


@dataclass
class Dataset:
    """Features, separator observations and, for synthetic data, the truth."""

    features: FeatureTable
    observations: List[Observation]
    truth: Optional[AssetState] = None

    def __post_init__(self):
        if len(self.observations) != self.features.n:
            raise ConsistencyError(
                f"{len(self.observations)} observations for {self.features.n} steps"
            )
        for t, obs in enumerate(self.observations):
            if obs.t != t:
                raise ConsistencyError(f"Observation {t} carries time index {obs.t}")
            flagged = set(np.flatnonzero(self.features.active[t]).tolist())
            if set(obs.active) != flagged:
                raise ConsistencyError(
                    f"Observation at t={t} lists wells {sorted(obs.active)} but "
                    f"features flag {sorted(flagged)} as active"
                )
        if self.truth is not None and self.truth.beta.shape != self.features.u.shape:
            raise ConsistencyError(
                f"Truth has shape {self.truth.beta.shape}, "
                f"features {self.features.u.shape}"
            )

    @property
    def n(self) -> int:
        return self.features.n

    @property
    def m(self) -> int:
        return self.features.m

    @property
    def welltests(self) -> List[Observation]:
        return [obs for obs in self.observations if obs.is_welltest]


@dataclass(frozen=True)
class ReferenceWellTests:
    """Frozen table of well-test compositions driving the benchmark cases."""

    t: np.ndarray
    well: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray

    def schedule(self) -> List[Tuple[int, int]]:
        """``(t, well)`` pairs sorted by time."""
        order = np.argsort(self.t, kind="stable")
        return [(int(self.t[i]), int(self.well[i])) for i in order]

    def for_well(self, j: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Test times, gas fractions and oil factors of well ``j``, by time."""
        mask = self.well == j
        order = np.argsort(self.t[mask], kind="stable")
        return self.t[mask][order], self.gamma[mask][order], self.lam[mask][order]

    def counts(self, m: int) -> List[int]:
        return [int(np.sum(self.well == j)) for j in range(m)]


def load_reference_welltests(path: Path) -> ReferenceWellTests:
    """Read a reference well-test table (``t, well_id, gamma, lambda``)."""
    frame = pd.read_csv(path)
    for column in ("t", "well_id", "gamma", "lambda"):
        if column not in frame.columns:
            raise DatasetParseError(f"{path}: missing column '{column}'")
    return ReferenceWellTests(
        t=frame["t"].to_numpy(dtype=int),
        well=frame["well_id"].to_numpy(dtype=int),
        gamma=frame["gamma"].to_numpy(dtype=float),
        lam=frame["lambda"].to_numpy(dtype=float),
    )


def _bounded_walk(
    start: np.ndarray,
    step: float,
    bounds: Tuple[float, float],
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    increments = step * rng.standard_normal((n, start.size))
    walk = np.empty((n, start.size))
    walk[0] = start
    for t in range(1, n):
        walk[t] = np.clip(walk[t - 1] + increments[t], *bounds)
    return walk


def generate_features(spec: ScenarioSpec, rng: np.random.Generator) -> FeatureTable:
    """Bounded random-walk features with random shut-ins.

    A well is shut in (``u = 0``, inactive) at each step independently with
    the configured probability. At a scheduled well test only the tested
    well is active and it is always open.
    """
    fs = spec.feature_spec
    n, m = spec.n, spec.m

    def walk(bounds, step):
        return _bounded_walk(rng.uniform(*bounds, size=m), step, bounds, n, rng)

    u_open = walk(fs.u_range, fs.u_step)
    p1 = walk(fs.p1_range, fs.p1_step)
    ratio = walk(fs.ratio_range, fs.ratio_step)
    temperature = walk(fs.t_range, fs.t_step)
    active = rng.random((n, m)) >= fs.shut_in_probability

    schedule = dict(spec.welltest_schedule)
    for t in range(n):
        if t in schedule:
            active[t] = False
            active[t, schedule[t]] = True
        elif active[t].sum() == 1 and m > 1:
            # A production step with one producer would read as a well test
            active[t, np.flatnonzero(~active[t])[0]] = True

    u = np.where(active, u_open, 0.0)
    for t, j in schedule.items():
        u[t] = u_open[t]
    return FeatureTable(u=u, p1=p1, p2=p1 * ratio, temperature=temperature, active=active)


def _noisy_rates(
    clean: np.ndarray,
    state: AssetState,
    active: Sequence[int],
    spec: ScenarioSpec,
    rng: np.random.Generator,
) -> np.ndarray:
    wells = active if spec.well_terms else ()
    cov = observation_covariance(state, clean, wells, spec.noise)
    noisy = clean + rng.multivariate_normal(np.zeros(3), cov)
    return np.maximum(noisy, 0.0)


def simulate(
    spec: ScenarioSpec,
    features: FeatureTable,
    truth: AssetState,
    rng: np.random.Generator,
) -> Dataset:
    """Separator observations of the true asset.

    Clean rates obey the mass balance exactly in flow-meter units, where
    noise is added and negative rates are clipped to zero. Measured rates
    are reported divided by the rate scale, so scaling them back reproduces
    the true tuning factors.
    """
    schedule = dict(spec.welltest_schedule)
    observations = []
    for t in range(spec.n):
        active = frozenset(np.flatnonzero(features.active[t]).tolist())
        rates = predicted_separator_rates(truth[t], features.at(t), active, spec.props)
        if spec.noise_enabled and active:
            rates = _noisy_rates(rates, truth[t], sorted(active), spec, rng)
        y = rates / spec.rate_scale
        kind = ObservationKind.WELLTEST if t in schedule else ObservationKind.PRODUCTION
        observations.append(Observation(t=t, y=tuple(y), kind=kind, active=active))
    return Dataset(features=features, observations=observations, truth=truth)


def constructed_scenario(noise_enabled: bool = True) -> ScenarioSpec:
    """Three wells of one composition over 50 steps; Well 1 is tested at
    t=25 after leaving production at t=24; Well 2's oil factor drops at t=10."""
    n, m = 50, 3
    beta = np.ones((n, m))
    gamma = np.full((n, m), 0.20)
    lam = np.full((n, m), 0.80)
    lam[10:, 1] = 0.60
    truth = AssetState(beta, gamma, lam, np.zeros((n, m), dtype=bool))
    truth.jumps[10, 1] = True
    return ScenarioSpec(
        m=m,
        n=n,
        feature_spec=FeatureSpec(
            u_range=(0.3, 0.8), u_step=0.01, p1_step=0.2e5, ratio_step=0.005
        ),
        welltest_schedule=[(25, 0)],
        true_params=truth,
        noise_enabled=noise_enabled,
        well_terms=False,
    )


def generate_constructed_case(
    rng: np.random.Generator, noise_enabled: bool = True
) -> Dataset:
    """Dataset of the constructed three-well case.

    Wells 2 and 3 have smaller chokes than Well 1 that move more from step
    to step. Measurements carry separator noise only, no model error.
    """
    spec = constructed_scenario(noise_enabled)
    features = generate_features(spec, rng)
    u_range = spec.feature_spec.u_range
    for j, step in CONSTRUCTED_CHOKE_STEPS.items():
        walk = _bounded_walk(features.u[:1, j], step, u_range, spec.n, rng)
        features.u[:, j] = walk[:, 0]
    features.u *= CONSTRUCTED_CHOKE_SCALE
    # Well 1 is moved to the test separator one step before its test
    features.active[24, 0] = False
    return simulate(spec, features, spec.true_params, rng)


def _check_reference(reference: ReferenceWellTests, spec: ScenarioSpec):
    counts = reference.counts(spec.m)
    short = [j for j, c in enumerate(counts) if c < 2]
    if short:
        raise InvalidInputError(f"Wells {short} have fewer than two reference well tests")
    if np.any(reference.t < 0) or np.any(reference.t >= spec.n):
        raise InvalidInputError("Reference well tests lie outside the scenario horizon")
    if np.any((reference.gamma < 0) | (reference.gamma > 1)) or np.any(
        (reference.lam < 0) | (reference.lam > 1)
    ):
        raise InvalidInputError("Reference compositions must lie in [0, 1]")


def interpolate_nodes(n: int, times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Piecewise-linear path through the nodes, constant outside them."""
    return np.interp(np.arange(n), times, values)


def shuffled_increments(
    values: np.ndarray, rng: np.random.Generator
) -> Tuple[float, np.ndarray]:
    """Uniform start in [0, 1] and the reference increments in random order."""
    start = rng.uniform(0.0, 1.0)
    return start, rng.permutation(np.diff(values))


def clamped_path(start: float, increments: np.ndarray) -> np.ndarray:
    """Accumulate increments from ``start``, clamping each node to [0, 1]."""
    path = np.empty(len(increments) + 1)
    path[0] = start
    for k, step in enumerate(increments, start=1):
        path[k] = min(max(path[k - 1] + step, 0.0), 1.0)
    return path


def _composition_truth(spec: ScenarioSpec, nodes: Dict[int, Tuple]) -> AssetState:
    gamma = np.empty((spec.n, spec.m))
    lam = np.empty((spec.n, spec.m))
    for j in range(spec.m):
        times, gamma_nodes, lam_nodes = nodes[j]
        gamma[:, j] = interpolate_nodes(spec.n, times, gamma_nodes)
        lam[:, j] = interpolate_nodes(spec.n, times, lam_nodes)
    jumps = np.zeros((spec.n, spec.m), dtype=bool)
    jumps[1:] = (np.diff(gamma, axis=0) != 0) | (np.diff(lam, axis=0) != 0)
    return AssetState(np.ones((spec.n, spec.m)), gamma, lam, jumps)


def generate_synthetic_copy(
    reference: ReferenceWellTests, spec: ScenarioSpec, rng: np.random.Generator
) -> Dataset:
    """Dataset whose compositions interpolate the reference well tests.

    All tuning factors equal one. The reference schedule replaces the
    scenario's own.
    """
    _check_reference(reference, spec)
    spec = replace(spec, welltest_schedule=reference.schedule())
    nodes = {j: reference.for_well(j) for j in range(spec.m)}
    truth = _composition_truth(spec, nodes)
    features = generate_features(spec, rng)
    return simulate(spec, features, truth, rng)


def generate_synthetic_random(
    reference: ReferenceWellTests, spec: ScenarioSpec, rng: np.random.Generator
) -> Dataset:
    """Like :func:`generate_synthetic_copy` with randomized compositions.

    Each well's gas fraction and oil factor start uniformly in [0, 1] and
    follow the reference increments in shuffled order, clamped to [0, 1].
    """
    _check_reference(reference, spec)
    spec = replace(spec, welltest_schedule=reference.schedule())
    nodes = {}
    for j in range(spec.m):
        times, gamma_ref, lam_ref = reference.for_well(j)
        gamma_nodes = clamped_path(*shuffled_increments(gamma_ref, rng))
        lam_nodes = clamped_path(*shuffled_increments(lam_ref, rng))
        nodes[j] = (times, gamma_nodes, lam_nodes)
    truth = _composition_truth(spec, nodes)
    features = generate_features(spec, rng)
    return simulate(spec, features, truth, rng)
