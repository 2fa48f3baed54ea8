"""Latent well parameters, jump transitions and the separator likelihood.

Each well carries a tuning factor ``beta`` scaling its flow meter, a gas
fraction ``gamma`` and an oil factor ``lam`` (oil over liquid). The composition
is ``phi = (gamma, (1 - gamma) * lam, (1 - gamma) * (1 - lam))``.

States are stored as arrays of shape ``(..., m)``: a single asset state has
shape ``(m,)`` and a particle population ``(N, m)``.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import (
    Dict,
    FrozenSet,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from scipy.special import ndtr, ndtri

from .choke_model import Composition, FluidProperties, WellFeatures, total_flow
from .errors import ConsistencyError, InvalidInputError, NumericalDomainError
from .smc import StateSpaceModel

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

SEPARATOR_VARIANCE_FORMS = ("proportional", "squared")


@dataclass(frozen=True)
class WellParameters:
    """Tuning factor, gas fraction and oil factor of one well."""

    beta: float
    gamma: float
    lam: float

    def __post_init__(self):
        if self.beta <= 0:
            raise InvalidInputError(f"Tuning factor must be positive, got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidInputError(f"Gas fraction must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError(f"Oil factor must lie in [0, 1], got {self.lam}")


@dataclass
class AssetState:
    """Parameters and jump flags of all wells.

    Indexing selects along the leading (particle or time) axes, so
    ``particles[ancestors]`` resamples a population.
    """

    beta: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    jumps: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        self.jumps = np.asarray(self.jumps, dtype=bool)
        shapes = {a.shape for a in (self.beta, self.gamma, self.lam, self.jumps)}
        if len(shapes) != 1:
            raise InvalidInputError(f"Asset state arrays differ in shape: {shapes}")
        if self.beta.ndim == 0:
            raise InvalidInputError("Asset state arrays need a trailing well axis")

    @classmethod
    def from_wells(
        cls, wells: Sequence[WellParameters], jumps: Optional[Sequence[bool]] = None
    ) -> "AssetState":
        """Build a single asset state from per-well parameters."""
        if jumps is None:
            jumps = [False] * len(wells)
        if len(jumps) != len(wells):
            raise InvalidInputError("Jump flags and wells differ in length")
        return cls(
            beta=[w.beta for w in wells],
            gamma=[w.gamma for w in wells],
            lam=[w.lam for w in wells],
            jumps=list(jumps),
        )

    @staticmethod
    def concatenate(parts: Iterable["AssetState"]) -> "AssetState":
        """Join populations along the particle axis."""
        parts = list(parts)
        return AssetState(
            beta=np.concatenate([p.beta for p in parts]),
            gamma=np.concatenate([p.gamma for p in parts]),
            lam=np.concatenate([p.lam for p in parts]),
            jumps=np.concatenate([p.jumps for p in parts]),
        )

    @property
    def m(self) -> int:
        """Number of wells."""
        return self.beta.shape[-1]

    def __getitem__(self, index) -> "AssetState":
        return AssetState(
            self.beta[index], self.gamma[index], self.lam[index], self.jumps[index]
        )

    def well(self, j: int) -> WellParameters:
        """Parameters of well ``j`` of a single asset state."""
        if self.beta.ndim != 1:
            raise InvalidInputError("well() needs a single asset state")
        return WellParameters(
            float(self.beta[j]), float(self.gamma[j]), float(self.lam[j])
        )

    def composition(self, j: int) -> Composition:
        """Composition of well ``j`` for every entry of the leading axes."""
        return composition_from_factors(self.gamma[..., j], self.lam[..., j])


@dataclass(frozen=True)
class TransitionConfig:
    """Prior and jump-transition settings.

    ``mu_gamma0`` and ``mu_lambda0`` may be left unset; the runner then
    derives them from the first production observation.
    """

    p_z: float = 0.1
    sigma_beta: float = 0.05
    sigma_gamma: float = 0.05
    sigma_lambda: float = 0.05
    mu_beta0: float = 1.0
    sigma_beta0: float = 0.1
    mu_gamma0: Optional[float] = None
    sigma_gamma0: float = 0.1
    mu_lambda0: Optional[float] = None
    sigma_lambda0: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_z <= 1.0:
            raise InvalidInputError(f"Jump probability must lie in [0, 1], got {self.p_z}")
        for name in (
            "sigma_beta",
            "sigma_gamma",
            "sigma_lambda",
            "sigma_beta0",
            "sigma_gamma0",
            "sigma_lambda0",
        ):
            if getattr(self, name) <= 0:
                raise InvalidInputError(
                    f"'{name}' must be positive, got {getattr(self, name)}"
                )
        if self.mu_beta0 <= 0:
            raise InvalidInputError(f"'mu_beta0' must be positive, got {self.mu_beta0}")
        for name in ("mu_gamma0", "mu_lambda0"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"'{name}' must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class NoiseConfig:
    """Separator and well noise levels.

    ``separator_variance`` selects ``sigma_eps**2 * y`` ('proportional') or
    ``sigma_eps**2 * y**2`` ('squared') for the separator term.
    """

    sigma_eps: float = 0.05
    sigma_e: float = 0.05
    sigma_f: float = 0.05
    separator_variance: str = "proportional"

    def __post_init__(self):
        for name in ("sigma_eps", "sigma_e", "sigma_f"):
            if getattr(self, name) < 0:
                raise InvalidInputError(
                    f"'{name}' must be nonnegative, got {getattr(self, name)}"
                )
        if self.separator_variance not in SEPARATOR_VARIANCE_FORMS:
            raise InvalidInputError(
                f"Unknown separator variance form: {self.separator_variance}. "
                f"Available: {', '.join(SEPARATOR_VARIANCE_FORMS)}"
            )


class ObservationKind(str, Enum):
    """Origin of a separator measurement."""

    PRODUCTION = "production"
    WELLTEST = "welltest"


@dataclass(frozen=True)
class Observation:
    """Gas, oil and water rates (kg/s) measured at one time step."""

    t: int
    y: Tuple[float, float, float]
    kind: ObservationKind
    active: FrozenSet[int]

    def __post_init__(self):
        y = tuple(float(v) for v in self.y)
        if len(y) != 3:
            raise InvalidInputError(f"Observation needs three rates, got {len(y)}")
        if any(v < 0 or not np.isfinite(v) for v in y):
            raise InvalidInputError(f"Observed rates must be nonnegative, got {y}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "kind", ObservationKind(self.kind))
        object.__setattr__(self, "active", frozenset(int(j) for j in self.active))
        if (self.kind is ObservationKind.WELLTEST) != (len(self.active) == 1):
            if self.kind is ObservationKind.WELLTEST:
                raise ConsistencyError(
                    f"Well test at t={self.t} has {len(self.active)} active wells"
                )
            raise ConsistencyError(
                f"Production observation at t={self.t} has a single active well; "
                "mark it as a well test"
            )

    @property
    def is_welltest(self) -> bool:
        return self.kind is ObservationKind.WELLTEST

    @property
    def tested_well(self) -> Optional[int]:
        """Index of the tested well, None for production data."""
        return next(iter(self.active)) if self.is_welltest else None


class Factors(NamedTuple):
    """Gas fraction and oil factor recovered from rates.

    ``lam`` is None when the well produces no liquid.
    """

    gamma: float
    lam: Optional[float]


def composition_from_factors(gamma: ArrayLike, lam: ArrayLike) -> Composition:
    """Map gas fraction and oil factor to mass fractions."""
    gamma = np.asarray(gamma, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any((gamma < 0) | (gamma > 1)) or np.any((lam < 0) | (lam > 1)):
        raise InvalidInputError(
            f"Gas fraction and oil factor must lie in [0, 1], got {gamma}, {lam}"
        )
    liquid = 1.0 - gamma
    if gamma.ndim == 0 and lam.ndim == 0:
        return Composition(float(gamma), float(liquid * lam), float(liquid * (1.0 - lam)))
    return Composition(gamma, liquid * lam, liquid * (1.0 - lam))


def factors_from_rates(y_g: float, y_o: float, y_w: float) -> Factors:
    """Recover ``(gamma, lam)`` from phase mass rates.

    Raises
    ------
    InvalidInputError
        If a rate is negative or all rates are zero
    """
    if y_g < 0 or y_o < 0 or y_w < 0:
        raise InvalidInputError(f"Rates must be nonnegative, got {(y_g, y_o, y_w)}")
    total = y_g + y_o + y_w
    if total <= 0:
        raise InvalidInputError("Total rate must be positive")
    liquid = y_o + y_w
    lam = y_o / liquid if liquid > 0 else None
    return Factors(gamma=y_g / total, lam=lam)


def _tail_rejection(lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator):
    """Standard normal draws on [lo, hi] for intervals of negligible mass."""
    # Mirror lower-tail intervals so every interval starts at alpha >= 0
    mirror = hi <= 0
    alpha = np.where(mirror, -hi, lo)
    beta = np.where(mirror, -lo, hi)
    straddle = alpha < 0
    rate = (np.maximum(alpha, 0.0) + np.sqrt(np.maximum(alpha, 0.0) ** 2 + 4.0)) / 2.0

    out = np.empty_like(alpha)
    pending = np.ones(alpha.shape, dtype=bool)
    while np.any(pending):
        idx = np.flatnonzero(pending)
        k = idx.size
        tail_draw = alpha[idx] + rng.exponential(1.0 / rate[idx], size=k)
        narrow_draw = alpha[idx] + (beta[idx] - alpha[idx]) * rng.random(k)
        z = np.where(straddle[idx], narrow_draw, tail_draw)
        log_accept = np.where(
            straddle[idx], -0.5 * z**2, -0.5 * (z - rate[idx]) ** 2
        )
        accept = (np.log(rng.random(k)) <= log_accept) & (z <= beta[idx])
        out[idx[accept]] = z[accept]
        pending[idx[accept]] = False
    return np.where(mirror, -out, out)


def sample_truncated_normal(
    mu: ArrayLike,
    sigma: ArrayLike,
    lo: ArrayLike,
    hi: ArrayLike,
    rng: np.random.Generator,
    size: Optional[Union[int, Tuple[int, ...]]] = None,
) -> ArrayLike:
    """Draw from a normal distribution truncated to ``[lo, hi]``.

    Uses the inverse CDF, evaluated in the lower tail where it keeps its
    precision, and falls back to rejection sampling when the truncated
    mass drops below 1e-10.

    Parameters
    ----------
    mu, sigma : ArrayLike
        Location and scale of the untruncated normal
    lo, hi : ArrayLike
        Truncation bounds; ``hi`` may be ``np.inf``
    rng : np.random.Generator
        Random number generator
    size : int or tuple, optional
        Output shape, by default the broadcast shape of the parameters

    Returns
    -------
    ArrayLike
        Samples in ``[lo, hi]``
    """
    arrays = [np.asarray(v, dtype=float) for v in (mu, sigma, lo, hi)]
    if size is not None:
        arrays = [np.broadcast_to(a, size) for a in arrays]
    mu, sigma, lo, hi = np.broadcast_arrays(*arrays)
    if np.any(sigma <= 0):
        raise InvalidInputError("Truncated normal scale must be positive")
    if np.any(lo >= hi):
        raise InvalidInputError("Truncated normal needs lo < hi")

    shape = mu.shape
    mu, sigma, lo, hi = (np.atleast_1d(v) for v in (mu, sigma, lo, hi))
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    flip = a > 0
    lo_std = np.where(flip, -b, a)
    hi_std = np.where(flip, -a, b)
    cdf_lo = ndtr(lo_std)
    mass = ndtr(hi_std) - cdf_lo

    z = ndtri(cdf_lo + rng.random(mu.shape) * mass)
    z = np.clip(z, lo_std, hi_std)
    tail = mass < 1e-10
    if np.any(tail):
        logger.debug("Rejection sampling for %d truncated draws", int(tail.sum()))
        z[tail] = _tail_rejection(lo_std[tail], hi_std[tail], rng)
    z = np.where(flip, -z, z)

    sample = np.clip(mu + sigma * z, lo, hi).reshape(shape)
    return float(sample) if sample.ndim == 0 else sample


def sample_prior(
    cfg: TransitionConfig,
    m: int,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> AssetState:
    """Draw initial parameters for ``m`` wells (``size`` particles if given)."""
    if m < 1:
        raise InvalidInputError(f"Need at least one well, got {m}")
    if cfg.mu_gamma0 is None or cfg.mu_lambda0 is None:
        raise InvalidInputError("Prior means for gas fraction and oil factor are unset")
    shape = (m,) if size is None else (size, m)
    beta = sample_truncated_normal(cfg.mu_beta0, cfg.sigma_beta0, 0.0, np.inf, rng, shape)
    gamma = sample_truncated_normal(cfg.mu_gamma0, cfg.sigma_gamma0, 0.0, 1.0, rng, shape)
    lam = sample_truncated_normal(cfg.mu_lambda0, cfg.sigma_lambda0, 0.0, 1.0, rng, shape)
    return AssetState(beta, gamma, lam, np.zeros(shape, dtype=bool))


def sample_transition(
    prev: AssetState, cfg: TransitionConfig, rng: np.random.Generator
) -> AssetState:
    """Propagate one step of the jump process.

    A well jumps with probability ``p_z``; on a jump all its parameters move
    by truncated normal steps around their previous values, otherwise they
    are copied. The oil factor of a well without liquid never moves.
    """
    jumps = rng.random(prev.beta.shape) < cfg.p_z
    beta = prev.beta.copy()
    gamma = prev.gamma.copy()
    lam = prev.lam.copy()
    if np.any(jumps):
        beta[jumps] = sample_truncated_normal(
            prev.beta[jumps], cfg.sigma_beta, 0.0, np.inf, rng
        )
        gamma[jumps] = sample_truncated_normal(
            prev.gamma[jumps], cfg.sigma_gamma, 0.0, 1.0, rng
        )
        moves = jumps & (prev.gamma < 1.0)
        if np.any(moves):
            lam[moves] = sample_truncated_normal(
                prev.lam[moves], cfg.sigma_lambda, 0.0, 1.0, rng
            )
    return AssetState(beta, gamma, lam, jumps)


def predicted_separator_rates(
    state: AssetState,
    features: Sequence[WellFeatures],
    active: Iterable[int],
    props: FluidProperties,
) -> np.ndarray:
    """Sum of ``beta_j * phi_j * f_j`` over the active wells, in flow-meter units.

    Returns
    -------
    np.ndarray
        Rates of shape ``state.beta.shape[:-1] + (3,)``
    """
    rates = np.zeros(state.beta.shape[:-1] + (3,))
    for j in sorted(active):
        phi = state.composition(j)
        try:
            flow = np.asarray(total_flow(features[j], phi, props))
        except (InvalidInputError, NumericalDomainError) as e:
            raise type(e)(f"well {j}: {e}") from e
        well_rate = np.asarray(state.beta[..., j] * flow)
        rates += well_rate[..., None] * phi.as_array()
    return rates


def observation_covariance(
    state: AssetState,
    y_meas: Sequence[float],
    active: Iterable[int],
    noise: NoiseConfig,
) -> np.ndarray:
    """Covariance of the separator measurement.

    The separator term is diagonal in the measured rates; each active well
    adds a static disturbance and a term along its own rate direction.

    Returns
    -------
    np.ndarray
        Covariances of shape ``state.beta.shape[:-1] + (3, 3)``
    """
    y = np.asarray(y_meas, dtype=float)
    if np.any(y < 0):
        raise InvalidInputError(f"Measured rates must be nonnegative, got {y}")
    separator = y if noise.separator_variance == "proportional" else y**2

    cov = np.zeros(state.beta.shape[:-1] + (3, 3))
    cov += np.diag(noise.sigma_eps**2 * separator)
    for j in sorted(active):
        v = state.beta[..., j, None] * state.composition(j).as_array()
        cov += noise.sigma_e**2 * np.eye(3)
        cov += noise.sigma_f**2 * v[..., :, None] * v[..., None, :]
    return cov


def log_likelihood(y: Sequence[float], mean: np.ndarray, cov: np.ndarray) -> ArrayLike:
    """Log-density of a 3-dimensional normal, batched over leading axes.

    Raises
    ------
    NumericalDomainError
        If a covariance is not positive definite
    """
    diff = np.asarray(y, dtype=float) - np.asarray(mean, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise NumericalDomainError(f"Observation covariance is singular: {e}") from e
    z = np.linalg.solve(chol, diff[..., None])[..., 0]
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    value = -0.5 * (3.0 * np.log(2.0 * np.pi) + log_det + np.sum(z**2, axis=-1))
    return float(value) if np.ndim(value) == 0 else value


class VFMCalibrationModel(StateSpaceModel):
    """Joint flow-meter calibration model for the particle filter.

    Parameters
    ----------
    features : Sequence[Sequence[WellFeatures]]
        Features indexed by time step, then well
    props : FluidProperties
        Fluid and choke constants
    transition : TransitionConfig
        Prior and jump settings with resolved prior means
    noise : NoiseConfig
        Measurement noise levels
    rate_scale : float, optional
        Factor converting measured rates to flow-meter units, by default 1.0.
        The tuning factors absorb any remaining mismatch.
    """

    parameter_names = ("beta", "gamma", "lambda")

    def __init__(
        self,
        features: Sequence[Sequence[WellFeatures]],
        props: FluidProperties,
        transition: TransitionConfig,
        noise: NoiseConfig,
        rate_scale: float = 1.0,
    ):
        if not features:
            raise InvalidInputError("No features given")
        if rate_scale <= 0:
            raise InvalidInputError(f"Rate scale must be positive, got {rate_scale}")
        self.features = features
        self.props = props
        self.transition = transition
        self.noise = noise
        self.rate_scale = rate_scale

    @property
    def m(self) -> int:
        return len(self.features[0])

    def sample_prior(self, n: int, rng: np.random.Generator) -> AssetState:
        return sample_prior(self.transition, self.m, rng, size=n)

    def sample_transition(
        self, particles: AssetState, rng: np.random.Generator
    ) -> AssetState:
        return sample_transition(particles, self.transition, rng)

    def log_likelihood(self, particles: AssetState, obs: Observation) -> np.ndarray:
        n = particles.beta.shape[0]
        if not obs.active:
            # Nothing produces, so the measurement says nothing about the wells
            return np.zeros(n)
        y = np.asarray(obs.y) * self.rate_scale
        mean = predicted_separator_rates(
            particles, self.features[obs.t], obs.active, self.props
        )
        cov = observation_covariance(particles, y, obs.active, self.noise)
        return log_likelihood(y, mean, cov)

    def summary_fields(self, particles: AssetState) -> Dict[str, np.ndarray]:
        return {"beta": particles.beta, "gamma": particles.gamma, "lambda": particles.lam}

    def concatenate(self, parts: List[AssetState]) -> AssetState:
        return AssetState.concatenate(parts)
