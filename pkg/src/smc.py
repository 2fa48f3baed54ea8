"""Bootstrap particle filter with log-space weights.

The filter runs any :class:`StateSpaceModel`. Propagation and weighting are
split into fixed-size particle blocks, each with its own counter-based
random stream keyed by ``(seed, t, block)``; results therefore do not depend
on the number of worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateFilterError, InvalidInputError, NumericalDomainError

logger = logging.getLogger(__name__)

RESAMPLING_SCHEMES = ("systematic", "multinomial", "stratified")
PERCENTILES = (5, 25, 75, 95)

# First element of the spawn key of every random stream
_RESAMPLE_STREAM = 0
_PROPAGATE_STREAM = 1


@dataclass(frozen=True)
class FilterConfig:
    """Particle filter settings.

    Parameters
    ----------
    n_particles : int
        Population size, at least 2
    resampling_scheme : str
        One of ``RESAMPLING_SCHEMES``
    seed : int
        Root seed of all random streams
    resample_every_step : bool
        Resample before every propagation; otherwise only when the relative
        ESS falls below ``ess_threshold``
    ess_threshold : float
        Relative ESS that triggers resampling when ``resample_every_step`` is off
    n_workers : int
        Threads used for propagation and weighting
    block_size : int
        Particles per random stream. Results depend on ``seed`` and
        ``block_size`` but not on ``n_workers``; changing the block size
        regroups the streams and changes the draws.
    """

    n_particles: int = 10_000
    resampling_scheme: str = "systematic"
    seed: int = 0
    resample_every_step: bool = True
    ess_threshold: float = 0.5
    n_workers: int = 1
    block_size: int = 4096

    def __post_init__(self):
        if self.n_particles < 2:
            raise InvalidInputError(f"Need at least 2 particles, got {self.n_particles}")
        if self.resampling_scheme not in RESAMPLING_SCHEMES:
            raise InvalidInputError(
                f"Unknown resampling scheme: {self.resampling_scheme}. "
                f"Available: {', '.join(RESAMPLING_SCHEMES)}"
            )
        if not 0 <= self.seed < 2**64:
            raise InvalidInputError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise InvalidInputError(
                f"ESS threshold must lie in (0, 1], got {self.ess_threshold}"
            )
        if self.n_workers < 1 or self.block_size < 1:
            raise InvalidInputError("Worker count and block size must be positive")


class StateSpaceModel:
    """Base class for models run through :class:`ParticleFilter`.

    Particles may be any container supporting integer-array and slice
    indexing along the first axis; override :meth:`concatenate` when it is
    not a numpy array.
    """

    def sample_prior(self, n: int, rng: np.random.Generator) -> Any:
        """Draw ``n`` particles from the prior."""
        raise NotImplementedError

    def sample_transition(self, particles: Any, rng: np.random.Generator) -> Any:
        """Propagate particles one step through the transition density."""
        raise NotImplementedError

    def log_likelihood(self, particles: Any, obs: Any) -> np.ndarray:
        """Log-density of ``obs`` for every particle."""
        raise NotImplementedError

    def summary_fields(self, particles: Any) -> Dict[str, np.ndarray]:
        """Named arrays of shape ``(N,)`` or ``(N, k)`` to summarize."""
        raise NotImplementedError

    def concatenate(self, parts: List[Any]) -> Any:
        """Join particle blocks in order."""
        return np.concatenate(parts)


@dataclass
class ParticleSet:
    """Weighted particle population at time ``t``."""

    particles: Any
    log_weights: np.ndarray
    normalized_weights: np.ndarray
    ancestors: np.ndarray
    t: int

    @property
    def n(self) -> int:
        return len(self.normalized_weights)

    @property
    def ess(self) -> float:
        return effective_sample_size(self.normalized_weights)


@dataclass(frozen=True)
class ParameterSummary:
    """Weighted mean and percentiles, one entry per well."""

    mean: np.ndarray
    p5: np.ndarray
    p25: np.ndarray
    p75: np.ndarray
    p95: np.ndarray


@dataclass
class PosteriorSummary:
    """Posterior summary of every parameter at one step."""

    t: int
    parameters: Dict[str, ParameterSummary]
    ess: float
    rel_ess: float

    def to_rows(self) -> List[Dict]:
        """Flatten into one record per well and parameter."""
        rows = []
        for well in range(self._n_wells()):
            for name, summary in self.parameters.items():
                rows.append(
                    {
                        "t": self.t,
                        "well_id": well,
                        "parameter": name,
                        "mean": float(summary.mean[well]),
                        "p5": float(summary.p5[well]),
                        "p25": float(summary.p25[well]),
                        "p75": float(summary.p75[well]),
                        "p95": float(summary.p95[well]),
                    }
                )
        return rows

    def _n_wells(self) -> int:
        first = next(iter(self.parameters.values()), None)
        return 0 if first is None else len(first.mean)


class EssRecord(NamedTuple):
    """Effective sample size after one step; ``skipped`` marks carried steps."""

    t: int
    ess: float
    rel_ess: float
    skipped: bool


@dataclass
class FilterResult:
    """Per-step summaries and diagnostics of a filter run."""

    summaries: List[PosteriorSummary]
    ess_trace: List[EssRecord]
    degenerate_steps: List[int] = field(default_factory=list)

    @property
    def mean_rel_ess(self) -> float:
        """Mean relative ESS over the steps the filter processed."""
        values = [r.rel_ess for r in self.ess_trace if not r.skipped]
        return float(np.mean(values)) if values else float("nan")


def normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    """Exponentiate and normalize log-weights.

    Raises
    ------
    DegenerateFilterError
        If every log-weight is -inf
    NumericalDomainError
        If a log-weight is NaN
    """
    log_w = np.asarray(log_w, dtype=float)
    if np.any(np.isnan(log_w)):
        raise NumericalDomainError("NaN log-weight")
    if not np.any(np.isfinite(log_w)):
        raise DegenerateFilterError("All particle weights are zero")
    weights = np.exp(log_w - logsumexp(log_w))
    return weights / weights.sum()


def effective_sample_size(weights: np.ndarray) -> Any:
    """``1 / sum(W**2)`` along the last axis, clipped to ``[1, N]``."""
    weights = np.asarray(weights, dtype=float)
    ess = np.clip(1.0 / np.sum(weights**2, axis=-1), 1.0, weights.shape[-1])
    return float(ess) if np.ndim(ess) == 0 else ess


def resample(
    weights: np.ndarray, scheme: str, rng: np.random.Generator
) -> np.ndarray:
    """Draw ancestor indices from normalized weights.

    Parameters
    ----------
    weights : np.ndarray
        Normalized weights
    scheme : str
        'systematic', 'stratified' or 'multinomial'
    rng : np.random.Generator
        Random number generator

    Returns
    -------
    np.ndarray
        ``N`` ancestor indices in ``[0, N)``, nondecreasing for the
        systematic and stratified schemes
    """
    weights = np.asarray(weights, dtype=float)
    n = len(weights)
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0

    if scheme == "systematic":
        positions = (rng.random() + np.arange(n)) / n
    elif scheme == "stratified":
        positions = (rng.random(n) + np.arange(n)) / n
    elif scheme == "multinomial":
        positions = rng.random(n)
    else:
        raise InvalidInputError(
            f"Unknown resampling scheme: {scheme}. "
            f"Available: {', '.join(RESAMPLING_SCHEMES)}"
        )
    ancestors = np.searchsorted(cumulative, positions, side="right")
    return np.minimum(ancestors, n - 1)


def weighted_percentiles(
    values: np.ndarray, weights: np.ndarray, percentiles: Sequence[float]
) -> np.ndarray:
    """Smallest values whose weighted CDF reaches each percentile."""
    order = np.argsort(values, kind="stable")
    cumulative = np.cumsum(weights[order])
    targets = np.asarray(percentiles, dtype=float) / 100.0 * cumulative[-1]
    idx = np.minimum(np.searchsorted(cumulative, targets, side="left"), len(values) - 1)
    return values[order][idx]


def summarize(ps: ParticleSet, model: StateSpaceModel) -> PosteriorSummary:
    """Weighted means and 5/25/75/95 percentiles of every summary field."""
    weights = ps.normalized_weights
    parameters = {}
    for name, values in model.summary_fields(ps.particles).items():
        values = np.asarray(values, dtype=float)
        columns = values.reshape(len(weights), -1)
        quantiles = np.stack(
            [weighted_percentiles(col, weights, PERCENTILES) for col in columns.T],
            axis=1,
        )
        parameters[name] = ParameterSummary(weights @ columns, *quantiles)
    ess = ps.ess
    return PosteriorSummary(t=ps.t, parameters=parameters, ess=ess, rel_ess=ess / ps.n)


class ParticleFilter:
    """Bootstrap particle filter.

    Parameters
    ----------
    model : StateSpaceModel
        Prior, transition and likelihood of the problem
    config : FilterConfig
        Filter settings
    """

    def __init__(self, model: StateSpaceModel, config: FilterConfig):
        self.model = model
        self.config = config
        self.degenerate_steps: List[int] = []

    def _stream(self, purpose: int, t: int, block: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.config.seed, spawn_key=(purpose, t, block))
        return np.random.Generator(np.random.Philox(seq))

    def _map_blocks(self, fn: Callable[[slice, np.random.Generator], Any], t: int):
        n, size = self.config.n_particles, self.config.block_size
        jobs = [
            (slice(start, min(start + size, n)), self._stream(_PROPAGATE_STREAM, t, b))
            for b, start in enumerate(range(0, n, size))
        ]
        if self.config.n_workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.config.n_workers) as pool:
                return list(pool.map(lambda job: fn(*job), jobs))
        return [fn(*job) for job in jobs]

    def _weigh(self, t: int, log_w: np.ndarray) -> np.ndarray:
        weights = normalize_log_weights(log_w)
        if effective_sample_size(weights) <= 1.0 + 1e-9:
            logger.warning("Particle weights collapsed onto one particle at step %d", t)
            self.degenerate_steps.append(t)
        return weights

    def init(self, first_observation) -> ParticleSet:
        """Draw the prior population and weight it by the first observation."""
        t = first_observation.t

        def draw(block: slice, rng: np.random.Generator):
            particles = self.model.sample_prior(block.stop - block.start, rng)
            return particles, self.model.log_likelihood(particles, first_observation)

        results = self._map_blocks(draw, t)
        particles = self.model.concatenate([r[0] for r in results])
        log_w = np.concatenate([r[1] for r in results])
        return ParticleSet(
            particles=particles,
            log_weights=log_w,
            normalized_weights=self._weigh(t, log_w),
            ancestors=np.arange(self.config.n_particles),
            t=t,
        )

    def step(self, ps: ParticleSet, obs) -> Tuple[ParticleSet, PosteriorSummary]:
        """Resample, propagate and reweight for observation ``obs``."""
        t = obs.t
        cfg = self.config
        if cfg.resample_every_step or ps.ess < cfg.ess_threshold * ps.n:
            ancestors = resample(
                ps.normalized_weights,
                cfg.resampling_scheme,
                self._stream(_RESAMPLE_STREAM, t, 0),
            )
            prior_log_w = np.zeros(ps.n)
        else:
            ancestors = np.arange(ps.n)
            with np.errstate(divide="ignore"):
                prior_log_w = np.log(ps.normalized_weights)
        parents = ps.particles[ancestors]

        def move(block: slice, rng: np.random.Generator):
            particles = self.model.sample_transition(parents[block], rng)
            return particles, self.model.log_likelihood(particles, obs)

        results = self._map_blocks(move, t)
        particles = self.model.concatenate([r[0] for r in results])
        log_w = prior_log_w + np.concatenate([r[1] for r in results])
        new_ps = ParticleSet(
            particles=particles,
            log_weights=log_w,
            normalized_weights=self._weigh(t, log_w),
            ancestors=ancestors,
            t=t,
        )
        return new_ps, summarize(new_ps, self.model)

    def predict(self, ps: ParticleSet, t: int) -> ParticleSet:
        """Propagate to step ``t`` without an observation; weights are kept."""

        def move(block: slice, rng: np.random.Generator):
            return self.model.sample_transition(ps.particles[block], rng)

        return ParticleSet(
            particles=self.model.concatenate(self._map_blocks(move, t)),
            log_weights=ps.log_weights,
            normalized_weights=ps.normalized_weights,
            ancestors=np.arange(ps.n),
            t=t,
        )

    def run(
        self,
        observations: Sequence,
        skip: Optional[Callable[[Any], bool]] = None,
    ) -> FilterResult:
        """Filter a sequence of observations.

        Parameters
        ----------
        observations : Sequence
            Observations exposing a time index ``t``
        skip : Callable, optional
            Predicate selecting observations the filter does not see. Their
            particles still move through the transition, unweighted, and the
            previous summary is carried forward

        Returns
        -------
        FilterResult
            One summary and ESS record per observation

        Raises
        ------
        DegenerateFilterError
            If all weights vanish, with the offending step in the message
        """
        self.degenerate_steps = []
        summaries: List[PosteriorSummary] = []
        ess_trace: List[EssRecord] = []
        ps: Optional[ParticleSet] = None
        summary: Optional[PosteriorSummary] = None

        for obs in observations:
            if skip is not None and skip(obs):
                if summary is None:
                    raise InvalidInputError("The first observation cannot be skipped")
                ps = self.predict(ps, obs.t)
                summary = replace(summary, t=obs.t)
                summaries.append(summary)
                ess_trace.append(EssRecord(obs.t, summary.ess, summary.rel_ess, True))
                continue

            try:
                if ps is None:
                    ps = self.init(obs)
                    summary = summarize(ps, self.model)
                else:
                    ps, summary = self.step(ps, obs)
            except DegenerateFilterError as e:
                raise DegenerateFilterError(f"step {obs.t}: {e}") from e

            summaries.append(summary)
            ess_trace.append(EssRecord(obs.t, summary.ess, summary.rel_ess, False))
            logger.debug("Step %d: relative ESS %.3f", obs.t, summary.rel_ess)

        return FilterResult(summaries, ess_trace, list(self.degenerate_steps))
