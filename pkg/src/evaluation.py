"""Validation of filter estimates against well tests.

The estimate validated at a well test at step ``t`` is the posterior mean
of step ``t - 1``, so the test itself never informs its own score.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
from jinja2 import Template

from .choke_model import FluidProperties, WellFeatures, total_flow
from .errors import InvalidInputError
from .smc import PosteriorSummary
from .state_space import Observation, composition_from_factors, factors_from_rates
from .synth import Dataset

logger = logging.getLogger(__name__)

PARAMETERS = ("beta", "gamma", "lambda")
PARAMETER_LABELS = {
    "beta": "Tuning factor",
    "gamma": "Gas fraction",
    "lambda": "Oil factor",
}
TARGET_SOURCES = ("auto", "truth", "welltest")


@dataclass(frozen=True)
class WellTestTarget:
    """Reference parameters of one tested well.

    ``beta_star`` is None when the flow meter predicts no flow and
    ``lambda_star`` when the well produced no liquid.
    """

    t: int
    well: int
    beta_star: Optional[float]
    gamma_star: float
    lambda_star: Optional[float]

    def value(self, parameter: str) -> Optional[float]:
        return {
            "beta": self.beta_star,
            "gamma": self.gamma_star,
            "lambda": self.lambda_star,
        }[parameter]


@dataclass(frozen=True)
class TargetError:
    """Absolute error of one parameter at one well test; None if undefined."""

    t: int
    well: int
    parameter: str
    estimate: Optional[float]
    target: Optional[float]
    abs_error: Optional[float]


@dataclass
class BucketStats:
    """Distribution of absolute errors of the tests within one time bucket."""

    bucket: int
    start: int
    stop: int
    count: int
    minimum: Optional[float] = None
    q1: Optional[float] = None
    median: Optional[float] = None
    q3: Optional[float] = None
    maximum: Optional[float] = None


@dataclass
class EvaluationReport:
    """Aggregate accuracy of one run (or the average of several runs)."""

    mad: Dict[str, Optional[float]]
    mad_per_well: Dict[str, Dict[int, float]]
    mean_rel_ess: float
    n_targets: int
    undefined: Dict[str, int]
    buckets: Dict[str, List[BucketStats]] = field(default_factory=dict)
    burn_in: int = 0
    bucket_days: int = 50

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["mad_per_well"] = {
            p: {str(j): v for j, v in wells.items()}
            for p, wells in self.mad_per_well.items()
        }
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "EvaluationReport":
        """Rebuild a report written by :meth:`to_dict`."""
        try:
            return cls(
                mad=dict(data["mad"]),
                mad_per_well={
                    p: {int(j): v for j, v in wells.items()}
                    for p, wells in data["mad_per_well"].items()
                },
                mean_rel_ess=float(data["mean_rel_ess"]),
                n_targets=int(data["n_targets"]),
                undefined=dict(data["undefined"]),
                buckets={
                    p: [BucketStats(**b) for b in stats]
                    for p, stats in data.get("buckets", {}).items()
                },
                burn_in=int(data.get("burn_in", 0)),
                bucket_days=int(data.get("bucket_days", 50)),
            )
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"Malformed evaluation report: {e}") from e


def welltest_targets(
    obs: Observation,
    x: WellFeatures,
    props: FluidProperties,
    flow_model: Callable = total_flow,
    rate_scale: float = 1.0,
) -> WellTestTarget:
    """Invert a well test into reference parameters.

    Parameters
    ----------
    obs : Observation
        Well-test observation
    x : WellFeatures
        Features of the tested well at the test
    props : FluidProperties
        Fluid and choke constants
    flow_model : Callable, optional
        Flow meter ``f(x, phi, props)``, by default the choke model
    rate_scale : float, optional
        Factor converting measured rates to flow-meter units, by default 1.0

    Returns
    -------
    WellTestTarget
        Gas fraction and oil factor from the measured rates, tuning factor
        as measured over predicted total flow
    """
    if not obs.is_welltest:
        raise InvalidInputError(f"Observation at t={obs.t} is not a well test")
    y_g, y_o, y_w = obs.y
    gamma, lam = factors_from_rates(y_g, y_o, y_w)
    # Any oil factor gives the same composition without liquid
    phi = composition_from_factors(gamma, 0.0 if lam is None else lam)
    predicted = float(flow_model(x, phi, props))
    beta = rate_scale * (y_g + y_o + y_w) / predicted if predicted > 0 else None
    return WellTestTarget(obs.t, obs.tested_well, beta, gamma, lam)


def truth_targets(dataset: Dataset) -> List[WellTestTarget]:
    """Targets taken from the generating parameters at each well test."""
    if dataset.truth is None:
        raise InvalidInputError("Dataset carries no truth")
    targets = []
    for obs in dataset.welltests:
        j = obs.tested_well
        params = dataset.truth[obs.t].well(j)
        lam = params.lam if params.gamma < 1.0 else None
        targets.append(WellTestTarget(obs.t, j, params.beta, params.gamma, lam))
    return targets


def dataset_targets(
    dataset: Dataset,
    props: FluidProperties,
    source: str = "auto",
    rate_scale: float = 1.0,
) -> List[WellTestTarget]:
    """Targets for every well test of the dataset.

    ``source`` is 'truth', 'welltest' or 'auto' (truth when available).
    """
    if source not in TARGET_SOURCES:
        raise InvalidInputError(
            f"Unknown target source: {source}. Available: {', '.join(TARGET_SOURCES)}"
        )
    if source == "truth" or (source == "auto" and dataset.truth is not None):
        return truth_targets(dataset)
    return [
        welltest_targets(
            obs,
            dataset.features.at(obs.t)[obs.tested_well],
            props,
            rate_scale=rate_scale,
        )
        for obs in dataset.welltests
    ]


def validation_errors(
    summaries: Sequence[PosteriorSummary], targets: Sequence[WellTestTarget]
) -> List[TargetError]:
    """Absolute errors of the previous-step posterior means.

    Parameters
    ----------
    summaries : Sequence[PosteriorSummary]
        Summaries indexed by time step
    targets : Sequence[WellTestTarget]
        Well-test targets

    Returns
    -------
    List[TargetError]
        One record per target and parameter; undefined targets keep
        ``abs_error=None``
    """
    errors = []
    for target in targets:
        if target.t == 0:
            logger.warning(
                "Skipping well test of well %d at t=0: no previous estimate", target.well
            )
            continue
        if target.t - 1 >= len(summaries):
            raise InvalidInputError(f"No posterior summary for step {target.t - 1}")
        previous = summaries[target.t - 1]
        for parameter in PARAMETERS:
            estimate = float(previous.parameters[parameter].mean[target.well])
            value = target.value(parameter)
            abs_error = None if value is None else abs(estimate - value)
            errors.append(
                TargetError(target.t, target.well, parameter, estimate, value, abs_error)
            )
    return errors


def _bucket_stats(errors: Sequence[TargetError], horizon: int, bucket_days: int):
    n_buckets = max(1, math.ceil(horizon / bucket_days))
    stats = []
    for b in range(n_buckets):
        start, stop = b * bucket_days, min((b + 1) * bucket_days, horizon)
        values = [e.abs_error for e in errors if e.t // bucket_days == b]
        bucket = BucketStats(bucket=b, start=start, stop=stop, count=len(values))
        if values:
            q = np.percentile(values, [0, 25, 50, 75, 100])
            bucket.minimum, bucket.q1, bucket.median, bucket.q3, bucket.maximum = (
                float(v) for v in q
            )
        stats.append(bucket)
    return stats


def mad_report(
    errors: Sequence[TargetError],
    ess_trace: Sequence[float],
    horizon: int,
    bucket_days: int = 50,
    burn_in: int = 0,
) -> EvaluationReport:
    """Mean absolute deviations, relative ESS and bucketed error quartiles.

    Parameters
    ----------
    errors : Sequence[TargetError]
        Validation errors
    ess_trace : Sequence[float]
        Relative ESS of the filtered steps
    horizon : int
        Number of time steps; buckets cover ``[0, horizon)``
    bucket_days : int, optional
        Bucket width, by default 50
    burn_in : int, optional
        Tests before this step are left out of the MAD, by default 0

    Returns
    -------
    EvaluationReport
        Aggregate and per-well MAD, undefined target counts and buckets
    """
    if not errors:
        raise InvalidInputError("No validation errors to report")
    if bucket_days < 1:
        raise InvalidInputError(f"Bucket width must be positive, got {bucket_days}")

    mad, mad_per_well, undefined, buckets = {}, {}, {}, {}
    n_targets = len({(e.t, e.well) for e in errors})
    for parameter in PARAMETERS:
        records = [e for e in errors if e.parameter == parameter]
        defined = [e for e in records if e.abs_error is not None]
        undefined[parameter] = len(records) - len(defined)
        scored = [e for e in defined if e.t >= burn_in]
        mad[parameter] = (
            float(np.mean([e.abs_error for e in scored])) if scored else None
        )
        wells = sorted({e.well for e in scored})
        mad_per_well[parameter] = {
            j: float(np.mean([e.abs_error for e in scored if e.well == j]))
            for j in wells
        }
        buckets[parameter] = _bucket_stats(defined, horizon, bucket_days)

    return EvaluationReport(
        mad=mad,
        mad_per_well=mad_per_well,
        mean_rel_ess=float(np.mean(ess_trace)) if len(ess_trace) else float("nan"),
        n_targets=n_targets,
        undefined=undefined,
        buckets=buckets,
        burn_in=burn_in,
        bucket_days=bucket_days,
    )


def average_reports(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """Average the aggregate MAD and relative ESS of several runs."""
    if not reports:
        raise InvalidInputError("No reports to average")
    mad = {}
    for parameter in PARAMETERS:
        values = [r.mad[parameter] for r in reports if r.mad[parameter] is not None]
        mad[parameter] = float(np.mean(values)) if values else None
    return EvaluationReport(
        mad=mad,
        mad_per_well={p: {} for p in PARAMETERS},
        mean_rel_ess=float(np.mean([r.mean_rel_ess for r in reports])),
        n_targets=sum(r.n_targets for r in reports),
        undefined={p: sum(r.undefined[p] for r in reports) for p in PARAMETERS},
        burn_in=reports[0].burn_in,
        bucket_days=reports[0].bucket_days,
    )


def _format(value: Optional[float]) -> str:
    return "n/a" if value is None or math.isnan(value) else f"{value:.3f}"


def render_table(
    reports: Mapping[str, EvaluationReport], template: Template, title: str = ""
) -> str:
    """Render one column per report with tuning factor, gas fraction,
    oil factor and relative ESS rows."""
    rows = [
        {
            "name": PARAMETER_LABELS[p],
            "values": [_format(r.mad[p]) for r in reports.values()],
        }
        for p in PARAMETERS
    ]
    rows.append(
        {
            "name": "Rel. ESS",
            "values": [_format(r.mean_rel_ess) for r in reports.values()],
        }
    )
    return template.render(title=title, labels=list(reports.keys()), rows=rows)


def compare_reports(
    groups: Mapping[str, Sequence[EvaluationReport]]
) -> Dict[str, EvaluationReport]:
    """Average each labelled group of runs into one comparison column."""
    return {label: average_reports(reports) for label, reports in groups.items()}
