"""Tests for well-test validation and reports."""

import numpy as np
import pytest
from jinja2 import Template

from src.choke_model import FluidProperties, WellFeatures, total_flow
from src.errors import InvalidInputError
from src.evaluation import (
    EvaluationReport,
    TargetError,
    WellTestTarget,
    average_reports,
    compare_reports,
    dataset_targets,
    mad_report,
    render_table,
    truth_targets,
    validation_errors,
    welltest_targets,
)
from src.smc import ParameterSummary, PosteriorSummary
from src.state_space import Observation, composition_from_factors
from src.synth import generate_constructed_case

PROPS = FluidProperties()
TABLE = Template(
    "{{ title }}|{{ labels | join(',') }}\n"
    "{% for row in rows %}{{ row.name }}:{{ row['values'] | join(',') }}\n{% endfor %}"
)


def summary(t, beta, gamma, lam):
    def param(values):
        values = np.asarray(values, dtype=float)
        return ParameterSummary(values, values, values, values, values)

    return PosteriorSummary(
        t=t,
        parameters={"beta": param(beta), "gamma": param(gamma), "lambda": param(lam)},
        ess=10.0,
        rel_ess=0.5,
    )


def test_welltest_targets_invert_measurement():
    x = WellFeatures(0.6, 60e5, 35e5, 345.0)
    phi = composition_from_factors(0.2, 0.75)
    flow = total_flow(x, phi, PROPS)
    y = 1.1 * flow * phi.as_array()
    obs = Observation(7, tuple(y), "welltest", {1})

    target = welltest_targets(obs, x, PROPS)

    assert (target.t, target.well) == (7, 1)
    assert target.gamma_star == pytest.approx(0.2)
    assert target.lambda_star == pytest.approx(0.75)
    assert target.beta_star == pytest.approx(1.1)


def test_welltest_targets_closed_choke_leaves_beta_undefined():
    x = WellFeatures(0.0, 60e5, 35e5, 345.0)
    obs = Observation(3, (1.0, 2.0, 1.0), "welltest", {0})
    target = welltest_targets(obs, x, PROPS)
    assert target.beta_star is None
    assert target.gamma_star == pytest.approx(0.25)


def test_welltest_targets_dry_gas_leaves_lambda_undefined():
    x = WellFeatures(0.5, 60e5, 35e5, 345.0)
    obs = Observation(3, (2.0, 0.0, 0.0), "welltest", {0})
    target = welltest_targets(obs, x, PROPS)
    assert target.gamma_star == 1.0
    assert target.lambda_star is None
    assert target.beta_star is not None


def test_welltest_targets_use_given_flow_model():
    x = WellFeatures(0.5, 60e5, 35e5, 345.0)
    obs = Observation(3, (1.0, 2.0, 1.0), "welltest", {0})
    target = welltest_targets(obs, x, PROPS, flow_model=lambda x, phi, props: 8.0)
    assert target.beta_star == pytest.approx(0.5)


def test_welltest_targets_scale_measured_rates():
    x = WellFeatures(0.6, 60e5, 35e5, 345.0)
    phi = composition_from_factors(0.2, 0.75)
    y = 1.1 * total_flow(x, phi, PROPS) * phi.as_array()
    obs = Observation(7, tuple(y / 0.1), "welltest", {1})

    target = welltest_targets(obs, x, PROPS, rate_scale=0.1)

    assert target.beta_star == pytest.approx(1.1)
    assert welltest_targets(obs, x, PROPS).beta_star == pytest.approx(11.0)
    assert target.gamma_star == pytest.approx(0.2)


def test_welltest_targets_reject_production_data():
    x = WellFeatures(0.5, 60e5, 35e5, 345.0)
    obs = Observation(3, (1.0, 2.0, 1.0), "production", {0, 1})
    with pytest.raises(InvalidInputError, match="not a well test"):
        welltest_targets(obs, x, PROPS)


def test_truth_targets_on_constructed_case():
    dataset = generate_constructed_case(np.random.default_rng(0))
    targets = truth_targets(dataset)
    assert targets == [WellTestTarget(25, 0, 1.0, 0.2, 0.8)]


def test_dataset_targets_selects_source():
    dataset = generate_constructed_case(np.random.default_rng(0), noise_enabled=False)
    from_truth = dataset_targets(dataset, PROPS, "auto")
    from_tests = dataset_targets(dataset, PROPS, "welltest", rate_scale=0.1)
    assert from_truth == truth_targets(dataset)
    # Noise-free tests recover the generating parameters
    assert from_tests[0].beta_star == pytest.approx(1.0)
    assert from_tests[0].gamma_star == pytest.approx(0.2)
    assert from_tests[0].lambda_star == pytest.approx(0.8)
    with pytest.raises(InvalidInputError, match="Unknown target source"):
        dataset_targets(dataset, PROPS, "oracle")


def test_validation_errors_use_previous_step():
    summaries = [
        summary(0, [1.0, 1.0], [0.1, 0.1], [0.5, 0.5]),
        summary(1, [1.2, 0.9], [0.3, 0.15], [0.6, 0.7]),
        summary(2, [9.0, 9.0], [0.9, 0.9], [0.9, 0.9]),
    ]
    targets = [WellTestTarget(2, 1, 1.0, 0.2, None)]

    errors = validation_errors(summaries, targets)

    by_param = {e.parameter: e for e in errors}
    assert by_param["beta"].estimate == pytest.approx(0.9)
    assert by_param["beta"].abs_error == pytest.approx(0.1)
    assert by_param["gamma"].abs_error == pytest.approx(0.05)
    assert by_param["lambda"].abs_error is None
    assert by_param["lambda"].target is None


def test_validation_errors_skip_test_at_first_step(caplog):
    summaries = [summary(0, [1.0], [0.1], [0.5])]
    errors = validation_errors(summaries, [WellTestTarget(0, 0, 1.0, 0.2, 0.8)])
    assert errors == []
    assert "t=0" in caplog.text


def make_errors():
    errors = []
    for t, well, err in [(10, 0, 0.1), (60, 1, 0.3), (120, 0, 0.2), (130, 1, 0.4)]:
        errors.append(TargetError(t, well, "beta", 1.0, 1.0 + err, err))
        errors.append(TargetError(t, well, "gamma", 0.2, 0.2 + err / 10, err / 10))
        errors.append(TargetError(t, well, "lambda", 0.8, None, None))
    return errors


def test_mad_report_aggregates():
    report = mad_report(make_errors(), [0.4, 0.6], horizon=150, bucket_days=50)

    assert report.mad["beta"] == pytest.approx(0.25)
    assert report.mad["gamma"] == pytest.approx(0.025)
    assert report.mad["lambda"] is None
    assert report.undefined == {"beta": 0, "gamma": 0, "lambda": 4}
    assert report.mad_per_well["beta"] == pytest.approx({0: 0.15, 1: 0.35})
    assert report.mean_rel_ess == pytest.approx(0.5)
    assert report.n_targets == 4


def test_mad_report_buckets():
    report = mad_report(make_errors(), [0.5], horizon=150, bucket_days=50)
    buckets = report.buckets["beta"]
    assert [(b.start, b.stop, b.count) for b in buckets] == [
        (0, 50, 1),
        (50, 100, 1),
        (100, 150, 2),
    ]
    assert buckets[2].minimum == pytest.approx(0.2)
    assert buckets[2].maximum == pytest.approx(0.4)
    assert buckets[2].median == pytest.approx(0.3)
    assert report.buckets["lambda"][0].count == 0
    assert report.buckets["lambda"][0].median is None


def test_mad_report_burn_in():
    report = mad_report(make_errors(), [0.5], horizon=150, burn_in=100)
    assert report.mad["beta"] == pytest.approx(0.3)
    assert report.burn_in == 100
    # Buckets still show the settling period
    assert report.buckets["beta"][0].count == 1


def test_mad_report_requires_errors():
    with pytest.raises(InvalidInputError, match="No validation errors"):
        mad_report([], [0.5], horizon=10)


def test_report_dict_round_trip():
    report = mad_report(make_errors(), [0.4, 0.6], horizon=150)
    data = report.to_dict()
    assert set(data) >= {"mad", "mad_per_well", "mean_rel_ess", "n_targets", "undefined", "buckets"}
    assert data["mad_per_well"]["beta"] == {"0": pytest.approx(0.15), "1": pytest.approx(0.35)}
    assert EvaluationReport.from_dict(data) == report


def test_from_dict_rejects_malformed_report():
    with pytest.raises(InvalidInputError, match="Malformed"):
        EvaluationReport.from_dict({"mad": {}})


def test_average_and_compare_reports():
    first = mad_report(make_errors(), [0.4], horizon=150)
    second = mad_report(make_errors()[:3], [0.6], horizon=150)

    averaged = average_reports([first, second])
    assert averaged.mad["beta"] == pytest.approx((0.25 + 0.1) / 2)
    assert averaged.mad["lambda"] is None
    assert averaged.mean_rel_ess == pytest.approx(0.5)
    assert averaged.n_targets == 5

    comparison = compare_reports({"with": [first, second], "without": [second]})
    assert list(comparison) == ["with", "without"]
    assert comparison["without"].mad["beta"] == pytest.approx(0.1)


def test_render_table_rows():
    report = mad_report(make_errors(), [0.4, 0.6], horizon=150)
    text = render_table({"run": report}, TABLE, title="Case")
    assert text.splitlines() == [
        "Case|run",
        "Tuning factor:0.250",
        "Gas fraction:0.025",
        "Oil factor:n/a",
        "Rel. ESS:0.500",
    ]
