"""Tests for dataset generation, filter runs, evaluation and pipelines."""

# pylint: disable=redefined-outer-name

import json

import pytest
import yaml

from src.config_manager import OUTPUT_DIR_ENV
from src.errors import ConfigError, DegenerateFilterError
from src.runner import Runner, package_versions, resolve_prior_means
from src.state_space import Observation, TransitionConfig

SMALL = {"filter.n_particles": 400, "filter.block_size": 128}


@pytest.fixture(autouse=True)
def no_output_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


@pytest.fixture
def small_scenario(tmp_path):
    """Two wells over 40 steps with a four-test reference table."""
    (tmp_path / "tests.csv").write_text(
        "t,well_id,gamma,lambda\n5,0,0.10,0.90\n12,1,0.20,0.80\n"
        "20,0,0.15,0.85\n31,1,0.25,0.75\n"
    )
    path = tmp_path / "small.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "reference_welltests": "tests.csv",
                "m": 2,
                "n": 40,
                "seed": 11,
                "features": {"shut_in_probability": 0.0},
            }
        )
    )
    return path


def run_args(dataset_dir, output_dir, **extra):
    overrides = {
        "dataset.directory": str(dataset_dir),
        "output_dir": str(output_dir),
        **SMALL,
    }
    overrides.update(extra)
    return {"overrides": overrides}


def read_manifest(directory):
    with open(directory / "manifest.json", "r", encoding="utf-8") as f:
        return json.load(f)


def test_resolve_prior_means_from_first_production():
    observations = [
        Observation(0, (2.0, 3.0, 1.0), "production", {0, 1}),
        Observation(1, (9.0, 0.0, 0.0), "production", {0, 1}),
    ]
    resolved = resolve_prior_means(TransitionConfig(), observations)
    assert resolved.mu_gamma0 == pytest.approx(1 / 3)
    assert resolved.mu_lambda0 == pytest.approx(0.75)

    fixed = TransitionConfig(mu_gamma0=0.1, mu_lambda0=0.9)
    assert resolve_prior_means(fixed, observations) is fixed


def test_resolve_prior_means_dry_gas_and_only_welltests():
    dry = [Observation(0, (5.0, 0.0, 0.0), "production", {0, 1})]
    resolved = resolve_prior_means(TransitionConfig(mu_gamma0=0.3), dry)
    assert resolved.mu_gamma0 == 0.3
    assert resolved.mu_lambda0 == 0.5

    with pytest.raises(ConfigError, match="no production observation"):
        resolve_prior_means(
            TransitionConfig(), [Observation(0, (1.0, 1.0, 1.0), "welltest", {0})]
        )


def test_package_versions_lists_stack():
    assert set(package_versions()) == {"vfm_calibration", "numpy", "scipy", "pandas"}


def test_load_template_missing(runner):
    with pytest.raises(FileNotFoundError, match="Template not found"):
        runner.load_template("absent.j2")


def test_generate_constructed(runner, tmp_path, capsys):
    paths = runner.generate("constructed", tmp_path / "data")

    assert set(paths) == {"features", "observations", "truth"}
    manifest = read_manifest(tmp_path / "data")
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 0
    assert manifest["config"] == {"case": "constructed", "noise_enabled": True}
    assert "output_dir" not in json.dumps(manifest)
    out = capsys.readouterr().out
    assert "Generating constructed case: 3 well(s) x 50 step(s)" in out
    assert "Well tests: 1" in out


def test_generate_random_from_scenario(runner, tmp_path, small_scenario):
    runner.generate(
        "random", tmp_path / "a", seed=4, scenario=str(small_scenario), well_terms=False
    )
    runner.generate("random", tmp_path / "b", seed=4, scenario=str(small_scenario), well_terms=False)
    runner.generate("random", tmp_path / "c", seed=5, scenario=str(small_scenario))

    manifest = read_manifest(tmp_path / "a")
    assert manifest["seed"] == 4
    assert manifest["config"]["m"] == 2
    assert manifest["config"]["well_terms"] is False
    assert (tmp_path / "a" / "truth.csv").read_bytes() == (
        tmp_path / "b" / "truth.csv"
    ).read_bytes()
    assert (tmp_path / "a" / "truth.csv").read_bytes() != (
        tmp_path / "c" / "truth.csv"
    ).read_bytes()


def test_generate_copy_uses_scenario_seed(runner, tmp_path, small_scenario):
    runner.generate("copy", tmp_path / "copy", scenario=str(small_scenario))
    assert read_manifest(tmp_path / "copy")["seed"] == 11


def test_generate_rejects_unknown_case(runner, tmp_path):
    with pytest.raises(ConfigError, match="Unknown case: field"):
        runner.generate("field", tmp_path / "out")


def test_run_writes_results(runner, constructed_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert runner.run(**run_args(constructed_dir, out)) == 0

    for name in ("summaries.csv", "ess.csv", "errors.csv", "report.json", "report.txt"):
        assert (out / name).exists(), name
    summaries = (out / "summaries.csv").read_text().splitlines()
    # Header plus three parameters of three wells over 50 steps
    assert len(summaries) == 1 + 50 * 3 * 3

    report = json.loads((out / "report.json").read_text())
    assert report["n_targets"] == 1
    assert 0.0 < report["mean_rel_ess"] <= 1.0

    manifest = read_manifest(out)
    assert manifest["command"] == "run"
    assert manifest["seed"] == 0
    assert manifest["config"]["filter"]["n_particles"] == 400
    assert manifest["config"]["transition"]["mu_gamma0"] is not None
    assert isinstance(manifest["degenerate_steps"], list)

    text = (out / "report.txt").read_text()
    assert text.startswith("Calibration run run\n")
    assert "Tuning factor" in text
    printed = capsys.readouterr().out
    assert "Wells: 3, steps: 50" in printed
    assert "Mean relative ESS:" in printed


def test_run_is_reproducible(runner, constructed_dir, tmp_path):
    for name in ("first", "second"):
        assert runner.run(**run_args(constructed_dir, tmp_path / name)) == 0
    for name in ("summaries.csv", "ess.csv", "report.json", "manifest.json"):
        assert (tmp_path / "first" / name).read_bytes() == (
            tmp_path / "second" / name
        ).read_bytes(), name


def test_run_does_not_depend_on_worker_count(runner, constructed_dir, tmp_path):
    runner.run(**run_args(constructed_dir, tmp_path / "serial"))
    runner.run(**run_args(constructed_dir, tmp_path / "threaded", **{"filter.n_workers": 3}))
    assert (tmp_path / "serial" / "summaries.csv").read_bytes() == (
        tmp_path / "threaded" / "summaries.csv"
    ).read_bytes()


def test_run_without_welltests(runner, constructed_dir, tmp_path, capsys):
    out = tmp_path / "hidden"
    assert runner.run(**run_args(constructed_dir, out, include_welltests=False)) == 0

    rows = (out / "ess.csv").read_text().splitlines()
    assert rows[26].startswith("25,") and rows[26].endswith(",1")
    assert rows[25].endswith(",0")
    # Well tests are still scored
    assert json.loads((out / "report.json").read_text())["n_targets"] == 1
    assert "hidden from the filter" in capsys.readouterr().out


def test_run_without_targets_skips_report(
    runner, constructed_dir, tmp_path, monkeypatch, capsys
):
    monkeypatch.setattr("src.runner.dataset_targets", lambda *args, **kwargs: [])
    out = tmp_path / "run"
    assert runner.run(**run_args(constructed_dir, out)) == 0

    assert (out / "summaries.csv").exists()
    assert not (out / "report.json").exists()
    assert "WARNING: No well tests to validate against" in capsys.readouterr().out


def test_run_with_welltest_targets(runner, constructed_dir, tmp_path):
    (constructed_dir / "truth.csv").unlink()
    out = tmp_path / "run"
    assert runner.run(**run_args(constructed_dir, out)) == 0
    manifest = read_manifest(out)
    assert manifest["config"]["truth_path"] is None
    assert json.loads((out / "report.json").read_text())["n_targets"] == 1


def test_run_uses_env_output_dir(runner, constructed_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert runner.run(**run_args(constructed_dir, tmp_path / "ignored")) == 0
    assert (tmp_path / "env" / "summaries.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_run_returns_one_on_degeneracy(runner, constructed_dir, tmp_path, monkeypatch, caplog):
    def collapse(self, observations, skip=None):
        raise DegenerateFilterError("step 3: all particle weights vanished")

    monkeypatch.setattr("src.runner.ParticleFilter.run", collapse)
    assert runner.run(**run_args(constructed_dir, tmp_path / "run")) == 1
    assert "step 3" in caplog.text
    assert not (tmp_path / "run" / "summaries.csv").exists()


def test_evaluate_groups(runner, constructed_dir, tmp_path, capsys):
    runner.run(**run_args(constructed_dir, tmp_path / "a"))
    runner.run(**run_args(constructed_dir, tmp_path / "b", **{"filter.seed": 1}))

    comparison = runner.evaluate(
        {"single": [str(tmp_path / "a")], "pair": [str(tmp_path / "a"), str(tmp_path / "b")]},
        output_dir=str(tmp_path / "cmp"),
        title="Seeds",
    )

    assert list(comparison) == ["single", "pair"]
    assert comparison["pair"].n_targets == 2
    saved = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
    assert saved["single"]["mad"] == json.loads(
        (tmp_path / "a" / "report.json").read_text()
    )["mad"]
    table = (tmp_path / "cmp" / "comparison.txt").read_text()
    assert table.splitlines()[0] == "Seeds"
    assert "single" in table.splitlines()[1] and "pair" in table.splitlines()[1]
    assert read_manifest(tmp_path / "cmp")["command"] == "evaluate"
    assert "Rel. ESS" in capsys.readouterr().out


def test_evaluate_requires_reports(runner, tmp_path):
    with pytest.raises(ConfigError, match="Nothing to evaluate"):
        runner.evaluate({}, str(tmp_path / "cmp"))
    with pytest.raises(ConfigError, match="lists no run directories"):
        runner.evaluate({"empty": []}, str(tmp_path / "cmp"))
    with pytest.raises(FileNotFoundError):
        runner.evaluate({"missing": [str(tmp_path / "none")]}, str(tmp_path / "cmp"))


def write_pipeline(path, stages):
    path.write_text(yaml.safe_dump({"stages": stages}))
    return str(path)


def test_run_pipeline(runner, tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    pipeline = write_pipeline(
        tmp_path / "pipeline.yaml",
        [
            {
                "name": "gen",
                "command": "generate",
                "case": "constructed",
                "noise": False,
                "output": str(data),
            },
            {
                "name": "filter",
                "depends_on": ["gen"],
                "command": "run",
                "set": [
                    f"dataset.directory={data}",
                    f"output_dir={run}",
                    "filter.n_particles=300",
                ],
            },
            {
                "name": "compare",
                "depends_on": ["filter"],
                "command": "evaluate",
                "groups": {"only": [str(run)]},
                "output": str(tmp_path / "cmp"),
            },
        ],
    )

    assert runner.run_pipeline(pipeline) == {"gen": 0, "filter": 0, "compare": 0}
    assert (tmp_path / "cmp" / "comparison.json").exists()
    out = capsys.readouterr().out
    assert "Stages: 3" in out
    assert "Stage: filter" in out


def test_run_pipeline_skips_dependents_of_failed_stage(runner, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(runner, "run", lambda **kwargs: 1)
    pipeline = write_pipeline(
        tmp_path / "pipeline.yaml",
        [
            {"name": "filter", "command": "run", "config": "run/constructed.yaml"},
            {
                "name": "compare",
                "depends_on": ["filter"],
                "command": "evaluate",
                "groups": {"x": ["nowhere"]},
                "output": str(tmp_path / "cmp"),
            },
        ],
    )
    assert runner.run_pipeline(pipeline) == {"filter": 1, "compare": 1}
    assert "Skipped: dependency failed (filter)" in capsys.readouterr().out
    assert not (tmp_path / "cmp").exists()


@pytest.mark.parametrize(
    ("stages", "message"),
    [
        ([], "defines no stages"),
        ([{"name": "a", "command": "train"}], "unknown command train"),
        (
            [
                {"name": "a", "command": "generate", "case": "constructed", "output": "x"},
                {"name": "a", "command": "generate", "case": "constructed", "output": "y"},
            ],
            "Duplicate stage name: a",
        ),
        (
            [{"name": "b", "command": "run", "depends_on": ["later"]}],
            "undefined stage\\(s\\): later",
        ),
    ],
)
def test_run_pipeline_rejects_malformed_files(runner, tmp_path, stages, message):
    stages = [
        {**s, "output": str(tmp_path / s["output"])} if "output" in s else s
        for s in stages
    ]
    pipeline = write_pipeline(tmp_path / "pipeline.yaml", stages)
    with pytest.raises(ConfigError, match=message):
        runner.run_pipeline(pipeline)


def test_runner_defaults_to_repository_root(workspace_root):
    assert Runner().basedir == workspace_root
