"""Focused tests for run configuration and scenario management."""

# pylint: disable=redefined-outer-name

import shutil
from pathlib import Path

import pytest
import yaml

from src.config_manager import OUTPUT_DIR_ENV, ConfigManager, RunConfig
from src.errors import ConfigError


@pytest.fixture(autouse=True)
def no_output_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


@pytest.fixture
def basedir(tmp_path, workspace_root):
    templates = tmp_path / "templates"
    templates.mkdir()
    shutil.copy(workspace_root / "templates" / "defaults.yaml", templates)
    modifiers = tmp_path / "config" / "run" / "modifier"
    modifiers.mkdir(parents=True)
    (modifiers / "mod_fast.yaml").write_text("filter:\n  n_particles: 500\n")
    (modifiers / "mod_quiet.yaml").write_text("noise:\n  sigma_eps: 0.01\n")
    return tmp_path


@pytest.fixture
def manager(basedir):
    return ConfigManager(basedir)


def write_yaml(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data))
    return path


def run_file(basedir, constructed_dir, **extra) -> Path:
    data = {"dataset": {"directory": str(constructed_dir)}, "output_dir": "out"}
    data.update(extra)
    return write_yaml(basedir / "config" / "run" / "case.yaml", data)


def test_init_requires_defaults(tmp_path):
    with pytest.raises(FileNotFoundError, match="Defaults not found"):
        ConfigManager(tmp_path)


def test_merge_is_recursive_and_copies():
    base = {"filter": {"n_particles": 10, "seed": 0}, "rate_scale": 0.1}
    merged = ConfigManager.merge(base, {"filter": {"seed": 4}})
    assert merged == {"filter": {"n_particles": 10, "seed": 4}, "rate_scale": 0.1}
    assert base["filter"]["seed"] == 0


def test_load_yaml_resolves_includes_and_strips_meta(manager, tmp_path):
    write_yaml(tmp_path / "cfg" / "base" / "common.yaml", {"a": 1, "b": {"c": 2, "d": 3}})
    path = write_yaml(
        tmp_path / "cfg" / "top.yaml",
        {"__meta__": {"version": 2}, "include": ["base/common.yaml"], "b": {"c": 5}},
    )
    assert manager.load_yaml(path) == {"a": 1, "b": {"c": 5, "d": 3}}


def test_load_yaml_detects_include_cycle(manager, tmp_path):
    write_yaml(tmp_path / "a.yaml", {"include": "b.yaml"})
    write_yaml(tmp_path / "b.yaml", {"include": "a.yaml"})
    with pytest.raises(ConfigError, match="Include cycle"):
        manager.load_yaml(tmp_path / "a.yaml")


def test_load_yaml_rejects_non_mapping(manager, tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="expected a mapping"):
        manager.load_yaml(path)


def test_load_yaml_missing_include(manager, tmp_path):
    path = write_yaml(tmp_path / "top.yaml", {"include": ["absent.yaml"]})
    with pytest.raises(FileNotFoundError, match="Config not found"):
        manager.load_yaml(path)


def test_modifiers_by_name_and_path(manager, basedir, tmp_path):
    assert manager.list_modifiers() == ["fast", "quiet"]
    assert manager.resolve_modifier("fast").name == "mod_fast.yaml"

    custom = write_yaml(tmp_path / "extra" / "custom.yaml", {"rate_scale": 0.2})
    assert manager.resolve_modifier(str(custom)) == custom


def test_unknown_modifier_lists_available(manager):
    with pytest.raises(ValueError, match="Unknown modifier: slow. Available: fast, quiet"):
        manager.resolve_modifier("slow")
    with pytest.raises(ValueError, match="Custom modifier file not found"):
        manager.resolve_modifier("missing/mod.yaml")


def test_set_overrides_parse_yaml_scalars():
    config = ConfigManager.apply_set_overrides(
        {"filter": {"seed": 0}},
        ["filter.seed=7", "transition.mu_gamma0=null", "evaluation.target_source=truth"],
    )
    assert config == {
        "filter": {"seed": 7},
        "transition": {"mu_gamma0": None},
        "evaluation": {"target_source": "truth"},
    }


def test_set_override_requires_equals():
    with pytest.raises(ValueError, match="Invalid --set override"):
        ConfigManager.apply_set_overrides({}, ["filter.seed"])


def test_set_dotted_refuses_to_descend_into_value():
    with pytest.raises(ConfigError, match="'rate_scale' is not a section"):
        ConfigManager.set_dotted({"rate_scale": 0.1}, "rate_scale.x", 1)


def test_compose_precedence(manager, basedir, constructed_dir, monkeypatch):
    path = run_file(basedir, constructed_dir, filter={"n_particles": 2000, "seed": 1})

    config = manager.compose(
        str(path),
        apply_mods=["fast"],
        set_overrides=["filter.seed=3", "output_dir=from_set"],
        overrides={"filter.seed": 9, "filter.n_workers": None},
    )
    assert config["filter"]["n_particles"] == 500
    assert config["filter"]["seed"] == 9
    assert config["filter"]["n_workers"] == 1
    assert config["output_dir"] == "from_set"

    monkeypatch.setenv(OUTPUT_DIR_ENV, "/scratch/runs")
    assert manager.compose(str(path))["output_dir"] == "/scratch/runs"


def test_compose_finds_config_relative_to_config_dir(manager, basedir, constructed_dir):
    run_file(basedir, constructed_dir, rate_scale=0.2)
    assert manager.compose("run/case.yaml")["rate_scale"] == 0.2


def test_build_run_config_from_directory(manager, basedir, constructed_dir):
    cfg = manager.build_run_config(str(run_file(basedir, constructed_dir)))

    assert isinstance(cfg, RunConfig)
    assert cfg.features_path == constructed_dir / "features.csv"
    assert cfg.observations_path == constructed_dir / "observations.csv"
    assert cfg.truth_path == constructed_dir / "truth.csv"
    assert cfg.output_dir == Path("out")
    assert cfg.filter.n_particles == 10000
    assert cfg.transition.mu_gamma0 is None
    assert cfg.fluid.a_max == pytest.approx(1e-3)
    assert cfg.rate_scale == 0.1
    assert (cfg.target_source, cfg.bucket_days, cfg.burn_in) == ("auto", 50, 0)


def test_build_run_config_without_truth(manager, basedir, constructed_dir):
    (constructed_dir / "truth.csv").unlink()
    cfg = manager.build_run_config(str(run_file(basedir, constructed_dir)))
    assert cfg.truth_path is None


def test_explicit_dataset_paths_override_directory(manager, basedir, constructed_dir, tmp_path):
    features = tmp_path / "other_features.csv"
    shutil.copy(constructed_dir / "features.csv", features)
    path = run_file(basedir, constructed_dir)
    cfg = manager.build_run_config(
        str(path), overrides={"dataset.features": str(features)}
    )
    assert cfg.features_path == features


def test_missing_dataset_file(manager, basedir, tmp_path):
    path = run_file(basedir, tmp_path / "nowhere")
    with pytest.raises(FileNotFoundError, match="Dataset file not found"):
        manager.build_run_config(str(path))


def test_dataset_is_required(manager):
    with pytest.raises(ConfigError, match="names no features or observations file"):
        manager.build_run_config()


def test_output_dir_is_required(manager, basedir, constructed_dir):
    path = run_file(basedir, constructed_dir, output_dir=None)
    with pytest.raises(ConfigError, match="names no output directory"):
        manager.build_run_config(str(path))


@pytest.mark.parametrize(
    ("extra", "message"),
    [
        ({"particles": 10}, "Unknown key\\(s\\) in run configuration: particles"),
        ({"filter": {"n_particle": 10}}, "Unknown key\\(s\\) in 'filter'"),
        ({"evaluation": {"burnin": 10}}, "Unknown key\\(s\\) in 'evaluation'"),
        ({"filter": {"resampling_scheme": "residual"}}, "'filter': Unknown resampling"),
        ({"transition": {"sigma_beta": 0.0}}, "'transition': 'sigma_beta' must be positive"),
        ({"evaluation": {"target_source": "oracle"}}, "Unknown target source"),
        ({"rate_scale": -1.0}, "'rate_scale' must be positive"),
    ],
)
def test_invalid_run_configs(manager, basedir, constructed_dir, extra, message):
    path = run_file(basedir, constructed_dir, **extra)
    with pytest.raises(ConfigError, match=message):
        manager.build_run_config(str(path))


def test_exponent_strings_are_coerced(manager, basedir, constructed_dir):
    path = basedir / "config" / "run" / "case.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        f"dataset:\n  directory: {constructed_dir}\n"
        "output_dir: out\n"
        "filter:\n  n_particles: 2e3\n"
        "fluid:\n  a_max: 2e-3\n"
    )
    cfg = manager.build_run_config(str(path))
    assert cfg.filter.n_particles == 2000
    assert isinstance(cfg.filter.n_particles, int)
    assert cfg.fluid.a_max == pytest.approx(2e-3)


def test_echo_drops_output_dir(manager, basedir, constructed_dir):
    echo = manager.build_run_config(str(run_file(basedir, constructed_dir))).echo()
    assert "output_dir" not in echo
    assert echo["features_path"] == str(constructed_dir / "features.csv")
    assert echo["filter"]["resampling_scheme"] == "systematic"


def test_load_scenario_with_reference(manager, tmp_path):
    (tmp_path / "tests.csv").write_text(
        "t,well_id,gamma,lambda\n3,0,0.1,0.9\n7,1,0.2,0.8\n"
    )
    path = write_yaml(
        tmp_path / "scenario.yaml",
        {
            "reference_welltests": "tests.csv",
            "m": 2,
            "n": 10,
            "seed": 5,
            "features": {"shut_in_probability": 0.1, "p1_range": [50.0e5, 60.0e5]},
            "noise": {"sigma_eps": 0.02},
        },
    )

    spec, reference = manager.load_scenario(str(path))

    assert (spec.m, spec.n, spec.seed) == (2, 10, 5)
    assert spec.noise_enabled and spec.well_terms
    assert spec.feature_spec.p1_range == (5.0e6, 6.0e6)
    assert spec.noise.sigma_eps == 0.02
    assert reference.schedule() == [(3, 0), (7, 1)]


def test_load_scenario_requires_size(manager, tmp_path):
    path = write_yaml(tmp_path / "scenario.yaml", {"n": 10})
    with pytest.raises(ConfigError, match="must define 'm' and 'n'"):
        manager.load_scenario(str(path))


def test_load_scenario_rejects_unknown_keys(manager, tmp_path):
    path = write_yaml(tmp_path / "scenario.yaml", {"m": 2, "n": 10, "wells": 3})
    with pytest.raises(ConfigError, match="Unknown key\\(s\\) in scenario"):
        manager.load_scenario(str(path))


def test_load_scenario_wraps_invalid_features(manager, tmp_path):
    path = write_yaml(
        tmp_path / "scenario.yaml",
        {"m": 2, "n": 10, "features": {"ratio_range": [0.5, 1.5]}},
    )
    with pytest.raises(ConfigError, match="ratio_range"):
        manager.load_scenario(str(path))
