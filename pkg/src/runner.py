"""Orchestrates dataset generation, filter runs and evaluation."""

import logging
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy
import yaml
from jinja2 import Template

from .config_manager import ConfigManager, RunConfig
from .errors import ConfigError, DegenerateFilterError
from .evaluation import (
    EvaluationReport,
    compare_reports,
    dataset_targets,
    mad_report,
    render_table,
    validation_errors,
)
from .file_handler import FileHandler
from .smc import ParticleFilter
from .state_space import (
    Observation,
    TransitionConfig,
    VFMCalibrationModel,
    factors_from_rates,
)
from .synth import (
    generate_constructed_case,
    generate_synthetic_copy,
    generate_synthetic_random,
)

logger = logging.getLogger(__name__)

CASES = ("constructed", "copy", "random")
DEFAULT_SCENARIO = "scenarios/benchmark.yaml"
PIPELINE_COMMANDS = ("generate", "run", "evaluate")


def resolve_prior_means(
    transition: TransitionConfig, observations: Sequence[Observation]
) -> TransitionConfig:
    """Fill unset prior composition means from the first production step.

    The asset-level gas fraction and oil factor of the first production
    observation serve as the prior mean of every well.
    """
    if transition.mu_gamma0 is not None and transition.mu_lambda0 is not None:
        return transition
    first = next((o for o in observations if not o.is_welltest), None)
    if first is None:
        raise ConfigError(
            "Prior composition means are unset and there is no production "
            "observation to derive them from"
        )
    gamma, lam = factors_from_rates(*first.y)
    if lam is None:
        lam = 0.5
    values = {}
    if transition.mu_gamma0 is None:
        values["mu_gamma0"] = gamma
    if transition.mu_lambda0 is None:
        values["mu_lambda0"] = lam
    logger.info(
        "Derived prior means from production at t=%d: %s",
        first.t,
        ", ".join(f"{k}={v:.4f}" for k, v in values.items()),
    )
    return replace(transition, **values)


def package_versions() -> Dict[str, str]:
    """Versions recorded in every manifest."""
    from version import __version__

    return {
        "vfm_calibration": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


class Runner:
    """Generates datasets, runs the calibration filter and evaluates runs."""

    def __init__(self, basedir: Optional[Path] = None):
        """Initialize Runner.

        Parameters
        ----------
        basedir : Optional[Path], optional
            Base directory of the repository, by default None (use script
            location)
        """
        self.basedir = Path(basedir) if basedir else Path(__file__).parent.parent

        self.config_mgr = ConfigManager(self.basedir)
        self.file_handler = FileHandler()

    def load_template(self, template_name: str) -> Template:
        """Load a jinja2 template from ``templates/``."""
        template_path = self.basedir / "templates" / template_name
        if not template_path.exists():
            raise FileNotFoundError(f"Template not found: {template_path}")

        with open(template_path, "r", encoding="utf-8") as f:
            return Template(f.read(), keep_trailing_newline=True)

    def _write_manifest(self, directory: Path, command: str, **entries):
        manifest = {"command": command, **entries, "versions": package_versions()}
        self.file_handler.write_json(manifest, directory / "manifest.json")

    def generate(
        self,
        case: str,
        output_dir: str,
        seed: Optional[int] = None,
        scenario: Optional[str] = None,
        noise: bool = True,
        well_terms: Optional[bool] = None,
    ) -> Dict[str, Path]:
        """Generate a synthetic dataset.

        Parameters
        ----------
        case : str
            'constructed', 'copy' or 'random'
        output_dir : str
            Directory receiving the dataset files and the manifest
        seed : Optional[int], optional
            Generator seed, by default the scenario's seed (0 for the
            constructed case)
        scenario : Optional[str], optional
            Scenario YAML of the copy and random cases, by default
            ``config/scenarios/benchmark.yaml``
        noise : bool, optional
            Add measurement noise, by default True
        well_terms : Optional[bool], optional
            Override the scenario's per-well noise terms, by default None

        Returns
        -------
        Dict[str, Path]
            Written dataset files
        """
        if case not in CASES:
            raise ConfigError(f"Unknown case: {case}. Available: {', '.join(CASES)}")
        output_dir = Path(output_dir)

        if case == "constructed":
            seed = 0 if seed is None else seed
            dataset = generate_constructed_case(
                np.random.default_rng(seed), noise_enabled=noise
            )
            echo = {"case": case, "noise_enabled": noise}
        else:
            scenario = scenario or DEFAULT_SCENARIO
            spec, reference = self.config_mgr.load_scenario(scenario)
            if reference is None:
                raise ConfigError(f"Scenario {scenario} names no reference well tests")
            seed = spec.seed if seed is None else seed
            spec = replace(spec, seed=seed, noise_enabled=noise)
            if well_terms is not None:
                spec = replace(spec, well_terms=well_terms)
            generator = (
                generate_synthetic_copy if case == "copy" else generate_synthetic_random
            )
            dataset = generator(reference, spec, np.random.default_rng(seed))
            echo = {
                "case": case,
                "scenario": str(scenario),
                "m": spec.m,
                "n": spec.n,
                "feature_spec": asdict(spec.feature_spec),
                "noise": asdict(spec.noise),
                "fluid": asdict(spec.props),
                "rate_scale": spec.rate_scale,
                "noise_enabled": spec.noise_enabled,
                "well_terms": spec.well_terms,
            }

        print(f"Generating {case} case: {dataset.m} well(s) x {dataset.n} step(s)")
        paths = self.file_handler.write_dataset(dataset, output_dir)
        self._write_manifest(output_dir, "generate", config=echo, seed=seed)
        print(f"  Well tests: {len(dataset.welltests)}")
        print(f"Dataset directory: {output_dir}")
        return paths

    def _evaluate_run(self, cfg: RunConfig, dataset, result, output_dir: Path):
        targets = dataset_targets(
            dataset, cfg.fluid, cfg.target_source, rate_scale=cfg.rate_scale
        )
        errors = validation_errors(result.summaries, targets)
        if not errors:
            print("WARNING: No well tests to validate against; skipping report")
            return None

        self.file_handler.write_errors(
            errors, output_dir / "errors.csv", cfg.bucket_days
        )
        report = mad_report(
            errors,
            [r.rel_ess for r in result.ess_trace if not r.skipped],
            dataset.n,
            bucket_days=cfg.bucket_days,
            burn_in=cfg.burn_in,
        )
        self.file_handler.write_json(report.to_dict(), output_dir / "report.json")
        with open(output_dir / "report.txt", "w", encoding="utf-8") as f:
            f.write(
                render_table(
                    {output_dir.name: report},
                    self.load_template("report.txt.j2"),
                    title=f"Calibration run {output_dir.name}",
                )
            )
        return report

    def run(
        self,
        config: Optional[str] = None,
        apply_mods: Optional[List[str]] = None,
        set_overrides: Optional[List[str]] = None,
        overrides: Optional[Dict] = None,
    ) -> int:
        """Run the calibration filter over a dataset.

        Parameters
        ----------
        config : Optional[str], optional
            Run configuration YAML, by default None
        apply_mods : Optional[List[str]], optional
            Modifiers to apply, by default None
        set_overrides : Optional[List[str]], optional
            ``KEY=VALUE`` overrides, by default None
        overrides : Optional[Dict], optional
            Dotted keys set from command-line flags, by default None

        Returns
        -------
        int
            0 on success, 1 if the particle population degenerated
        """
        cfg = self.config_mgr.build_run_config(
            config, apply_mods, set_overrides, overrides
        )
        dataset = self.file_handler.read_dataset(
            cfg.features_path, cfg.observations_path, cfg.truth_path
        )
        transition = resolve_prior_means(cfg.transition, dataset.observations)
        model = VFMCalibrationModel(
            dataset.features.rows(), cfg.fluid, transition, cfg.noise, cfg.rate_scale
        )

        print(f"Loading dataset: {cfg.observations_path}")
        print(f"  Wells: {dataset.m}, steps: {dataset.n}")
        print(f"  Particles: {cfg.filter.n_particles}, seed: {cfg.filter.seed}")
        if not cfg.include_welltests:
            print("  Well tests are hidden from the filter")

        particle_filter = ParticleFilter(model, cfg.filter)
        skip = None if cfg.include_welltests else (lambda obs: obs.is_welltest)
        try:
            result = particle_filter.run(dataset.observations, skip=skip)
        except DegenerateFilterError as e:
            logger.error("%s", e)
            return 1

        output_dir = cfg.output_dir
        output_dir.mkdir(parents=True, exist_ok=True)
        self.file_handler.write_summaries(result.summaries, output_dir / "summaries.csv")
        self.file_handler.write_ess_trace(result.ess_trace, output_dir / "ess.csv")
        report = self._evaluate_run(cfg, dataset, result, output_dir)

        config_echo = cfg.echo()
        config_echo["transition"] = asdict(transition)
        self._write_manifest(
            output_dir,
            "run",
            config=config_echo,
            seed=cfg.filter.seed,
            degenerate_steps=result.degenerate_steps,
        )

        print(f"Mean relative ESS: {result.mean_rel_ess:.3f}")
        if report is not None:
            for parameter, value in report.mad.items():
                shown = "n/a" if value is None else f"{value:.4f}"
                print(f"  MAD {parameter}: {shown}")
        print(f"Run directory: {output_dir}")
        return 0

    def evaluate(
        self,
        groups: Mapping[str, Sequence[str]],
        output_dir: str,
        title: str = "",
    ) -> Dict[str, EvaluationReport]:
        """Compare runs side by side, averaging the runs of each group.

        Parameters
        ----------
        groups : Mapping[str, Sequence[str]]
            Column label to run directories
        output_dir : str
            Directory receiving comparison.json, comparison.txt and the
            manifest
        title : str, optional
            Table title, by default ""

        Returns
        -------
        Dict[str, EvaluationReport]
            Averaged report per column
        """
        if not groups:
            raise ConfigError("Nothing to evaluate")
        loaded = {}
        for label, run_dirs in groups.items():
            if not run_dirs:
                raise ConfigError(f"Group '{label}' lists no run directories")
            loaded[label] = [
                EvaluationReport.from_dict(
                    self.file_handler.read_json(Path(d) / "report.json")
                )
                for d in run_dirs
            ]
        comparison = compare_reports(loaded)

        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        self.file_handler.write_json(
            {label: r.to_dict() for label, r in comparison.items()},
            output_dir / "comparison.json",
        )
        table = render_table(comparison, self.load_template("report.txt.j2"), title)
        with open(output_dir / "comparison.txt", "w", encoding="utf-8") as f:
            f.write(table)
        self._write_manifest(
            output_dir,
            "evaluate",
            config={label: [str(d) for d in dirs] for label, dirs in groups.items()},
            seed=None,
        )
        print(table)
        return comparison

    def run_pipeline(self, pipeline_path: str) -> Dict[str, int]:
        """Run a multi-stage pipeline.

        Stages run in file order. A stage may only depend on stages defined
        before it, and it is skipped when one of them failed.

        Parameters
        ----------
        pipeline_path : str
            Path to pipeline YAML file

        Returns
        -------
        Dict[str, int]
            Exit status per stage name
        """
        with open(pipeline_path, "r", encoding="utf-8") as f:
            pipeline = yaml.safe_load(f) or {}
        stages = pipeline.get("stages") or []
        if not stages:
            raise ConfigError(f"Pipeline {pipeline_path} defines no stages")

        print(f"Loading pipeline: {pipeline_path}")
        print(f"Stages: {len(stages)}\n")

        status_map: Dict[str, int] = {}
        for stage in stages:
            stage_name = stage["name"]
            command = stage.get("command")
            if stage_name in status_map:
                raise ConfigError(f"Duplicate stage name: {stage_name}")
            if command not in PIPELINE_COMMANDS:
                raise ConfigError(
                    f"Stage {stage_name}: unknown command {command}. "
                    f"Available: {', '.join(PIPELINE_COMMANDS)}"
                )
            print(f"Stage: {stage_name}")

            depends_on = stage.get("depends_on", [])
            unknown = [dep for dep in depends_on if dep not in status_map]
            if unknown:
                raise ConfigError(
                    f"Stage {stage_name} depends on undefined stage(s): "
                    f"{', '.join(unknown)}"
                )
            failed = [dep for dep in depends_on if status_map[dep] != 0]
            if failed:
                print(f"  Skipped: dependency failed ({', '.join(failed)})\n")
                status_map[stage_name] = 1
                continue

            if command == "generate":
                self.generate(
                    case=stage["case"],
                    output_dir=stage["output"],
                    seed=stage.get("seed"),
                    scenario=stage.get("scenario"),
                    noise=stage.get("noise", True),
                    well_terms=stage.get("well_terms"),
                )
                status = 0
            elif command == "run":
                status = self.run(
                    config=stage.get("config"),
                    apply_mods=stage.get("apply_mods"),
                    set_overrides=stage.get("set"),
                )
            else:
                self.evaluate(
                    groups=stage["groups"],
                    output_dir=stage["output"],
                    title=stage.get("title", ""),
                )
                status = 0
            status_map[stage_name] = status
            print()

        return status_map
