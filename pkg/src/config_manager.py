"""Run configuration and scenario management."""

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .choke_model import FluidProperties
from .errors import ConfigError, InvalidInputError
from .evaluation import TARGET_SOURCES
from .smc import FilterConfig
from .state_space import NoiseConfig, TransitionConfig
from .synth import (
    FeatureSpec,
    ReferenceWellTests,
    ScenarioSpec,
    load_reference_welltests,
)

OUTPUT_DIR_ENV = "VFMCAL_OUTPUT_DIR"

RUN_SECTIONS = {
    "filter": FilterConfig,
    "transition": TransitionConfig,
    "noise": NoiseConfig,
    "fluid": FluidProperties,
}
TOP_LEVEL_KEYS = {
    "dataset",
    "output_dir",
    "include_welltests",
    "rate_scale",
    "evaluation",
    *RUN_SECTIONS,
}
DATASET_KEYS = {"directory", "features", "observations", "truth"}
EVALUATION_KEYS = {"target_source", "bucket_days", "burn_in"}


@dataclass(frozen=True)
class RunConfig:
    """Everything a filter run needs."""

    features_path: Path
    observations_path: Path
    truth_path: Optional[Path]
    output_dir: Path
    filter: FilterConfig = field(default_factory=FilterConfig)
    transition: TransitionConfig = field(default_factory=TransitionConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    fluid: FluidProperties = field(default_factory=FluidProperties)
    include_welltests: bool = True
    rate_scale: float = 0.1
    target_source: str = "auto"
    bucket_days: int = 50
    burn_in: int = 0

    def __post_init__(self):
        for name in ("features_path", "observations_path", "truth_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f"Dataset file not found: {path}")
        if self.rate_scale <= 0:
            raise ConfigError(f"'rate_scale' must be positive, got {self.rate_scale}")
        if self.target_source not in TARGET_SOURCES:
            raise ConfigError(
                f"Unknown target source: {self.target_source}. "
                f"Available: {', '.join(TARGET_SOURCES)}"
            )
        if self.bucket_days < 1 or self.burn_in < 0:
            raise ConfigError("'bucket_days' must be positive and 'burn_in' nonnegative")

    def echo(self) -> Dict:
        """Configuration as plain data, without the output directory."""
        data = asdict(self)
        data.pop("output_dir")
        for name in ("features_path", "observations_path", "truth_path"):
            data[name] = None if data[name] is None else str(data[name])
        return data


class ConfigManager:
    """Loads defaults, run configurations, modifiers and scenarios."""

    def __init__(self, basedir: Path):
        """Initialize ConfigManager.

        Parameters
        ----------
        basedir : Path
            Base directory of the repository
        """
        self.basedir = Path(basedir)
        self.defaults = self._load_defaults()

    def _load_defaults(self) -> Dict:
        """Load default settings from ``templates/defaults.yaml``."""
        defaults_path = self.basedir / "templates" / "defaults.yaml"
        if not defaults_path.exists():
            raise FileNotFoundError(f"Defaults not found: {defaults_path}")

        with open(defaults_path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f)

    @staticmethod
    def merge(base: Dict, override: Dict) -> Dict:
        """Recursively merge ``override`` into a copy of ``base``."""
        merged = copy.deepcopy(base)
        for key, value in override.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = ConfigManager.merge(merged[key], value)
            else:
                merged[key] = copy.deepcopy(value)
        return merged

    def load_yaml(self, path: Path, _stack: Tuple[Path, ...] = ()) -> Dict:
        """Load a YAML file, resolving its ``include:`` list.

        Included files are merged in order, then the including file on top.
        Include paths are relative to the including file. ``__meta__`` blocks
        are dropped.

        Raises
        ------
        FileNotFoundError
            If the file or an include does not exist
        ConfigError
            If includes form a cycle or the file is not a mapping
        """
        path = Path(path).resolve()
        if not path.exists():
            raise FileNotFoundError(f"Config not found: {path}")
        if path in _stack:
            raise ConfigError(f"Include cycle through {path}")

        with open(path, "r", encoding="utf-8") as f:
            content = yaml.safe_load(f) or {}
        if not isinstance(content, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")

        content.pop("__meta__", None)
        includes = content.pop("include", []) or []
        if isinstance(includes, str):
            includes = [includes]

        merged: Dict = {}
        for include in includes:
            merged = self.merge(
                merged, self.load_yaml(path.parent / include, _stack + (path,))
            )
        return self.merge(merged, content)

    def resolve_modifier(self, mod_spec: str) -> Path:
        """Resolve a modifier name or path.

        Names map to ``config/run/modifier/mod_<name>.yaml``.
        """
        if "/" in mod_spec or mod_spec.endswith(".yaml"):
            mod_path = Path(mod_spec)
            if not mod_path.exists():
                raise ValueError(f"Custom modifier file not found: {mod_spec}")
            return mod_path

        modifier_dir = self.basedir / "config" / "run" / "modifier"
        mod_path = modifier_dir / f"mod_{mod_spec}.yaml"
        if not mod_path.exists():
            raise ValueError(
                f"Unknown modifier: {mod_spec}. "
                f"Available: {', '.join(self.list_modifiers())}"
            )
        return mod_path

    @staticmethod
    def apply_set_overrides(config: Dict, set_overrides: Optional[List[str]]) -> Dict:
        """Apply ``KEY=VALUE`` overrides in dot notation.

        Values are parsed as YAML scalars, so ``1000`` is an integer and
        ``null`` is None.
        """
        config = copy.deepcopy(config)
        for override in set_overrides or []:
            if "=" not in override:
                raise ValueError(
                    f"Invalid --set override '{override}'. Expected KEY=VALUE."
                )
            key, raw = override.split("=", 1)
            value = yaml.safe_load(raw) if raw.strip() else None
            ConfigManager.set_dotted(config, key.strip(), value)
        return config

    @staticmethod
    def set_dotted(config: Dict, key: str, value: Any):
        """Set ``a.b.c`` in a nested mapping, creating sections as needed."""
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.setdefault(part, {}), dict):
                raise ConfigError(f"Cannot set '{key}': '{part}' is not a section")
            node = node[part]
        node[parts[-1]] = value

    def list_modifiers(self) -> List[str]:
        """Names of the modifiers under ``config/run/modifier/``."""
        modifier_dir = self.basedir / "config" / "run" / "modifier"
        return sorted(p.stem[len("mod_") :] for p in modifier_dir.glob("mod_*.yaml"))

    @staticmethod
    def _check_keys(section: Dict, allowed, where: str):
        unknown = sorted(set(section) - set(allowed))
        if unknown:
            raise ConfigError(f"Unknown key(s) in {where}: {', '.join(unknown)}")

    @staticmethod
    def _build_section(cls, values: Optional[Dict], where: str):
        values = dict(values or {})
        defaults = {f.name: f.default for f in fields(cls)}
        ConfigManager._check_keys(values, defaults, f"'{where}'")
        # YAML 1.1 reads exponents without a dot ("1e-3") as strings
        for key, value in values.items():
            if isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    continue
            default = defaults[key]
            if (
                isinstance(value, float)
                and value.is_integer()
                and isinstance(default, int)
                and not isinstance(default, bool)
            ):
                value = int(value)
            values[key] = value
        try:
            return cls(**values)
        except (InvalidInputError, TypeError) as e:
            raise ConfigError(f"'{where}': {e}") from e

    def compose(
        self,
        config_path: Optional[str] = None,
        apply_mods: Optional[List[str]] = None,
        set_overrides: Optional[List[str]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> Dict:
        """Merge defaults, config file, modifiers, ``--set`` and CLI values."""
        config = copy.deepcopy(self.defaults.get("run", {}))
        if config_path is not None:
            path = Path(config_path)
            if not path.exists() and (self.basedir / "config" / path).exists():
                path = self.basedir / "config" / path
            config = self.merge(config, self.load_yaml(path))
        for mod_spec in apply_mods or []:
            config = self.merge(config, self.load_yaml(self.resolve_modifier(mod_spec)))
        config = self.apply_set_overrides(config, set_overrides)
        for key, value in (overrides or {}).items():
            if value is not None:
                self.set_dotted(config, key, value)

        env_output = os.getenv(OUTPUT_DIR_ENV)
        if env_output:
            config["output_dir"] = env_output
        return config

    def build_run_config(
        self,
        config_path: Optional[str] = None,
        apply_mods: Optional[List[str]] = None,
        set_overrides: Optional[List[str]] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> RunConfig:
        """Compose and validate a run configuration.

        Parameters
        ----------
        config_path : Optional[str], optional
            Run configuration YAML, by default None (defaults only)
        apply_mods : Optional[List[str]], optional
            Modifier names or paths, by default None
        set_overrides : Optional[List[str]], optional
            ``KEY=VALUE`` overrides in dot notation, by default None
        overrides : Optional[Dict[str, Any]], optional
            Dotted keys set from explicit command-line flags, by default None

        Returns
        -------
        RunConfig
            Validated configuration

        Raises
        ------
        ConfigError
            If a key is unknown or a value invalid
        FileNotFoundError
            If a dataset file does not exist
        """
        config = self.compose(config_path, apply_mods, set_overrides, overrides)
        self._check_keys(config, TOP_LEVEL_KEYS, "run configuration")

        dataset = config.get("dataset") or {}
        self._check_keys(dataset, DATASET_KEYS, "'dataset'")
        directory = dataset.get("directory")
        paths = {}
        for key, filename in (
            ("features", "features.csv"),
            ("observations", "observations.csv"),
            ("truth", "truth.csv"),
        ):
            value = dataset.get(key)
            if value is None and directory is not None:
                candidate = Path(directory) / filename
                value = candidate if key != "truth" or candidate.exists() else None
            paths[key] = None if value is None else Path(value)
        if paths["features"] is None or paths["observations"] is None:
            raise ConfigError("Run configuration names no features or observations file")
        if not config.get("output_dir"):
            raise ConfigError("Run configuration names no output directory")

        evaluation = config.get("evaluation") or {}
        self._check_keys(evaluation, EVALUATION_KEYS, "'evaluation'")
        sections = {
            name: self._build_section(cls, config.get(name), name)
            for name, cls in RUN_SECTIONS.items()
        }
        return RunConfig(
            features_path=paths["features"],
            observations_path=paths["observations"],
            truth_path=paths["truth"],
            output_dir=Path(config["output_dir"]),
            include_welltests=bool(config.get("include_welltests", True)),
            rate_scale=float(config.get("rate_scale", 0.1)),
            target_source=evaluation.get("target_source", "auto"),
            bucket_days=int(evaluation.get("bucket_days", 50)),
            burn_in=int(evaluation.get("burn_in", 0)),
            **sections,
        )

    def load_scenario(
        self, scenario_path: str
    ) -> Tuple[ScenarioSpec, Optional[ReferenceWellTests]]:
        """Load a scenario YAML and its reference well-test table.

        The reference table path is relative to the scenario file.
        """
        path = Path(scenario_path)
        if not path.exists() and (self.basedir / "config" / path).exists():
            path = self.basedir / "config" / path
        config = self.merge(self.defaults.get("scenario", {}), self.load_yaml(path))

        reference = None
        reference_path = config.pop("reference_welltests", None)
        if reference_path is not None:
            reference = load_reference_welltests(path.resolve().parent / reference_path)

        feature_spec = self._build_section(
            FeatureSpec, config.pop("features", None), "features"
        )
        noise = self._build_section(NoiseConfig, config.pop("noise", None), "noise")
        props = self._build_section(FluidProperties, config.pop("fluid", None), "fluid")
        allowed = {"m", "n", "seed", "rate_scale", "noise_enabled", "well_terms"}
        self._check_keys(config, allowed, f"scenario {path}")
        if "m" not in config or "n" not in config:
            raise ConfigError(f"Scenario {path} must define 'm' and 'n'")
        try:
            spec = ScenarioSpec(
                feature_spec=feature_spec, noise=noise, props=props, **config
            )
        except InvalidInputError as e:
            raise ConfigError(f"Scenario {path}: {e}") from e
        return spec, reference
