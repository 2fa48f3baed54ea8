"""CSV and JSON file formats of datasets and run results."""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConsistencyError, DatasetParseError
from .smc import EssRecord, ParameterSummary, PosteriorSummary
from .state_space import AssetState, Observation, ObservationKind
from .synth import Dataset, FeatureTable

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FEATURE_COLUMNS = ["t", "well_id", "u", "p1", "p2", "T", "active"]
OBSERVATION_COLUMNS = ["t", "y_gas", "y_oil", "y_water", "kind", "tested_well"]
TRUTH_COLUMNS = ["t", "well_id", "beta", "gamma", "lambda"]
SUMMARY_COLUMNS = ["t", "well_id", "parameter", "mean", "p5", "p25", "p75", "p95"]
ESS_COLUMNS = ["t", "ess", "rel_ess", "skipped"]
ERROR_COLUMNS = ["t", "well_id", "parameter", "estimate", "target", "abs_error", "bucket"]

# Valid ranges of the feature columns, with the message for a violation
FEATURE_RANGES = {
    "u": (lambda v: (v >= 0.0) & (v <= 1.0), "must lie in [0, 1]"),
    "p1": (lambda v: np.isfinite(v) & (v > 0.0), "must be positive"),
    "p2": (lambda v: np.isfinite(v) & (v > 0.0), "must be positive"),
    "T": (lambda v: np.isfinite(v) & (v > 0.0), "must be positive"),
}

FLOAT_FORMAT = "%.17g"


class FileHandler:
    """Reads and writes datasets and filter results."""

    @staticmethod
    def _read_table(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
        """Read a CSV as strings and check that all columns are present."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        for column in columns:
            if column not in frame.columns:
                raise DatasetParseError(f"{path}: missing column '{column}'")
        return frame

    @staticmethod
    def _numeric(
        frame: pd.DataFrame, column: str, path: PathLike, dtype=float
    ) -> np.ndarray:
        """Convert a column, reporting the first bad value with its line number."""
        parsed = pd.to_numeric(frame[column], errors="coerce")
        bad = np.flatnonzero(parsed.isna().to_numpy())
        if bad.size == 0 and dtype is int:
            bad = np.flatnonzero((parsed % 1 != 0).to_numpy())
        if bad.size:
            row = int(bad[0])
            # Line 1 holds the header
            raise DatasetParseError(
                f"{path}:{row + 2}: invalid value '{frame[column].iloc[row]}' "
                f"in column '{column}'"
            )
        return frame[column].to_numpy(dtype=str).astype(float).astype(dtype)

    @staticmethod
    def _grid(
        t: np.ndarray, well: np.ndarray, path: PathLike
    ) -> Tuple[int, int, np.ndarray]:
        """Check that rows cover every (t, well) pair exactly once."""
        n, m = int(t.max()) + 1, int(well.max()) + 1
        if t.min() < 0 or well.min() < 0 or len(t) != n * m:
            raise DatasetParseError(f"{path}: rows do not form a complete t x well grid")
        seen = np.zeros((n, m), dtype=int)
        np.add.at(seen, (t, well), 1)
        if np.any(seen != 1):
            bad_t, bad_j = np.argwhere(seen != 1)[0]
            raise DatasetParseError(
                f"{path}: well {bad_j} at t={bad_t} appears {seen[bad_t, bad_j]} times"
            )
        return n, m, np.lexsort((well, t))

    def read_features(self, path: PathLike, clamp_pressures: bool = True) -> FeatureTable:
        """Read the features file.

        Parameters
        ----------
        path : PathLike
            Features CSV
        clamp_pressures : bool, optional
            Lower a downstream pressure above the upstream one to the upstream
            value with a warning instead of rejecting it, by default True

        Returns
        -------
        FeatureTable
            Features of shape (n, m)
        """
        frame = self._read_table(path, FEATURE_COLUMNS)
        if frame.empty:
            raise DatasetParseError(f"{path}: no rows")
        t = self._numeric(frame, "t", path, int)
        well = self._numeric(frame, "well_id", path, int)
        values = {c: self._numeric(frame, c, path) for c in ("u", "p1", "p2", "T")}
        active = self._numeric(frame, "active", path, int)
        if np.any((active != 0) & (active != 1)):
            row = int(np.flatnonzero((active != 0) & (active != 1))[0])
            raise DatasetParseError(f"{path}:{row + 2}: 'active' must be 0 or 1")
        for column, (valid, rule) in FEATURE_RANGES.items():
            bad = np.flatnonzero(~valid(values[column]))
            if bad.size:
                row = int(bad[0])
                raise DatasetParseError(
                    f"{path}:{row + 2}: '{column}' {rule}, "
                    f"got {frame[column].iloc[row]}"
                )

        over = np.flatnonzero(values["p2"] > values["p1"])
        if over.size:
            if not clamp_pressures:
                raise DatasetParseError(
                    f"{path}:{int(over[0]) + 2}: downstream pressure exceeds upstream"
                )
            logger.warning(
                "%s: clamped downstream pressure to upstream on %d rows (first line %d)",
                path,
                over.size,
                int(over[0]) + 2,
            )
            values["p2"] = np.minimum(values["p2"], values["p1"])

        n, m, order = self._grid(t, well, path)
        return FeatureTable(
            u=values["u"][order].reshape(n, m),
            p1=values["p1"][order].reshape(n, m),
            p2=values["p2"][order].reshape(n, m),
            temperature=values["T"][order].reshape(n, m),
            active=active[order].reshape(n, m).astype(bool),
        )

    def read_observations(
        self, path: PathLike, features: FeatureTable
    ) -> List[Observation]:
        """Read the observations file, taking active sets from the features."""
        frame = self._read_table(path, OBSERVATION_COLUMNS)
        t = self._numeric(frame, "t", path, int)
        rates = np.stack(
            [self._numeric(frame, c, path) for c in ("y_gas", "y_oil", "y_water")],
            axis=1,
        )
        if not np.array_equal(np.sort(t), np.arange(features.n)):
            raise DatasetParseError(
                f"{path}: expected one observation per step 0..{features.n - 1}"
            )

        observations = [None] * features.n
        for row, (step, kind) in enumerate(zip(t, frame["kind"])):
            line = row + 2
            if kind not in (k.value for k in ObservationKind):
                raise DatasetParseError(f"{path}:{line}: unknown kind '{kind}'")
            if np.any(rates[row] < 0):
                raise DatasetParseError(f"{path}:{line}: negative rate")
            active = frozenset(np.flatnonzero(features.active[step]).tolist())
            tested = frame["tested_well"].iloc[row].strip()
            if kind == ObservationKind.WELLTEST.value:
                if len(active) != 1:
                    raise ConsistencyError(
                        f"{path}:{line}: well test at t={step} has "
                        f"{len(active)} active wells"
                    )
                if tested and int(float(tested)) not in active:
                    raise ConsistencyError(
                        f"{path}:{line}: tested well {tested} is not the active well"
                    )
            elif tested:
                raise DatasetParseError(
                    f"{path}:{line}: 'tested_well' set on a production row"
                )
            try:
                observations[step] = Observation(
                    t=int(step), y=tuple(rates[row]), kind=kind, active=active
                )
            except ConsistencyError as e:
                raise ConsistencyError(f"{path}:{line}: {e}") from e
        return observations

    def read_truth(self, path: PathLike, n: int, m: int) -> AssetState:
        """Read true parameters into arrays of shape (n, m)."""
        frame = self._read_table(path, TRUTH_COLUMNS)
        t = self._numeric(frame, "t", path, int)
        well = self._numeric(frame, "well_id", path, int)
        n_rows, m_rows, order = self._grid(t, well, path)
        if (n_rows, m_rows) != (n, m):
            raise ConsistencyError(
                f"{path}: truth covers {n_rows} x {m_rows}, dataset {n} x {m}"
            )
        columns = {
            c: self._numeric(frame, c, path)[order].reshape(n, m)
            for c in ("beta", "gamma", "lambda")
        }
        jumps = np.zeros((n, m), dtype=bool)
        jumps[1:] = np.any(
            [np.diff(columns[c], axis=0) != 0 for c in columns], axis=0
        )
        return AssetState(columns["beta"], columns["gamma"], columns["lambda"], jumps)

    def read_dataset(
        self,
        features_path: PathLike,
        observations_path: PathLike,
        truth_path: Optional[PathLike] = None,
        clamp_pressures: bool = True,
    ) -> Dataset:
        """Read a dataset and validate it against its observation invariants."""
        features = self.read_features(features_path, clamp_pressures)
        observations = self.read_observations(observations_path, features)
        truth = None
        if truth_path is not None:
            truth = self.read_truth(truth_path, features.n, features.m)
        return Dataset(features=features, observations=observations, truth=truth)

    def write_dataset(self, dataset: Dataset, directory: PathLike) -> Dict[str, Path]:
        """Write features.csv, observations.csv and, if present, truth.csv.

        Returns
        -------
        Dict[str, Path]
            Written files keyed by 'features', 'observations' and 'truth'
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        n, m = dataset.n, dataset.m
        t, well = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
        fx = dataset.features

        features = pd.DataFrame(
            {
                "t": t.ravel(),
                "well_id": well.ravel(),
                "u": fx.u.ravel(),
                "p1": fx.p1.ravel(),
                "p2": fx.p2.ravel(),
                "T": fx.temperature.ravel(),
                "active": fx.active.ravel().astype(int),
            }
        )
        observations = pd.DataFrame(
            {
                "t": [o.t for o in dataset.observations],
                "y_gas": [o.y[0] for o in dataset.observations],
                "y_oil": [o.y[1] for o in dataset.observations],
                "y_water": [o.y[2] for o in dataset.observations],
                "kind": [o.kind.value for o in dataset.observations],
                "tested_well": pd.array(
                    [o.tested_well for o in dataset.observations], dtype="Int64"
                ),
            }
        )
        paths = {
            "features": directory / "features.csv",
            "observations": directory / "observations.csv",
        }
        features.to_csv(paths["features"], index=False, float_format=FLOAT_FORMAT)
        observations.to_csv(paths["observations"], index=False, float_format=FLOAT_FORMAT)

        if dataset.truth is not None:
            paths["truth"] = directory / "truth.csv"
            self.write_truth(dataset.truth, paths["truth"])
        return paths

    @staticmethod
    def write_truth(truth: AssetState, path: PathLike):
        """Write true parameters of shape (n, m)."""
        n, m = truth.beta.shape
        t, well = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
        frame = pd.DataFrame(
            {
                "t": t.ravel(),
                "well_id": well.ravel(),
                "beta": truth.beta.ravel(),
                "gamma": truth.gamma.ravel(),
                "lambda": truth.lam.ravel(),
            }
        )
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    @staticmethod
    def write_summaries(summaries: Sequence[PosteriorSummary], path: PathLike):
        """Write per-step posterior means and percentile bands."""
        rows = [row for summary in summaries for row in summary.to_rows()]
        frame = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    @staticmethod
    def write_ess_trace(records: Sequence[EssRecord], path: PathLike):
        frame = pd.DataFrame(
            [
                {"t": r.t, "ess": r.ess, "rel_ess": r.rel_ess, "skipped": int(r.skipped)}
                for r in records
            ],
            columns=ESS_COLUMNS,
        )
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    def read_summaries(
        self, summaries_path: PathLike, ess_path: PathLike
    ) -> Tuple[List[PosteriorSummary], List[EssRecord]]:
        """Read the summaries and ESS trace written by a run."""
        ess_frame = self._read_table(ess_path, ESS_COLUMNS)
        records = [
            EssRecord(int(t), float(e), float(r), bool(int(s)))
            for t, e, r, s in zip(
                self._numeric(ess_frame, "t", ess_path, int),
                self._numeric(ess_frame, "ess", ess_path),
                self._numeric(ess_frame, "rel_ess", ess_path),
                self._numeric(ess_frame, "skipped", ess_path, int),
            )
        ]
        by_step = {r.t: r for r in records}

        frame = self._read_table(summaries_path, SUMMARY_COLUMNS)
        for column in SUMMARY_COLUMNS:
            if column != "parameter":
                dtype = int if column in ("t", "well_id") else float
                frame[column] = self._numeric(frame, column, summaries_path, dtype)
        summaries = []
        for t, step in frame.groupby("t", sort=True):
            if t not in by_step:
                raise ConsistencyError(f"{ess_path}: no ESS record for step {t}")
            parameters = {}
            for name, rows in step.groupby("parameter", sort=False):
                rows = rows.sort_values("well_id")
                parameters[name] = ParameterSummary(
                    *(rows[c].to_numpy(dtype=float) for c in SUMMARY_COLUMNS[3:])
                )
            summaries.append(
                PosteriorSummary(
                    t=int(t),
                    parameters=parameters,
                    ess=by_step[t].ess,
                    rel_ess=by_step[t].rel_ess,
                )
            )
        return summaries, records

    @staticmethod
    def write_errors(errors, path: PathLike, bucket_days: int):
        """Write plot-ready per-test validation errors."""
        frame = pd.DataFrame(
            [
                {
                    "t": e.t,
                    "well_id": e.well,
                    "parameter": e.parameter,
                    "estimate": e.estimate,
                    "target": e.target,
                    "abs_error": e.abs_error,
                    "bucket": e.t // bucket_days,
                }
                for e in errors
            ],
            columns=ERROR_COLUMNS,
        )
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    @staticmethod
    def write_json(data: Dict, path: PathLike):
        """Write a JSON document (manifests, reports)."""
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
            f.write("\n")

    @staticmethod
    def read_json(path: PathLike) -> Dict:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
