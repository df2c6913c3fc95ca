"""Datasets of predictors and mixed-scale outcomes.

Outcomes are stored as level indices ``0..L-1`` increasing in the underlying
measurement. Continuous measurements are rank-discretized on load; binary and
ordinal columns keep their observed categories in sorted order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

__all__ = [
    "DataError",
    "OutcomeColumn",
    "Dataset",
    "discretize",
    "load_dataset",
    "save_dataset",
]

DEFAULT_LEVELS = 10


class DataError(ValueError):
    """Raised when input data violates a Dataset invariant."""


@dataclass(frozen=True)
class OutcomeColumn:
    kind: str
    levels: int
    values: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("binary", "ordinal"):
            raise DataError(f"unknown outcome kind {self.kind!r}")
        if self.levels < 2:
            raise DataError("degenerate outcome: fewer than two levels")
        if self.kind == "binary" and self.levels != 2:
            raise DataError("binary outcome must have exactly two levels")
        v = np.asarray(self.values)
        if v.ndim != 1 or not np.issubdtype(v.dtype, np.integer):
            raise DataError("outcome values must be a 1-d integer array")
        counts = np.bincount(v, minlength=self.levels) if v.size and v.min() >= 0 else None
        if counts is None or counts.size != self.levels:
            raise DataError(f"outcome values must lie in 0..{self.levels - 1}")
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise DataError(f"degenerate outcome: levels {missing} never observed")
        v = v.astype(np.int64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.values, minlength=self.levels)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    outcomes: tuple
    predictor_names: tuple = ()
    outcome_names: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError("X must be a 2-d matrix")
        if not np.all(np.isfinite(X)):
            raise DataError("predictors contain non-finite values")
        n, p = X.shape
        outcomes = tuple(self.outcomes)
        if p < 1 or len(outcomes) < 1:
            raise DataError("need at least one predictor and one outcome")
        for col in outcomes:
            if col.values.shape[0] != n:
                raise DataError("outcome length differs from the number of rows of X")
        max_levels = max(col.levels for col in outcomes)
        if n <= p + max_levels:
            raise DataError(f"n too small: n={n} must exceed p + max levels = {p + max_levels}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "outcomes", outcomes)
        pn = tuple(self.predictor_names) or tuple(f"x{j + 1}" for j in range(p))
        on = tuple(self.outcome_names) or tuple(f"y{m + 1}" for m in range(len(outcomes)))
        if len(pn) != p or len(on) != len(outcomes):
            raise DataError("name lists do not match data dimensions")
        object.__setattr__(self, "predictor_names", pn)
        object.__setattr__(self, "outcome_names", on)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def M(self) -> int:
        return len(self.outcomes)

    def with_outcome(self, m: int, values: np.ndarray) -> "Dataset":
        """Copy with outcome ``m`` replaced (same kind and level count)."""
        old = self.outcomes[m]
        cols = list(self.outcomes)
        cols[m] = OutcomeColumn(old.kind, old.levels, np.asarray(values), old.labels)
        return Dataset(self.X, tuple(cols), self.predictor_names, self.outcome_names, self.meta)


def discretize(values: Sequence[float], levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Rank-discretize a continuous column into ``levels`` near-equal bins.

    Subjects are ranked stably (ties ordered by subject index) and rank ``r``
    goes to bin ``floor(r * levels / n)``. A run of tied values that straddles
    a bin boundary is placed entirely in the lowest bin it touches, so the
    mapping is monotone and ties share a level.
    """
    y = np.asarray(values, dtype=float)
    n = y.size
    if levels < 2:
        raise DataError("need at least two levels")
    if not np.all(np.isfinite(y)):
        raise DataError("outcome contains non-finite values")
    order = np.argsort(y, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    lev = (ranks * levels) // n
    sorted_y = y[order]
    sorted_lev = lev[order]
    # first index of each tie run, carried forward
    starts = np.r_[True, sorted_y[1:] != sorted_y[:-1]]
    run_first = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
    sorted_lev = sorted_lev[run_first]
    out = np.empty(n, dtype=np.int64)
    out[order] = sorted_lev
    used = np.unique(out)
    if used.size < 2:
        raise DataError("degenerate outcome: single observed level")
    # heavy ties can empty a bin; relabel the surviving bins consecutively
    return np.searchsorted(used, out)


def _categorical(values: np.ndarray) -> tuple:
    cats, idx = np.unique(values, return_inverse=True)
    return idx.astype(np.int64), tuple(cats.tolist())


def load_dataset(data_path, meta_path) -> Dataset:
    """Read a delimited data file plus a JSON metadata file.

    The metadata is ``{"outcomes": [{"name", "kind", "levels"?, "clampLow"?,
    "clampHigh"?}], "predictors"?: [...]}``. ``kind`` is ``binary``,
    ``ordinal`` or ``continuous``; continuous columns are discretized into
    ``levels`` bins (default 10) after clamping to ``[clampLow, clampHigh]``.
    Predictors default to every non-outcome column.
    """
    data_path, meta_path = Path(data_path), Path(meta_path)
    if not meta_path.is_file():
        raise DataError(f"metadata file not found: {meta_path}")
    if not data_path.is_file():
        raise DataError(f"data file not found: {data_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"metadata is not valid JSON: {exc}") from exc
    sep = "\t" if data_path.suffix.lower() in (".tsv", ".tab") else ","
    frame = pd.read_csv(data_path, sep=sep, float_precision="round_trip")
    specs = meta.get("outcomes")
    if not specs:
        raise DataError("metadata declares no outcomes")
    out_names = [s["name"] for s in specs]
    missing = [c for c in out_names + list(meta.get("predictors", [])) if c not in frame.columns]
    if missing:
        raise DataError(f"missing columns: {missing}")
    pred_names = list(meta.get("predictors") or [c for c in frame.columns if c not in out_names])
    if frame[pred_names + out_names].isna().any().any():
        raise DataError("missing values are not supported")
    try:
        X = frame[pred_names].to_numpy(dtype=float)
    except ValueError as exc:
        raise DataError(f"non-numeric predictor column: {exc}") from exc
    if not np.all(np.isfinite(X)):
        raise DataError("predictors contain non-finite values")

    cols = []
    for spec in specs:
        raw = frame[spec["name"]].to_numpy()
        kind = spec.get("kind", "ordinal")
        if kind == "continuous":
            y = raw.astype(float)
            lo, hi = spec.get("clampLow"), spec.get("clampHigh")
            if lo is not None or hi is not None:
                y = np.clip(y, -np.inf if lo is None else lo, np.inf if hi is None else hi)
            values = discretize(y, int(spec.get("levels", DEFAULT_LEVELS)))
            cols.append(OutcomeColumn("ordinal", int(values.max()) + 1, values))
            continue
        if kind not in ("binary", "ordinal"):
            raise DataError(f"unknown outcome kind {kind!r} for {spec['name']}")
        values, labels = _categorical(raw)
        if len(labels) < 2:
            raise DataError(f"degenerate outcome {spec['name']!r}: single observed level")
        declared = spec.get("levels")
        if declared is not None and int(declared) != len(labels):
            raise DataError(
                f"outcome {spec['name']!r} declares {declared} levels but {len(labels)} are observed"
            )
        cols.append(OutcomeColumn(kind, len(labels), values, labels))
    source = {"data": str(data_path), "meta": str(meta_path)}
    return Dataset(X, tuple(cols), tuple(pred_names), tuple(out_names), source)


def save_dataset(dataset: Dataset, data_path, meta_path) -> None:
    """Write ``dataset`` so that ``load_dataset`` reproduces its level indices."""
    frame = pd.DataFrame(dataset.X, columns=list(dataset.predictor_names))
    for name, col in zip(dataset.outcome_names, dataset.outcomes):
        frame[name] = col.values
    sep = "\t" if Path(data_path).suffix.lower() in (".tsv", ".tab") else ","
    frame.to_csv(data_path, sep=sep, index=False)
    meta = {
        "predictors": list(dataset.predictor_names),
        "outcomes": [
            {"name": name, "kind": col.kind, "levels": col.levels}
            for name, col in zip(dataset.outcome_names, dataset.outcomes)
        ],
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2) + "\n")
