"""Fingerprint state representation, CSV ingestion and feature selection.

A fingerprint is a fixed-length vector of device-activity features
aggregated over one monitoring window. Raw monitoring output is reduced to
the state features by a three-stage filter: degenerate columns
(duplicate, constant, temporal), volatile columns, and highly correlated
columns.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

TIMESTAMP = "timestamp"
LABEL = "label"
NORMAL = "normal"
UNLABELED = "unlabeled"

# Provenance tags, one per column after run_pipeline.
RETAINED = "retained"
DROPPED_DUPLICATE = "dropped-duplicate"
DROPPED_CONSTANT = "dropped-constant"
DROPPED_TEMPORAL = "dropped-temporal"
DROPPED_VOLATILE = "dropped-volatile"
DROPPED_CORRELATED = "dropped-correlated"
DROPPED_OVERFLOW = "dropped-overflow"

# |mean| below this makes a column's coefficient of variation undefined;
# such columns count as volatile.
CV_MEAN_EPS = 1e-12


class IngestError(ValueError):
    pass


class FeatureSelectionError(ValueError):
    pass


def profile_label(k: int) -> str:
    return f"profile_{k}"


def parse_label(text: str) -> str:
    """Normalize a label cell to ``normal``, ``profile_k`` or ``unlabeled``."""
    text = text.strip()
    if text in ("", UNLABELED):
        return UNLABELED
    if text == NORMAL:
        return NORMAL
    if text.startswith("profile_"):
        suffix = text[len("profile_"):]
        if suffix.isdigit() and 1 <= int(suffix) <= 6:
            return text
    raise IngestError(f"unknown label {text!r}")


def label_profile_id(label: str) -> Optional[int]:
    """Profile id encoded in a label, or None for normal/unlabeled."""
    if label.startswith("profile_"):
        return int(label[len("profile_"):])
    return None


@dataclass
class RawDataset:
    columns: list[str]
    values: np.ndarray
    labels: list[str] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D matrix")
        if self.values.shape[1] != len(self.columns):
            raise ValueError(
                f"{len(self.columns)} column names for {self.values.shape[1]} columns"
            )
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        n = self.values.shape[0]
        if not self.labels:
            self.labels = [UNLABELED] * n
        if not self.timestamps:
            self.timestamps = [float(i) for i in range(n)]
        if len(self.labels) != n or len(self.timestamps) != n:
            raise ValueError("labels/timestamps length must match row count")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def select(self, keep: Sequence[int]) -> "RawDataset":
        keep = list(keep)
        return RawDataset(
            columns=[self.columns[i] for i in keep],
            values=self.values[:, keep],
            labels=list(self.labels),
            timestamps=list(self.timestamps),
        )

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


@dataclass
class FingerprintSchema:
    feature_names: list[str]
    window_seconds: float = 5.0
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("feature names must be unique")
        if not self.window_seconds > 0:
            raise ValueError("window_seconds must be > 0")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @classmethod
    def anonymous(cls, n: int, window_seconds: float = 5.0) -> "FingerprintSchema":
        return cls([f"f{i + 1}" for i in range(n)], window_seconds)

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "window_seconds": self.window_seconds,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FingerprintSchema":
        return cls(
            feature_names=list(d["feature_names"]),
            window_seconds=float(d.get("window_seconds", 5.0)),
            provenance=dict(d.get("provenance", {})),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "FingerprintSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class Fingerprint:
    values: np.ndarray
    label: str = UNLABELED
    timestamp: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1:
            raise ValueError("fingerprint values must be a vector")
        if not np.all(np.isfinite(vals)):
            raise ValueError("fingerprint values must be finite")
        object.__setattr__(self, "values", vals)

    def conforms(self, schema: FingerprintSchema) -> bool:
        return self.values.shape[0] == schema.n_features


def ingest_csv(path: str | Path, schema_mode: str = "raw"):
    """Read a fingerprint CSV.

    ``schema_mode="raw"`` returns a :class:`RawDataset`. ``"conforming"``
    returns ``(schema, fingerprints)`` with every non-reserved column taken
    as a state feature.
    """
    if schema_mode not in ("raw", "conforming"):
        raise ValueError(f"unknown schema_mode {schema_mode!r}")
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: missing header row") from None
        if any(h == "" for h in header):
            raise IngestError(f"{path}: empty column name in header")
        seen = set()
        for h in header:
            if h in seen:
                raise IngestError(f"{path}: duplicate column name {h!r}")
            seen.add(h)

        feat_idx = [i for i, h in enumerate(header) if h not in (TIMESTAMP, LABEL)]
        ts_idx = header.index(TIMESTAMP) if TIMESTAMP in header else None
        lab_idx = header.index(LABEL) if LABEL in header else None

        rows, labels, stamps = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(
                    f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}"
                )
            vec = []
            for i in feat_idx:
                vec.append(_parse_cell(path, lineno, header[i], row[i]))
            rows.append(vec)
            if ts_idx is not None:
                stamps.append(_parse_cell(path, lineno, TIMESTAMP, row[ts_idx]))
            else:
                stamps.append(float(len(stamps)))
            if lab_idx is not None:
                try:
                    labels.append(parse_label(row[lab_idx]))
                except IngestError as exc:
                    raise IngestError(f"{path}: row {lineno}, column {LABEL!r}: {exc}") from None
            else:
                labels.append(UNLABELED)

    columns = [header[i] for i in feat_idx]
    values = np.array(rows, dtype=float).reshape(len(rows), len(columns))
    ds = RawDataset(columns, values, labels, stamps)
    if schema_mode == "raw":
        return ds
    schema = FingerprintSchema(columns)
    return schema, to_fingerprints(ds)


def _parse_cell(path, lineno: int, column: str, cell: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise IngestError(
            f"{path}: row {lineno}, column {column!r}: non-numeric value {cell!r}"
        ) from None
    if not math.isfinite(value):
        raise IngestError(f"{path}: row {lineno}, column {column!r}: non-finite value {cell!r}")
    return value


def to_fingerprints(ds: RawDataset) -> list[Fingerprint]:
    return [
        Fingerprint(ds.values[i], ds.labels[i], ds.timestamps[i]) for i in range(ds.n_rows)
    ]


def write_csv(path: str | Path, columns: Sequence[str], fingerprints: Iterable[Fingerprint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([TIMESTAMP, LABEL, *columns])
        for fp in fingerprints:
            writer.writerow([repr(float(fp.timestamp)), fp.label, *(repr(float(v)) for v in fp.values)])


# --- selection stages -------------------------------------------------------


def _degenerate_tags(ds: RawDataset, temporal: Iterable[str]) -> dict[str, str]:
    temporal = set(temporal)
    tags: dict[str, str] = {}
    kept: list[int] = []
    for j, name in enumerate(ds.columns):
        col = ds.values[:, j]
        if name in temporal:
            tags[name] = DROPPED_TEMPORAL
        elif any(np.array_equal(col, ds.values[:, k]) for k in kept):
            tags[name] = DROPPED_DUPLICATE
        elif np.all(col == col[0]):
            tags[name] = DROPPED_CONSTANT
        else:
            kept.append(j)
    return tags


def drop_degenerate(ds: RawDataset, temporal: Iterable[str] = ()) -> RawDataset:
    """Remove duplicated, constant and declared-temporal columns.

    A duplicate is a column element-wise identical to an earlier surviving
    column; the first occurrence is kept.
    """
    if ds.n_rows == 0:
        raise FeatureSelectionError("empty dataset")
    tags = _degenerate_tags(ds, temporal)
    keep = [j for j, name in enumerate(ds.columns) if name not in tags]
    if not keep:
        raise FeatureSelectionError("drop_degenerate removed every column")
    return ds.select(keep)


def coefficient_of_variation(ds: RawDataset) -> np.ndarray:
    mean = ds.values.mean(axis=0)
    std = ds.values.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = std / np.abs(mean)
    cv[np.abs(mean) < CV_MEAN_EPS] = np.inf
    return cv


def drop_volatile(ds: RawDataset, cv_threshold: float) -> RawDataset:
    """Remove columns whose std/|mean| exceeds ``cv_threshold``."""
    if ds.n_rows < 1:
        raise FeatureSelectionError("empty dataset")
    if not cv_threshold > 0:
        raise ValueError("cv_threshold must be > 0")
    cv = coefficient_of_variation(ds)
    keep = [j for j in range(len(ds.columns)) if cv[j] <= cv_threshold]
    if not keep:
        raise FeatureSelectionError("drop_volatile removed every column")
    return ds.select(keep)


def drop_correlated(ds: RawDataset, corr_threshold: float = 0.99) -> RawDataset:
    """Greedy absolute-Pearson filter; the earlier column of a pair survives."""
    if ds.n_rows < 2:
        raise FeatureSelectionError("need at least 2 rows to estimate correlation")
    if not 0 < corr_threshold <= 1:
        raise ValueError("corr_threshold must be in (0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.abs(np.corrcoef(ds.values, rowvar=False))
    corr = np.nan_to_num(np.atleast_2d(corr), nan=0.0)
    kept: list[int] = []
    for j in range(len(ds.columns)):
        if all(corr[j, k] <= corr_threshold for k in kept):
            kept.append(j)
    return ds.select(kept)


@dataclass
class PipelineConfig:
    temporal: list[str] = field(default_factory=list)
    cv_threshold: float = 0.5
    corr_threshold: float = 0.99
    target_count: Optional[int] = 50
    window_seconds: float = 5.0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PipelineResult:
    schema: FingerprintSchema
    fingerprints: list[Fingerprint]
    attrition: dict[str, int]


def run_pipeline(ds: RawDataset, config: PipelineConfig) -> PipelineResult:
    """Run degenerate -> volatile -> correlated filtering, then trim to target.

    When more columns survive than ``config.target_count``, the ones with the
    lowest coefficient of variation are kept (stable on ties), in their
    original order.
    """
    provenance: dict[str, str] = {}
    attrition = {"input": len(ds.columns)}

    tags = _degenerate_tags(ds, config.temporal)
    provenance.update(tags)
    stage = drop_degenerate(ds, config.temporal)
    attrition["degenerate"] = len(ds.columns) - len(stage.columns)

    after_vol = drop_volatile(stage, config.cv_threshold)
    for name in stage.columns:
        if name not in after_vol.columns:
            provenance[name] = DROPPED_VOLATILE
    attrition["volatile"] = len(stage.columns) - len(after_vol.columns)

    after_corr = drop_correlated(after_vol, config.corr_threshold)
    for name in after_vol.columns:
        if name not in after_corr.columns:
            provenance[name] = DROPPED_CORRELATED
    attrition["correlated"] = len(after_vol.columns) - len(after_corr.columns)

    final = after_corr
    target = config.target_count
    if target is not None:
        n = len(after_corr.columns)
        if n < target:
            raise FeatureSelectionError(
                f"{n} features survive, target is {target}; attrition: "
                + ", ".join(f"{k}={v}" for k, v in attrition.items())
            )
        if n > target:
            cv = coefficient_of_variation(after_corr)
            order = np.argsort(cv, kind="stable")[:target]
            keep = sorted(order.tolist())
            final = after_corr.select(keep)
            for name in after_corr.columns:
                if name not in final.columns:
                    provenance[name] = DROPPED_OVERFLOW
    attrition["overflow"] = len(after_corr.columns) - len(final.columns)

    for name in final.columns:
        provenance[name] = RETAINED
    # Re-key provenance in input column order.
    provenance = {name: provenance[name] for name in ds.columns}

    schema = FingerprintSchema(list(final.columns), config.window_seconds, provenance)
    return PipelineResult(schema, to_fingerprints(final), attrition)
