"""Tabular datasets with metadata, normalization and few-shot splits."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

CATEGORICAL = "categorical"
NUMERICAL = "numerical"

CLASSIFICATION = "classification"
REGRESSION = "regression"

MISSING_TOKEN = "missing"


class SchemaError(ValueError):
    """Metadata or data file violates the declared schema."""


class ParseError(ValueError):
    """A cell could not be parsed as its declared kind."""


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    description: str
    kind: str  # CATEGORICAL or NUMERICAL

    def __post_init__(self):
        if not self.name:
            raise SchemaError("feature name must be non-empty")
        if self.kind not in (CATEGORICAL, NUMERICAL):
            raise SchemaError(f"unknown feature kind {self.kind!r} for {self.name!r}")


@dataclass(frozen=True)
class Metadata:
    task_description: str
    features: tuple[FeatureDescriptor, ...]
    task_type: str  # CLASSIFICATION or REGRESSION
    class_names: tuple[str, ...] = ()
    label_column: str = "label"

    def __post_init__(self):
        if not self.features:
            raise SchemaError("metadata must declare at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate feature names: {dupes}")
        if self.task_type == CLASSIFICATION:
            if len(self.class_names) < 2:
                raise SchemaError("classification requires at least 2 class names")
        elif self.task_type == REGRESSION:
            if self.class_names:
                raise SchemaError("regression metadata must not carry class names")
        else:
            raise SchemaError(f"unknown task type {self.task_type!r}")

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class Sample:
    values: dict  # feature name -> str (categorical) | float | None (numerical)
    label: float | int | None = None


@dataclass(frozen=True)
class NormStats:
    feature_mean: dict = field(default_factory=dict)
    feature_std: dict = field(default_factory=dict)  # population std; 0 for constants
    target_min: float | None = None
    target_max: float | None = None


@dataclass(frozen=True)
class TabularDataset:
    metadata: Metadata
    labeled: tuple[Sample, ...]
    unlabeled: tuple[Sample, ...]
    test: tuple[Sample, ...] = ()
    norm_stats: NormStats | None = None


@dataclass(frozen=True)
class FewShotSplit:
    shot: int
    seed: int
    labeled_indices: tuple[int, ...]


def load_metadata(path) -> Metadata:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise SchemaError(f"metadata file {path} is not a mapping")
    for key in ("task_description", "task_type", "label_column", "features"):
        if key not in doc:
            raise SchemaError(f"metadata file missing required key {key!r}")
    features = tuple(
        FeatureDescriptor(
            name=str(f["name"]),
            description=str(f.get("description", "")),
            kind=str(f["kind"]),
        )
        for f in doc["features"]
    )
    return Metadata(
        task_description=str(doc["task_description"]),
        features=features,
        task_type=str(doc["task_type"]),
        class_names=tuple(str(c) for c in doc.get("class_names", []) or []),
        label_column=str(doc["label_column"]),
    )


def save_metadata(metadata: Metadata, path) -> None:
    doc = {
        "task_description": metadata.task_description,
        "task_type": metadata.task_type,
        "label_column": metadata.label_column,
        "features": [
            {"name": f.name, "description": f.description, "kind": f.kind}
            for f in metadata.features
        ],
    }
    if metadata.class_names:
        doc["class_names"] = list(metadata.class_names)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _parse_label(raw: str, metadata: Metadata, row_index: int):
    raw = raw.strip()
    if raw == "" or raw == "?":
        return None
    if metadata.task_type == CLASSIFICATION:
        if raw in metadata.class_names:
            return metadata.class_names.index(raw)
        try:
            idx = int(raw)
        except ValueError as exc:
            raise ParseError(
                f"row {row_index}: label {raw!r} is neither a class name nor an index"
            ) from exc
        if not 0 <= idx < metadata.n_classes:
            raise ParseError(f"row {row_index}: class index {idx} out of range")
        return idx
    try:
        return float(raw)
    except ValueError as exc:
        raise ParseError(f"row {row_index}: unparsable regression label {raw!r}") from exc


def _parse_rows(path, metadata: Metadata, delimiter: str):
    labeled, unlabeled = [], []
    by_name = {f.name: f for f in metadata.features}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for feat in metadata.features:
            if feat.name not in header:
                raise SchemaError(f"data file {path} missing column {feat.name!r}")
        if metadata.label_column not in header:
            raise SchemaError(f"data file {path} missing label column {metadata.label_column!r}")
        for i, row in enumerate(reader):
            values = {}
            for name, feat in by_name.items():
                cell = (row[name] or "").strip()
                if feat.kind == CATEGORICAL:
                    values[name] = cell if cell else MISSING_TOKEN
                else:
                    if cell == "" or cell == "?":
                        values[name] = None  # imputed to the mean at encode time
                    else:
                        try:
                            values[name] = float(cell)
                        except ValueError as exc:
                            raise ParseError(
                                f"row {i}: unparsable numerical cell {cell!r} in {name!r}"
                            ) from exc
            label = _parse_label(row[metadata.label_column] or "", metadata, i)
            sample = Sample(values=values, label=label)
            (labeled if label is not None else unlabeled).append(sample)
    return tuple(labeled), tuple(unlabeled)


def load_dataset(data_path, metadata_path, test_path=None, delimiter=",") -> TabularDataset:
    """Load a delimiter-separated data file plus its metadata document.

    Rows whose label cell is empty land in the unlabeled split. An optional
    test file (same schema, fully labeled) populates the test split.
    """
    metadata = load_metadata(metadata_path)
    labeled, unlabeled = _parse_rows(data_path, metadata, delimiter)
    test: tuple[Sample, ...] = ()
    if test_path is not None:
        test_labeled, test_unlabeled = _parse_rows(test_path, metadata, delimiter)
        test = test_labeled + test_unlabeled
    dataset = TabularDataset(metadata=metadata, labeled=labeled, unlabeled=unlabeled, test=test)
    return replace(dataset, norm_stats=compute_norm_stats(dataset))


def compute_norm_stats(dataset: TabularDataset) -> NormStats:
    """Per-feature mean/std over labeled+unlabeled, target min/max over labeled.

    Std is the population std. A constant feature is recorded with std 0 and
    treated as 1 when applied. Missing numerical cells are ignored here.
    """
    rows = dataset.labeled + dataset.unlabeled
    if not rows:
        raise SchemaError("cannot compute normalization stats on an empty dataset")
    mean, std = {}, {}
    for feat in dataset.metadata.features:
        if feat.kind != NUMERICAL:
            continue
        vals = np.array(
            [r.values[feat.name] for r in rows if r.values[feat.name] is not None],
            dtype=np.float64,
        )
        if vals.size == 0:
            mean[feat.name], std[feat.name] = 0.0, 0.0
        else:
            mean[feat.name] = float(vals.mean())
            std[feat.name] = float(vals.std())  # ddof=0
    tmin = tmax = None
    if dataset.metadata.task_type == REGRESSION and dataset.labeled:
        labels = np.array([r.label for r in dataset.labeled], dtype=np.float64)
        tmin, tmax = float(labels.min()), float(labels.max())
    return NormStats(feature_mean=mean, feature_std=std, target_min=tmin, target_max=tmax)


def normalize_value(stats: NormStats, name: str, value) -> float:
    """Z-score a numerical cell; missing cells map to 0 (the training mean)."""
    if value is None:
        return 0.0
    std = stats.feature_std[name]
    if std == 0.0:
        std = 1.0
    return (float(value) - stats.feature_mean[name]) / std


def normalize_target(stats: NormStats, y: float) -> float:
    span = stats.target_max - stats.target_min
    if span == 0.0:
        span = 1.0
    return (float(y) - stats.target_min) / span


def denormalize_target(stats: NormStats, y: float) -> float:
    span = stats.target_max - stats.target_min
    if span == 0.0:
        span = 1.0
    return float(y) * span + stats.target_min


def sample_few_shot(dataset: TabularDataset, shot: int, seed: int) -> FewShotSplit:
    """Draw a deterministic few-shot subset of the labeled pool.

    Classification draws `shot` samples per class (stratified); regression
    draws `shot` samples total, uniformly without replacement.
    """
    if shot < 1:
        raise ValueError("shot must be >= 1")
    rng = np.random.default_rng(seed)
    if dataset.metadata.task_type == CLASSIFICATION:
        indices: list[int] = []
        for c in range(dataset.metadata.n_classes):
            pool = [i for i, s in enumerate(dataset.labeled) if s.label == c]
            if not pool:
                raise ValueError(f"class {c} has no labeled samples")
            take = shot
            if shot > len(pool):
                warnings.warn(
                    f"class {c}: requested {shot} shots but only {len(pool)} available"
                )
                take = len(pool)
            chosen = rng.choice(len(pool), size=take, replace=False)
            indices.extend(pool[j] for j in sorted(chosen))
    else:
        n = len(dataset.labeled)
        if shot > n:
            warnings.warn(f"requested {shot} shots but only {n} labeled rows available")
        chosen = rng.choice(n, size=min(shot, n), replace=False)
        indices = sorted(int(j) for j in chosen)
    return FewShotSplit(shot=shot, seed=seed, labeled_indices=tuple(indices))


def write_dataset_csv(metadata: Metadata, samples, path, delimiter=",") -> None:
    """Serialize samples back to the data-file format (inverse of load)."""
    names = metadata.feature_names
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(names + [metadata.label_column])
        for s in samples:
            row = []
            for feat in metadata.features:
                v = s.values[feat.name]
                if v is None:
                    row.append("")
                elif feat.kind == NUMERICAL:
                    row.append(repr(float(v)))
                else:
                    row.append(str(v))
            if s.label is None:
                row.append("")
            elif metadata.task_type == CLASSIFICATION:
                row.append(metadata.class_names[int(s.label)])
            else:
                row.append(repr(float(s.label)))
            writer.writerow(row)


def _require_finite(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise ValueError(f"non-finite {what}: {x}")
    return x
