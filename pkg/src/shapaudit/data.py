"""Tabular dataset ingestion, protected-attribute handling and seeded resampling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class SchemaError(ValueError):
    """A declared column is missing or the schema is inconsistent with the data."""


class ParseError(ValueError):
    """A cell could not be parsed."""


class ValidationError(ValueError):
    """Parsed values violate a dataset invariant."""


@dataclass(frozen=True)
class ProtectedSpec:
    column: str
    groups: tuple[int, ...]
    favorable_outcome: int = 1

    def __post_init__(self):
        if len(self.groups) < 2:
            raise SchemaError(f"protected column {self.column!r} needs at least 2 groups, got {self.groups}")
        if self.favorable_outcome not in (0, 1):
            raise SchemaError("favorable_outcome must be 0 or 1")


@dataclass(frozen=True)
class Schema:
    """Column roles for a CSV file.

    ``groups`` may hold raw strings (resolved through the categorical encoding)
    or numeric codes; when omitted, every distinct value of the protected column
    becomes a group.
    """

    label: str
    protected: str
    score: str | None = None
    groups: tuple[Any, ...] | None = None
    favorable_outcome: int = 1
    features: tuple[str, ...] | None = None
    categorical: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Schema":
        unknown = set(d) - {"label", "protected", "score", "groups", "favorable_outcome", "features", "categorical"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        if "label" not in d or "protected" not in d:
            raise SchemaError("schema requires 'label' and 'protected'")
        return cls(
            label=d["label"],
            protected=d["protected"],
            score=d.get("score"),
            groups=tuple(d["groups"]) if d.get("groups") is not None else None,
            favorable_outcome=int(d.get("favorable_outcome", 1)),
            features=tuple(d["features"]) if d.get("features") is not None else None,
            categorical=tuple(d.get("categorical", ())),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable feature matrix with binary outcome and optional model score.

    Categorical feature columns hold integer codes; ``encodings`` maps each such
    column to its original strings in code order.
    """

    rows: np.ndarray
    column_names: tuple[str, ...]
    label: np.ndarray
    score: np.ndarray | None = None
    encodings: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValidationError("rows must be a 2-D matrix")
        if rows.shape[0] < 1:
            raise ValidationError("dataset must contain at least one row")
        if rows.shape[1] != len(self.column_names):
            raise ValidationError(f"{rows.shape[1]} feature columns but {len(self.column_names)} names")
        if np.isnan(rows).any():
            raise ValidationError("feature matrix contains NaN")
        label = np.asarray(self.label)
        if label.shape != (rows.shape[0],):
            raise ValidationError("label length does not match row count")
        if not np.isin(label, (0, 1)).all():
            bad = int(np.flatnonzero(~np.isin(label, (0, 1)))[0])
            raise ValidationError(f"label must be 0 or 1 (row {bad}: {label[bad]!r})")
        score = self.score
        if score is not None:
            score = np.array(score, dtype=np.float64)
            if score.shape != (rows.shape[0],):
                raise ValidationError("score length does not match row count")
            if np.isnan(score).any() or (score < 0).any() or (score > 1).any():
                raise ValidationError("score must lie in [0, 1]")
            score.setflags(write=False)
        rows.setflags(write=False)
        label = label.astype(np.int64)
        label.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def n_features(self) -> int:
        return self.rows.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise SchemaError(f"column {name!r} not in dataset") from None

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.column_index(name)]

    def take(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            rows=self.rows[idx],
            column_names=self.column_names,
            label=self.label[idx],
            score=None if self.score is None else self.score[idx],
            encodings=self.encodings,
        )

    def equals(self, other: "Dataset") -> bool:
        if self.column_names != other.column_names or self.encodings != other.encodings:
            return False
        if (self.score is None) != (other.score is None):
            return False
        same_score = self.score is None or np.array_equal(self.score, other.score)
        return np.array_equal(self.rows, other.rows) and np.array_equal(self.label, other.label) and same_score

    def decode(self, column: str, code: float) -> str:
        """Original string for an encoded value; numeric columns render as-is."""
        if column in self.encodings:
            return self.encodings[column][int(code)]
        return _format_number(code)


def _format_number(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def _parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_csv(path: str | Path, schema: Schema) -> tuple[Dataset, ProtectedSpec]:
    """Read an RFC-4180 CSV with a header row.

    A feature column is numeric when its first cell parses as a number (unless
    listed in ``schema.categorical``); otherwise it is dictionary-encoded in
    first-appearance order. Empty cells are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        records = [r for r in reader if r]

    header = [h.strip() for h in header]
    for name in (schema.label, schema.protected, schema.score):
        if name is not None and name not in header:
            raise SchemaError(f"{path}: declared column {name!r} not found in header")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")

    reserved = {schema.label, schema.score}
    if schema.features is not None:
        missing = [c for c in schema.features if c not in header]
        if missing:
            raise SchemaError(f"{path}: feature columns not found: {missing}")
        feature_names = [c for c in header if c in set(schema.features)]
    else:
        feature_names = [c for c in header if c not in reserved]
    if schema.protected not in feature_names:
        raise SchemaError(f"protected column {schema.protected!r} must be a feature")
    if not records:
        raise ValidationError(f"{path}: no data rows")

    col_pos = {name: header.index(name) for name in header}
    for i, rec in enumerate(records):
        if len(rec) != len(header):
            raise ParseError(f"{path}: row {i} has {len(rec)} cells, expected {len(header)}")
        for name in feature_names + [c for c in reserved if c]:
            if rec[col_pos[name]].strip() == "":
                raise ValidationError(f"{path}: missing value in column {name!r} at row {i}")

    n = len(records)
    rows = np.empty((n, len(feature_names)), dtype=np.float64)
    encodings: dict[str, list[str]] = {}
    for j, name in enumerate(feature_names):
        cells = [rec[col_pos[name]].strip() for rec in records]
        categorical = name in schema.categorical or _parse_float(cells[0]) is None
        if categorical:
            codes: dict[str, int] = {}
            for i, c in enumerate(cells):
                rows[i, j] = codes.setdefault(c, len(codes))
            encodings[name] = list(codes)
        else:
            for i, c in enumerate(cells):
                v = _parse_float(c)
                if v is None:
                    raise ParseError(f"{path}: non-numeric value {c!r} in numeric column {name!r} at row {i}")
                rows[i, j] = v

    label = np.empty(n, dtype=np.float64)
    for i, rec in enumerate(records):
        v = _parse_float(rec[col_pos[schema.label]].strip())
        if v is None:
            raise ParseError(f"{path}: non-numeric label at row {i}")
        if v not in (0.0, 1.0):
            raise ValidationError(f"{path}: label at row {i} is {v}, expected 0 or 1")
        label[i] = v
    score = None
    if schema.score is not None:
        score = np.empty(n, dtype=np.float64)
        for i, rec in enumerate(records):
            v = _parse_float(rec[col_pos[schema.score]].strip())
            if v is None:
                raise ParseError(f"{path}: non-numeric score at row {i}")
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{path}: score at row {i} is {v}, outside [0, 1]")
            score[i] = v

    data = Dataset(rows=rows, column_names=tuple(feature_names), label=label.astype(np.int64),
                   score=score, encodings=encodings)
    return data, resolve_protected(data, schema)


def resolve_protected(data: Dataset, schema: Schema) -> ProtectedSpec:
    values = data.column(schema.protected)
    present = sorted(set(values.tolist()))
    if schema.groups is None:
        groups = tuple(int(v) if float(v).is_integer() else v for v in present)
    else:
        groups = tuple(_resolve_group(data, schema.protected, g) for g in schema.groups)
        missing = set(present) - set(groups)
        if missing:
            shown = [data.decode(schema.protected, v) for v in sorted(missing)]
            raise ValidationError(f"protected column {schema.protected!r} has values outside declared groups: {shown}")
    spec = ProtectedSpec(column=schema.protected, groups=groups, favorable_outcome=schema.favorable_outcome)
    validate_protected(data, spec)
    return spec


def _resolve_group(data: Dataset, column: str, g: Any) -> int | float:
    enc = data.encodings.get(column)
    if enc is not None:
        if isinstance(g, str):
            if g not in enc:
                raise SchemaError(f"group {g!r} does not occur in column {column!r}")
            return enc.index(g)
        return int(g)
    if isinstance(g, str):
        v = _parse_float(g)
        if v is None:
            raise SchemaError(f"group {g!r} is not numeric but column {column!r} is")
        g = v
    return int(g) if float(g).is_integer() else float(g)


def validate_protected(data: Dataset, spec: ProtectedSpec) -> None:
    values = data.column(spec.column)
    bad = ~np.isin(values, np.asarray(spec.groups, dtype=np.float64))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"row {i}: {spec.column}={values[i]!r} not in groups {spec.groups}")


def write_csv(data: Dataset, path: str | Path, label: str = "label", score: str = "score") -> None:
    """Write ``data`` back as CSV, decoding categorical columns to their strings."""
    header = list(data.column_names) + [label] + ([score] if data.score is not None else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n_rows):
            rec = [data.decode(c, data.rows[i, j]) if c in data.encodings else repr(float(data.rows[i, j]))
                   for j, c in enumerate(data.column_names)]
            rec.append(str(int(data.label[i])))
            if data.score is not None:
                rec.append(repr(float(data.score[i])))
            w.writerow(rec)


def save_encodings(data: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data.encodings, indent=2, sort_keys=True) + "\n")


def load_encodings(path: str | Path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())


def permute_protected(data: Dataset, spec: ProtectedSpec, seed: int) -> Dataset:
    """Copy of ``data`` with the protected column randomly permuted.

    Group proportions are preserved exactly; every other column is untouched.
    """
    validate_protected(data, spec)
    j = data.column_index(spec.column)
    rng = np.random.default_rng(seed)
    rows = data.rows.copy()
    rows[:, j] = rows[rng.permutation(data.n_rows), j]
    return replace(data, rows=rows)


def split(data: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint train/test partition; each side keeps original row order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(math.floor(train_fraction * data.n_rows + 0.5))
    if n_train < 1 or n_train > data.n_rows - 1:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side for {data.n_rows} rows")
    train_idx, test_idx = split_indices(data.n_rows, n_train, seed)
    return data.take(train_idx), data.take(test_idx)


def split_indices(n: int, n_train: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def group_masks(data: Dataset, spec: ProtectedSpec) -> dict[Any, np.ndarray]:
    values = data.column(spec.column)
    return {g: values == g for g in spec.groups}
