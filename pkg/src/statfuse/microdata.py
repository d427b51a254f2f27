"""Weighted survey microdata: column schema, validation, CSV I/O.

A :class:`Microdata` is an immutable, fully observed rectangular table.
Categorical columns are held as pandas ``Categorical`` with the declared
level order; every numeric column is float64.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import yaml

KINDS = ("categorical", "continuous", "semicontinuous")
ROLES = ("predictor", "fusion", "weight", "replicate_weight", "id")


class SchemaError(ValueError):
    """Raised when a table or schema violates the column contract."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "continuous"
    role: str = "predictor"
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind == "categorical":
            if not self.levels:
                raise SchemaError(f"column {self.name!r}: categorical needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"column {self.name!r}: duplicate levels")
        elif self.levels:
            raise SchemaError(f"column {self.name!r}: levels given for {self.kind} column")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.levels:
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        return cls(
            name=str(d["name"]),
            kind=d.get("kind", "continuous"),
            role=d.get("role", "predictor"),
            levels=tuple(d.get("levels", ())),
        )


def _validate_schema(schema: Sequence[ColumnSpec]) -> None:
    names = [c.name for c in schema]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise SchemaError(f"duplicate column names in schema: {sorted(dup)}")
    n_weight = sum(c.role == "weight" for c in schema)
    if n_weight != 1:
        raise SchemaError(f"schema needs exactly one weight column, found {n_weight}")
    if sum(c.role == "id" for c in schema) > 1:
        raise SchemaError("schema declares more than one id column")


@dataclass(frozen=True, eq=False)
class Microdata:
    """Validated weighted microdata.

    Build with :meth:`from_frame` or :func:`load_microdata`; the constructor
    does not validate.
    """

    columns: tuple
    frame: pd.DataFrame = field(repr=False)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: Sequence[ColumnSpec]) -> "Microdata":
        schema = tuple(schema)
        _validate_schema(schema)
        names = [c.name for c in schema]
        missing = [n for n in names if n not in frame.columns]
        if missing:
            raise SchemaError(f"columns declared in schema but absent from data: {missing}")
        extra = [c for c in frame.columns if c not in names]
        if extra:
            raise SchemaError(f"columns present in data but not declared in schema: {extra}")
        if len(frame) == 0:
            raise SchemaError("table has no rows")

        out = {}
        for spec in schema:
            col = frame[spec.name]
            bad = np.flatnonzero(pd.isna(col).to_numpy())
            if bad.size:
                raise SchemaError(
                    f"missing value in column {spec.name!r} at row {int(bad[0])}"
                )
            if spec.role == "id":
                values = col.astype(str).to_numpy()
                if len(set(values)) != len(values):
                    raise SchemaError(f"id column {spec.name!r} has duplicate values")
                out[spec.name] = col.reset_index(drop=True)
            elif spec.is_categorical:
                strs = col.astype(str)
                allowed = set(spec.levels)
                unknown = ~strs.isin(allowed).to_numpy()
                if unknown.any():
                    i = int(np.flatnonzero(unknown)[0])
                    raise SchemaError(
                        f"column {spec.name!r} row {i}: level {strs.iloc[i]!r} "
                        f"not in declared levels {list(spec.levels)}"
                    )
                out[spec.name] = pd.Categorical(strs.to_numpy(), categories=list(spec.levels))
            else:
                try:
                    values = pd.to_numeric(col).to_numpy(dtype=np.float64)
                except (TypeError, ValueError) as exc:
                    raise SchemaError(f"column {spec.name!r}: non-numeric value ({exc})") from None
                if not np.all(np.isfinite(values)):
                    i = int(np.flatnonzero(~np.isfinite(values))[0])
                    raise SchemaError(f"column {spec.name!r} row {i}: non-finite value")
                if spec.role == "weight" and np.any(values <= 0):
                    i = int(np.flatnonzero(values <= 0)[0])
                    raise SchemaError(
                        f"weight column {spec.name!r} row {i}: non-positive weight {values[i]!r}"
                    )
                if spec.role == "replicate_weight" and np.any(values < 0):
                    i = int(np.flatnonzero(values < 0)[0])
                    raise SchemaError(f"replicate weight {spec.name!r} row {i}: negative weight")
                out[spec.name] = values
        df = pd.DataFrame(out, columns=names)
        return cls(columns=schema, frame=df)

    # -- accessors -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def spec(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def names_with_role(self, role: str) -> list[str]:
        return [c.name for c in self.columns if c.role == role]

    @property
    def weight_name(self) -> str:
        return self.names_with_role("weight")[0]

    @property
    def weights(self) -> np.ndarray:
        return self.frame[self.weight_name].to_numpy()

    @property
    def replicate_weights(self) -> np.ndarray | None:
        cols = self.names_with_role("replicate_weight")
        if not cols:
            return None
        return self.frame[cols].to_numpy(dtype=np.float64)

    @property
    def id_name(self) -> str | None:
        ids = self.names_with_role("id")
        return ids[0] if ids else None

    @property
    def ids(self) -> np.ndarray:
        """Row identifiers as strings; row positions when no id column exists."""
        if self.id_name is None:
            return np.arange(self.n).astype(str)
        return self.frame[self.id_name].astype(str).to_numpy()

    def values(self, name: str) -> np.ndarray:
        """Numeric view of a column; categoricals come back as integer codes."""
        col = self.frame[name]
        if self.spec(name).is_categorical:
            return col.cat.codes.to_numpy().astype(np.int64)
        return col.to_numpy()

    def select(self, names: Iterable[str]) -> "Microdata":
        keep = set(names)
        schema = [c for c in self.columns if c.name in keep]
        return Microdata(columns=tuple(schema), frame=self.frame[[c.name for c in schema]].copy())

    def drop(self, names: Iterable[str]) -> "Microdata":
        gone = set(names)
        return self.select([c.name for c in self.columns if c.name not in gone])

    def take(self, rows) -> "Microdata":
        return Microdata(columns=self.columns, frame=self.frame.iloc[rows].reset_index(drop=True))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(yaml.safe_dump([c.to_dict() for c in self.columns]).encode())
        h.update(pd.util.hash_pandas_object(self.frame, index=False).to_numpy().tobytes())
        return h.hexdigest()[:16]


# -- CSV and schema sidecar ---------------------------------------------------


def schema_path_for(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".schema.yaml")


def read_schema(path) -> list[ColumnSpec]:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if isinstance(doc, dict):
        doc = doc.get("columns", [])
    if not isinstance(doc, list):
        raise SchemaError(f"{path}: expected a list of columns")
    return [ColumnSpec.from_dict(d) for d in doc]


def write_schema(schema: Sequence[ColumnSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"columns": [c.to_dict() for c in schema]}, fh, sort_keys=False)


def load_microdata(path, schema: Sequence[ColumnSpec] | str | os.PathLike | None = None) -> Microdata:
    """Read a CSV file and validate it against ``schema``.

    ``schema`` may be a list of :class:`ColumnSpec`, a path to a schema file,
    or ``None`` to use the sidecar ``<stem>.schema.yaml`` next to the CSV.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if schema is None:
        schema = read_schema(schema_path_for(path))
    elif isinstance(schema, (str, os.PathLike)):
        schema = read_schema(schema)
    schema = list(schema)
    text_cols = [c.name for c in schema if c.is_categorical or c.role == "id"]
    frame = pd.read_csv(
        path,
        dtype={n: str for n in text_cols},
        keep_default_na=False,
        na_values=[""],
        float_precision="round_trip",
        encoding="utf-8",
    )
    header = list(frame.columns)
    declared = [c.name for c in schema]
    if sorted(header) != sorted(declared):
        missing = [n for n in declared if n not in header]
        extra = [n for n in header if n not in declared]
        raise SchemaError(f"{path}: header mismatch; missing={missing} unexpected={extra}")
    return Microdata.from_frame(frame, schema)


def write_microdata(data: Microdata, path, sidecar: bool = True) -> None:
    """Write ``data`` as CSV (round-trip exact) plus an optional schema sidecar."""
    path = Path(path)
    frame = data.frame.copy()
    for c in data.columns:
        if c.is_categorical:
            frame[c.name] = frame[c.name].astype(str)
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")
    if sidecar:
        write_schema(data.columns, schema_path_for(path))


# -- donor/recipient compatibility ---------------------------------------------


@dataclass
class CompatibilityReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, column: str, problem: str) -> None:
        self.violations.append((column, problem))

    def __str__(self) -> str:
        if self.ok:
            return "compatible"
        return "; ".join(f"{c}: {p}" for c, p in self.violations)


def check_compatibility(donor: Microdata, recipient: Microdata, spec) -> CompatibilityReport:
    """List every schema conflict between donor and recipient for ``spec``.

    ``spec`` needs ``predictors`` and ``fusion_variables`` attributes (a
    :class:`statfuse.pipeline.FusionSpec` qualifies).
    """
    report = CompatibilityReport()
    for name in spec.predictors:
        in_d, in_r = donor.has(name), recipient.has(name)
        if not in_d:
            report.add(name, "predictor missing from donor")
        if not in_r:
            report.add(name, "predictor missing from recipient")
        if not (in_d and in_r):
            continue
        d, r = donor.spec(name), recipient.spec(name)
        if d.kind != r.kind:
            report.add(name, f"kind differs (donor {d.kind}, recipient {r.kind})")
        elif d.is_categorical:
            only_d = [lv for lv in d.levels if lv not in r.levels]
            only_r = [lv for lv in r.levels if lv not in d.levels]
            for lv in only_d:
                report.add(name, f"level {lv!r} in donor but not recipient")
            for lv in only_r:
                report.add(name, f"level {lv!r} in recipient but not donor")
            if not only_d and not only_r and d.levels != r.levels:
                report.add(name, "level order differs")
    for name in spec.fusion_variables:
        if not donor.has(name):
            report.add(name, "fusion variable missing from donor")
        if recipient.has(name):
            report.add(name, "fusion variable present in recipient")
    return report
