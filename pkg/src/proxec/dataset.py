"""Subject-level data from a primary trial (R=0) and an external control study (R=1).

Data are held column-wise in an immutable :class:`StudyDataset`; a
:class:`SubjectRecord` is a read-only row view. Categorical covariates are
expanded to indicator columns on ingestion with the reference level dropped.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, SchemaError

MISSING_TOKENS = frozenset({"", "NA"})


@dataclass(frozen=True)
class SubjectRecord:
    study: int
    arm: int
    time: float
    event: int
    covariates: tuple[float, ...]
    nce: float | None = None
    nco: float | None = None


@dataclass(frozen=True)
class Categorical:
    """Indicator coding of one categorical variable."""

    name: str
    levels: tuple[str, ...]  # levels[0] is the dropped reference

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(f"{self.name}{lvl}" for lvl in self.levels[1:])


@dataclass(frozen=True)
class Schema:
    covariates: tuple[str, ...] = ()
    has_nce: bool = False
    has_nco: bool = False
    categoricals: tuple[Categorical, ...] = ()
    latent: tuple[str, ...] = ()


@dataclass(frozen=True)
class Reject:
    row: int
    reason: str


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StudyDataset:
    """Column store of subject records.

    ``nce``/``nco`` hold ``nan`` for missing values and are ``None`` when the
    schema has no such column. ``latent`` carries simulation-only columns
    such as the unmeasured confounder ``U``.
    """

    schema: Schema
    study: np.ndarray
    arm: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    nce: np.ndarray | None = None
    nco: np.ndarray | None = None
    latent: Mapping[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""
    rejects: tuple[Reject, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.time)
        set_ = object.__setattr__
        set_(self, "study", _frozen(self.study, np.int64))
        set_(self, "arm", _frozen(self.arm, np.int64))
        set_(self, "time", _frozen(self.time, float))
        set_(self, "event", _frozen(self.event, np.int64))
        cov = np.asarray(self.covariates, dtype=float).reshape(n, -1)
        set_(self, "covariates", _frozen(cov, float))
        if self.nce is not None:
            set_(self, "nce", _frozen(self.nce, float))
        if self.nco is not None:
            set_(self, "nco", _frozen(self.nco, float))
        set_(self, "latent", {k: _frozen(v, float) for k, v in self.latent.items()})
        self._validate()

    def _validate(self):
        n = len(self.time)
        for name in ("study", "arm", "event"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"column {name!r} has wrong length")
        if self.covariates.shape != (n, len(self.schema.covariates)):
            raise SchemaError("covariate matrix does not match schema")
        if (self.nce is None) == self.schema.has_nce or (self.nco is None) == self.schema.has_nco:
            raise SchemaError("negative-control columns do not match schema flags")
        if np.any(self.time < 0) or not np.all(np.isfinite(self.time)):
            raise DataError("times must be finite and nonnegative")
        if not np.all(np.isin(self.event, (0, 1))) or not np.all(np.isin(self.study, (0, 1))):
            raise DataError("event and study must be binary")
        if np.any((self.study == 1) & (self.arm != 0)):
            raise DataError("external-study records must have arm 0")

    def __len__(self):
        return len(self.time)

    @property
    def n0(self) -> int:
        return int(np.sum(self.study == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.study == 1))

    def column(self, name: str) -> np.ndarray:
        """Look up a covariate, ``nce``/``Z``, ``nco``/``W`` or a latent column."""
        if name in self.schema.covariates:
            return self.covariates[:, self.schema.covariates.index(name)]
        if name in ("nce", "Z"):
            if self.nce is None:
                raise SchemaError("dataset has no negative control exposure column")
            return self.nce
        if name in ("nco", "W"):
            if self.nco is None:
                raise SchemaError("dataset has no negative control outcome column")
            return self.nco
        if name in self.latent:
            return self.latent[name]
        raise SchemaError(f"unknown column {name!r}")

    def take(self, index) -> StudyDataset:
        """Row subset (or resample, when ``index`` repeats rows)."""
        index = np.asarray(index)
        return replace(
            self,
            study=self.study[index],
            arm=self.arm[index],
            time=self.time[index],
            event=self.event[index],
            covariates=self.covariates[index],
            nce=None if self.nce is None else self.nce[index],
            nco=None if self.nco is None else self.nco[index],
            latent={k: v[index] for k, v in self.latent.items()},
        )

    def with_columns(self, **changes) -> StudyDataset:
        return replace(self, **changes)

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(len(self)):
            yield SubjectRecord(
                study=int(self.study[i]),
                arm=int(self.arm[i]),
                time=float(self.time[i]),
                event=int(self.event[i]),
                covariates=tuple(float(v) for v in self.covariates[i]),
                nce=None if self.nce is None or math.isnan(self.nce[i]) else float(self.nce[i]),
                nco=None if self.nco is None or math.isnan(self.nco[i]) else float(self.nco[i]),
            )

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], schema: Schema, provenance: str = "") -> StudyDataset:
        records = list(records)
        k = len(schema.covariates)
        for r in records:
            if len(r.covariates) != k:
                raise SchemaError("record covariate length does not match schema")

        def opt(values, present):
            if not present:
                return None
            return [np.nan if v is None else v for v in values]

        return cls(
            schema=schema,
            study=[r.study for r in records],
            arm=[r.arm for r in records],
            time=[r.time for r in records],
            event=[r.event for r in records],
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), k),
            nce=opt([r.nce for r in records], schema.has_nce),
            nco=opt([r.nco for r in records], schema.has_nco),
            provenance=provenance,
        )


@dataclass(frozen=True)
class ColumnMap:
    """Maps CSV header names onto dataset fields.

    ``categorical`` maps a raw column to its ordered level list (first entry
    is the reference) or to ``None`` to use the sorted observed levels.
    """

    study: str = "R"
    time: str = "T"
    event: str = "delta"
    arm: str | None = "A"
    nce: str | None = "Z"
    nco: str | None = "W"
    covariates: tuple[str, ...] = ()
    categorical: Mapping[str, Sequence[str] | None] = field(default_factory=dict)
    latent: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> ColumnMap:
        d = dict(d)
        for key in ("covariates", "latent"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown column-map keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "time": self.time,
            "event": self.event,
            "arm": self.arm,
            "nce": self.nce,
            "nco": self.nco,
            "covariates": list(self.covariates),
            "categorical": {k: (None if v is None else list(v)) for k, v in self.categorical.items()},
            "latent": list(self.latent),
        }


def _is_missing(s: str) -> bool:
    return s.strip() in MISSING_TOKENS


def _parse_binary(s: str):
    v = float(s)
    if v not in (0.0, 1.0):
        raise ValueError(s)
    return int(v)


def load_csv(path, schema: ColumnMap | None = None, provenance: str | None = None) -> StudyDataset:
    """Read a CSV into a :class:`StudyDataset`.

    Rows that violate a record invariant are not coerced; they are listed in
    ``rejects`` with their 1-based data-row number and a reason. Missing
    covariates and negative controls are kept as ``nan``.
    """
    schema = schema or ColumnMap()
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    wanted = [schema.study, schema.time, schema.event, *schema.covariates, *schema.latent]
    wanted += [c for c in (schema.arm, schema.nce, schema.nco) if c is not None]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"missing mapped column(s): {', '.join(missing)}")
    rows = list(reader)

    # categorical levels come from the whole file so every row shares a coding
    cats = []
    for col in schema.covariates:
        if col in schema.categorical:
            levels = schema.categorical[col]
            if levels is None:
                levels = sorted({r[col].strip() for r in rows if not _is_missing(r[col])})
            cats.append(Categorical(col, tuple(str(v) for v in levels)))
    cat_by_name = {c.name: c for c in cats}
    cov_names: list[str] = []
    for col in schema.covariates:
        cov_names.extend(cat_by_name[col].columns if col in cat_by_name else [col])

    out = {k: [] for k in ("study", "arm", "time", "event", "cov", "nce", "nco")}
    latent = {c: [] for c in schema.latent}
    rejects = []
    for i, row in enumerate(rows, start=1):
        try:
            rec = _parse_row(row, schema, cat_by_name)
        except ValueError as exc:
            rejects.append(Reject(i, str(exc)))
            continue
        for k, v in rec.items():
            if k in out:
                out[k].append(v)
        for c in schema.latent:
            latent[c].append(rec["latent"][c])

    return StudyDataset(
        schema=Schema(
            covariates=tuple(cov_names),
            has_nce=schema.nce is not None,
            has_nco=schema.nco is not None,
            categoricals=tuple(cats),
            latent=tuple(schema.latent),
        ),
        study=out["study"],
        arm=out["arm"],
        time=out["time"],
        event=out["event"],
        covariates=np.array(out["cov"], dtype=float).reshape(len(out["time"]), len(cov_names)),
        nce=out["nce"] if schema.nce is not None else None,
        nco=out["nco"] if schema.nco is not None else None,
        latent=latent,
        provenance=provenance if provenance is not None else str(path),
        rejects=tuple(rejects),
    )


def _parse_row(row, schema: ColumnMap, cats: Mapping[str, Categorical]) -> dict:
    def binary(col, label):
        s = row[col]
        if _is_missing(s):
            raise ValueError(f"missing {label}")
        try:
            return _parse_binary(s)
        except ValueError:
            raise ValueError(f"invalid {label}") from None

    study = binary(schema.study, "study")
    ts = row[schema.time]
    if _is_missing(ts):
        raise ValueError("missing time")
    try:
        time = float(ts)
    except ValueError:
        raise ValueError("unparseable time") from None
    if not math.isfinite(time):
        raise ValueError("unparseable time")
    if time < 0:
        raise ValueError("negative time")
    event = binary(schema.event, "event")
    arm = 0
    if schema.arm is not None:
        s = row[schema.arm]
        if _is_missing(s):
            raise ValueError("missing arm")
        try:
            arm = int(s)
        except ValueError:
            raise ValueError("invalid arm") from None
        if arm < 0:
            raise ValueError("invalid arm")
    if study == 1 and arm != 0:
        raise ValueError("external record with active arm")

    cov = []
    for col in schema.covariates:
        s = row[col].strip()
        if col in cats:
            cat = cats[col]
            if s in MISSING_TOKENS:
                cov.extend([np.nan] * (len(cat.levels) - 1))
                continue
            if s not in cat.levels:
                raise ValueError(f"unknown level {s!r} for {col}")
            cov.extend(1.0 if s == lvl else 0.0 for lvl in cat.levels[1:])
        elif s in MISSING_TOKENS:
            cov.append(np.nan)
        else:
            try:
                cov.append(float(s))
            except ValueError:
                raise ValueError(f"unparseable covariate {col}") from None

    def optional_binary(col, label):
        if col is None or _is_missing(row[col]):
            return np.nan
        try:
            return float(_parse_binary(row[col]))
        except ValueError:
            raise ValueError(f"invalid {label}") from None

    lat = {}
    for col in schema.latent:
        try:
            lat[col] = float(row[col])
        except ValueError:
            raise ValueError(f"unparseable latent {col}") from None
    return {
        "study": study,
        "arm": arm,
        "time": time,
        "event": event,
        "cov": cov,
        "nce": optional_binary(schema.nce, "nce"),
        "nco": optional_binary(schema.nco, "nco"),
        "latent": lat,
    }


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_csv(ds: StudyDataset, path) -> ColumnMap:
    """Write ``ds`` with canonical headers and return the matching column map.

    Covariates are written in expanded indicator form so ``load_csv`` with the
    returned map reproduces the record set exactly.
    """
    cols = ["R", "A", "T", "delta", *ds.schema.covariates]
    if ds.nce is not None:
        cols.append("Z")
    if ds.nco is not None:
        cols.append("W")
    cols.extend(ds.schema.latent)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for i in range(len(ds)):
        row = [int(ds.study[i]), int(ds.arm[i]), _fmt(ds.time[i]), int(ds.event[i])]
        row += [_fmt(v) for v in ds.covariates[i]]
        if ds.nce is not None:
            row.append(_fmt(ds.nce[i]))
        if ds.nco is not None:
            row.append(_fmt(ds.nco[i]))
        row += [_fmt(ds.latent[c][i]) for c in ds.schema.latent]
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return ColumnMap(
        covariates=ds.schema.covariates,
        nce="Z" if ds.nce is not None else None,
        nco="W" if ds.nco is not None else None,
        latent=ds.schema.latent,
    )


def _field_columns(ds: StudyDataset, name: str) -> list[tuple[str, np.ndarray]]:
    if name in ("covariates", "X"):
        return [(c, ds.covariates[:, j]) for j, c in enumerate(ds.schema.covariates)]
    for cat in ds.schema.categoricals:
        if name == cat.name:
            return [(name, np.column_stack([ds.column(c) for c in cat.columns]).sum(axis=1))]
    return [(name, ds.column(name))]


def complete_case(ds: StudyDataset, required: Iterable[str]) -> StudyDataset:
    """Drop records with a missing value in any of ``required``.

    ``required`` holds covariate names, categorical variable names,
    ``"nce"``/``"nco"`` or ``"covariates"`` for all covariates. Exclusions are
    attributed to the first failing field in schema order (covariates, then
    nce, then nco) and recorded in ``notes``.
    """
    req = set(required)
    order = []
    for c in ds.schema.covariates:
        order.append(c)
    for cat in ds.schema.categoricals:
        order.append(cat.name)
    order += ["nce", "nco"]
    fields = []
    for name in order:
        if name in req or ("covariates" in req and name in ds.schema.covariates) or ("X" in req and name in ds.schema.covariates):
            fields.append(name)
    unknown = req - set(order) - {"covariates", "X"}
    if unknown:
        raise SchemaError(f"unknown field(s) for complete_case: {sorted(unknown)}")

    keep = np.ones(len(ds), dtype=bool)
    counts: dict[str, int] = {}
    for name in fields:
        bad = np.zeros(len(ds), dtype=bool)
        for _, col in _field_columns(ds, name):
            bad |= np.isnan(col)
        counts[name] = int(np.sum(bad & keep))
        keep &= ~bad
    if not np.any(keep):
        raise DataError("no complete cases")
    out = ds.take(np.flatnonzero(keep))
    note = "complete_case: " + ", ".join(f"{k} excluded {v}" for k, v in counts.items())
    return replace(out, notes=ds.notes + (note,))


def exclusion_counts(ds: StudyDataset) -> dict[str, int]:
    """Parse the per-field exclusion counts back out of the latest complete-case note."""
    for note in reversed(ds.notes):
        if note.startswith("complete_case:"):
            body = note.split(":", 1)[1].strip()
            if not body:
                return {}
            return {k: int(v) for k, v in (part.rsplit(" excluded ", 1) for part in body.split(", "))}
    return {}


def exclude_no_followup(ds: StudyDataset) -> StudyDataset:
    """Drop records with zero follow-up and no event."""
    bad = (ds.time == 0) & (ds.event == 0)
    out = ds.take(np.flatnonzero(~bad))
    return replace(out, notes=ds.notes + (f"exclude_no_followup: excluded {int(bad.sum())}",))


# --------------------------------------------------------------------------
# Table 1 style summaries


@dataclass(frozen=True)
class SummaryRow:
    variable: str
    level: str
    counts: tuple[int, ...]
    percents: tuple[float, ...]


@dataclass(frozen=True)
class SummaryTable:
    groups: tuple[str, ...]
    sizes: tuple[int, ...]
    rows: tuple[SummaryRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variable", "level", *(f"{g} n" for g in self.groups), *(f"{g} %" for g in self.groups)])
        for r in self.rows:
            w.writerow([r.variable, r.level, *r.counts, *(f"{p:.1f}" for p in r.percents)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["", *(f"{g} (n = {n})" for g, n in zip(self.groups, self.sizes))]
        body = []
        current = None
        for r in self.rows:
            if r.variable != current:
                body.append([f"{r.variable}, n (%)", *[""] * len(self.groups)])
                current = r.variable
            body.append([f"  {r.level}", *(f"{c} ({p:.1f})" for c, p in zip(r.counts, r.percents))])
        widths = [max(len(row[j]) for row in [head, *body]) for j in range(len(head))]
        lines = ["  ".join(cell.ljust(wd) if j == 0 else cell.rjust(wd) for j, (cell, wd) in enumerate(zip(row, widths))) for row in [head, *body]]
        return "\n".join(lines) + "\n"


def _levels_of(ds: StudyDataset, var: str) -> tuple[list[str], np.ndarray]:
    """Return level labels and a per-record level index (-1 = missing)."""
    for cat in ds.schema.categoricals:
        if var == cat.name:
            ind = np.column_stack([ds.column(c) for c in cat.columns]) if cat.columns else np.zeros((len(ds), 0))
            idx = np.zeros(len(ds), dtype=int)
            for j in range(ind.shape[1]):
                idx[ind[:, j] == 1] = j + 1
            if ind.shape[1]:
                idx[np.isnan(ind).any(axis=1)] = -1
            return list(cat.levels), idx
    col = ds.column(var)
    values = sorted(set(col[~np.isnan(col)].tolist()))
    idx = np.full(len(ds), -1)
    for j, v in enumerate(values):
        idx[col == v] = j
    return [_fmt(v) for v in values], idx


def summarize(ds: StudyDataset, variables: Sequence[str], pooled: bool = True) -> SummaryTable:
    """Counts and percents per study group, with an explicit Missing level."""
    masks = [("R=0", ds.study == 0), ("R=1", ds.study == 1)]
    if pooled:
        masks.append(("Pooled", np.ones(len(ds), dtype=bool)))
    sizes = tuple(int(m.sum()) for _, m in masks)
    rows = []
    for var in variables:
        try:
            labels, idx = _levels_of(ds, var)
        except SchemaError:
            raise SchemaError(f"unknown variable {var!r}") from None
        for j, label in [*enumerate(labels), (-1, "Missing")]:
            counts = tuple(int(np.sum((idx == j) & m)) for _, m in masks)
            pct = tuple(100.0 * c / s if s else 0.0 for c, s in zip(counts, sizes))
            rows.append(SummaryRow(var, label, counts, pct))
    return SummaryTable(tuple(g for g, _ in masks), sizes, tuple(rows))


def design(ds: StudyDataset, columns: Sequence[str], intercept: bool = True) -> np.ndarray:
    """Regressor matrix from column names.

    ``"X"`` expands to every covariate column and ``"R"`` is the study
    indicator; other names resolve through :meth:`StudyDataset.column`.
    """
    parts = [np.ones(len(ds))] if intercept else []
    for name in columns:
        if name == "X":
            parts.extend(ds.covariates.T)
        elif name == "R":
            parts.append(ds.study.astype(float))
        else:
            parts.append(ds.column(name))
    if not parts:
        return np.empty((len(ds), 0))
    return np.column_stack(parts)


def design_names(ds: StudyDataset, columns: Sequence[str], intercept: bool = True) -> tuple[str, ...]:
    names = ["(Intercept)"] if intercept else []
    for name in columns:
        names.extend(ds.schema.covariates if name == "X" else [name])
    return tuple(names)
