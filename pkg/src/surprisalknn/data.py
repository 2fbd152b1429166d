"""Schemas, cases and datasets, plus delimiter-separated text ingestion.

Values are held column-aligned in a float matrix with NaN marking missing
cells. Nominal symbols are interned to dense integer codes per feature and
ordinal values are stored as level indices; external forms (symbols, level
names) are only produced at the edges.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, UsageError

MISSING_TOKENS = ("", "?")
ORIGINS = ("observed", "imputed", "synthesized")
ORIGIN_COLUMN = "_origin"
SESSION_COLUMN = "_session"


class FeatureKind(str, Enum):
    CONTINUOUS = "continuous"
    NOMINAL = "nominal"
    ORDINAL = "ordinal"
    CYCLIC = "cyclic"


@dataclass(frozen=True)
class FeatureSchema:
    """One feature: its kind, weight and kind-specific parameters.

    ``levels`` is the ordered level list of an ordinal feature, ``period``
    the wraparound length of a cyclic one. ``bounds`` optionally restricts
    continuous values produced by synthesis.
    """

    name: str
    kind: FeatureKind = FeatureKind.CONTINUOUS
    weight: float = 1.0
    levels: tuple[str, ...] = ()
    period: float | None = None
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.name:
            raise DataError("feature name must be non-empty")
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise DataError(f"feature {self.name!r}: weight must be positive, got {self.weight}")
        if self.kind is FeatureKind.ORDINAL:
            if not self.levels:
                raise DataError(f"ordinal feature {self.name!r} needs a non-empty level list")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"ordinal feature {self.name!r} has duplicate levels")
        if self.kind is FeatureKind.CYCLIC:
            if self.period is None or not self.period > 0:
                raise DataError(f"cyclic feature {self.name!r} needs a positive period")
        if self.bounds is not None:
            lo, hi = self.bounds
            if not lo <= hi:
                raise DataError(f"feature {self.name!r}: bounds must satisfy min <= max")
            object.__setattr__(self, "bounds", (float(lo), float(hi)))

    @property
    def is_numeric(self) -> bool:
        """True for kinds whose codes are ordered reals (everything but nominal)."""
        return self.kind is not FeatureKind.NOMINAL


def normalize_weights(schema: Sequence[FeatureSchema]) -> list[FeatureSchema]:
    total = sum(f.weight for f in schema)
    return [replace(f, weight=f.weight / total) for f in schema]


@dataclass(frozen=True)
class Case:
    """External view of one observation. Missing values are ``None``."""

    id: int
    values: tuple
    origin: str = "observed"
    session: str | None = None


class MaskedCell(NamedTuple):
    row: int
    case_id: int
    feature: str
    value: float


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered schema plus an ordered list of cases.

    Construct through :func:`parse_table` or :meth:`from_rows`; the arrays
    are frozen so a dataset can be shared between readers.
    """

    schema: tuple[FeatureSchema, ...]
    values: np.ndarray
    ids: np.ndarray
    origins: tuple[str, ...]
    sessions: tuple[str | None, ...]
    symbols: tuple[tuple[str, ...] | None, ...]
    imputed: np.ndarray = field(default=None)

    def __post_init__(self):
        schema = tuple(self.schema)
        object.__setattr__(self, "schema", schema)
        xi = len(schema)
        values = np.array(self.values, dtype=float).reshape(-1, xi)
        n = values.shape[0]
        ids = np.array(self.ids, dtype=np.int64).reshape(n)
        imputed = (
            np.zeros((n, xi), dtype=bool)
            if self.imputed is None
            else np.array(self.imputed, dtype=bool).reshape(n, xi)
        )
        if len(set(ids.tolist())) != n:
            raise DataError("case ids must be unique")
        if len(self.origins) != n or len(self.sessions) != n:
            raise DataError("origins/sessions must have one entry per case")
        bad = [o for o in self.origins if o not in ORIGINS]
        if bad:
            raise DataError(f"unknown origin {bad[0]!r}")
        if len({f.name for f in schema}) != xi:
            raise DataError("feature names must be unique")
        symbols = tuple(
            tuple(s) if f.kind is FeatureKind.NOMINAL else None
            for f, s in zip(schema, tuple(self.symbols) + (None,) * (xi - len(self.symbols)))
        )
        for j, f in enumerate(schema):
            col = values[:, j]
            known = col[~np.isnan(col)]
            if np.any(~np.isfinite(known)):
                raise DataError(f"feature {f.name!r} has non-finite values")
            if f.kind is FeatureKind.ORDINAL and known.size:
                if np.any((known < 0) | (known >= len(f.levels)) | (known != np.round(known))):
                    raise DataError(f"ordinal feature {f.name!r} has an out-of-range level index")
            if f.kind is FeatureKind.NOMINAL and known.size:
                if np.any((known < 0) | (known >= len(symbols[j])) | (known != np.round(known))):
                    raise DataError(f"nominal feature {f.name!r} has an unknown symbol code")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "imputed", _readonly(imputed))
        object.__setattr__(self, "origins", tuple(self.origins))
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "symbols", symbols)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_rows(
        cls,
        schema: Sequence[FeatureSchema],
        rows: Iterable[Sequence],
        *,
        ids: Sequence[int] | None = None,
        origins: Sequence[str] | None = None,
        sessions: Sequence[str | None] | None = None,
        symbols: Sequence[Sequence[str] | None] | None = None,
    ) -> "Dataset":
        """Build a dataset from rows of external values (``None`` = missing).

        Nominal symbols are interned in order of first appearance unless an
        initial symbol table is given.
        """
        schema = tuple(schema)
        xi = len(schema)
        tables = [
            list(symbols[j]) if symbols is not None and symbols[j] is not None else []
            for j in range(xi)
        ]
        lookup = [{s: c for c, s in enumerate(t)} for t in tables]
        encoded = []
        for r, row in enumerate(rows):
            row = tuple(row)
            if len(row) != xi:
                raise DataError(f"row {r} has {len(row)} values, schema has {xi} features")
            out = []
            for j, (f, v) in enumerate(zip(schema, row)):
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    out.append(math.nan)
                elif f.kind is FeatureKind.NOMINAL:
                    s = str(v)
                    if s not in lookup[j]:
                        lookup[j][s] = len(tables[j])
                        tables[j].append(s)
                    out.append(float(lookup[j][s]))
                elif f.kind is FeatureKind.ORDINAL:
                    out.append(float(_ordinal_index(f, v)))
                else:
                    try:
                        x = float(v)
                    except (TypeError, ValueError):
                        raise DataError(f"feature {f.name!r}: non-numeric value {v!r}") from None
                    if not math.isfinite(x):
                        raise DataError(f"feature {f.name!r}: non-finite value {v!r}")
                    out.append(x)
            encoded.append(out)
        n = len(encoded)
        values = np.array(encoded, dtype=float).reshape(n, xi)
        return cls(
            schema=schema,
            values=values,
            ids=np.arange(n) if ids is None else ids,
            origins=tuple(origins) if origins is not None else ("observed",) * n,
            sessions=tuple(sessions) if sessions is not None else (None,) * n,
            symbols=tuple(tuple(t) if f.kind is FeatureKind.NOMINAL else None for f, t in zip(schema, tables)),
        )

    # -- shape and lookup ------------------------------------------------

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def xi(self) -> int:
        return len(self.schema)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.schema]

    @property
    def weights(self) -> np.ndarray:
        w = np.array([f.weight for f in self.schema], dtype=float)
        return w / w.sum()

    def feature_index(self, name: str) -> int:
        for j, f in enumerate(self.schema):
            if f.name == name:
                return j
        raise UsageError(f"unknown feature {name!r}")

    def row_of(self, case_id: int) -> int:
        hits = np.flatnonzero(self.ids == case_id)
        if hits.size == 0:
            raise UsageError(f"unknown case id {case_id}")
        return int(hits[0])

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def next_id(self) -> int:
        return int(self.ids.max()) + 1 if self.n else 0

    # -- encoding --------------------------------------------------------

    def encode(self, feature: int | str, value) -> float:
        """Encode an external value into the internal code for ``feature``.

        Unseen nominal symbols map to -1, which compares unequal to every
        stored code.
        """
        j = feature if isinstance(feature, int) else self.feature_index(feature)
        f = self.schema[j]
        if value is None:
            return math.nan
        if f.kind is FeatureKind.NOMINAL:
            try:
                return float(self.symbols[j].index(str(value)))
            except ValueError:
                return -1.0
        if f.kind is FeatureKind.ORDINAL:
            return float(_ordinal_index(f, value))
        try:
            x = float(value)
        except (TypeError, ValueError):
            raise DataError(f"feature {f.name!r}: non-numeric value {value!r}") from None
        if not math.isfinite(x):
            raise DataError(f"feature {f.name!r}: non-finite value {value!r}")
        return x

    def decode(self, feature: int | str, code: float):
        j = feature if isinstance(feature, int) else self.feature_index(feature)
        f = self.schema[j]
        if math.isnan(code):
            return None
        if f.kind is FeatureKind.NOMINAL:
            return self.symbols[j][int(code)] if code >= 0 else None
        if f.kind is FeatureKind.ORDINAL:
            return f.levels[int(code)]
        return float(code)

    def case(self, row: int) -> Case:
        return Case(
            id=int(self.ids[row]),
            values=tuple(self.decode(j, self.values[row, j]) for j in range(self.xi)),
            origin=self.origins[row],
            session=self.sessions[row],
        )

    def cases(self) -> list[Case]:
        return [self.case(r) for r in range(self.n)]

    # -- derivation (datasets are immutable; these return new ones) ------

    def subset(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        return Dataset(
            schema=self.schema,
            values=self.values[rows],
            ids=self.ids[rows],
            origins=tuple(self.origins[r] for r in rows),
            sessions=tuple(self.sessions[r] for r in rows),
            symbols=self.symbols,
            imputed=self.imputed[rows],
        )

    def without_ids(self, case_ids: Iterable[int]) -> "Dataset":
        drop = set(int(c) for c in case_ids)
        keep = [r for r in range(self.n) if int(self.ids[r]) not in drop]
        return self.subset(keep)

    def select_features(self, columns: Sequence[int]) -> "Dataset":
        columns = list(columns)
        return Dataset(
            schema=[self.schema[j] for j in columns],
            values=self.values[:, columns],
            ids=self.ids,
            origins=self.origins,
            sessions=self.sessions,
            symbols=[self.symbols[j] for j in columns],
            imputed=self.imputed[:, columns],
        )

    def with_schema(self, schema: Sequence[FeatureSchema]) -> "Dataset":
        """Swap schema entries of identical kinds (e.g. new weights)."""
        schema = tuple(schema)
        if [(f.name, f.kind) for f in schema] != [(f.name, f.kind) for f in self.schema]:
            raise UsageError("replacement schema must keep feature names and kinds")
        return Dataset(schema, self.values, self.ids, self.origins, self.sessions, self.symbols, self.imputed)

    def with_cells(self, cells: Iterable[tuple[int, int, float]], origin: str = "imputed") -> "Dataset":
        """Write ``(row, column, code)`` cells and tag them and their cases with ``origin``."""
        values = self.values.copy()
        imputed = self.imputed.copy()
        origins = list(self.origins)
        for r, j, code in cells:
            values[r, j] = code
            imputed[r, j] = origin == "imputed"
            origins[r] = origin
        return Dataset(self.schema, values, self.ids, origins, self.sessions, self.symbols, imputed)

    def append(
        self,
        codes: np.ndarray,
        origin: str = "observed",
        sessions: Sequence[str | None] | None = None,
        first_id: int | None = None,
    ) -> "Dataset":
        """Append rows of internal codes, assigning fresh ids from ``first_id`` (default: next free)."""
        codes = np.asarray(codes, dtype=float).reshape(-1, self.xi)
        m = codes.shape[0]
        start = self.next_id if first_id is None else int(first_id)
        return Dataset(
            schema=self.schema,
            values=np.vstack([self.values, codes]),
            ids=np.concatenate([self.ids, np.arange(start, start + m)]),
            origins=self.origins + (origin,) * m,
            sessions=self.sessions + (tuple(sessions) if sessions is not None else (None,) * m),
            symbols=self.symbols,
            imputed=np.vstack([self.imputed, np.zeros((m, self.xi), dtype=bool)]),
        )

    def reencode(self, other: "Dataset") -> np.ndarray:
        """Return ``other``'s values as codes of this dataset's symbol tables."""
        check_compatible(self.schema, other.schema)
        out = other.values.copy()
        for j, f in enumerate(self.schema):
            if f.kind is FeatureKind.NOMINAL:
                for r in range(other.n):
                    if not math.isnan(out[r, j]):
                        out[r, j] = self.encode(j, other.decode(j, other.values[r, j]))
        return out

    def to_text(self, delimiter: str = ",", metadata: bool = False) -> str:
        """Serialize in the ingestion format; floats are written with ``repr``.

        With ``metadata`` the origin and session columns are appended.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        header = self.feature_names + ([ORIGIN_COLUMN, SESSION_COLUMN] if metadata else [])
        writer.writerow(header)
        for r in range(self.n):
            row = []
            for j, f in enumerate(self.schema):
                v = self.decode(j, self.values[r, j])
                row.append("" if v is None else (repr(v) if isinstance(v, float) else v))
            if metadata:
                row += [self.origins[r], self.sessions[r] or ""]
            writer.writerow(row)
        return buf.getvalue()


def check_compatible(a: Sequence[FeatureSchema], b: Sequence[FeatureSchema]) -> None:
    sig_a = [(f.name, f.kind, f.levels, f.period) for f in a]
    sig_b = [(f.name, f.kind, f.levels, f.period) for f in b]
    if sig_a != sig_b:
        raise DataError("schema mismatch: feature names, kinds and parameters must agree")


def _ordinal_index(f: FeatureSchema, value) -> int:
    if isinstance(value, str):
        if value in f.levels:
            return f.levels.index(value)
        raise DataError(f"ordinal feature {f.name!r}: {value!r} is not one of {list(f.levels)}")
    if isinstance(value, (int, np.integer)) or (isinstance(value, float) and value.is_integer()):
        idx = int(value)
        if 0 <= idx < len(f.levels):
            return idx
    raise DataError(f"ordinal feature {f.name!r}: invalid level {value!r}")


def _is_number(token: str) -> bool:
    try:
        return math.isfinite(float(token))
    except ValueError:
        return False


def _read_rows(text: str, delimiter: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text), delimiter=delimiter))
    rows = [r for r in rows if r]
    if not rows or not any(c.strip() for c in rows[0]):
        raise DataError("missing or empty header row")
    header = [c.strip() for c in rows[0]]
    body = rows[1:]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"data row {i + 1} has {len(r)} fields, header has {len(header)}")
    return header, [[c.strip() for c in r] for r in body]


def infer_schema(text: str, delimiter: str = ",") -> list[FeatureSchema]:
    """Guess a schema from the header and tokens of a delimited table.

    A column is continuous when every non-missing token parses as a finite
    number (vacuously true for an all-missing column), nominal otherwise.
    Weights are uniform.
    """
    header, body = _read_rows(text, delimiter)
    names = [h for h in header if h not in (ORIGIN_COLUMN, SESSION_COLUMN)]
    schema = []
    for name in names:
        j = header.index(name)
        tokens = [r[j] for r in body if r[j] not in MISSING_TOKENS]
        kind = FeatureKind.CONTINUOUS if all(_is_number(t) for t in tokens) else FeatureKind.NOMINAL
        schema.append(FeatureSchema(name, kind, 1.0 / len(names)))
    return schema


def parse_table(text: str, schema: Sequence[FeatureSchema], delimiter: str = ",") -> Dataset:
    """Parse delimited text into a :class:`Dataset` under ``schema``.

    Every schema feature must appear in the header; the reserved
    ``_origin``/``_session`` columns are read when present. Empty fields and
    ``?`` are missing.
    """
    header, body = _read_rows(text, delimiter)
    names = [f.name for f in schema]
    for h in header:
        if h not in names and h not in (ORIGIN_COLUMN, SESSION_COLUMN):
            raise DataError(f"unknown column {h!r}")
    absent = [nm for nm in names if nm not in header]
    if absent:
        raise DataError(f"column {absent[0]!r} missing from header")
    pos = [header.index(nm) for nm in names]
    rows = []
    for i, r in enumerate(body):
        row = []
        for f, j in zip(schema, pos):
            tok = r[j]
            if tok in MISSING_TOKENS:
                row.append(None)
            elif f.kind in (FeatureKind.CONTINUOUS, FeatureKind.CYCLIC):
                if not _is_number(tok):
                    raise DataError(f"row {i + 1}, column {f.name!r}: non-numeric token {tok!r}")
                row.append(float(tok))
            else:
                row.append(tok)
        rows.append(row)
    origins = sessions = None
    if ORIGIN_COLUMN in header:
        j = header.index(ORIGIN_COLUMN)
        origins = [r[j] or "observed" for r in body]
    if SESSION_COLUMN in header:
        j = header.index(SESSION_COLUMN)
        sessions = [r[j] or None for r in body]
    return Dataset.from_rows(schema, rows, origins=origins, sessions=sessions)


def read_schema_file(text: str) -> list[FeatureSchema]:
    """Parse the line-oriented schema override format.

    Each line is ``name kind [params] [weight]``: ordinal params are a
    comma-separated level list, cyclic takes the period, continuous takes
    optional ``min:max`` bounds. ``#`` starts a comment.
    """
    schema = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise DataError(f"schema line {lineno}: expected 'name kind [params] [weight]'")
        name, kind_token, rest = tokens[0], tokens[1], tokens[2:]
        try:
            kind = FeatureKind(kind_token)
        except ValueError:
            raise DataError(f"schema line {lineno}: unknown kind {kind_token!r}") from None
        kwargs: dict = {}
        try:
            if kind is FeatureKind.ORDINAL:
                if not rest:
                    raise DataError(f"schema line {lineno}: ordinal needs a level list")
                kwargs["levels"] = tuple(rest.pop(0).split(","))
            elif kind is FeatureKind.CYCLIC:
                if not rest:
                    raise DataError(f"schema line {lineno}: cyclic needs a period")
                kwargs["period"] = float(rest.pop(0))
            elif kind is FeatureKind.CONTINUOUS and rest and ":" in rest[0]:
                lo, hi = rest.pop(0).split(":")
                kwargs["bounds"] = (float(lo), float(hi))
            if rest:
                kwargs["weight"] = float(rest.pop(0))
        except ValueError as exc:
            raise DataError(f"schema line {lineno}: {exc}") from None
        if rest:
            raise DataError(f"schema line {lineno}: unexpected tokens {rest}")
        schema.append(FeatureSchema(name, kind, **kwargs))
    if not schema:
        raise DataError("schema file defines no features")
    return normalize_weights(schema)


def mask_values(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, list[MaskedCell]]:
    """Hide ``max(1, round(fraction * n * xi))`` cells of a complete dataset.

    Returns the masked dataset and the ground truth of every hidden cell,
    ordered by (row, column).
    """
    if not 0 < fraction < 1:
        raise UsageError(f"mask fraction must lie in (0, 1), got {fraction}")
    if dataset.missing.any():
        raise DataError("mask_values expects a complete dataset")
    total = dataset.n * dataset.xi
    count = min(total, max(1, round(fraction * total)))
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=count, replace=False))
    values = dataset.values.copy()
    truth = []
    for idx in flat:
        r, j = divmod(int(idx), dataset.xi)
        truth.append(MaskedCell(r, int(dataset.ids[r]), dataset.schema[j].name, float(values[r, j])))
        values[r, j] = math.nan
    masked = Dataset(
        dataset.schema, values, dataset.ids, dataset.origins, dataset.sessions, dataset.symbols, dataset.imputed
    )
    return masked, truth
