"""Case-crossover data model, file ingestion, and time-stratified windows.

A :class:`Stratum` is one case plus its matched referent rows; the conditional
likelihood is formed stratum by stratum. Two construction paths are provided:
:func:`ingest_dataset` reads an already-matched delimited file, and
:func:`build_time_stratified_windows` matches raw events to the other
same-weekday dates of their calendar month.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DesignViolationError,
    MalformedStratumError,
    ParseError,
)

BINARY = "binary"
CONTINUOUS = "continuous"


@dataclass(frozen=True, eq=False)
class Stratum:
    """One case and its referent rows.

    Parameters
    ----------
    id : hashable
        Opaque stratum identifier.
    case_index : int
        Index of the case row within the window.
    z : (T,) array
        Exposure value per row.
    x : (T, P_x) array
        Confounder vector per row.
    w : (P_w,) array
        Moderators, constant within the stratum.
    """

    id: object
    case_index: int
    z: np.ndarray
    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(x), -1) if x.size else x.reshape(len(self.z), 0)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))
        if self.z.ndim != 1 or len(self.z) < 2:
            raise ValueError(f"stratum {self.id!r}: needs at least 2 rows")
        if self.x.shape[0] != len(self.z):
            raise ValueError(f"stratum {self.id!r}: confounder row count mismatch")
        if not 0 <= self.case_index < len(self.z):
            raise ValueError(f"stratum {self.id!r}: case_index out of range")

    @property
    def n_rows(self):
        return len(self.z)

    @property
    def rows(self):
        """Rows as (exposure, confounder vector) pairs."""
        return list(zip(self.z, self.x))

    @property
    def has_exposure_variation(self):
        """Whether the exposure takes more than one value in the window."""
        return bool(np.ptp(self.z) > 0)


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable collection of strata sharing column layout."""

    strata: tuple
    moderator_names: tuple
    moderator_kinds: tuple
    confounder_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "moderator_names", tuple(self.moderator_names))
        object.__setattr__(self, "moderator_kinds", tuple(self.moderator_kinds))
        object.__setattr__(self, "confounder_names", tuple(self.confounder_names))
        p_w = len(self.moderator_names)
        p_x = len(self.confounder_names)
        if len(self.moderator_kinds) != p_w:
            raise ValueError("moderator_kinds length mismatch")
        for s in self.strata:
            if len(s.w) != p_w:
                raise ValueError(f"stratum {s.id!r}: expected {p_w} moderators")
            if s.x.shape[1] != p_x:
                raise ValueError(f"stratum {s.id!r}: expected {p_x} confounders")
        for j, kind in enumerate(self.moderator_kinds):
            if kind == BINARY:
                vals = {s.w[j] for s in self.strata}
                if not vals <= {0.0, 1.0}:
                    raise ValueError(
                        f"binary moderator {self.moderator_names[j]!r} takes values "
                        f"outside {{0,1}}"
                    )

    @property
    def n_strata(self):
        return len(self.strata)

    @property
    def n_moderators(self):
        return len(self.moderator_names)

    @property
    def n_confounders(self):
        return len(self.confounder_names)

    def moderator_matrix(self):
        """Stack per-stratum moderators into an (n, P_w) array."""
        if not self.strata:
            return np.zeros((0, self.n_moderators))
        return np.array([s.w for s in self.strata], dtype=float)

    def constant_exposure_ids(self):
        """Ids of strata flagged for zero exposure variation in the window.

        Such strata are retained; downstream fitters decide what to do
        with them (their exposure effect is conditioned out).
        """
        return tuple(s.id for s in self.strata if not s.has_exposure_variation)


@dataclass(frozen=True)
class ColumnSchema:
    """Column-role map for :func:`ingest_dataset`.

    Confounder/moderator columns left empty are auto-detected from header
    names starting with ``x_`` and ``w_`` respectively. ``moderator_kinds``
    overrides the inferred binary/continuous flag per moderator name.
    """

    stratum_id: str = "stratum_id"
    case: str = "case"
    exposure: str = "z"
    confounders: tuple = ()
    moderators: tuple = ()
    moderator_kinds: Mapping[str, str] = field(default_factory=dict)
    delimiter: str = ","


def _parse_float(text, row, col):
    text = text.strip() if text is not None else ""
    if text == "":
        raise ParseError(f"missing value in column {col!r}", row=row)
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {text!r} in column {col!r}", row=row) from None


def _infer_kind(values):
    return BINARY if set(values) <= {0.0, 1.0} else CONTINUOUS


def _resolve_kinds(names, columns, overrides):
    kinds = []
    for name in names:
        kind = overrides.get(name) if overrides else None
        if kind is None:
            kind = _infer_kind(columns[name])
        elif kind not in (BINARY, CONTINUOUS):
            raise ValueError(f"unknown moderator kind {kind!r} for {name!r}")
        kinds.append(kind)
    return tuple(kinds)


def ingest_dataset(path, schema=None):
    """Read a delimited text file with header into a :class:`Dataset`.

    Rows are grouped by the stratum-id column; each group must contain
    exactly one case row (case column equal to 1) and constant moderator
    values. Raises :class:`MalformedStratumError`, :class:`DesignViolationError`
    or :class:`ParseError` accordingly.
    """
    schema = schema or ColumnSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file") from None
        header = [h.strip() for h in header]
        col_idx = {name: i for i, name in enumerate(header)}
        for required in (schema.stratum_id, schema.case, schema.exposure):
            if required not in col_idx:
                raise ParseError(f"header is missing column {required!r}")
        confounders = tuple(schema.confounders) or tuple(
            h for h in header if h.startswith("x_")
        )
        moderators = tuple(schema.moderators) or tuple(
            h for h in header if h.startswith("w_")
        )
        for name in confounders + moderators:
            if name not in col_idx:
                raise ParseError(f"header is missing column {name!r}")

        # groups keep first-seen order so ingestion is reproducible
        groups = {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", row=row_no
                )
            sid = row[col_idx[schema.stratum_id]].strip()
            if sid == "":
                raise ParseError("missing stratum id", row=row_no)
            case = _parse_float(row[col_idx[schema.case]], row_no, schema.case)
            if case not in (0.0, 1.0):
                raise ParseError(
                    f"case indicator must be 0 or 1, found {case}", row=row_no
                )
            z = _parse_float(row[col_idx[schema.exposure]], row_no, schema.exposure)
            x = [_parse_float(row[col_idx[c]], row_no, c) for c in confounders]
            w = [_parse_float(row[col_idx[c]], row_no, c) for c in moderators]
            groups.setdefault(sid, []).append((case, z, x, w))

    strata = []
    moderator_columns = {name: [] for name in moderators}
    for sid, rows in groups.items():
        case_rows = [i for i, r in enumerate(rows) if r[0] == 1.0]
        if len(case_rows) != 1:
            raise MalformedStratumError(sid, len(case_rows))
        w0 = rows[0][3]
        for r in rows[1:]:
            if r[3] != w0:
                raise DesignViolationError(
                    f"moderator values vary within stratum {sid!r}; moderators "
                    f"must be constant across a referent window"
                )
        strata.append(
            Stratum(
                id=sid,
                case_index=case_rows[0],
                z=np.array([r[1] for r in rows]),
                x=np.array([r[2] for r in rows]).reshape(len(rows), len(confounders)),
                w=np.array(w0),
            )
        )
        for j, name in enumerate(moderators):
            moderator_columns[name].append(w0[j])

    kinds = _resolve_kinds(moderators, moderator_columns, schema.moderator_kinds)
    return Dataset(
        strata=tuple(strata),
        moderator_names=moderators,
        moderator_kinds=kinds,
        confounder_names=confounders,
    )


def referent_dates(event_date):
    """All same-weekday dates in the event's calendar month, sorted.

    Includes the event date itself; a weekday occurs 4 or 5 times per
    month, so the window always has 4 or 5 rows.
    """
    first = event_date.replace(day=1)
    offset = (event_date.weekday() - first.weekday()) % 7
    d = first + dt.timedelta(days=offset)
    out = []
    while d.month == event_date.month:
        out.append(d)
        d += dt.timedelta(days=7)
    return out


@dataclass(frozen=True)
class Event:
    """A raw case event with its covariate streams.

    ``exposure`` and ``confounders`` map dates to values; they must cover
    every same-weekday date of the event's month. Streams may be shared
    between events or event-specific (e.g. linked by location).
    """

    id: object
    date: dt.date
    w: Sequence
    exposure: Mapping
    confounders: Mapping = None


def build_time_stratified_windows(
    events, *, moderator_names=None, confounder_names=None, moderator_kinds=None
):
    """Turn raw events into a time-stratified case-crossover :class:`Dataset`.

    Each event becomes one stratum whose rows are the event date plus every
    other date in the same calendar month sharing its day of week, in
    chronological order. Raises :class:`CoverageError` when an event's
    exposure or confounder stream misses a referent date.
    """
    events = list(events)
    strata = []
    p_w = None
    for ev in events:
        dates = referent_dates(ev.date)
        try:
            z = [ev.exposure[d] for d in dates]
        except KeyError as exc:
            raise CoverageError(
                f"event {ev.id!r}: exposure series missing date {exc.args[0]}"
            ) from None
        if ev.confounders is not None:
            try:
                x = [ev.confounders[d] for d in dates]
            except KeyError as exc:
                raise CoverageError(
                    f"event {ev.id!r}: confounder series missing date {exc.args[0]}"
                ) from None
        else:
            x = [[] for _ in dates]
        w = np.asarray(ev.w, dtype=float)
        if p_w is None:
            p_w = len(w)
        strata.append(
            Stratum(
                id=ev.id,
                case_index=dates.index(ev.date),
                z=np.array(z, dtype=float),
                x=np.array(x, dtype=float).reshape(len(dates), -1),
                w=w,
            )
        )

    p_w = p_w or 0
    p_x = strata[0].x.shape[1] if strata else 0
    if moderator_names is None:
        moderator_names = tuple(f"w_{j + 1}" for j in range(p_w))
    if confounder_names is None:
        confounder_names = tuple(f"x_{j + 1}" for j in range(p_x))
    if moderator_kinds is None:
        w_mat = np.array([s.w for s in strata]) if strata else np.zeros((0, p_w))
        moderator_kinds = tuple(_infer_kind(set(w_mat[:, j])) for j in range(p_w))
    return Dataset(
        strata=tuple(strata),
        moderator_names=tuple(moderator_names),
        moderator_kinds=tuple(moderator_kinds),
        confounder_names=tuple(confounder_names),
    )
