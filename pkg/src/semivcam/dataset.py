"""Ragged longitudinal data containers, CSV ingestion, and SUBJ weights.

The canonical on-disk form is a long-format CSV with header
``subject,time,y,z1..zq,x1..xp`` (UTF-8, ``.`` decimal separator).  A schema
mapping can redirect any of those roles to differently named columns.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataError, ParseError, SchemaError


@dataclass(frozen=True)
class SubjectRecord:
    """Observations of one subject.  Sequences all have length m_i; times
    need not be sorted or distinct."""

    id: str
    times: np.ndarray
    responses: np.ndarray
    z: np.ndarray  # (m_i, q) discrete covariates, intercept never stored
    x: np.ndarray  # (m_i, p) continuous covariates

    @property
    def m(self):
        return self.times.size


@dataclass(frozen=True)
class SampleSummary:
    n: int
    N: int
    nbar_h: float  # harmonic mean of {m_i}
    nbar_2: float  # mean of {m_i^2}


@dataclass(frozen=True)
class FlatData:
    """Dense row-major view of a dataset used by the numeric kernels.

    ``z`` carries the synthesized intercept as its first column.
    """

    t: np.ndarray        # (N,)
    y: np.ndarray        # (N,)
    z: np.ndarray        # (N, q+1)
    x: np.ndarray        # (N, p)
    starts: np.ndarray   # (n+1,) subject offsets
    m: np.ndarray        # (n,)
    wobs: np.ndarray     # (N,) = 1/m_i


@dataclass(frozen=True)
class LongitudinalDataset:
    """Immutable collection of subject records plus support metadata.

    Supports default to observed ranges; they can be overridden because the
    estimation theory assumes fixed bounded supports.
    """

    subjects: tuple
    p: int
    q: int
    time_support: tuple
    covariate_supports: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self):
        return len(self.subjects)

    @property
    def N(self):
        return sum(s.m for s in self.subjects)

    def flat(self):
        """Cached flat view; safe because records are immutable."""
        if "flat" not in self._cache:
            t = np.concatenate([s.times for s in self.subjects])
            y = np.concatenate([s.responses for s in self.subjects])
            n = self.n
            z = np.ones((t.size, self.q + 1))
            if self.q:
                z[:, 1:] = np.concatenate([s.z for s in self.subjects])
            if self.p:
                x = np.concatenate([s.x for s in self.subjects])
            else:
                x = np.zeros((t.size, 0))
            m = np.array([s.m for s in self.subjects], dtype=np.int64)
            starts = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(m, out=starts[1:])
            wobs = np.repeat(1.0 / m, m)
            self._cache["flat"] = FlatData(t, y, z, x, starts, m, wobs)
        return self._cache["flat"]

    def drop_subject(self, i):
        """Dataset without subject i (used by leave-one-subject-out CV).
        Supports are kept fixed so curves stay comparable."""
        kept = self.subjects[:i] + self.subjects[i + 1 :]
        return LongitudinalDataset(
            kept, self.p, self.q, self.time_support, self.covariate_supports
        )


def from_arrays(ids, times, responses, z=None, x=None,
                time_support=None, covariate_supports=None):
    """Build a dataset from per-subject sequences.

    ``times``/``responses`` are lists of 1-d arrays; ``z``/``x`` lists of
    (m_i, q)/(m_i, p) arrays or None.
    """
    if not ids:
        raise EmptyDataError("no subjects")
    records = []
    q = p = 0
    for idx, sid in enumerate(ids):
        t = np.asarray(times[idx], dtype=np.float64)
        yv = np.asarray(responses[idx], dtype=np.float64)
        zi = (np.asarray(z[idx], dtype=np.float64)
              if z is not None else np.zeros((t.size, 0)))
        xi = (np.asarray(x[idx], dtype=np.float64)
              if x is not None else np.zeros((t.size, 0)))
        if zi.ndim == 1:
            zi = zi[:, None]
        if xi.ndim == 1:
            xi = xi[:, None]
        if t.size < 1:
            raise EmptyDataError(f"subject {sid!r} has no observations")
        if not (t.size == yv.size == zi.shape[0] == xi.shape[0]):
            raise SchemaError(f"subject {sid!r}: unequal sequence lengths")
        if idx == 0:
            q, p = zi.shape[1], xi.shape[1]
        elif (zi.shape[1], xi.shape[1]) != (q, p):
            raise SchemaError(f"subject {sid!r}: covariate count changed")
        records.append(SubjectRecord(str(sid), t, yv, zi, xi))

    all_t = np.concatenate([r.times for r in records])
    if time_support is None:
        time_support = (float(all_t.min()), float(all_t.max()))
    if covariate_supports is None:
        supports = []
        for k in range(p):
            xk = np.concatenate([r.x[:, k] for r in records])
            supports.append((float(xk.min()), float(xk.max())))
        covariate_supports = tuple(supports)
    return LongitudinalDataset(
        tuple(records), p, q, tuple(time_support), tuple(covariate_supports)
    )


def _resolve_schema(header, schema):
    schema = dict(schema or {})
    cols = {name: i for i, name in enumerate(header)}
    mapping = {}
    for role, default in (("subject", "subject"), ("time", "time"), ("y", "y")):
        name = schema.get(role, default)
        if name not in cols:
            raise SchemaError(f"missing column {name!r} (role {role!r})")
        mapping[role] = cols[name]
    for role, prefix in (("z", "z"), ("x", "x")):
        if role in schema:
            names = list(schema[role])
        else:
            tagged = []
            for name in header:
                if name.startswith(prefix) and name[len(prefix):].isdigit():
                    tagged.append((int(name[len(prefix):]), name))
            names = [name for _, name in sorted(tagged)]
        for name in names:
            if name not in cols:
                raise SchemaError(f"missing column {name!r} (role {role!r})")
        mapping[role] = [cols[name] for name in names]
    return mapping


def load_longitudinal(path, schema=None):
    """Read a long-format CSV into a dataset.

    Rows are grouped by subject id in first-appearance order.  Raises
    ``SchemaError`` for missing columns, ``ParseError`` (with the 1-based
    data row number) for non-numeric cells, and ``EmptyDataError`` for a
    file with no data rows.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataError(f"{path}: empty file") from None
        mapping = _resolve_schema([h.strip() for h in header], schema)
        order = []
        rows = {}
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            sid = row[mapping["subject"]].strip()
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            try:
                t = float(row[mapping["time"]])
                yv = float(row[mapping["y"]])
                zv = [float(row[i]) for i in mapping["z"]]
                xv = [float(row[i]) for i in mapping["x"]]
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}: row {rownum}: {exc}") from None
            rows[sid].append((t, yv, zv, xv))
    if not order:
        raise EmptyDataError(f"{path}: no data rows")
    ids, times, ys, zs, xs = [], [], [], [], []
    for sid in order:
        recs = rows[sid]
        ids.append(sid)
        times.append([r[0] for r in recs])
        ys.append([r[1] for r in recs])
        zs.append([r[2] for r in recs])
        xs.append([r[3] for r in recs])
    return from_arrays(ids, times, ys, zs, xs)


def save_longitudinal(ds, path):
    """Write a dataset back to the canonical CSV layout.  Floats use
    ``repr`` so a load/save/load round-trip is bit-exact."""
    header = (["subject", "time", "y"]
              + [f"z{k + 1}" for k in range(ds.q)]
              + [f"x{k + 1}" for k in range(ds.p)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in ds.subjects:
            for j in range(rec.m):
                writer.writerow(
                    [rec.id, repr(float(rec.times[j])), repr(float(rec.responses[j]))]
                    + [repr(float(v)) for v in rec.z[j]]
                    + [repr(float(v)) for v in rec.x[j]]
                )


def summarize(ds):
    """Subject count, total observations, harmonic mean and mean square of
    the per-subject counts."""
    m = np.array([s.m for s in ds.subjects], dtype=np.float64)
    n = m.size
    return SampleSummary(
        n=int(n),
        N=int(m.sum()),
        nbar_h=float(n / np.sum(1.0 / m)),
        nbar_2=float(np.mean(m * m)),
    )


def subj_weight(ds, i):
    """Per-observation weight 1/m_i inside subject i (SUBJ scheme)."""
    if not 0 <= i < ds.n:
        raise IndexError(f"subject index {i} out of range [0, {ds.n})")
    return 1.0 / ds.subjects[i].m
