"""Domain types and CSV ingestion for longitudinal datasets.

Long format: one row per observation, columns ``subject,t,y,x1..xp,z1..zq``.
Rows of one subject may be scattered through the file; within-subject order
is the file order. All estimators index observations in the stacked order
subjects[0] rows, subjects[1] rows, ...
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Subject:
    """One cluster: times in [0,1], response, and the two covariate blocks.

    x holds the constant-coefficient covariates (m_i x p), z the
    varying-coefficient covariates (m_i x q) whose first column must be 1.
    """

    id: str
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    @property
    def m(self):
        return len(self.times)


@dataclass(frozen=True)
class LongitudinalDataset:
    subjects: tuple
    p: int
    q: int
    # stacked views, observation order = subject order x within-subject order
    times_all: np.ndarray = field(repr=False, default=None)
    y_all: np.ndarray = field(repr=False, default=None)
    x_all: np.ndarray = field(repr=False, default=None)
    z_all: np.ndarray = field(repr=False, default=None)
    offsets: np.ndarray = field(repr=False, default=None)  # len n+1

    @property
    def n(self):
        return len(self.subjects)

    @property
    def N1(self):
        return int(self.offsets[-1])

    @property
    def N2(self):
        return int(sum(s.m * (s.m - 1) for s in self.subjects))

    def slice_of(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


def make_dataset(subjects):
    """Assemble a LongitudinalDataset from Subject records, stacking arrays."""
    subjects = tuple(subjects)
    if not subjects:
        raise DataError("dataset has no subjects")
    p = subjects[0].x.shape[1]
    q = subjects[0].z.shape[1]
    offsets = np.zeros(len(subjects) + 1, dtype=np.int64)
    for i, s in enumerate(subjects):
        offsets[i + 1] = offsets[i] + s.m
    return LongitudinalDataset(
        subjects=subjects,
        p=p,
        q=q,
        times_all=np.concatenate([s.times for s in subjects]),
        y_all=np.concatenate([s.y for s in subjects]),
        x_all=np.vstack([s.x for s in subjects]),
        z_all=np.vstack([s.z for s in subjects]),
        offsets=offsets,
    )


def validate(dataset):
    """Return a list of invariant violations; empty when the dataset is sound.

    Each violation is a (subject_id, field, message) tuple. Violations are
    data, not exceptions: callers decide whether to abort.
    """
    out = []
    for s in dataset.subjects:
        if s.m < 1:
            out.append((s.id, "times", "subject has no observations"))
            continue
        if not (len(s.y) == s.m and s.x.shape[0] == s.m and s.z.shape[0] == s.m):
            out.append((s.id, "shape", "containers disagree on m_i"))
            continue
        if s.x.shape[1] != dataset.p:
            out.append((s.id, "x", f"expected p={dataset.p} columns"))
        if s.z.shape[1] != dataset.q:
            out.append((s.id, "z", f"expected q={dataset.q} columns"))
        for name, arr in (("times", s.times), ("y", s.y), ("x", s.x), ("z", s.z)):
            if not np.all(np.isfinite(arr)):
                out.append((s.id, name, "non-finite value"))
        if np.any(s.times < 0.0) or np.any(s.times > 1.0):
            out.append((s.id, "times", "observation time outside [0,1]"))
        if s.z.shape[1] >= 1 and not np.all(s.z[:, 0] == 1.0):
            out.append((s.id, "z", "intercept column of z is not identically 1"))
    return out


def check_valid(dataset):
    violations = validate(dataset)
    if violations:
        head = "; ".join(f"subject {v[0]} [{v[1]}]: {v[2]}" for v in violations[:5])
        more = "" if len(violations) <= 5 else f" (+{len(violations) - 5} more)"
        raise DataError(f"invalid dataset: {head}{more}")
    return dataset


# ---------------------------------------------------------------------------
# CSV ingestion


def _schema_columns(header, add_intercept):
    cols = {name: i for i, name in enumerate(header)}
    for required in ("subject", "t", "y"):
        if required not in cols:
            raise DataError(f"missing column '{required}'")
    xcols, zcols = [], []
    k = 1
    while f"x{k}" in cols:
        xcols.append(cols[f"x{k}"])
        k += 1
    k = 1
    while f"z{k}" in cols:
        zcols.append(cols[f"z{k}"])
        k += 1
    if not xcols:
        raise DataError("missing column 'x1' (need at least one x column)")
    if not zcols and not add_intercept:
        raise DataError("missing column 'z1' (need z columns or add_intercept)")
    return cols["subject"], cols["t"], cols["y"], xcols, zcols


def load_csv(path, add_intercept=False, rescale_time=False):
    """Read a long-format CSV into a validated LongitudinalDataset.

    add_intercept prepends a constant-1 column to z; otherwise the file's z1
    column must already be identically 1. rescale_time maps the observed
    [min,max] time range affinely onto [0,1].
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        si, ti, yi, xcols, zcols = _schema_columns(
            [h.strip() for h in header], add_intercept
        )
        rows = {}
        order = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rec = (
                    float(row[ti]),
                    float(row[yi]),
                    [float(row[j]) for j in xcols],
                    [float(row[j]) for j in zcols],
                )
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: non-numeric or short row ({e})")
            sid = row[si].strip()
            if sid not in rows:
                rows[sid] = []
                order.append(sid)
            rows[sid].append((lineno, rec))

    if not order:
        raise DataError(f"{path}: no data rows")

    all_t = np.array([rec[0] for sid in order for _, rec in rows[sid]])
    if rescale_time:
        lo, hi = all_t.min(), all_t.max()
        span = hi - lo if hi > lo else 1.0
    subjects = []
    for sid in order:
        recs = rows[sid]
        times = np.array([r[0] for _, r in recs])
        if rescale_time:
            times = (times - lo) / span
        else:
            for (lineno, r) in recs:
                if r[0] < 0.0 or r[0] > 1.0:
                    raise DataError(
                        f"{path}:{lineno}: t={r[0]} outside [0,1] "
                        "(use --rescale-time to map the observed range)"
                    )
        y = np.array([r[1] for _, r in recs])
        x = np.array([r[2] for _, r in recs])
        z = np.array([r[3] for _, r in recs]) if zcols else np.empty((len(recs), 0))
        if add_intercept:
            z = np.hstack([np.ones((z.shape[0], 1)), z])
        elif not np.all(z[:, 0] == 1.0):
            bad = recs[int(np.flatnonzero(z[:, 0] != 1.0)[0])][0]
            raise DataError(
                f"{path}:{bad}: z1 must be identically 1 (or pass add_intercept)"
            )
        subjects.append(Subject(id=sid, times=times, y=y, x=x, z=z))
    dup = [s.id for s in subjects if len(np.unique(s.times)) < s.m]
    if dup:
        import warnings

        warnings.warn(
            f"duplicate within-subject times for subjects {dup[:5]}"
            " (allowed; covariance surface pairs at s=t will occur)",
            stacklevel=2,
        )
    return check_valid(make_dataset(subjects))


def write_csv(dataset, path):
    """Inverse of load_csv for validated datasets (15 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["subject", "t", "y"]
            + [f"x{k + 1}" for k in range(dataset.p)]
            + [f"z{k + 1}" for k in range(dataset.q)]
        )
        for s in dataset.subjects:
            for j in range(s.m):
                writer.writerow(
                    [s.id]
                    + [format(v, ".15g") for v in (s.times[j], s.y[j])]
                    + [format(v, ".15g") for v in s.x[j]]
                    + [format(v, ".15g") for v in s.z[j]]
                )
