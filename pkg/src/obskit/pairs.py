"""Matched-pair data model: ingestion, validation, ranking and splitting.

The central object is :class:`PairSample`, one row per matched pair holding
the treated-minus-control outcome difference and any pair-level covariates
(e.g. the within-pair average age).  All objects are immutable after
construction and safe to share across threads.

CSV format: header ``pair_id,diff[,cov_<name>...]``, UTF-8, ``.`` decimal
separator.  Parse errors are reported as ``row:<r> col:<name> <message>``
with 1-based row numbers counting the header as row 1.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .rng import substream

__all__ = [
    "PairSample",
    "RankedPairs",
    "SampleSplit",
    "load_pairs",
    "save_pairs",
    "rank_pairs",
    "split_sample",
    "apply_split",
]

_COV_PREFIX = "cov_"


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PairSample:
    """Treated-minus-control differences for matched pairs.

    Fields
    ------
    pair_ids : tuple of str
        Unique identifier per pair, row order preserved.
    diffs : ndarray of float
        Outcome difference per pair; must be finite.
    covariates : dict of str -> ndarray
        Pair-level covariate columns, complete (no missing values).
    """

    pair_ids: tuple
    diffs: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.pair_ids)
        diffs = _readonly(np.asarray(self.diffs, dtype=float))
        object.__setattr__(self, "pair_ids", ids)
        object.__setattr__(self, "diffs", diffs)
        if len(ids) == 0:
            raise ValidationError("a PairSample needs at least one pair")
        if diffs.ndim != 1 or len(diffs) != len(ids):
            raise ValidationError("diffs must be one value per pair")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise ValidationError(f"duplicate pair_id {dup!r}")
        if not np.all(np.isfinite(diffs)):
            r = int(np.flatnonzero(~np.isfinite(diffs))[0])
            raise ValidationError(f"non-finite diff for pair {ids[r]!r}")
        covs = {}
        for name, col in self.covariates.items():
            col = _readonly(np.asarray(col, dtype=float))
            if col.shape != diffs.shape:
                raise ValidationError(f"covariate {name!r} must have one value per pair")
            if not np.all(np.isfinite(col)):
                r = int(np.flatnonzero(~np.isfinite(col))[0])
                raise ValidationError(
                    f"missing or non-finite value in covariate {name!r} for pair {ids[r]!r}"
                )
            covs[str(name)] = col
        object.__setattr__(self, "covariates", covs)

    @property
    def n(self):
        return len(self.pair_ids)

    @property
    def covariate_names(self):
        return tuple(self.covariates)

    def take(self, indices):
        """New PairSample with the given row positions, in the given order."""
        idx = np.asarray(indices, dtype=int)
        return PairSample(
            pair_ids=tuple(self.pair_ids[i] for i in idx),
            diffs=self.diffs[idx],
            covariates={k: v[idx] for k, v in self.covariates.items()},
        )

    def restrict(self, ids):
        """New PairSample with only the given pair ids, original row order kept."""
        want = set(ids)
        idx = [i for i, p in enumerate(self.pair_ids) if p in want]
        missing = want - {self.pair_ids[i] for i in idx}
        if missing:
            raise ValidationError(f"unknown pair ids: {sorted(missing)}")
        return self.take(idx)


@dataclass(frozen=True)
class RankedPairs:
    """Pairs prepared for signed-rank statistics.

    Zero differences carry no rank and are dropped (their count is kept in
    ``n_zero_dropped``); ties among the remaining absolute differences get
    average ranks.
    """

    sample: PairSample  # the nonzero-difference subset
    abs_ranks: np.ndarray
    signs: np.ndarray  # +1 / -1 per retained pair
    n_zero_dropped: int

    def __post_init__(self):
        object.__setattr__(self, "abs_ranks", _readonly(self.abs_ranks))
        object.__setattr__(self, "signs", _readonly(self.signs))

    @property
    def m(self):
        return self.sample.n


@dataclass(frozen=True)
class SampleSplit:
    """A planning/analysis division of the pair ids."""

    planning_ids: tuple
    analysis_ids: tuple
    fraction: float
    seed: int


def load_pairs(path, covariates=None):
    """Read a pair CSV into a validated PairSample.

    ``covariates`` optionally declares covariate names (without the
    ``cov_`` prefix) that must be present; by default every ``cov_*``
    column found in the header is loaded.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"row:1 col:pair_id empty file {path!r}")
    header = [h.strip() for h in rows[0]]
    for required in ("pair_id", "diff"):
        if required not in header:
            raise ValidationError(f"row:1 col:{required} missing column")
    id_col = header.index("pair_id")
    diff_col = header.index("diff")
    cov_cols = {h[len(_COV_PREFIX):]: i for i, h in enumerate(header) if h.startswith(_COV_PREFIX)}
    if covariates is not None:
        for name in covariates:
            if name not in cov_cols:
                raise ValidationError(f"row:1 col:{_COV_PREFIX}{name} missing column")
        cov_cols = {k: v for k, v in cov_cols.items() if k in set(covariates)}

    ids, diffs = [], []
    covs = {name: [] for name in cov_cols}
    seen = set()
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValidationError(f"row:{r} col:pair_id expected {len(header)} fields, got {len(row)}")
        pid = row[id_col].strip()
        if not pid:
            raise ValidationError(f"row:{r} col:pair_id empty pair_id")
        if pid in seen:
            raise ValidationError(f"row:{r} col:pair_id duplicate pair_id {pid!r}")
        seen.add(pid)
        ids.append(pid)
        diffs.append(_parse_number(row[diff_col], r, "diff"))
        for name, col in cov_cols.items():
            covs[name].append(_parse_number(row[col], r, _COV_PREFIX + name))
    if not ids:
        raise ValidationError(f"row:2 col:pair_id no data rows in {path!r}")
    return PairSample(pair_ids=tuple(ids), diffs=np.array(diffs), covariates={k: np.array(v) for k, v in covs.items()})


def _parse_number(text, row, col):
    s = text.strip()
    if not s:
        raise ValidationError(f"row:{row} col:{col} missing value")
    try:
        x = float(s)
    except ValueError:
        raise ValidationError(f"row:{row} col:{col} not a number: {s!r}") from None
    if not np.isfinite(x):
        raise ValidationError(f"row:{row} col:{col} non-finite value: {s!r}")
    return x


def save_pairs(sample, path):
    """Write a PairSample back to CSV; round-trips bit-identically via repr."""
    names = sample.covariate_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "diff"] + [_COV_PREFIX + n for n in names])
        for i, pid in enumerate(sample.pair_ids):
            row = [pid, repr(float(sample.diffs[i]))]
            row += [repr(float(sample.covariates[n][i])) for n in names]
            w.writerow(row)


def rank_pairs(sample):
    """Rank absolute differences for signed-rank statistics.

    Zero differences are dropped (standard signed-rank convention) and ties
    receive average ranks.
    """
    nonzero = np.flatnonzero(sample.diffs != 0.0)
    if len(nonzero) == 0:
        raise ValidationError("degenerate sample: all differences are zero")
    sub = sample.take(nonzero)
    ranks = rankdata(np.abs(sub.diffs))
    signs = np.where(sub.diffs > 0, 1, -1)
    return RankedPairs(
        sample=sub,
        abs_ranks=ranks,
        signs=signs,
        n_zero_dropped=sample.n - len(nonzero),
    )


def _split_ids(ids, fraction, seed):
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"fraction must be in (0,1), got {fraction}")
    n = len(ids)
    k = round(fraction * n)
    if k < 1 or n - k < 1:
        raise ValidationError(
            f"sample of {n} pairs too small to split at fraction {fraction}"
        )
    rng = substream(seed)
    chosen = rng.permutation(n)[:k]
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    planning = tuple(ids[i] for i in range(n) if mask[i])
    analysis = tuple(ids[i] for i in range(n) if not mask[i])
    return planning, analysis


def split_sample(sample, fraction, seed):
    """Randomly divide the pairs into a planning and an analysis sample.

    The planning sample has ``round(fraction * n)`` pairs chosen uniformly
    at random from the package PRNG; the same seed always gives the same
    split.  Both ids tuples keep the original row order.
    """
    planning, analysis = _split_ids(sample.pair_ids, fraction, seed)
    return SampleSplit(planning_ids=planning, analysis_ids=analysis, fraction=float(fraction), seed=int(seed))


def apply_split(sample, split):
    """Materialize (planning PairSample, analysis PairSample) for a split."""
    return sample.restrict(split.planning_ids), sample.restrict(split.analysis_ids)
