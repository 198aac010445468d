"""Optimal treated-control pair matching and covariate balance reporting.

Workflow: load a subject table, fit a propensity model when the distance
needs one, build a treated-by-control distance matrix (rank-Mahalanobis or
absolute propensity difference, optionally with a hard propensity caliper),
solve the minimum-total-distance assignment exactly, and report per-
covariate standardized differences before and after matching.

Subject CSV: header ``id,treated,cov_<name>...`` with treated in {0,1}.
Match CSV: ``treated_id,control_id,distance``.  The balance report renders
as CSV or an aligned text table (treated mean, matched-control mean,
all-controls mean, standardized difference before and after matching).
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NumericError, ValidationError

__all__ = [
    "SubjectTable",
    "PropensityModel",
    "MatchResult",
    "BalanceRow",
    "BalanceReport",
    "load_subjects",
    "fit_propensity",
    "distance_matrix",
    "optimal_pair_match",
    "pair_match",
    "balance_report",
]

RIDGE_SCALE = 1e-6  # ridge for a singular rank covariance: scale * trace/dim
SCORE_TOL = 1e-8
MAX_NEWTON_ITER = 100


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SubjectTable:
    """Subject-level data: one row per subject, binary treatment flag."""

    ids: tuple
    treated: np.ndarray
    covariates: dict

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        treated = _readonly(np.asarray(self.treated, dtype=bool))
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "treated", treated)
        if len(set(ids)) != len(ids):
            raise ValidationError("subject ids must be unique")
        if treated.shape != (len(ids),):
            raise ValidationError("treated must hold one flag per subject")
        if not treated.any() or treated.all():
            raise ValidationError("need at least one treated and one control subject")
        covs = {}
        for name, col in self.covariates.items():
            col = _readonly(np.asarray(col, dtype=float))
            if col.shape != treated.shape or not np.all(np.isfinite(col)):
                raise ValidationError(f"covariate {name!r} must be complete and finite")
            covs[str(name)] = col
        if not covs:
            raise ValidationError("need at least one covariate")
        object.__setattr__(self, "covariates", covs)

    @property
    def n(self):
        return len(self.ids)

    @property
    def covariate_names(self):
        return tuple(self.covariates)

    @property
    def treated_ids(self):
        return tuple(i for i, t in zip(self.ids, self.treated) if t)

    @property
    def control_ids(self):
        return tuple(i for i, t in zip(self.ids, self.treated) if not t)

    def design_matrix(self):
        """Covariate columns in declared order, n x p."""
        return np.column_stack([self.covariates[c] for c in self.covariate_names])


def load_subjects(path):
    """Read a subject CSV (id, treated, cov_* columns) into a SubjectTable."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"row:1 col:id empty file {path!r}")
    header = [h.strip() for h in rows[0]]
    for required in ("id", "treated"):
        if required not in header:
            raise ValidationError(f"row:1 col:{required} missing column")
    id_col, tr_col = header.index("id"), header.index("treated")
    cov_cols = {h[4:]: i for i, h in enumerate(header) if h.startswith("cov_")}
    ids, treated = [], []
    covs = {name: [] for name in cov_cols}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValidationError(f"row:{r} col:id expected {len(header)} fields, got {len(row)}")
        ids.append(row[id_col].strip())
        t = row[tr_col].strip()
        if t not in ("0", "1"):
            raise ValidationError(f"row:{r} col:treated must be 0 or 1, got {t!r}")
        treated.append(t == "1")
        for name, c in cov_cols.items():
            s = row[c].strip()
            try:
                covs[name].append(float(s))
            except ValueError:
                raise ValidationError(f"row:{r} col:cov_{name} not a number: {s!r}") from None
    return SubjectTable(ids=tuple(ids), treated=np.array(treated),
                        covariates={k: np.array(v) for k, v in covs.items()})


@dataclass(frozen=True)
class PropensityModel:
    """Logistic model of treatment on covariates (intercept first)."""

    coefficients: np.ndarray
    covariate_names: tuple
    converged: bool
    iterations: int

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _readonly(self.coefficients))

    def scores(self, table):
        """Predicted treatment probabilities, strictly inside (0, 1)."""
        if table.covariate_names != self.covariate_names:
            raise ValidationError("table covariates do not match the fitted model")
        eta = self.coefficients[0] + table.design_matrix() @ self.coefficients[1:]
        return _expit(eta)


def _expit(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fit_propensity(table):
    """Maximum-likelihood logistic fit via damped Newton iterations.

    Converged when the largest score-equation residual drops below 1e-8,
    giving up after 100 iterations (the flag records which; scores remain
    usable either way).  Complete separation is reported as an error since
    no finite maximum exists - match exactly on the separating covariate
    instead of using a caliper.
    """
    X = np.column_stack([np.ones(table.n), table.design_matrix()])
    y = table.treated.astype(float)
    if table.n < X.shape[1]:
        raise ValidationError(
            f"need at least {X.shape[1]} subjects for {X.shape[1]-1} covariates"
        )
    beta = np.zeros(X.shape[1])
    ll = _log_likelihood(X, y, beta)
    converged = False
    it = 0
    for it in range(1, MAX_NEWTON_ITER + 1):
        eta = X @ beta
        mu = _expit(eta)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        w = mu * (1.0 - mu)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        # damping: halve until the likelihood does not decrease
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            ll_new = _log_likelihood(X, y, cand)
            if ll_new >= ll - 1e-12:
                break
            scale /= 2.0
        beta = beta + scale * step
        ll = _log_likelihood(X, y, beta)
        _check_separation(X, y, beta)
    if not converged:
        warnings.warn(
            f"propensity fit did not converge in {MAX_NEWTON_ITER} iterations",
            stacklevel=2,
        )
    return PropensityModel(coefficients=beta, covariate_names=table.covariate_names,
                           converged=converged, iterations=it)


def _log_likelihood(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _check_separation(X, y, beta):
    eta = X @ beta
    perfectly_classified = np.all((eta > 0) == (y == 1.0))
    if perfectly_classified and np.max(np.abs(beta)) > 30.0:
        raise ValidationError(
            "complete separation: the likelihood has no finite maximum; "
            "match exactly on the separating covariate instead of using a caliper"
        )


def distance_matrix(table, metric="rank-mahalanobis", caliper=None, propensity=None):
    """Treated-by-control distance matrix, +inf where the caliper is violated.

    ``rank-mahalanobis`` replaces each covariate by its ranks over all
    subjects (average ranks on ties) and returns the squared Mahalanobis
    form in the rank covariance; ``propensity-abs-diff`` is the absolute
    difference in estimated propensity score.  The optional caliper is a
    hard bound on the propensity-score gap.  A singular rank covariance
    gets a ridge of 1e-6 * trace/dim, reported via a warning.
    """
    t_idx = np.flatnonzero(table.treated)
    c_idx = np.flatnonzero(~table.treated)
    need_scores = metric == "propensity-abs-diff" or caliper is not None
    scores = None
    if need_scores:
        if propensity is None:
            propensity = fit_propensity(table)
        scores = propensity.scores(table)

    if metric == "rank-mahalanobis":
        R = np.column_stack([
            rankdata(table.covariates[c]) for c in table.covariate_names
        ])
        cov = np.cov(R, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        try:
            inv = np.linalg.inv(cov)
        except np.linalg.LinAlgError:
            ridge = RIDGE_SCALE * np.trace(cov) / cov.shape[0]
            warnings.warn(
                f"singular rank covariance: added ridge {ridge:.3e} to the diagonal",
                stacklevel=2,
            )
            inv = np.linalg.inv(cov + ridge * np.eye(cov.shape[0]))
        diff = R[t_idx][:, None, :] - R[c_idx][None, :, :]
        dist = np.einsum("ijk,kl,ijl->ij", diff, inv, diff)
        dist = np.maximum(dist, 0.0)
    elif metric == "propensity-abs-diff":
        dist = np.abs(scores[t_idx][:, None] - scores[c_idx][None, :])
    else:
        raise ValidationError(f"unknown metric {metric!r}")

    if caliper is not None:
        if caliper <= 0:
            raise ValidationError(f"caliper must be positive, got {caliper}")
        gap = np.abs(scores[t_idx][:, None] - scores[c_idx][None, :])
        dist = np.where(gap > caliper, np.inf, dist)
    return dist


@dataclass(frozen=True)
class MatchResult:
    """A pairing of treated to control units.

    ``pairs`` lists (treated_id, control_id) in treated-id order; each
    subject appears at most once, and the pairing minimizes total distance
    among feasible pairings of this size.
    """

    pairs: tuple
    total_distance: float
    unmatched_treated: tuple = ()
    distances: tuple = ()


def optimal_pair_match(dist, treated_ids=None, control_ids=None):
    """Exact minimum-cost assignment by successive shortest paths.

    Entries of +inf are infeasible edges.  When no complete feasible
    assignment exists the maximum feasible matching is returned and the
    unmatched treated units are listed (with a warning).  Rows and columns
    are processed in sorted-id order and equal-cost solutions are
    canonicalized toward lexicographically smallest (treated_id,
    control_id) pairs, so the result is reproducible and permuting the
    input rows/columns permutes the pairing consistently.
    """
    d = np.asarray(dist, dtype=float)
    if d.ndim != 2 or d.size == 0:
        raise ValidationError("distance matrix must be 2-D and non-empty")
    if np.any(np.isnan(d)) or np.any(d[np.isfinite(d)] < 0):
        raise ValidationError("distances must be nonnegative (or +inf)")
    nr, nc = d.shape
    if treated_ids is None:
        treated_ids = tuple(str(i) for i in range(nr))
    if control_ids is None:
        control_ids = tuple(str(j) for j in range(nc))
    treated_ids, control_ids = tuple(treated_ids), tuple(control_ids)
    if len(treated_ids) != nr or len(control_ids) != nc:
        raise ValidationError("id lists must match the matrix shape")

    row_order = sorted(range(nr), key=lambda i: treated_ids[i])
    col_order = sorted(range(nc), key=lambda j: control_ids[j])
    dd = d[np.ix_(row_order, col_order)]
    row4col, col4row = _min_cost_assignment(dd)

    unmatched = [treated_ids[row_order[i]] for i in range(nr) if col4row[i] < 0]
    if unmatched:
        warnings.warn(
            f"no feasible control for {len(unmatched)} treated unit(s); "
            "returning the maximum feasible matching", stacklevel=2,
        )
    _canonicalize_ties(dd, col4row, row4col)

    pairs, dists = [], []
    for i in range(nr):
        j = col4row[i]
        if j >= 0:
            pairs.append((treated_ids[row_order[i]], control_ids[col_order[j]]))
            dists.append(float(dd[i, j]))
    order = np.argsort([p[0] for p in pairs], kind="stable")
    pairs = tuple(pairs[i] for i in order)
    dists = tuple(dists[i] for i in order)
    return MatchResult(
        pairs=pairs,
        total_distance=float(np.sum(dists)) if dists else 0.0,
        unmatched_treated=tuple(sorted(unmatched)),
        distances=dists,
    )


def _min_cost_assignment(d):
    """Successive shortest augmenting paths with dual potentials.

    Returns (row4col, col4row) with -1 for unmatched.  Standard
    Jonker-Volgenant style: for each row run a Dijkstra over columns using
    reduced costs, update the potentials, then flip the alternating path.
    A row whose search exhausts all reachable columns stays unmatched (the
    matching is still maximum: no augmenting path from that row exists).
    """
    nr, nc = d.shape
    u = np.zeros(nr)  # row potentials
    v = np.zeros(nc)  # column potentials
    row4col = np.full(nc, -1, dtype=int)
    col4row = np.full(nr, -1, dtype=int)
    for cur in range(nr):
        shortest = np.full(nc, np.inf)  # shortest path cost to each column
        path = np.full(nc, -1, dtype=int)  # row from which the column is reached
        visited_rows = np.zeros(nr, dtype=bool)
        scanned_cols = np.zeros(nc, dtype=bool)
        i = cur
        sink = -1
        minval = 0.0
        while sink < 0:
            visited_rows[i] = True
            r = minval + d[i] - u[i] - v
            better = ~scanned_cols & (r < shortest)
            shortest[better] = r[better]
            path[better] = i
            masked = np.where(scanned_cols, np.inf, shortest)
            lowest = masked.min()
            if lowest == np.inf:
                break  # no augmenting path: row `cur` stays unmatched
            cand = np.flatnonzero(masked == lowest)
            free = cand[row4col[cand] < 0]
            j = int(free[0] if free.size else cand[0])
            scanned_cols[j] = True
            minval = lowest
            if row4col[j] < 0:
                sink = j
            else:
                i = row4col[j]
        if sink < 0:
            continue
        # dual update keeps all reduced costs nonnegative
        u[cur] += minval
        others = visited_rows.copy()
        others[cur] = False
        idx = np.flatnonzero(others)
        if idx.size:
            u[idx] += minval - shortest[col4row[idx]]
        v[scanned_cols] -= minval - shortest[scanned_cols]
        # augment along the alternating path back to `cur`
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return row4col, col4row


def _canonicalize_ties(d, col4row, row4col):
    """Swap equal-cost pairs toward lexicographically smaller assignments."""
    matched = [i for i in range(len(col4row)) if col4row[i] >= 0]
    changed = True
    while changed:
        changed = False
        for a in range(len(matched)):
            for b in range(a + 1, len(matched)):
                i1, i2 = matched[a], matched[b]
                j1, j2 = col4row[i1], col4row[i2]
                if j2 < j1 and np.isfinite(d[i1, j2]) and np.isfinite(d[i2, j1]):
                    if d[i1, j2] + d[i2, j1] == d[i1, j1] + d[i2, j2]:
                        col4row[i1], col4row[i2] = j2, j1
                        row4col[j1], row4col[j2] = i2, i1
                        changed = True


def pair_match(table, metric="rank-mahalanobis", caliper=None, propensity=None):
    """Convenience: distance matrix plus assignment with real subject ids."""
    d = distance_matrix(table, metric=metric, caliper=caliper, propensity=propensity)
    return optimal_pair_match(d, treated_ids=table.treated_ids,
                              control_ids=table.control_ids)


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    mean_treated: float
    mean_matched_control: float
    mean_all_controls: float
    std_diff_before: float
    std_diff_after: float
    degenerate: bool = False


@dataclass(frozen=True)
class BalanceReport:
    """Standardized differences before and after matching.

    Both columns divide by the pooled standard deviation prior to matching,
    so before and after are on the same scale.  Entries beyond
    ``flag_threshold`` in absolute value are flagged.
    """

    rows: tuple
    flag_threshold: float = 0.2

    def flagged(self):
        return tuple(
            r.covariate for r in self.rows
            if r.degenerate or abs(r.std_diff_before) > self.flag_threshold
            or abs(r.std_diff_after) > self.flag_threshold
        )

    def to_csv_rows(self):
        header = ["covariate", "mean_treated", "mean_matched_control",
                  "mean_all_controls", "std_diff_before", "std_diff_after"]
        out = [header]
        for r in self.rows:
            out.append([r.covariate, repr(r.mean_treated), repr(r.mean_matched_control),
                        repr(r.mean_all_controls), repr(r.std_diff_before),
                        repr(r.std_diff_after)])
        return out

    def to_text(self):
        cols = ["Covariate", "Treated", "Matched control", "All controls",
                "Before", "After"]
        lines = []
        body = []
        for r in self.rows:
            mark = lambda x: (f"{x:.2f}*" if abs(x) > self.flag_threshold else f"{x:.2f}")
            if r.degenerate:
                before, after = "degenerate", "degenerate"
            else:
                before, after = mark(r.std_diff_before), mark(r.std_diff_after)
            body.append([r.covariate, f"{r.mean_treated:.6g}",
                         f"{r.mean_matched_control:.6g}", f"{r.mean_all_controls:.6g}",
                         before, after])
        widths = [max(len(row[c]) for row in [cols] + body) for c in range(len(cols))]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines.append(fmt.format(*cols))
        for row in body:
            lines.append(fmt.format(*row))
        lines.append(f"(* |standardized difference| > {self.flag_threshold})")
        return "\n".join(lines)


def balance_report(table, match, flag_threshold=0.2):
    """Per-covariate balance of the match against all controls.

    The before column compares treated with all controls, the after column
    treated with their matched controls; the denominator for both is the
    pooled pre-matching standard deviation sqrt((var_t + var_c)/2).
    """
    if not match.pairs:
        raise ValidationError("match is empty")
    pos = {s: i for i, s in enumerate(table.ids)}
    t_rows = np.array([pos[t] for t, _ in match.pairs])
    c_rows = np.array([pos[c] for _, c in match.pairs])
    all_t = np.flatnonzero(table.treated)
    all_c = np.flatnonzero(~table.treated)
    rows = []
    for name in table.covariate_names:
        x = table.covariates[name]
        mt, mc_all = float(x[all_t].mean()), float(x[all_c].mean())
        mc_matched = float(x[c_rows].mean())
        mt_matched = float(x[t_rows].mean())
        var_t = float(x[all_t].var(ddof=1)) if len(all_t) > 1 else 0.0
        var_c = float(x[all_c].var(ddof=1)) if len(all_c) > 1 else 0.0
        sd_pool = np.sqrt((var_t + var_c) / 2.0)
        if sd_pool == 0.0:
            degenerate = not (mt == mc_all == mc_matched)
            rows.append(BalanceRow(
                covariate=name, mean_treated=mt, mean_matched_control=mc_matched,
                mean_all_controls=mc_all,
                std_diff_before=0.0 if not degenerate else float("nan"),
                std_diff_after=0.0 if not degenerate else float("nan"),
                degenerate=degenerate,
            ))
            continue
        rows.append(BalanceRow(
            covariate=name, mean_treated=mt, mean_matched_control=mc_matched,
            mean_all_controls=mc_all,
            std_diff_before=(mt - mc_all) / sd_pool,
            std_diff_after=(mt_matched - mc_matched) / sd_pool,
        ))
    return BalanceReport(rows=tuple(rows), flag_threshold=float(flag_threshold))
