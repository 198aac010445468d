"""Adaptive protocol machinery: choosing outcomes and subgroups from data.

Two distinct routes to data-chosen subgroups, never conflated:

* splitting - fit a regression tree to the ranks of the *signed*
  differences on a random planning sample, then test the tree's leaf
  subgroups on the held-out analysis sample;
* the absolute-difference route - fit the tree to the ranks of the
  *absolute* differences of all pairs.  Under the sharp null only the signs
  of the pair differences change between treatment assignments, so this
  tree is invariant to sign flips and its leaves may be tested as if they
  had been specified ahead of time.

Outcome selection by splitting scores every outcome on the planning sample
with the standardized signed-rank statistic and carries the best forward to
the analysis sample.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .multiplicity import PValueSet, truncated_product
from .pairs import PairSample, _split_ids, apply_split, rank_pairs, split_sample
from .sensitivity import wilcoxon_gamma_bound

__all__ = [
    "MultiOutcomeSample",
    "TreeParams",
    "TreeNode",
    "RegressionTree",
    "SubgroupPartition",
    "OutcomeSelection",
    "SubgroupSplitResult",
    "SubgroupTestResult",
    "load_outcomes",
    "select_outcome_split",
    "fit_abs_rank_tree",
    "subgroups_from_tree",
    "select_subgroups_split",
    "subgroup_sensitivity_test",
]


@dataclass(frozen=True)
class MultiOutcomeSample:
    """n pairs by K outcomes of treated-minus-control differences."""

    pair_ids: tuple
    outcome_labels: tuple
    outcomes: np.ndarray  # n x K
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.pair_ids)
        m = np.asarray(self.outcomes, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "pair_ids", ids)
        object.__setattr__(self, "outcome_labels", tuple(str(s) for s in self.outcome_labels))
        object.__setattr__(self, "outcomes", m)
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate pair ids")
        if m.ndim != 2 or m.shape != (len(ids), len(self.outcome_labels)):
            raise ValidationError("outcomes must be an n x K matrix matching ids and labels")
        if m.shape[1] < 1:
            raise ValidationError("need K >= 1 outcomes")
        if not np.all(np.isfinite(m)):
            raise ValidationError("outcome differences must be finite")

    @property
    def n(self):
        return len(self.pair_ids)

    @property
    def k(self):
        return len(self.outcome_labels)

    def outcome(self, label):
        """One outcome column as a PairSample (covariates carried along)."""
        if label not in self.outcome_labels:
            raise ValidationError(f"unknown outcome {label!r}")
        j = self.outcome_labels.index(label)
        return PairSample(pair_ids=self.pair_ids, diffs=self.outcomes[:, j],
                          covariates=self.covariates)


def load_outcomes(path):
    """Read a multi-outcome CSV: header ``pair_id,out_<label>...[,cov_<name>...]``."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"row:1 col:pair_id empty file {path!r}")
    header = [h.strip() for h in rows[0]]
    if "pair_id" not in header:
        raise ValidationError("row:1 col:pair_id missing column")
    id_col = header.index("pair_id")
    out_cols = {h[4:]: i for i, h in enumerate(header) if h.startswith("out_")}
    cov_cols = {h[4:]: i for i, h in enumerate(header) if h.startswith("cov_")}
    if not out_cols:
        raise ValidationError("row:1 col:out_ no outcome columns (out_<label>)")
    ids = []
    outs = {k: [] for k in out_cols}
    covs = {k: [] for k in cov_cols}
    for r, row in enumerate(rows[1:], start=2):
        ids.append(row[id_col].strip())
        for name, c in out_cols.items():
            try:
                outs[name].append(float(row[c]))
            except ValueError:
                raise ValidationError(f"row:{r} col:out_{name} not a number: {row[c]!r}") from None
        for name, c in cov_cols.items():
            try:
                covs[name].append(float(row[c]))
            except ValueError:
                raise ValidationError(f"row:{r} col:cov_{name} not a number: {row[c]!r}") from None
    labels = tuple(out_cols)
    matrix = np.column_stack([outs[k] for k in labels])
    return MultiOutcomeSample(pair_ids=tuple(ids), outcome_labels=labels,
                              outcomes=matrix,
                              covariates={k: np.array(v) for k, v in covs.items()})


@dataclass(frozen=True)
class OutcomeSelection:
    """Result of planning-sample outcome selection."""

    outcome: str
    analysis: PairSample
    scores: dict  # label -> standardized signed-rank score on the planning sample
    ranking: tuple  # labels sorted best first (ties by label order)
    split: object


def _standardized_signed_rank(diffs):
    """z-score of the signed-rank statistic; -inf for an all-zero column."""
    nz = diffs[diffs != 0.0]
    if nz.size == 0:
        return -np.inf
    q = rankdata(np.abs(nz))
    t_stat = np.sum(q[nz > 0])
    mu = q.sum() / 2.0
    sigma = np.sqrt(np.sum(q * q) / 4.0)
    return float((t_stat - mu) / sigma)


def select_outcome_split(sample, fraction=1 / 3, seed=0):
    """Choose the outcome most associated with treatment on a planning sample.

    Scores every outcome on the random planning sample with the
    standardized signed-rank statistic, picks the argmax (ties broken by
    label order), and returns that outcome's differences restricted to the
    analysis sample.  The ranking of all outcomes is exposed so callers can
    carry several forward.
    """
    planning_ids, analysis_ids = _split_ids(sample.pair_ids, fraction, seed)
    pos = {p: i for i, p in enumerate(sample.pair_ids)}
    plan_rows = np.array([pos[p] for p in planning_ids])
    scores = {}
    for j, label in enumerate(sample.outcome_labels):
        scores[label] = _standardized_signed_rank(sample.outcomes[plan_rows, j])
    if all(s == -np.inf for s in scores.values()):
        raise ValidationError("degenerate planning sample: every outcome is all zeros")
    ranking = tuple(sorted(scores, key=lambda lb: (-scores[lb], sample.outcome_labels.index(lb))))
    best = ranking[0]
    analysis = sample.outcome(best).restrict(analysis_ids)
    from .pairs import SampleSplit

    split = SampleSplit(planning_ids=planning_ids, analysis_ids=analysis_ids,
                        fraction=float(fraction), seed=int(seed))
    return OutcomeSelection(outcome=best, analysis=analysis, scores=scores,
                            ranking=ranking, split=split)


@dataclass(frozen=True)
class TreeParams:
    """Stopping rules for the regression tree.

    A node splits only if it has at least ``min_split`` pairs and is above
    ``max_depth``; children below ``min_leaf`` pairs are not allowed; a
    split must reduce the total sum of squares by at least ``cp`` times the
    root sum of squares.
    """

    min_split: int = 20
    min_leaf: int = 7
    max_depth: int = 5
    cp: float = 0.01


@dataclass
class TreeNode:
    mean: float
    n: int
    covariate: str = None
    threshold: float = None
    left: "TreeNode" = None
    right: "TreeNode" = None
    pair_ids: tuple = ()  # leaves only

    @property
    def is_leaf(self):
        return self.covariate is None

    def structure(self):
        """Nested tuples capturing splits and leaf membership, for equality."""
        if self.is_leaf:
            return ("leaf", self.n, self.pair_ids)
        return ("split", self.covariate, self.threshold,
                self.left.structure(), self.right.structure())


@dataclass
class RegressionTree:
    """Binary CART-style regression tree on pair covariates."""

    root: TreeNode
    params: TreeParams
    covariate_names: tuple
    response: str  # which ranks were fit: 'abs-rank' or 'signed-rank'

    def leaves(self):
        out = []

        def walk(node):
            if node.is_leaf:
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def leaf_predicates(self):
        """Root-to-leaf predicate strings, left-to-right leaf order."""
        out = []

        def walk(node, conds):
            if node.is_leaf:
                out.append(" & ".join(conds) if conds else "all")
            else:
                walk(node.left, conds + [f"{node.covariate}<{node.threshold!r}"])
                walk(node.right, conds + [f"{node.covariate}>={node.threshold!r}"])

        walk(self.root, [])
        return out

    def assign(self, covariates):
        """Leaf index (left-to-right order) for each row of the covariate dict."""
        n = len(next(iter(covariates.values())))
        idx = np.zeros(n, dtype=int)
        leaf_counter = [0]
        rows = np.arange(n)

        def walk(node, rows):
            if node.is_leaf:
                idx[rows] = leaf_counter[0]
                leaf_counter[0] += 1
                return
            x = np.asarray(covariates[node.covariate], dtype=float)[rows]
            walk(node.left, rows[x < node.threshold])
            walk(node.right, rows[x >= node.threshold])

        walk(self.root, rows)
        return idx

    def to_json(self):
        def enc(node):
            if node.is_leaf:
                return {"mean": node.mean, "n": node.n, "pair_ids": list(node.pair_ids)}
            return {"covariate": node.covariate, "threshold": node.threshold,
                    "mean": node.mean, "n": node.n,
                    "left": enc(node.left), "right": enc(node.right)}

        return json.dumps({
            "response": self.response,
            "covariates": list(self.covariate_names),
            "params": {"min_split": self.params.min_split, "min_leaf": self.params.min_leaf,
                       "max_depth": self.params.max_depth, "cp": self.params.cp},
            "root": enc(self.root),
        }, indent=2)

    @classmethod
    def from_json(cls, text):
        blob = json.loads(text)

        def dec(node):
            if "covariate" in node:
                return TreeNode(mean=node["mean"], n=node["n"],
                                covariate=node["covariate"], threshold=node["threshold"],
                                left=dec(node["left"]), right=dec(node["right"]))
            return TreeNode(mean=node["mean"], n=node["n"],
                            pair_ids=tuple(node["pair_ids"]))

        return cls(root=dec(blob["root"]), params=TreeParams(**blob["params"]),
                   covariate_names=tuple(blob["covariates"]), response=blob["response"])


def _best_split(x_cols, y, rows, min_leaf):
    """Best (covariate index, threshold, sse_reduction) for one node.

    Thresholds sit at midpoints between consecutive distinct values; left
    child takes x < threshold.  Ties go to the lowest covariate index, then
    the lowest threshold.
    """
    yy = y[rows]
    n = len(rows)
    sse_node = float(np.sum((yy - yy.mean()) ** 2))
    best = None
    for ci, col in enumerate(x_cols):
        x = col[rows]
        order = np.argsort(x, kind="stable")
        xs, ys = x[order], yy[order]
        cum = np.cumsum(ys)
        cum2 = np.cumsum(ys * ys)
        total, total2 = cum[-1], cum2[-1]
        k = np.arange(1, n)
        valid = (xs[1:] != xs[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
        if not valid.any():
            continue
        left_sse = cum2[:-1] - cum[:-1] ** 2 / k
        right_n = n - k
        right_sum = total - cum[:-1]
        right_sse = (total2 - cum2[:-1]) - right_sum ** 2 / right_n
        reduction = sse_node - (left_sse + right_sse)
        reduction[~valid] = -np.inf
        pos = int(np.argmax(reduction))
        red = float(reduction[pos])
        thr = float((xs[pos] + xs[pos + 1]) / 2.0)
        if best is None or red > best[2] + 1e-12:
            best = (ci, thr, red)
    return best, sse_node


def _fit_tree(sample, y, params, response):
    names = sample.covariate_names
    if not names:
        raise ValidationError("no covariates declared on the sample")
    if sample.n < 2 * params.min_leaf:
        raise ValidationError(
            f"need at least {2 * params.min_leaf} pairs for min_leaf={params.min_leaf}"
        )
    x_cols = [sample.covariates[c] for c in names]
    root_rows = np.arange(sample.n)
    sse_root = float(np.sum((y - y.mean()) ** 2))

    def build(rows, depth):
        yy = y[rows]
        node = TreeNode(mean=float(yy.mean()), n=len(rows))
        splittable = (
            len(rows) >= params.min_split
            and depth < params.max_depth
            and sse_root > 0
        )
        if splittable:
            best, _ = _best_split(x_cols, y, rows, params.min_leaf)
            if best is not None and best[2] >= params.cp * sse_root:
                ci, thr, _ = best
                x = x_cols[ci][rows]
                node.covariate = names[ci]
                node.threshold = thr
                node.left = build(rows[x < thr], depth + 1)
                node.right = build(rows[x >= thr], depth + 1)
                return node
        node.pair_ids = tuple(sample.pair_ids[i] for i in rows)
        return node

    root = build(root_rows, 0)
    return RegressionTree(root=root, params=params, covariate_names=names,
                          response=response)


def fit_abs_rank_tree(sample, params=TreeParams()):
    """CART on the ranks of the absolute pair differences.

    Because |treated - control| does not change when treatment assignments
    flip within pairs under the sharp null, the fitted tree is identical
    for every sign pattern; its leaves may therefore serve as subgroups
    tested as if chosen beforehand.
    """
    y = rankdata(np.abs(sample.diffs))
    return _fit_tree(sample, y, params, response="abs-rank")


def _fit_signed_rank_tree(sample, params):
    y = rankdata(sample.diffs)
    return _fit_tree(sample, y, params, response="signed-rank")


@dataclass(frozen=True)
class SubgroupPartition:
    """Assignment of pairs to disjoint subgroups."""

    pair_ids: tuple
    labels: tuple  # group label per pair
    provenance: str  # 'a-priori' | 'planning-split' | 'cart-absolute'

    def __post_init__(self):
        ids = tuple(str(i) for i in self.pair_ids)
        labels = tuple(str(s) for s in self.labels)
        object.__setattr__(self, "pair_ids", ids)
        object.__setattr__(self, "labels", labels)
        if len(ids) != len(labels) or len(ids) == 0:
            raise ValidationError("need one group label per pair")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate pair ids in partition")

    @property
    def group_labels(self):
        return tuple(sorted(set(self.labels)))

    def groups(self):
        """label -> tuple of pair ids, label-sorted."""
        out = {g: [] for g in self.group_labels}
        for pid, g in zip(self.pair_ids, self.labels):
            out[g].append(pid)
        return {g: tuple(v) for g, v in out.items()}


def subgroups_from_tree(tree, sample=None):
    """One subgroup per tree leaf, labelled by the root-to-leaf predicate.

    Without a sample the partition covers the pairs the tree was fit to;
    with one, the leaf predicates are applied to its covariates (no refit).
    """
    predicates = tree.leaf_predicates()
    if sample is None:
        ids, labels = [], []
        for pred, leaf in zip(predicates, tree.leaves()):
            ids.extend(leaf.pair_ids)
            labels.extend([pred] * len(leaf.pair_ids))
        return SubgroupPartition(pair_ids=tuple(ids), labels=tuple(labels),
                                 provenance="cart-absolute")
    missing = [c for c in tree.covariate_names if c not in sample.covariates]
    if missing:
        raise ValidationError(f"sample lacks covariates {missing} used by the tree")
    leaf_idx = tree.assign(sample.covariates)
    labels = tuple(predicates[i] for i in leaf_idx)
    return SubgroupPartition(pair_ids=sample.pair_ids, labels=labels,
                             provenance="cart-absolute")


@dataclass(frozen=True)
class SubgroupSplitResult:
    partition: SubgroupPartition
    analysis: PairSample
    tree: RegressionTree
    note: str = ""


def select_subgroups_split(sample, fraction=0.25, seed=0, params=TreeParams()):
    """Choose subgroups on a planning sample, return them on the analysis one.

    Fits the regression tree to the ranks of the *signed* differences of
    the planning sample, then labels every analysis pair by the planning
    tree's leaf predicates (the tree is never refit).  A tree that refuses
    to split yields a single all-pairs group, noted in the result.
    """
    split = split_sample(sample, fraction, seed)
    planning, analysis = apply_split(sample, split)
    tree = _fit_signed_rank_tree(planning, params)
    if tree.root.is_leaf:
        partition = SubgroupPartition(
            pair_ids=analysis.pair_ids, labels=("all",) * analysis.n,
            provenance="planning-split",
        )
        return SubgroupSplitResult(partition=partition, analysis=analysis, tree=tree,
                                   note="planning tree degenerate: single group")
    predicates = tree.leaf_predicates()
    leaf_idx = tree.assign(analysis.covariates)
    used = sorted(set(leaf_idx))
    note = ""
    if len(used) < len(predicates):
        note = "some planning leaves captured no analysis pairs"
    labels = tuple(predicates[i] for i in leaf_idx)
    partition = SubgroupPartition(pair_ids=analysis.pair_ids, labels=labels,
                                  provenance="planning-split")
    return SubgroupSplitResult(partition=partition, analysis=analysis, tree=tree,
                               note=note)


@dataclass(frozen=True)
class SubgroupTestResult:
    combined: object  # TruncatedProductResult
    per_group: dict  # label -> GammaBoundResult


def subgroup_sensitivity_test(sample, partition, gamma, tau=0.2,
                              method="normal-approx", seed=0):
    """Per-subgroup gamma bounds combined by the truncated product test.

    Each subgroup contributes the upper-bound p-value of its signed-rank
    test at ``gamma``; the bounds are combined with truncation point
    ``tau``.  Every group must contain at least one nonzero difference.
    """
    groups = partition.groups()
    sample_ids = set(sample.pair_ids)
    per_group = {}
    for label, ids in groups.items():
        ids = [i for i in ids if i in sample_ids]
        if not ids:
            raise ValidationError(f"group {label!r} has no pairs in the sample")
        sub = sample.restrict(ids)
        if np.all(sub.diffs == 0.0):
            raise ValidationError(f"group {label!r} has no nonzero differences")
        per_group[label] = wilcoxon_gamma_bound(rank_pairs(sub), gamma, method=method)
    labels = sorted(per_group)
    ps = PValueSet(labels=tuple(labels),
                   p_values=np.array([per_group[g].p_upper for g in labels]))
    combined = truncated_product(ps, tau=tau, method="analytic", seed=seed)
    return SubgroupTestResult(combined=combined, per_group=per_group)
