"""Multiple-testing control and p-value combination.

Implements the familywise procedures (Bonferroni, Holm), false discovery
rate control (Benjamini-Hochberg), the truncated product combination with
its exact null tail, sequential gatekeeping with exclusive partitions, and
the per-subgroup follow-up rule.

The truncated product assumes the combined p-values are independent (e.g.
subgroups partitioning distinct pairs) and is conservative whenever the
inputs are stochastically larger than uniform under the null, as
gamma-bound p-values are.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ValidationError
from .rng import substream

__all__ = [
    "PValueSet",
    "TruncatedProductResult",
    "OrderedTestPlan",
    "NodeDecision",
    "bonferroni",
    "holm",
    "benjamini_hochberg",
    "truncated_product",
    "truncated_product_tail",
    "testing_in_order",
    "subgroup_followup",
]

# Beyond this many p-values the analytic series gets numerically delicate
# and the implementation switches to Monte Carlo (overridable via method=).
ANALYTIC_MAX_K = 50


@dataclass(frozen=True)
class PValueSet:
    """Labelled p-values; labels double as deterministic tie-breakers."""

    labels: tuple
    p_values: np.ndarray

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        ps = np.asarray(self.p_values, dtype=float)
        ps.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "p_values", ps)
        if len(labels) != len(ps):
            raise ValidationError("labels and p_values must have the same length")
        if len(labels) == 0:
            raise ValidationError("need at least one p-value")
        if len(set(labels)) != len(labels):
            raise ValidationError("labels must be unique")
        if not np.all(np.isfinite(ps)) or np.any(ps < 0) or np.any(ps > 1):
            raise ValidationError("p-values must be finite and in [0, 1]")

    @classmethod
    def from_values(cls, values, labels=None):
        values = list(values)
        if labels is None:
            labels = [f"p{i+1}" for i in range(len(values))]
        return cls(labels=tuple(labels), p_values=np.array(values, dtype=float))

    @property
    def k(self):
        return len(self.labels)


def _ordered(ps):
    """Indices sorted by (p, original position): deterministic under ties."""
    return sorted(range(ps.k), key=lambda i: (ps.p_values[i], i))


def _in_label_order(ps, rejected_idx):
    return tuple(ps.labels[i] for i in range(ps.k) if i in rejected_idx)


def bonferroni(ps, alpha=0.05):
    """Reject every hypothesis with p <= alpha / k."""
    cut = alpha / ps.k
    return _in_label_order(ps, {i for i in range(ps.k) if ps.p_values[i] <= cut})


def holm(ps, alpha=0.05):
    """Holm step-down: compare p_(i) to alpha/(k-i+1), stop at first failure."""
    order = _ordered(ps)
    rejected = set()
    for step, i in enumerate(order):
        if ps.p_values[i] <= alpha / (ps.k - step):
            rejected.add(i)
        else:
            break
    return _in_label_order(ps, rejected)


def benjamini_hochberg(ps, alpha=0.05):
    """BH step-up: reject the i smallest where p_(i) <= i*alpha/k holds last."""
    order = _ordered(ps)
    last = -1
    for step, i in enumerate(order):
        if ps.p_values[i] <= (step + 1) * alpha / ps.k:
            last = step
    return _in_label_order(ps, set(order[: last + 1]))


@dataclass(frozen=True)
class TruncatedProductResult:
    """Combined evidence from the truncated product statistic.

    ``w_statistic`` multiplies only the p-values <= tau (it is 1 when all
    exceed tau, in which case combined_p is 1); ``log_w`` carries the same
    value without floating underflow.  tau=1 is Fisher's combination.
    """

    tau: float
    w_statistic: float
    log_w: float
    combined_p: float
    method: str
    k: int
    n_below_tau: int


def truncated_product_tail(w, k, tau):
    """P(W <= w) for k independent uniforms, the exact null tail.

    Valid CDF in w: nondecreasing with value 1 at w=1.  Computed in log
    space with compensated summation over the number of p-values at or
    below tau.
    """
    if not 0.0 < tau <= 1.0:
        raise ValidationError(f"tau must be in (0, 1], got {tau}")
    k = int(k)
    if k < 1:
        raise ValidationError(f"need k >= 1, got {k}")
    if w >= 1.0:
        return 1.0
    if w <= 0.0:
        return 0.0
    log_w = math.log(w)
    log_tau = math.log(tau)
    terms = []
    for m in range(1, k + 1):
        if tau < 1.0:
            log_binom = (
                gammaln(k + 1) - gammaln(m + 1) - gammaln(k - m + 1)
                + (k - m) * math.log1p(-tau)
            )
        elif m < k:
            continue  # (1-tau)^(k-m) = 0 for tau = 1 unless m = k
        else:
            log_binom = 0.0
        if log_w <= m * log_tau:
            # w * sum_{s<m} (m ln tau - ln w)^s / s!
            a = m * log_tau - log_w
            s = np.arange(m)
            with np.errstate(divide="ignore"):
                inner = logsumexp(s * np.log(a) - gammaln(s + 1)) if a > 0 else 0.0
            term = log_w + inner
        else:
            term = m * log_tau
        terms.append(math.exp(log_binom + term))
    return min(1.0, math.fsum(terms))


def truncated_product(ps, tau=0.2, method="auto", mc_draws=100_000, seed=0):
    """Combine p-values by the truncated product test.

    The statistic multiplies the p-values at or below ``tau``; its exact
    null tail for independent uniforms gives the combined p-value, which is
    conservative for inputs stochastically >= uniform.  ``method`` is
    'analytic', 'monte-carlo', or 'auto' (analytic up to k=50).
    """
    if not 0.0 < tau <= 1.0:
        raise ValidationError(f"tau must be in (0, 1], got {tau}")
    if mc_draws < 100_000:
        raise ValidationError(f"mc_draws must be >= 100000, got {mc_draws}")
    pv = ps.p_values
    below = pv <= tau
    n_below = int(below.sum())
    if n_below == 0:
        log_w = 0.0
    elif np.any(pv[below] == 0.0):
        log_w = -np.inf
    else:
        log_w = float(np.sum(np.log(pv[below])))

    if method == "auto":
        method = "analytic" if ps.k <= ANALYTIC_MAX_K else "monte-carlo"
    if method == "analytic":
        if ps.k > ANALYTIC_MAX_K:
            warnings.warn(
                f"analytic series requested for k={ps.k} > {ANALYTIC_MAX_K}; "
                "consider monte-carlo", stacklevel=2,
            )
        if log_w == 0.0:
            combined = 1.0
        elif log_w == -np.inf:
            combined = 0.0
        else:
            combined = truncated_product_tail(math.exp(log_w), ps.k, tau)
    elif method == "monte-carlo":
        combined = _truncated_product_mc(log_w, ps.k, tau, mc_draws, seed)
    else:
        raise ValidationError(f"unknown method {method!r}")
    return TruncatedProductResult(
        tau=float(tau), w_statistic=math.exp(log_w), log_w=log_w,
        combined_p=float(combined), method=method, k=ps.k, n_below_tau=n_below,
    )


def _truncated_product_mc(log_w, k, tau, draws, seed):
    if log_w == 0.0:
        return 1.0
    hits = 0
    chunk = 200_000
    done = 0
    block = 0
    while done < draws:
        b = min(chunk, draws - done)
        u = substream(seed, block).uniform(size=(b, k))
        log_w_draws = np.where(u <= tau, np.log(u), 0.0).sum(axis=1)
        hits += int(np.sum(log_w_draws <= log_w))
        done += b
        block += 1
    return hits / draws


@dataclass(frozen=True)
class OrderedTestPlan:
    """Gatekeeping plan: a sequence of nodes tested in order at full alpha.

    Each node is a tuple of hypothesis labels; a singleton is one
    hypothesis, a longer tuple is a sequentially exclusive partition whose
    members are each tested at full alpha.  Testing stops at the first node
    that fails; a partition node passes the gate only if every member is
    rejected (at most one member can be a true null once the gate is
    reached, which is what keeps the familywise rate at alpha).
    """

    nodes: tuple
    alpha: float = 0.05

    def __post_init__(self):
        nodes = tuple(
            (node,) if isinstance(node, str) else tuple(node) for node in self.nodes
        )
        object.__setattr__(self, "nodes", nodes)
        if not nodes or any(len(n) == 0 for n in nodes):
            raise ValidationError("plan needs at least one non-empty node")
        flat = [h for node in nodes for h in node]
        if len(set(flat)) != len(flat):
            raise ValidationError("a hypothesis may appear in only one node")


@dataclass(frozen=True)
class NodeDecision:
    """Outcome at one node: None means the gate never opened."""

    labels: tuple
    tested: bool
    rejected: dict  # label -> bool, or None when not tested


def testing_in_order(plan, ps):
    """Run the gatekeeping sequence against a set of p-values."""
    lookup = dict(zip(ps.labels, ps.p_values))
    for node in plan.nodes:
        for label in node:
            if label not in lookup:
                raise ValidationError(f"plan references unknown hypothesis {label!r}")
    decisions = []
    gate_open = True
    for node in plan.nodes:
        if not gate_open:
            decisions.append(NodeDecision(labels=node, tested=False,
                                          rejected={h: None for h in node}))
            continue
        rejected = {h: bool(lookup[h] <= plan.alpha) for h in node}
        decisions.append(NodeDecision(labels=node, tested=True, rejected=rejected))
        gate_open = all(rejected.values())
    return decisions


def subgroup_followup(ps, alpha=0.05, k=None):
    """Per-subgroup tests once the global null is rejected.

    Valid only after the combined test rejected the overall null; each of
    the k subgroups is then tested at alpha/(k-1), rejecting on strict
    inequality.
    """
    if k is None:
        k = ps.k
    if k < 2:
        raise ValidationError(f"need k >= 2 subgroups, got {k}")
    if k != ps.k:
        raise ValidationError(f"k={k} does not match {ps.k} p-values")
    cut = alpha / (k - 1)
    return _in_label_order(ps, {i for i in range(ps.k) if ps.p_values[i] < cut})
