"""Declarative Monte Carlo scenario engine for protocol-design studies.

Each scenario is fully determined by a :class:`ScenarioSpec` and its seed;
replicate r of grid point g draws from the substream (seed, scenario_id, g,
r), so outputs are bit-identical for any worker count and chunking.  Power
estimates carry the binomial Monte Carlo standard error sqrt(p(1-p)/reps).

Scenario kinds
--------------
multi-outcome-rct     three ways to pick among many outcomes, no hidden bias
multi-outcome-gamma   the same comparison under a gamma-bound analysis
power-vs-gamma        power of the signed-rank sensitivity analysis across
                      gamma for several sample sizes, with the design
                      sensitivity marked
pvalue-histogram      null behavior of bound p-values vs ordinary p-values
subgroup-hetero       combined test vs truncated-product subgroup test under
                      treatment-effect heterogeneity
iv-adjustment         bias/RMSE of matching on a (near-)instrument vs
                      leaving it alone
"""

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .matching import optimal_pair_match
from .multiplicity import truncated_product_tail
from .rng import substream
from .sensitivity import batch_signed_rank_bound, design_sensitivity_normal

__all__ = [
    "ScenarioSpec",
    "PowerCurve",
    "HistogramResult",
    "IvAdjustmentResult",
    "SubgroupHeteroResult",
    "run_fig1",
    "run_fig2",
    "run_fig3",
    "run_fig4",
    "run_fig8",
    "run_iv_adjustment",
    "run_scenario",
    "write_outputs",
]

KINDS = (
    "multi-outcome-rct",
    "multi-outcome-gamma",
    "power-vs-gamma",
    "pvalue-histogram",
    "subgroup-hetero",
    "iv-adjustment",
)
_SCENARIO_ID = {k: i + 1 for i, k in enumerate(KINDS)}

# Default effect grids: the endpoints are fixed by the designs below, the
# interior points are evenly spaced so the strongest method spans from its
# size to full power.  Grids are recorded in every output's metadata.
FIG1_EFFECTS = tuple(round(x, 4) for x in np.linspace(0.08, 0.29, 8))
FIG2_EFFECTS = tuple(round(x, 4) for x in np.linspace(0.5, 1.1, 8))
FIG3_GAMMAS = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
FIG8_BASE_EFFECT = 0.06875  # per-group average effect; the gamma=3 grid is x8

_CHUNK = 32  # fixed chunk size so chunk composition never depends on threads


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative description of one Monte Carlo scenario."""

    kind: str
    reps: int = 2000
    seed: int = 0
    alpha: float = 0.05
    n_pairs: int = 500
    n_outcomes: int = 100
    gamma: float = None
    effects: tuple = None
    planning_fraction: float = None
    prior_correct: float = 2.0 / 3.0
    sample_sizes: tuple = (200, 2000, 20000)
    gammas: tuple = None
    deltas: tuple = (0.5, 1.0)
    bins: int = 20
    # iv-adjustment data-generating process
    n_subjects: int = 300
    z_to_treat: float = 1.0
    u_to_treat: float = 1.0
    zu_assoc: float = 0.0
    confounding: float = 1.0
    treatment_effect: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown scenario kind {self.kind!r}; choose from {KINDS}")
        if self.reps < 1 or self.n_pairs < 1 or self.n_outcomes < 1:
            raise ValidationError("counts must be positive")
        if self.effects is not None and len(self.effects) == 0:
            raise ValidationError("effect grid must be nonempty")
        for name in ("effects", "sample_sizes", "gammas", "deltas"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(x) for x in val))
        object.__setattr__(self, "sample_sizes", tuple(int(x) for x in self.sample_sizes))

    def resolved(self):
        """Fill kind-dependent defaults (grids, gamma, planning fraction)."""
        out = self
        if self.kind == "multi-outcome-rct":
            out = replace(out,
                          gamma=1.0 if out.gamma is None else out.gamma,
                          effects=FIG1_EFFECTS if out.effects is None else out.effects,
                          planning_fraction=1 / 3 if out.planning_fraction is None else out.planning_fraction)
        elif self.kind == "multi-outcome-gamma":
            out = replace(out,
                          gamma=3.0 if out.gamma is None else out.gamma,
                          effects=FIG2_EFFECTS if out.effects is None else out.effects,
                          planning_fraction=1 / 3 if out.planning_fraction is None else out.planning_fraction)
        elif self.kind == "power-vs-gamma":
            out = replace(out, gammas=FIG3_GAMMAS if out.gammas is None else out.gammas)
        elif self.kind == "pvalue-histogram":
            out = replace(out, gamma=5.0 if out.gamma is None else out.gamma)
        elif self.kind == "subgroup-hetero":
            out = replace(out, gammas=(1.0, 3.0) if out.gamma is None else (float(out.gamma),))
        return out

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PowerCurve:
    """Per-method power estimates over a grid, with MC standard errors."""

    x_name: str
    x: tuple
    methods: dict  # name -> {"power": tuple, "se": tuple}
    reps: int
    spec: ScenarioSpec
    markers: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for name, series in self.methods.items():
            for xv, p, s in zip(self.x, series["power"], series["se"]):
                out.append((xv, name, p, s))
        return out


@dataclass(frozen=True)
class HistogramResult:
    cases: dict  # name -> p-value array
    bin_edges: np.ndarray
    counts: dict  # name -> per-bin counts
    reps: int
    spec: ScenarioSpec

    def rows(self):
        out = []
        for name, c in self.counts.items():
            for lo, hi, cnt in zip(self.bin_edges[:-1], self.bin_edges[1:], c):
                out.append((name, float(lo), float(hi), int(cnt)))
        return out


@dataclass(frozen=True)
class IvAdjustmentResult:
    designs: dict  # name -> {"bias", "rmse", "se_bias", "reps_used"}
    reps: int
    spec: ScenarioSpec

    def rows(self):
        return [
            (name, d["bias"], d["rmse"], d["se_bias"], d["reps_used"])
            for name, d in self.designs.items()
        ]


@dataclass(frozen=True)
class SubgroupHeteroResult:
    curves: dict  # gamma -> PowerCurve
    spec: ScenarioSpec

    def rows(self):
        out = []
        for gamma, curve in self.curves.items():
            for xv, name, p, s in curve.rows():
                out.append((xv, f"{name}[gamma={gamma:g}]", p, s))
        return out


def _se(p, reps):
    return math.sqrt(p * (1.0 - p) / reps)


def _chunks(reps):
    return [(lo, min(lo + _CHUNK, reps)) for lo in range(0, reps, _CHUNK)]


def _map_ordered(fn, bounds_list, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, bounds_list))
    return [fn(b) for b in bounds_list]


def _sum_counts(fn, reps, threads):
    parts = _map_ordered(fn, _chunks(reps), threads)
    return np.sum(np.asarray(parts, dtype=np.int64), axis=0)


# -- fig 1 / fig 2: a-priori vs Bonferroni vs splitting ---------------------

def _outcome_methods_point(spec, sid, gi, effect, threads):
    n, K, alpha, gamma = spec.n_pairs, spec.n_outcomes, spec.alpha, spec.gamma
    n_plan = round(spec.planning_fraction * n)

    def chunk(bounds):
        lo, hi = bounds
        b = hi - lo
        draws = np.empty((b, n, K))
        perms = np.empty((b, n), dtype=int)
        for row, rep in enumerate(range(lo, hi)):
            g = substream(spec.seed, sid, gi, rep)
            draws[row] = g.standard_normal((n, K))
            perms[row] = g.permutation(n)
        draws[:, :, 0] += effect
        pv_full = batch_signed_rank_bound(draws, gamma, axis=1)  # (b, K)
        plan = np.take_along_axis(draws, perms[:, :n_plan, None], axis=1)
        ana = np.take_along_axis(draws, perms[:, n_plan:, None], axis=1)
        pv_plan = batch_signed_rank_bound(plan, 1.0, axis=1)
        choice = np.argmin(pv_plan, axis=1)
        chosen = np.take_along_axis(ana, choice[:, None, None], axis=2)[:, :, 0]
        pv_ana = batch_signed_rank_bound(chosen, gamma, axis=1)
        return np.array([
            np.sum(pv_full[:, 0] <= alpha),          # a-priori, correct pick
            np.sum(pv_full[:, 1] <= alpha),          # a-priori, wrong pick
            np.sum(pv_full[:, 0] <= alpha / K),      # Bonferroni on outcome 1
            np.sum((choice == 0) & (pv_ana <= alpha)),  # splitting detects outcome 1
        ], dtype=np.int64)

    return _sum_counts(chunk, spec.reps, threads)


def _run_outcome_selection(spec, threads):
    spec = spec.resolved()
    sid = _SCENARIO_ID[spec.kind]
    methods = {"a-priori": [], "bonferroni": [], "splitting": []}
    for gi, effect in enumerate(spec.effects):
        c_correct, c_wrong, c_bonf, c_split = _outcome_methods_point(
            spec, sid, gi, effect, threads)
        r = spec.reps
        p_apriori = spec.prior_correct * (c_correct / r) + (1 - spec.prior_correct) * (c_wrong / r)
        methods["a-priori"].append(p_apriori)
        methods["bonferroni"].append(c_bonf / r)
        methods["splitting"].append(c_split / r)
    packed = {
        name: {"power": tuple(vals), "se": tuple(_se(p, spec.reps) for p in vals)}
        for name, vals in methods.items()
    }
    return PowerCurve(x_name="effect_size", x=spec.effects, methods=packed,
                      reps=spec.reps, spec=spec)


def run_fig1(spec, threads=1):
    """Power to detect the affected outcome among many, no hidden bias.

    Compares (i) an a-priori pick that is right with probability
    ``prior_correct``, (ii) Bonferroni over all outcomes, and (iii)
    splitting with a planning sample choosing the outcome by its signed-
    rank score.  The a-priori curve is prior_correct * power(correct pick)
    + (1 - prior_correct) * power(null pick).
    """
    if spec.kind != "multi-outcome-rct":
        raise ValidationError(f"expected kind multi-outcome-rct, got {spec.kind!r}")
    return _run_outcome_selection(spec, threads)


def run_fig2(spec, threads=1):
    """Same three methods, analyzed with the gamma bound (default gamma 3)."""
    if spec.kind != "multi-outcome-gamma":
        raise ValidationError(f"expected kind multi-outcome-gamma, got {spec.kind!r}")
    return _run_outcome_selection(spec, threads)


# -- fig 3: power of the sensitivity analysis across gamma ------------------

def run_fig3(spec, threads=1):
    """Power across a gamma grid for several sample sizes and effect sizes.

    Ranks are computed once per replicate and reused across the gamma grid.
    ``markers`` holds the design sensitivity per effect size (power tends
    to 1 below it and 0 above it as n grows).
    """
    if spec.kind != "power-vs-gamma":
        raise ValidationError(f"expected kind power-vs-gamma, got {spec.kind!r}")
    spec = spec.resolved()
    sid = _SCENARIO_ID[spec.kind]
    gammas = np.asarray(spec.gammas)
    methods = {}
    for di, delta in enumerate(spec.deltas):
        for ni, n in enumerate(spec.sample_sizes):
            gi = di * len(spec.sample_sizes) + ni

            def chunk(bounds, n=n, delta=delta, gi=gi):
                lo, hi = bounds
                draws = np.stack([
                    substream(spec.seed, sid, gi, rep).standard_normal(n) + delta
                    for rep in range(lo, hi)
                ])
                hits = np.zeros(len(gammas), dtype=np.int64)
                for k, g in enumerate(gammas):
                    pv = batch_signed_rank_bound(draws, g, axis=1)
                    hits[k] = np.sum(pv <= spec.alpha)
                return hits

            counts = _sum_counts(chunk, spec.reps, threads)
            powers = counts / spec.reps
            methods[f"delta={delta:g},n={n}"] = {
                "power": tuple(powers),
                "se": tuple(_se(p, spec.reps) for p in powers),
            }
    markers = {f"delta={d:g}": design_sensitivity_normal(d).gamma_tilde
               for d in spec.deltas}
    return PowerCurve(x_name="gamma", x=tuple(float(g) for g in gammas),
                      methods=methods, reps=spec.reps, spec=spec, markers=markers)


# -- fig 4: p-value histograms under bias bound vs ordinary test ------------

def run_fig4(spec, threads=1):
    """Null-behavior histograms of p-values.

    Case 'gamma-bound' draws an effect (first delta) and applies the bound
    at ``gamma`` (default 5): its p-values pile up near 1.  Case 'ordinary'
    draws no effect and tests at gamma=1: exactly uniform.
    """
    if spec.kind != "pvalue-histogram":
        raise ValidationError(f"expected kind pvalue-histogram, got {spec.kind!r}")
    spec = spec.resolved()
    sid = _SCENARIO_ID[spec.kind]
    gamma = 5.0 if spec.gamma is None else spec.gamma
    delta = spec.deltas[0]
    cases = {}
    for ci, (name, eff, g) in enumerate([
        ("gamma-bound", delta, gamma),
        ("ordinary", 0.0, 1.0),
    ]):
        def chunk(bounds, eff=eff, g=g, ci=ci):
            lo, hi = bounds
            draws = np.stack([
                substream(spec.seed, sid, ci, rep).standard_normal(spec.n_pairs) + eff
                for rep in range(lo, hi)
            ])
            return batch_signed_rank_bound(draws, g, axis=1)

        parts = _map_ordered(chunk, _chunks(spec.reps), threads)
        cases[name] = np.concatenate(parts)
    edges = np.linspace(0.0, 1.0, spec.bins + 1)
    counts = {name: np.histogram(pv, bins=edges)[0] for name, pv in cases.items()}
    return HistogramResult(cases=cases, bin_edges=edges, counts=counts,
                           reps=spec.reps, spec=spec)


# -- fig 8: combined test vs truncated-product subgroup test ----------------

def run_fig8(spec, threads=1):
    """Two-subgroup heterogeneity sweep holding the average effect fixed.

    Each grid point gives the first ``n_pairs`` pairs effect delta1 and the
    second ``n_pairs`` pairs delta2 = 2*avg - delta1.  The combined test
    uses all pairs together; the truncated-product test combines the two
    per-group bounds at truncation ``tau=0.2``.  The gamma=1 grid uses the
    base average effect, the gamma=3 grid scales it by 8.
    """
    if spec.kind != "subgroup-hetero":
        raise ValidationError(f"expected kind subgroup-hetero, got {spec.kind!r}")
    spec = spec.resolved()
    sid = _SCENARIO_ID[spec.kind]
    tau = 0.2
    curves = {}
    for branch, gamma in enumerate(spec.gammas):
        avg = FIG8_BASE_EFFECT * (8.0 if gamma > 1 else 1.0)
        if spec.effects is not None:
            delta1_grid = spec.effects
        else:
            delta1_grid = tuple(round(float(x), 6) for x in np.linspace(avg, 2 * avg, 8))
        methods = {"combined": [], "truncated-product": []}
        for gi, d1 in enumerate(delta1_grid):
            d2 = 2 * avg - d1

            def chunk(bounds, d1=d1, d2=d2, gamma=gamma, gi=gi, branch=branch):
                lo, hi = bounds
                n = spec.n_pairs
                draws = np.stack([
                    substream(spec.seed, sid, branch * 1000 + gi, rep).standard_normal(2 * n)
                    for rep in range(lo, hi)
                ])
                draws[:, :n] += d1
                draws[:, n:] += d2
                p1 = batch_signed_rank_bound(draws[:, :n], gamma, axis=1)
                p2 = batch_signed_rank_bound(draws[:, n:], gamma, axis=1)
                p_all = batch_signed_rank_bound(draws, gamma, axis=1)
                combined_hits = int(np.sum(p_all <= spec.alpha))
                trunc_hits = 0
                for a, b in zip(p1, p2):
                    log_w = (math.log(a) if a <= tau else 0.0) + (math.log(b) if b <= tau else 0.0)
                    if log_w == 0.0:
                        continue
                    if truncated_product_tail(math.exp(log_w), 2, tau) <= spec.alpha:
                        trunc_hits += 1
                return np.array([combined_hits, trunc_hits], dtype=np.int64)

            c_comb, c_trunc = _sum_counts(chunk, spec.reps, threads)
            methods["combined"].append(c_comb / spec.reps)
            methods["truncated-product"].append(c_trunc / spec.reps)
        packed = {
            name: {"power": tuple(vals), "se": tuple(_se(p, spec.reps) for p in vals)}
            for name, vals in methods.items()
        }
        curves[float(gamma)] = PowerCurve(
            x_name="delta1", x=delta1_grid, methods=packed, reps=spec.reps, spec=spec,
            markers={"delta2": tuple(round(2 * avg - d, 6) for d in delta1_grid)},
        )
    return SubgroupHeteroResult(curves=curves, spec=spec)


# -- instrumental-variable adjustment study ---------------------------------

def _expit(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def run_iv_adjustment(spec, threads=1):
    """Bias and RMSE of the matched-pair estimator with and without the IV.

    Linear-Gaussian process with a logistic treatment: Z is the candidate
    instrument, U an unmeasured confounder with corr(Z, U) = ``zu_assoc``
    (0 makes Z a valid IV), treatment odds rise with both, and the outcome
    adds ``confounding`` * U to the true ``treatment_effect``.  The
    match-on-z design pairs each treated subject to a control by optimal
    matching on Z; ignore-z pairs them to a random control.  Matching on a
    valid IV concentrates the remaining treatment variation on U and so
    amplifies confounding bias; with a strong Z-U association Z acts as a
    proxy for U and matching on it helps instead.
    """
    if spec.kind != "iv-adjustment":
        raise ValidationError(f"expected kind iv-adjustment, got {spec.kind!r}")
    spec = spec.resolved()
    sid = _SCENARIO_ID[spec.kind]
    n = spec.n_subjects

    def chunk(bounds):
        lo, hi = bounds
        est_m, est_i = [], []
        for rep in range(lo, hi):
            g = substream(spec.seed, sid, 0, rep)
            z = g.standard_normal(n)
            u = spec.zu_assoc * z + math.sqrt(1.0 - spec.zu_assoc ** 2) * g.standard_normal(n)
            t = g.uniform(size=n) < _expit(-0.4 + spec.z_to_treat * z + spec.u_to_treat * u)
            y = spec.treatment_effect * t + spec.confounding * u + g.standard_normal(n)
            ti = np.flatnonzero(t)
            ci = np.flatnonzero(~t)
            if len(ti) < 2 or len(ci) < len(ti):
                est_m.append(np.nan)
                est_i.append(np.nan)
                continue
            d = np.abs(z[ti][:, None] - z[ci][None, :])
            match = optimal_pair_match(d)
            rows = np.array([int(a) for a, _ in match.pairs])
            cols = np.array([int(b) for _, b in match.pairs])
            est_m.append(float(np.mean(y[ti[rows]] - y[ci[cols]])))
            pick = g.permutation(len(ci))[: len(ti)]
            est_i.append(float(np.mean(y[ti] - y[ci[pick]])))
        return np.array(est_m), np.array(est_i)

    parts = _map_ordered(chunk, _chunks(spec.reps), threads)
    est_m = np.concatenate([p[0] for p in parts])
    est_i = np.concatenate([p[1] for p in parts])
    designs = {}
    for name, est in (("match-on-z", est_m), ("ignore-z", est_i)):
        e = est[np.isfinite(est)] - spec.treatment_effect
        designs[name] = {
            "bias": float(e.mean()),
            "rmse": float(np.sqrt(np.mean(e ** 2))),
            "se_bias": float(e.std(ddof=1) / np.sqrt(len(e))),
            "reps_used": int(len(e)),
        }
    return IvAdjustmentResult(designs=designs, reps=spec.reps, spec=spec)


_RUNNERS = {
    "multi-outcome-rct": run_fig1,
    "multi-outcome-gamma": run_fig2,
    "power-vs-gamma": run_fig3,
    "pvalue-histogram": run_fig4,
    "subgroup-hetero": run_fig8,
    "iv-adjustment": run_iv_adjustment,
}


def run_scenario(spec, threads=1):
    """Dispatch a spec to its scenario runner."""
    return _RUNNERS[spec.kind](spec, threads=threads)


def write_outputs(result, outdir, svg=False):
    """Write the scenario artifacts: a CSV, meta.json, optionally plot.svg.

    Power curves land in curve.csv (x, method, power, se); histograms in
    hist.csv (case, bin_lo, bin_hi, count); the IV study in table.csv
    (design, bias, rmse, se_bias, reps_used).
    """
    os.makedirs(outdir, exist_ok=True)
    spec = result.spec
    written = []

    def dump_csv(name, header, rows):
        path = os.path.join(outdir, name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([x if isinstance(x, str) else repr(x) if isinstance(x, float) else x
                            for x in row])
        written.append(path)

    if isinstance(result, (PowerCurve, SubgroupHeteroResult)):
        dump_csv("curve.csv", ["x", "method", "power", "se"], result.rows())
    elif isinstance(result, HistogramResult):
        dump_csv("hist.csv", ["case", "bin_lo", "bin_hi", "count"], result.rows())
    elif isinstance(result, IvAdjustmentResult):
        dump_csv("table.csv", ["design", "bias", "rmse", "se_bias", "reps_used"],
                 result.rows())
    else:
        raise ValidationError(f"unknown result type {type(result).__name__}")

    from . import __version__

    meta = {
        "spec": spec.resolved().to_dict(),
        "seed": spec.seed,
        "versions": {
            "obskit": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
        },
    }
    meta_path = os.path.join(outdir, "meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    written.append(meta_path)

    if svg:
        from .svg import curve_svg, histogram_svg

        def dump_svg(name, text):
            path = os.path.join(outdir, name)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
            written.append(path)

        if isinstance(result, PowerCurve):
            dump_svg("plot.svg", curve_svg(result.x, result.methods,
                                           x_label=result.x_name))
        elif isinstance(result, SubgroupHeteroResult):
            for gamma, curve in result.curves.items():
                dump_svg(f"plot_gamma{gamma:g}.svg",
                         curve_svg(curve.x, curve.methods, x_label=curve.x_name))
        elif isinstance(result, HistogramResult):
            dump_svg("plot.svg", histogram_svg(result.bin_edges, result.counts))
    return written
