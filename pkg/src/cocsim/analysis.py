"""Distances between workload distributions and verdicts built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ccdf import Ccdf
from .coc_core import _offsets_from_differentials, apply_job_batch
from .distributions import ClassMix, JobClass, marginal_hazard


# ---------------------------------------------------------------------------
# distances


def common_grid(x: Ccdf, y: Ccdf) -> tuple[np.ndarray, np.ndarray, float]:
    """Both ccdfs on one grid: the finer step, out to the longer support."""
    if math.isclose(x.step, y.step, rel_tol=1e-12) and x.size == y.size:
        return np.asarray(x.values), np.asarray(y.values), x.step
    step = min(x.step, y.step)
    size = int(round(max(x.wmax, y.wmax) / step)) + 1
    return x.resample(step, size).values, y.resample(step, size).values, step


def _levy_gap(a: np.ndarray, b: np.ndarray, s: int, tail_a: float, tail_b: float) -> float:
    """Smallest vertical slack making ``b`` shifted by ``s`` cells sandwich ``a``."""
    n = a.size
    if s >= n:
        right = np.full(n, tail_b)
    else:
        right = np.concatenate((b[s:], np.full(s, tail_b)))
    left = np.concatenate((np.ones(min(s, n)), b[: n - s])) if s < n else np.ones(n)
    gap = max(float(np.max(right - a)), float(np.max(a - left)), 0.0)
    return gap


def levy_distance(x: Ccdf, y: Ccdf) -> float:
    """Lévy distance, with horizontal shifts restricted to whole grid cells.

    For shift ``s`` cells the vertical slack ``e_s`` is non-increasing in
    ``s``, so the distance ``min_s max(s*step, e_s)`` is found by bisection.
    """
    a, b, step = common_grid(x, y)
    ta, tb = x.tail, y.tail

    def slack(s):
        return max(_levy_gap(a, b, s, ta, tb), _levy_gap(b, a, s, tb, ta))

    lo, hi = 0, a.size
    # first shift where the horizontal part dominates
    while lo < hi:
        mid = (lo + hi) // 2
        if mid * step >= slack(mid):
            hi = mid
        else:
            lo = mid + 1
    best = lo * step if lo < a.size else math.inf
    if lo > 0:
        best = min(best, slack(lo - 1))
    best = min(best, max(a.size * step, slack(a.size)))
    return float(best)


def sup_distance(x: Ccdf, y: Ccdf) -> float:
    a, b, _ = common_grid(x, y)
    return float(np.max(np.abs(a - b)))


# ---------------------------------------------------------------------------
# independence of tagged servers


@dataclass(frozen=True)
class IndependenceReport:
    pairwise_correlations: np.ndarray
    ks_product: float
    sample_count: int
    degenerate: tuple = ()

    @property
    def max_abs_correlation(self) -> float:
        c = self.pairwise_correlations
        off = c[~np.eye(c.shape[0], dtype=bool)]
        return float(np.max(np.abs(off))) if off.size else 0.0

    def to_dict(self) -> dict:
        return {
            "pairwise_correlations": self.pairwise_correlations.tolist(),
            "max_abs_correlation": self.max_abs_correlation,
            "ks_product": self.ks_product,
            "sample_count": self.sample_count,
            "degenerate": list(self.degenerate),
        }


def ks_product(u: np.ndarray, v: np.ndarray, max_points: int = 512) -> float:
    """Sup distance between the joint empirical cdf and the product of marginals.

    Evaluated on a grid of at most ``max_points`` sample quantiles per axis.
    """
    levels = np.linspace(0.0, 1.0, max_points)
    gu = np.unique(np.quantile(u, levels))
    gv = np.unique(np.quantile(v, levels))
    iu = np.searchsorted(gu, u, side="left")
    iv = np.searchsorted(gv, v, side="left")
    counts = np.zeros((gu.size, gv.size))
    np.add.at(counts, (iu, iv), 1.0)
    joint = counts.cumsum(axis=0).cumsum(axis=1) / u.size
    fu = joint[:, -1:]
    fv = joint[-1:, :]
    return float(np.max(np.abs(joint - fu * fv)))


def independence_report(tagged_samples) -> IndependenceReport:
    S = np.asarray(tagged_samples, dtype=float)
    if S.ndim != 2 or S.shape[1] < 2:
        raise ValueError("need an array of shape (samples, m) with m >= 2")
    if S.shape[0] < 30:
        raise ValueError(f"need at least 30 samples, got {S.shape[0]}")
    m = S.shape[1]
    sd = S.std(axis=0)
    degenerate = tuple(int(i) for i in np.flatnonzero(sd == 0))
    corr = np.eye(m)
    live = sd > 0
    if live.sum() >= 2:
        c = np.corrcoef(S[:, live], rowvar=False)
        idx = np.flatnonzero(live)
        corr[np.ix_(idx, idx)] = np.clip(c, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return IndependenceReport(corr, ks_product(S[:, 0], S[:, 1]), S.shape[0], degenerate)


# ---------------------------------------------------------------------------
# D-monotonicity of the expected added work


DIRECTIONS = ("non_increasing", "non_decreasing", "constant", "violated", "inconclusive")


@dataclass(frozen=True)
class DMonotonicityVerdict:
    class_name: str
    direction: str
    witness: dict
    estimates: list = field(default_factory=list)

    @property
    def sup_estimate(self) -> dict:
        return max(self.estimates, key=lambda e: e["mean"])

    def to_dict(self) -> dict:
        return {"class": self.class_name, "direction": self.direction, "witness": self.witness,
                "estimates": self.estimates}


def _check_chain(chain) -> list:
    out = [np.asarray(D, dtype=float) for D in chain]
    for D in out:
        _offsets_from_differentials(D)
    for a, b in zip(out, out[1:]):
        if a.shape != b.shape or np.any(b < a):
            raise ValueError(f"chain is not ordered: {a.tolist()} then {b.tolist()}")
    return out


def dmono_scan(job_class: JobClass, chains, samples: int, rng: np.random.Generator,
               sigmas: float = 4.0, resolution: float | None = None) -> DMonotonicityVerdict:
    """Sign pattern of ``E eta(D)`` along ordered chains of differential vectors.

    Each chain reuses one batch of size draws for all of its offsets, so
    consecutive estimates are compared through paired differences.  A step
    counts as a change only beyond ``sigmas`` standard errors; if nothing
    changes but the error bars are wider than ``resolution``, the verdict
    is ``inconclusive``.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")
    if chains and np.ndim(chains[0]) == 1:
        chains = [chains]
    chains = [_check_chain(c) for c in chains]
    if resolution is None:
        resolution = 0.02 * job_class.d * max(job_class.mean_size, 1e-12)
    k = job_class.k
    estimates, steps = [], []
    for ci, chain in enumerate(chains):
        xi = job_class.sample(rng, samples)
        etas = []
        for D in chain:
            Z = np.cumsum(D)
            W = np.broadcast_to(Z, xi.shape)
            eta = (apply_job_batch(W, xi, k) - W).sum(axis=1)
            etas.append(eta)
            estimates.append({"chain": ci, "D": D.tolist(), "mean": float(eta.mean()),
                              "stderr": float(eta.std(ddof=1) / math.sqrt(samples))})
        for (D0, e0), (D1, e1) in zip(zip(chain, etas), zip(chain[1:], etas[1:])):
            diff = e1 - e0
            mean = float(diff.mean())
            se = float(diff.std(ddof=1) / math.sqrt(samples))
            sign = 0
            if mean > sigmas * se and mean > 1e-12:
                sign = 1
            elif mean < -sigmas * se and mean < -1e-12:
                sign = -1
            steps.append({"chain": ci, "from": D0.tolist(), "to": D1.tolist(), "diff": mean,
                          "stderr": se, "sign": sign})
    ups = [s for s in steps if s["sign"] > 0]
    downs = [s for s in steps if s["sign"] < 0]
    if ups and downs:
        direction = "violated"
        witness = {"increase": ups[0], "decrease": downs[0]}
    elif downs:
        direction = "non_increasing"
        witness = min(downs, key=lambda s: s["diff"])
    elif ups:
        direction = "non_decreasing"
        witness = max(ups, key=lambda s: s["diff"])
    else:
        wide = max((sigmas * s["stderr"] for s in steps), default=0.0)
        direction = "inconclusive" if wide > resolution else "constant"
        witness = max(steps, key=lambda s: abs(s["diff"])) if steps else {}
    return DMonotonicityVerdict(job_class.name, direction, witness, estimates)


# ---------------------------------------------------------------------------
# inherent subcriticality


@dataclass(frozen=True)
class SubcriticalityReport:
    rho_bar: float
    per_class: list
    subcritical: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def inherent_subcriticality(mix: ClassMix, bound_mode="generic") -> SubcriticalityReport:
    """Upper bound on the work rate per server from per-class work bounds.

    ``generic`` bounds a job's work by ``d * E xi``; ``dhr_tight`` uses
    ``k * E xi``, which is only valid for decreasing or constant hazard.
    """
    modes = [bound_mode] * len(mix.classes) if isinstance(bound_mode, str) else list(bound_mode)
    if len(modes) != len(mix.classes):
        raise ValueError("one bound mode per class is required")
    rows, total = [], 0.0
    for p, c, mode in zip(mix.probabilities, mix.classes, modes):
        if mode == "generic":
            s_bar = c.d * c.mean_size
        elif mode == "dhr_tight":
            if not c.is_empty and not marginal_hazard(c.sizes).is_dhr:
                raise ValueError(f"dhr_tight bound needs a DHR or constant-hazard class, {c.name!r} is not")
            s_bar = c.k * c.mean_size
        else:
            raise ValueError(f"unknown bound mode {mode!r}")
        rows.append({"class": c.name, "mode": mode, "s_bar": s_bar})
        total += p * s_bar
    rho_bar = mix.lam * total
    return SubcriticalityReport(rho_bar, rows, rho_bar < 1.0)


# ---------------------------------------------------------------------------
# simulation against the mean-field prediction


def compare_sim_to_fp(metrics, fp) -> dict:
    """Distances between a simulated ccdf and a fixed point, plus the load gap.

    ``metrics`` needs ``empirical_ccdf`` and ``load``; ``fp`` needs ``x`` and ``rho``.
    """
    sim, ref = metrics.empirical_ccdf, fp.x
    return {
        "levy": levy_distance(sim, ref),
        "sup": sup_distance(sim, ref),
        "load_discrepancy": abs(float(metrics.load) - float(fp.rho)),
        "sim_load": float(metrics.load),
        "fp_rho": float(fp.rho),
    }

