"""Mean-field states, the crossing-rate functional h and its fixed points.

A state is a :class:`~cocsim.ccdf.Ccdf`.  For a class whose sizes are iid
with cdf ``H`` (or a mixture of such laws), the expected number of selected
servers whose workload crosses level ``w`` upward is

    h_j(w) = d_j * q_j(w) * P{Bin(d_j - 1, p_j(w)) <= k_j - 1},

where ``p_j(w)`` (``q_j(w)``) is the probability that a server drawn from
``x`` sits at or below ``w`` and does (does not) finish its component by
``w``.  Fixed points solve ``-x'_w = lam * h(x restricted to [0, w])``.

The grid measure puts the atom ``1 - x_0`` at zero and the increment
``x_{i-1} - x_i`` at the midpoint of cell ``i``.  Survival functions that
are finite sums of exponentials admit an O(1) recursion per grid step; all
other laws use a windowed sum over the cells where ``0 < 1 - H < 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .ccdf import Ccdf, Grid
from .coc_core import apply_job_batch
from .distributions import ClassMix

EPS_TAIL = 1e-4


class NonIIDError(ValueError):
    """Raised when a closed-form h is requested for a non-iid size law."""


class AmbiguousClassification(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# kernel tables


@dataclass(frozen=True)
class Kernel:
    """Per-(class, iid term) survival data on a fixed grid, packed for numba."""

    step: float
    size: int
    weight: np.ndarray  # pi_j * term weight
    d: np.ndarray
    k: np.ndarray
    is_exp: np.ndarray
    exp_start: np.ndarray
    exp_len: np.ndarray
    exp_coef: np.ndarray
    exp_rate: np.ndarray
    g_node: np.ndarray  # (terms, size) survival at l*step (mid-jump value)
    g_mid: np.ndarray  # (terms, size) survival at (l + 1/2)*step
    lo: np.ndarray  # g_mid[l] == 1 for l < lo
    hi: np.ndarray  # g_mid[l] == 0 for l >= hi

    @property
    def dbar(self) -> int:
        return int(self.d.max()) if self.d.size else 0

    def args(self):
        return (self.weight, self.d, self.k, self.is_exp, self.exp_start, self.exp_len,
                self.exp_coef, self.exp_rate, self.g_node, self.g_mid, self.lo, self.hi)


def iid_terms(mix: ClassMix) -> list:
    """``(weight, d, k, marginal)`` for every live iid term of every class."""
    out = []
    for p, c in zip(mix.probabilities, mix.classes):
        if c.is_empty or p == 0:
            continue
        terms = c.sizes.iid_terms()
        if terms is None:
            raise NonIIDError(f"class {c.name or (c.d, c.k)} does not have iid component sizes")
        out.extend((p * w, c.d, c.k, marg) for w, marg in terms if w > 0)
    return out


def build_kernel(mix: ClassMix, step: float, size: int) -> Kernel:
    terms = iid_terms(mix)
    T = len(terms)
    coef, rate, start, length, is_exp = [], [], [], [], []
    g_node = np.zeros((T, size))
    g_mid = np.zeros((T, size))
    lo = np.zeros(T, dtype=np.int64)
    hi = np.zeros(T, dtype=np.int64)
    l = np.arange(size)
    for t, (_, _, _, marg) in enumerate(terms):
        ex = marg.exp_terms()
        start.append(len(coef))
        if ex is not None:
            is_exp.append(True)
            coef.extend(ex[0])
            rate.extend(ex[1])
            length.append(len(ex[0]))
            continue
        is_exp.append(False)
        length.append(0)
        # mean of left and right limits, so the trapezoid rule stays exact
        # when an atom of the size law completes exactly on a grid node
        nodes = l * step
        g_node[t] = 1.0 - 0.5 * (marg.cdf(nodes) + marg.cdf(np.nextafter(nodes, -np.inf)))
        g_mid[t] = 1.0 - marg.cdf((l + 0.5) * step)
        ones = np.flatnonzero(g_mid[t] < 1.0)
        lo[t] = ones[0] if ones.size else size
        live = np.flatnonzero(g_mid[t] > 0.0)
        hi[t] = live[-1] + 1 if live.size else 0
        hi[t] = max(hi[t], lo[t])
    return Kernel(
        step=float(step),
        size=int(size),
        weight=np.array([w for w, *_ in terms], dtype=float),
        d=np.array([d for _, d, _, _ in terms], dtype=np.int64),
        k=np.array([k for _, _, k, _ in terms], dtype=np.int64),
        is_exp=np.array(is_exp, dtype=np.bool_),
        exp_start=np.array(start, dtype=np.int64),
        exp_len=np.array(length, dtype=np.int64),
        exp_coef=np.array(coef, dtype=float),
        exp_rate=np.array(rate, dtype=float),
        g_node=g_node,
        g_mid=g_mid,
        lo=lo,
        hi=hi,
    )


# ---------------------------------------------------------------------------
# numba core


@njit(cache=True)
def _binom_cdf(n, p, kmax):
    """P{Bin(n, p) <= kmax}."""
    if kmax >= n:
        return 1.0
    if kmax < 0:
        return 0.0
    if p <= 0.0:
        return 1.0
    if p >= 1.0:
        return 0.0
    q = 1.0 - p
    term = q ** n
    total = term
    for i in range(1, kmax + 1):
        term *= (n - i + 1) / i * p / q
        total += term
    return total if total < 1.0 else 1.0


@njit(cache=True)
def _q_window(x, m, t, g_node, g_mid, lo, hi):
    """Probability mass at or below cell ``m`` that outlives level ``m*step``."""
    q = (1.0 - x[0]) * g_node[t, m]
    L0 = lo[t]
    L1 = hi[t]
    # cells with g == 1
    a = m - L0
    if a < 0:
        a = 0
    q += x[a] - x[m]
    i_lo = m - L1 + 1
    if i_lo < 1:
        i_lo = 1
    for i in range(i_lo, m - L0 + 1):
        q += (x[i - 1] - x[i]) * g_mid[t, m - i]
    return q


@njit(cache=True)
def _h_from_q(x_m, qs, weight, d, k):
    h = 0.0
    below = 1.0 - x_m
    for t in range(weight.shape[0]):
        q = qs[t]
        if q < 0.0:
            q = 0.0
        if q > below:
            q = below
        p = below - q
        h += weight[t] * d[t] * q * _binom_cdf(d[t] - 1, p, k[t] - 1)
    return h


@njit(cache=True)
def _q_exp(S, t, exp_start, exp_len, exp_coef):
    q = 0.0
    for r in range(exp_start[t], exp_start[t] + exp_len[t]):
        q += exp_coef[r] * S[r]
    return q


@njit(cache=True)
def _h_all(x, step, weight, d, k, is_exp, exp_start, exp_len, exp_coef, exp_rate,
           g_node, g_mid, lo, hi):
    N = x.shape[0]
    T = weight.shape[0]
    R = exp_rate.shape[0]
    decay = np.exp(-exp_rate * step)
    half = np.exp(-exp_rate * 0.5 * step)
    S = np.empty(R)
    for r in range(R):
        S[r] = 1.0 - x[0]
    qs = np.empty(T)
    out = np.empty(N)
    for m in range(N):
        if m > 0:
            inc = x[m - 1] - x[m]
            for r in range(R):
                S[r] = S[r] * decay[r] + inc * half[r]
        for t in range(T):
            if is_exp[t]:
                qs[t] = _q_exp(S, t, exp_start, exp_len, exp_coef)
            else:
                qs[t] = _q_window(x, m, t, g_node, g_mid, lo, hi)
        out[m] = _h_from_q(x[m], qs, weight, d, k)
    return out


@njit(cache=True)
def _march(x0, lam, step, N, weight, d, k, is_exp, exp_start, exp_len, exp_coef, exp_rate,
           g_node, g_mid, lo, hi):
    """Heun march of -x' = lam*h from x_0 = x0.

    Returns ``(x, h, hit_w)`` with ``hit_w = inf`` if x stays positive.
    """
    x = np.zeros(N)
    h = np.zeros(N)
    if x0 <= 0.0:
        return x, h, 0.0
    x[0] = x0
    T = weight.shape[0]
    R = exp_rate.shape[0]
    decay = np.exp(-exp_rate * step)
    half = np.exp(-exp_rate * 0.5 * step)
    S = np.empty(R)
    S_try = np.empty(R)
    for r in range(R):
        S[r] = 1.0 - x0
    qs = np.empty(T)
    for t in range(T):
        qs[t] = _q_exp(S, t, exp_start, exp_len, exp_coef) if is_exp[t] else _q_window(x, 0, t, g_node, g_mid, lo, hi)
    h[0] = _h_from_q(x0, qs, weight, d, k)
    for m in range(N - 1):
        pred = x[m] - step * lam * h[m]
        if pred < 0.0:
            pred = 0.0
        x[m + 1] = pred
        inc = x[m] - pred
        for r in range(R):
            S_try[r] = S[r] * decay[r] + inc * half[r]
        for t in range(T):
            qs[t] = _q_exp(S_try, t, exp_start, exp_len, exp_coef) if is_exp[t] else _q_window(x, m + 1, t, g_node, g_mid, lo, hi)
        h_pred = _h_from_q(pred, qs, weight, d, k)
        nxt = x[m] - 0.5 * step * lam * (h[m] + h_pred)
        if nxt <= 0.0:
            # linear interpolation of the zero crossing
            slope = x[m] - nxt
            hit = m * step + (step * x[m] / slope if slope > 0.0 else step)
            for i in range(m + 1, N):
                x[i] = 0.0
            return x, h, hit
        x[m + 1] = nxt
        inc = x[m] - nxt
        for r in range(R):
            S[r] = S[r] * decay[r] + inc * half[r]
        for t in range(T):
            qs[t] = _q_exp(S, t, exp_start, exp_len, exp_coef) if is_exp[t] else _q_window(x, m + 1, t, g_node, g_mid, lo, hi)
        h[m + 1] = _h_from_q(nxt, qs, weight, d, k)
    return x, h, np.inf


# ---------------------------------------------------------------------------
# h functional


def _grid_index(x: Ccdf, w: float) -> int:
    return x.grid.index(w)


def h_closed_form(x: Ccdf, w: float, mix: ClassMix) -> float:
    """Closed-form h at grid point ``w``; reads only ``x`` on ``[0, w]``."""
    m = _grid_index(x, w)
    v = x.values[: m + 1]
    inc = v[:-1] - v[1:]
    mids = (m - np.arange(1, m + 1) + 0.5) * x.step
    below = 1.0 - v[m]
    total = 0.0
    for weight, d, k, marg in iid_terms(mix):
        q = (1.0 - v[0]) * (1.0 - float(marg.cdf(m * x.step))) + float(inc @ (1.0 - marg.cdf(mids)))
        q = min(max(q, 0.0), below)
        total += weight * d * q * float(_binom_cdf(d - 1, below - q, k - 1))
    return total


def h_all(x: Ccdf, mix: ClassMix, kernel: Kernel | None = None) -> np.ndarray:
    """Closed-form h at every grid point of ``x``."""
    if kernel is None or kernel.size < x.size or kernel.step != x.step:
        kernel = build_kernel(mix, x.step, x.size)
    return _h_all(np.ascontiguousarray(x.values), x.step, *kernel.args())


@dataclass
class SamplePool:
    """Fixed draws reused across grid points (common random numbers)."""

    cls: np.ndarray
    uniforms: np.ndarray  # (samples, dbar) quantile levels for workloads
    sizes: np.ndarray  # (samples, dbar), zero padded

    @classmethod
    def draw(cls, mix: ClassMix, samples: int, rng: np.random.Generator, biased: bool = False) -> "SamplePool":
        probs = mix.size_biased if biased else np.asarray(mix.probabilities)
        ids = rng.choice(len(mix.classes), size=samples, p=probs)
        dmax = max(mix.dbar, 1)
        sizes = np.zeros((samples, dmax))
        for j, c in enumerate(mix.classes):
            rows = np.flatnonzero(ids == j)
            if rows.size and c.d:
                sizes[rows, : c.d] = c.sample(rng, rows.size)
        return cls(ids, rng.random((samples, dmax)), sizes)


def _crossings(x: Ccdf, m: int, mix: ClassMix, pool: SamplePool) -> np.ndarray:
    """Per-sample count of servers crossing level ``m*step``; uses x up to ``m``."""
    w = m * x.step
    v = x.values[: m + 1]
    cdf_below = 1.0 - v
    pos = np.concatenate(([0.0], (np.arange(1, m + 1) - 0.5) * x.step))
    big = 2.0 * (w + 1.0) + 2.0 * float(pool.sizes.max(initial=0.0))
    counts = np.zeros(pool.cls.size)
    for j, c in enumerate(mix.classes):
        rows = np.flatnonzero(pool.cls == j)
        if rows.size == 0 or c.d == 0:
            continue
        u = pool.uniforms[rows, : c.d]
        idx = np.searchsorted(cdf_below, u, side="left")
        W = np.where(idx <= m, pos[np.minimum(idx, m)], big)
        new = apply_job_batch(W, pool.sizes[rows, : c.d], c.k)
        counts[rows] = ((W <= w) & (new > w)).sum(axis=1)
    return counts


def h_monte_carlo(x: Ccdf, w: float, mix: ClassMix, samples: int, rng: np.random.Generator,
                  pool: SamplePool | None = None) -> tuple[float, float]:
    """Monte-Carlo h at grid point ``w``; returns ``(estimate, stderr)``."""
    if samples < 2:
        raise ValueError("samples must be >= 2")
    pool = SamplePool.draw(mix, samples, rng) if pool is None else pool
    counts = _crossings(x, _grid_index(x, w), mix, pool)
    return float(counts.mean()), float(counts.std(ddof=1) / math.sqrt(counts.size))


def sample_jump(x: Ccdf, w: float, mix: ClassMix, rng: np.random.Generator, count: int | None = None):
    """Workload added to a tagged server at level ``w`` with iid-``x`` companions."""
    n = 1 if count is None else count
    probs = mix.size_biased
    ids = rng.choice(len(mix.classes), size=n, p=probs)
    out = np.zeros(n)
    for j, c in enumerate(mix.classes):
        rows = np.flatnonzero(ids == j)
        if rows.size == 0 or c.d == 0:
            continue
        xi = c.sample(rng, rows.size)
        comp = x.sample(rng, (rows.size, c.d - 1))
        comp = np.where(np.isfinite(comp), comp, 1e300)
        W = np.concatenate((np.full((rows.size, 1), float(w)), comp), axis=1)
        new = apply_job_batch(W, xi, c.k)
        out[rows] = new[:, 0] - w
    return float(out[0]) if count is None else out


# ---------------------------------------------------------------------------
# marching the fixed-point equation


@dataclass(frozen=True)
class Trajectory:
    x: Ccdf
    h: np.ndarray
    hit: float

    @property
    def hits(self) -> bool:
        return math.isfinite(self.hit)


def _march_monte_carlo(x0, lam, grid: Grid, mix, pool: SamplePool) -> Trajectory:
    N = grid.size
    x = np.zeros(N)
    h = np.zeros(N)
    if x0 <= 0:
        return Trajectory(Ccdf(grid.step, x), h, 0.0)
    x[0] = x0
    step = grid.step

    def h_at(m):
        return float(_crossings(Ccdf(step, x[: m + 1]), m, mix, pool).mean())

    h[0] = h_at(0)
    for m in range(N - 1):
        x[m + 1] = max(x[m] - step * lam * h[m], 0.0)
        nxt = x[m] - 0.5 * step * lam * (h[m] + h_at(m + 1))
        if nxt <= 0:
            slope = x[m] - nxt
            hit = m * step + (step * x[m] / slope if slope > 0 else step)
            x[m + 1:] = 0.0
            return Trajectory(Ccdf(step, x), h, hit)
        x[m + 1] = nxt
        h[m + 1] = h_at(m + 1)
    return Trajectory(Ccdf(step, x), h, math.inf)


def integrate_fde(x0: float, lam: float, mix: ClassMix, grid: Grid, h_mode: str = "closed_form",
                  samples: int = 4000, rng: np.random.Generator | None = None,
                  kernel: Kernel | None = None, pool: SamplePool | None = None) -> Trajectory:
    """Forward-march the fixed-point equation from ``x_0 = x0``.

    The march stops at the first zero of ``x`` (the frame hit), which is
    located by linear interpolation; ``hit`` is ``inf`` otherwise.
    """
    if not (0.0 <= x0 <= 1.0):
        raise ValueError(f"x0 must be in [0, 1], got {x0}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if h_mode == "monte_carlo":
        if pool is None:
            rng = np.random.default_rng(0) if rng is None else rng
            pool = SamplePool.draw(mix, samples, rng)
        return _march_monte_carlo(x0, lam, grid, mix, pool)
    if h_mode != "closed_form":
        raise ValueError(f"unknown h_mode {h_mode!r}")
    if kernel is None:
        kernel = build_kernel(mix, grid.step, grid.size)
    x, h, hit = _march(float(x0), float(lam), grid.step, grid.size, *kernel.args())
    return Trajectory(Ccdf(grid.step, x), h, float(hit))


def fde_residual(x: Ccdf, lam: float, mix: ClassMix, h: np.ndarray | None = None, hit: float = math.inf) -> float:
    """Sup over cells before the frame hit of the trapezoid defect of the equation."""
    h = h_all(x, mix) if h is None else h
    v = x.values
    cells = x.size - 1
    if math.isfinite(hit):
        cells = min(cells, int(math.floor(hit / x.step + 1e-9)))
    if cells <= 0:
        return 0.0
    defect = (v[1:cells + 1] - v[:cells]) / x.step + lam * 0.5 * (h[:cells] + h[1:cells + 1])
    return float(np.max(np.abs(defect)))


# ---------------------------------------------------------------------------
# fixed points


@dataclass(frozen=True)
class FixedPointResult:
    x: Ccdf
    rho: float
    lam: float
    frame: float  # c, or inf for the infinite frame
    residual: float
    iterations: int
    bracket_width: float
    hit: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def finite_frame(self) -> bool:
        return math.isfinite(self.frame)

    def header(self) -> dict:
        return {
            "verdict": "proper",
            "lambda": self.lam,
            "rho": self.rho,
            "frame": self.frame if self.finite_frame else "infinite",
            "residual": self.residual,
            "step": self.x.step,
            "wmax": self.x.wmax,
            "diagnostics": {"iterations": self.iterations, "bracket_width": self.bracket_width,
                            "hit": self.hit if math.isfinite(self.hit) else None, **self.diagnostics},
        }

    def export(self, csv_path, json_path) -> None:
        self.x.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.header(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class Supercritical:
    lam: float
    x0_low: float
    iterations: int
    wmax: float

    def header(self) -> dict:
        return {"verdict": "supercritical", "lambda": self.lam, "frame": "infinite",
                "diagnostics": {"x0_low": self.x0_low, "iterations": self.iterations, "wmax": self.wmax}}


def default_grid(mix: ClassMix, target_rho: float = 0.5, step: float | None = None) -> Grid:
    mean = max(mix.mean_size, 1e-9)
    step = mean / 200.0 if step is None else step
    rho = min(max(target_rho, 0.0), 0.99)
    return Grid(step, 40.0 * mean / (1.0 - rho))


def _empty_result(grid: Grid, lam: float, frame: float) -> FixedPointResult:
    return FixedPointResult(Ccdf.empty(grid.step, grid.size), 0.0, lam, frame, 0.0, 0, 0.0, 0.0)


def solve_fp_finite_frame(c: float, lam: float, mix: ClassMix, grid: Grid, tol: float = 1e-10,
                          max_iter: int = 200) -> FixedPointResult:
    """Unique fixed point with frame ``[0, c]``: bisect ``x0`` until the march hits zero at ``c``."""
    if not (0 <= c <= grid.wmax):
        raise ValueError(f"frame c={c} must lie in [0, {grid.wmax}]")
    if c == 0 or lam == 0:
        return _empty_result(grid, lam, c)
    kernel = build_kernel(mix, grid.step, grid.size)
    lo, hi = 0.0, 1.0
    it = 0
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        x, _, hit = _march(mid, float(lam), grid.step, grid.size, *kernel.args())
        if hit <= c:
            lo = mid
        else:
            hi = mid
        it += 1
    x, h, hit = _march(lo, float(lam), grid.step, grid.size, *kernel.args())
    if not math.isfinite(hit) or abs(hit - c) > 2 * grid.step:
        raise AmbiguousClassification(f"finite-frame shooting ended with hit={hit}, wanted c={c}")
    fp = Ccdf(grid.step, x)
    return FixedPointResult(fp, float(lo), lam, float(c), fde_residual(fp, lam, mix, h, hit), it, hi - lo, hit)


def _classify(traj_x, hit, eps_tail) -> bool:
    """True when the trajectory lies above the proper fixed point."""
    return not math.isfinite(hit) and traj_x[-1] > eps_tail


def solve_fp_infinite(lam: float, mix: ClassMix, grid: Grid | None = None, tol: float = 1e-10,
                      eps_tail: float = EPS_TAIL, max_doublings: int = 6, max_iter: int = 200):
    """Proper fixed point for the infinite frame, or :class:`Supercritical`.

    Bisection on ``x0``: trajectories that hit zero, or stay below
    ``eps_tail`` at the grid end, are low; the rest are high.  When the low
    side reaches ``x0 = 1`` no proper fixed point exists.  The grid is
    doubled while the trajectory is still above ``10 * eps_tail`` beyond
    three quarters of it.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    grid = default_grid(mix, min(lam * mix.mean_degree * mix.mean_size, 0.95)) if grid is None else grid
    if lam == 0:
        return _empty_result(grid, lam, math.inf)
    for doubling in range(max_doublings + 1):
        kernel = build_kernel(mix, grid.step, grid.size)
        lo, hi, it = 0.0, 1.0, 0
        while hi - lo > tol and it < max_iter:
            mid = 0.5 * (lo + hi)
            x, _, hit = _march(mid, float(lam), grid.step, grid.size, *kernel.args())
            if _classify(x, hit, eps_tail):
                hi = mid
            else:
                lo = mid
            it += 1
        if lo >= 1.0 - 1e-6:
            return Supercritical(lam, lo, it, grid.wmax)
        x, h, hit = _march(lo, float(lam), grid.step, grid.size, *kernel.args())
        above = np.flatnonzero(x > 10 * eps_tail)
        reach = (above[-1] + 1) * grid.step if above.size else 0.0
        if reach <= 0.75 * grid.wmax:
            fp = Ccdf(grid.step, x)
            diag = {"wmax_doublings": doubling}
            return FixedPointResult(fp, float(lo), lam, math.inf, fde_residual(fp, lam, mix, h, hit),
                                    it, hi - lo, hit, diag)
        grid = Grid(grid.step, 2 * grid.wmax)
    raise AmbiguousClassification(
        f"lambda={lam}: fixed-point tail still above {10 * eps_tail} after {max_doublings} grid doublings")


@dataclass(frozen=True)
class LambdaBarEstimate:
    estimate: float
    bracket: tuple
    evaluations: list
    ambiguous: list

    def to_dict(self) -> dict:
        return {"method": "mean_field", "estimate": self.estimate, "bracket": list(self.bracket),
                "evaluations": self.evaluations, "ambiguous": self.ambiguous}


def estimate_lambda_bar(mix: ClassMix, grid: Grid | None = None, tol: float = 1e-3,
                        lam_start: float = 1.0, max_lam: float = 1e3,
                        max_doublings: int = 2) -> LambdaBarEstimate:
    """Bisection on lambda between proper and supercritical verdicts.

    Near the threshold the fixed point decays too slowly for any finite
    grid; such ambiguous verdicts are counted as not proper and listed, so
    the estimate errs low by at most the grid's resolution of ``1 - rho``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if grid is None:
        mean = max(mix.mean_size, 1e-9)
        grid = Grid(mean / 50.0, 4000.0 * mean)
    evaluations, ambiguous = [], []

    def proper(lam):
        try:
            res = solve_fp_infinite(lam, mix, grid, tol=1e-9, max_doublings=max_doublings)
        except AmbiguousClassification:
            ambiguous.append(lam)
            evaluations.append({"lambda": lam, "verdict": "ambiguous"})
            return False
        ok = isinstance(res, FixedPointResult)
        evaluations.append({"lambda": lam, "verdict": "proper" if ok else "supercritical",
                            "rho": res.rho if ok else None})
        return ok

    lo, hi = 0.0, lam_start
    while proper(hi):
        lo, hi = hi, 2 * hi
        if hi > max_lam:
            raise AmbiguousClassification(f"no supercritical lambda found below {max_lam}")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if proper(mid):
            lo = mid
        else:
            hi = mid
    return LambdaBarEstimate(0.5 * (lo + hi), (lo, hi), evaluations, ambiguous)


@dataclass(frozen=True)
class RhoRow:
    lam: float
    rho: float | None
    result: object

    @property
    def supercritical(self) -> bool:
        return isinstance(self.result, Supercritical)


def rho_curve(mix: ClassMix, lambdas, grid: Grid | None = None, tol: float = 1e-10) -> list[RhoRow]:
    rows = []
    for lam in lambdas:
        res = solve_fp_infinite(float(lam), mix, grid, tol)
        rows.append(RhoRow(float(lam), res.rho if isinstance(res, FixedPointResult) else None, res))
    return rows


# ---------------------------------------------------------------------------
# transient dynamics


@dataclass(frozen=True)
class MLTrajectory:
    times: np.ndarray
    states: list

    @property
    def final(self) -> Ccdf:
        return self.states[-1]


@njit(cache=True)
def _project(v, pin):
    # clamp to [0, 1], restore monotonicity, pin the frame
    N = v.shape[0]
    for i in range(N):
        if v[i] < 0.0:
            v[i] = 0.0
        if v[i] > 1.0:
            v[i] = 1.0
        if i > 0 and v[i] > v[i - 1]:
            v[i] = v[i - 1]
        if i >= pin:
            v[i] = 0.0


@njit(cache=True)
def _ml_steps(x, steps, dt, lam, step, pin, weight, d, k, is_exp, exp_start, exp_len,
              exp_coef, exp_rate, g_node, g_mid, lo, hi):
    N = x.shape[0]
    r = dt / step
    dep = np.empty(N)
    h_dep = np.empty(N)
    pred = np.empty(N)
    for _ in range(steps):
        h = _h_all(x, step, weight, d, k, is_exp, exp_start, exp_len, exp_coef, exp_rate,
                   g_node, g_mid, lo, hi)
        for i in range(N):
            right = x[i + 1] if i + 1 < N else 0.0
            h_right = h[i + 1] if i + 1 < N else 0.0
            # value and source at the foot of the characteristic
            dep[i] = x[i] + r * (right - x[i])
            h_dep[i] = h[i] + r * (h_right - h[i])
            pred[i] = dep[i] + dt * lam * h_dep[i]
        _project(pred, pin)
        h2 = _h_all(pred, step, weight, d, k, is_exp, exp_start, exp_len, exp_coef, exp_rate,
                    g_node, g_mid, lo, hi)
        for i in range(N):
            x[i] = dep[i] + dt * lam * 0.5 * (h_dep[i] + h2[i])
        _project(x, pin)
    return x


def evolve_ml(x_init: Ccdf, lam: float, mix: ClassMix, T: float, dt: float | None = None,
              frame: float = math.inf, record_every: float | None = None) -> MLTrajectory:
    """Upwind transport march of the mean-field dynamics.

    Each step moves the state one ``dt`` left and adds ``lam * h`` averaged
    along the characteristic (Heun: old state at the foot, predicted state
    at the head), then clamps to ``[0, 1]`` and restores monotonicity.
    A finite ``frame`` pins ``x`` to 0 from ``c`` on.
    """
    step = x_init.step
    dt = step if dt is None else dt
    if dt > step * (1 + 1e-12) or dt <= 0:
        raise ValueError(f"CFL condition needs 0 < dt <= step ({step}), got {dt}")
    if not x_init.is_valid():
        raise ValueError("initial state is not a valid ccdf")
    kernel = build_kernel(mix, step, x_init.size)
    pin = x_init.size if not math.isfinite(frame) else int(math.ceil(frame / step - 1e-9))
    x = np.array(x_init.values, dtype=float)
    if pin < x.size:
        x[pin:] = 0.0
    total = int(round(T / dt))
    every = total if record_every is None else max(1, int(round(record_every / dt)))
    times, states = [0.0], [Ccdf(step, x)]
    done = 0
    while done < total:
        chunk = min(every, total - done)
        x = _ml_steps(x, chunk, dt, float(lam), step, pin, *kernel.args())
        done += chunk
        times.append(done * dt)
        states.append(Ccdf(step, x))
    return MLTrajectory(np.array(times), states)


def relax(x_init: Ccdf, lam: float, mix: ClassMix, frame: float = math.inf, tol: float = 1e-7,
          max_time: float = 1e4, check_every: float = 10.0) -> tuple[Ccdf, float]:
    """Run :func:`evolve_ml` until the sup-norm change per unit time is below ``tol``."""
    x, t = x_init, 0.0
    while t < max_time:
        nxt = evolve_ml(x, lam, mix, check_every, frame=frame).final
        t += check_every
        change = float(np.max(np.abs(nxt.values - x.values))) / check_every
        x = nxt
        if change < tol:
            break
    return x, t


# ---------------------------------------------------------------------------
# consistency checks against the particle picture


@dataclass(frozen=True)
class ConsistencyReport:
    rho: float
    lam_eta: float
    stderr: float
    discrepancy: float

    @property
    def within_3sigma(self) -> bool:
        return self.discrepancy <= 3 * self.stderr + 1e-12

    def to_dict(self) -> dict:
        return {**self.__dict__, "within_3sigma": self.within_3sigma}


def fp_consistency(fp: FixedPointResult, lam: float, mix: ClassMix, samples: int,
                   rng: np.random.Generator) -> ConsistencyReport:
    """Compare the load with ``lam`` times the mean work a job brings to iid-``x`` servers."""
    if lam == 0 or fp.rho == 0:
        return ConsistencyReport(fp.rho, 0.0, 0.0, abs(fp.rho))
    ids = rng.choice(len(mix.classes), size=samples, p=np.asarray(mix.probabilities))
    eta = np.zeros(samples)
    for j, c in enumerate(mix.classes):
        rows = np.flatnonzero(ids == j)
        if rows.size == 0 or c.d == 0:
            continue
        W = fp.x.sample(rng, (rows.size, c.d))
        # mass beyond the grid stands for servers that never finish in time
        W = np.where(np.isfinite(W), W, 1e300)
        xi = c.sample(rng, rows.size)
        if fp.finite_frame:
            new = np.minimum(apply_job_batch(W, xi, c.k), fp.frame)
        else:
            new = apply_job_batch(W, xi, c.k)
        eta[rows] = (new - W).sum(axis=1)
    mean = float(eta.mean())
    se = float(lam * eta.std(ddof=1) / math.sqrt(samples))
    return ConsistencyReport(fp.rho, lam * mean, se, abs(fp.rho - lam * mean))


@njit(cache=True)
def _particle(gaps, comp, sizes, cls, class_d, class_k, step, size, burn):
    occ = np.zeros(size)
    y = 0.0
    t = 0.0
    total = 0.0
    order = np.empty(sizes.shape[1])
    for a in range(gaps.shape[0]):
        tau = gaps[a]
        # occupation of (w, inf) during the drift segment, after burn-in
        start = t
        end = t + tau
        if end > burn:
            if start < burn:
                y -= burn - start
                if y < 0.0:
                    y = 0.0
                tau = end - burn
            total += tau
            l = 0
            while l < size and l * step < y:
                above = y - l * step
                occ[l] += above if above < tau else tau
                l += 1
        y -= tau
        if y < 0.0:
            y = 0.0
        t = end
        j = cls[a]
        d = class_d[j]
        kk = class_k[j]
        # tagged finishing time first, then companions
        own = y + sizes[a, 0]
        for r in range(d):
            f = own if r == 0 else comp[a, r - 1] + sizes[a, r]
            i = r
            while i > 0 and order[i - 1] > f:
                order[i] = order[i - 1]
                i -= 1
            order[i] = f
        t_star = order[kk - 1]
        hold = y if y > t_star else t_star
        y = own if own < hold else hold
    return occ / total if total > 0 else occ


def simulate_tagged_particle(x: Ccdf, lam: float, mix: ClassMix, T: float, rng: np.random.Generator,
                             burn: float | None = None) -> Ccdf:
    """Occupation-measure ccdf of one particle driven by jumps drawn against environment ``x``."""
    alpha = mix.with_lambda(lam).alpha
    if alpha == 0:
        return Ccdf.empty(x.step, x.size)
    burn = T / 20.0 if burn is None else burn
    count = int(rng.poisson(alpha * (T + burn))) + 1
    gaps = rng.exponential(1.0 / alpha, count)
    pool = SamplePool.draw(mix, count, rng, biased=True)
    dmax = max(mix.dbar, 1)
    comp = x.sample(rng, (count, max(dmax - 1, 1)))
    comp = np.where(np.isfinite(comp), comp, 1e300)
    class_d = np.array([c.d for c in mix.classes], dtype=np.int64)
    class_k = np.array([c.k for c in mix.classes], dtype=np.int64)
    occ = _particle(gaps, comp, pool.sizes, pool.cls.astype(np.int64), class_d, class_k,
                    x.step, x.size, float(burn))
    return Ccdf(x.step, occ)


__all__ = [
    "AmbiguousClassification", "FixedPointResult", "Kernel", "LambdaBarEstimate", "MLTrajectory", "NonIIDError",
    "SamplePool", "Supercritical", "Trajectory", "build_kernel", "default_grid",
    "estimate_lambda_bar", "evolve_ml", "fde_residual", "fp_consistency", "h_all", "h_closed_form",
    "h_monte_carlo", "integrate_fde", "relax", "rho_curve", "sample_jump", "simulate_tagged_particle",
    "solve_fp_finite_frame", "solve_fp_infinite",
]
