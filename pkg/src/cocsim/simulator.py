"""Exact n-server simulation with cancel-on-completion placement.

Between arrivals every server drains at rate one, so workloads are stored
lazily with the time of their last update and only materialized when a job
selects the server or a snapshot is taken.  All randomness is drawn in
fixed-size chunks from one ``numpy`` generator; inter-arrival gaps are unit
exponentials divided by ``lambda * n``, so runs that differ only in lambda
see the same job sequence on a rescaled clock.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .ccdf import Ccdf, Grid, sample_ccdf
from .coc_core import place_inplace
from .distributions import ClassMix

MODES = {"infinite": 0, "truncated": 1, "free": 2}


@dataclass(frozen=True)
class Frame:
    kind: str = "infinite"
    cap: float = math.inf

    def __post_init__(self):
        if self.kind not in MODES:
            raise ValueError(f"frame must be one of {sorted(MODES)}, got {self.kind!r}")
        if self.kind == "truncated" and not (0 <= self.cap < math.inf):
            raise ValueError("a truncated frame needs a finite cap >= 0")

    @classmethod
    def infinite(cls) -> "Frame":
        return cls("infinite")

    @classmethod
    def truncated(cls, c: float) -> "Frame":
        return cls("truncated", float(c))

    @classmethod
    def free(cls) -> "Frame":
        return cls("free")

    @property
    def code(self) -> int:
        return MODES[self.kind]

    def to_dict(self):
        return {"kind": self.kind, "cap": self.cap if self.kind == "truncated" else None}


@dataclass(frozen=True)
class SimConfig:
    n: int
    mix: ClassMix
    horizon: float
    frame: Frame = field(default_factory=Frame)
    warmup: float | None = None
    sample_interval: float = 1.0
    tagged: int = 0
    seed: int = 0
    ccdf_step: float = 0.05
    ccdf_max: float | None = None
    workload_ceiling: float | None = None
    chunk: int = 1 << 15

    def __post_init__(self):
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.horizon / 10.0)
        if not (0 <= self.warmup < self.horizon):
            raise ValueError("need 0 <= warmup < horizon")
        if not (self.sample_interval > 0):
            raise ValueError("sample_interval must be positive")
        if self.n < self.mix.dbar:
            raise ValueError(f"n={self.n} is smaller than the largest class degree {self.mix.dbar}")
        if not (0 <= self.tagged <= self.n):
            raise ValueError("tagged must be in [0, n]")
        if self.ccdf_max is None:
            object.__setattr__(self, "ccdf_max", max(50.0 * max(self.mix.mean_size, 1e-9), 10 * self.ccdf_step))

    @property
    def grid(self) -> Grid:
        return Grid(self.ccdf_step, self.ccdf_max)

    @property
    def snapshot_count(self) -> int:
        return int(math.floor((self.horizon - self.warmup) / self.sample_interval + 1e-9))


@dataclass
class SimState:
    """Server workloads stored with the time they were last materialized."""

    stored: np.ndarray
    stamps: np.ndarray
    clock: float = 0.0
    frame: Frame = field(default_factory=Frame)

    @classmethod
    def empty(cls, n: int, frame: Frame | None = None) -> "SimState":
        return cls(np.zeros(n), np.zeros(n), 0.0, frame or Frame())

    def workloads(self, t: float | None = None) -> np.ndarray:
        t = self.clock if t is None else t
        w = self.stored - (t - self.stamps)
        return w if self.frame.kind == "free" else np.maximum(w, 0.0)


@dataclass
class SimMetrics:
    n: int
    lam: float
    frame: Frame
    load: float
    load_stderr: float
    empirical_ccdf: Ccdf
    phi1: float
    phi1_stderr: float
    mean_workload: float
    drift: float | None
    drift_stderr: float | None
    mean_added_per_job: float
    added_stderr: float
    arrivals: int
    snapshots: int
    max_snapshot_workload: float
    exceeded_ceiling: bool
    tagged_epochs: np.ndarray
    tagged_samples: np.ndarray
    series_load: np.ndarray = field(repr=False)
    series_mean: np.ndarray = field(repr=False)
    series_phi1: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "lambda": self.lam,
            "frame": self.frame.to_dict(),
            "load": self.load,
            "load_stderr": self.load_stderr,
            "phi1": self.phi1,
            "phi1_stderr": self.phi1_stderr,
            "mean_workload": self.mean_workload,
            "drift": self.drift,
            "drift_stderr": self.drift_stderr,
            "mean_added_per_job": self.mean_added_per_job,
            "added_stderr": self.added_stderr,
            "arrivals": self.arrivals,
            "snapshots": self.snapshots,
            "max_snapshot_workload": self.max_snapshot_workload,
            "exceeded_ceiling": self.exceeded_ceiling,
            "tagged": int(self.tagged_samples.shape[1]) if self.tagged_samples.ndim == 2 else 0,
            "ccdf_step": self.empirical_ccdf.step,
            "empirical_ccdf": [float(v) for v in self.empirical_ccdf.values],
        }


def batch_stderr(series: np.ndarray, batches: int = 20) -> float:
    """Standard error of the mean of a correlated series by batch means."""
    series = np.asarray(series, dtype=float)
    b = min(batches, series.size)
    if b < 2:
        return math.nan
    usable = series[: (series.size // b) * b].reshape(b, -1).mean(axis=1)
    return float(usable.std(ddof=1) / math.sqrt(b))


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True, nogil=True)
def _snapshot(ts, s, stored, stamps, mode, step, ccdf_counts, snap_load, snap_mean,
              snap_phi1, snap_max, tagged, scratch):
    n = stored.shape[0]
    total = 0.0
    lo = np.inf
    hi = -np.inf
    busy = 0
    for i in range(n):
        e = stored[i] - (ts - stamps[i])
        if mode != 2 and e < 0.0:
            e = 0.0
        scratch[i] = e
        total += e
        if e > 0.0:
            busy += 1
        if e < lo:
            lo = e
        if e > hi:
            hi = e
    mean = total / n
    ref = lo if mode == 2 else 0.0
    gmax = ccdf_counts.shape[0] - 1
    dev = 0.0
    for i in range(n):
        e = scratch[i]
        dev += abs(e - mean)
        r = e - ref
        g = 0
        if r > 0.0:
            g = int(math.ceil(r / step))
            if g > gmax:
                g = gmax
        ccdf_counts[g] += 1.0
    snap_load[s] = busy / n
    snap_mean[s] = mean
    snap_phi1[s] = dev / n
    snap_max[s] = hi
    m = tagged.shape[1]
    for i in range(m):
        tagged[s, i] = scratch[i] - mean if mode == 2 else scratch[i]


@njit(cache=True, nogil=True)
def _advance(times, cls, sizes, unif, class_d, class_k, stored, stamps, perm, mode, cap,
             warmup, horizon, interval, s_next, ccdf_step, ccdf_counts, snap_load, snap_mean,
             snap_phi1, snap_max, tagged, added_bin, arrivals_bin, ceiling, scratch):
    """Process one chunk of arrivals.

    Returns ``(s_next, status)`` with status 0 = chunk consumed, 1 = horizon
    reached, 2 = workload ceiling exceeded.
    """
    n = stored.shape[0]
    S = snap_load.shape[0]
    dmax = sizes.shape[1]
    W = np.empty(dmax)
    buf = np.empty(dmax)
    for a in range(times.shape[0]):
        t = times[a]
        while s_next < S and warmup + (s_next + 1) * interval <= t:
            _snapshot(warmup + (s_next + 1) * interval, s_next, stored, stamps, mode, ccdf_step,
                      ccdf_counts, snap_load, snap_mean, snap_phi1, snap_max, tagged, scratch)
            if ceiling > 0.0 and mode != 2 and snap_mean[s_next] > ceiling:
                return s_next + 1, 2
            s_next += 1
        if t > horizon:
            return s_next, 1
        j = cls[a]
        d = class_d[j]
        if d == 0:
            continue
        # partial Fisher-Yates on a persistent permutation
        for r in range(d):
            pick = r + int(unif[a, r] * (n - r))
            if pick >= n:
                pick = n - 1
            tmp = perm[r]
            perm[r] = perm[pick]
            perm[pick] = tmp
        for r in range(d):
            srv = perm[r]
            e = stored[srv] - (t - stamps[srv])
            if mode != 2 and e < 0.0:
                e = 0.0
            W[r] = e
        total = place_inplace(W[:d], sizes[a, :d], class_k[j], buf)
        for r in range(d):
            if mode == 1 and W[r] > cap:
                total -= W[r] - cap
                W[r] = cap
            srv = perm[r]
            stored[srv] = W[r]
            stamps[srv] = t
        if t >= warmup:
            b = s_next if s_next < S else S - 1
            if b >= 0:
                added_bin[b] += total
                arrivals_bin[b] += 1.0
    return s_next, 0


@njit(cache=True, nogil=True)
def _flush(stored, stamps, mode, warmup, horizon, interval, s_next, ccdf_step, ccdf_counts,
           snap_load, snap_mean, snap_phi1, snap_max, tagged, scratch):
    S = snap_load.shape[0]
    while s_next < S and warmup + (s_next + 1) * interval <= horizon + 1e-12:
        _snapshot(warmup + (s_next + 1) * interval, s_next, stored, stamps, mode, ccdf_step,
                  ccdf_counts, snap_load, snap_mean, snap_phi1, snap_max, tagged, scratch)
        s_next += 1
    return s_next


# ---------------------------------------------------------------------------
# driver


def _draw_chunk(rng, mix: ClassMix, K: int, dmax: int, probs, lam_n: float, t0: float):
    gaps = rng.exponential(1.0, K)
    cls = rng.choice(len(mix.classes), size=K, p=probs).astype(np.int64)
    sizes = np.zeros((K, dmax))
    for j, c in enumerate(mix.classes):
        if c.d == 0:
            continue
        rows = np.flatnonzero(cls == j)
        if rows.size:
            sizes[rows, : c.d] = c.sample(rng, rows.size)
    unif = rng.random((K, dmax))
    times = t0 + np.cumsum(gaps) / lam_n if lam_n > 0 else np.full(K, np.inf)
    return times, cls, sizes, unif


def run_simulation(config: SimConfig, rng: np.random.Generator | None = None) -> SimMetrics:
    mix, n = config.mix, config.n
    rng = np.random.default_rng(np.random.SeedSequence(config.seed)) if rng is None else rng
    mode = config.frame.code
    cap = config.frame.cap if config.frame.kind == "truncated" else math.inf
    S = config.snapshot_count
    m = config.tagged
    grid = config.grid
    dmax = max(mix.dbar, 1)

    stored = np.zeros(n)
    stamps = np.zeros(n)
    perm = np.arange(n, dtype=np.int64)
    scratch = np.empty(n)
    ccdf_counts = np.zeros(grid.size + 1)
    snap_load = np.zeros(S)
    snap_mean = np.zeros(S)
    snap_phi1 = np.zeros(S)
    snap_max = np.zeros(S)
    tagged = np.zeros((S, m))
    added_bin = np.zeros(max(S, 1))
    arrivals_bin = np.zeros(max(S, 1))
    class_d = np.array([c.d for c in mix.classes], dtype=np.int64)
    class_k = np.array([c.k for c in mix.classes], dtype=np.int64)
    probs = np.asarray(mix.probabilities)
    ceiling = float(config.workload_ceiling or 0.0)
    lam_n = mix.lam * n

    s_next, status, t_last, arrivals = 0, 0, 0.0, 0
    if lam_n > 0:
        while status == 0:
            times, cls, sizes, unif = _draw_chunk(rng, mix, config.chunk, dmax, probs, lam_n, t_last)
            t_last = times[-1]
            s_next, status = _advance(times, cls, sizes, unif, class_d, class_k, stored, stamps, perm,
                                      mode, cap, config.warmup, config.horizon, config.sample_interval,
                                      s_next, grid.step, ccdf_counts, snap_load, snap_mean, snap_phi1,
                                      snap_max, tagged, added_bin, arrivals_bin, ceiling, scratch)
            arrivals += int(np.searchsorted(times, config.horizon, side="right"))
    if status != 2:
        s_next = _flush(stored, stamps, mode, config.warmup, config.horizon, config.sample_interval,
                        s_next, grid.step, ccdf_counts, snap_load, snap_mean, snap_phi1, snap_max,
                        tagged, scratch)
    taken = s_next
    return _collect(config, taken, status == 2, arrivals, ccdf_counts, snap_load[:taken],
                    snap_mean[:taken], snap_phi1[:taken], snap_max[:taken], tagged[:taken],
                    added_bin[:max(taken, 1)], arrivals_bin[:max(taken, 1)])


def _collect(config, taken, exceeded, arrivals, ccdf_counts, load_s, mean_s, phi1_s, max_s,
             tagged, added_bin, arrivals_bin) -> SimMetrics:
    n, grid = config.n, config.grid
    if taken > 0:
        above = ccdf_counts[::-1].cumsum()[::-1]
        x = above[1:] / (n * taken)
    else:
        x = np.zeros(grid.size)
    x = np.minimum(x, 1.0)
    epochs = config.warmup + config.sample_interval * np.arange(1, taken + 1)
    drift = drift_se = None
    if config.frame.kind == "free" and taken >= 3:
        slope = np.polyfit(epochs, mean_s, 1)[0]
        drift = float(slope)
        drift_se = batch_stderr(np.diff(mean_s) / config.sample_interval)
    jobs = arrivals_bin.sum()
    per_job = float(added_bin.sum() / jobs) if jobs > 0 else 0.0
    # stderr of a ratio estimator over time bins
    if jobs > 0 and added_bin.size >= 2:
        resid = added_bin - per_job * arrivals_bin
        added_se = batch_stderr(resid) * added_bin.size / jobs
    else:
        added_se = math.nan
    mean_or_nan = lambda s: float(s.mean()) if s.size else math.nan
    return SimMetrics(
        n=n,
        lam=config.mix.lam,
        frame=config.frame,
        load=float(x[0]) if taken else math.nan,
        load_stderr=batch_stderr(load_s),
        empirical_ccdf=Ccdf(grid.step, x),
        phi1=mean_or_nan(phi1_s),
        phi1_stderr=batch_stderr(phi1_s),
        mean_workload=mean_or_nan(mean_s),
        drift=drift,
        drift_stderr=drift_se,
        mean_added_per_job=per_job,
        added_stderr=added_se,
        arrivals=arrivals,
        snapshots=taken,
        max_snapshot_workload=float(max_s.max()) if taken else 0.0,
        exceeded_ceiling=bool(exceeded),
        tagged_epochs=epochs,
        tagged_samples=tagged,
        series_load=load_s,
        series_mean=mean_s,
        series_phi1=phi1_s,
    )


def replication_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds derived from ``seed`` (stable across runs)."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(2, dtype=np.uint64)[0]) for c in children]


def run_replications(config: SimConfig, count: int, workers: int = 1) -> list[SimMetrics]:
    configs = [replace(config, seed=s) for s in replication_seeds(config.seed, count)]
    if workers <= 1:
        return [run_simulation(c) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_simulation, configs))


def phi_ell(workloads, ell: int = 1) -> float:
    """Empirical ell-th absolute central moment."""
    if ell < 1:
        raise ValueError("ell must be >= 1")
    W = np.asarray(workloads, dtype=float)
    return float(np.mean(np.abs(W - W.mean()) ** ell))


# ---------------------------------------------------------------------------
# critical arrival rate at fixed n


class BracketError(RuntimeError):
    pass


@dataclass(frozen=True)
class CriticalEstimate:
    method: str
    n: int
    estimate: float
    bracket: tuple
    ci: tuple
    evaluations: list

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "estimate": self.estimate,
            "bracket": list(self.bracket),
            "ci": list(self.ci),
            "evaluations": self.evaluations,
        }


def estimate_critical_lambda_n(n: int, mix: ClassMix, method: str = "free_drift", tolerance: float = 0.005,
                               seed: int = 0, lam_range: tuple = (0.05, 4.0), horizon: float = 5000.0,
                               warmup: float | None = None, sample_interval: float = 1.0,
                               eps_load: float = 0.01, ceiling: float | None = None) -> CriticalEstimate:
    """Bisection for the stability boundary of the n-server system.

    ``free_drift`` brackets the zero of the free-system mean-workload drift;
    ``load_bisection`` brackets where the regulated load reaches ``1 - eps_load``
    (or the mean workload passes ``ceiling``).  Every evaluation reuses the
    same seed, so the job sequence is common to all lambda values.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if method not in ("free_drift", "load_bisection"):
        raise ValueError(f"unknown method {method!r}")
    warmup = horizon / 10.0 if warmup is None else warmup
    if ceiling is None:
        ceiling = 50.0 * mix.dbar * max(mix.mean_size, 1e-9) / eps_load
    frame = Frame.free() if method == "free_drift" else Frame.infinite()
    evaluations = []

    def evaluate(lam):
        cfg = SimConfig(n=n, mix=mix.with_lambda(lam), horizon=horizon, frame=frame, warmup=warmup,
                        sample_interval=sample_interval, seed=seed,
                        workload_ceiling=None if method == "free_drift" else ceiling)
        met = run_simulation(cfg)
        if method == "free_drift":
            score, se = met.drift, met.drift_stderr
            unstable = score > 0
        else:
            score, se = met.load, met.load_stderr
            unstable = met.exceeded_ceiling or score >= 1.0 - eps_load
        evaluations.append({"lambda": lam, "score": score, "stderr": se, "unstable": bool(unstable)})
        return unstable, score, se

    lo, hi = lam_range
    if evaluate(lo)[0] or not evaluate(hi)[0]:
        raise BracketError(f"lambda range {lam_range} does not bracket the stability boundary")
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if evaluate(mid)[0]:
            hi = mid
        else:
            lo = mid
    est = 0.5 * (lo + hi)
    ci = (lo, hi)
    if method == "free_drift":
        # drift = -1 + a * lambda; propagate the drift stderr at the estimate
        _, score, se = evaluate(est)
        a = (score + 1.0) / est
        if a > 0 and se is not None and math.isfinite(se):
            half = 2.0 * se / est / a ** 2
            ci = (min(lo, 1.0 / a - half), max(hi, 1.0 / a + half))
    return CriticalEstimate(method, n, est, (lo, hi), ci, evaluations)
