"""Cancel-on-completion placement of one job on its selection set.

With FCFS servers, a component placed on a server with workload ``W`` would
finish at ``W + xi``.  The job is done at ``T``, the k-th smallest of those
finishing times, and everything still unfinished is removed then.  So a
server ends up busy until ``min(W + xi, max(W, T))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .distributions import JobClass


@dataclass(frozen=True)
class PlacementResult:
    new_workloads: np.ndarray
    added: np.ndarray
    completion_level: float


def apply_job(workloads, sizes, k: int) -> PlacementResult:
    W = np.asarray(workloads, dtype=float)
    xi = np.asarray(sizes, dtype=float)
    if W.ndim != 1 or W.shape != xi.shape:
        raise ValueError(f"workloads and sizes must be equal-length vectors, got {W.shape} and {xi.shape}")
    d = W.size
    if not (1 <= k <= d):
        raise ValueError(f"k must be in [1, {d}], got {k}")
    if np.any(xi < 0):
        raise ValueError("component sizes must be non-negative")
    finish = W + xi
    t_star = float(np.partition(finish, k - 1)[k - 1])
    new = np.minimum(finish, np.maximum(W, t_star))
    return PlacementResult(new, new - W, t_star)


def apply_job_batch(W: np.ndarray, xi: np.ndarray, k: int) -> np.ndarray:
    """Row-wise ``apply_job`` for ``(count, d)`` arrays; returns new workloads."""
    finish = W + xi
    t_star = np.partition(finish, k - 1, axis=1)[:, k - 1:k]
    return np.minimum(finish, np.maximum(W, t_star))


@njit(cache=True, nogil=True)
def place_inplace(W, xi, k, scratch):
    """Numba twin of :func:`apply_job`; overwrites ``W`` and returns sum of additions."""
    d = W.shape[0]
    # insertion sort of finishing times; d is small
    for i in range(d):
        f = W[i] + xi[i]
        j = i
        while j > 0 and scratch[j - 1] > f:
            scratch[j] = scratch[j - 1]
            j -= 1
        scratch[j] = f
    t_star = scratch[k - 1]
    total = 0.0
    for i in range(d):
        f = W[i] + xi[i]
        hold = W[i] if W[i] > t_star else t_star
        new = f if f < hold else hold
        total += new - W[i]
        W[i] = new
    return total


def truncate_workloads(W, c: float) -> np.ndarray:
    if c < 0:
        raise ValueError("frame cap must be non-negative")
    return np.minimum(np.asarray(W, dtype=float), c)


def _offsets_from_differentials(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 1 or D.size == 0:
        raise ValueError("D must be a non-empty vector")
    if D[0] != 0.0:
        raise ValueError("D[0] must be 0 (workload differentials start at the lowest server)")
    if np.any(D < 0) or not np.all(np.isfinite(D)):
        raise ValueError("workload differentials must be finite and non-negative")
    return np.cumsum(D)


def eta_samples(job_class: JobClass, D, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Total workload added by ``samples`` independent class jobs on offsets ``cumsum(D)``."""
    Z = _offsets_from_differentials(D)
    if Z.size != job_class.d:
        raise ValueError(f"D has length {Z.size}, class has d={job_class.d}")
    xi = job_class.sample(rng, samples)
    W = np.broadcast_to(Z, xi.shape)
    new = apply_job_batch(W, xi, job_class.k)
    return (new - W).sum(axis=1)


def sample_eta(job_class: JobClass, D, rng: np.random.Generator) -> float:
    return float(eta_samples(job_class, D, 1, rng)[0])


def mc_eta_mean(job_class: JobClass, D, samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo mean of the added workload and its standard error."""
    if samples < 2:
        raise ValueError("samples must be >= 2")
    eta = eta_samples(job_class, D, samples, rng)
    return float(eta.mean()), float(eta.std(ddof=1) / math.sqrt(samples))
