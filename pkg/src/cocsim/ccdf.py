"""Grid-sampled complementary distribution functions.

A :class:`Ccdf` holds ``x_w = P{W > w}`` at ``w = 0, step, ..., N*step``.
Viewed as a measure it has an atom ``1 - x_0`` at zero, mass
``x_{i-1} - x_i`` at each cell midpoint and ``tail`` mass at infinity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Grid:
    step: float
    wmax: float

    def __post_init__(self):
        if not (self.step > 0):
            raise ValueError("grid step must be positive")
        if not (self.wmax >= 0):
            raise ValueError("grid max must be non-negative")

    @property
    def size(self) -> int:
        return int(round(self.wmax / self.step)) + 1

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.size) * self.step

    def index(self, w: float) -> int:
        """Grid index of ``w`` (must lie on the grid up to rounding)."""
        i = int(round(w / self.step))
        if abs(i * self.step - w) > 1e-9 * max(1.0, abs(w)) or not (0 <= i < self.size):
            raise ValueError(f"w={w} is not a grid point of {self}")
        return i


class Ccdf:
    __slots__ = ("step", "values", "tail")

    def __init__(self, step: float, values, tail: float = 0.0):
        if not (step > 0):
            raise ValueError("step must be positive")
        v = np.array(values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("values must be a non-empty vector")
        v.setflags(write=False)
        object.__setattr__(self, "step", float(step))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "tail", float(tail))

    def __setattr__(self, name, value):
        raise AttributeError("Ccdf is immutable")

    def __repr__(self) -> str:
        return f"Ccdf(step={self.step}, n={self.values.size}, x0={self.values[0]:.6g}, tail={self.tail:.3g})"

    # -- constructors -------------------------------------------------------

    @classmethod
    def empty(cls, step: float, size: int) -> "Ccdf":
        """The empty state: every server idle."""
        return cls(step, np.zeros(size))

    @classmethod
    def full(cls, step: float, size: int, c: float) -> "Ccdf":
        """Maximal state with frame ``c``: one below ``c``, zero from ``c`` on."""
        w = np.arange(size) * step
        return cls(step, np.where(w < c - 1e-12, 1.0, 0.0))

    @classmethod
    def from_function(cls, f, grid: Grid, tail: float = 0.0) -> "Ccdf":
        return cls(grid.step, np.asarray(f(grid.points), dtype=float), tail)

    # -- basic properties ---------------------------------------------------

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def wmax(self) -> float:
        return (self.size - 1) * self.step

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.size) * self.step

    @property
    def grid(self) -> Grid:
        return Grid(self.step, self.wmax)

    @property
    def load(self) -> float:
        return float(self.values[0])

    def is_valid(self, atol: float = 1e-12) -> bool:
        v = self.values
        return bool(np.all(v >= -atol) and np.all(v <= 1 + atol) and np.all(np.diff(v) <= atol))

    def at(self, w) -> np.ndarray:
        """Linear interpolation between grid nodes; ``tail`` beyond the grid."""
        w = np.asarray(w, dtype=float)
        out = np.interp(w, self.points, self.values, left=self.values[0], right=self.tail)
        return np.where(w < 0, 1.0, out)

    # -- measure view -------------------------------------------------------

    def masses(self) -> tuple[np.ndarray, np.ndarray]:
        """Atom positions and masses (zero, cell midpoints); tail excluded."""
        v = self.values
        pos = np.concatenate(([0.0], (np.arange(1, self.size) - 0.5) * self.step))
        mass = np.concatenate(([1.0 - v[0]], v[:-1] - v[1:]))
        return pos, mass

    def mean(self) -> float:
        pos, mass = self.masses()
        if self.tail > 0 or self.values[-1] > 0:
            return math.inf if self.tail > 0 else float(pos @ mass + self.values[-1] * self.wmax)
        return float(pos @ mass)

    def sample(self, rng: np.random.Generator, size, uniforms=None) -> np.ndarray:
        """Inverse-CDF draws from the measure; mass beyond the grid maps to ``inf``."""
        u = rng.random(size) if uniforms is None else np.asarray(uniforms)
        return self.quantile(u)

    def quantile(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        pos, mass = self.masses()
        cdf = np.cumsum(mass)
        idx = np.searchsorted(cdf, u, side="left")
        if self.values[-1] <= 0 and self.tail <= 0:
            # rounding can leave cdf[-1] a hair below 1; no mass is really beyond the grid
            live = np.flatnonzero(mass > 0)
            idx = np.minimum(idx, live[-1] if live.size else 0)
        out = np.full(u.shape, np.inf)
        ok = idx < pos.size
        out[ok] = pos[idx[ok]]
        return out

    # -- conversions --------------------------------------------------------

    def resample(self, step: float, size: int) -> "Ccdf":
        w = np.arange(size) * step
        return Ccdf(step, self.at(w), self.tail)

    def with_values(self, values) -> "Ccdf":
        return Ccdf(self.step, values, self.tail)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["w", "x_w"])
            for w, x in zip(self.points, self.values):
                writer.writerow([repr(float(w)), repr(float(x))])

    @classmethod
    def from_csv(cls, path) -> "Ccdf":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [c.strip() for c in rows[0]] != ["w", "x_w"]:
            raise ValueError(f"{path}: expected header 'w,x_w'")
        try:
            data = np.array([[float(a), float(b)] for a, b in rows[1:]], dtype=float)
        except ValueError as exc:
            raise ValueError(f"{path}: malformed row ({exc})") from None
        if data.shape[0] < 2:
            raise ValueError(f"{path}: need at least two grid rows")
        steps = np.diff(data[:, 0])
        step = float(steps[0])
        if step <= 0 or not np.allclose(steps, step, rtol=1e-6, atol=1e-12) or abs(data[0, 0]) > 1e-12:
            raise ValueError(f"{path}: w column is not a uniform grid starting at 0")
        return cls(step, data[:, 1])


def sample_ccdf(workloads, grid: Grid) -> Ccdf:
    """Fraction of workloads strictly above each grid point."""
    W = np.sort(np.asarray(workloads, dtype=float))
    n = W.size
    if n == 0:
        return Ccdf.empty(grid.step, grid.size)
    above = n - np.searchsorted(W, grid.points, side="right")
    return Ccdf(grid.step, above / n)
