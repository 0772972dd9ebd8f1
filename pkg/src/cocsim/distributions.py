"""Component-size laws, job classes and class mixes.

Marginal laws are small frozen dataclasses sharing one duck-typed surface
(``cdf``, ``sample``, ``mean``, ``hazard``).  Joint laws over the ``d``
components of a job are built from marginals and are always exchangeable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence, Union

import numpy as np
from scipy import integrate, special


class Hazard(str, Enum):
    IHR = "IHR"
    DHR = "DHR"
    CONSTANT = "constant"
    UNKNOWN = "unknown"

    @property
    def is_ihr(self) -> bool:
        return self in (Hazard.IHR, Hazard.CONSTANT)

    @property
    def is_dhr(self) -> bool:
        return self in (Hazard.DHR, Hazard.CONSTANT)


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# marginal laws


@dataclass(frozen=True)
class Exponential:
    rate: float
    kind = "exponential"

    def __post_init__(self):
        object.__setattr__(self, "rate", _positive("rate", self.rate))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y < 0, 0.0, -np.expm1(-self.rate * np.maximum(y, 0.0)))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.exponential(1.0 / self.rate, size)

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    def hazard(self) -> Hazard:
        return Hazard.CONSTANT

    def exp_terms(self):
        return (np.array([1.0]), np.array([self.rate]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class Deterministic:
    value: float
    kind = "deterministic"

    def __post_init__(self):
        v = float(self.value)
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f"value must be a finite non-negative number, got {v!r}")
        object.__setattr__(self, "value", v)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y >= self.value, 1.0, 0.0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return np.full(size, self.value)

    @property
    def mean(self) -> float:
        return self.value

    def hazard(self) -> Hazard:
        return Hazard.IHR

    def exp_terms(self):
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class Uniform:
    """Uniform law on ``[0, upper]``."""

    upper: float
    kind = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "upper", _positive("upper", self.upper))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.clip(y / self.upper, 0.0, 1.0)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.uniform(0.0, self.upper, size)

    @property
    def mean(self) -> float:
        return self.upper / 2.0

    def hazard(self) -> Hazard:
        return Hazard.IHR

    def exp_terms(self):
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "upper": self.upper}


@dataclass(frozen=True)
class Weibull:
    shape: float
    scale: float = 1.0
    kind = "weibull"

    def __post_init__(self):
        object.__setattr__(self, "shape", _positive("shape", self.shape))
        object.__setattr__(self, "scale", _positive("scale", self.scale))

    def cdf(self, y):
        y = np.maximum(np.asarray(y, dtype=float), 0.0)
        return -np.expm1(-((y / self.scale) ** self.shape))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.scale * rng.weibull(self.shape, size)

    @property
    def mean(self) -> float:
        return self.scale * special.gamma(1.0 + 1.0 / self.shape)

    def hazard(self) -> Hazard:
        if self.shape > 1:
            return Hazard.IHR
        if self.shape < 1:
            return Hazard.DHR
        return Hazard.CONSTANT

    def exp_terms(self):
        if self.shape == 1:
            return (np.array([1.0]), np.array([1.0 / self.scale]))
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class HyperExponential:
    weights: tuple
    rates: tuple
    kind = "hyperexponential"

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        r = tuple(_positive("rate", v) for v in self.rates)
        if len(w) != len(r) or not w:
            raise ValueError("weights and rates must be non-empty and of equal length")
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("hyperexponential weights must be a probability vector")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", r)

    def cdf(self, y):
        y = np.maximum(np.asarray(y, dtype=float), 0.0)
        out = np.zeros_like(y)
        for w, r in zip(self.weights, self.rates):
            out = out + w * -np.expm1(-r * y)
        return out

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        size = (size,) if np.isscalar(size) else tuple(size)
        comp = rng.choice(len(self.weights), size=size, p=self.weights)
        scales = 1.0 / np.asarray(self.rates)
        return rng.exponential(1.0, size) * scales[comp]

    @property
    def mean(self) -> float:
        return sum(w / r for w, r in zip(self.weights, self.rates))

    def hazard(self) -> Hazard:
        live = {r for w, r in zip(self.weights, self.rates) if w > 0}
        return Hazard.CONSTANT if len(live) == 1 else Hazard.DHR

    def exp_terms(self):
        return (np.asarray(self.weights), np.asarray(self.rates))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": list(self.weights), "rates": list(self.rates)}


@dataclass(frozen=True)
class Truncated:
    """The law of ``min(X, cap)`` for ``X`` drawn from ``inner``."""

    inner: "SizeDistribution"
    cap: float
    kind = "truncated"

    def __post_init__(self):
        object.__setattr__(self, "cap", _positive("cap", self.cap))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return np.where(y >= self.cap, 1.0, self.inner.cdf(y))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return np.minimum(self.inner.sample(rng, size), self.cap)

    @property
    def mean(self) -> float:
        val, _ = integrate.quad(lambda y: 1.0 - float(self.inner.cdf(y)), 0.0, self.cap, limit=200)
        return val

    def hazard(self) -> Hazard:
        return Hazard.IHR if self.inner.hazard().is_ihr else Hazard.UNKNOWN

    def exp_terms(self):
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "inner": self.inner.to_dict(), "cap": self.cap}


SizeDistribution = Union[Exponential, Deterministic, Uniform, Weibull, HyperExponential, Truncated]


def cdf(dist: SizeDistribution, y):
    """P{xi <= y}."""
    return dist.cdf(y)


def hazard_classification(dist: SizeDistribution) -> Hazard:
    return dist.hazard()


def support_max(dist: SizeDistribution) -> float:
    """Upper end of the support (``inf`` when unbounded)."""
    if isinstance(dist, Deterministic):
        return dist.value
    if isinstance(dist, Uniform):
        return dist.upper
    if isinstance(dist, Truncated):
        return min(dist.cap, support_max(dist.inner))
    return math.inf


def support_min(dist: SizeDistribution) -> float:
    if isinstance(dist, Deterministic):
        return dist.value
    if isinstance(dist, Truncated):
        return min(dist.cap, support_min(dist.inner))
    return 0.0


# ---------------------------------------------------------------------------
# joint laws


@dataclass(frozen=True)
class IID:
    marginal: SizeDistribution
    dimension: int
    kind = "iid"

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return np.asarray(self.marginal.sample(rng, (count, self.dimension)), dtype=float)

    def project(self, m: int) -> "IID":
        return IID(self.marginal, m)

    @property
    def marginal_mean(self) -> float:
        return self.marginal.mean

    def iid_terms(self):
        return [(1.0, self.marginal)]

    def to_dict(self) -> dict:
        return {"joint": self.kind, "marginal": self.marginal.to_dict()}


@dataclass(frozen=True)
class CommonCopy:
    """All ``d`` components equal to a single draw from ``marginal``."""

    marginal: SizeDistribution
    dimension: int
    kind = "common_copy"

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        one = np.asarray(self.marginal.sample(rng, (count, 1)), dtype=float)
        return np.repeat(one, self.dimension, axis=1)

    def project(self, m: int) -> "CommonCopy":
        return CommonCopy(self.marginal, m)

    @property
    def marginal_mean(self) -> float:
        return self.marginal.mean

    def iid_terms(self):
        if self.dimension <= 1:
            return [(1.0, self.marginal)]
        return None

    def to_dict(self) -> dict:
        return {"joint": self.kind, "marginal": self.marginal.to_dict()}


@dataclass(frozen=True)
class Mixture:
    weights: tuple
    components: tuple
    kind = "mixture"

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        comps = tuple(self.components)
        if len(w) != len(comps) or not comps:
            raise ValueError("mixture weights and components must be non-empty and of equal length")
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("mixture weights must be a probability vector")
        dims = {c.dimension for c in comps}
        if len(dims) != 1:
            raise ValueError("mixture components must share a dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dimension(self) -> int:
        return self.components[0].dimension

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        which = rng.choice(len(self.weights), size=count, p=self.weights)
        out = np.empty((count, self.dimension))
        for i, comp in enumerate(self.components):
            rows = np.flatnonzero(which == i)
            if rows.size:
                out[rows] = comp.sample(rng, rows.size)
        return out

    def project(self, m: int) -> "Mixture":
        return Mixture(self.weights, tuple(c.project(m) for c in self.components))

    @property
    def marginal_mean(self) -> float:
        return sum(w * c.marginal_mean for w, c in zip(self.weights, self.components))

    def iid_terms(self):
        out = []
        for w, c in zip(self.weights, self.components):
            sub = c.iid_terms()
            if sub is None:
                return None
            out.extend((w * sw, marg) for sw, marg in sub)
        return out

    def to_dict(self) -> dict:
        return {
            "joint": self.kind,
            "weights": list(self.weights),
            "components": [c.to_dict() for c in self.components],
        }


@dataclass(frozen=True)
class CustomLaw:
    """User-supplied exchangeable sampler ``sampler(rng, count) -> (count, d)``."""

    sampler: Callable[[np.random.Generator, int], np.ndarray]
    dimension: int
    mean_size: float
    kind = "custom"

    def sample(self, rng, count):
        out = np.asarray(self.sampler(rng, count), dtype=float)
        if out.shape != (count, self.dimension):
            raise ValueError(f"custom sampler returned shape {out.shape}, expected {(count, self.dimension)}")
        return out

    def project(self, m: int) -> "CustomLaw":
        full = self.sampler
        return CustomLaw(lambda rng, count: full(rng, count)[:, :m], m, self.mean_size)

    @property
    def marginal_mean(self) -> float:
        return self.mean_size

    def iid_terms(self):
        return None

    def to_dict(self) -> dict:
        raise TypeError("custom samplers cannot be serialized")


JointSizeLaw = Union[IID, CommonCopy, Mixture, CustomLaw]


def sample_sizes(law: JointSizeLaw, rng: np.random.Generator) -> np.ndarray:
    """One draw of the ``d`` component sizes."""
    return law.sample(rng, 1)[0]


def marginal_hazard(law: JointSizeLaw) -> Hazard:
    """Hazard class shared by every iid term of ``law`` (mixtures allowed)."""
    terms = law.iid_terms()
    if not terms:
        return Hazard.UNKNOWN
    kinds = {marg.hazard() for w, marg in terms if w > 0}
    if kinds == {Hazard.CONSTANT}:
        # a mixture of exponentials with distinct means is DHR
        means = {round(marg.mean, 12) for w, marg in terms if w > 0}
        return Hazard.CONSTANT if len(means) == 1 else Hazard.DHR
    if all(k.is_ihr for k in kinds):
        return Hazard.IHR
    if all(k.is_dhr for k in kinds):
        return Hazard.DHR
    return Hazard.UNKNOWN


# ---------------------------------------------------------------------------
# classes and mixes


@dataclass(frozen=True)
class JobClass:
    d: int
    k: int
    sizes: JointSizeLaw | None
    name: str = ""

    def __post_init__(self):
        if self.d == 0:
            if self.k != 0:
                raise ValueError("the empty class has d = k = 0")
            return
        if self.d < 1 or not (1 <= self.k <= self.d):
            raise ValueError(f"need 1 <= k <= d, got d={self.d}, k={self.k}")
        if self.sizes is None or self.sizes.dimension != self.d:
            raise ValueError("size law dimension must equal d")

    @property
    def is_empty(self) -> bool:
        return self.d == 0

    @property
    def mean_size(self) -> float:
        return 0.0 if self.is_empty else self.sizes.marginal_mean

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        if self.is_empty:
            return np.empty((count, 0))
        return self.sizes.sample(rng, count)


EMPTY_CLASS = JobClass(0, 0, None, name="empty")


@dataclass(frozen=True)
class ClassMix:
    classes: tuple
    probabilities: tuple
    lam: float = 0.0

    def __post_init__(self):
        classes = tuple(self.classes)
        probs = tuple(float(p) for p in self.probabilities)
        if not classes:
            raise ValueError("a mix needs at least one class")
        if len(classes) != len(probs):
            raise ValueError("one probability per class is required")
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError("class probabilities must sum to 1")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be finite and non-negative")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "lam", float(self.lam))

    @classmethod
    def single(cls, job_class: JobClass, lam: float = 0.0) -> "ClassMix":
        return cls((job_class,), (1.0,), lam)

    def with_lambda(self, lam: float) -> "ClassMix":
        return ClassMix(self.classes, self.probabilities, lam)

    @property
    def dbar(self) -> int:
        return max(c.d for c in self.classes)

    @property
    def mean_degree(self) -> float:
        return sum(p * c.d for p, c in zip(self.probabilities, self.classes))

    @property
    def alpha(self) -> float:
        """Rate at which a given server is selected."""
        return self.lam * self.mean_degree

    @property
    def alphas(self) -> tuple:
        return tuple(self.lam * p * c.d for p, c in zip(self.probabilities, self.classes))

    @property
    def size_biased(self) -> np.ndarray:
        w = np.array([p * c.d for p, c in zip(self.probabilities, self.classes)], dtype=float)
        total = w.sum()
        return w / total if total > 0 else w

    @property
    def mean_size(self) -> float:
        """Mean component size seen by a selected server."""
        return float(sum(w * c.mean_size for w, c in zip(self.size_biased, self.classes)))


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class ValidationReport:
    samples: int
    mean_estimate: float
    mean_stderr: float
    finite_positive_mean: bool
    nontrivial: bool
    zero_k_frequency: float
    assumption4_i: bool | None
    assumption4_ii: bool | None
    spread_frequency: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def validate_class(job_class: JobClass, samples: int = 100_000,
                   rng: np.random.Generator | None = None) -> ValidationReport:
    """Monte-Carlo check of the finite-mean and non-triviality assumptions.

    A "< 1" frequency condition is flagged true when the frequency is below
    ``1 - 1/samples``; a "> 0" condition when it is above ``1/samples``.
    ``assumption4_*`` are ``None`` for classes with ``k == d``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if job_class.is_empty:
        raise ValueError("the empty class has no sizes to validate")
    rng = np.random.default_rng() if rng is None else rng
    xi = job_class.sample(rng, samples)
    d, k = job_class.d, job_class.k
    first = xi[:, 0]
    mean = float(first.mean())
    stderr = float(first.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
    finite_mean = bool(np.isfinite(mean) and mean > 0)

    zero_k = float(np.mean((xi == 0).sum(axis=1) >= k))
    nontrivial = zero_k < 1.0 - 1.0 / samples

    a4_i = a4_ii = spread = None
    if k < d:
        ordered = np.sort(xi, axis=1)
        spread = float(np.mean(ordered[:, -1] - ordered[:, k - 1] > 0))
        a4_i = spread > 1.0 / samples
        a4_ii = nontrivial
    return ValidationReport(samples, mean, stderr, finite_mean, nontrivial, zero_k, a4_i, a4_ii, spread)


# ---------------------------------------------------------------------------
# sub-classes and reduced systems


def derive_subclass(job_class: JobClass, m: int) -> JobClass:
    """Keep only ``m`` of the components; ``m = 0`` gives the empty class."""
    if not (0 <= m <= job_class.d):
        raise ValueError(f"m must be in [0, {job_class.d}], got {m}")
    if m == 0:
        return EMPTY_CLASS
    if m == job_class.d:
        return job_class
    return JobClass(m, min(job_class.k, m), job_class.sizes.project(m),
                    name=f"{job_class.name}^{m}" if job_class.name else "")


def reduce_mix(mix: ClassMix, phi: float) -> ClassMix:
    """Mix seen by the standard servers when a fraction ``phi`` is at infinity."""
    if not (0.0 <= phi < 1.0):
        raise ValueError(f"phi must be in [0, 1), got {phi}")
    classes: list[JobClass] = []
    probs: list[float] = []
    for pj, cls in zip(mix.probabilities, mix.classes):
        d = cls.d
        for m in range(d, -1, -1):
            w = pj * math.comb(d, m) * (1.0 - phi) ** m * phi ** (d - m)
            if w == 0.0:
                continue
            classes.append(derive_subclass(cls, m))
            probs.append(w)
    total = math.fsum(probs)
    probs = [p / total for p in probs]
    return ClassMix(tuple(classes), tuple(probs), mix.lam / (1.0 - phi))


# ---------------------------------------------------------------------------
# construction from plain dicts (config files)


def size_distribution_from_dict(spec: dict) -> SizeDistribution:
    kind = spec["kind"]
    if kind == "exponential":
        return Exponential(spec["rate"])
    if kind == "deterministic":
        return Deterministic(spec["value"])
    if kind == "uniform":
        return Uniform(spec["upper"])
    if kind == "weibull":
        return Weibull(spec["shape"], spec.get("scale", 1.0))
    if kind == "hyperexponential":
        return HyperExponential(tuple(spec["weights"]), tuple(spec["rates"]))
    if kind == "truncated":
        return Truncated(size_distribution_from_dict(spec["inner"]), spec["cap"])
    raise ValueError(f"unknown size law kind {kind!r}")


def joint_law_from_dict(spec: dict, d: int) -> JointSizeLaw:
    joint = spec.get("joint", "iid")
    if joint == "iid":
        return IID(size_distribution_from_dict(spec["marginal"]), d)
    if joint == "common_copy":
        return CommonCopy(size_distribution_from_dict(spec["marginal"]), d)
    if joint == "mixture":
        return Mixture(tuple(spec["weights"]),
                       tuple(joint_law_from_dict(c, d) for c in spec["components"]))
    raise ValueError(f"unknown joint law {joint!r}")


def mix_from_dict(spec: dict) -> ClassMix:
    classes, probs = [], []
    for i, c in enumerate(spec["classes"]):
        d, k = int(c["d"]), int(c["k"])
        classes.append(JobClass(d, k, joint_law_from_dict(c["sizes"], d), name=c.get("name", f"class{i}")))
        probs.append(float(c.get("pi", 1.0)))
    total = math.fsum(probs)
    if not total > 0:
        raise ValueError("class weights must have a positive sum")
    probs = [p / total for p in probs]
    return ClassMix(tuple(classes), tuple(probs), float(spec.get("lambda", 0.0)))


def mix_to_dict(mix: ClassMix) -> dict:
    return {
        "lambda": mix.lam,
        "classes": [
            {"name": c.name, "d": c.d, "k": c.k, "pi": p, "sizes": c.sizes.to_dict()}
            for c, p in zip(mix.classes, mix.probabilities)
        ],
    }
