"""Simulation and mean-field analysis of parallel servers with cancel-on-completion redundancy."""

from .ccdf import Ccdf, Grid, sample_ccdf
from .coc_core import PlacementResult, apply_job, mc_eta_mean, sample_eta, truncate_workloads
from .distributions import (
    IID,
    ClassMix,
    CommonCopy,
    Deterministic,
    Exponential,
    Hazard,
    HyperExponential,
    JobClass,
    Mixture,
    Truncated,
    Uniform,
    Weibull,
    derive_subclass,
    hazard_classification,
    reduce_mix,
    validate_class,
)
from .meanfield import FixedPointResult, Supercritical, solve_fp_finite_frame, solve_fp_infinite
from .simulator import Frame, SimConfig, SimMetrics, run_simulation

__version__ = "0.1.0"
