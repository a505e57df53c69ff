"""Teragen / Terasort / Teravalidate and the scaling harness."""

from .dataset import (
    ValidationReport,
    dataset_checksum,
    sample_split_points,
    teragen,
    teravalidate,
)
from .harness import PhaseTiming, PlanEntry, ScalingReport, scaling_run
from .kernels import backend

__all__ = [
    "PhaseTiming",
    "PlanEntry",
    "ScalingReport",
    "ValidationReport",
    "backend",
    "dataset_checksum",
    "sample_split_points",
    "scaling_run",
    "teragen",
    "teravalidate",
]
