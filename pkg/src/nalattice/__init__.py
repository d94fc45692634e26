"""Simulation and verification toolkit for negatively associated random fields on N^d."""

from ._version import __version__
from .generators import (GaussianNearestNeighbor, GeneratorSpec, IidHeavyTail, IidNormal, IidRademacher,
                         Multinomial, TruncatedCentered, exact_sigma_squared, field_model, sample_field)
from .inequalities import InequalityReport, Verdict
from .lattice import Field, MultiIndex, PrefixTable, partial_sums_scan
from .lil import LilConfig, Trajectory, run_lil_trajectory
from .stats import McEstimate

__all__ = [
    "__version__", "Field", "MultiIndex", "PrefixTable", "partial_sums_scan", "GeneratorSpec", "IidNormal",
    "IidRademacher", "IidHeavyTail", "GaussianNearestNeighbor", "Multinomial", "TruncatedCentered",
    "exact_sigma_squared", "field_model", "sample_field", "InequalityReport", "Verdict", "LilConfig",
    "Trajectory", "run_lil_trajectory", "McEstimate",
]
