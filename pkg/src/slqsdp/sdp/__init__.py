"""Semidefinite programs: container, solver adapter and formulations."""

from .formulations import (
    FORMS,
    TRACE_MODES,
    DualCertificate,
    build_model_based,
    build_model_free_aggregated,
    build_model_free_gram,
    build_model_free_literal,
    extract_gain,
    solve_model_based,
    solve_model_free,
)
from .problem import LmiConstraint, SdpProblem, affine_lmi, trace_objective
from .solver import SdpSolution, SolverSettings, audit, solve

__all__ = [
    "FORMS",
    "TRACE_MODES",
    "DualCertificate",
    "LmiConstraint",
    "SdpProblem",
    "SdpSolution",
    "SolverSettings",
    "affine_lmi",
    "audit",
    "build_model_based",
    "build_model_free_aggregated",
    "build_model_free_gram",
    "build_model_free_literal",
    "extract_gain",
    "solve",
    "solve_model_based",
    "solve_model_free",
    "trace_objective",
]
