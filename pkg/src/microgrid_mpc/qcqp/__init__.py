"""Convex QCQP modelling and an interior-point solver."""

from .problem import (
    KktResiduals,
    NonConvexError,
    QcqpProblem,
    QcqpSolution,
    QuadConstraint,
    check_psd,
    verify_kkt,
)
from .solver import solve

__all__ = [
    "KktResiduals",
    "NonConvexError",
    "QcqpProblem",
    "QcqpSolution",
    "QuadConstraint",
    "check_psd",
    "solve",
    "verify_kkt",
]
