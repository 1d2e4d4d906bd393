"""
Pydantic schemas for the balanced Calabi-Yau equation.
"""
from typing import Dict, List, Optional
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.geometry import HermitianMetricField


class ChiPlugin(str, Enum):
    """First-order term χ(∂u, ∂̄u) of the transformed equation."""
    NONE = "none"
    EXACT = "exact"


class AsthenoClass(str, Enum):
    SUB = "sub"
    SUPER = "super"
    ASTHENO = "astheno"
    INDEFINITE = "indefinite"


# ============ Problem Schemas ============
class CYProblem(BaseModel):
    """Background α, balanced ω, right-hand side ψ and the χ plug-in."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    alpha: HermitianMetricField
    omega: HermitianMetricField
    psi: np.ndarray
    rho: Optional[np.ndarray] = None
    chi: ChiPlugin = ChiPlugin.NONE
    mean_u: float = 0.0

    @model_validator(mode="after")
    def _check_problem(self):
        if self.alpha.domain != self.omega.domain:
            raise ValueError("alpha and omega live on different domains")
        if np.shape(self.psi) != self.alpha.domain.shape:
            raise ValueError("psi must be a spatial field")
        if self.rho is not None and np.shape(self.rho) != self.alpha.domain.shape:
            raise ValueError("rho must be a spatial field")
        return self

    @property
    def domain(self):
        return self.alpha.domain

    @property
    def n(self) -> int:
        return self.alpha.domain.n


# ============ Result Schemas ============
class AsthenoReport(BaseModel):
    """E = ⋆i∂∂̄α^{n−2}/(n−1)! and its sign against α."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    E: np.ndarray
    min_eigenvalue: float
    max_eigenvalue: float
    classification: AsthenoClass
    x_e: np.ndarray
    trace_discrepancy: float
    trace_against: Optional[float] = None

    def summary(self) -> Dict[str, object]:
        return {
            "classification": self.classification.value,
            "min_eigenvalue": self.min_eigenvalue,
            "max_eigenvalue": self.max_eigenvalue,
            "max_trace": float(np.max(self.x_e)),
            "trace_discrepancy": self.trace_discrepancy,
            "max_trace_against_solution": self.trace_against,
        }


class CYSolution(BaseModel):
    """Solution (u, b) with the assembled metrics and diagnostics."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray
    b: float
    omega_tilde: HermitianMetricField
    omega_u: Optional[HermitianMetricField] = None
    residual: float
    margin: float
    iterations: int
    residual_history: List[float] = Field(default_factory=list)
    diagnostics: Dict[str, float] = Field(default_factory=dict)

    def summary(self) -> Dict[str, object]:
        return {
            "b": self.b,
            "residual": self.residual,
            "margin": self.margin,
            "iterations": self.iterations,
            "sup_u": float(np.max(np.abs(self.u))),
            "mean_u": float(np.mean(self.u)),
            "residual_history": self.residual_history,
            **self.diagnostics,
        }
