"""
Pydantic schemas for the perturbed geodesic problem on M×[0,1].
"""
from typing import Dict, List, Optional
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.schemas.geometry import GridDomain, HermitianMetricField


class SubsolutionFamily(str, Enum):
    """Explicit subsolution families searched by the barrier service."""
    POLYNOMIAL = "polynomial"
    LOGARITHMIC = "logarithmic"


class SolverStatus(str, Enum):
    CONVERGED = "converged"
    CONE_EXIT = "cone_exit"
    LINE_SEARCH_FAIL = "line_search_fail"
    MAX_ITERATIONS = "max_iterations"


# ============ Field Schemas ============
class SpaceTimeField(BaseModel):
    """Scalar field φ(x, t) sampled on the grid × {0, 1/N_t, …, 1}.

    ``values`` has shape domain.shape + (N_t + 1,); the first and last time
    slices are the boundary data and must equal ``phi0`` / ``phi1`` exactly.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    domain: GridDomain
    values: np.ndarray
    phi0: np.ndarray
    phi1: np.ndarray

    @model_validator(mode="after")
    def _check_boundary(self):
        spatial = self.domain.shape
        if self.values.ndim != len(spatial) + 1 or self.values.shape[:-1] != spatial:
            raise ValueError(f"values have shape {self.values.shape}, expected {spatial} + (T,)")
        if self.values.shape[-1] < 3:
            raise ValueError("at least two time intervals are required")
        if np.shape(self.phi0) != spatial or np.shape(self.phi1) != spatial:
            raise ValueError("boundary slices must match the spatial grid")
        if np.any(self.values[..., 0] != self.phi0) or np.any(self.values[..., -1] != self.phi1):
            raise ValueError("boundary slices differ from the prescribed data")
        return self

    @classmethod
    def from_values(cls, domain: GridDomain, values: np.ndarray, phi0: np.ndarray, phi1: np.ndarray) -> "SpaceTimeField":
        """Build a field, overwriting the boundary slices with the data."""
        values = np.array(values, dtype=float)
        phi0 = np.broadcast_to(np.asarray(phi0, dtype=float), domain.shape).copy()
        phi1 = np.broadcast_to(np.asarray(phi1, dtype=float), domain.shape).copy()
        values[..., 0] = phi0
        values[..., -1] = phi1
        return cls(domain=domain, values=values, phi0=phi0, phi1=phi1)

    @classmethod
    def linear_interpolation(cls, domain: GridDomain, time_steps: int, phi0, phi1) -> "SpaceTimeField":
        phi0 = np.broadcast_to(np.asarray(phi0, dtype=float), domain.shape)
        phi1 = np.broadcast_to(np.asarray(phi1, dtype=float), domain.shape)
        t = np.linspace(0.0, 1.0, time_steps + 1)
        values = (1.0 - t) * phi0[..., None] + t * phi1[..., None]
        return cls.from_values(domain, values, phi0, phi1)

    def with_values(self, values: np.ndarray) -> "SpaceTimeField":
        return SpaceTimeField.from_values(self.domain, values, self.phi0, self.phi1)

    @property
    def time_steps(self) -> int:
        return self.values.shape[-1] - 1

    @property
    def dt(self) -> float:
        return 1.0 / self.time_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.time_steps + 1)

    @property
    def interior(self) -> np.ndarray:
        return self.values[..., 1:-1]

    def time_derivative(self) -> np.ndarray:
        """Second-order φ_t on every time node (one-sided at the ends)."""
        return np.gradient(self.values, self.dt, axis=-1, edge_order=2)


# ============ Problem Schemas ============
class ContinuityProblem(BaseModel):
    """One member P_s of the continuity path for the perturbed geodesic equation."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    s: float = Field(..., ge=0.0, le=1.0)
    epsilon: float = Field(..., gt=0.0)
    p: int = Field(..., ge=2)
    metric: HermitianMetricField
    x_field: np.ndarray
    phi0: np.ndarray
    phi1: np.ndarray
    forcing: Optional[np.ndarray] = None
    enforce_x_sign: bool = True

    @model_validator(mode="after")
    def _check_problem(self):
        domain = self.metric.domain
        if self.p > domain.n:
            raise ValueError(f"p = {self.p} exceeds n = {domain.n}")
        if np.shape(self.x_field) != domain.shape:
            raise ValueError("X must be a spatial field")
        if self.enforce_x_sign and np.max(self.x_field) > settings.BALANCED_TOL:
            raise ConfigError(
                f"X takes the positive value {float(np.max(self.x_field)):.3e}; "
                "the geodesic problem assumes X <= 0",
                key="enforce_x_sign",
            )
        return self

    @property
    def domain(self) -> GridDomain:
        return self.metric.domain

    @property
    def n(self) -> int:
        return self.metric.domain.n

    def at(self, s: float) -> "ContinuityProblem":
        return self.model_copy(update={"s": float(s)})

    def forcing_for(self, field: SpaceTimeField) -> np.ndarray:
        if self.forcing is None:
            return np.zeros_like(field.values)
        return self.forcing


class OperatorCoefficients(BaseModel):
    """A, G, L and the derivatives they are built from, on every time node."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    phi_t: np.ndarray
    phi_tt: np.ndarray
    laplacian: np.ndarray
    grad_phi_t: np.ndarray
    grad_norm_sq: np.ndarray
    A: np.ndarray
    G: np.ndarray
    L: np.ndarray

    def cone(self, s: float) -> Dict[str, np.ndarray]:
        """Cone fields of P_s; they reduce to (A, φ_tt, G) at s = 1."""
        a_s = s * self.A + (1.0 - s)
        b_s = s * self.phi_tt + (1.0 - s)
        return {"a": a_s, "b": b_s, "G": a_s * b_s - s * s * self.grad_norm_sq}


class BarrierPair(BaseModel):
    """Subsolution and supersolution sharing the boundary data."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lower: SpaceTimeField
    upper: SpaceTimeField
    family: SubsolutionFamily
    params: Dict[str, float]
    margin: float

    @model_validator(mode="after")
    def _check_barriers(self):
        if np.any(self.lower.phi0 != self.upper.phi0) or np.any(self.lower.phi1 != self.upper.phi1):
            raise ValueError("barriers carry different boundary data")
        if not self.margin > 0:
            raise ValueError(f"subsolution margin {self.margin} is not positive")
        return self


# ============ Report Schemas ============
class SolverReport(BaseModel):
    """Newton diagnostics for one solve."""
    status: SolverStatus
    s: float
    iterations: int
    residual: float
    residual_history: List[float] = Field(default_factory=list)
    damping_history: List[float] = Field(default_factory=list)
    cone_history: List[Dict[str, float]] = Field(default_factory=list)
    message: str = ""


class PathStep(BaseModel):
    s: float
    step: float
    accepted: bool
    iterations: int = 0
    residual: Optional[float] = None
    min_G: Optional[float] = None
    error: Optional[str] = None


class ContinuityReport(BaseModel):
    """Trace of the s-march and the final Newton report."""
    steps: List[PathStep] = Field(default_factory=list)
    final: Optional[SolverReport] = None

    @property
    def accepted_steps(self) -> List[PathStep]:
        return [step for step in self.steps if step.accepted]
