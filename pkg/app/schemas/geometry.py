"""
Pydantic schemas for grid domains, Hermitian metrics and complex forms.
"""
from typing import Dict, Optional, Tuple
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import NotPositiveDefinite


MultiIndex = Tuple[int, ...]
FormKey = Tuple[MultiIndex, MultiIndex]


class DiffScheme(str, Enum):
    """Spatial differentiation schemes."""
    SPECTRAL = "spectral"
    FD4 = "fd4"


# ============ Grid Schemas ============
class GridDomain(BaseModel):
    """Periodic model torus with a reduced set of active real coordinates.

    Real coordinates are numbered 0 … 2n−1 with z_j = x_{2j} + i x_{2j+1}.
    Fields are sampled on the active coordinates only and are constant along
    the others.
    """
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=2)
    periods: Tuple[float, ...]
    resolution: int = Field(..., ge=4)
    active_coords: Tuple[int, ...] = (0,)

    @model_validator(mode="before")
    @classmethod
    def _broadcast_periods(cls, data):
        if isinstance(data, dict):
            periods = data.get("periods", 1.0)
            if isinstance(periods, (int, float)) and "n" in data:
                data = {**data, "periods": tuple([float(periods)] * 2 * int(data["n"]))}
        return data

    @model_validator(mode="after")
    def _check_layout(self):
        if len(self.periods) != 2 * self.n:
            raise ValueError(f"expected {2 * self.n} periods, got {len(self.periods)}")
        if any(L <= 0 for L in self.periods):
            raise ValueError("periods must be positive")
        coords = self.active_coords
        if not coords:
            raise ValueError("at least one active coordinate is required")
        if list(coords) != sorted(set(coords)):
            raise ValueError("active_coords must be strictly increasing")
        if coords[0] < 0 or coords[-1] >= 2 * self.n:
            raise ValueError(f"active_coords must lie in [0, {2 * self.n - 1}]")
        return self

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple([self.resolution] * len(self.active_coords))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def volume(self) -> float:
        return float(np.prod(self.periods))

    def axis_of(self, coord: int) -> Optional[int]:
        """Array axis carrying real coordinate ``coord``, or None if inactive."""
        if coord in self.active_coords:
            return self.active_coords.index(coord)
        return None

    def spacing(self, coord: int) -> float:
        return self.periods[coord] / self.resolution

    def coordinate(self, coord: int) -> np.ndarray:
        """Grid values of real coordinate ``coord`` (zero along inactive ones)."""
        axis = self.axis_of(coord)
        if axis is None:
            return np.zeros(self.shape)
        x = np.arange(self.resolution) * self.spacing(coord)
        view = [1] * len(self.shape)
        view[axis] = self.resolution
        return np.broadcast_to(x.reshape(view), self.shape).copy()

    def zeros(self, dtype=float) -> np.ndarray:
        return np.zeros(self.shape, dtype=dtype)


# ============ Metric Schemas ============
class HermitianMetricField(BaseModel):
    """Pointwise positive-definite Hermitian matrix field g_{jk̄}."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    domain: GridDomain
    g: np.ndarray

    @field_validator("g", mode="before")
    @classmethod
    def _symmetrize(cls, value):
        g = np.asarray(value, dtype=complex)
        return 0.5 * (g + np.conj(np.swapaxes(g, -1, -2)))

    @model_validator(mode="after")
    def _check_positive(self):
        n = self.domain.n
        expected = self.domain.shape + (n, n)
        if self.g.shape != expected:
            raise ValueError(f"metric field has shape {self.g.shape}, expected {expected}")
        eigenvalues = np.linalg.eigvalsh(self.g)[..., 0]
        if not np.all(eigenvalues > 0):
            point = np.unravel_index(int(np.argmin(eigenvalues)), eigenvalues.shape)
            raise NotPositiveDefinite(
                f"metric is not positive-definite at grid point {tuple(int(i) for i in point)}",
                point=[int(i) for i in point],
                min_eigenvalue=float(eigenvalues[point]),
            )
        return self

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.g)

    @property
    def det(self) -> np.ndarray:
        return np.linalg.det(self.g).real

    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.g)[..., 0]))


# ============ Form Schemas ============
class ComplexForm(BaseModel):
    """Coefficient field of a (p,q)-form.

    ``coeffs[(I, J)]`` is the coefficient of dz^I ∧ dz̄^J for strictly
    increasing 0-based multi-indices I (length p) and J (length q). Missing
    keys are zero. Storing only ordered multi-indices makes the coefficients
    antisymmetric by construction.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    domain: GridDomain
    p: int = Field(..., ge=0)
    q: int = Field(..., ge=0)
    coeffs: Dict[FormKey, np.ndarray] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_keys(self):
        n = self.domain.n
        for (I, J), c in self.coeffs.items():
            if len(I) != self.p or len(J) != self.q:
                raise ValueError(f"key {(I, J)} does not match bidegree ({self.p},{self.q})")
            for index in (I, J):
                if list(index) != sorted(set(index)) or (index and (index[0] < 0 or index[-1] >= n)):
                    raise ValueError(f"multi-index {index} is not strictly increasing in range")
            if np.shape(c) != self.domain.shape:
                raise ValueError(f"coefficient {(I, J)} has shape {np.shape(c)}")
        return self

    @property
    def degree(self) -> int:
        return self.p + self.q

    @property
    def bidegree(self) -> Tuple[int, int]:
        return (self.p, self.q)

    def component(self, I: MultiIndex, J: MultiIndex) -> np.ndarray:
        c = self.coeffs.get((tuple(I), tuple(J)))
        if c is None:
            return self.domain.zeros(complex)
        return c

    def _combine(self, other: "ComplexForm", sign: float) -> "ComplexForm":
        if other.bidegree != self.bidegree:
            raise ValueError(f"cannot add forms of bidegree {self.bidegree} and {other.bidegree}")
        out = dict(self.coeffs)
        for key, c in other.coeffs.items():
            out[key] = out[key] + sign * c if key in out else sign * c
        return ComplexForm(domain=self.domain, p=self.p, q=self.q, coeffs=out)

    def __add__(self, other: "ComplexForm") -> "ComplexForm":
        return self._combine(other, 1.0)

    def __sub__(self, other: "ComplexForm") -> "ComplexForm":
        return self._combine(other, -1.0)

    def __mul__(self, factor) -> "ComplexForm":
        """Multiply by a scalar or a scalar field."""
        return ComplexForm(
            domain=self.domain, p=self.p, q=self.q,
            coeffs={key: c * factor for key, c in self.coeffs.items()},
        )

    __rmul__ = __mul__

    def conjugate(self) -> "ComplexForm":
        """Complex conjugate: conj(c dz^I∧dz̄^J) = c̄ (−1)^{pq} dz^J∧dz̄^I."""
        sign = (-1) ** (self.p * self.q)
        return ComplexForm(
            domain=self.domain, p=self.q, q=self.p,
            coeffs={(J, I): sign * np.conj(c) for (I, J), c in self.coeffs.items()},
        )

    def sup_norm(self) -> float:
        if not self.coeffs:
            return 0.0
        return float(max(np.max(np.abs(c)) for c in self.coeffs.values()))


class TorsionField(BaseModel):
    """Chern torsion T^l_{jk}, stored as T[..., l, j, k]."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    domain: GridDomain
    T: np.ndarray

    @model_validator(mode="after")
    def _check_antisymmetric(self):
        n = self.domain.n
        if self.T.shape != self.domain.shape + (n, n, n):
            raise ValueError(f"torsion has shape {self.T.shape}")
        if np.any(self.T + np.swapaxes(self.T, -1, -2) != 0):
            raise ValueError("torsion must be antisymmetric in its lower indices")
        return self

    def antisymmetry_residual(self) -> float:
        return float(np.max(np.abs(self.T + np.swapaxes(self.T, -1, -2))))


# ============ Report Schemas ============
class XComparison(BaseModel):
    """Both evaluations of X with their discrepancy."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    p: int
    wedge: np.ndarray
    torsion: np.ndarray
    discrepancy: float
    min_x: float
    max_x: float
    trace_residual: float
    balanced_residual: float

    def summary(self) -> Dict[str, float]:
        return {
            "p": self.p,
            "discrepancy": self.discrepancy,
            "min_x": self.min_x,
            "max_x": self.max_x,
            "trace_residual": self.trace_residual,
            "balanced_residual": self.balanced_residual,
        }


class PositivityReport(BaseModel):
    """Pointwise value of 1 + Δφ/n + Xφ and its cross-check."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    positive: np.ndarray
    margin: float
    wedge_discrepancy: float
