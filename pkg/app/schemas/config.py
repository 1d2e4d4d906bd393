"""
Run configuration parsed from a problem file.
"""
from typing import List, Optional, Tuple
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.cy import ChiPlugin
from app.schemas.geodesic import SubsolutionFamily
from app.schemas.geometry import DiffScheme


class Command(str, Enum):
    INSPECT_METRIC = "inspect-metric"
    SOLVE_GEODESIC = "solve-geodesic"
    SWEEP_EPS = "sweep-eps"
    VERIFY = "verify"
    SOLVE_CY = "solve-cy"


class MetricKind(str, Enum):
    FLAT = "flat"
    KAHLER_PERTURBED = "kahler_perturbed"
    BALANCED_ROOT = "balanced_root"
    CONFORMAL = "conformal"


class AlphaKind(str, Enum):
    FLAT = "flat"
    CONFORMAL = "conformal"


class OmegaKind(str, Enum):
    FLAT = "flat"
    KAHLER_PERTURBED = "kahler_perturbed"
    BALANCED_ROOT = "balanced_root"


class RunConfig(BaseModel):
    """Fully resolved run configuration.

    Field order is the canonical emission order. ``active_coords`` holds
    1-based real coordinate numbers, as written in problem files.
    """
    model_config = ConfigDict(frozen=True)

    command: Command

    # Domain
    n: int = Field(3, ge=2)
    p: int = Field(2, ge=2)
    period: float = Field(1.0, gt=0)
    resolution: int = Field(16, ge=4)
    active_coords: Tuple[int, ...] = (1,)
    scheme: DiffScheme = DiffScheme.SPECTRAL

    # Geodesic problem
    metric: MetricKind = MetricKind.FLAT
    metric_expr: str = "0"
    epsilon: Optional[float] = Field(None, gt=0)
    epsilons: Optional[List[float]] = None
    phi0: str = "0"
    phi1: str = "0"
    time_points: int = Field(64, ge=2)
    tol: float = Field(1e-9, gt=0)
    max_iter: int = Field(50, ge=1)
    s_step: float = Field(0.1, gt=0, le=1)
    s_min_step: float = Field(1e-6, gt=0)
    continuation: bool = True
    enforce_x_sign: bool = True
    subsolution_family: SubsolutionFamily = SubsolutionFamily.POLYNOMIAL
    solution_dir: Optional[str] = None

    # Calabi-Yau problem
    alpha: AlphaKind = AlphaKind.FLAT
    alpha_expr: str = "0"
    omega: OmegaKind = OmegaKind.FLAT
    omega_expr: str = "0"
    psi_expr: str = "0"
    rho_expr: Optional[str] = None
    chi: ChiPlugin = ChiPlugin.NONE
    mean_u: float = 0.0
    psi_amplitudes: Optional[List[float]] = None

    # Reproducibility
    seed: int = 42
    out_dir: str = "out"
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_config(self):
        if self.p > self.n:
            raise ValueError(f"p = {self.p} exceeds n = {self.n}")
        coords = self.active_coords
        if not coords or list(coords) != sorted(set(coords)):
            raise ValueError("active_coords must be a strictly increasing list")
        if coords[0] < 1 or coords[-1] > 2 * self.n:
            raise ValueError(f"active_coords must lie in 1 … {2 * self.n}")
        if self.epsilons is not None and any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        return self

    @property
    def time_steps(self) -> int:
        """Number of time intervals; the grid has time_points + 1 nodes."""
        return self.time_points

    @property
    def domain_coords(self) -> Tuple[int, ...]:
        """0-based active coordinates."""
        return tuple(c - 1 for c in self.active_coords)
