"""
Report schemas for property checks and a priori estimate measurements.
"""
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class MarginReport(BaseModel):
    """Minimum of a margin field and where it is attained."""
    margin: float
    point: Optional[List[int]] = None

    def passed(self, tol: float) -> bool:
        return self.margin >= -tol


class EstimateReport(BaseModel):
    """Measured quantities of one s = 1 solution."""
    epsilon: float
    sup_phi_tt: float
    lambda1: float
    K: float
    sup_grad: float
    hessian_ratio: float
    sandwich_lower: Optional[float] = None
    sandwich_upper: Optional[float] = None
    monotone_margin: float
    ellipticity_margin: float

    @property
    def finite(self) -> bool:
        values = [v for v in self.model_dump().values() if isinstance(v, float)]
        return all(v == v and abs(v) != float("inf") for v in values)


class CheckResult(BaseModel):
    """Outcome of one named check."""
    name: str
    passed: bool
    samples: int = 0
    worst: Optional[float] = None
    counterexample: Optional[Dict[str, Any]] = None
    details: Dict[str, Any] = Field(default_factory=dict)


class EnergyProbeRow(BaseModel):
    index: int
    delta: float
    energy_plus: Optional[float] = None
    energy_minus: Optional[float] = None
    first_variation_fd: Optional[float] = None
    first_variation: Optional[float] = None
    second_variation: Optional[float] = None
    skipped: bool = False
    reason: Optional[str] = None


class VerifyReport(BaseModel):
    """Checks merged deterministically by name."""
    checks: List[CheckResult] = Field(default_factory=list)
    estimates: List[EstimateReport] = Field(default_factory=list)

    def add(self, result: CheckResult) -> None:
        self.checks.append(result)
        self.checks.sort(key=lambda c: c.name)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[Dict[str, Any]]:
        return [c.model_dump(mode="json") for c in self.checks if not c.passed]
