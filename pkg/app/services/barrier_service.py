"""
Barrier Service
Explicit subsolutions certified by pointwise evaluation, and the linear
supersolution n + u_tt + Δu + nXu = 0.
"""
from typing import Dict, Iterable, Optional, Tuple
import logging

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from app.core.config import settings
from app.core.exceptions import LinearSolveError, PositivityViolation, SearchExhausted
from app.schemas.geodesic import BarrierPair, ContinuityProblem, SpaceTimeField, SubsolutionFamily
from app.services.geodesic_service import GeodesicService, _argmin_point

logger = logging.getLogger(__name__)

POLYNOMIAL_A = tuple(2.0 ** k for k in range(13))
POLYNOMIAL_B = (2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0)
LOGARITHMIC_C = tuple(2.0 ** k for k in range(-4, 13))


def polynomial_profile(t: np.ndarray, a: float, b: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """a·t(t−1) + t^b(1−t) with its first and second t-derivatives."""
    value = a * t * (t - 1.0) + t ** b * (1.0 - t)
    first = a * (2.0 * t - 1.0) + b * t ** (b - 1.0) * (1.0 - t) - t ** b
    second = 2.0 * a + b * (b - 1.0) * t ** (b - 2.0) * (1.0 - t) - 2.0 * b * t ** (b - 1.0)
    return value, first, second


def logarithmic_profile(t: np.ndarray, c: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """−c·log(1 + t(1−t)) with its first and second t-derivatives."""
    q = 1.0 + t * (1.0 - t)
    value = -c * np.log(q)
    first = -c * (1.0 - 2.0 * t) / q
    second = c * (2.0 / q + (1.0 - 2.0 * t) ** 2 / q ** 2)
    return value, first, second


class BarrierService:
    """Sub- and supersolutions for one geodesic problem"""

    def __init__(self, geodesic: GeodesicService):
        self.geodesic = geodesic
        self.geometry = geodesic.geometry
        self.domain = geodesic.domain

    # ============================================
    # Subsolutions
    # ============================================

    def candidate(
        self,
        prob: ContinuityProblem,
        time_steps: int,
        family: SubsolutionFamily,
        params: Dict[str, float],
    ) -> Tuple[SpaceTimeField, np.ndarray, np.ndarray]:
        """Candidate Φ with exact time derivatives on the grid."""
        t = np.linspace(0.0, 1.0, time_steps + 1)
        if family == SubsolutionFamily.POLYNOMIAL:
            profile, first, second = polynomial_profile(t, params["a"], params["b"])
        else:
            profile, first, second = logarithmic_profile(t, params["c"])
        phi0 = np.asarray(prob.phi0, dtype=float)
        phi1 = np.asarray(prob.phi1, dtype=float)
        values = t * phi1[..., None] + (1.0 - t) * phi0[..., None] + profile
        field = SpaceTimeField.from_values(self.domain, values, phi0, phi1)
        phi_t = (phi1 - phi0)[..., None] + first
        phi_tt = np.broadcast_to(second, values.shape).copy()
        return field, phi_t, phi_tt

    def subsolution_margin(
        self, field: SpaceTimeField, prob: ContinuityProblem, phi_t: np.ndarray, phi_tt: np.ndarray
    ) -> Dict[str, float]:
        """Minima over Y of F − L, Φ_tt and A(Φ)."""
        coeffs = self.geodesic.operator_coefficients(field, prob.at(1.0), phi_t=phi_t, phi_tt=phi_tt)
        return {
            "margin": float(np.min(coeffs.G - coeffs.L)),
            "phi_tt": float(np.min(coeffs.phi_tt)),
            "A": float(np.min(coeffs.A)),
        }

    def _search_space(self, family: SubsolutionFamily) -> Iterable[Dict[str, float]]:
        if family == SubsolutionFamily.POLYNOMIAL:
            for a in POLYNOMIAL_A:
                for b in POLYNOMIAL_B:
                    yield {"a": a, "b": b}
        else:
            for c in LOGARITHMIC_C:
                yield {"c": c}

    def check_interpolation(self, prob: ContinuityProblem, time_steps: int, delta: Optional[float] = None) -> float:
        """Minimum of A over the straight path tφ₁ + (1−t)φ₀; raises below δ."""
        delta = settings.BARRIER_MIN_A if delta is None else delta
        line = SpaceTimeField.linear_interpolation(self.domain, time_steps, prob.phi0, prob.phi1)
        coeffs = self.geodesic.operator_coefficients(line, prob.at(1.0))
        smallest = float(np.min(coeffs.A))
        if smallest < delta:
            point = _argmin_point(coeffs.A)
            logger.error(f"Straight path has A = {smallest:.3e} < {delta:.1e} at {point}")
            raise PositivityViolation(
                f"A(tφ₁ + (1−t)φ₀) = {smallest:.3e} is below {delta:.1e} at (x, t) index {point}",
                point=point, value=smallest,
            )
        return smallest

    def construct_subsolution(
        self,
        prob: ContinuityProblem,
        time_steps: int,
        family: SubsolutionFamily = SubsolutionFamily.POLYNOMIAL,
        supersolution: Optional[SpaceTimeField] = None,
        delta: Optional[float] = None,
    ) -> BarrierPair:
        """Grid-search the family: the smallest feasible leading constant, then the smallest b."""
        family = SubsolutionFamily(family)
        self.check_interpolation(prob, time_steps, delta)
        best_margin, best_params = -np.inf, {}
        chosen = None

        for params in self._search_space(family):
            field, phi_t, phi_tt = self.candidate(prob, time_steps, family, params)
            margins = self.subsolution_margin(field, prob, phi_t, phi_tt)
            score = min(margins.values())
            if score > best_margin:
                best_margin, best_params = score, dict(params)
            if score > 0:
                chosen = (field, dict(params), margins["margin"])
                break

        if chosen is None:
            logger.error(f"No feasible {family.value} subsolution (best margin {best_margin:.3e})")
            raise SearchExhausted(
                f"no feasible {family.value} subsolution in the search box",
                best_margin=float(best_margin),
                best_params=best_params,
            )

        field, params, margin = chosen
        logger.info(f"Subsolution {family.value} {params} with margin {margin:.3e}")
        upper = self.solve_supersolution(prob, time_steps) if supersolution is None else supersolution
        return BarrierPair(lower=field, upper=upper, family=family, params=params, margin=margin)

    # ============================================
    # Supersolution
    # ============================================

    def solve_supersolution(self, prob: ContinuityProblem, time_steps: int, tol: float = 1e-10) -> SpaceTimeField:
        """Solve n + u_tt + Δu + nXu = 0 with the problem's boundary data."""
        n = prob.n
        size = self.domain.size
        interior = time_steps - 1
        dt = 1.0 / time_steps
        start = SpaceTimeField.linear_interpolation(self.domain, time_steps, prob.phi0, prob.phi1)

        def residual(field: SpaceTimeField) -> np.ndarray:
            values = field.values
            u_tt = (values[..., 2:] - 2.0 * values[..., 1:-1] + values[..., :-2]) / dt ** 2
            laplacian = self.geometry.chern_laplacian(prob.metric, values)[..., 1:-1]
            return n + u_tt + laplacian + n * prob.x_field[..., None] * values[..., 1:-1]

        d_tt = sparse.diags(
            [np.ones(interior - 1), -2.0 * np.ones(interior), np.ones(interior - 1)], [-1, 0, 1]
        ) / dt ** 2
        X = np.broadcast_to(prob.x_field[..., None], self.domain.shape + (interior,)).reshape(-1)
        matrix = (
            sparse.kron(sparse.identity(size), d_tt)
            + sparse.kron(sparse.csr_matrix(self.geodesic.spatial_laplacian_matrix(prob)), sparse.identity(interior))
            + sparse.diags(n * X)
        )
        r0 = residual(start)
        correction = spsolve(sparse.csc_matrix(matrix), -r0.reshape(-1))
        values = start.values.copy()
        values[..., 1:-1] += correction.reshape(r0.shape)
        upper = start.with_values(values)

        final = float(np.max(np.abs(residual(upper))))
        if not np.isfinite(final) or final > tol:
            logger.error(f"Supersolution residual {final:.3e} exceeds {tol:.1e}")
            raise LinearSolveError(f"supersolution residual {final:.3e} exceeds {tol:.1e}", iterate=upper)
        return upper
