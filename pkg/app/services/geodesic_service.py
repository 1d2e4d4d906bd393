"""
Geodesic Service
Assembly and solution of the perturbed geodesic equation on M×[0,1]:
operator evaluation, exact discrete linearization, damped Newton and the
continuity path in s, plus the energy functional.
"""
from typing import Dict, Optional, Tuple
import logging

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from app.core.config import settings
from app.core.exceptions import (
    ConeExit,
    LineSearchFail,
    LinearSolveError,
    MaxIterations,
    PathStuck,
    PositivityViolation,
    SolverError,
)
from app.schemas.geodesic import (
    ContinuityProblem,
    ContinuityReport,
    OperatorCoefficients,
    PathStep,
    SolverReport,
    SolverStatus,
    SpaceTimeField,
)
from app.services.geometry_service import GeometryService

logger = logging.getLogger(__name__)


def _second_difference(values: np.ndarray, dt: float) -> np.ndarray:
    """φ_tt on every node: centered inside, second-order one-sided at the ends."""
    out = np.empty_like(values)
    out[..., 1:-1] = (values[..., 2:] - 2.0 * values[..., 1:-1] + values[..., :-2]) / dt ** 2
    if values.shape[-1] >= 4:
        out[..., 0] = (2 * values[..., 0] - 5 * values[..., 1] + 4 * values[..., 2] - values[..., 3]) / dt ** 2
        out[..., -1] = (2 * values[..., -1] - 5 * values[..., -2] + 4 * values[..., -3] - values[..., -4]) / dt ** 2
    else:
        out[..., 0] = out[..., 1]
        out[..., -1] = out[..., -2]
    return out


def _sup(field: np.ndarray) -> float:
    return float(np.max(np.abs(field))) if field.size else 0.0


def _argmin_point(field: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(int(np.argmin(field)), field.shape))


class GeodesicService:
    """Operators and solvers for the continuity path P_s on one metric"""

    def __init__(self, geometry: GeometryService):
        self.geometry = geometry
        self.domain = geometry.domain
        self.diff = geometry.diff
        self._laplacian_matrix: Optional[Tuple[object, np.ndarray]] = None

    # ============================================
    # Operator evaluation
    # ============================================

    def operator_coefficients(
        self,
        phi: SpaceTimeField,
        prob: ContinuityProblem,
        phi_t: Optional[np.ndarray] = None,
        phi_tt: Optional[np.ndarray] = None,
    ) -> OperatorCoefficients:
        """A, G, L on every time node; time derivatives may be supplied analytically."""
        g = prob.metric
        n = prob.n
        values = phi.values
        if phi_t is None:
            phi_t = phi.time_derivative()
        if phi_tt is None:
            phi_tt = _second_difference(values, phi.dt)
        X = prob.x_field[..., None]

        laplacian = self.geometry.chern_laplacian(g, values)
        grad_phi_t = self.diff.gradient(phi_t)
        grad_norm_sq = self.geometry.grad_norm_sq(g, phi_t)
        A = n + n * X * values + laplacian
        return OperatorCoefficients(
            phi_t=phi_t,
            phi_tt=phi_tt,
            laplacian=laplacian,
            grad_phi_t=grad_phi_t,
            grad_norm_sq=grad_norm_sq,
            A=A,
            G=phi_tt * A - grad_norm_sq,
            L=prob.epsilon - n * X * phi_t ** 2 / 2.0,
        )

    def residual_from_coefficients(
        self, coeffs: OperatorCoefficients, prob: ContinuityProblem, forcing: np.ndarray
    ) -> np.ndarray:
        """P_s pointwise from precomputed coefficients, without boundary masking."""
        s, n = prob.s, prob.n
        X = prob.x_field[..., None]
        return (
            s * coeffs.G
            + (1.0 - s) * (coeffs.phi_tt + coeffs.A)
            - prob.epsilon
            + (n * s * X / 2.0) * coeffs.phi_t ** 2
            - forcing
        )

    def operator_F(self, phi: SpaceTimeField, prob: ContinuityProblem) -> np.ndarray:
        """Residual of P_s; boundary time slices are identically zero."""
        coeffs = self.operator_coefficients(phi, prob)
        residual = self.residual_from_coefficients(coeffs, prob, prob.forcing_for(phi))
        residual[..., 0] = 0.0
        residual[..., -1] = 0.0
        return residual

    def manufactured_forcing(
        self,
        phi: SpaceTimeField,
        prob: ContinuityProblem,
        phi_t: Optional[np.ndarray] = None,
        phi_tt: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Forcing r with P_s(φ) = 0; analytic time derivatives give the continuous forcing."""
        unforced = prob.model_copy(update={"forcing": None})
        coeffs = self.operator_coefficients(phi, unforced, phi_t=phi_t, phi_tt=phi_tt)
        return self.residual_from_coefficients(coeffs, unforced, np.zeros_like(phi.values))

    # ============================================
    # Linearization
    # ============================================

    def full_linearization(self, phi: SpaceTimeField, prob: ContinuityProblem, u: SpaceTimeField) -> np.ndarray:
        """Directional derivative of P_s at φ along u (u vanishes on the boundary slices)."""
        s, n = prob.s, prob.n
        g = prob.metric
        X = prob.x_field[..., None]
        coeffs = self.operator_coefficients(phi, prob)
        u_values = u.values
        u_t = u.time_derivative()
        u_tt = _second_difference(u_values, u.dt)
        delta_A = n * X * u_values + self.geometry.chern_laplacian(g, u_values)
        grad_term = 2.0 * self.geometry.grad_pair(g, coeffs.phi_t, u_t).real

        out = (
            s * (u_tt * coeffs.A + coeffs.phi_tt * delta_A - grad_term)
            + (1.0 - s) * (u_tt + delta_A)
            + n * s * X * coeffs.phi_t * u_t
        )
        out[..., 0] = 0.0
        out[..., -1] = 0.0
        return out

    def spatial_laplacian_matrix(self, prob: ContinuityProblem) -> np.ndarray:
        """Dense Δ_g on flattened spatial fields."""
        cached = self._laplacian_matrix
        if cached is None or cached[0] is not prob.metric:
            n = prob.n
            size = self.domain.size
            Ginv = prob.metric.inverse.reshape(size, n, n)
            total = np.zeros((size, size), dtype=complex)
            for j in range(n):
                for k in range(n):
                    weight = Ginv[:, k, j]
                    if np.any(weight != 0):
                        total += weight[:, None] * (self.diff.dz_matrix(j) @ self.diff.dzbar_matrix(k))
            self._laplacian_matrix = (prob.metric, total.real)
        return self._laplacian_matrix[1]

    def jacobian(self, phi: SpaceTimeField, prob: ContinuityProblem) -> sparse.csr_matrix:
        """Sparse Jacobian of P_s on interior time nodes, space-major ordering."""
        s, n = prob.s, prob.n
        size = self.domain.size
        interior = phi.time_steps - 1
        dt = phi.dt
        coeffs = self.operator_coefficients(phi, prob)

        def flat(field: np.ndarray) -> np.ndarray:
            return np.ascontiguousarray(field[..., 1:-1]).reshape(size * interior)

        identity_t = sparse.identity(interior, format="csr")
        identity_x = sparse.identity(size, format="csr")
        d_tt = sparse.diags(
            [np.ones(interior - 1), -2.0 * np.ones(interior), np.ones(interior - 1)], [-1, 0, 1]
        ) / dt ** 2
        d_t = sparse.diags([-np.ones(interior - 1), np.ones(interior - 1)], [-1, 1]) / (2.0 * dt)

        X = np.broadcast_to(prob.x_field[..., None], phi.values.shape)
        a_s = flat(s * coeffs.A + (1.0 - s))
        b_s = flat(s * coeffs.phi_tt + (1.0 - s))

        laplacian = sparse.kron(sparse.csr_matrix(self.spatial_laplacian_matrix(prob)), identity_t)
        J = (
            sparse.diags(a_s) @ sparse.kron(identity_x, d_tt)
            + sparse.diags(b_s) @ laplacian
            + sparse.diags(b_s * flat(n * X))
            + sparse.diags(flat(n * s * X * coeffs.phi_t)) @ sparse.kron(identity_x, d_t)
        )
        if s > 0:
            Ginv = prob.metric.inverse
            for k in range(n):
                # w_k = Σ_j g^{jk̄} ∂_j φ_t, paired with ∂_k̄ = ½(∂_x + i∂_y)
                w = flat(np.einsum("...j,...j->...", Ginv[..., None, k, :], coeffs.grad_phi_t))
                d_x = sparse.kron(sparse.csr_matrix(0.5 * self.diff.matrix(2 * k)), d_t)
                d_y = sparse.kron(sparse.csr_matrix(0.5 * self.diff.matrix(2 * k + 1)), d_t)
                real_part = sparse.diags(w.real) @ d_x - sparse.diags(w.imag) @ d_y
                J = J - 2.0 * s * real_part
        return sparse.csr_matrix(J)

    def principal_symbol(self, phi: SpaceTimeField, prob: ContinuityProblem, point: Tuple[int, ...]) -> np.ndarray:
        """Symbol matrix of P_s at (x, t) = point in a unitary frame of g."""
        coeffs = self.operator_coefficients(phi, prob)
        *space, t_index = point
        space = tuple(space)
        s = prob.s
        L = np.linalg.cholesky(prob.metric.g[space])
        v = np.linalg.solve(L, coeffs.grad_phi_t[space + (t_index,)])
        a_s = s * coeffs.A[space + (t_index,)] + 1.0 - s
        b_s = s * coeffs.phi_tt[space + (t_index,)] + 1.0 - s
        return self.symbol_matrix(a_s, b_s, s * v)

    @staticmethod
    def symbol_matrix(a: float, b: float, v: np.ndarray) -> np.ndarray:
        """[[a, −v], [−v^H, b·I]]."""
        v = np.atleast_1d(np.asarray(v, dtype=complex))
        m = v.size
        out = np.zeros((m + 1, m + 1), dtype=complex)
        out[0, 0] = a
        out[0, 1:] = -v
        out[1:, 0] = -np.conj(v)
        out[1:, 1:] = b * np.eye(m)
        return out

    def ellipticity_margin(self, phi: SpaceTimeField, prob: ContinuityProblem) -> np.ndarray:
        """Minimum symbol eigenvalue on every interior node."""
        coeffs = self.operator_coefficients(phi, prob)
        s, n = prob.s, prob.n
        Linv = np.linalg.inv(np.linalg.cholesky(prob.metric.g))[..., None, :, :]
        v = s * np.einsum("...ij,...j->...i", Linv, coeffs.grad_phi_t)
        a_s = s * coeffs.A + 1.0 - s
        b_s = s * coeffs.phi_tt + 1.0 - s
        M = np.zeros(phi.values.shape + (n + 1, n + 1), dtype=complex)
        M[..., 0, 0] = a_s
        M[..., 0, 1:] = -v
        M[..., 1:, 0] = -np.conj(v)
        M[..., 1:, 1:] = b_s[..., None, None] * np.eye(n)
        return np.linalg.eigvalsh(M)[..., 1:-1, 0]

    # ============================================
    # Newton
    # ============================================

    def _cone_minima(self, coeffs: OperatorCoefficients, s: float) -> Dict[str, float]:
        cone = coeffs.cone(s)
        return {key: float(np.min(value[..., 1:-1])) for key, value in cone.items()}

    def newton_solve(
        self,
        prob: ContinuityProblem,
        init: SpaceTimeField,
        max_iter: Optional[int] = None,
        tol: Optional[float] = None,
        min_step: Optional[float] = None,
        cone_fraction: Optional[float] = None,
        armijo_c: Optional[float] = None,
    ) -> Tuple[SpaceTimeField, SolverReport]:
        """Damped Newton for P_s(φ) = 0 with fraction-to-boundary and Armijo damping."""
        defaults = settings.numerics_defaults
        max_iter = max_iter or defaults["max_iter"]
        tol = tol or defaults["tol"]
        min_step = min_step or defaults["min_step"]
        cone_fraction = defaults["cone_fraction"] if cone_fraction is None else cone_fraction
        armijo_c = defaults["armijo_c"] if armijo_c is None else armijo_c
        s = prob.s
        forcing = prob.forcing_for(init)

        phi = init
        coeffs = self.operator_coefficients(phi, prob)
        residual = self.residual_from_coefficients(coeffs, prob, forcing)[..., 1:-1]
        cone = self._cone_minima(coeffs, s)
        inside = min(cone.values()) > 0
        if s == 1.0 and not inside:
            cone_field = coeffs.cone(s)["G"][..., 1:-1]
            point = _argmin_point(cone_field)
            logger.error(f"Newton init lies outside the cone at s = 1 (min G = {cone['G']:.3e})")
            raise ConeExit(
                "initial iterate is outside the ellipticity cone",
                iterate=phi, point=point, s=s, cone=cone,
            )

        report = SolverReport(
            status=SolverStatus.MAX_ITERATIONS, s=s, iterations=0,
            residual=_sup(residual), residual_history=[_sup(residual)], cone_history=[cone],
        )

        for iteration in range(1, max_iter + 1):
            if _sup(residual) <= tol:
                report.status = SolverStatus.CONVERGED
                report.iterations = iteration - 1
                report.residual = _sup(residual)
                return phi, report

            J = self.jacobian(phi, prob)
            rhs = -residual.reshape(-1)
            try:
                step_values = spsolve(J.tocsc(), rhs)
            except RuntimeError as e:
                logger.error(f"Linear solve failed at s = {s}: {e}")
                raise LinearSolveError(str(e), iterate=phi, s=s)
            if not np.all(np.isfinite(step_values)):
                logger.error(f"Linear solve produced non-finite values at s = {s}")
                raise LinearSolveError("singular Newton system", iterate=phi, s=s)
            direction = np.zeros_like(phi.values)
            direction[..., 1:-1] = step_values.reshape(residual.shape)

            norm = float(np.linalg.norm(residual))
            step = 1.0
            cone_rejected = False
            accepted = False
            while step >= min_step:
                trial = phi.with_values(phi.values + step * direction)
                trial_coeffs = self.operator_coefficients(trial, prob)
                trial_cone = self._cone_minima(trial_coeffs, s)
                if inside and (
                    trial_cone["a"] <= 0
                    or trial_cone["b"] <= 0
                    or trial_cone["G"] < cone_fraction * cone["G"]
                ):
                    cone_rejected = True
                    step *= 0.5
                    continue
                trial_residual = self.residual_from_coefficients(trial_coeffs, prob, forcing)[..., 1:-1]
                trial_norm = float(np.linalg.norm(trial_residual))
                if trial_norm <= (1.0 - armijo_c * step) * norm or _sup(trial_residual) <= tol:
                    accepted = True
                    break
                cone_rejected = False
                step *= 0.5

            if not accepted:
                cone_field = coeffs.cone(s)["G"][..., 1:-1]
                point = _argmin_point(cone_field)
                if cone_rejected:
                    logger.error(f"Damping stalled at the cone boundary (s = {s}, iteration {iteration})")
                    raise ConeExit(
                        "damping stalled at the ellipticity cone boundary",
                        iterate=phi, point=point, s=s, cone=cone,
                    )
                logger.error(f"Line search failed (s = {s}, iteration {iteration})")
                raise LineSearchFail(
                    "Armijo backtracking found no acceptable step",
                    iterate=phi, point=_argmin_point(-np.abs(residual)), s=s,
                )

            phi, coeffs, residual, cone = trial, trial_coeffs, trial_residual, trial_cone
            inside = inside or min(cone.values()) > 0
            report.residual_history.append(_sup(residual))
            report.damping_history.append(step)
            report.cone_history.append(cone)
            logger.info(f"Newton s={s:.6g} it={iteration} residual={_sup(residual):.3e} step={step:.3g}")

        if _sup(residual) <= tol:
            report.status = SolverStatus.CONVERGED
            report.iterations = max_iter
            report.residual = _sup(residual)
            return phi, report
        logger.error(f"Newton did not converge in {max_iter} iterations at s = {s}")
        raise MaxIterations(
            f"no convergence after {max_iter} iterations",
            iterate=phi, point=_argmin_point(-np.abs(residual)), s=s,
            residual=_sup(residual),
        )

    # ============================================
    # Continuity path
    # ============================================

    def continuity_solve(
        self,
        prob: ContinuityProblem,
        time_steps: int,
        s_step: Optional[float] = None,
        s_min_step: Optional[float] = None,
        continuation: bool = True,
        **newton_options,
    ) -> Tuple[SpaceTimeField, ContinuityReport]:
        """March s from 0 to 1 with warm-started Newton and step halving."""
        s_step = s_step or settings.S_INITIAL_STEP
        s_min_step = s_min_step or settings.S_MIN_STEP
        trace = ContinuityReport()
        start = SpaceTimeField.linear_interpolation(self.domain, time_steps, prob.phi0, prob.phi1)

        if not continuation:
            phi, report = self.newton_solve(prob.at(1.0), start, **newton_options)
            trace.steps.append(PathStep(
                s=1.0, step=1.0, accepted=True, iterations=report.iterations,
                residual=report.residual, min_G=report.cone_history[-1]["G"],
            ))
            trace.final = report
            return phi, trace

        phi, report = self.newton_solve(prob.at(0.0), start, **newton_options)
        trace.steps.append(PathStep(
            s=0.0, step=0.0, accepted=True, iterations=report.iterations,
            residual=report.residual, min_G=report.cone_history[-1]["G"],
        ))
        s, previous = 0.0, None
        step = s_step
        while s < 1.0:
            target = min(1.0, s + step)
            init = self._predict(phi, previous, s, target, prob)
            try:
                candidate, report = self.newton_solve(prob.at(target), init, **newton_options)
            except SolverError as e:
                trace.steps.append(PathStep(s=target, step=step, accepted=False, error=type(e).__name__))
                step *= 0.5
                logger.warning(f"Step to s = {target:.6g} failed ({type(e).__name__}); halving to {step:.3g}")
                if step < s_min_step:
                    logger.error(f"Continuity path stuck at s = {s:.6g}")
                    raise PathStuck(
                        f"step fell below {s_min_step} at s = {s}",
                        iterate=phi, point=e.point, s=s, cause=type(e).__name__,
                    )
                continue
            trace.steps.append(PathStep(
                s=target, step=step, accepted=True, iterations=report.iterations,
                residual=report.residual, min_G=report.cone_history[-1]["G"],
            ))
            logger.info(f"Accepted s = {target:.6g} after {report.iterations} Newton iterations")
            previous = (s, phi)
            s, phi = target, candidate
            trace.final = report
        return phi, trace

    def _predict(
        self,
        phi: SpaceTimeField,
        previous: Optional[Tuple[float, SpaceTimeField]],
        s: float,
        target: float,
        prob: ContinuityProblem,
    ) -> SpaceTimeField:
        """Secant extrapolation along the path; falls back to φ_s outside the cone."""
        if previous is None:
            return phi
        s_prev, phi_prev = previous
        ratio = (target - s) / (s - s_prev)
        guess = phi.with_values(phi.values + ratio * (phi.values - phi_prev.values))
        cone = self._cone_minima(self.operator_coefficients(guess, prob), target)
        if min(cone.values()) > 0:
            return guess
        return phi

    # ============================================
    # Energy
    # ============================================

    def energy(self, path: SpaceTimeField, g, p: int, x_field: Optional[np.ndarray] = None) -> float:
        """∫₀¹ ⨍_M φ_t²(1 + Δφ/n + Xφ) ω^n dt with midpoint quadrature in t."""
        n = self.domain.n
        X = self.geometry.x_wedge(g, p) if x_field is None else x_field
        values = path.values
        factor = 1.0 + self.geometry.chern_laplacian(g, values) / n + X[..., None] * values
        if np.any(factor <= 0):
            point = _argmin_point(factor)
            logger.error(f"Path leaves the mixed-volume set at {point}")
            raise PositivityViolation(
                f"mixed-volume positivity fails at (x, t) index {point}",
                point=point, value=float(factor[point]),
            )
        phi_t = np.diff(values, axis=-1) / path.dt
        midpoint = 0.5 * (factor[..., 1:] + factor[..., :-1])
        weight = g.det
        integrand = np.sum(phi_t ** 2 * midpoint, axis=-1) * path.dt
        return float(np.mean(weight * integrand) / np.mean(weight))

    def energy_first_variation(self, phi: SpaceTimeField, prob: ContinuityProblem, psi: SpaceTimeField) -> float:
        """−(2/n)·⨍∫ ψ(F − L + ε), the derivative of the energy along ψ."""
        coeffs = self.operator_coefficients(phi, prob)
        n = prob.n
        density = psi.values * (coeffs.G - coeffs.L + prob.epsilon)
        weight = prob.metric.det[..., None]
        integral = np.sum(density[..., 1:-1] * weight, axis=-1) * phi.dt
        return float(-2.0 / n * np.mean(integral) / np.mean(prob.metric.det))
