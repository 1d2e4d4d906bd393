"""
Calabi-Yau Service
Solves log det ω̃_u = ψ + b + log det α for (u, b), recovers the balanced
metric ω_u and checks its Chern-Ricci form.
"""
from math import factorial
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    ConeExit,
    GeometryError,
    InvalidDegree,
    LinearSolveError,
    LineSearchFail,
    MaxIterations,
)
from app.schemas.cy import AsthenoClass, AsthenoReport, ChiPlugin, CYProblem, CYSolution
from app.schemas.geometry import ComplexForm, HermitianMetricField
from app.services import forms
from app.services.geometry_service import GeometryService

logger = logging.getLogger(__name__)


def _hermitian(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))


# ============================================
# χ plug-ins
# ============================================

class ZeroChi:
    """χ ≡ 0."""

    def __init__(self, geometry: GeometryService, alpha: HermitianMetricField):
        self.n = geometry.n
        self.shape = geometry.domain.shape

    def holomorphic(self) -> List[Optional[np.ndarray]]:
        return [None] * self.n

    def antiholomorphic(self) -> List[Optional[np.ndarray]]:
        return [None] * self.n

    def apply(self, u: np.ndarray, diff) -> np.ndarray:
        return np.zeros(self.shape + (self.n, self.n), dtype=complex)


class ExactChi(ZeroChi):
    """χ(u) = ⋆(i∂u∧∂̄β − i∂̄u∧∂β)/(n−1)! with β = α^{n−2}.

    Linear in u: χ(u) = Σ_j ∂_j u·C_j + Σ_k ∂_k̄ u·D_k with fixed matrix fields.
    """

    def __init__(self, geometry: GeometryService, alpha: HermitianMetricField):
        super().__init__(geometry, alpha)
        domain = geometry.domain
        n = self.n
        beta = forms.power(geometry.metric_form(alpha), n - 2)
        del_beta = forms.del_(beta, geometry.diff)
        dbar_beta = forms.dbar(beta, geometry.diff)
        ones = np.ones(domain.shape, dtype=complex)
        scale = 1.0 / factorial(n - 1)
        self._C: List[Optional[np.ndarray]] = []
        self._D: List[Optional[np.ndarray]] = []
        for j in range(n):
            dz = ComplexForm(domain=domain, p=1, q=0, coeffs={((j,), ()): ones})
            term = forms.wedge(dz, dbar_beta) * (1j * scale)
            self._C.append(self._star_matrix(geometry, term, alpha))
            dzbar = ComplexForm(domain=domain, p=0, q=1, coeffs={((), (j,)): ones})
            term = forms.wedge(dzbar, del_beta) * (-1j * scale)
            self._D.append(self._star_matrix(geometry, term, alpha))

    @staticmethod
    def _star_matrix(geometry: GeometryService, form: ComplexForm, alpha: HermitianMetricField) -> Optional[np.ndarray]:
        if not form.coeffs:
            return None
        return forms.matrix_from_form(geometry.hodge_star(form, alpha))

    def holomorphic(self) -> List[Optional[np.ndarray]]:
        return self._C

    def antiholomorphic(self) -> List[Optional[np.ndarray]]:
        return self._D

    def apply(self, u: np.ndarray, diff) -> np.ndarray:
        out = super().apply(u, diff)
        for j, C in enumerate(self._C):
            if C is not None:
                out = out + diff.dz(u, j)[..., None, None] * C
        for k, D in enumerate(self._D):
            if D is not None:
                out = out + diff.dzbar(u, k)[..., None, None] * D
        return out


CHI_REGISTRY = {
    ChiPlugin.NONE: ZeroChi,
    ChiPlugin.EXACT: ExactChi,
}


class CYService:
    """Balanced Calabi-Yau equation on one GridDomain"""

    def __init__(self, geometry: GeometryService):
        self.geometry = geometry
        self.domain = geometry.domain
        self.diff = geometry.diff

    # ============================================
    # E and the Astheno-Kähler classification
    # ============================================

    def E_matrix(self, alpha: HermitianMetricField) -> np.ndarray:
        """Matrix of E = ⋆(i∂∂̄α^{n−2})/(n−1)!."""
        n = self.geometry.n
        if n < 3:
            raise InvalidDegree(f"E requires n >= 3, got n = {n}")
        top = forms.i_ddbar(forms.power(self.geometry.metric_form(alpha), n - 2), self.diff)
        star = self.geometry.hodge_star(top * (1.0 / factorial(n - 1)), alpha)
        return _hermitian(forms.matrix_from_form(star))

    def relative_eigenvalues(self, alpha: HermitianMetricField, M: np.ndarray) -> np.ndarray:
        """Eigenvalues of M against α."""
        Linv = np.linalg.inv(np.linalg.cholesky(alpha.g))
        return np.linalg.eigvalsh(_hermitian(Linv @ M @ np.conj(np.swapaxes(Linv, -1, -2))))

    def compute_E(
        self,
        alpha: HermitianMetricField,
        omega_tilde: Optional[np.ndarray] = None,
        tol: Optional[float] = None,
    ) -> AsthenoReport:
        tol = settings.BALANCED_TOL if tol is None else tol
        n = self.geometry.n
        E = self.E_matrix(alpha)
        eigenvalues = self.relative_eigenvalues(alpha, E)
        lo, hi = float(np.min(eigenvalues)), float(np.max(eigenvalues))
        if hi <= tol and lo >= -tol:
            classification = AsthenoClass.ASTHENO
        elif hi <= tol:
            classification = AsthenoClass.SUB
        elif lo >= -tol:
            classification = AsthenoClass.SUPER
        else:
            classification = AsthenoClass.INDEFINITE
            logger.warning(f"E is indefinite against alpha (eigenvalues in [{lo:.3e}, {hi:.3e}])")

        x_e = np.einsum("...kj,...jk->...", alpha.inverse, E).real
        x_alpha = self.geometry.x_wedge(alpha, n - 1)
        trace_against = None
        if omega_tilde is not None:
            trace_against = float(np.max(np.einsum("...kj,...jk->...", np.linalg.inv(omega_tilde), E).real))
        return AsthenoReport(
            E=E,
            min_eigenvalue=lo,
            max_eigenvalue=hi,
            classification=classification,
            x_e=x_e,
            trace_discrepancy=float(np.max(np.abs(x_e - n * x_alpha))),
            trace_against=trace_against,
        )

    # ============================================
    # Assembly
    # ============================================

    def omega_h(self, prob: CYProblem) -> np.ndarray:
        """Matrix of ⋆(ω^{n−1}/(n−1)!) with respect to α."""
        Q = self.geometry.normalized_power(prob.omega, prob.n - 1)
        return _hermitian(forms.matrix_from_form(self.geometry.hodge_star(Q, prob.alpha)))

    def chi_plugin(self, prob: CYProblem):
        return CHI_REGISTRY[ChiPlugin(prob.chi)](self.geometry, prob.alpha)

    def assemble_tilde_omega(
        self,
        u: np.ndarray,
        b: float,
        prob: CYProblem,
        omega_h: Optional[np.ndarray] = None,
        E: Optional[np.ndarray] = None,
        chi=None,
    ) -> Tuple[np.ndarray, np.ndarray, float]:
        """ω̃_u, the pointwise residual log det ω̃_u − ψ − b − log det α, and the positivity margin."""
        n = prob.n
        alpha = prob.alpha
        u = np.asarray(u, dtype=float)
        omega_h = self.omega_h(prob) if omega_h is None else omega_h
        E = self.E_matrix(alpha) if E is None else E
        chi = self.chi_plugin(prob) if chi is None else chi

        laplacian = self.geometry.chern_laplacian(alpha, u)
        hessian = self.diff.complex_hessian(u)
        W = (
            omega_h
            + (laplacian[..., None, None] * alpha.g - hessian) / (n - 1)
            + chi.apply(u, self.diff)
            + E * u[..., None, None]
        )
        W = _hermitian(W)
        margin = float(np.min(self.relative_eigenvalues(alpha, W)))
        sign, logdet = np.linalg.slogdet(W)
        logdet = np.where(sign.real > 0, logdet, np.nan)
        residual = logdet - prob.psi - b - np.log(alpha.det)
        return W, residual, margin

    # ============================================
    # Newton solver
    # ============================================

    def _jacobian(self, W: np.ndarray, prob: CYProblem, E: np.ndarray, chi) -> np.ndarray:
        """Dense derivative of log det ω̃_u in u: tr(ω̃⁻¹ δω̃)."""
        n = prob.n
        size = self.domain.size
        alpha = prob.alpha
        Winv = np.linalg.inv(W).reshape(size, n, n)
        alpha_g = alpha.g.reshape(size, n, n)
        Ainv = alpha.inverse.reshape(size, n, n)

        lap_weight = np.einsum("xba,xab->x", Winv, alpha_g) / (n - 1)
        J = np.diag(np.einsum("xba,xab->x", Winv, E.reshape(size, n, n))).astype(complex)
        for j in range(n):
            for k in range(n):
                second = self.diff.dz_matrix(j) @ self.diff.dzbar_matrix(k)
                weight = lap_weight * Ainv[:, k, j] - Winv[:, k, j] / (n - 1)
                J += weight[:, None] * second
        for j, C in enumerate(chi.holomorphic()):
            if C is not None:
                weight = np.einsum("xba,xab->x", Winv, C.reshape(size, n, n))
                J += weight[:, None] * self.diff.dz_matrix(j)
        for k, D in enumerate(chi.antiholomorphic()):
            if D is not None:
                weight = np.einsum("xba,xab->x", Winv, D.reshape(size, n, n))
                J += weight[:, None] * self.diff.dzbar_matrix(k)
        return J.real

    def solve_cy(
        self,
        prob: CYProblem,
        init: Optional[np.ndarray] = None,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
        min_step: Optional[float] = None,
        cone_fraction: Optional[float] = None,
    ) -> CYSolution:
        """Damped Newton on (u, b) with mean(u) held at prob.mean_u."""
        defaults = settings.numerics_defaults
        tol = tol or defaults["tol"]
        max_iter = max_iter or defaults["max_iter"]
        min_step = min_step or defaults["min_step"]
        cone_fraction = defaults["cone_fraction"] if cone_fraction is None else cone_fraction
        n = prob.n
        size = self.domain.size
        shape = self.domain.shape

        self._check_balanced(prob)
        if n >= 3:
            report = self.compute_E(prob.alpha)
            if report.classification == AsthenoClass.INDEFINITE:
                logger.warning("Solving with indefinite E; the run is an experiment")
            E = report.E
        else:
            E = np.zeros(shape + (n, n), dtype=complex)
        omega_h = self.omega_h(prob)
        chi = self.chi_plugin(prob)

        u = np.zeros(shape) if init is None else np.array(init, dtype=float)
        u = u - np.mean(u) + prob.mean_u
        b = 0.0
        W, residual, margin = self.assemble_tilde_omega(u, b, prob, omega_h, E, chi)
        if not margin > 0:
            point = np.unravel_index(int(np.argmin(np.linalg.eigvalsh(W)[..., 0])), shape)
            logger.error(f"Initial omega_tilde is not positive (margin {margin:.3e})")
            raise ConeExit("initial omega_tilde is not positive", iterate=u, point=[int(i) for i in point])
        b = float(np.mean(residual))
        residual = residual - np.mean(residual)
        history = [float(np.max(np.abs(residual)))]

        for iteration in range(1, max_iter + 1):
            if history[-1] <= tol:
                return self._solution(prob, u, b, W, residual, margin, iteration - 1, history)

            J = self._jacobian(W, prob, E, chi)
            system = np.zeros((size + 1, size + 1))
            system[:size, :size] = J
            system[:size, size] = -1.0
            system[size, :size] = 1.0 / size
            rhs = np.concatenate([-residual.reshape(-1), [prob.mean_u - float(np.mean(u))]])
            try:
                delta = np.linalg.solve(system, rhs)
            except np.linalg.LinAlgError as e:
                logger.error(f"Bordered CY system is singular: {e}")
                raise LinearSolveError(str(e), iterate=u)
            du, db = delta[:size].reshape(shape), float(delta[size])

            norm = float(np.linalg.norm(residual))
            step, accepted, cone_rejected = 1.0, False, False
            while step >= min_step:
                trial_u = u + step * du
                trial_b = b + step * db
                trial_W, trial_residual, trial_margin = self.assemble_tilde_omega(trial_u, trial_b, prob, omega_h, E, chi)
                if not trial_margin >= cone_fraction * margin or not np.all(np.isfinite(trial_residual)):
                    cone_rejected = True
                    step *= 0.5
                    continue
                if np.linalg.norm(trial_residual) <= (1.0 - 1e-4 * step) * norm or np.max(np.abs(trial_residual)) <= tol:
                    accepted = True
                    break
                cone_rejected = False
                step *= 0.5

            if not accepted:
                if cone_rejected:
                    logger.error(f"CY damping stalled at the positivity boundary (iteration {iteration})")
                    raise ConeExit("omega_tilde loses positivity and damping stalled", iterate=u)
                logger.error(f"CY line search failed (iteration {iteration})")
                raise LineSearchFail("CY line search found no acceptable step", iterate=u)

            u = trial_u - np.mean(trial_u) + prob.mean_u
            W, residual, margin = self.assemble_tilde_omega(u, trial_b, prob, omega_h, E, chi)
            b = trial_b + float(np.mean(residual))
            residual = residual - np.mean(residual)
            history.append(float(np.max(np.abs(residual))))
            logger.info(f"CY Newton it={iteration} residual={history[-1]:.3e} b={b:.6g} step={step:.3g}")

        if history[-1] <= tol:
            return self._solution(prob, u, b, W, residual, margin, max_iter, history)
        logger.error(f"CY Newton did not converge in {max_iter} iterations")
        raise MaxIterations(f"no convergence after {max_iter} iterations", iterate=u, residual=history[-1])

    def _solution(self, prob, u, b, W, residual, margin, iterations, history) -> CYSolution:
        alpha = prob.alpha
        E = self.E_matrix(alpha) if prob.n >= 3 else np.zeros_like(W)
        trace = np.einsum("...kj,...jk->...", alpha.inverse, W).real
        diagnostics = {
            "min_trace": float(np.min(trace)),
            "max_trace_E_against_solution": float(
                np.max(np.einsum("...kj,...jk->...", np.linalg.inv(W), E).real)
            ),
        }
        return CYSolution(
            u=u,
            b=float(b),
            omega_tilde=HermitianMetricField(domain=self.domain, g=W),
            residual=float(np.max(np.abs(residual))),
            margin=margin,
            iterations=iterations,
            residual_history=history,
            diagnostics=diagnostics,
        )

    def _check_balanced(self, prob: CYProblem) -> None:
        residual = self.geometry.balanced_residual(prob.omega)
        if residual > settings.BALANCED_TOL:
            logger.error(f"omega is not balanced (residual {residual:.3e})")
            raise GeometryError(f"omega must be balanced; residual {residual:.3e}")

    # ============================================
    # Recovered metric and Ricci form
    # ============================================

    def recover_balanced_metric(self, u: np.ndarray, prob: CYProblem) -> Tuple[HermitianMetricField, Dict[str, float]]:
        """ω_u with ω_u^{n−1} = ω^{n−1} + i∂∂̄(u·α^{n−2}), via the Michelsohn root."""
        n = prob.n
        alpha_power = forms.power(self.geometry.metric_form(prob.alpha), n - 2)
        correction = forms.i_ddbar(alpha_power * np.asarray(u, dtype=float), self.diff)
        Q = self.geometry.normalized_power(prob.omega, n - 1) + correction * (1.0 / factorial(n - 1))
        omega_u = self.geometry.michelsohn_root(Q)
        mean_shift = max(
            (float(np.max(np.abs(np.mean(c)))) for c in correction.coeffs.values()),
            default=0.0,
        )
        diagnostics = {
            "balanced_residual": self.geometry.balanced_residual(omega_u),
            "cohomology_residual": mean_shift,
        }
        if prob.rho is not None:
            diagnostics["ricci_residual"] = (self.chern_ricci(omega_u) - self.ricci_target(prob)).sup_norm()
        return omega_u, diagnostics

    def chern_ricci(self, g: HermitianMetricField) -> ComplexForm:
        """Ric^C = −i∂∂̄ log det g."""
        return forms.i_ddbar(forms.scalar_form(self.domain, np.log(g.det)), self.diff) * -1.0

    def ricci_target(self, prob: CYProblem) -> ComplexForm:
        """Ψ = Ric^C(ω) + i∂∂̄ρ."""
        rho = np.zeros(self.domain.shape) if prob.rho is None else prob.rho
        return self.chern_ricci(prob.omega) + forms.i_ddbar(forms.scalar_form(self.domain, rho), self.diff)

    def psi_from_rho(self, alpha: HermitianMetricField, omega: HermitianMetricField, rho: np.ndarray) -> np.ndarray:
        """ψ with Ric^C(ω_u) = Ric^C(ω) + i∂∂̄ρ for the solution ω_u."""
        n = self.domain.n
        return (n - 1) * (np.log(omega.det) - np.log(alpha.det) - rho)

    def c0_report(self, solution: CYSolution, prob: CYProblem) -> Dict[str, float]:
        u = solution.u
        trace = np.einsum("...kj,...jk->...", prob.alpha.inverse, solution.omega_tilde.g).real
        return {
            "sup_u": float(np.max(np.abs(u))),
            "oscillation_u": float(np.max(u) - np.min(u)),
            "sup_psi": float(np.max(np.abs(prob.psi))),
            "min_trace": float(np.min(trace)),
        }
