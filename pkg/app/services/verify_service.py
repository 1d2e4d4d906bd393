"""
Verify Service
Runtime checks of computed geodesic solutions (sandwich, time monotonicity,
estimate ratios) and seeded property tests of the concavity facts the
existence argument rests on.
"""
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import sympy as sp

from app.core.config import settings
from app.core.exceptions import PositivityViolation
from app.schemas.geodesic import BarrierPair, ContinuityProblem, SpaceTimeField
from app.schemas.verify import CheckResult, EnergyProbeRow, EstimateReport, MarginReport
from app.services.geodesic_service import GeodesicService

logger = logging.getLogger(__name__)


def _margin(field: np.ndarray) -> MarginReport:
    index = np.unravel_index(int(np.argmin(field)), field.shape)
    return MarginReport(margin=float(field[index]), point=[int(i) for i in index])


# ============================================
# Model functions of the concavity lemmas
# ============================================

def log_discriminant(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """log(xy − Σ z_k²) for real z stacked on the last axis."""
    return np.log(x * y - np.sum(z ** 2, axis=-1))


def gap_function(M: np.ndarray) -> np.ndarray:
    """M⁰⁰·Σ Mⁱⁱ − Σ |Mⁱ⁰|² on (m+1)×(m+1) matrices."""
    diagonal = np.einsum("...ii->...i", M)
    return (M[..., 0, 0] * np.sum(diagonal[..., 1:], axis=-1) - np.sum(np.abs(M[..., 1:, 0]) ** 2, axis=-1)).real


def gap_gradient(M: np.ndarray) -> np.ndarray:
    """Derivative of gap_function as a matrix: F⁰⁰ = ΣMⁱⁱ, Fⁱⁱ = M⁰⁰, Fⁱ⁰ = F⁰ⁱ = −Mⁱ⁰."""
    m = M.shape[-1] - 1
    diagonal = np.einsum("...ii->...i", M)
    D = np.zeros_like(M)
    D[..., 0, 0] = np.sum(diagonal[..., 1:], axis=-1)
    idx = np.arange(1, m + 1)
    D[..., idx, idx] = M[..., 0, 0][..., None]
    D[..., 1:, 0] = -M[..., 1:, 0]
    D[..., 0, 1:] = -np.conj(M[..., 1:, 0])
    return D


def in_gap_cone(M: np.ndarray) -> np.ndarray:
    diagonal = np.einsum("...ii->...i", M).real
    return (diagonal[..., 0] > 0) & (np.sum(diagonal[..., 1:], axis=-1) > 0) & (gap_function(M) > 0)


def bisect_gap_epsilon(A: np.ndarray, B: np.ndarray, iterations: int = 80) -> float:
    """Largest ε with B − εI in the cone and F(B − εI) ≥ F(A)."""
    m = B.shape[-1] - 1
    identity = np.eye(m + 1)
    target = float(gap_function(A))
    diagonal = np.diag(B).real
    lo, hi = 0.0, float(min(diagonal[0], np.sum(diagonal[1:]) / m))
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        shifted = B - mid * identity
        if in_gap_cone(shifted) and gap_function(shifted) >= target:
            lo = mid
        else:
            hi = mid
    return lo


@lru_cache(maxsize=None)
def _plurisub_hessian(m: int):
    """Vectorized complex Hessian of −log(xy − Σ|z_k|²) in z, from sympy."""
    x, y = sp.symbols("x y", positive=True)
    a = sp.symbols(f"a0:{m}", real=True)
    b = sp.symbols(f"b0:{m}", real=True)
    g = -sp.log(x * y - sum(a[k] ** 2 + b[k] ** 2 for k in range(m)))
    entries = []
    for j in range(m):
        row = []
        for k in range(m):
            # ∂_j∂_k̄ = ¼(∂_{a_j}∂_{a_k} + ∂_{b_j}∂_{b_k} + i(∂_{a_j}∂_{b_k} − ∂_{b_j}∂_{a_k}))
            real = sp.diff(g, a[j], a[k]) + sp.diff(g, b[j], b[k])
            imag = sp.diff(g, a[j], b[k]) - sp.diff(g, b[j], a[k])
            row.append((real + sp.I * imag) / 4)
        entries.append(row)
    return sp.lambdify((x, y, a, b), sp.Matrix(entries), "numpy")


class VerifyService:
    """Runtime checks and property tests"""

    def __init__(self, geodesic: GeodesicService):
        self.geodesic = geodesic
        self.geometry = geodesic.geometry
        self.domain = geodesic.domain

    # ============================================
    # Checks on computed solutions
    # ============================================

    def check_sandwich(self, phi: SpaceTimeField, barriers: BarrierPair) -> Dict[str, MarginReport]:
        """min_Y(φ − Φ_sub) and min_Y(Φ_super − φ)."""
        return {
            "lower": _margin(phi.values - barriers.lower.values),
            "upper": _margin(barriers.upper.values - phi.values),
        }

    def check_time_monotone(self, phi: SpaceTimeField) -> MarginReport:
        """min over Y of min(φ_t − φ_t(·,0), φ_t(·,1) − φ_t)."""
        phi_t = phi.time_derivative()
        lower = phi_t - phi_t[..., :1]
        upper = phi_t[..., -1:] - phi_t
        return _margin(np.minimum(lower, upper))

    def estimate(
        self, phi: SpaceTimeField, prob: ContinuityProblem, barriers: Optional[BarrierPair] = None
    ) -> EstimateReport:
        g = prob.metric
        coeffs = self.geodesic.operator_coefficients(phi, prob.at(1.0))
        eigenvalues = self.geometry.complex_hessian_eigenvalues(g, phi.values)
        lambda1 = float(np.max(np.abs(eigenvalues)))
        grad_sq = self.geometry.grad_norm_sq(g, phi.values)
        K = float(np.max(1.0 + grad_sq))
        sandwich = self.check_sandwich(phi, barriers) if barriers is not None else None
        return EstimateReport(
            epsilon=prob.epsilon,
            sup_phi_tt=float(np.max(np.abs(coeffs.phi_tt[..., 1:-1]))),
            lambda1=lambda1,
            K=K,
            sup_grad=float(np.sqrt(np.max(grad_sq))),
            hessian_ratio=lambda1 / K,
            sandwich_lower=sandwich["lower"].margin if sandwich else None,
            sandwich_upper=sandwich["upper"].margin if sandwich else None,
            monotone_margin=self.check_time_monotone(phi).margin,
            ellipticity_margin=float(np.min(self.geodesic.ellipticity_margin(phi, prob.at(1.0)))),
        )

    def estimate_ratios(
        self, family: Sequence[Tuple[SpaceTimeField, ContinuityProblem, Optional[BarrierPair]]]
    ) -> List[EstimateReport]:
        """One EstimateReport per member of an ε-sweep, sorted by decreasing ε."""
        reports = [self.estimate(phi, prob, barriers) for phi, prob, barriers in family]
        return sorted(reports, key=lambda r: -r.epsilon)

    @staticmethod
    def sweep_drift(reports: Sequence[EstimateReport], budget: Optional[float] = None) -> CheckResult:
        """Relative spread of sup|φ_tt| across a sweep against the drift budget."""
        budget = settings.SWEEP_DRIFT_BUDGET if budget is None else budget
        values = np.array([r.sup_phi_tt for r in reports])
        drift = float((values.max() - values.min()) / values.max()) if values.size and values.max() > 0 else 0.0
        return CheckResult(
            name="sweep_drift",
            passed=drift < budget and all(r.finite for r in reports),
            samples=len(reports),
            worst=drift,
            details={"budget": budget, "sup_phi_tt": values.tolist()},
        )

    # ============================================
    # Concavity and plurisubharmonicity
    # ============================================

    @staticmethod
    def _sample_lorentz(rng: np.random.Generator, count: int, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = rng.uniform(0.05, 3.0, count)
        y = rng.uniform(0.05, 3.0, count)
        direction = rng.normal(size=(count, m))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = np.sqrt(x * y) * rng.uniform(0.0, 0.99, count)
        return x, y, direction * radius[:, None]

    def concavity_tests(self, seed: int, samples: Optional[int] = None, plurisub_samples: Optional[int] = None) -> List[CheckResult]:
        """Midpoint concavity of log(xy − Σz²) and plurisubharmonicity of −log(xy − Σ|z|²)."""
        samples = samples or settings.CONCAVITY_SAMPLES
        plurisub_samples = plurisub_samples or settings.PLURISUB_SAMPLES
        m = self.domain.n
        rng = np.random.default_rng(seed)
        results = []

        # midpoint concavity
        xp, yp, zp = self._sample_lorentz(rng, samples, m)
        xq, yq, zq = self._sample_lorentz(rng, samples, m)
        mid = log_discriminant(0.5 * (xp + xq), 0.5 * (yp + yq), 0.5 * (zp + zq))
        average = 0.5 * (log_discriminant(xp, yp, zp) + log_discriminant(xq, yq, zq))
        gap = mid - average
        worst = int(np.argmin(gap))
        passed = bool(gap[worst] >= -1e-12)
        results.append(CheckResult(
            name="concavity_midpoint",
            passed=passed,
            samples=samples,
            worst=float(gap[worst]),
            counterexample=None if passed else {
                "P": [float(xp[worst]), float(yp[worst])] + zp[worst].tolist(),
                "Q": [float(xq[worst]), float(yq[worst])] + zq[worst].tolist(),
            },
        ))

        # f decreases to −∞ along a ray toward the boundary xy = Σz²
        x0, y0, z0 = 1.0, 1.0, np.zeros(m)
        z0[0] = 1.0
        scales = 1.0 - np.logspace(-1, -12, 40)
        ray = log_discriminant(np.full_like(scales, x0), np.full_like(scales, y0), scales[:, None] * z0)
        monotone = bool(np.all(np.diff(ray) < 0))
        results.append(CheckResult(
            name="concavity_boundary_ray",
            passed=monotone and ray[-1] < -20.0,
            samples=scales.size,
            worst=float(ray[-1]),
        ))

        # plurisubharmonicity: complex Hessian in z is positive semidefinite
        hessian = _plurisub_hessian(m)
        x, y, z = self._sample_lorentz(rng, plurisub_samples, 2 * m)
        a, b = z[:, :m], z[:, m:]
        H = np.asarray(hessian(x, y, list(a.T), list(b.T)), dtype=complex)
        H = np.moveaxis(np.broadcast_to(H, (m, m, plurisub_samples)), -1, 0)
        eigenvalues = np.linalg.eigvalsh(0.5 * (H + np.conj(np.swapaxes(H, -1, -2))))
        relative = eigenvalues[:, 0] / np.maximum(1.0, np.abs(eigenvalues[:, -1]))
        worst = int(np.argmin(relative))
        passed = bool(relative[worst] >= -1e-10)
        results.append(CheckResult(
            name="plurisubharmonic",
            passed=passed,
            samples=plurisub_samples,
            worst=float(relative[worst]),
            counterexample=None if passed else {
                "x": float(x[worst]), "y": float(y[worst]),
                "z_real": a[worst].tolist(), "z_imag": b[worst].tolist(),
            },
        ))
        return results

    # ============================================
    # Gap lemma
    # ============================================

    def _sample_gap_matrix(self, rng: np.random.Generator, m: int) -> np.ndarray:
        M = np.zeros((m + 1, m + 1))
        M[0, 0] = rng.uniform(0.1, 2.0)
        M[np.arange(1, m + 1), np.arange(1, m + 1)] = rng.uniform(0.1, 2.0, m)
        direction = rng.normal(size=m)
        direction /= np.linalg.norm(direction)
        column = direction * np.sqrt(M[0, 0] * np.trace(M[1:, 1:])) * rng.uniform(0.0, 0.95)
        M[1:, 0] = column
        M[0, 1:] = column
        return M

    def gap_lemma_test(self, seed: int, samples: Optional[int] = None) -> CheckResult:
        """Σ F^{ij}(A)(B − A)_{ij} ≥ ε·Σ F^{ii}(A) whenever F(B) > F(A)."""
        samples = samples or settings.GAP_SAMPLES
        rng = np.random.default_rng(seed)
        m = self.domain.n
        worst, counterexample, tested = np.inf, None, 0
        while tested < samples:
            A = self._sample_gap_matrix(rng, m)
            B = self._sample_gap_matrix(rng, m)
            if gap_function(B) == gap_function(A):
                continue
            if gap_function(B) < gap_function(A):
                A, B = B, A
            tested += 1
            D = gap_gradient(A)
            epsilon = bisect_gap_epsilon(A, B)
            lhs = float(np.sum(D * (B - A)))
            rhs = epsilon * float(np.trace(D))
            slack = lhs - rhs
            if slack < worst:
                worst = slack
                if slack < -1e-12 * max(1.0, abs(lhs)):
                    counterexample = {"A": A.tolist(), "B": B.tolist(), "epsilon": epsilon}
        return CheckResult(
            name="gap_lemma",
            passed=counterexample is None,
            samples=samples,
            worst=float(worst),
            counterexample=counterexample,
        )

    def gap_lemma_field_probe(
        self, phi: SpaceTimeField, barriers: BarrierPair, prob: ContinuityProblem
    ) -> CheckResult:
        """Measure ε₁ and the smallest C₁ with ℒ(Φ_sub − φ) ≥ ε₁ΣF^{αᾱ} − C₁ sup(1 + φ_t²)."""
        prob = prob.at(1.0)
        n = prob.n
        coeffs = self.geodesic.operator_coefficients(phi, prob)
        lower = barriers.lower
        sub_coeffs = self.geodesic.operator_coefficients(lower, prob)

        Linv = np.linalg.inv(np.linalg.cholesky(prob.metric.g))[..., None, :, :]

        def matrices(c) -> np.ndarray:
            v = np.einsum("...ij,...j->...i", Linv, c.grad_phi_t)
            M = np.zeros(c.A.shape + (n + 1, n + 1), dtype=complex)
            M[..., 0, 0] = c.phi_tt
            idx = np.arange(1, n + 1)
            M[..., idx, idx] = (c.A / n)[..., None]
            M[..., 1:, 0] = v
            M[..., 0, 1:] = np.conj(v)
            return M[..., 1:-1, :, :].reshape(-1, n + 1, n + 1)

        A_points = matrices(coeffs)
        B_points = matrices(sub_coeffs)
        epsilons = []
        for A, B in zip(A_points, B_points):
            if in_gap_cone(A) and in_gap_cone(B) and gap_function(B) > gap_function(A):
                epsilons.append(bisect_gap_epsilon(A, B))
        epsilon1 = float(min(epsilons)) if epsilons else 0.0

        u = SpaceTimeField.from_values(self.domain, lower.values - phi.values, np.zeros(self.domain.shape), np.zeros(self.domain.shape))
        lhs = self.geodesic.full_linearization(phi, prob, u)[..., 1:-1]
        trace = (coeffs.A + n * coeffs.phi_tt)[..., 1:-1]
        scale = float(np.max(1.0 + coeffs.phi_t ** 2))
        C1 = max(0.0, float(np.max(epsilon1 * trace - lhs)) / scale)
        return CheckResult(
            name="gap_lemma_field",
            passed=bool(epsilon1 > 0 and np.isfinite(C1)),
            samples=len(epsilons),
            worst=epsilon1,
            details={"epsilon1": epsilon1, "C1": C1},
        )

    # ============================================
    # Energy minimality
    # ============================================

    def _perturbation(self, rng: np.random.Generator, time_steps: int) -> np.ndarray:
        t = np.linspace(0.0, 1.0, time_steps + 1)
        spatial = np.full(self.domain.shape, rng.normal())
        for coord in self.domain.active_coords:
            x = self.domain.coordinate(coord)
            period = self.domain.periods[coord]
            for mode in (1, 2):
                spatial = spatial + rng.normal() * np.cos(2 * np.pi * mode * x / period + rng.uniform(0, 2 * np.pi))
        return spatial[..., None] * np.sin(np.pi * t) * rng.normal()

    def energy_minimality_probe(
        self,
        phi: SpaceTimeField,
        prob: ContinuityProblem,
        seed: int,
        deltas: Sequence[float] = (1e-2, 1e-3),
        count: Optional[int] = None,
    ) -> Tuple[CheckResult, List[EnergyProbeRow]]:
        """Energy along φ ± δψ for seeded perturbations vanishing at t ∈ {0, 1}."""
        count = settings.ENERGY_PROBE_SAMPLES if count is None else count
        prob = prob.at(1.0)
        g, p, n = prob.metric, prob.p, prob.n
        rng = np.random.default_rng(seed)
        base = self.geodesic.energy(phi, g, p, prob.x_field)
        rows: List[EnergyProbeRow] = []
        worst_first, worst_second = 0.0, np.inf

        for index in range(count):
            psi_values = self._perturbation(rng, phi.time_steps)
            psi = SpaceTimeField.from_values(self.domain, psi_values, np.zeros(self.domain.shape), np.zeros(self.domain.shape))
            size = float(np.max(np.abs(psi_values))) or 1.0
            first = self.geodesic.energy_first_variation(phi, prob, psi)
            for delta in deltas:
                try:
                    plus = self.geodesic.energy(phi.with_values(phi.values + delta * psi_values), g, p, prob.x_field)
                    minus = self.geodesic.energy(phi.with_values(phi.values - delta * psi_values), g, p, prob.x_field)
                except PositivityViolation as e:
                    rows.append(EnergyProbeRow(index=index, delta=delta, skipped=True, reason=e.message))
                    continue
                fd = (plus - minus) / (2 * delta)
                second = (plus + minus - 2 * base) / delta ** 2
                worst_first = max(worst_first, abs(fd) / size)
                worst_second = min(worst_second, second)
                rows.append(EnergyProbeRow(
                    index=index, delta=delta, energy_plus=plus, energy_minus=minus,
                    first_variation_fd=fd, first_variation=first, second_variation=second,
                ))

        bound = 1e-2 + 2.0 * prob.epsilon / n
        result = CheckResult(
            name="energy_minimality",
            passed=bool(worst_first <= bound and worst_second >= -1e-8),
            samples=len(rows),
            worst=float(worst_first),
            details={
                "energy": base,
                "first_variation_bound": bound,
                "min_second_variation": None if worst_second == np.inf else float(worst_second),
                "skipped": sum(1 for r in rows if r.skipped),
            },
        )
        return result, rows
