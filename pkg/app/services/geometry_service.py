"""
Geometry Service
Hermitian-geometric quantities on periodic grid domains: test metrics,
Hodge star, Chern torsion, the balanced condition, the function X and
the Chern Laplacian.
"""
from math import factorial
from typing import Dict, Optional, Tuple
import logging

import numpy as np

from app.core.config import settings
from app.core.exceptions import InvalidDegree, NotPositiveDefinite
from app.schemas.geometry import (
    ComplexForm,
    DiffScheme,
    GridDomain,
    HermitianMetricField,
    PositivityReport,
    TorsionField,
    XComparison,
)
from app.services import forms
from app.services.spectral import Differentiator

logger = logging.getLogger(__name__)


def expand_matrix_field(matrix: np.ndarray, extra: int) -> np.ndarray:
    """Insert ``extra`` broadcast axes between grid axes and matrix axes."""
    if extra == 0:
        return matrix
    lead = matrix.shape[:-2]
    return matrix.reshape(lead + (1,) * extra + matrix.shape[-2:])


class GeometryService:
    """Pointwise and differential Hermitian geometry on one GridDomain"""

    def __init__(self, domain: GridDomain, scheme: DiffScheme = DiffScheme.SPECTRAL):
        self.domain = domain
        self.diff = Differentiator(domain, scheme)

    @property
    def n(self) -> int:
        return self.domain.n

    def _extra_axes(self, f: np.ndarray) -> int:
        return np.ndim(f) - len(self.domain.shape)

    # ============================================
    # Metric builders
    # ============================================

    def flat_metric(self) -> HermitianMetricField:
        g = np.broadcast_to(np.eye(self.n, dtype=complex), self.domain.shape + (self.n, self.n))
        return HermitianMetricField(domain=self.domain, g=g.copy())

    def kahler_perturbed(self, rho: np.ndarray) -> HermitianMetricField:
        """ω_flat + i∂∂̄ρ."""
        H = self.diff.complex_hessian(np.asarray(rho, dtype=float))
        return HermitianMetricField(domain=self.domain, g=np.eye(self.n) + H)

    def conformal(self, f: np.ndarray) -> HermitianMetricField:
        """e^f·δ."""
        scale = np.exp(np.asarray(f, dtype=float))
        return HermitianMetricField(domain=self.domain, g=scale[..., None, None] * np.eye(self.n))

    def balanced_root(self, f: np.ndarray) -> HermitianMetricField:
        """Balanced metric whose (n−1)-power is ω_flat^{n−1} + i∂∂̄(f·ω_flat^{n−2}), normalized.

        Non-Kähler as soon as ``f`` depends on two complex coordinates.
        """
        n = self.n
        flat = self.metric_form(self.flat_metric())
        Q = forms.power(flat, n - 1) * (1.0 / factorial(n - 1))
        seed = forms.power(flat, n - 2) * (np.asarray(f, dtype=float) / factorial(n - 2))
        Q = Q + forms.i_ddbar(seed, self.diff)
        return self.michelsohn_root(Q)

    # ============================================
    # Forms attached to metrics
    # ============================================

    def metric_form(self, g: HermitianMetricField) -> ComplexForm:
        return forms.form_from_matrix(self.domain, g.g)

    def normalized_power(self, g: HermitianMetricField, k: int) -> ComplexForm:
        """ω^k/k!."""
        return forms.power(self.metric_form(g), k) * (1.0 / factorial(k))

    def volume_ratio(self, g: HermitianMetricField) -> np.ndarray:
        """ω^n/vol₀ = n!·det g."""
        return factorial(self.n) * g.det

    def michelsohn_root(self, Q: ComplexForm) -> HermitianMetricField:
        """The metric ω with ω^{n−1}/(n−1)! = Q."""
        n = self.n
        M = forms.pairing_matrix(Q)
        M = 0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))
        eigenvalues = np.linalg.eigvalsh(M)[..., 0]
        if not np.all(eigenvalues > 0):
            point = np.unravel_index(int(np.argmin(eigenvalues)), eigenvalues.shape)
            point = [int(i) for i in point]
            logger.error(f"Pairing matrix not positive at grid point {point}")
            raise NotPositiveDefinite(
                f"(n-1,n-1)-form is not positive at grid point {tuple(point)}",
                point=point,
                min_eigenvalue=float(eigenvalues[tuple(point)]),
            )
        det = np.linalg.det(M).real
        H = (det ** (1.0 / (n - 1)))[..., None, None] * np.linalg.inv(M)
        return HermitianMetricField(domain=self.domain, g=H)

    def hodge_star(self, f: ComplexForm, alpha: HermitianMetricField) -> ComplexForm:
        """Hodge star of α with ⋆(α^k/k!) = α^{n−k}/(n−k)!.

        Supported on (0,0), (1,1), (n−1,n−1) and (n,n)-forms.
        """
        n = self.n
        bidegree = f.bidegree
        if bidegree == (0, 0):
            return self.normalized_power(alpha, n) * f.component((), ())
        if bidegree == (n, n):
            return forms.scalar_form(self.domain, forms.top_ratio(f) / alpha.det)
        if bidegree == (1, 1):
            b = forms.matrix_from_form(f)
            trace = np.einsum("...kj,...jk->...", alpha.inverse, b)
            first = self.normalized_power(alpha, n - 1) * trace
            second = forms.wedge(f, self.normalized_power(alpha, n - 2))
            return first - second
        if bidegree == (n - 1, n - 1):
            M = forms.pairing_matrix(f)
            b = alpha.g @ M @ alpha.g / alpha.det[..., None, None]
            return forms.form_from_matrix(self.domain, b)
        raise InvalidDegree(f"Hodge star is not implemented on {bidegree}-forms")

    def balanced_residual(self, g: HermitianMetricField) -> float:
        """sup-norm of dω^{n−1}."""
        top = forms.power(self.metric_form(g), self.n - 1)
        return max(
            forms.del_(top, self.diff).sup_norm(),
            forms.dbar(top, self.diff).sup_norm(),
        )

    # ============================================
    # Torsion and X
    # ============================================

    def _lowered_torsion(self, g: HermitianMetricField) -> np.ndarray:
        """S[..., j, k, m] = ∂_j g_{km̄} − ∂_k g_{jm̄}."""
        n = self.n
        dg = np.stack([self.diff.dz(g.g, j) for j in range(n)], axis=-3)
        # dg[..., j, k, m] = ∂_j g_{km̄}
        return dg - np.swapaxes(dg, -3, -2)

    def chern_torsion(self, g: HermitianMetricField) -> TorsionField:
        S = self._lowered_torsion(g)
        T = np.einsum("...ml,...jkm->...ljk", g.inverse, S)
        T = 0.5 * (T - np.swapaxes(T, -1, -2))
        return TorsionField(domain=self.domain, T=T)

    @staticmethod
    def torsion_coefficient(n: int, p: int) -> float:
        """2(n−p)(p−1)/(n(n−1)(n−2)); zero whenever (n−p)(p−1) = 0."""
        numerator = (n - p) * (p - 1)
        if numerator == 0:
            return 0.0
        return 2.0 * numerator / (n * (n - 1) * (n - 2))

    def _check_p(self, p: int) -> None:
        if not 2 <= p <= self.n:
            raise InvalidDegree(f"p must lie in [2, {self.n}], got {p}")

    def x_wedge(self, g: HermitianMetricField, p: int) -> np.ndarray:
        """X from X·ω^n = i∂∂̄ω^{p−1}∧ω^{n−p}."""
        self._check_p(p)
        omega = self.metric_form(g)
        lhs = forms.wedge(forms.i_ddbar(forms.power(omega, p - 1), self.diff), forms.power(omega, self.n - p))
        return (forms.top_ratio(lhs) / self.volume_ratio(g)).real

    def x_torsion(self, g: HermitianMetricField, p: int) -> np.ndarray:
        """X from the torsion norm in a pointwise orthonormal frame."""
        self._check_p(p)
        coefficient = self.torsion_coefficient(self.n, p)
        if coefficient == 0.0:
            return self.domain.zeros()
        S = self._lowered_torsion(g)
        L = np.linalg.cholesky(g.g)
        A = np.swapaxes(np.linalg.inv(L), -1, -2)
        S_frame = np.einsum("...ja,...kb,...mc,...jkm->...abc", A, A, np.conj(A), S)
        # the half-normalized torsion enters squared
        return coefficient / 4.0 * np.sum(np.abs(S_frame) ** 2, axis=(-3, -2, -1))

    def compute_X(self, g: HermitianMetricField, p: int) -> XComparison:
        """
        Evaluate X by the wedge identity and by the torsion norm.

        The discrepancy between the two routes is a discretization defect of the
        balanced condition and scales with the amplitude of the metric's
        deviation from Kähler. Small-amplitude metrics can hide its growth under
        coarse resolution; compare at two resolutions before trusting a small
        discrepancy on a strongly non-Kähler metric.
        """
        self._check_p(p)
        residual = self.balanced_residual(g)
        if residual > settings.BALANCED_TOL:
            logger.warning(f"compute_X called on an unbalanced metric (residual {residual:.3e})")
        wedge_x = self.x_wedge(g, p)
        torsion_x = self.x_torsion(g, p)
        torsion = self.chern_torsion(g)
        trace = np.einsum("...jjk->...k", torsion.T)
        return XComparison(
            p=p,
            wedge=wedge_x,
            torsion=torsion_x,
            discrepancy=float(np.max(np.abs(wedge_x - torsion_x))),
            min_x=float(np.min(wedge_x)),
            max_x=float(np.max(wedge_x)),
            trace_residual=float(np.max(np.abs(trace))),
            balanced_residual=residual,
        )

    def lemma_identity_residuals(self, g: HermitianMetricField, p: int) -> Dict[str, float]:
        """Residuals of the first-order and second-order wedge identities for balanced metrics."""
        self._check_p(p)
        n = self.n
        omega = self.metric_form(g)
        lower = forms.power(omega, p - 1)
        upper = forms.power(omega, n - p)
        first = forms.wedge(forms.del_(lower, self.diff), upper)
        second = forms.wedge(forms.del_(forms.dbar(lower, self.diff), self.diff), upper)
        factor = (n - p) * (p - 1)
        if factor != 0:
            torsion_term = forms.wedge_all([
                forms.dbar(omega, self.diff),
                forms.del_(omega, self.diff),
                forms.power(omega, n - 3),
            ])
            second = second - torsion_term * float(factor)
        return {"first_order": first.sup_norm(), "second_order": second.sup_norm()}

    # ============================================
    # Scalar operators
    # ============================================

    def chern_laplacian(self, g: HermitianMetricField, f: np.ndarray) -> np.ndarray:
        """Δf = g^{jk̄}∂_j∂_k̄ f; trailing non-grid axes of ``f`` are broadcast."""
        H = self.diff.complex_hessian(f)
        Ginv = expand_matrix_field(g.inverse, self._extra_axes(f))
        return np.einsum("...kj,...jk->...", Ginv, H).real

    def grad_pair(self, g: HermitianMetricField, f: np.ndarray, h: np.ndarray) -> np.ndarray:
        """g^{jk̄} ∂_j f ∂_k̄ h."""
        Ginv = expand_matrix_field(g.inverse, self._extra_axes(f))
        df = self.diff.gradient(f)
        dh = np.stack([self.diff.dzbar(h, k) for k in range(self.n)], axis=-1)
        return np.einsum("...kj,...j,...k->...", Ginv, df, dh)

    def grad_norm_sq(self, g: HermitianMetricField, f: np.ndarray) -> np.ndarray:
        return self.grad_pair(g, f, f).real

    def complex_hessian_eigenvalues(self, g: HermitianMetricField, f: np.ndarray) -> np.ndarray:
        """Eigenvalues of g⁻¹·(∂_j∂_k̄ f), ascending on the last axis."""
        H = self.diff.complex_hessian(f)
        Linv = expand_matrix_field(np.linalg.inv(np.linalg.cholesky(g.g)), self._extra_axes(f))
        K = Linv @ H @ np.conj(np.swapaxes(Linv, -1, -2))
        return np.linalg.eigvalsh(0.5 * (K + np.conj(np.swapaxes(K, -1, -2))))

    def mixed_volume_positivity(
        self,
        phi: np.ndarray,
        g: HermitianMetricField,
        p: int,
        x_field: Optional[np.ndarray] = None,
    ) -> PositivityReport:
        """1 + Δφ/n + Xφ, cross-checked against (ω^p + i∂∂̄(φω^{p−1}))∧ω^{n−p}/ω^n."""
        self._check_p(p)
        n = self.n
        phi = np.asarray(phi, dtype=float)
        X = self.x_wedge(g, p) if x_field is None else x_field
        values = 1.0 + self.chern_laplacian(g, phi) / n + X * phi

        omega = self.metric_form(g)
        mixed = forms.power(omega, p) + forms.i_ddbar(forms.power(omega, p - 1) * phi, self.diff)
        direct = forms.top_ratio(forms.wedge(mixed, forms.power(omega, n - p))).real / self.volume_ratio(g)
        return PositivityReport(
            values=values,
            positive=values > 0,
            margin=float(np.min(values)),
            wedge_discrepancy=float(np.max(np.abs(values - direct))),
        )

    def first_failure(self, values: np.ndarray) -> Optional[Tuple[int, ...]]:
        """Index of the minimum of ``values`` if it is not positive."""
        index = np.unravel_index(int(np.argmin(values)), values.shape)
        if values[index] > 0:
            return None
        return tuple(int(i) for i in index)
