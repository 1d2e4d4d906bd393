"""
Refinement studies: spatial order of the balanced identities and temporal
order of the geodesic solver against a manufactured solution.
"""
import numpy as np
import pytest
from pytools.convergence import EOCRecorder

from app.schemas.geodesic import ContinuityProblem, SpaceTimeField
from app.schemas.geometry import DiffScheme, GridDomain
from app.services.geodesic_service import GeodesicService
from app.services.geometry_service import GeometryService

pytestmark = pytest.mark.slow

RESOLUTIONS = (16, 32, 64)
AMPLITUDE = 0.01


def _balanced(resolution, scheme, amplitude=AMPLITUDE):
    geometry = GeometryService(GridDomain(n=3, periods=1.0, resolution=resolution, active_coords=(0, 2)), scheme=scheme)
    domain = geometry.domain
    f = amplitude * np.cos(2 * np.pi * domain.coordinate(0)) * np.cos(2 * np.pi * domain.coordinate(2))
    return geometry, geometry.balanced_root(f)


def _finest_order(eoc: EOCRecorder) -> float:
    return float(eoc.estimate_order_of_convergence(gliding_mean=2)[-1, 1])


# ============================================
# Balanced identities under grid refinement
# ============================================

@pytest.mark.parametrize("key", ["first_order", "second_order"])
def test_lemma_residuals_fd4_order(key):
    eoc = EOCRecorder()
    for resolution in RESOLUTIONS:
        geometry, g = _balanced(resolution, DiffScheme.FD4)
        eoc.add_data_point(1.0 / resolution, geometry.lemma_identity_residuals(g, p=2)[key])
    assert _finest_order(eoc) >= 3.9


def test_lemma_residuals_spectral_reach_roundoff():
    geometry, g = _balanced(32, DiffScheme.SPECTRAL)
    residuals = geometry.lemma_identity_residuals(g, p=2)
    assert residuals["first_order"] < 1e-8
    assert residuals["second_order"] < 1e-8


def test_x_discrepancy_fd4_order():
    eoc = EOCRecorder()
    for resolution in RESOLUTIONS:
        geometry, g = _balanced(resolution, DiffScheme.FD4)
        report = geometry.compute_X(g, p=2)
        assert report.min_x >= -report.discrepancy - 1e-12
        eoc.add_data_point(1.0 / resolution, report.discrepancy)
    assert _finest_order(eoc) >= 3.5


def test_x_discrepancy_spectral():
    geometry, g = _balanced(32, DiffScheme.SPECTRAL)
    report = geometry.compute_X(g, p=2)
    assert report.discrepancy < 1e-9
    assert report.max_x > 1e-4
    assert report.min_x >= -report.discrepancy - 1e-12


# ============================================
# Geodesic solver in time
# ============================================

def _profile(x, t):
    """φ*(x, t) = a(x)(cosh(t − ½) − cosh ½) and its exact time derivatives."""
    a = (0.2 + 0.02 * np.cos(2 * np.pi * x))[..., None]
    value = a * (np.cosh(t - 0.5) - np.cosh(0.5))
    return value, a * np.sinh(t - 0.5), a * np.cosh(t - 0.5)


def _manufactured(geometry, metric, time_steps):
    domain = geometry.domain
    geodesic = GeodesicService(geometry)
    t = np.linspace(0.0, 1.0, time_steps + 1)
    value, phi_t, phi_tt = _profile(domain.coordinate(0), t)
    zero = domain.zeros()
    target = SpaceTimeField.from_values(domain, value, zero, zero)
    prob = ContinuityProblem(
        s=1.0, epsilon=1e-2, p=2, metric=metric, x_field=geometry.x_wedge(metric, 2),
        phi0=zero, phi1=zero, enforce_x_sign=False,
    )
    forced = prob.model_copy(update={"forcing": geodesic.manufactured_forcing(target, prob, phi_t=phi_t, phi_tt=phi_tt)})
    init = target.with_values(1.1 * target.values)
    phi, report = geodesic.newton_solve(forced, init)
    return float(np.max(np.abs(phi.values - target.values))), report


def _flat_line():
    geometry = GeometryService(GridDomain(n=3, periods=1.0, resolution=8, active_coords=(0,)))
    return geometry, geometry.flat_metric()


def _balanced_plane():
    return _balanced(8, DiffScheme.SPECTRAL)


@pytest.mark.parametrize("background", [_flat_line, _balanced_plane], ids=["flat", "balanced_root"])
def test_manufactured_geodesic_time_order(background):
    geometry, metric = background()
    eoc = EOCRecorder()
    for time_steps in (32, 64, 128):
        error, report = _manufactured(geometry, metric, time_steps)
        assert report.status.value == "converged"
        eoc.add_data_point(1.0 / time_steps, error)
    assert eoc.order_estimate() >= 1.9


def test_newton_contracts_quadratically():
    geometry, metric = _flat_line()
    _, report = _manufactured(geometry, metric, 32)
    history = [r for r in report.residual_history if r > 1e-12]
    ratios = [b / a for a, b in zip(history, history[1:])]
    assert ratios
    assert all(r < 0.1 for r in ratios)
    assert all(later < earlier for earlier, later in zip(ratios, ratios[1:]))
    assert all(step == 1.0 for step in report.damping_history)
