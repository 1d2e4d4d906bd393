import numpy as np
import pytest

from app.core.exceptions import ConeExit, PositivityViolation
from app.schemas.geodesic import ContinuityProblem, SpaceTimeField
from app.services.geodesic_service import GeodesicService

EPSILON = 0.1
TIME_STEPS = 8


def _problem(geometry, metric=None, s=1.0, phi0=0.0, phi1=0.0, epsilon=EPSILON, enforce_x_sign=True):
    domain = geometry.domain
    metric = geometry.flat_metric() if metric is None else metric
    return ContinuityProblem(
        s=s,
        epsilon=epsilon,
        p=2,
        metric=metric,
        x_field=geometry.x_wedge(metric, 2),
        phi0=np.broadcast_to(np.asarray(phi0, dtype=float), domain.shape).copy(),
        phi1=np.broadcast_to(np.asarray(phi1, dtype=float), domain.shape).copy(),
        enforce_x_sign=enforce_x_sign,
    )


def _bump(domain, time_steps, spatial):
    t = np.linspace(0.0, 1.0, time_steps + 1)
    return spatial[..., None] * np.sin(np.pi * t)


class TestOperator:
    def test_linear_in_time_field_has_residual_minus_epsilon(self, line_geometry, line_geodesic):
        prob = _problem(line_geometry, phi1=0.3)
        phi = SpaceTimeField.linear_interpolation(line_geometry.domain, TIME_STEPS, prob.phi0, prob.phi1)
        residual = line_geodesic.operator_F(phi, prob)
        assert np.allclose(residual[..., 1:-1], -EPSILON, atol=1e-12)
        assert np.all(residual[..., 0] == 0.0)
        assert np.all(residual[..., -1] == 0.0)

    def test_quadratic_profile_solves_the_geodesic_equation(self, line_geometry, line_geodesic):
        prob = _problem(line_geometry)
        t = np.linspace(0.0, 1.0, TIME_STEPS + 1)
        exact = (EPSILON / 6.0) * t * (t - 1.0)
        values = np.broadcast_to(exact, line_geometry.domain.shape + t.shape)
        phi = SpaceTimeField.from_values(line_geometry.domain, values, 0.0, 0.0)
        assert np.max(np.abs(line_geodesic.operator_F(phi, prob))) < 1e-12

    def test_manufactured_forcing_cancels_residual(self, line_geometry, line_geodesic, conformal_metric):
        prob = _problem(line_geometry, metric=conformal_metric, s=0.6, enforce_x_sign=False)
        domain = line_geometry.domain
        spatial = 0.05 * np.cos(2 * np.pi * domain.coordinate(0))
        phi = SpaceTimeField.from_values(domain, _bump(domain, TIME_STEPS, spatial), 0.0, 0.0)
        forcing = line_geodesic.manufactured_forcing(phi, prob)
        forced = prob.model_copy(update={"forcing": forcing})
        assert np.max(np.abs(line_geodesic.operator_F(phi, forced))) < 1e-12


class TestLinearization:
    @pytest.fixture
    def setup(self, line_geometry, conformal_metric):
        domain = line_geometry.domain
        x = domain.coordinate(0)
        t = np.linspace(0.0, 1.0, TIME_STEPS + 1)
        phi1 = 0.1 * np.cos(2 * np.pi * x)
        prob = _problem(line_geometry, metric=conformal_metric, s=0.7, phi1=phi1, enforce_x_sign=False)
        values = t * phi1[..., None] + t * (t - 1.0) * (0.2 + 0.03 * np.sin(2 * np.pi * x))[..., None]
        phi = SpaceTimeField.from_values(domain, values, prob.phi0, prob.phi1)
        u = SpaceTimeField.from_values(domain, _bump(domain, TIME_STEPS, 0.1 * np.sin(2 * np.pi * x)), 0.0, 0.0)
        return prob, phi, u

    def test_linearization_matches_central_differences(self, line_geodesic, setup):
        prob, phi, u = setup
        h = 1e-3
        plus = line_geodesic.operator_F(phi.with_values(phi.values + h * u.values), prob)
        minus = line_geodesic.operator_F(phi.with_values(phi.values - h * u.values), prob)
        central = (plus - minus) / (2 * h)
        # P_s is quadratic in φ, so central differences are exact
        assert np.allclose(line_geodesic.full_linearization(phi, prob, u), central, atol=1e-9)

    def test_jacobian_matches_linearization(self, line_geodesic, setup):
        prob, phi, u = setup
        J = line_geodesic.jacobian(phi, prob)
        applied = J @ u.interior.reshape(-1)
        expected = line_geodesic.full_linearization(phi, prob, u)[..., 1:-1].reshape(-1)
        assert np.allclose(applied, expected, atol=1e-9)

    def test_symbol_matrix_eigenvalues(self):
        eigenvalues = np.linalg.eigvalsh(GeodesicService.symbol_matrix(2.0, 1.0, np.array([1.0])))
        assert np.allclose(eigenvalues, [(3 - np.sqrt(5)) / 2, (3 + np.sqrt(5)) / 2])

    def test_principal_symbol_agrees_with_margin(self, line_geodesic, setup):
        prob, phi, _ = setup
        margin = line_geodesic.ellipticity_margin(phi, prob)
        point = (3, 4)
        symbol = line_geodesic.principal_symbol(phi, prob, point)
        assert np.linalg.eigvalsh(symbol)[0] == pytest.approx(margin[3, 3])


class TestSolvers:
    def test_newton_at_s0_gives_exact_quadratic(self, line_geometry, line_geodesic):
        prob = _problem(line_geometry, s=0.0)
        init = SpaceTimeField.linear_interpolation(line_geometry.domain, TIME_STEPS, 0.0, 0.0)
        phi, report = line_geodesic.newton_solve(prob, init)
        assert report.status.value == "converged"
        # φ = ((ε − n)/2)·t(t − 1)
        assert np.allclose(phi.values[..., TIME_STEPS // 2], 0.3625, atol=1e-9)

    def test_continuity_path_reaches_geodesic(self, line_geometry, line_geodesic):
        prob = _problem(line_geometry)
        phi, trace = line_geodesic.continuity_solve(prob, TIME_STEPS, s_step=0.25)
        t = phi.times
        expected = (EPSILON / 6.0) * t * (t - 1.0)
        assert np.allclose(phi.values, expected, atol=1e-8)
        assert trace.accepted_steps[-1].s == 1.0
        assert trace.final.residual <= 1e-9
        assert np.min(line_geodesic.ellipticity_margin(phi, prob)) > 0

    def test_without_continuation_the_start_is_outside_the_cone(self, line_geometry, line_geodesic):
        prob = _problem(line_geometry)
        with pytest.raises(ConeExit) as info:
            line_geodesic.continuity_solve(prob, TIME_STEPS, continuation=False)
        assert info.value.context["s"] == 1.0

    def test_newton_recovers_manufactured_solution(self, line_geometry, line_geodesic):
        domain = line_geometry.domain
        x = domain.coordinate(0)
        t = np.linspace(0.0, 1.0, TIME_STEPS + 1)
        target_values = t * (t - 1.0) * (0.2 + 0.02 * np.cos(2 * np.pi * x))[..., None]
        target = SpaceTimeField.from_values(domain, target_values, 0.0, 0.0)
        prob = _problem(line_geometry)
        forced = prob.model_copy(update={"forcing": line_geodesic.manufactured_forcing(target, prob)})
        init = SpaceTimeField.from_values(domain, np.broadcast_to(0.2 * t * (t - 1.0), target_values.shape), 0.0, 0.0)
        phi, _ = line_geodesic.newton_solve(forced, init)
        assert np.max(np.abs(phi.values - target.values)) < 1e-7


class TestEnergy:
    def test_energy_of_linear_path(self, line_geometry, line_geodesic):
        path = SpaceTimeField.linear_interpolation(line_geometry.domain, TIME_STEPS, 0.0, 2.0)
        assert line_geodesic.energy(path, line_geometry.flat_metric(), 2) == pytest.approx(4.0)

    def test_energy_of_constant_path_vanishes(self, line_geometry, line_geodesic):
        path = SpaceTimeField.linear_interpolation(line_geometry.domain, TIME_STEPS, 0.5, 0.5)
        assert line_geodesic.energy(path, line_geometry.flat_metric(), 2) == 0.0

    def test_energy_requires_mixed_volume_positivity(self, line_geometry, line_geodesic):
        phi1 = 2.0 * np.cos(2 * np.pi * line_geometry.domain.coordinate(0))
        path = SpaceTimeField.linear_interpolation(line_geometry.domain, TIME_STEPS, 0.0, phi1)
        with pytest.raises(PositivityViolation):
            line_geodesic.energy(path, line_geometry.flat_metric(), 2)


class TestSymmetries:
    def test_swapping_endpoints_reverses_time(self, line_geometry, line_geodesic):
        phi1 = 0.05 * np.cos(2 * np.pi * line_geometry.domain.coordinate(0))
        forward, _ = line_geodesic.continuity_solve(_problem(line_geometry, phi1=phi1), TIME_STEPS, s_step=0.25)
        backward, _ = line_geodesic.continuity_solve(
            _problem(line_geometry, phi0=phi1, phi1=0.0), TIME_STEPS, s_step=0.25
        )
        assert np.allclose(backward.values, forward.values[..., ::-1], atol=1e-10)

    def test_repeated_solves_are_bit_identical(self, line_geometry, line_geodesic):
        phi1 = 0.05 * np.cos(2 * np.pi * line_geometry.domain.coordinate(0))
        prob = _problem(line_geometry, phi1=phi1)
        first, first_trace = line_geodesic.continuity_solve(prob, TIME_STEPS, s_step=0.25)
        second, second_trace = line_geodesic.continuity_solve(prob, TIME_STEPS, s_step=0.25)
        assert np.array_equal(first.values, second.values)
        assert first_trace.final.residual_history == second_trace.final.residual_history

    @pytest.mark.parametrize("seed", range(8))
    def test_linearization_matches_central_differences_on_random_pairs(self, line_geometry, seed):
        rng = np.random.default_rng(seed)
        domain = line_geometry.domain
        x = domain.coordinate(0)
        t = np.linspace(0.0, 1.0, TIME_STEPS + 1)
        geodesic = GeodesicService(line_geometry)
        metric = line_geometry.conformal(rng.uniform(-0.1, 0.1) * np.cos(2 * np.pi * x + rng.uniform(0, 2 * np.pi)))
        phi1 = rng.uniform(-0.1, 0.1) * np.sin(2 * np.pi * x)
        prob = _problem(line_geometry, metric=metric, s=rng.uniform(), phi1=phi1, enforce_x_sign=False)
        bump = rng.uniform(0.1, 0.3) + rng.uniform(-0.05, 0.05) * np.cos(4 * np.pi * x)
        values = t * phi1[..., None] + t * (t - 1.0) * bump[..., None]
        phi = SpaceTimeField.from_values(domain, values, prob.phi0, prob.phi1)
        spatial = rng.standard_normal() * np.sin(2 * np.pi * x) + rng.standard_normal() * np.cos(2 * np.pi * x)
        u = SpaceTimeField.from_values(domain, _bump(domain, TIME_STEPS, spatial), 0.0, 0.0)
        h = 1e-3
        plus = geodesic.operator_F(phi.with_values(phi.values + h * u.values), prob)
        minus = geodesic.operator_F(phi.with_values(phi.values - h * u.values), prob)
        assert np.allclose(geodesic.full_linearization(phi, prob, u), (plus - minus) / (2 * h), atol=1e-8)
