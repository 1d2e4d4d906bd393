import numpy as np
import pytest

from app.schemas.geodesic import ContinuityProblem, SpaceTimeField
from app.schemas.geometry import GridDomain
from app.schemas.verify import EstimateReport
from app.services.barrier_service import BarrierService
from app.services.geodesic_service import GeodesicService
from app.services.geometry_service import GeometryService
from app.services.verify_service import (
    VerifyService,
    bisect_gap_epsilon,
    gap_function,
    gap_gradient,
    in_gap_cone,
    log_discriminant,
)

EPSILON = 0.1
TIME_STEPS = 8


@pytest.fixture
def verifier(line_geodesic) -> VerifyService:
    return VerifyService(line_geodesic)


@pytest.fixture
def flat_problem(line_geometry) -> ContinuityProblem:
    metric = line_geometry.flat_metric()
    domain = line_geometry.domain
    return ContinuityProblem(
        s=1.0, epsilon=EPSILON, p=2, metric=metric, x_field=line_geometry.x_wedge(metric, 2),
        phi0=domain.zeros(), phi1=domain.zeros(),
    )


@pytest.fixture
def exact_solution(line_geometry) -> SpaceTimeField:
    """(ε/2n)·t(t − 1) solves the zero-data problem on the flat metric."""
    t = np.linspace(0.0, 1.0, TIME_STEPS + 1)
    values = np.broadcast_to((EPSILON / 6.0) * t * (t - 1.0), line_geometry.domain.shape + t.shape)
    return SpaceTimeField.from_values(line_geometry.domain, values, 0.0, 0.0)


@pytest.fixture
def barrier_pair(line_geodesic, flat_problem):
    return BarrierService(line_geodesic).construct_subsolution(flat_problem, TIME_STEPS)


def _report(sup_phi_tt, epsilon=0.1):
    return EstimateReport(
        epsilon=epsilon, sup_phi_tt=sup_phi_tt, lambda1=0.0, K=1.0, sup_grad=0.0,
        hessian_ratio=0.0, monotone_margin=0.0, ellipticity_margin=0.1,
    )


class TestModelFunctions:
    def test_log_discriminant_midpoint(self):
        mid = log_discriminant(np.array(1.5), np.array(1.5), np.zeros((1,)))
        average = 0.5 * (log_discriminant(np.array(2.0), np.array(1.0), np.zeros((1,)))
                         + log_discriminant(np.array(1.0), np.array(2.0), np.zeros((1,))))
        assert mid == pytest.approx(np.log(2.25))
        assert average == pytest.approx(np.log(2.0))
        assert mid >= average

    def test_gap_example(self):
        A = np.eye(2)
        B = 2.0 * np.eye(2)
        D = gap_gradient(A)
        assert float(np.sum(D * (B - A))) == pytest.approx(2.0)
        assert float(np.trace(D)) == pytest.approx(2.0)
        assert bisect_gap_epsilon(A, B) == pytest.approx(1.0)

    def test_gap_function_and_cone(self):
        M = np.array([[2.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert gap_function(M) == pytest.approx(2.0 * 2.0 - 1.0)
        assert in_gap_cone(M)
        assert not in_gap_cone(-M)


class TestPropertySuites:
    def test_concavity_suites_pass(self, verifier, small_samples):
        results = verifier.concavity_tests(seed=42)
        assert [r.name for r in results] == ["concavity_midpoint", "concavity_boundary_ray", "plurisubharmonic"]
        assert all(r.passed for r in results), [r.model_dump() for r in results if not r.passed]
        assert results[0].samples == 300

    def test_concavity_is_reproducible(self, verifier, small_samples):
        first = verifier.concavity_tests(seed=7)
        second = verifier.concavity_tests(seed=7)
        assert [r.worst for r in first] == [r.worst for r in second]

    def test_gap_lemma_passes(self, verifier, small_samples):
        result = verifier.gap_lemma_test(seed=42)
        assert result.passed
        assert result.samples == 100
        assert result.worst >= -1e-10


class TestSolutionChecks:
    def test_sandwich_and_monotone_on_exact_solution(self, verifier, exact_solution, barrier_pair):
        sandwich = verifier.check_sandwich(exact_solution, barrier_pair)
        assert sandwich["lower"].margin >= 0
        assert sandwich["upper"].margin >= 0
        assert verifier.check_time_monotone(exact_solution).margin >= -1e-12

    def test_corrupted_solution_breaks_sandwich(self, verifier, exact_solution, barrier_pair):
        values = exact_solution.values.copy()
        values[2, 4] = 1.0
        corrupted = exact_solution.with_values(values)
        sandwich = verifier.check_sandwich(corrupted, barrier_pair)
        assert sandwich["upper"].margin < 0
        assert sandwich["upper"].point == [2, 4]

    def test_estimate_on_exact_solution(self, verifier, exact_solution, flat_problem, barrier_pair):
        report = verifier.estimate(exact_solution, flat_problem, barrier_pair)
        assert report.sup_phi_tt == pytest.approx(EPSILON / 3.0)
        assert report.lambda1 < 1e-12
        assert report.K == pytest.approx(1.0)
        assert report.ellipticity_margin > 0
        assert report.finite

    def test_gap_lemma_field_probe(self, verifier, exact_solution, flat_problem, barrier_pair):
        result = verifier.gap_lemma_field_probe(exact_solution, barrier_pair, flat_problem)
        assert result.passed
        assert result.details["epsilon1"] > 0

    def test_energy_minimality_probe(self, verifier, exact_solution, flat_problem, small_samples):
        result, rows = verifier.energy_minimality_probe(exact_solution, flat_problem, seed=42)
        assert result.passed
        assert len(rows) == 6


class TestSweepDrift:
    def test_small_drift_passes(self):
        result = VerifyService.sweep_drift([_report(1.0), _report(0.9, 0.05)])
        assert result.passed
        assert result.worst == pytest.approx(0.1)

    def test_large_drift_fails(self):
        result = VerifyService.sweep_drift([_report(1.0), _report(0.5, 0.05)], budget=0.2)
        assert not result.passed
        assert result.details["budget"] == 0.2

    def test_estimate_ratios_sorted_by_decreasing_epsilon(self, verifier, line_geometry, flat_problem, exact_solution):
        small = flat_problem.model_copy(update={"epsilon": 0.05})
        reports = verifier.estimate_ratios([(exact_solution, small, None), (exact_solution, flat_problem, None)])
        assert [r.epsilon for r in reports] == [0.1, 0.05]
        assert reports[0].sandwich_lower is None


@pytest.mark.slow
def test_epsilon_sweep_benchmark_stays_within_drift_budget():
    """φ₀ = −c·cos(2πx), φ₁ = c·cos(2πx) with c = 0.15 on the flat torus.

    The ε = 0 geodesic has sup φ_tt ≈ 0.29, so the ε-dependent part stays a
    small share of the total across the sweep.
    """
    geometry = GeometryService(GridDomain(n=3, periods=1.0, resolution=16, active_coords=(0,)))
    geodesic = GeodesicService(geometry)
    verifier = VerifyService(geodesic)
    barriers = BarrierService(geodesic)
    metric = geometry.flat_metric()
    phi1 = 0.15 * np.cos(2 * np.pi * geometry.domain.coordinate(0))
    time_steps = 32

    family = []
    for epsilon in (1e-1, 1e-2, 1e-3, 1e-4):
        prob = ContinuityProblem(
            s=1.0, epsilon=epsilon, p=2, metric=metric, x_field=geometry.x_wedge(metric, 2),
            phi0=-phi1, phi1=phi1,
        )
        phi, trace = geodesic.continuity_solve(prob, time_steps)
        assert trace.final.residual <= 1e-9
        family.append((phi, prob, barriers.construct_subsolution(prob, time_steps)))

    reports = verifier.estimate_ratios(family)
    drift = VerifyService.sweep_drift(reports)
    assert drift.passed, drift.details
    for report in reports:
        assert report.sandwich_lower >= -1e-7
        assert report.sandwich_upper >= -1e-7
        assert report.monotone_margin >= -1e-7
        assert report.ellipticity_margin > 0
