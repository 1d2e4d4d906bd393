"""
Run Service
Dispatches one command per invocation, writes the report, field files and
plot tables into an atomically committed output directory, and maps domain
errors to exit codes.
"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple
import logging

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    ConfigError,
    GeometryError,
    LabError,
    PositivityViolation,
    SearchExhausted,
    SolverError,
    VerificationFailure,
)
from app.schemas.config import Command, RunConfig
from app.schemas.cy import CYProblem, CYSolution
from app.schemas.geodesic import BarrierPair, ContinuityProblem, SpaceTimeField
from app.schemas.geometry import GridDomain
from app.schemas.verify import CheckResult, EstimateReport, VerifyReport
from app.services import expression_service, field_io
from app.services.barrier_service import BarrierService
from app.services.config_service import emit_config
from app.services.cy_service import CYService
from app.services.geodesic_service import GeodesicService
from app.services.geometry_service import GeometryService
from app.services.verify_service import VerifyService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_VERIFY = 3

SANDWICH_TOL = 1e-7

EPS_SWEEP_COLUMNS = (
    "epsilon", "success", "sup_phi_tt", "lambda1", "K", "hessian_ratio", "sup_grad",
    "sandwich_lower", "sandwich_upper", "monotone_margin", "ellipticity_margin", "error",
)
C0_SWEEP_COLUMNS = ("amplitude", "success", "sup_u", "oscillation_u", "b", "residual", "iterations", "error")


def _check(name: str, margin: float, point: Optional[List[int]], tol: float) -> CheckResult:
    passed = bool(margin >= -tol)
    return CheckResult(
        name=name,
        passed=passed,
        samples=1,
        worst=margin,
        counterexample=None if passed else {"point": point, "value": margin},
    )


class RunService:
    """Builds the problem objects of one RunConfig and runs its command"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.domain = GridDomain(
            n=config.n,
            periods=config.period,
            resolution=config.resolution,
            active_coords=config.domain_coords,
        )
        self.geometry = GeometryService(self.domain, config.scheme)
        self.geodesic = GeodesicService(self.geometry)
        self.barriers = BarrierService(self.geodesic)
        self.verifier = VerifyService(self.geodesic)
        self.cy = CYService(self.geometry)

    # ============================================
    # Problem builders
    # ============================================

    def metric(self):
        return expression_service.build_metric(self.geometry, self.config.metric.value, self.config.metric_expr)

    def geodesic_problem(self, epsilon: float, phi0=None, phi1=None) -> ContinuityProblem:
        config = self.config
        g = self.metric()
        x_field = self.geometry.x_wedge(g, config.p)
        if phi0 is None:
            phi0 = expression_service.scalar_field(config.phi0, self.domain)
        if phi1 is None:
            phi1 = expression_service.scalar_field(config.phi1, self.domain)
        for name, data in (("phi0", phi0), ("phi1", phi1)):
            report = self.geometry.mixed_volume_positivity(data, g, config.p, x_field)
            if report.margin <= 0:
                point = self.geometry.first_failure(report.values)
                logger.error(f"Boundary data {name} is not in the mixed-volume set")
                raise ConfigError(
                    f"{name} violates 1 + Δφ/n + Xφ > 0 at grid point {point} (margin {report.margin:.3e})",
                    key=name,
                )
        return ContinuityProblem(
            s=1.0,
            epsilon=epsilon,
            p=config.p,
            metric=g,
            x_field=x_field,
            phi0=phi0,
            phi1=phi1,
            enforce_x_sign=config.enforce_x_sign,
        )

    def cy_problem(self, amplitude: float = 1.0) -> CYProblem:
        config = self.config
        alpha = expression_service.build_metric(self.geometry, config.alpha.value, config.alpha_expr)
        omega = expression_service.build_metric(self.geometry, config.omega.value, config.omega_expr)
        rho = None
        if config.rho_expr is not None:
            rho = amplitude * expression_service.scalar_field(config.rho_expr, self.domain)
            psi = self.cy.psi_from_rho(alpha, omega, rho)
        else:
            psi = amplitude * expression_service.scalar_field(config.psi_expr, self.domain)
        return CYProblem(alpha=alpha, omega=omega, psi=psi, rho=rho, chi=config.chi, mean_u=config.mean_u)

    # ============================================
    # Geodesic solves
    # ============================================

    def solve_geodesic(self, epsilon: float) -> Tuple[SpaceTimeField, ContinuityProblem, Dict[str, Any]]:
        config = self.config
        prob = self.geodesic_problem(epsilon)
        phi, trace = self.geodesic.continuity_solve(
            prob,
            config.time_steps,
            s_step=config.s_step,
            s_min_step=config.s_min_step,
            continuation=config.continuation,
            tol=config.tol,
            max_iter=config.max_iter,
        )
        barriers = self.try_barriers(prob, config.time_steps)
        estimate = self.verifier.estimate(phi, prob, barriers)
        return phi, prob, {
            "continuity": trace.model_dump(mode="json"),
            "estimate": estimate.model_dump(mode="json"),
            "barriers": self.barrier_summary(barriers),
        }

    def try_barriers(self, prob: ContinuityProblem, time_steps: int) -> Optional[BarrierPair]:
        try:
            return self.barriers.construct_subsolution(prob, time_steps, self.config.subsolution_family)
        except (SearchExhausted, PositivityViolation) as e:
            logger.warning(f"No certified subsolution; estimates are reported without the sandwich ({e.message})")
            return None

    @staticmethod
    def barrier_summary(barriers: Optional[BarrierPair]) -> Optional[Dict[str, Any]]:
        if barriers is None:
            return None
        return {"family": barriers.family.value, "params": barriers.params, "margin": barriers.margin}

    def sweep_entry(self, epsilon: float) -> Dict[str, Any]:
        """One row of the ε-sweep."""
        _, _, payload = self.solve_geodesic(epsilon)
        return payload["estimate"]

    def cy_sweep_entry(self, amplitude: float) -> Dict[str, Any]:
        """One row of the C⁰ sweep."""
        prob = self.cy_problem(amplitude)
        solution = self.cy.solve_cy(prob, tol=self.config.tol, max_iter=self.config.max_iter)
        c0 = self.cy.c0_report(solution, prob)
        return {
            "amplitude": amplitude,
            "sup_u": c0["sup_u"],
            "oscillation_u": c0["oscillation_u"],
            "b": solution.b,
            "residual": solution.residual,
            "iterations": solution.iterations,
        }

    # ============================================
    # Commands
    # ============================================

    def inspect_metric(self, out: Path) -> Dict[str, Any]:
        config = self.config
        g = self.metric()
        comparison = self.geometry.compute_X(g, config.p)
        payload: Dict[str, Any] = {
            "min_eigenvalue": g.min_eigenvalue(),
            "X": comparison.summary(),
            "lemma_identities": self.geometry.lemma_identity_residuals(g, config.p),
            "torsion_sup": float(np.max(np.abs(self.geometry.chern_torsion(g).T))),
        }
        if config.n >= 3:
            payload["E"] = self.cy.compute_E(g).summary()
        for name, source in (("phi0", config.phi0), ("phi1", config.phi1)):
            values = expression_service.scalar_field(source, self.domain)
            report = self.geometry.mixed_volume_positivity(values, g, config.p, comparison.wedge)
            payload[f"positivity_{name}"] = {
                "margin": report.margin,
                "first_failure": self.geometry.first_failure(report.values),
                "wedge_discrepancy": report.wedge_discrepancy,
            }
        field_io.save_metric(out / "metric.npz", g)
        field_io.save_scalar(out / "x_wedge.npz", self.domain, comparison.wedge)
        field_io.save_scalar(out / "x_torsion.npz", self.domain, comparison.torsion)
        field_io.save_form(out / "omega_power.npz", self.geometry.normalized_power(g, config.n - 1))
        return payload

    def solve_geodesic_command(self, out: Path) -> Dict[str, Any]:
        phi, prob, payload = self.solve_geodesic(self.config.epsilon)
        field_io.save_spacetime(out / "phi.npz", phi)
        field_io.save_metric(out / "metric.npz", prob.metric)
        field_io.save_scalar(out / "x_wedge.npz", self.domain, prob.x_field)
        field_io.write_table(out / "eps_sweep.csv", [{"epsilon": prob.epsilon, "success": True, **payload["estimate"]}], EPS_SWEEP_COLUMNS)
        return payload

    def sweep_eps(self, out: Path) -> Dict[str, Any]:
        from app.celery_worker import run_sweep, solve_geodesic_for_epsilon

        epsilons = sorted(self.config.epsilons, reverse=True)
        results = run_sweep(
            solve_geodesic_for_epsilon,
            [(self.config.model_dump(mode="json"), eps) for eps in epsilons],
            self.config.threads,
        )
        rows, estimates, failures = [], [], []
        for eps, result in zip(epsilons, results):
            if result["success"]:
                rows.append({"epsilon": eps, "success": True, **result["estimate"]})
                estimates.append(EstimateReport(**result["estimate"]))
            else:
                rows.append({"epsilon": eps, "success": False, "error": result["error"]["error"]})
                failures.append(result["error"])
        field_io.write_table(out / "eps_sweep.csv", rows, EPS_SWEEP_COLUMNS)
        drift = self.verifier.sweep_drift(estimates) if estimates else None
        payload = {
            "epsilons": epsilons,
            "rows": rows,
            "drift": drift.model_dump(mode="json") if drift else None,
        }
        if failures:
            logger.error(f"{len(failures)} of {len(epsilons)} sweep solves failed")
            raise SolverError(f"{len(failures)} sweep solves failed", failures=failures, payload=payload)
        return payload

    def verify(self, out: Path) -> Dict[str, Any]:
        config = self.config
        solution_dir = Path(config.solution_dir)
        phi = field_io.load_spacetime(solution_dir / "phi.npz")
        if phi.domain != self.domain:
            raise ConfigError("the solution was computed on a different grid", key="solution_dir")
        prob = self.geodesic_problem(config.epsilon, phi.phi0, phi.phi1)
        seed = config.seed
        report = VerifyReport()

        residual = np.abs(self.geodesic.operator_F(phi, prob))[..., 1:-1]
        index = np.unravel_index(int(np.argmax(residual)), residual.shape)
        point = [int(i) for i in index]
        report.add(CheckResult(
            name="equation_residual",
            passed=bool(residual[index] <= 10.0 * config.tol),
            samples=int(residual.size),
            worst=float(residual[index]),
            counterexample=None if residual[index] <= 10.0 * config.tol else {"point": point, "value": float(residual[index])},
        ))

        ellipticity = self.geodesic.ellipticity_margin(phi, prob)
        index = np.unravel_index(int(np.argmin(ellipticity)), ellipticity.shape)
        worst = float(ellipticity[index])
        report.add(CheckResult(
            name="ellipticity",
            passed=worst > 0,
            samples=int(ellipticity.size),
            worst=worst,
            counterexample=None if worst > 0 else {"point": [int(i) for i in index], "value": worst},
        ))

        monotone = self.verifier.check_time_monotone(phi)
        report.add(_check("time_monotone", monotone.margin, monotone.point, SANDWICH_TOL))

        barriers = self.try_barriers(prob, phi.time_steps)
        if barriers is not None:
            sandwich = self.verifier.check_sandwich(phi, barriers)
            for side, margin in sandwich.items():
                report.add(_check(f"sandwich_{side}", margin.margin, margin.point, SANDWICH_TOL))
            report.add(self.verifier.gap_lemma_field_probe(phi, barriers, prob))

        for check in self.verifier.concavity_tests(seed):
            report.add(check)
        report.add(self.verifier.gap_lemma_test(seed))
        energy_check, energy_rows = self.verifier.energy_minimality_probe(phi, prob, seed)
        report.add(energy_check)

        estimate = self.verifier.estimate(phi, prob, barriers)
        report.estimates.append(estimate)
        field_io.write_table(out / "eps_sweep.csv", [{"epsilon": prob.epsilon, "success": True, **estimate.model_dump()}], EPS_SWEEP_COLUMNS)
        field_io.write_table(out / "energy_probe.csv", [row.model_dump() for row in energy_rows])

        solver_report = solution_dir / "report.json"
        payload = {
            "solution_dir": str(solution_dir),
            "solver_status": field_io.read_json(solver_report).get("status") if solver_report.exists() else None,
            "barriers": self.barrier_summary(barriers),
            "verify": report.model_dump(mode="json"),
        }
        if not report.passed:
            logger.error(f"Verification failed: {[f['name'] for f in report.failures]}")
            raise VerificationFailure("verification checks failed", failures=report.failures, payload=payload)
        return payload

    def solve_cy(self, out: Path) -> Dict[str, Any]:
        from app.celery_worker import run_sweep, solve_cy_for_amplitude

        config = self.config
        prob = self.cy_problem()
        astheno = self.cy.compute_E(prob.alpha) if config.n >= 3 else None
        solution: CYSolution = self.cy.solve_cy(prob, tol=config.tol, max_iter=config.max_iter)
        omega_u, diagnostics = self.cy.recover_balanced_metric(solution.u, prob)
        solution = solution.model_copy(update={"omega_u": omega_u, "diagnostics": {**solution.diagnostics, **diagnostics}})
        if astheno is not None:
            astheno = self.cy.compute_E(prob.alpha, omega_tilde=solution.omega_tilde.g)

        field_io.save_scalar(out / "u.npz", self.domain, solution.u)
        field_io.save_metric(out / "omega_tilde.npz", solution.omega_tilde)
        field_io.save_metric(out / "omega_u.npz", omega_u)
        payload: Dict[str, Any] = {
            "solution": solution.summary(),
            "c0": self.cy.c0_report(solution, prob),
            "astheno": astheno.summary() if astheno is not None else None,
        }

        if config.psi_amplitudes:
            amplitudes = list(config.psi_amplitudes)
            results = run_sweep(
                solve_cy_for_amplitude,
                [(config.model_dump(mode="json"), a) for a in amplitudes],
                config.threads,
            )
            rows = [
                {**result["row"], "success": True} if result["success"]
                else {"amplitude": a, "success": False, "error": result["error"]["error"]}
                for a, result in zip(amplitudes, results)
            ]
            field_io.write_table(out / "c0_sweep.csv", rows, C0_SWEEP_COLUMNS)
            payload["c0_sweep"] = rows
        return payload

    def execute(self, out: Path) -> Dict[str, Any]:
        handlers = {
            Command.INSPECT_METRIC: self.inspect_metric,
            Command.SOLVE_GEODESIC: self.solve_geodesic_command,
            Command.SWEEP_EPS: self.sweep_eps,
            Command.VERIFY: self.verify,
            Command.SOLVE_CY: self.solve_cy,
        }
        return handlers[self.config.command](out)


def _report(config: RunConfig, status: str) -> Dict[str, Any]:
    return {
        "schema_version": settings.REPORT_SCHEMA_VERSION,
        "app_version": settings.APP_VERSION,
        "command": config.command.value,
        "config": config.model_dump(mode="json"),
        "seed": config.seed,
        "status": status,
    }


def run(config: RunConfig) -> int:
    """Run one command and return its exit code."""
    logger.info(f"Running {config.command.value} into {config.out_dir} (seed {config.seed})")
    try:
        with field_io.atomic_output_dir(config.out_dir) as staging:
            service = RunService(config)
            try:
                payload = service.execute(staging)
                report, code = _report(config, "accepted"), EXIT_OK
                report["result"] = payload
            except VerificationFailure as e:
                report, code = _report(config, "verification_failure"), EXIT_VERIFY
                report["error"] = e.to_dict()
            except (SolverError, PositivityViolation) as e:
                report, code = _report(config, "solver_failure"), EXIT_SOLVER
                report["error"] = e.to_dict()
            field_io.write_json(staging / "report.json", report)
            (staging / "config.txt").write_text(emit_config(config), encoding="utf-8")
    except (ConfigError, GeometryError) as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return EXIT_CONFIG
    except LabError as e:
        logger.error(f"Unhandled {type(e).__name__}: {e.message}")
        return EXIT_SOLVER
    logger.info(f"{config.command.value} finished with exit code {code}")
    return code
