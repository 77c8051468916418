import json
import logging
import os
import time
from contextlib import contextmanager
from typing import Any, Iterator, Optional, Sequence

import jax.numpy as jnp
import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import get_settings
from .errors import (
    ConvergenceError,
    DomainError,
    InvalidMetricError,
    NotApplicableError,
    ParameterError,
    ScenarioError,
    StabilityError,
)
from .expressions import ScalarExpression
from .fields import GridChart, ScalarField, operators_for
from .geodesics import (
    CutoffField,
    GeodesicPath,
    ball_nodes,
    build_cutoff,
    cutoff_gradient_scan,
    integrate_geodesic,
    profile_constants,
)
from .geometry import CurvatureScan, as_measure, curvature_scan
from .harness import (
    MarginReport,
    b_constant,
    check_apriori,
    check_curvature,
    check_evolution_inequality,
    check_harnack,
    check_lemma32,
    check_li_yau,
    choose_E,
    e_is_feasible,
    inequality_tolerance,
    not_applicable,
    sample_harnack_pairs,
)
from .metric_core import FinslerMetric, as_metric, misalignment
from .metrics import ACTIVE_RUNS, CHECKS_TOTAL
from .models import (
    CheckName,
    CheckStatus,
    CoefficientBounds,
    EstimateParams,
    RunReport,
    Scenario,
)
from .reports import (
    FIELDS_DIR,
    write_check,
    write_counterexample,
    write_diagnostics,
    write_metrics,
    write_paths,
    write_plots,
    write_summary,
)
from .solver import measure_coefficient_bounds, solve_log_schrodinger, solve_stationary

logger = logging.getLogger(__name__)

settings = get_settings()

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_SCENARIO = 2
EXIT_HYPOTHESES = 3
EXIT_NUMERIC = 4

NUMERIC_ABORTS = (StabilityError, ConvergenceError, InvalidMetricError)

# scanned curvature is compared against constants taken from the same scan
CURVATURE_TOL = 1e-9

_FLOW_CHECKS = {
    CheckName.LEMMA32,
    CheckName.EVOLUTION,
    CheckName.LIYAU,
    CheckName.HARNACK,
}
_ESTIMATE_CHECKS = {CheckName.EVOLUTION, CheckName.LIYAU}


def load_scenario(path: str) -> Scenario:
    """Parse and validate a scenario file, including every expression it holds."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario {path}: {str(e)}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"malformed scenario {path}: {e.msg}", e.lineno, e.colno)
    try:
        scenario = Scenario.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ScenarioError(f"invalid scenario {path}: {where}: {first['msg']}")
    _check_expressions(scenario)
    return scenario


def _check_expressions(scenario: Scenario) -> None:
    n = scenario.metric.dim
    ScalarExpression(scenario.coefficients.a, n)
    ScalarExpression(scenario.coefficients.b, n)
    ScalarExpression(scenario.initial, n)
    if scenario.apriori is not None:
        ScalarExpression(scenario.apriori.V, n)
    metric = as_metric(scenario.metric)
    as_measure(scenario.measure, metric)


def refine_scenario(scenario: Scenario, levels: int) -> Scenario:
    """Halve the grid spacing ``levels`` times at fixed dt / h^2."""
    if levels <= 0:
        return scenario
    grid = scenario.grid
    factor = 2**levels
    if grid.periodic:
        points = [m * factor for m in grid.points]
    else:
        points = [(m - 1) * factor + 1 for m in grid.points]
    solve = scenario.solve.model_copy(update={"dt": scenario.solve.dt / 4**levels})
    return scenario.model_copy(
        update={"grid": grid.model_copy(update={"points": points}), "solve": solve}
    )


def output_dir(scenario: Scenario, out: Optional[str] = None) -> str:
    default = os.path.join(settings.OUTPUT_DIR, scenario.name)
    return out or scenario.output_dir or default


def resolve_auto_params(
    scenario: Scenario,
    metric: FinslerMetric,
    solution: Optional[ScalarField],
    bounds: CoefficientBounds,
    scan: Optional[CurvatureScan],
) -> EstimateParams:
    """Replace every ``"auto"`` constant by a measured or derived value."""
    inputs = scenario.estimate
    chart = GridChart.from_spec(scenario.grid)
    provenance: dict[str, str] = {"N": "given", "K": "given", "A": "given"}
    placeholders: list[str] = []

    if inputs.D == "auto":
        if solution is None:
            raise ParameterError("D='auto' needs a time-dependent solution")
        D = float(solution.values.max())
        provenance["D"] = "measured: max u over the run"
    else:
        D = float(inputs.D)
        provenance["D"] = "given"

    if inputs.alpha == "auto":
        alpha = misalignment(
            metric, (chart.lower, chart.upper), settings.MISALIGNMENT_DIRS
        )
        provenance["alpha"] = (
            "exact: direction-independent metric"
            if metric.is_riemannian
            else "measured: sampled misalignment"
        )
    else:
        alpha = float(inputs.alpha)
        provenance["alpha"] = "given"

    if inputs.K2R == "auto" or inputs.K0 == "auto":
        if scan is None:
            raise ParameterError(
                "curvature constants set to 'auto' need a curvature scan"
            )
    if inputs.K2R == "auto":
        assert scan is not None
        K2R = scan.K2R
        provenance["K2R"] = "measured: curvature scan over B_p(2R)"
    else:
        K2R = float(inputs.K2R)
        provenance["K2R"] = "given"
    if inputs.K0 == "auto":
        assert scan is not None
        K0 = scan.K0_contribution
        provenance["K0"] = "measured: div C and T terms plus configured U term"
    else:
        K0 = float(inputs.K0)
        provenance["K0"] = "given"

    profile_C1, profile_C2 = profile_constants()
    if inputs.C1 == "auto":
        C1 = scenario.cutoff.C1 or profile_C1
        provenance["C1"] = "cutoff profile"
    else:
        C1 = float(inputs.C1)
        provenance["C1"] = "given"
    if inputs.C2 == "auto":
        C2 = scenario.cutoff.C2 or profile_C2
        provenance["C2"] = "cutoff profile"
    else:
        C2 = float(inputs.C2)
        provenance["C2"] = "given"

    if inputs.C_N_alpha is None:
        C_N_alpha = inputs.N * alpha
        placeholders.append("C_N_alpha")
        provenance["C_N_alpha"] = "placeholder: N * alpha"
    else:
        C_N_alpha = inputs.C_N_alpha
        provenance["C_N_alpha"] = "given"
    if inputs.C0 is None:
        C0 = K0
        placeholders.append("C0")
        provenance["C0"] = "placeholder: K0"
    else:
        C0 = inputs.C0
        provenance["C0"] = "given"
    if placeholders:
        logger.warning(f"comparison constants {placeholders} use placeholder defaults")

    if inputs.E == "auto":
        E = choose_E(bounds, D, inputs.A, inputs.N)
        provenance["E"] = "derived: smallest feasible E on the search grid"
    else:
        E = float(inputs.E)
        feasible = e_is_feasible(E, bounds, D, inputs.A, inputs.N)
        provenance["E"] = (
            "given" if feasible else "given (fails the large-E conditions)"
        )
        if not feasible:
            logger.warning(f"E={E:g} does not satisfy the large-E conditions")

    R = scenario.ball.radius
    B_args = (C1, C2, R, alpha, K2R, C_N_alpha, C0)
    B_statement = b_constant(*B_args, form="statement")
    if inputs.B == "auto":
        B = b_constant(*B_args, form=inputs.b_form)
        provenance["B"] = f"derived: {inputs.b_form} form"
    else:
        B = float(inputs.B)
        provenance["B"] = "given"

    try:
        return EstimateParams(
            n=metric.dim,
            N=inputs.N,
            K=inputs.K,
            K2R=K2R,
            K0=K0,
            A=inputs.A,
            D=D,
            E=E,
            C1=C1,
            C2=C2,
            R=R,
            C_N_alpha=C_N_alpha,
            C0=C0,
            alpha=alpha,
            B=B,
            B_statement=B_statement,
            b_form=inputs.b_form,
            bracket_form=inputs.bracket_form,
            provenance=provenance,
            placeholders=placeholders,
        )
    except ValidationError as e:
        raise ParameterError(f"invalid estimate constants: {e.errors()[0]['msg']}")


def exit_code_for(statuses: Sequence[CheckStatus]) -> int:
    if any(
        s in (CheckStatus.FAILED, CheckStatus.INCONCLUSIVE, CheckStatus.NOT_APPLICABLE)
        for s in statuses
    ):
        return EXIT_FAILED
    if any(s == CheckStatus.HYPOTHESES_NOT_MET for s in statuses):
        return EXIT_HYPOTHESES
    return EXIT_OK


class ScenarioRun:
    """One pass of the solve / resolve / verify / report pipeline.

    Attributes:
        scenario: The validated scenario, with command-line overrides applied.
        out: Output directory.
        metric: Compiled metric.
        chart: Grid of the run.
        stage: Name of the stage in progress, echoed into diagnostics.
        timings: Wall-clock seconds per stage; kept out of summary.json.
    """

    def __init__(self, scenario: Scenario, out: str):
        self.scenario = scenario
        self.out = out
        self.metric = as_metric(scenario.metric)
        self.measure = scenario.measure
        self.chart = GridChart.from_spec(scenario.grid)
        self.checks = list(dict.fromkeys(scenario.checks))
        self.stage = "setup"
        self.timings: dict[str, float] = {}
        self.flags: list[str] = []
        self.reports: dict[CheckName, MarginReport] = {}

    @contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        self.stage = name
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.timings[name] = self.timings.get(name, 0.0) + elapsed

    def _wants(self, *names: CheckName) -> bool:
        return any(n in self.checks for n in names)

    def solve(self, chart: GridChart, dt_factor: float = 1.0) -> ScalarField:
        cfg = self.scenario.solve
        if dt_factor != 1.0:
            cfg = cfg.model_copy(update={"dt": cfg.dt * dt_factor})
        u0 = ScalarField.from_expression(
            self.scenario.initial, chart, cfg.start_time, cfg.stencil_order
        )
        return solve_log_schrodinger(
            self.metric, self.measure, self.scenario.coefficients, u0, cfg
        )

    def coarse_solution(self) -> Optional[ScalarField]:
        try:
            coarse = self.chart.coarsened()
        except DomainError as e:
            logger.info(f"no refinement pair for this grid: {str(e)}")
            self.flags.append("no-refinement-pair")
            return None
        return self.solve(coarse, dt_factor=4.0)

    def scan(self) -> CurvatureScan:
        est = self.scenario.estimate
        ball = self.scenario.ball
        return curvature_scan(
            self.metric,
            self.measure,
            est.N,
            ball.center,
            ball.radius,
            U_term=est.U_term,
            bounds=(self.chart.lower, self.chart.upper),
        )

    def geodesic_rays(self) -> dict[str, GeodesicPath]:
        ball = self.scenario.ball
        center = np.asarray(ball.center, dtype=float)
        rays = {}
        for i in range(self.chart.dim):
            for sign, label in ((1.0, "plus"), (-1.0, "minus")):
                y = sign * np.eye(self.chart.dim)[i]
                speed = float(self.metric.F(jnp.asarray(center), jnp.asarray(y)))
                rays[f"geodesic_e{i + 1}_{label}"] = integrate_geodesic(
                    self.metric,
                    center,
                    y / speed,
                    2.0 * ball.radius,
                    ball.radius / 50.0,
                    self.chart,
                )
        return rays

    def verify_flow(
        self, solution: ScalarField, cutoff: CutoffField
    ) -> tuple[Optional[EstimateParams], dict[CheckName, MarginReport]]:
        sc = self.scenario
        reports: dict[CheckName, MarginReport] = {}
        region = cutoff.support_mask() & self.chart.interior_mask()
        with self._stage("bounds"):
            if sc.coefficients.bounds is not None:
                bounds = sc.coefficients.bounds
            else:
                ops = operators_for(
                    self.metric, self.measure, self.chart, solution.order
                )
                bounds = measure_coefficient_bounds(
                    ops, sc.coefficients, solution, region
                )
        if self._wants(*_ESTIMATE_CHECKS) and sc.estimate.A <= bounds.sup_a_plus:
            raise ParameterError(
                f"A={sc.estimate.A:g} must satisfy A > a+ on B_p(2R); "
                f"measured sup a+ = {bounds.sup_a_plus:g}"
            )
        scan = None
        est = sc.estimate
        needs_scan = est.K2R == "auto" or est.K0 == "auto" or self._wants(
            CheckName.CURVATURE_SCAN, CheckName.LIYAU
        )
        if needs_scan:
            with self._stage("curvature_scan"):
                scan = self.scan()
        with self._stage("resolve"):
            params = resolve_auto_params(sc, self.metric, solution, bounds, scan)
        with self._stage("lemma32"):
            coarse = self.coarse_solution()
            lemma = check_lemma32(
                self.metric,
                self.measure,
                solution,
                sc.coefficients,
                params.D,
                coarse,
            )
        tol = inequality_tolerance(lemma)
        if CheckName.LEMMA32 in self.checks:
            reports[CheckName.LEMMA32] = lemma
        if CheckName.EVOLUTION in self.checks:
            with self._stage("evolution"):
                reports[CheckName.EVOLUTION] = check_evolution_inequality(
                    self.metric,
                    self.measure,
                    solution,
                    sc.coefficients,
                    params,
                    tol,
                    region=cutoff.support_mask(),
                )
        if CheckName.LIYAU in self.checks:
            with self._stage("liyau"):
                report = check_li_yau(
                    self.metric,
                    self.measure,
                    solution,
                    sc.coefficients,
                    params,
                    bounds,
                    cutoff.inner_mask(),
                    tol,
                    scanned_K2R=scan.K2R if scan is not None else None,
                )
                grad = cutoff_gradient_scan(self.metric, cutoff, alpha=params.alpha)
                report.extras["cutoff_gradient_margin"] = grad.min_margin
                if not grad.passed:
                    self.flags.append("cutoff-gradient-bound")
                reports[CheckName.LIYAU] = report
        if CheckName.HARNACK in self.checks:
            with self._stage("harnack"):
                nodes = ball_nodes(solution, cutoff.r, cutoff.radius)
                pairs = sample_harnack_pairs(solution, nodes, sc.harnack, sc.seed)
                try:
                    reports[CheckName.HARNACK] = check_harnack(
                        self.metric,
                        solution,
                        sc.coefficients,
                        params,
                        pairs,
                        tol,
                        box=(self.chart.lower, self.chart.upper),
                    )
                except NotApplicableError as e:
                    reports[CheckName.HARNACK] = not_applicable(
                        CheckName.HARNACK, tol, str(e)
                    )
        if CheckName.CURVATURE_SCAN in self.checks and scan is not None:
            reports[CheckName.CURVATURE_SCAN] = check_curvature(
                scan, params, CURVATURE_TOL
            )
        return params, reports

    def verify_apriori(self, params: Optional[EstimateParams]) -> MarginReport:
        sc = self.scenario
        assert sc.apriori is not None
        V = ScalarExpression(sc.apriori.V, self.chart.dim)
        with self._stage("stationary"):
            result = solve_stationary(self.metric, self.measure, self.chart, V)
        N = params.N if params is not None else sc.estimate.N
        tol = settings.TOL_INEQ_FACTOR * settings.STATIONARY_TOL
        return check_apriori(self.metric, self.measure, V, N, result, tol)

    def execute(self) -> RunReport:
        sc = self.scenario
        params: Optional[EstimateParams] = None
        solution: Optional[ScalarField] = None
        if self._wants(*_FLOW_CHECKS):
            with self._stage("solve"):
                solution = self.solve(self.chart)
            self.flags.extend(f for f in solution.flags if f not in self.flags)
            solution.export(
                os.path.join(self.out, FIELDS_DIR),
                sc.output.field_snapshots,
                manifest={
                    "coefficients": {
                        "a": str(sc.coefficients.a),
                        "b": str(sc.coefficients.b),
                    },
                    "initial": str(sc.initial),
                },
            )
            with self._stage("cutoff"):
                cutoff = build_cutoff(
                    self.metric, self.chart, sc.ball.center, sc.ball.radius, sc.cutoff
                )
            params, flow_reports = self.verify_flow(solution, cutoff)
            self.reports.update(flow_reports)
            if params.placeholders:
                placeholders = ",".join(params.placeholders)
                self.flags.append(f"placeholder-constants:{placeholders}")
        if CheckName.APRIORI in self.checks:
            self.reports[CheckName.APRIORI] = self.verify_apriori(params)
        scan_pending = CheckName.CURVATURE_SCAN not in self.reports
        if CheckName.CURVATURE_SCAN in self.checks and scan_pending:
            with self._stage("curvature_scan"):
                scan = self.scan()
            K2R = params.K2R if params is not None else scan.K2R
            K0 = params.K0 if params is not None else scan.K0_contribution
            stub = _scan_params(sc, self.metric.dim, K2R, K0)
            self.reports[CheckName.CURVATURE_SCAN] = check_curvature(
                scan, stub, CURVATURE_TOL
            )
        write_paths(self.geodesic_rays(), self.out)
        return self.finish(params)

    def finish(self, params: Optional[EstimateParams]) -> RunReport:
        sc = self.scenario
        summaries = {}
        for name in self.checks:
            report = self.reports[name]
            if name in sc.expected_fail and report.status == CheckStatus.FAILED:
                report.forced_status = CheckStatus.EXPECTED_FAIL
            write_check(report, self.out)
            write_plots(report, sc.ball.center, self.out)
            if report.status == CheckStatus.FAILED or (
                report.status == CheckStatus.EXPECTED_FAIL and not report.records.empty
            ):
                write_counterexample(
                    report, sc, params, self.out, sc.output.counterexample_rows
                )
            CHECKS_TOTAL.labels(name.value, report.status.value).inc()
            summaries[name.value] = report.summary()
        code = exit_code_for([s.status for s in summaries.values()])
        run = RunReport(
            scenario=sc,
            params=params,
            checks=summaries,
            flags=self.flags,
            exit_code=code,
            version=__version__,
            timings=self.timings,
        )
        write_summary(run, self.out)
        logger.info(f"scenario {sc.name}: exit code {code}, outputs in {self.out}")
        return run


def _scan_params(scenario: Scenario, n: int, K2R: float, K0: float) -> EstimateParams:
    est = scenario.estimate
    return EstimateParams(
        n=n,
        N=est.N,
        K=est.K,
        K2R=K2R,
        K0=K0,
        A=est.A,
        D=1.0,
        E=0.0,
        C1=1.0,
        C2=1.0,
        R=scenario.ball.radius,
        C_N_alpha=est.N,
        C0=K0,
        alpha=1.0,
        B=0.0,
    )


def run_scenario(
    path: str,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    checks: Optional[Sequence[str]] = None,
    refine: int = 0,
) -> RunReport:
    """Run one scenario file end to end and write every output.

    Numeric aborts write ``diagnostics.json`` before re-raising.
    """
    scenario = load_scenario(path)
    updates: dict[str, Any] = {}
    if seed is not None:
        updates["seed"] = seed
    if checks:
        try:
            updates["checks"] = [CheckName(c) for c in checks]
        except ValueError as e:
            raise ScenarioError(f"unknown check: {str(e)}")
    if updates:
        scenario = scenario.model_copy(update=updates)
    scenario = refine_scenario(scenario, refine)
    target = output_dir(scenario, out)
    os.makedirs(target, exist_ok=True)
    run = ScenarioRun(scenario, target)
    ACTIVE_RUNS.inc()
    try:
        with run._stage("total"):
            report = run.execute()
    except NUMERIC_ABORTS as e:
        logger.error(f"numeric abort during {run.stage}: {str(e)}")
        write_diagnostics(
            target,
            e,
            {"scenario": scenario.name, "stage": run.stage, "flags": run.flags},
        )
        raise
    finally:
        ACTIVE_RUNS.dec()
        write_metrics(target)
    return report


def scan_curvature(path: str, out: Optional[str] = None) -> MarginReport:
    """Curvature scan of a scenario's ball, without solving the flow."""
    scenario = load_scenario(path)
    target = output_dir(scenario, out)
    os.makedirs(target, exist_ok=True)
    run = ScenarioRun(scenario, target)
    scan = run.scan()
    est = scenario.estimate
    K2R = scan.K2R if est.K2R == "auto" else float(est.K2R)
    K0 = scan.K0_contribution if est.K0 == "auto" else float(est.K0)
    params = _scan_params(scenario, run.metric.dim, K2R, K0)
    report = check_curvature(scan, params, CURVATURE_TOL)
    write_check(report, target)
    write_metrics(target)
    return report
