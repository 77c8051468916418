"""Margin scans for the Li-Yau type estimates of the log-Schrodinger flow.

Every check writes its inequality as ``lhs <= rhs`` at each sampled point and
records ``margin = rhs - lhs``. A check passes when its smallest margin is at
least ``-tol``; the summary can always be recomputed from the records.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from .config import get_settings
from .errors import DomainError, InfeasibleError, NotApplicableError, ParameterError
from .expressions import ScalarExpression
from .fields import (
    FieldOperators,
    GridChart,
    ReferenceDirection,
    ScalarField,
    operators_for,
)
from .geodesics import path_action
from .geometry import CurvatureScan, MeasureLike
from .metric_core import MetricLike
from .metrics import STAGE_SECONDS
from .models import (
    CheckName,
    CheckStatus,
    CheckSummary,
    CoefficientBounds,
    EstimateParams,
    HarnackSpec,
    PDECoefficients,
)
from .solver import StationaryResult

logger = logging.getLogger(__name__)

settings = get_settings()

_LOCATION = re.compile(r"^([xyz]\d+|t|t2)$")


@dataclass
class MarginReport:
    """Per-point records of one verified inequality.

    Attributes:
        name: The check that produced the report.
        records: One row per evaluated point with coordinate columns
            (``x1..xn``, ``t`` and check specific extras) plus ``lhs``,
            ``rhs`` and ``margin``.
        tol: Margins down to ``-tol`` count as satisfied.
        exclusions: Points skipped because a standing assumption failed there.
        forced_status: Set when the outcome is decided outside the margins
            (hypotheses not met, not applicable, no refinement pair).
        extras: Scalars echoed into the JSON summary.
    """

    name: CheckName
    records: pd.DataFrame
    tol: float
    exclusions: int = 0
    forced_status: Optional[CheckStatus] = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def points(self) -> int:
        return len(self.records)

    @property
    def min_margin(self) -> Optional[float]:
        if self.records.empty:
            return None
        return float(self.records["margin"].min())

    @property
    def argmin(self) -> Optional[dict[str, float]]:
        if self.records.empty:
            return None
        row = self.records.loc[self.records["margin"].idxmin()]
        return {c: float(row[c]) for c in self.records.columns if _LOCATION.match(c)}

    @property
    def passed(self) -> bool:
        m = self.min_margin
        return m is not None and m >= -self.tol

    @property
    def exclusion_fraction(self) -> float:
        total = self.points + self.exclusions
        return self.exclusions / total if total else 1.0

    @property
    def status(self) -> CheckStatus:
        if self.forced_status is not None:
            return self.forced_status
        if self.points == 0 or self.exclusion_fraction > settings.EXCLUSION_LIMIT:
            return CheckStatus.INCONCLUSIVE
        return CheckStatus.PASSED if self.passed else CheckStatus.FAILED

    def failures(self, limit: int) -> pd.DataFrame:
        bad = self.records[self.records["margin"] < -self.tol]
        return bad.sort_values("margin").head(limit)

    def summary(self) -> CheckSummary:
        return CheckSummary(
            name=self.name,
            status=self.status,
            passed=self.passed,
            min_margin=self.min_margin,
            argmin=self.argmin,
            tol=self.tol,
            points=self.points,
            exclusions=self.exclusions,
            extras=self.extras,
        )


def _report(
    name: CheckName,
    rows: list[pd.DataFrame],
    tol: float,
    exclusions: int = 0,
    forced_status: Optional[CheckStatus] = None,
    extras: Optional[dict[str, Any]] = None,
) -> MarginReport:
    records = pd.concat(rows, ignore_index=True) if rows else _empty_records()
    report = MarginReport(name, records, tol, exclusions, forced_status, extras or {})
    logger.info(
        f"{name.value}: {report.status.value} over {report.points} points "
        f"(min margin {report.min_margin}, tol {tol:.3e}, {exclusions} excluded)"
    )
    return report


def _empty_records() -> pd.DataFrame:
    return pd.DataFrame(columns=["t", "lhs", "rhs", "margin"])


def not_applicable(name: CheckName, tol: float, reason: str) -> MarginReport:
    """Empty report for a check whose hypotheses exclude the scenario."""
    return _report(
        name,
        [],
        tol,
        forced_status=CheckStatus.NOT_APPLICABLE,
        extras={"reason": reason},
    )


def _frame(
    chart: GridChart,
    mask: np.ndarray,
    t: float,
    lhs: np.ndarray,
    rhs: Any,
    **columns: np.ndarray,
) -> pd.DataFrame:
    data: dict[str, Any] = {f"x{i + 1}": c[mask] for i, c in enumerate(chart.coords)}
    data["t"] = np.full(int(mask.sum()), t)
    data["lhs"] = lhs[mask]
    if isinstance(rhs, np.ndarray):
        data["rhs"] = rhs[mask]
    else:
        data["rhs"] = np.full(int(mask.sum()), rhs)
    data["margin"] = data["rhs"] - data["lhs"]
    for key, value in columns.items():
        data[key] = value[mask]
    return pd.DataFrame(data)


def _pick(indices: Sequence[int], count: int) -> list[int]:
    idx = np.asarray(list(indices), dtype=int)
    if idx.size <= count:
        return [int(k) for k in idx]
    spread = np.linspace(0, idx.size - 1, count).round().astype(int)
    return sorted({int(idx[j]) for j in spread})


def physical_interior(chart: GridChart, margin: Sequence[float]) -> np.ndarray:
    """Nodes at least ``margin`` from a non-periodic boundary.

    ``margin`` is per axis, in chart units.
    """
    mask = np.ones(chart.shape, dtype=bool)
    if chart.periodic:
        return mask
    eps = 1e-9 * chart.spacing
    for i, c in enumerate(chart.coords):
        mask &= (c - chart.lower[i] >= margin[i] - eps[i]) & (
            chart.upper[i] - c >= margin[i] - eps[i]
        )
    return mask


# E search


def composite_term(
    E: float,
    a: float,
    b: float,
    bounds: CoefficientBounds,
    D: float,
    A: float,
    N: float,
) -> float:
    """Left side of the large-E condition at one (a, b).

    Derivative bounds enter at their worst case.
    """
    log_d = float(np.log(D))
    return (
        2.0 * (E - a * log_d) ** 2 / N
        + 2.0 * a * (E + b)
        - (A + a) * (a * log_d + b)
        - 2.0 * bounds.sup_abs_a_t * abs(log_d)
        + 2.0 * bounds.inf_lap_b
        - bounds.sup_grad_b**2
        - (1.0 + abs(log_d)) * bounds.sup_grad_a**2
    )


def composite_margin(
    E: float, bounds: CoefficientBounds, D: float, A: float, N: float
) -> float:
    """Minimum of ``composite_term`` over the coefficient box.

    The term is linear in b and quadratic in a, so the box corners plus the
    interior vertex in a are enough; a few evenly spaced a values are added.
    """
    log_d = float(np.log(D))
    curvature = 2.0 * log_d**2 / N - log_d
    a_grid = list(np.linspace(bounds.inf_a, bounds.sup_a, settings.COEFF_BOX_SAMPLES))
    worst = np.inf
    for b in (bounds.inf_b, bounds.sup_b):
        candidates = list(a_grid)
        if curvature > 0:
            vertex = (4.0 * E * log_d / N - 2.0 * E - b + A * log_d) / (2.0 * curvature)
            if bounds.inf_a < vertex < bounds.sup_a:
                candidates.append(vertex)
        for a in candidates:
            worst = min(worst, composite_term(E, a, b, bounds, D, A, N))
    return float(worst)


def e_is_feasible(
    E: float,
    bounds: CoefficientBounds,
    D: float,
    A: float,
    N: float,
    slack: float = 1e-12,
) -> bool:
    log_d = float(np.log(D))
    if E + bounds.inf_b < -slack:
        return False
    if E - max(bounds.inf_a * log_d, bounds.sup_a * log_d) < -slack:
        return False
    return composite_margin(E, bounds, D, A, N) >= -slack


def _e_grid(top: float) -> np.ndarray:
    ratio = settings.E_SEARCH_RATIO
    count = int(np.ceil(np.log(top / 1e-6) / np.log(ratio))) + 1
    return np.concatenate([[0.0], top * ratio ** -np.arange(count)[::-1]])


def choose_E(bounds: CoefficientBounds, D: float, A: float, N: float) -> float:
    """Smallest E on a geometric grid satisfying the large-E conditions."""
    if not all(np.isfinite(v) for v in bounds.model_dump().values()):
        raise InfeasibleError("coefficient bounds must be finite")
    top = settings.E_SEARCH_MAX
    for _ in range(settings.E_SEARCH_EXPANSIONS + 1):
        for E in _e_grid(top):
            if e_is_feasible(float(E), bounds, D, A, N):
                return float(E)
        logger.info(f"no feasible E up to {top:g}; widening the search")
        top *= 3.0
    raise InfeasibleError(f"no feasible E below {top / 3.0:g}")


def apriori_E(N: float, sup_lap_V: float, sup_grad_V: float, sup_V: float) -> float:
    return float(np.sqrt(N) * sup_lap_V + np.sqrt(N / 2.0) * sup_grad_V + sup_V)


# Constants of the local estimate


def comparison_term(K2R: float, C_N_alpha: float, R: float) -> float:
    """C s coth(R s) with s = sqrt(K(2R) / C), continued by C / R at K(2R) = 0."""
    if K2R <= 0:
        return C_N_alpha / R
    s = float(np.sqrt(K2R / C_N_alpha))
    return C_N_alpha * s / float(np.tanh(R * s))


def b_constant(
    C1: float,
    C2: float,
    R: float,
    alpha: float,
    K2R: float,
    C_N_alpha: float,
    C0: float,
    form: str = "proof",
) -> float:
    lap = comparison_term(K2R, C_N_alpha, R) + C0
    if form == "statement":
        value = 2.0 * C1**2 * alpha**2 / R**2 - C1 / R * lap - alpha * C2 / R**2
        return max(0.0, value)
    return 2.0 * C1**2 * alpha / R**2 + C1 / R * lap + alpha * C2 / R**2


def bracket(X: float, form: str = "proof") -> float:
    """Curvature bracket term: [-X]^+ (proof) or -[X]^+ (statement)."""
    if form == "statement":
        return -max(X, 0.0)
    return max(-X, 0.0)


def li_yau_cases(
    params: EstimateParams, bounds: CoefficientBounds, t: float
) -> tuple[float, float]:
    a_plus = bounds.sup_a_plus
    if params.A <= a_plus:
        raise ParameterError(
            f"A={params.A:g} violates A > a+ on B_p(2R) (sup a+ = {a_plus:g})"
        )
    N = params.N
    log_d = float(np.log(params.D))
    e_part = max(params.E - min(bounds.inf_a * log_d, bounds.sup_a * log_d), 0.0)
    grad = N * params.C1**2 / params.R**2
    br = bracket(params.A - 2.0 * params.K - 2.0 - abs(log_d), params.bracket_form)
    drift = max(bounds.sup_lap_a_plus_a_t, 0.0) / (4.0 * (params.A - a_plus))
    case1 = 4.0 * N * (
        1.0 + t * (a_plus + params.B + grad + 2.0 * e_part / N) + 0.5 * t * (br + drift)
    )
    case2 = 4.0 * N * (params.B * t + 1.0 + a_plus * t + grad * t + 0.5 * t * br)
    case2 += 8.0 * t * e_part
    return case1, case2


def li_yau_rhs(params: EstimateParams, bounds: CoefficientBounds, t: float) -> float:
    case1, case2 = li_yau_cases(params, bounds, t)
    return case1 + case2


def harnack_T(params: EstimateParams) -> float:
    N = params.N
    log_d = float(np.log(params.D))
    br = bracket(-2.0 * params.K - 2.0 - abs(log_d), params.bracket_form)
    return 4.0 * N * (
        params.B + N * params.C1**2 / params.R**2 + 2.0 * params.E / N + 0.5 * br
    )


# Solution quantities


class SolutionQuantities:
    """Snapshot-wise pieces of L = t [F^2(grad f) + (A + a) f + 2 (E + b) - 2 f_t].

    f = log(u / D); f_t uses second-order differences over the stored times.
    Reference directions are built once per snapshot and reused.
    """

    def __init__(
        self,
        ops: FieldOperators,
        u: ScalarField,
        coeffs: PDECoefficients,
        A: float,
        E: float,
        D: float,
    ):
        if np.any(u.values <= 0):
            raise DomainError("the solution must be positive")
        if D <= 0:
            raise DomainError("D must be positive")
        if len(u.times) < 3:
            raise DomainError("at least three snapshots are needed for f_t")
        self.ops = ops
        self.u = u
        self.A = A
        self.E = E
        self.D = D
        dim = u.chart.dim
        self.a = ScalarExpression(coeffs.a, dim)
        self.b = ScalarExpression(coeffs.b, dim)
        self.f = np.log(u.values) - np.log(D)
        self.f_t = np.gradient(self.f, u.times, axis=0, edge_order=2)
        self._refs: dict[int, ReferenceDirection] = {}
        self._L: dict[int, np.ndarray] = {}

    def t(self, k: int) -> float:
        return float(self.u.times[k])

    def ref(self, k: int) -> ReferenceDirection:
        if k not in self._refs:
            self._refs[k] = self.ops.reference(self.u.values[k])
        return self._refs[k]

    def coefficient(self, expr: ScalarExpression, k: int) -> np.ndarray:
        return expr.grid(self.ops.chart.coords, self.t(k))

    def df(self, k: int) -> np.ndarray:
        return self.ops.differential(self.f[k])

    def grad2(self, k: int) -> np.ndarray:
        """F^2(grad f), measured with g(grad u).

        grad f is a positive multiple of grad u.
        """
        return self.ref(k).norm2(self.df(k))

    def L(self, k: int) -> np.ndarray:
        if k not in self._L:
            a = self.coefficient(self.a, k)
            b = self.coefficient(self.b, k)
            self._L[k] = self.t(k) * (
                self.grad2(k)
                + (self.A + a) * self.f[k]
                + 2.0 * (self.E + b)
                - 2.0 * self.f_t[k]
            )
        return self._L[k]

    def lemma32_residual(self, k: int) -> np.ndarray:
        """Delta f - (f_t - a f - a log D - b - F^2(grad f))."""
        a = self.coefficient(self.a, k)
        b = self.coefficient(self.b, k)
        lap = self.ref(k).linearized_laplacian(self.f[k])
        rhs = self.f_t[k] - a * self.f[k] - a * np.log(self.D) - b - self.grad2(k)
        return lap - rhs


def quantity_L(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    u: ScalarField,
    coeffs: PDECoefficients,
    A: float,
    E: float,
    x: Sequence[float],
    t: float,
    D: float = 1.0,
) -> float:
    ops = operators_for(metric, measure, u.chart, u.order)
    q = SolutionQuantities(ops, u, coeffs, A, E, D)
    return float(q.L(u.index_of_time(t))[u.chart.index_of(x)])


# Checks


def _inner_times(u: ScalarField, skip: int) -> list[int]:
    return [k for k in range(skip, len(u.times) - skip) if u.times[k] > 0]


def _lemma32_max(
    ops: FieldOperators,
    u: ScalarField,
    coeffs: PDECoefficients,
    D: float,
    region: np.ndarray,
    times: Sequence[float],
) -> tuple[float, list[tuple[int, np.ndarray]]]:
    q = SolutionQuantities(ops, u, coeffs, 0.0, 0.0, D)
    fields = []
    worst = 0.0
    for t in times:
        k = u.index_of_time(t)
        res = np.abs(q.lemma32_residual(k))
        fields.append((k, res))
        worst = max(worst, float(res[region].max()))
    return worst, fields


def check_lemma32(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    u: ScalarField,
    coeffs: PDECoefficients,
    D: float,
    coarse: Optional[ScalarField] = None,
    max_snapshots: int = 11,
    floor: float = 1e-10,
) -> MarginReport:
    """Residual of the equation satisfied by f = log(u / D).

    With a coarse run (every second node, four times the step) the fine
    residual has to sit below coarse / 2^1.5, i.e. the residual converges at
    better than order 1.5 in h. Without one the residual must vanish to
    ``floor``.
    """
    chart = u.chart
    with STAGE_SECONDS.labels("lemma32").time():
        ops = operators_for(metric, measure, chart, u.order)
        if coarse is not None:
            coarse_layer = coarse.chart.boundary_layer * coarse.chart.spacing
            region = physical_interior(chart, coarse_layer)
            picks = _pick(_inner_times(coarse, 1), max_snapshots)
            times = [float(coarse.times[k]) for k in picks]
            times = [
                t for t in times if np.min(np.abs(u.times - t)) < 1e-9 * max(1.0, t)
            ]
            c_ops = operators_for(metric, measure, coarse.chart, coarse.order)
            c_region = coarse.chart.interior_mask()
            coarse_max, _ = _lemma32_max(c_ops, coarse, coeffs, D, c_region, times)
            threshold = coarse_max / 2.0**1.5
        else:
            region = chart.interior_mask()
            picks = _pick(_inner_times(u, 1), max_snapshots)
            times = [float(u.times[k]) for k in picks]
            coarse_max = None
            threshold = 0.0
        fine_max, fields = _lemma32_max(ops, u, coeffs, D, region, times)
    rows = [
        _frame(chart, region, float(u.times[k]), res, threshold, residual=res)
        for k, res in fields
    ]
    extras: dict[str, Any] = {
        "max_residual": fine_max,
        "coarse_max_residual": coarse_max,
    }
    forced = None
    if coarse_max is not None and fine_max > 0:
        extras["observed_order"] = float(np.log2(max(coarse_max, 1e-300) / fine_max))
    if coarse is None and fine_max > floor:
        # nothing to measure the order against
        forced = CheckStatus.INCONCLUSIVE
    return _report(CheckName.LEMMA32, rows, floor, forced_status=forced, extras=extras)


def inequality_tolerance(lemma32: MarginReport) -> float:
    residual = float(lemma32.extras.get("max_residual") or 0.0)
    return max(settings.TOL_INEQ_FACTOR * residual, 1e-12)


def check_evolution_inequality(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    u: ScalarField,
    coeffs: PDECoefficients,
    params: EstimateParams,
    tol: float,
    region: Optional[np.ndarray] = None,
    max_snapshots: int = 11,
) -> MarginReport:
    """Scan lhs = lower bound of (Delta^{grad u} - d/dt) L, rhs = its measured value.

    Points with L <= 0 or a vanishing du are excluded and counted.
    """
    chart = u.chart
    ops = operators_for(metric, measure, chart, u.order)
    q = SolutionQuantities(ops, u, coeffs, params.A, params.E, params.D)
    mask = chart.interior_mask(2 * chart.boundary_layer)
    if region is not None:
        mask &= region
    a_t_expr = q.a.diff_time()
    N, A, E, K = params.N, params.A, params.E, params.K
    log_d = float(np.log(params.D))
    rows = []
    exclusions = 0
    with STAGE_SECONDS.labels("evolution").time():
        for k in _pick(_inner_times(u, 2), max_snapshots):
            t = q.t(k)
            ref = q.ref(k)
            L = q.L(k)
            L_t = (q.L(k + 1) - q.L(k - 1)) / (q.t(k + 1) - q.t(k - 1))
            measured = ref.linearized_laplacian(L) - L_t
            keep = mask & (L > 0) & ~ref.critical
            exclusions += int((mask & ~keep).sum())
            if not np.any(keep):
                continue
            F2 = q.grad2(k)
            h = np.where(keep, F2 / np.where(keep, L, 1.0), 0.0)
            f = q.f[k]
            a = q.coefficient(q.a, k)
            a_t = q.coefficient(a_t_expr, k)
            lap_a = ref.linearized_laplacian(a)
            dL = ops.differential(L)
            cross = np.einsum("i...,ij...,j...->...", q.df(k), ref.A, dL)
            grow = 1.0 + h * t
            e_term = E - a * log_d
            bound = t * (
                (A - 2.0 * K - 2.0 - abs(log_d)) * h * L
                + grow**2 * L**2 / (2.0 * N * t**2)
                - 2.0 * grow * e_term * L / (N * t)
            )
            bound += t * f * (
                grow * (a - A) * L / (N * t) + lap_a + a_t + 2.0 * (A - a) * e_term / N
            )
            bound += -L / t - a * L - 2.0 * cross
            rows.append(_frame(chart, keep, t, bound, measured, L=L, h=h))
    return _report(CheckName.EVOLUTION, rows, tol, exclusions)


def check_li_yau(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    u: ScalarField,
    coeffs: PDECoefficients,
    params: EstimateParams,
    bounds: CoefficientBounds,
    ball: np.ndarray,
    tol: float,
    scanned_K2R: Optional[float] = None,
    max_snapshots: int = 11,
) -> MarginReport:
    """L(x, t) against the sum of the two case bounds on B_p(R).

    Unmet hypotheses (sup u > D, a scanned K(2R) above the one used) mark the
    report but the scan still runs. ``A > a+`` is enforced by ``li_yau_rhs``.
    """
    chart = u.chart
    ops = operators_for(metric, measure, chart, u.order)
    q = SolutionQuantities(ops, u, coeffs, params.A, params.E, params.D)
    mask = ball & chart.interior_mask()
    unmet = []
    sup_u = float(u.values[:, mask].max()) if np.any(mask) else 0.0
    if sup_u > params.D * (1.0 + 1e-12):
        unmet.append(f"sup u = {sup_u:.6g} exceeds D = {params.D:.6g}")
    if scanned_K2R is not None and scanned_K2R > params.K2R + 1e-9:
        unmet.append(
            f"scanned K(2R) = {scanned_K2R:.6g} exceeds K(2R) = {params.K2R:.6g}"
        )
    for reason in unmet:
        logger.warning(f"Li-Yau hypothesis not met: {reason}")
    rows = []
    with STAGE_SECONDS.labels("liyau").time():
        for k in _pick(_inner_times(u, 1), max_snapshots):
            t = q.t(k)
            rhs = li_yau_rhs(params, bounds, t)
            L = q.L(k)
            b = q.coefficient(q.b, k)
            statement = L / t - 2.0 * (params.E + b)
            rows.append(_frame(chart, mask, t, L, rhs, lhs_statement=statement))
    forced = CheckStatus.HYPOTHESES_NOT_MET if unmet else None
    extras: dict[str, Any] = {"sup_u": sup_u, "hypotheses": "; ".join(unmet) or None}
    return _report(CheckName.LIYAU, rows, tol, forced_status=forced, extras=extras)


def sample_harnack_pairs(
    u: ScalarField, nodes: np.ndarray, spec: HarnackSpec, seed: int
) -> list[tuple[np.ndarray, float, np.ndarray, float]]:
    """Seeded pairs (x1, t1, x2, t2) with t2 = ratio * t1.

    x1 and x2 are grid nodes in the ball.
    """
    if len(nodes) == 0:
        return []
    rng = np.random.default_rng(seed)
    last = float(u.times[-1])
    times = [
        float(t) for t in u.times[1:] if t > 0 and spec.t_ratio * t <= last + 1e-12
    ]
    if not times:
        return []
    axes = u.chart.axes
    pairs = []
    for _ in range(spec.pairs):
        i, j = rng.integers(len(nodes), size=2)
        t1 = times[int(rng.integers(len(times)))]
        x1 = np.array([axes[d][nodes[i][d]] for d in range(u.chart.dim)])
        x2 = np.array([axes[d][nodes[j][d]] for d in range(u.chart.dim)])
        pairs.append((x1, t1, x2, min(spec.t_ratio * t1, last)))
    return pairs


def _harnack_action(
    metric: MetricLike,
    x1: np.ndarray,
    x2: np.ndarray,
    tau: float,
    box: Optional[tuple[Sequence[float], Sequence[float]]],
) -> float:
    if tau > 0:
        return path_action(metric, x2, x1, tau, bounds=box)
    return 0.0 if np.allclose(x1, x2) else np.inf


def check_harnack(
    metric: MetricLike,
    u: ScalarField,
    coeffs: PDECoefficients,
    params: EstimateParams,
    pairs: Sequence[tuple[np.ndarray, float, np.ndarray, float]],
    tol: float,
    box: Optional[tuple[Sequence[float], Sequence[float]]] = None,
) -> MarginReport:
    """log u(x1, t1) against log u(x2, t2) + 2N log(t2/t1) + (t2 - t1) T + S."""
    a = ScalarExpression(coeffs.a, u.chart.dim)
    if not (a.is_constant and a.constant_value() == 0.0):
        raise NotApplicableError("the Harnack inequality needs a = 0")
    T = harnack_T(params)
    N = params.N
    rows = []
    monotone = True
    with STAGE_SECONDS.labels("harnack").time():
        for x1, t1, x2, t2 in pairs:
            if not 0 < t1 <= t2:
                raise DomainError(f"Harnack pair needs 0 < t1 <= t2, got {t1}, {t2}")
            tau = t2 - t1
            S = _harnack_action(metric, x1, x2, tau, box)
            lhs = float(np.log(u.sample(x1, t1)))
            base = float(np.log(u.sample(x2, t2)))
            rhs = base + 2.0 * N * np.log(t2 / t1) + tau * T + S
            if tau > 0 and np.isfinite(S):
                # fixed minimising path: S scales as 1 / tau
                energy = 2.0 * tau * S
                sweep = np.linspace(0.5 * t1, t1, 6)
                log_rhs = base + 2.0 * N * np.log(t2 / sweep) + (t2 - sweep) * T
                log_rhs += energy / (2.0 * (t2 - sweep))
                monotone &= bool(np.all(np.diff(log_rhs) <= 1e-12))
            row = {f"x{i + 1}": x1[i] for i in range(len(x1))}
            row.update({"t": t1})
            row.update({f"z{i + 1}": x2[i] for i in range(len(x2))})
            row.update({"t2": t2, "S": S, "lhs": lhs, "rhs": rhs, "margin": rhs - lhs})
            rows.append(pd.DataFrame([row]))
    extras = {"T": T, "log_rhs_monotone_in_t1": monotone}
    return _report(CheckName.HARNACK, rows, tol, extras=extras)


def check_apriori(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    V: ScalarExpression,
    N: float,
    result: StationaryResult,
    tol: float,
) -> MarginReport:
    """log u against 2N + 2 sqrt(N) sup|Delta V| + sqrt(2N) sup F(grad V) + 2 sup|V|."""
    if not result.converged or result.u is None:
        return _report(
            CheckName.APRIORI,
            [],
            tol,
            forced_status=CheckStatus.INCONCLUSIVE,
            extras={"stationary_residual": result.residual, "converged": False},
        )
    u = result.u
    chart = u.chart
    ops = operators_for(metric, measure, chart)
    ref = ops.reference(u.values[0])
    Vg = V.grid(chart.coords)
    sup_lap = float(np.abs(ref.linearized_laplacian(Vg)).max())
    sup_grad = float(np.sqrt(np.maximum(ref.norm2(ops.differential(Vg)), 0.0)).max())
    sup_V = float(np.abs(Vg).max())
    log_bound = (
        2.0 * N
        + 2.0 * np.sqrt(N) * sup_lap
        + np.sqrt(2.0 * N) * sup_grad
        + 2.0 * sup_V
    )
    mask = np.ones(chart.shape, dtype=bool)
    rows = [_frame(chart, mask, 0.0, np.log(u.values[0]), log_bound)]
    extras = {
        "log_bound": float(log_bound),
        "sup_lap_V": sup_lap,
        "sup_grad_V": sup_grad,
        "sup_V": sup_V,
        "E_apriori": apriori_E(N, sup_lap, sup_grad, sup_V),
        "stationary_residual": result.residual,
        "converged": True,
    }
    return _report(CheckName.APRIORI, rows, tol, extras=extras)


def check_curvature(
    scan: CurvatureScan, params: EstimateParams, tol: float
) -> MarginReport:
    """Scanned curvature against the K(2R) and K0 in use."""
    records = scan.records.copy()
    ricci = records["quantity"] == "min_mRic_over_F2"
    records["lhs"] = np.where(ricci, -params.K2R, records["value"])
    records["rhs"] = np.where(ricci, records["value"], params.K0)
    records["margin"] = records["rhs"] - records["lhs"]
    extras = {"scanned_K2R": scan.K2R, "scanned_K0": scan.K0_contribution}
    return _report(CheckName.CURVATURE_SCAN, [records], tol, extras=extras)
