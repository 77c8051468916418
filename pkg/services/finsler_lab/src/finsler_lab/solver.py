import logging
from typing import Any, NamedTuple, Optional

import backoff
import numpy as np
import scipy.sparse as sp
from scipy.optimize import NoConvergence, newton_krylov
from scipy.sparse.linalg import splu

from .config import get_settings
from .errors import ConvergenceError, DomainError, StabilityError
from .expressions import ScalarExpression
from .fields import FieldOperators, GridChart, ScalarField, operators_for
from .geometry import MeasureLike
from .metric_core import MetricLike
from .metrics import SOLVER_STEPS, STAGE_SECONDS
from .models import CoefficientBounds, PDECoefficients, SolveConfig

logger = logging.getLogger(__name__)

settings = get_settings()


def _axis_matrices(
    m: int, h: float, bc: str, order: int
) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """1-D first and second difference matrices for one axis.

    Dirichlet rows at the two end nodes are zero; reflecting ends use a
    mirrored ghost node; periodic axes are circulant.
    """
    D1 = np.zeros((m, m))
    D2 = np.zeros((m, m))
    c1_2 = {-1: -0.5, 1: 0.5}
    c2_2 = {-1: 1.0, 0: -2.0, 1: 1.0}
    c1_4 = {-2: 1 / 12, -1: -8 / 12, 1: 8 / 12, 2: -1 / 12}
    c2_4 = {-2: -1 / 12, -1: 16 / 12, 0: -30 / 12, 1: 16 / 12, 2: -1 / 12}
    for i in range(m):
        if bc == "periodic":
            c1, c2 = (c1_4, c2_4) if order == 4 else (c1_2, c2_2)
            for k, w in c1.items():
                D1[i, (i + k) % m] += w / h
            for k, w in c2.items():
                D2[i, (i + k) % m] += w / h**2
            continue
        if 1 <= i <= m - 2:
            wide = order == 4 and 2 <= i <= m - 3
            c1, c2 = (c1_4, c2_4) if wide else (c1_2, c2_2)
            for k, w in c1.items():
                D1[i, i + k] += w / h
            for k, w in c2.items():
                D2[i, i + k] += w / h**2
        elif bc == "reflecting":
            inner = 1 if i == 0 else m - 2
            D2[i, i] = -2.0 / h**2
            D2[i, inner] = 2.0 / h**2
    return sp.csr_matrix(D1), sp.csr_matrix(D2)


def _embed(matrix: sp.csr_matrix, axis: int, shape: tuple[int, ...]) -> sp.csr_matrix:
    """Kronecker embedding of a 1-D operator on ``axis`` of a C-ordered grid."""
    out = sp.identity(1, format="csr")
    for k, m in enumerate(shape):
        factor = matrix if k == axis else sp.identity(m, format="csr")
        out = sp.kron(out, factor, format="csr")
    return out


def boundary_mask(chart: GridChart, bc: str) -> np.ndarray:
    mask = np.zeros(chart.shape, dtype=bool)
    if bc != "dirichlet-positive":
        return mask
    return ~chart.interior_mask(width=1)


def _phi1(z: np.ndarray) -> np.ndarray:
    """expm1(z) / z, continued by 1 at z = 0."""
    small = np.abs(z) < 1e-12
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


class LogSchrodingerSolver:
    """Time stepper for u_t = Delta u + a u log u + b u on a chart grid.

    The semi-implicit scheme is a Strang splitting. The reaction part is
    solved exactly in w = log u over half steps,

        w(t + s) = w e^{a s} + b s phi1(a s),

    with a and b frozen at the sub-step midpoint. The diffusion part is a
    theta-scheme with the linearized operator Delta^{grad u*} assembled as a
    sparse matrix, where u* = 1.5 u^n - 0.5 u^{n-1} extrapolates the
    reference direction. Metrics whose fundamental tensor does not depend on
    the direction get one LU factorisation for the whole run.

    The explicit scheme advances u by forward Euler and refuses a time step
    above its diffusion stability limit.

    Attributes:
        ops (FieldOperators): Stencils, measure density and reference-direction factory.
        a (ScalarExpression): Coefficient of u log u.
        b (ScalarExpression): Coefficient of u.
        cfg (SolveConfig): Time step, scheme, boundary condition and floor.
        flags (list[str]): Conditions hit during the run, never raised.
    """

    def __init__(
        self,
        metric: MetricLike,
        measure: Optional[MeasureLike],
        coeffs: PDECoefficients,
        chart: GridChart,
        cfg: SolveConfig,
    ):
        if cfg.boundary == "periodic" and not chart.periodic:
            raise DomainError("periodic boundary needs a periodic chart")
        if chart.periodic and cfg.boundary != "periodic":
            raise DomainError("a periodic chart needs the periodic boundary")
        self.ops: FieldOperators = operators_for(
            metric, measure, chart, cfg.stencil_order
        )
        self.chart = chart
        self.cfg = cfg
        self.a = ScalarExpression(coeffs.a, chart.dim)
        self.b = ScalarExpression(coeffs.b, chart.dim)
        self.flags: list[str] = []
        self.floor_hits = 0
        self._fixed = boundary_mask(chart, cfg.boundary)
        self._direction_free = self.ops.metric.is_riemannian
        self._lu: Any = None
        self._L_cached: Optional[sp.csr_matrix] = None
        axes = [
            _axis_matrices(m, h, cfg.boundary, cfg.stencil_order)
            for m, h in zip(chart.points, chart.spacing)
        ]
        self._D1 = [_embed(d1, i, chart.shape) for i, (d1, _) in enumerate(axes)]
        self._D2 = [_embed(d2, i, chart.shape) for i, (_, d2) in enumerate(axes)]

    def coefficient(self, expr: ScalarExpression, t: float) -> np.ndarray:
        return expr.grid(self.chart.coords, t)

    def assemble(self, u_ref: np.ndarray) -> sp.csr_matrix:
        """Sparse Delta^{grad u_ref} = A^{ij} D_ij + c^j D_j.

        Here c^j = d_i A^{ij} + A^{ij} d_i Phi.
        """
        n = self.chart.dim
        A = self.ops.reference(u_ref).A
        L = sp.csr_matrix((int(np.prod(self.chart.shape)),) * 2)
        for i in range(n):
            for j in range(n):
                Dij = self._D2[i] if i == j else self._D1[i] @ self._D1[j]
                L = L + sp.diags(A[i, j].ravel()) @ Dij
        for j in range(n):
            c = sum(
                self.ops.stencil.first(A[i, j], i) + A[i, j] * self.ops.dphi[i]
                for i in range(n)
            )
            if np.any(c != 0.0):
                L = L + sp.diags(np.asarray(c).ravel()) @ self._D1[j]
        if np.any(self._fixed):
            L = sp.diags((~self._fixed).ravel().astype(float)) @ L
        return sp.csr_matrix(L)

    def stability_ratio(self, u: np.ndarray) -> float:
        A = self.ops.reference(u).A
        h = self.chart.spacing
        n = self.chart.dim
        total = sum(2.0 * A[i, i] / h[i] ** 2 for i in range(n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    total = total + np.abs(A[i, j]) / (h[i] * h[j])
        return float(self.cfg.dt * np.max(total))

    def react(self, u: np.ndarray, t: float, step: float) -> np.ndarray:
        """Exact reaction over [t, t + step] in log variables; fixed nodes untouched."""
        mid = t + 0.5 * step
        a = self.coefficient(self.a, mid)
        b = self.coefficient(self.b, mid)
        w = np.log(np.maximum(u, self.cfg.positivity_floor))
        w_new = w * np.exp(a * step) + b * step * _phi1(a * step)
        return np.where(self._fixed, u, np.exp(w_new))

    def diffuse(self, u: np.ndarray, u_ref: np.ndarray) -> np.ndarray:
        theta, dt = self.cfg.theta, self.cfg.dt
        if self._direction_free and self._lu is not None:
            L, lu = self._L_cached, self._lu
        else:
            L = self.assemble(u_ref)
            eye = sp.identity(L.shape[0], format="csc")
            lu = splu(sp.csc_matrix(eye - theta * dt * L))
            if self._direction_free:
                self._L_cached, self._lu = L, lu
        rhs = u.ravel() + (1.0 - theta) * dt * (L @ u.ravel())
        return lu.solve(rhs).reshape(self.chart.shape)

    def _floor(self, u: np.ndarray) -> np.ndarray:
        low = u < self.cfg.positivity_floor
        if np.any(low):
            self.floor_hits += int(low.sum())
            if "positivity-floor" not in self.flags:
                self.flags.append("positivity-floor")
                logger.warning(
                    f"positivity floor {self.cfg.positivity_floor:g} hit; "
                    "values clamped"
                )
            u = np.where(low, self.cfg.positivity_floor, u)
        return u

    def step_semi_implicit(
        self, u: np.ndarray, u_prev: np.ndarray, t: float
    ) -> np.ndarray:
        dt = self.cfg.dt
        u_half = self.react(u, t, 0.5 * dt)
        u_ref = 1.5 * u - 0.5 * u_prev
        u_diff = self._floor(self.diffuse(u_half, u_ref))
        return self._floor(self.react(u_diff, t + 0.5 * dt, 0.5 * dt))

    def step_explicit(self, u: np.ndarray, t: float) -> np.ndarray:
        L = self.assemble(u)
        a = self.coefficient(self.a, t)
        b = self.coefficient(self.b, t)
        safe = np.maximum(u, self.cfg.positivity_floor)
        reaction = np.where(u > 0, a * u * np.log(safe) + b * u, 0.0)
        reaction = np.where(self._fixed, 0.0, reaction)
        lap = (L @ u.ravel()).reshape(self.chart.shape)
        return self._floor(u + self.cfg.dt * (lap + reaction))

    def run(self, u0: np.ndarray) -> ScalarField:
        u0 = np.asarray(u0, dtype=float)
        if u0.shape != self.chart.shape:
            raise DomainError("initial data does not match the grid")
        if np.any(u0 <= 0) or not np.all(np.isfinite(u0)):
            raise DomainError("initial data must be finite and positive")
        cfg = self.cfg
        if cfg.scheme == "explicit":
            ratio = self.stability_ratio(u0)
            if ratio > 1.0:
                logger.error(
                    f"explicit step violates the stability bound (ratio {ratio:.3f})"
                )
                raise StabilityError(
                    f"dt={cfg.dt} exceeds the explicit stability limit by {ratio:.3f}x",
                    ratio=ratio,
                )
        steps = cfg.steps
        times = cfg.start_time + cfg.dt * np.arange(steps + 1)
        values = np.empty((steps + 1, *self.chart.shape))
        values[0] = u0
        u_prev = u0
        with STAGE_SECONDS.labels("solve").time():
            for k in range(steps):
                u = values[k]
                if cfg.scheme == "explicit":
                    values[k + 1] = self.step_explicit(u, times[k])
                else:
                    values[k + 1] = self.step_semi_implicit(u, u_prev, times[k])
                u_prev = u
                if not np.all(np.isfinite(values[k + 1])):
                    raise StabilityError(
                        f"non-finite values at step {k + 1}", ratio=np.inf
                    )
        SOLVER_STEPS.labels(cfg.scheme).inc(steps)
        logger.info(
            f"solved {steps} {cfg.scheme} steps on grid {self.chart.points}, "
            f"max u {values[-1].max():.6g}"
        )
        return ScalarField(
            self.chart, values, times, cfg.stencil_order, tuple(self.flags)
        )


def solve_log_schrodinger(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    coeffs: PDECoefficients,
    u0: ScalarField,
    cfg: SolveConfig,
) -> ScalarField:
    solver = LogSchrodingerSolver(metric, measure, coeffs, u0.chart, cfg)
    return solver.run(u0.values[0])


def time_mollify(u: ScalarField, eps: float) -> ScalarField:
    """Convolve in time with the truncated Gaussian kernel of width eps.

    Only times at distance more than eps from both ends of the series are
    returned; the discrete kernel weights sum to one.
    """
    dt = u.dt
    if dt <= 0 or eps <= dt:
        raise DomainError(f"mollifier width {eps} must exceed the time step {dt}")
    if not np.allclose(np.diff(u.times), dt, rtol=1e-9, atol=0.0):
        raise DomainError("time mollification needs uniformly spaced snapshots")
    K = int(np.ceil(eps / dt - 1e-12)) - 1
    offsets = np.arange(-K, K + 1)
    weights = np.exp(-((offsets * dt) ** 2) / eps**2)
    weights = weights / weights.sum()
    t0, t1 = u.times[0], u.times[-1]
    keep = np.flatnonzero((u.times - t0 > eps) & (t1 - u.times > eps))
    if keep.size == 0:
        raise DomainError(
            f"no snapshot lies more than {eps} from the ends of the series"
        )
    out = np.zeros((keep.size, *u.chart.shape))
    for w, k in zip(weights, offsets):
        out += w * u.values[keep - k]
    return ScalarField(u.chart, out, u.times[keep], u.order, u.flags)


def measure_coefficient_bounds(
    ops: FieldOperators,
    coeffs: PDECoefficients,
    solution: ScalarField,
    region: np.ndarray,
    max_snapshots: int = 11,
) -> CoefficientBounds:
    """Post-hoc coefficient bounds over ``region`` and the solution's time range.

    Gradient and Laplacian bounds use the solution's own reference direction.
    """
    chart = solution.chart
    a = ScalarExpression(coeffs.a, chart.dim)
    b = ScalarExpression(coeffs.b, chart.dim)
    a_t = a.diff_time()
    picks = sorted(
        set(np.linspace(0, len(solution.times) - 1, max_snapshots).round().astype(int))
    )
    inf_a, sup_a, sup_abs_a = np.inf, -np.inf, 0.0
    inf_b, sup_b, sup_abs_b = np.inf, -np.inf, 0.0
    sup_abs_a_t = sup_grad_a = sup_grad_b = 0.0
    sup_lap = -np.inf
    inf_lap_b = np.inf
    for k in picks:
        t = float(solution.times[k])
        av = a.grid(chart.coords, t)
        bv = b.grid(chart.coords, t)
        atv = a_t.grid(chart.coords, t)
        ref = ops.reference(solution.values[k])
        grad_a = np.sqrt(np.maximum(ref.norm2(ops.differential(av)), 0.0))
        grad_b = np.sqrt(np.maximum(ref.norm2(ops.differential(bv)), 0.0))
        lap_a = ref.linearized_laplacian(av)
        lap_b = ref.linearized_laplacian(bv)
        r = region
        inf_a, sup_a = min(inf_a, av[r].min()), max(sup_a, av[r].max())
        inf_b, sup_b = min(inf_b, bv[r].min()), max(sup_b, bv[r].max())
        sup_abs_a = max(sup_abs_a, np.abs(av[r]).max())
        sup_abs_b = max(sup_abs_b, np.abs(bv[r]).max())
        sup_abs_a_t = max(sup_abs_a_t, np.abs(atv[r]).max())
        sup_grad_a = max(sup_grad_a, grad_a[r].max())
        sup_grad_b = max(sup_grad_b, grad_b[r].max())
        inf_lap_b = min(inf_lap_b, lap_b[r].min())
        sup_lap = max(sup_lap, (lap_a + atv)[r].max())
    return CoefficientBounds(
        inf_a=float(inf_a),
        sup_a=float(sup_a),
        sup_abs_a=float(sup_abs_a),
        inf_b=float(inf_b),
        sup_b=float(sup_b),
        sup_abs_b=float(sup_abs_b),
        sup_abs_a_t=float(sup_abs_a_t),
        sup_grad_a=float(sup_grad_a),
        sup_grad_b=float(sup_grad_b),
        inf_lap_b=float(inf_lap_b),
        sup_lap_a_plus_a_t=float(sup_lap),
    )


class StationaryResult(NamedTuple):
    u: Optional[ScalarField]
    residual: float
    converged: bool


class _StationaryProblem:
    """Residual of Delta w + F*(dw)^2 + a w + V = 0 for w = log u.

    Equivalent to Delta u + a u log u + V u = 0.
    """

    def __init__(self, ops: FieldOperators, a: float, V: np.ndarray):
        self.ops = ops
        self.a = a
        self.V = V
        self.w = -V / a if a != 0 else np.zeros_like(V)
        self.residual = np.inf

    def __call__(self, w: np.ndarray) -> np.ndarray:
        lap = self.ops.reference(w).linearized_laplacian(w)
        return lap + self.ops.dual_norm2(self.ops.differential(w)) + self.a * w + self.V

    def solve(self) -> np.ndarray:
        try:
            w = newton_krylov(
                self,
                self.w,
                f_tol=settings.STATIONARY_TOL,
                maxiter=settings.STATIONARY_MAX_ITER,
            )
        except NoConvergence as e:
            self.w = np.asarray(e.args[0])
            self.residual = float(np.max(np.abs(self(self.w))))
            raise ConvergenceError(
                "stationary Newton-Krylov solve stalled", self.residual
            )
        self.w = np.asarray(w)
        self.residual = float(np.max(np.abs(self(self.w))))
        return self.w


@backoff.on_exception(
    backoff.constant,
    ConvergenceError,
    max_tries=settings.MAX_RETRIES,
    interval=0,
    jitter=None,
    raise_on_giveup=False,
)
def _solve_stationary(problem: _StationaryProblem) -> np.ndarray:
    return problem.solve()


def solve_stationary(
    metric: MetricLike,
    measure: Optional[MeasureLike],
    chart: GridChart,
    V: ScalarExpression,
    a: float = 2.0,
) -> StationaryResult:
    """Positive solution of Delta u + a u log u + V u = 0 on a periodic chart.

    Solved for w = log u by Newton-Krylov from w = -V/a, with warm restarts
    from the last iterate.
    """
    if not chart.periodic:
        raise DomainError("the stationary solve needs a periodic chart")
    ops = operators_for(metric, measure, chart)
    Vg = V.grid(chart.coords)
    problem = _StationaryProblem(ops, a, Vg)
    with STAGE_SECONDS.labels("stationary").time():
        w = _solve_stationary(problem)
    if w is None:
        logger.warning(
            f"stationary solve did not converge (residual {problem.residual:.3e})"
        )
        return StationaryResult(None, problem.residual, False)
    u = ScalarField(chart, np.exp(w), [0.0])
    return StationaryResult(u, problem.residual, True)
