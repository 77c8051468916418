import logging
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple, Optional, Sequence

import backoff
import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from scipy.optimize import OptimizeResult, minimize, minimize_scalar

from .config import get_settings
from .errors import DomainError
from .fields import GridChart, ScalarField, Stencil, from_flat
from .geometry import FinslerGeometry, build_geometry, rk4_step
from .metric_core import (
    MetricLike,
    as_metric,
    forward_ball_extremes,
    misalignment,
)
from .metrics import OPTIMIZER_RETRIES, STAGE_SECONDS
from .models import CutoffProfile

logger = logging.getLogger(__name__)

settings = get_settings()


@dataclass(frozen=True)
class GeodesicPath:
    s: np.ndarray
    x: np.ndarray
    v: np.ndarray
    truncated: bool = False

    def speed(self, metric: MetricLike) -> np.ndarray:
        m = as_metric(metric)
        return np.asarray(m.batched("F")(jnp.asarray(self.x), jnp.asarray(self.v)))

    def to_frame(self) -> pd.DataFrame:
        data = {"s": self.s}
        for i in range(self.x.shape[1]):
            data[f"x{i + 1}"] = self.x[:, i]
        for i in range(self.v.shape[1]):
            data[f"v{i + 1}"] = self.v[:, i]
        return pd.DataFrame(data)


_integrators: dict[tuple[int, int], Callable[..., Any]] = {}


def _integrator(geo: FinslerGeometry, steps: int) -> Callable[..., Any]:
    key = (id(geo), steps)
    if key not in _integrators:

        def run(x0: Any, v0: Any, h: Any) -> tuple[Any, Any]:
            def body(
                carry: tuple[Any, Any], _: Any
            ) -> tuple[tuple[Any, Any], tuple[Any, Any]]:
                x, v = rk4_step(geo.spray, carry[0], carry[1], h)
                return (x, v), (x, v)

            _, (xs, vs) = jax.lax.scan(body, (x0, v0), None, length=steps)
            return xs, vs

        _integrators[key] = jax.jit(run)
    return _integrators[key]


def integrate_geodesic(
    metric: MetricLike,
    x0: Sequence[float],
    y0: Sequence[float],
    smax: float,
    ds: float,
    chart: Optional[GridChart] = None,
) -> GeodesicPath:
    """Integrate x'' + 2G(x, x') = 0 with classical RK4.

    The path is truncated, and flagged, at the first sample that leaves the
    chart.
    """
    x_start = np.asarray(x0, dtype=float)
    v_start = np.asarray(y0, dtype=float)
    if not np.any(v_start != 0.0):
        raise DomainError("initial velocity must be nonzero")
    if smax <= 0 or ds <= 0:
        raise DomainError("smax and ds must be positive")
    geo = build_geometry(metric)
    steps = max(1, int(round(smax / ds)))
    h = smax / steps
    with STAGE_SECONDS.labels("geodesic").time():
        xs, vs = _integrator(geo, steps)(jnp.asarray(x_start), jnp.asarray(v_start), h)
    s = h * np.arange(steps + 1)
    x = np.vstack([x_start, np.asarray(xs)])
    v = np.vstack([v_start, np.asarray(vs)])
    truncated = False
    bad = ~np.all(np.isfinite(x), axis=1)
    if chart is not None:
        bad |= ~chart.contains(x)
    if np.any(bad):
        stop = int(np.argmax(bad))
        s, x, v = s[:stop], x[:stop], v[:stop]
        truncated = True
        logger.warning(f"geodesic left the chart at s={h * stop:.4g}; path truncated")
    return GeodesicPath(s=s, x=x, v=v, truncated=truncated)


class PathOptimum(NamedTuple):
    energy: float
    points: np.ndarray
    converged: bool
    restarts: int


_energies: dict[tuple[int, int], Callable[..., Any]] = {}


def _energy_fn(geo: FinslerGeometry, segments: int) -> Callable[..., Any]:
    """jit(value_and_grad) of sum F^2(mid, K dz) / K over interior nodes z."""
    key = (id(geo), segments)
    if key not in _energies:
        F2 = jax.vmap(geo.metric.F2)
        K = segments

        def energy(z: Any, a: Any, b: Any) -> Any:
            nodes = jnp.vstack([a, z.reshape(K - 1, -1), b])
            dz = K * (nodes[1:] - nodes[:-1])
            mid = 0.5 * (nodes[1:] + nodes[:-1])
            return jnp.sum(F2(mid, dz)) / K

        _energies[key] = jax.jit(jax.value_and_grad(energy))
    return _energies[key]


class _PathProblem:
    """Discrete path energy between fixed endpoints.

    The minimum equals d(start, end)^2 for a constant-speed minimizer.
    """

    def __init__(
        self,
        geo: FinslerGeometry,
        start: np.ndarray,
        end: np.ndarray,
        segments: int,
        bounds: Optional[tuple[np.ndarray, np.ndarray]],
    ):
        self.start = start
        self.end = end
        self.segments = segments
        self.dim = len(start)
        self._value_and_grad = _energy_fn(geo, segments)
        self._a, self._b = jnp.asarray(start), jnp.asarray(end)
        self.bounds = None
        if bounds is not None:
            lo, hi = bounds
            count = (segments - 1) * self.dim
            self.bounds = [(lo[i % self.dim], hi[i % self.dim]) for i in range(count)]
        self.z: Optional[np.ndarray] = None

    def chord(self) -> np.ndarray:
        w = np.linspace(0.0, 1.0, self.segments + 1)[1:-1, None]
        return (1 - w) * self.start + w * self.end

    def perturbed(self, rng: np.random.Generator) -> np.ndarray:
        w = np.linspace(0.0, 1.0, self.segments + 1)[1:-1, None]
        span = max(float(np.linalg.norm(self.end - self.start)), 1e-3)
        scale = settings.PATH_PERTURBATION * span
        bump = np.sin(np.pi * w) * rng.normal(size=(1, self.dim)) * scale
        z = self.chord() + bump
        if self.bounds is not None:
            lo = np.array([b[0] for b in self.bounds[: self.dim]])
            hi = np.array([b[1] for b in self.bounds[: self.dim]])
            z = np.clip(z, lo, hi)
        return z

    def fun(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad = self._value_and_grad(jnp.asarray(z), self._a, self._b)
        return float(value), np.asarray(grad, dtype=float)

    def solve(self) -> OptimizeResult:
        assert self.z is not None
        result = minimize(
            self.fun,
            self.z.ravel(),
            jac=True,
            method="L-BFGS-B",
            bounds=self.bounds,
            options={"gtol": settings.PATH_GTOL, "maxiter": 2000},
        )
        self.z = result.x
        return result


def _count_retry(details: dict[str, Any]) -> None:
    OPTIMIZER_RETRIES.inc()
    logger.debug(f"path optimiser warm restart {details['tries']}")


@backoff.on_predicate(
    backoff.constant,
    lambda result: not result.success,
    max_tries=settings.MAX_RETRIES,
    interval=0,
    jitter=None,
    on_backoff=_count_retry,
)
def _solve_with_restarts(problem: _PathProblem) -> OptimizeResult:
    return problem.solve()


def optimize_path(
    metric: MetricLike,
    start: Sequence[float],
    end: Sequence[float],
    n_restarts: Optional[int] = None,
    bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None,
    seed: int = 0,
) -> PathOptimum:
    a = np.asarray(start, dtype=float)
    b = np.asarray(end, dtype=float)
    if a.shape != b.shape:
        raise DomainError("path endpoints must have the same dimension")
    geo = build_geometry(metric)
    segments = settings.PATH_CONTROL_POINTS + 1
    if np.allclose(a, b, rtol=0.0, atol=1e-14):
        return PathOptimum(0.0, np.vstack([a, b]), True, 0)
    box = None
    if bounds is not None:
        box = (np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float))
    problem = _PathProblem(geo, a, b, segments, box)
    restarts = settings.PATH_RESTARTS if n_restarts is None else n_restarts
    rng = np.random.default_rng(seed)
    best: Optional[PathOptimum] = None
    with STAGE_SECONDS.labels("path_optimisation").time():
        for k in range(max(1, restarts)):
            problem.z = problem.chord() if k == 0 else problem.perturbed(rng)
            result = _solve_with_restarts(problem)
            nodes = np.vstack([a, result.x.reshape(segments - 1, -1), b])
            candidate = PathOptimum(float(result.fun), nodes, bool(result.success), k)
            if best is None or candidate.energy < best.energy:
                best = candidate
    assert best is not None
    if not best.converged:
        logger.warning(
            f"path optimisation from {a} to {b} did not converge; using best value"
        )
    return best


def forward_distance(
    metric: MetricLike,
    p: Sequence[float],
    x: Sequence[float],
    n_restarts: Optional[int] = None,
    bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None,
) -> float:
    m = as_metric(metric)
    p_arr, x_arr = np.asarray(p, dtype=float), np.asarray(x, dtype=float)
    if m.is_flat:
        if np.allclose(p_arr, x_arr, rtol=0.0, atol=1e-14):
            return 0.0
        return float(m.F(jnp.asarray(p_arr), jnp.asarray(x_arr - p_arr)))
    best = optimize_path(m, p_arr, x_arr, n_restarts, bounds)
    return float(np.sqrt(max(best.energy, 0.0)))


def path_action(
    metric: MetricLike,
    x2: Sequence[float],
    x1: Sequence[float],
    tau: float,
    n_restarts: Optional[int] = None,
    bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None,
) -> float:
    """Harnack action: min over paths x2 -> x1 of (1/2 tau) int_0^1 F^2(gamma')."""
    if tau <= 0:
        raise DomainError("tau must be positive")
    m = as_metric(metric)
    if m.is_flat:
        # straight lines minimise the action of a Minkowski norm
        chord = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
        if not np.any(chord):
            return 0.0
        energy = float(m.F2(jnp.asarray(x2, dtype=float), jnp.asarray(chord)))
        return energy / (2.0 * tau)
    best = optimize_path(m, x2, x1, n_restarts, bounds)
    return best.energy / (2.0 * tau)


def distance_field(
    metric: MetricLike,
    chart: GridChart,
    p: Sequence[float],
    mask: Optional[np.ndarray] = None,
    n_restarts: Optional[int] = None,
) -> np.ndarray:
    """r(x) = d(p, x) on the grid; NaN outside ``mask``."""
    m = as_metric(metric)
    p_arr = np.asarray(p, dtype=float)
    pts = chart.flat_points
    if m.is_flat:
        diff = pts - p_arr
        zero = np.linalg.norm(diff, axis=1) == 0.0
        base = jnp.asarray(np.broadcast_to(p_arr, pts.shape))
        F = np.asarray(
            m.batched("F")(base, jnp.asarray(np.where(zero[:, None], 1.0, diff)))
        )
        r = np.where(zero, 0.0, F)
    else:
        keep = np.ones(len(pts), dtype=bool) if mask is None else mask.ravel()
        bounds = (np.asarray(chart.lower), np.asarray(chart.upper))
        r = np.full(len(pts), np.nan)
        for k in np.flatnonzero(keep):
            r[k] = forward_distance(m, p_arr, pts[k], n_restarts, bounds)
    r = r.reshape(chart.shape)
    if mask is not None:
        r = np.where(mask, r, np.nan)
    return r


def quintic_profile(r: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def quintic_profile_d1(r: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    return -30.0 * s**2 * (1.0 - s) ** 2


def quintic_profile_d2(r: np.ndarray) -> np.ndarray:
    s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    return -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)


def profile_constants(samples: int = 20001) -> tuple[float, float]:
    """C1 = max(-phi'/sqrt(phi)) and C2 = max(-phi'') over the transition [1, 2]."""
    r = np.linspace(1.0, 2.0, samples)[1:-1]

    def ratio(x: float) -> float:
        return float(-quintic_profile_d1(x) / np.sqrt(quintic_profile(x)))

    def curvature(x: float) -> float:
        return float(-quintic_profile_d2(x))

    constants = []
    h = r[1] - r[0]
    for fn in (ratio, curvature):
        values = np.array([fn(x) for x in r])
        k = int(np.argmax(values))
        refined = minimize_scalar(
            lambda x: -fn(x),
            bounds=(max(1.0, r[k] - h), min(2.0 - 1e-12, r[k] + h)),
            method="bounded",
            options={"xatol": 1e-12},
        )
        constants.append(max(float(values[k]), -float(refined.fun)))
    return constants[0], constants[1]


@dataclass(frozen=True)
class CutoffField:
    center: np.ndarray
    radius: float
    C1: float
    C2: float
    values: np.ndarray
    r: np.ndarray
    chart: GridChart

    def inner_mask(self) -> np.ndarray:
        return np.nan_to_num(self.r, nan=np.inf) <= self.radius

    def support_mask(self) -> np.ndarray:
        return np.nan_to_num(self.r, nan=np.inf) < 2.0 * self.radius


def _check_ball_inside(
    metric: MetricLike, chart: GridChart, p: np.ndarray, radius: float
) -> None:
    if chart.periodic:
        return
    if not np.all(chart.contains(forward_ball_extremes(metric, p, 2.0 * radius))):
        raise DomainError(f"the ball B_p(2R) with R={radius} leaves the chart")


def build_cutoff(
    metric: MetricLike,
    chart: GridChart,
    p: Sequence[float],
    R: float,
    profile: Optional[CutoffProfile] = None,
) -> CutoffField:
    """phi(x) = profile(d(p, x) / R) on the grid."""
    if R <= 0:
        raise DomainError("cutoff radius must be positive")
    p_arr = np.asarray(p, dtype=float)
    _check_ball_inside(metric, chart, p_arr, R)
    profile = profile or CutoffProfile()
    C1, C2 = profile_constants()
    C1 = profile.C1 or C1
    C2 = profile.C2 or C2
    # distances are only needed where the profile is not yet zero
    reach = np.abs(forward_ball_extremes(metric, p_arr, 2.0 * R) - p_arr).max(axis=0)
    near = np.abs(chart.flat_points - p_arr) <= settings.CUTOFF_REACH_FACTOR * reach
    box = np.all(near, axis=1).reshape(chart.shape)
    r = distance_field(metric, chart, p_arr, mask=box)
    shaped = quintic_profile(np.nan_to_num(r, nan=np.inf) / R)
    values = np.where(np.isnan(r), 0.0, shaped)
    return CutoffField(
        center=p_arr, radius=R, C1=C1, C2=C2, values=values, r=r, chart=chart
    )


class GradientBoundScan(NamedTuple):
    margin: np.ndarray
    min_margin: float
    bound: float
    passed: bool


def cutoff_gradient_scan(
    metric: MetricLike,
    cutoff: CutoffField,
    reference: Optional[np.ndarray] = None,
    alpha: Optional[float] = None,
    tol: float = 1e-10,
) -> GradientBoundScan:
    """Scan alpha C1^2 / R^2 - F^2_{grad u}(grad^{grad u} phi) / phi where phi > 1e-8.

    ``reference`` is the g^{ij}(grad u) field of shape (n, n, *grid); the
    identity is used when omitted.
    """
    m = as_metric(metric)
    chart = cutoff.chart
    n = chart.dim
    if alpha is None:
        a = misalignment(
            m, (chart.lower, chart.upper), settings.MISALIGNMENT_DIRS
        )
    else:
        a = alpha
    pts = chart.flat_points
    R = cutoff.radius
    r_flat = np.nan_to_num(cutoff.r, nan=np.inf).ravel()
    if m.is_flat:
        p = jnp.asarray(cutoff.center)

        def radial(x: Any) -> Any:
            return m.F(p, x - p)

        regular = (np.isfinite(r_flat) & (r_flat > 0))[:, None]
        safe = np.where(regular, pts, pts + 1.0)
        dr = np.asarray(jax.jit(jax.vmap(jax.grad(radial)))(jnp.asarray(safe)))
        dr = from_flat(np.where(regular, dr, 0.0), chart.shape)
    else:
        dr = Stencil(chart).differential(np.nan_to_num(cutoff.r, nan=0.0))
    slope = quintic_profile_d1(np.nan_to_num(cutoff.r, nan=np.inf) / R) / R
    dphi = slope * dr
    A = reference if reference is not None else np.broadcast_to(
        np.eye(n).reshape(n, n, *([1] * n)), (n, n, *chart.shape)
    )
    q = np.einsum("i...,ij...,j...->...", dphi, A, dphi)
    bound = a * cutoff.C1**2 / R**2
    active = cutoff.values > 1e-8
    margin = np.full(chart.shape, np.nan)
    margin[active] = bound - q[active] / cutoff.values[active]
    min_margin = float(np.nanmin(margin)) if np.any(active) else 0.0
    return GradientBoundScan(margin, min_margin, bound, min_margin >= -tol)


def ball_nodes(field: ScalarField, r: np.ndarray, radius: float) -> np.ndarray:
    """Indices of interior grid nodes with r < radius."""
    mask = field.chart.interior_mask() & (np.nan_to_num(r, nan=np.inf) < radius)
    return np.argwhere(mask)
