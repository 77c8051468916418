import logging
from functools import lru_cache
from typing import Any, Callable, NamedTuple, Optional, Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np
import pandas as pd
from scipy.stats import qmc

from .config import get_settings
from .errors import DegenerateFlagError, DomainError, InvalidMetricError
from .expressions import ScalarExpression, VectorExpression
from .metric_core import (
    Covector,
    FinslerMetric,
    MetricLike,
    TangentSample,
    as_metric,
    direction_set,
    forward_ball_extremes,
)
from .models import MeasureKind, MeasureSpec, MetricFamily

logger = logging.getLogger(__name__)

FieldLike = Union[Sequence[float], np.ndarray, VectorExpression, Callable[[Any], Any]]


class MeasureDensity:
    """Smooth positive density sigma(x); exposes Phi = log sigma as jax kernels."""

    def __init__(self, spec: MeasureSpec, metric: FinslerMetric):
        self.spec = spec
        self.metric = metric
        self.kind = spec.kind
        self._log_sigma: Optional[ScalarExpression] = None
        if spec.kind == MeasureKind.CUSTOM:
            self._log_sigma = ScalarExpression(spec.sigma or "1", metric.dim).log()
        self._batched: dict[str, Callable[..., Any]] = {}

    @property
    def is_constant(self) -> bool:
        if self.kind == MeasureKind.LEBESGUE:
            return True
        if self.kind == MeasureKind.CUSTOM:
            return bool(self._log_sigma is not None and self._log_sigma.is_constant)
        return self.metric.is_flat

    def phi(self, x: Any) -> Any:
        if self.kind == MeasureKind.LEBESGUE:
            return 0.0 * jnp.sum(x)
        if self.kind == MeasureKind.CUSTOM:
            assert self._log_sigma is not None
            return self._log_sigma.at(x) + 0.0 * jnp.sum(x)
        m = self.metric
        if m.family == MetricFamily.EUCLIDEAN:
            return 0.0 * jnp.sum(x)
        a = m.riemannian_part(x)
        value = 0.5 * jnp.linalg.slogdet(a)[1]
        if m.family == MetricFamily.RANDERS:
            b = m.one_form(x)
            beta2 = b @ jnp.linalg.solve(a, b)
            value = value + 0.5 * (m.dim + 1) * jnp.log(1.0 - beta2)
        return value

    def dphi(self, x: Any) -> Any:
        return jax.grad(self.phi)(x)

    def sigma(self, x: Any) -> Any:
        return jnp.exp(self.phi(x))

    def batched(self, name: str) -> Callable[..., Any]:
        if name not in self._batched:
            self._batched[name] = jax.jit(jax.vmap(getattr(self, name)))
        return self._batched[name]


@lru_cache(maxsize=64)
def _compile_measure(spec: MeasureSpec, metric: FinslerMetric) -> MeasureDensity:
    return MeasureDensity(spec, metric)


MeasureLike = Union[MeasureSpec, MeasureDensity]


def as_measure(measure: MeasureLike, metric: FinslerMetric) -> MeasureDensity:
    if isinstance(measure, MeasureDensity):
        return measure
    return _compile_measure(measure, metric)


def rk4_step(spray: Callable[[Any, Any], Any], x: Any, v: Any, h: Any) -> tuple:
    """One RK4 step of x'' + 2G(x, x') = 0."""

    def rhs(state_x: Any, state_v: Any) -> tuple[Any, Any]:
        return state_v, -2.0 * spray(state_x, state_v)

    k1x, k1v = rhs(x, v)
    k2x, k2v = rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
    k3x, k3v = rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
    k4x, k4v = rhs(x + h * k3x, v + h * k3v)
    x_new = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new


class FinslerGeometry:
    """Connection, curvature and distortion kernels for one metric measure space.

    All methods named after a tensor are per-point jax functions of (x, y);
    index conventions follow the coordinate formulas, with derivative slots
    appended last by ``jax.jacfwd``.
    """

    def __init__(self, metric: FinslerMetric, measure: MeasureDensity):
        self.metric = metric
        self.measure = measure
        self.dim = metric.dim
        self._batched: dict[str, Callable[..., Any]] = {}

    def spray(self, x: Any, y: Any) -> Any:
        F2 = self.metric.F2
        dF2_dy = jax.grad(F2, argnums=1)
        mixed = jax.jacfwd(dF2_dy, argnums=0)(x, y)
        term = mixed @ y - jax.grad(F2, argnums=0)(x, y)
        return 0.25 * jnp.linalg.solve(self.metric.g(x, y), term)

    def nonlinear(self, x: Any, y: Any) -> Any:
        return jax.jacfwd(self.spray, argnums=1)(x, y)

    def chern(self, x: Any, y: Any) -> Any:
        g = self.metric.g
        N = self.nonlinear(x, y)
        dgx = jax.jacfwd(g, argnums=0)(x, y)
        dgy = jax.jacfwd(g, argnums=1)(x, y)
        # dg[l, k, j] = delta_j g_lk
        dg = dgx - jnp.einsum("lkm,mj->lkj", dgy, N)
        T = (
            jnp.einsum("lkj->ljk", dg)
            + jnp.einsum("jlk->ljk", dg)
            - jnp.einsum("jkl->ljk", dg)
        )
        return 0.5 * jnp.einsum("il,ljk->ijk", jnp.linalg.inv(g(x, y)), T)

    def riemann(self, x: Any, y: Any) -> Any:
        gamma = self.chern(x, y)
        N = self.nonlinear(x, y)
        dgx = jax.jacfwd(self.chern, argnums=0)(x, y)
        dgy = jax.jacfwd(self.chern, argnums=1)(x, y)
        # D[i, j, l, k] = delta_k Gamma^i_jl
        D = dgx - jnp.einsum("ijlm,mk->ijlk", dgy, N)
        return (
            jnp.einsum("ijlk->ijkl", D)
            - D
            + jnp.einsum("imk,mjl->ijkl", gamma, gamma)
            - jnp.einsum("iml,mjk->ijkl", gamma, gamma)
        )

    def nonriemannian(self, x: Any, y: Any) -> Any:
        return -jax.jacfwd(self.chern, argnums=1)(x, y)

    def landsberg(self, x: Any, y: Any) -> Any:
        return -jnp.einsum("p,ipkl->ikl", y, self.nonriemannian(x, y))

    def curvature_operator(self, x: Any, y: Any) -> Any:
        """R_y as a matrix: R_y(v)^i = R^i_jkl y^j v^k y^l."""
        return jnp.einsum("ijkl,j,l->ik", self.riemann(x, y), y, y)

    def spray_curvature(self, x: Any, y: Any) -> Any:
        """R^i_k from the spray alone, independent of the connection."""
        G = self.spray(x, y)
        N = self.nonlinear(x, y)
        dGx = jax.jacfwd(self.spray, argnums=0)(x, y)
        dNx = jax.jacfwd(self.nonlinear, argnums=0)(x, y)
        dNy = jax.jacfwd(self.nonlinear, argnums=1)(x, y)
        return (
            2.0 * dGx
            - jnp.einsum("ikj,j->ik", dNx, y)
            + 2.0 * jnp.einsum("ijk,j->ik", dNy, G)
            - N @ N
        )

    def tau(self, x: Any, y: Any) -> Any:
        return 0.5 * jnp.linalg.slogdet(self.metric.g(x, y))[1] - self.measure.phi(x)

    def s_curvature(self, x: Any, y: Any) -> Any:
        dtx = jax.grad(self.tau, argnums=0)(x, y)
        dty = jax.grad(self.tau, argnums=1)(x, y)
        return dtx @ y - 2.0 * dty @ self.spray(x, y)

    def s_dot_exact(self, x: Any, y: Any) -> Any:
        dsx = jax.grad(self.s_curvature, argnums=0)(x, y)
        dsy = jax.grad(self.s_curvature, argnums=1)(x, y)
        return dsx @ y - 2.0 * dsy @ self.spray(x, y)

    def s_dot_geodesic(self, x: Any, y: Any, h: float) -> Any:
        """Richardson-extrapolated central difference of S along the geodesic."""

        def s_at(step: float) -> Any:
            xs, vs = rk4_step(self.spray, x, y, step / 2.0)
            xs, vs = rk4_step(self.spray, xs, vs, step / 2.0)
            return self.s_curvature(xs, vs)

        def s_half(step: float) -> Any:
            xs, vs = rk4_step(self.spray, x, y, step)
            return self.s_curvature(xs, vs)

        d_full = (s_at(h) - s_at(-h)) / (2.0 * h)
        d_half = (s_half(h / 2.0) - s_half(-h / 2.0)) / h
        return (4.0 * d_half - d_full) / 3.0

    def mixed_trace(self, x: Any, v: Any, w: Any) -> Any:
        """tr_W R_V(V) = tr(g_V R_V g_W^{-1}), basis free."""
        g_v = self.metric.g(x, v)
        g_w = self.metric.g(x, w)
        M = self.curvature_operator(x, v)
        return jnp.trace(g_v @ M @ jnp.linalg.inv(g_w))

    def cartan_mixed(self, x: Any, y: Any) -> Any:
        g_inv = jnp.linalg.inv(self.metric.g(x, y))
        return jnp.einsum("ip,jq,pqk->ijk", g_inv, g_inv, self.metric.cartan(x, y))

    def div_cartan(self, x: Any, field: Callable[[Any], Any]) -> Any:
        def composed(z: Any) -> Any:
            return self.cartan_mixed(z, field(z))

        V = field(x)
        C = composed(x)
        dC = jax.jacfwd(composed)(x)
        gamma = self.chern(x, V)
        D = (
            dC
            + jnp.einsum("ipm,pjk->ijkm", gamma, C)
            + jnp.einsum("jpm,ipk->ijkm", gamma, C)
            - jnp.einsum("pkm,ijp->ijkm", gamma, C)
        )
        return jnp.einsum("ijki,k->j", D, V)

    def div_cartan_constant(self, x: Any, v: Any) -> Any:
        return self.div_cartan(x, lambda z: v + 0.0 * jnp.sum(z))

    def tau_gradient(self, x: Any, y: Any) -> Any:
        return jax.grad(self.tau, argnums=0)(x, y)

    def t_difference(
        self, x: Any, v_field: Callable[[Any], Any], w_field: Callable[[Any], Any]
    ) -> Any:
        def tau_v(z: Any) -> Any:
            return self.tau(z, v_field(z))

        def tau_w(z: Any) -> Any:
            return self.tau(z, w_field(z))

        return jax.grad(tau_v)(x) - jax.grad(tau_w)(x)

    def batched(self, name: str) -> Callable[..., Any]:
        if name not in self._batched:
            self._batched[name] = jax.jit(jax.vmap(getattr(self, name)))
        return self._batched[name]


@lru_cache(maxsize=64)
def _compile_geometry(
    metric: FinslerMetric, measure: MeasureDensity
) -> FinslerGeometry:
    return FinslerGeometry(metric, measure)


def build_geometry(
    metric: MetricLike, measure: Optional[MeasureLike] = None
) -> FinslerGeometry:
    m = as_metric(metric)
    mu = as_measure(measure if measure is not None else MeasureSpec(), m)
    return _compile_geometry(m, mu)


def as_field(field: FieldLike, dim: int) -> Callable[[Any], Any]:
    if isinstance(field, VectorExpression):
        return field.at
    if callable(field):
        return field
    value = jnp.asarray(np.asarray(field, dtype=float))
    if value.shape != (dim,):
        raise DomainError(f"vector field value must have dimension {dim}")
    return lambda z: value + 0.0 * jnp.sum(z)


class ConnectionCoeffs(NamedTuple):
    G: np.ndarray
    N: np.ndarray
    Gamma: np.ndarray


class ChernCurvature(NamedTuple):
    R: np.ndarray
    P: np.ndarray
    L: np.ndarray


class FlagRicci(NamedTuple):
    K: float
    Ric: float


class Distortion(NamedTuple):
    tau: float
    S: float
    S_dot: float


def _point(geo: FinslerGeometry, s: TangentSample) -> tuple[Any, Any]:
    if s.x.shape != (geo.dim,):
        raise DomainError(f"expected a point of dimension {geo.dim}")
    geo.metric.check_strong_convexity(s.x[None, :])
    return jnp.asarray(s.x), jnp.asarray(s.y)


def spray_connection(metric: MetricLike, s: TangentSample) -> ConnectionCoeffs:
    geo = build_geometry(metric)
    x, y = _point(geo, s)
    g = np.asarray(geo.metric.g(x, y))
    if abs(np.linalg.det(g)) < 1e-14 * max(1.0, np.abs(g).max()) ** geo.dim:
        raise InvalidMetricError("fundamental tensor is singular", value=0.0)
    return ConnectionCoeffs(
        G=np.asarray(geo.spray(x, y)),
        N=np.asarray(geo.nonlinear(x, y)),
        Gamma=np.asarray(geo.chern(x, y)),
    )


def chern_curvature(metric: MetricLike, s: TangentSample) -> ChernCurvature:
    geo = build_geometry(metric)
    x, y = _point(geo, s)
    return ChernCurvature(
        R=np.asarray(geo.riemann(x, y)),
        P=np.asarray(geo.nonriemannian(x, y)),
        L=np.asarray(geo.landsberg(x, y)),
    )


def orthonormal_completion(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    """g-orthonormal frame whose first vector is y / |y|_g (columns)."""
    n = g.shape[0]
    frame: list[np.ndarray] = []
    candidates = [y] + [np.eye(n)[i] for i in range(n)]
    for c in candidates:
        v = np.array(c, dtype=float)
        for e in frame:
            v = v - (e @ g @ v) * e
        norm = np.sqrt(max(v @ g @ v, 0.0))
        if norm > 1e-10:
            frame.append(v / norm)
        if len(frame) == n:
            break
    return np.stack(frame, axis=1)


def flag_curvature(
    geo: FinslerGeometry, x: np.ndarray, y: np.ndarray, v: np.ndarray
) -> float:
    xj, yj = jnp.asarray(x), jnp.asarray(y)
    g = np.asarray(geo.metric.g(xj, yj))
    M = np.asarray(geo.curvature_operator(xj, yj))
    F2 = float(y @ g @ y)
    denom = F2 * float(v @ g @ v) - float(y @ g @ v) ** 2
    if denom <= 1e-12 * F2 * float(v @ g @ v):
        raise DegenerateFlagError("flag pole v is parallel to y")
    return float((M @ v) @ g @ v) / denom


def flag_and_ricci(
    metric: MetricLike, s: TangentSample, v: Sequence[float]
) -> FlagRicci:
    geo = build_geometry(metric)
    _point(geo, s)
    v_arr = np.asarray(v, dtype=float)
    if v_arr.shape != (geo.dim,):
        raise DomainError(f"flag pole must have dimension {geo.dim}")
    K = flag_curvature(geo, s.x, s.y, v_arr)
    return FlagRicci(K=K, Ric=ricci(geo, s.x, s.y))


def ricci(geo: FinslerGeometry, x: np.ndarray, y: np.ndarray) -> float:
    xj, yj = jnp.asarray(x), jnp.asarray(y)
    g = np.asarray(geo.metric.g(xj, yj))
    M = np.asarray(geo.curvature_operator(xj, yj))
    frame = orthonormal_completion(g, y)
    return float(sum((M @ e) @ g @ e for e in frame.T[1:]))


def distortion_s_curvature(
    metric: MetricLike,
    measure: MeasureLike,
    s: TangentSample,
    method: str = "geodesic",
) -> Distortion:
    geo = build_geometry(metric, measure)
    x, y = _point(geo, s)
    if method == "geodesic":
        S_dot = geo.s_dot_geodesic(x, y, get_settings().GEODESIC_FD_STEP)
    elif method == "exact":
        S_dot = geo.s_dot_exact(x, y)
    else:
        raise DomainError(f"unknown S-dot method '{method}'")
    return Distortion(
        tau=float(geo.tau(x, y)), S=float(geo.s_curvature(x, y)), S_dot=float(S_dot)
    )


def _weighted(trace: float, S: float, S_dot: float, N: float, n: int) -> float:
    tol_S = get_settings().TOL_S
    if N < n:
        raise DomainError(f"effective dimension N={N} is below n={n}")
    if np.isinf(N):
        return trace + S_dot
    if N == n:
        return trace + S_dot if abs(S) <= tol_S else float("-inf")
    return trace + S_dot - S**2 / (N - n)


def weighted_ricci(
    metric: MetricLike, measure: MeasureLike, N: float, s: TangentSample
) -> float:
    geo = build_geometry(metric, measure)
    if N < geo.dim:
        raise DomainError(f"effective dimension N={N} is below n={geo.dim}")
    dist = distortion_s_curvature(geo.metric, geo.measure, s)
    return _weighted(ricci(geo, s.x, s.y), dist.S, dist.S_dot, N, geo.dim)


def mixed_weighted_ricci(
    metric: MetricLike,
    measure: MeasureLike,
    N: float,
    x: Sequence[float],
    V: Sequence[float],
    W: Sequence[float],
    basis: Optional[np.ndarray] = None,
) -> float:
    """Mixed weighted Ricci curvature of V traced in the metric of W.

    ``basis`` holds g_W-orthonormal columns; without it the trace is taken
    basis free.
    """
    geo = build_geometry(metric, measure)
    if N < geo.dim:
        raise DomainError(f"effective dimension N={N} is below n={geo.dim}")
    sv = TangentSample(x, V)
    sw = TangentSample(x, W)
    xj, vj = _point(geo, sv)
    wj = jnp.asarray(sw.y)
    if basis is None:
        trace = float(geo.mixed_trace(xj, vj, wj))
    else:
        g_v = np.asarray(geo.metric.g(xj, vj))
        M = np.asarray(geo.curvature_operator(xj, vj))
        trace = float(sum((M @ b) @ g_v @ b for b in np.asarray(basis).T))
    dist = distortion_s_curvature(geo.metric, geo.measure, sv)
    return _weighted(trace, dist.S, dist.S_dot, N, geo.dim)


def div_cartan(metric: MetricLike, x: Sequence[float], V: FieldLike) -> np.ndarray:
    geo = build_geometry(metric)
    field = as_field(V, geo.dim)
    xj = jnp.asarray(np.asarray(x, dtype=float))
    if not np.any(np.asarray(field(xj)) != 0.0):
        raise DomainError("reference field V vanishes at x")
    if geo.metric.is_riemannian:
        return np.zeros(geo.dim)
    return np.asarray(geo.div_cartan(xj, field))


def t_difference(
    metric: MetricLike,
    measure: MeasureLike,
    x: Sequence[float],
    V: FieldLike,
    W: FieldLike,
) -> Covector:
    geo = build_geometry(metric, measure)
    v_field, w_field = as_field(V, geo.dim), as_field(W, geo.dim)
    xj = jnp.asarray(np.asarray(x, dtype=float))
    for f in (v_field, w_field):
        if not np.any(np.asarray(f(xj)) != 0.0):
            raise DomainError("reference field vanishes at x")
    return Covector(np.asarray(geo.t_difference(xj, v_field, w_field)))


class CurvatureScan(NamedTuple):
    K2R: float
    K0_contribution: float
    records: pd.DataFrame


def chord_length(
    metric: MetricLike, center: Sequence[float], points: np.ndarray, nodes: int = 8
) -> np.ndarray:
    """F-length of the straight segments from ``center`` to each point."""
    m = as_metric(metric)
    c = np.asarray(center, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    s, w = np.polynomial.legendre.leggauss(nodes)
    s, w = 0.5 * (s + 1.0), 0.5 * w
    diff = pts - c
    zero = np.all(diff == 0.0, axis=1)
    safe = np.where(zero[:, None], 1.0, diff)
    X = c + s[:, None, None] * diff[None]
    V = np.broadcast_to(safe, X.shape)
    flat_x = jnp.asarray(X.reshape(-1, m.dim))
    flat_v = jnp.asarray(V.reshape(-1, m.dim))
    F = np.asarray(m.batched("F")(flat_x, flat_v)).reshape(nodes, len(pts))
    return np.where(zero, 0.0, w @ F)


def ball_samples(
    metric: MetricLike,
    center: Sequence[float],
    radius: float,
    count: int,
    bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None,
) -> np.ndarray:
    """Deterministic points of the forward ball B_center(radius).

    A point is kept when its chord length from ``center`` is below ``radius``.
    The chord length bounds d(center, x) from above, so every sample lies in
    the ball.
    """
    settings = get_settings()
    m = as_metric(metric)
    c = np.asarray(center, dtype=float)
    reach = np.abs(forward_ball_extremes(m, c, radius) - c).max(axis=0)
    lo = c - settings.CUTOFF_REACH_FACTOR * reach
    hi = c + settings.CUTOFF_REACH_FACTOR * reach
    if bounds is not None:
        lo = np.maximum(lo, np.asarray(bounds[0], dtype=float))
        hi = np.minimum(hi, np.asarray(bounds[1], dtype=float))
    sampler = qmc.Halton(d=len(c), scramble=False)
    kept = [c[None, :]]
    total = 1
    for _ in range(settings.BALL_SAMPLE_ROUNDS):
        if total >= count:
            break
        pts = lo + sampler.random(count) * (hi - lo)
        inside = pts[chord_length(m, c, pts) < radius]
        kept.append(inside)
        total += len(inside)
    if total < count:
        logger.warning(f"only {total} of {count} samples landed in the forward ball")
    return np.concatenate(kept)[:count]


def curvature_scan(
    metric: MetricLike,
    measure: MeasureLike,
    N: float,
    center: Sequence[float],
    radius: float,
    samples: Optional[int] = None,
    n_dirs: int = 12,
    U_term: float = 0.0,
    bounds: Optional[tuple[Sequence[float], Sequence[float]]] = None,
) -> CurvatureScan:
    """Estimate K(2R) and the computable part of K0 over B_p(2R).

    K(2R) = max(0, -inf mRic^N_W(V) / F(V)^2) over sampled points and
    direction pairs; the K0 contribution is F(div C(V)) + F*(T(V, W)) + U
    for constant reference fields.
    """
    settings = get_settings()
    geo = build_geometry(metric, measure)
    n = geo.dim
    if N < n:
        raise DomainError(f"effective dimension N={N} is below n={n}")
    count = samples or settings.CURVATURE_SCAN_SAMPLES
    pts = ball_samples(geo.metric, center, 2.0 * radius, count, bounds)
    geo.metric.check_strong_convexity(pts)
    dirs = direction_set(n, n_dirs)
    nd = len(dirs)
    X = jnp.asarray(np.repeat(pts, nd, axis=0))
    V = jnp.asarray(np.tile(dirs, (len(pts), 1)))
    g_v = np.asarray(geo.metric.batched("g")(X, V))
    M = np.asarray(geo.batched("curvature_operator")(X, V))
    S = np.asarray(geo.batched("s_curvature")(X, V))
    S_dot = np.asarray(geo.batched("s_dot_exact")(X, V))
    F2 = np.asarray(geo.metric.batched("F2")(X, V))
    g_w_inv = np.linalg.inv(g_v).reshape(len(pts), nd, n, n)
    gvM = np.einsum("pij,pjk->pik", g_v, M).reshape(len(pts), nd, n, n)
    # traces[p, v, w] = tr(g_V M_V g_W^{-1}) at sample p
    traces = np.einsum("pvij,pwji->pvw", gvM, g_w_inv)
    S = S.reshape(len(pts), nd)
    S_dot = S_dot.reshape(len(pts), nd)
    F2 = F2.reshape(len(pts), nd)
    weighted = np.vectorize(lambda tr, s, sd: _weighted(tr, s, sd, N, n))(
        traces, S[:, :, None], S_dot[:, :, None]
    )
    ratio = weighted / F2[:, :, None]
    worst = ratio.min(axis=2)
    K2R = max(0.0, -float(np.min(worst)))

    k0 = np.zeros((len(pts), nd))
    if not geo.metric.is_riemannian:
        divs = np.asarray(geo.batched("div_cartan_constant")(X, V))
        F_div = np.asarray(geo.metric.batched("F")(X, jnp.asarray(divs)))
        F_div = np.where(np.linalg.norm(divs, axis=1) > 0, F_div, 0.0)
        dtau = np.asarray(geo.batched("tau_gradient")(X, V)).reshape(len(pts), nd, n)
        # T[p, v, w] = d tau(., V) - d tau(., W) for constant reference fields
        T = dtau[:, :, None, :] - dtau[:, None, :, :]
        Xw = jnp.asarray(np.repeat(pts, nd * nd, axis=0))
        T_flat = T.reshape(-1, n)
        dual = np.asarray(geo.metric.batched("dual")(Xw, jnp.asarray(T_flat)))
        dual = np.where(np.linalg.norm(T_flat, axis=1) > 0, dual, 0.0)
        k0 = F_div.reshape(len(pts), nd) + dual.reshape(len(pts), nd, nd).max(axis=2)
    k0 = k0 + U_term
    K0 = float(np.max(k0))

    rows = []
    for p in range(len(pts)):
        for j in range(nd):
            base = {f"x{i + 1}": pts[p, i] for i in range(n)}
            base.update({f"y{i + 1}": dirs[j, i] for i in range(n)})
            rows.append({**base, "quantity": "min_mRic_over_F2", "value": worst[p, j]})
            rows.append({**base, "quantity": "K0_contribution", "value": k0[p, j]})
    records = pd.DataFrame(rows)
    logger.info(f"curvature scan: K(2R) estimate {K2R:.6g}, K0 contribution {K0:.6g}")
    return CurvatureScan(K2R=K2R, K0_contribution=K0, records=records)
