"""Grid fields and the Finslerian differential operators acting on them.

Operators work on whole snapshots: a ``ReferenceDirection`` freezes the
coefficients g^{ij}(x, grad u) and the Chern symbols at grad u once, and every
operator that needs them (Hessian, linearized Laplacian, the quadratic form
F^2_{grad u}) reads from it.
"""

import json
import logging
import os
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Any, Optional, Sequence, Union

import jax.numpy as jnp
import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from .config import get_settings
from .errors import DomainError
from .expressions import ScalarExpression
from .geometry import FinslerGeometry, MeasureLike, build_geometry
from .metric_core import MetricLike, legendre_inv_batch
from .models import GridSpec, MetricSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridChart:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]
    periodic: bool = False
    boundary_layer: int = 2

    def __post_init__(self) -> None:
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise DomainError("grid bounds and point counts must have equal length")
        if any(m < 5 for m in self.points):
            raise DomainError("grid needs at least 5 points per axis")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise DomainError("grid upper bound must exceed lower bound")

    @classmethod
    def from_spec(cls, spec: GridSpec) -> "GridChart":
        return cls(
            lower=tuple(float(v) for v in spec.lower),
            upper=tuple(float(v) for v in spec.upper),
            points=tuple(int(m) for m in spec.points),
            periodic=spec.periodic,
            boundary_layer=spec.boundary_layer,
        )

    def coarsened(self) -> "GridChart":
        """Every second node; requires (points - 1) even on non-periodic axes."""
        if self.periodic:
            if any(m % 2 for m in self.points):
                raise DomainError("periodic coarsening needs even point counts")
            points = tuple(m // 2 for m in self.points)
        else:
            if any((m - 1) % 2 for m in self.points):
                raise DomainError("coarsening needs an odd number of points per axis")
            points = tuple((m - 1) // 2 + 1 for m in self.points)
        return GridChart(
            self.lower, self.upper, points, self.periodic, self.boundary_layer
        )

    @property
    def dim(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def spacing(self) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        m = np.asarray(self.points, dtype=float)
        return (hi - lo) / m if self.periodic else (hi - lo) / (m - 1)

    @property
    def axes(self) -> list[np.ndarray]:
        h = self.spacing
        return [
            lo + h[i] * np.arange(m)
            for i, (lo, m) in enumerate(zip(self.lower, self.points))
        ]

    @cached_property
    def coords(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    @cached_property
    def flat_points(self) -> np.ndarray:
        return np.stack(self.coords, axis=-1).reshape(-1, self.dim)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def interior_mask(self, width: Optional[int] = None) -> np.ndarray:
        """Nodes at least ``width`` cells from a non-periodic boundary."""
        mask = np.ones(self.shape, dtype=bool)
        if self.periodic:
            return mask
        w = self.boundary_layer if width is None else width
        for axis in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[axis] = slice(0, w)
            mask[tuple(idx)] = False
            idx[axis] = slice(self.points[axis] - w, None)
            mask[tuple(idx)] = False
        return mask

    def index_of(self, x: Sequence[float]) -> tuple[int, ...]:
        x_arr = np.asarray(x, dtype=float)
        if x_arr.shape != (self.dim,):
            raise DomainError(f"expected a point of dimension {self.dim}")
        rel = (x_arr - np.asarray(self.lower)) / self.spacing
        idx = np.rint(rel).astype(int)
        if np.any(np.abs(rel - idx) > 1e-9) or np.any(idx < 0) or np.any(
            idx >= np.asarray(self.points)
        ):
            raise DomainError(f"x={x_arr} is not a grid node")
        return tuple(int(i) for i in idx)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.periodic:
            return np.ones(len(x), dtype=bool)
        return np.all(
            (x >= np.asarray(self.lower) - 1e-12)
            & (x <= np.asarray(self.upper) + 1e-12),
            axis=1,
        )


def to_flat(values: np.ndarray) -> np.ndarray:
    """(n, *shape) -> (M, n)."""
    return values.reshape(values.shape[0], -1).T


def from_flat(flat: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """(M, n, ...) -> (n, ..., *shape)."""
    tail = flat.shape[1:]
    arr = flat.reshape(*shape, *tail)
    return np.moveaxis(arr, list(range(len(shape), arr.ndim)), list(range(len(tail))))


@dataclass(frozen=True)
class ScalarField:
    """Time series of grid snapshots ``values[k]`` at ``times[k]``."""

    chart: GridChart
    values: np.ndarray
    times: np.ndarray
    order: int = 2
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim == self.chart.dim:
            values = values[None]
        object.__setattr__(self, "values", values)
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        object.__setattr__(self, "times", times)
        if values.shape[1:] != self.chart.shape:
            raise DomainError(f"field shape {values.shape[1:]} does not match the grid")
        if len(self.times) != len(values):
            raise DomainError("one time stamp per snapshot is required")
        if not np.all(np.isfinite(values)):
            raise DomainError("field values must be finite")
        if self.order not in (2, 4):
            raise DomainError("stencil order must be 2 or 4")

    @classmethod
    def from_expression(
        cls,
        expr: Union[str, float, ScalarExpression],
        chart: GridChart,
        times: Union[float, Sequence[float]] = 0.0,
        order: int = 2,
    ) -> "ScalarField":
        if not isinstance(expr, ScalarExpression):
            expr = ScalarExpression(expr, chart.dim)
        ts = np.atleast_1d(np.asarray(times, dtype=float))
        values = np.stack([expr.grid(chart.coords, float(t)) for t in ts])
        return cls(chart, values, ts, order)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def index_of_time(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise DomainError(f"t={t} is not a stored time")
        return k

    def snapshot(self, t: float) -> np.ndarray:
        return self.values[self.index_of_time(t)]

    def time_derivative(self) -> np.ndarray:
        if len(self.times) < 3:
            raise DomainError("time derivative needs at least three snapshots")
        return np.gradient(self.values, self.times, axis=0, edge_order=2)

    def with_values(
        self, values: np.ndarray, times: Optional[np.ndarray] = None
    ) -> "ScalarField":
        times = self.times if times is None else times
        return ScalarField(self.chart, values, times, self.order, self.flags)

    @cached_property
    def _interpolator(self) -> RegularGridInterpolator:
        if len(self.times) > 1:
            return RegularGridInterpolator((self.times, *self.chart.axes), self.values)
        return RegularGridInterpolator(tuple(self.chart.axes), self.values[0])

    def sample(self, x: Sequence[float], t: float) -> float:
        point = list(np.asarray(x, dtype=float))
        if len(self.times) > 1:
            point = [t] + point
        try:
            return float(self._interpolator(np.asarray([point]))[0])
        except ValueError as e:
            raise DomainError(f"({x}, {t}) lies outside the sampled region: {str(e)}")

    def to_frame(self, k: int) -> pd.DataFrame:
        data = {f"x{i + 1}": c.ravel() for i, c in enumerate(self.chart.coords)}
        data["t"] = np.full(self.values[k].size, self.times[k])
        data["value"] = self.values[k].ravel()
        return pd.DataFrame(data)

    def export(
        self, directory: str, count: int, manifest: Optional[dict[str, Any]] = None
    ) -> list[str]:
        """Write ``count`` evenly spaced snapshots as CSV grids plus manifest.json."""
        os.makedirs(directory, exist_ok=True)
        spread = np.linspace(0, len(self.times) - 1, count).round().astype(int)
        picks = sorted(set(spread))
        files = []
        for k in picks:
            name = f"u_{k:06d}.csv"
            self.to_frame(k).to_csv(os.path.join(directory, name), index=False)
            files.append(name)
        doc = {
            "dt": self.dt,
            "times": [float(self.times[k]) for k in picks],
            "files": files,
            "grid": {
                "lower": list(self.chart.lower),
                "upper": list(self.chart.upper),
                "points": list(self.chart.points),
                "periodic": self.chart.periodic,
            },
            "flags": list(self.flags),
        }
        doc.update(manifest or {})
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        return files


@dataclass(frozen=True)
class VectorField:
    chart: GridChart
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (self.chart.dim, *self.chart.shape):
            raise DomainError("vector field must have shape (n, *grid)")


class Stencil:
    """Central finite differences of order 2 or 4 on a chart."""

    def __init__(self, chart: GridChart, order: int = 2):
        if order not in (2, 4):
            raise DomainError("stencil order must be 2 or 4")
        self.chart = chart
        self.order = order

    def first(self, f: np.ndarray, axis: int) -> np.ndarray:
        h = self.chart.spacing[axis]
        if self.chart.periodic:
            def r(k: int) -> np.ndarray:
                return np.roll(f, -k, axis=axis)

            if self.order == 2:
                return (r(1) - r(-1)) / (2 * h)
            return (-r(2) + 8 * r(1) - 8 * r(-1) + r(-2)) / (12 * h)
        out = np.gradient(f, h, axis=axis, edge_order=2)
        if self.order == 4:
            fm, om = np.moveaxis(f, axis, 0), np.moveaxis(out, axis, 0)
            om[2:-2] = (-fm[4:] + 8 * fm[3:-1] - 8 * fm[1:-3] + fm[:-4]) / (12 * h)
        return out

    def second(self, f: np.ndarray, axis: int) -> np.ndarray:
        h2 = self.chart.spacing[axis] ** 2
        if self.chart.periodic:
            def r(k: int) -> np.ndarray:
                return np.roll(f, -k, axis=axis)

            if self.order == 2:
                return (r(1) - 2 * f + r(-1)) / h2
            return (-r(2) + 16 * r(1) - 30 * f + 16 * r(-1) - r(-2)) / (12 * h2)
        out = np.empty_like(f, dtype=float)
        fm, om = np.moveaxis(f, axis, 0), np.moveaxis(out, axis, 0)
        om[1:-1] = (fm[2:] - 2 * fm[1:-1] + fm[:-2]) / h2
        om[0] = (2 * fm[0] - 5 * fm[1] + 4 * fm[2] - fm[3]) / h2
        om[-1] = (2 * fm[-1] - 5 * fm[-2] + 4 * fm[-3] - fm[-4]) / h2
        if self.order == 4:
            om[2:-2] = (
                -fm[4:] + 16 * fm[3:-1] - 30 * fm[2:-2] + 16 * fm[1:-3] - fm[:-4]
            ) / (12 * h2)
        return out

    def differential(self, f: np.ndarray) -> np.ndarray:
        return np.stack([self.first(f, i) for i in range(self.chart.dim)])

    def hessian(self, f: np.ndarray) -> np.ndarray:
        n = self.chart.dim
        H = np.empty((n, n, *f.shape))
        for i in range(n):
            H[i, i] = self.second(f, i)
            di = self.first(f, i)
            for j in range(i + 1, n):
                H[i, j] = H[j, i] = self.first(di, j)
        return H

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return sum(self.second(f, i) for i in range(self.chart.dim))


class FieldOperators:
    def __init__(
        self, geometry: FinslerGeometry, chart: GridChart, order: int = 2
    ):
        if geometry.dim != chart.dim:
            raise DomainError("metric and grid dimensions differ")
        self.geometry = geometry
        self.metric = geometry.metric
        self.chart = chart
        self.stencil = Stencil(chart, order)
        self.points = jnp.asarray(chart.flat_points)
        self.metric.check_strong_convexity(chart.flat_points)

    @cached_property
    def dphi(self) -> np.ndarray:
        if self.geometry.measure.is_constant:
            return np.zeros((self.chart.dim, *self.chart.shape))
        flat = np.asarray(self.geometry.measure.batched("dphi")(self.points))
        return from_flat(flat, self.chart.shape)

    @cached_property
    def sigma(self) -> np.ndarray:
        flat = np.asarray(self.geometry.measure.batched("sigma")(self.points))
        return flat.reshape(self.chart.shape)

    def differential(self, f: np.ndarray) -> np.ndarray:
        return self.stencil.differential(f)

    def divergence(self, V: np.ndarray) -> np.ndarray:
        """div_mu V = sum_i (d_i V^i + V^i d_i Phi)."""
        return sum(
            self.stencil.first(V[i], i) + V[i] * self.dphi[i]
            for i in range(self.chart.dim)
        )

    def reference(self, u: np.ndarray) -> "ReferenceDirection":
        return ReferenceDirection(self, np.asarray(u, dtype=float))

    def dual_norm2(self, df: np.ndarray) -> np.ndarray:
        """F*(df)^2 pointwise."""
        flat = to_flat(df)
        zero = np.linalg.norm(flat, axis=1) == 0.0
        safe = np.where(zero[:, None], 1.0, flat)
        values = np.asarray(self.metric.batched("dual")(self.points, jnp.asarray(safe)))
        return np.where(zero, 0.0, values**2).reshape(self.chart.shape)

    def laplacian(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ref = self.reference(u)
        return ref.linearized_laplacian(u), ref.critical

    def trace_identity_residual(self, u: np.ndarray) -> np.ndarray:
        """Delta u - (tr_{grad u} Hess u - S(grad u)); NaN at critical points."""
        ref = self.reference(u)
        lap = ref.linearized_laplacian(u)
        trace = np.einsum("ij...,ij...->...", ref.A, ref.hessian(u))
        s_curvature = self.geometry.batched("s_curvature")
        S = np.asarray(
            s_curvature(self.points, jnp.asarray(ref.safe_flat))
        ).reshape(self.chart.shape)
        res = lap - (trace - S)
        return np.where(ref.critical, np.nan, res)

    def weak_form_residual(self, u: np.ndarray, test: np.ndarray) -> float:
        """int phi Delta u dmu + int dphi(grad u) dmu for a compactly supported phi."""
        ref = self.reference(u)
        lap = ref.linearized_laplacian(u)
        dtest = self.differential(test)
        pairing = np.einsum("i...,i...->...", dtest, ref.gradient)
        integrand = (test * lap + pairing) * self.sigma
        return float(np.sum(integrand) * self.chart.cell_volume)

    def exponential_identity_residual(self, u: np.ndarray) -> np.ndarray:
        """Delta^{grad u} e^f - e^f (Delta^{grad u} f + F^2(grad^{grad u} f)).

        Here f = log u.
        """
        ref = self.reference(u)
        f = np.log(u)
        df = self.differential(f)
        lhs = ref.linearized_laplacian(u)
        rhs = u * (ref.linearized_laplacian(f) + ref.norm2(df))
        return lhs - rhs


class ReferenceDirection:
    """Coefficients frozen at the gradient direction of a snapshot u.

    Where |du| falls below the critical threshold the direction is undefined;
    for non-Riemannian metrics the coefficients there fall back to the plain
    Laplacian. ``critical`` marks those nodes for reports.
    """

    def __init__(self, ops: FieldOperators, u: np.ndarray):
        self.ops = ops
        self.u = u
        chart = ops.chart
        self.du = ops.differential(u)
        flat = to_flat(self.du)
        self.critical_flat = np.linalg.norm(flat, axis=1) < get_settings().CRITICAL_DU
        self.critical = self.critical_flat.reshape(chart.shape)
        if ops.metric.is_riemannian:
            self._fallback = np.zeros_like(self.critical_flat)
        else:
            self._fallback = self.critical_flat
        covectors = np.where(self.critical_flat[:, None], 0.0, flat)
        y, _ = legendre_inv_batch(ops.metric, chart.flat_points, covectors)
        self.gradient_flat = y
        self.gradient = from_flat(y, chart.shape)
        # any nonzero direction will do where grad u vanishes
        e1 = np.eye(chart.dim)[0]
        self.safe_flat = np.where(self.critical_flat[:, None], e1, y)
        if np.any(self.critical):
            logger.debug(
                f"{int(self.critical.sum())} critical points with |du| below threshold"
            )

    @cached_property
    def A(self) -> np.ndarray:
        n = self.ops.chart.dim
        points, safe = self.ops.points, jnp.asarray(self.safe_flat)
        A = np.linalg.inv(np.asarray(self.ops.metric.batched("g")(points, safe)))
        A[self._fallback] = np.eye(n)
        return from_flat(A, self.ops.chart.shape)

    @cached_property
    def gamma(self) -> np.ndarray:
        n = self.ops.chart.dim
        if self.ops.metric.is_flat:
            return np.zeros((n, n, n, *self.ops.chart.shape))
        points, safe = self.ops.points, jnp.asarray(self.safe_flat)
        G = np.array(self.ops.geometry.batched("chern")(points, safe))
        G[self._fallback] = 0.0
        return from_flat(G, self.ops.chart.shape)

    def hessian(self, f: np.ndarray) -> np.ndarray:
        """d_i d_j f - Gamma^k_ij(grad u) d_k f."""
        H = self.ops.stencil.hessian(f)
        df = self.ops.differential(f)
        return H - np.einsum("kij...,k...->ij...", self.gamma, df)

    def linearized_laplacian(self, f: np.ndarray) -> np.ndarray:
        V = self.covariant_gradient(f)
        out = self.ops.divergence(V)
        fallback = self._fallback.reshape(self.ops.chart.shape)
        if np.any(fallback):
            out = np.where(fallback, self.ops.stencil.laplacian(f), out)
        return out

    def covariant_gradient(self, f: np.ndarray) -> np.ndarray:
        return np.einsum("ij...,j...->i...", self.A, self.ops.differential(f))

    def norm2(self, df: np.ndarray) -> np.ndarray:
        """F^2_{grad u}(grad^{grad u} f) = A^{ij} d_i f d_j f."""
        return np.einsum("i...,ij...,j...->...", df, self.A, df)


@lru_cache(maxsize=32)
def _operators(
    geometry: FinslerGeometry, chart: GridChart, order: int
) -> FieldOperators:
    return FieldOperators(geometry, chart, order)


def operators_for(
    metric: MetricLike, measure: Optional[MeasureLike], chart: GridChart, order: int = 2
) -> FieldOperators:
    return _operators(build_geometry(metric, measure), chart, order)


def gradient(
    metric: MetricLike, u: ScalarField, x: Sequence[float], t: float
) -> np.ndarray:
    ops = operators_for(metric, None, u.chart, u.order)
    idx = u.chart.index_of(x)
    ref = ops.reference(u.snapshot(t))
    return ref.gradient[(slice(None), *idx)].copy()


def hessian_ref(
    metric: MetricLike, u: ScalarField, f: ScalarField, x: Sequence[float], t: float
) -> np.ndarray:
    ops = operators_for(metric, None, u.chart, u.order)
    idx = u.chart.index_of(x)
    ref = ops.reference(u.snapshot(t))
    if ref.critical[idx]:
        raise DomainError("reference direction grad u vanishes at x")
    return ref.hessian(f.snapshot(t))[(slice(None), slice(None), *idx)]


def divergence(
    measure: MeasureLike,
    V: VectorField,
    x: Sequence[float],
    metric: Optional[MetricLike] = None,
) -> float:
    m = metric if metric is not None else MetricSpec.euclidean(V.chart.dim)
    ops = operators_for(m, measure, V.chart)
    return float(ops.divergence(V.values)[V.chart.index_of(x)])


def finsler_laplacian(
    metric: MetricLike,
    measure: MeasureLike,
    u: ScalarField,
    x: Sequence[float],
    t: float,
) -> float:
    ops = operators_for(metric, measure, u.chart, u.order)
    lap, _ = ops.laplacian(u.snapshot(t))
    return float(lap[u.chart.index_of(x)])


def linearized_laplacian(
    metric: MetricLike,
    measure: MeasureLike,
    u: ScalarField,
    f: ScalarField,
    x: Sequence[float],
    t: float,
) -> float:
    ops = operators_for(metric, measure, u.chart, u.order)
    idx = u.chart.index_of(x)
    ref = ops.reference(u.snapshot(t))
    if ref.critical[idx]:
        raise DomainError("reference direction grad u vanishes at x")
    return float(ref.linearized_laplacian(f.snapshot(t))[idx])
