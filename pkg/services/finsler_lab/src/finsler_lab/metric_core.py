"""Finsler metric kernels.

Every fiber derivative is taken with jax forward-mode differentiation of the
family formula; finite differences appear only in the tests.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Sequence, Union

import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import qmc

from .config import get_settings
from .errors import ConvergenceError, DomainError, InvalidMetricError
from .expressions import MatrixExpression, VectorExpression
from .models import MetricFamily, MetricSpec

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]


@dataclass(frozen=True)
class TangentSample:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.x.shape != self.y.shape:
            raise DomainError("x and y must have the same dimension")
        if not np.any(self.y != 0.0):
            raise DomainError("tangent vector y must be nonzero")


@dataclass(frozen=True)
class FundamentalTensorVal:
    g: np.ndarray


@dataclass(frozen=True)
class CartanTensorVal:
    C: np.ndarray


@dataclass(frozen=True)
class Covector:
    xi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if not np.all(np.isfinite(self.xi)):
            raise DomainError("covector entries must be finite")


class FinslerMetric:
    """Compiled metric family with per-point jax kernels.

    The per-point methods (``F2``, ``g``, ``cartan``, ``dual``, ``legendre``,
    ``legendre_inv``) are pure jax functions of ``(x, y)`` and can be traced,
    differentiated and vmapped. ``batched(name)`` returns a jitted, vmapped
    version keyed by method name.
    """

    def __init__(self, spec: MetricSpec):
        settings = get_settings()
        self.spec = spec
        self.dim = spec.dim
        self.family = spec.family
        self._newton_damping = settings.NEWTON_DAMPING
        self._newton_max_iter = settings.NEWTON_MAX_ITER
        self._newton_tol = settings.NEWTON_TOL
        self._g_field: MatrixExpression | None = None
        self._alpha: MatrixExpression | None = None
        self._beta: VectorExpression | None = None
        if self.family == MetricFamily.RIEMANNIAN:
            self._g_field = MatrixExpression(spec.g or (), self.dim)
        elif self.family == MetricFamily.RANDERS:
            identity = [
                ["1" if i == j else "0" for j in range(self.dim)]
                for i in range(self.dim)
            ]
            self._alpha = MatrixExpression(spec.alpha or identity, self.dim)
            self._beta = VectorExpression(spec.beta or (), self.dim)
        self._batched: dict[str, Callable[..., Any]] = {}

    def __repr__(self) -> str:
        return f"FinslerMetric(family={self.family.value}, dim={self.dim})"

    @property
    def is_riemannian(self) -> bool:
        return self.family in (MetricFamily.EUCLIDEAN, MetricFamily.RIEMANNIAN)

    @property
    def is_flat(self) -> bool:
        """True when the coefficients do not depend on x (a Minkowski norm)."""
        if self.family == MetricFamily.EUCLIDEAN:
            return True
        if self.family == MetricFamily.RIEMANNIAN:
            return self._g_field is not None and self._g_field.is_constant
        return bool(
            self._alpha is not None
            and self._beta is not None
            and self._alpha.is_constant
            and self._beta.is_constant
        )

    # per-point kernels

    def riemannian_part(self, x: Any) -> Any:
        if self.family == MetricFamily.EUCLIDEAN:
            return jnp.eye(self.dim)
        if self.family == MetricFamily.RIEMANNIAN:
            assert self._g_field is not None
            m = self._g_field.at(x)
        else:
            assert self._alpha is not None
            m = self._alpha.at(x)
        return 0.5 * (m + m.T)

    def one_form(self, x: Any) -> Any:
        if self.family != MetricFamily.RANDERS:
            return jnp.zeros(self.dim)
        assert self._beta is not None
        return self._beta.at(x)

    def beta_norm(self, x: Any) -> Any:
        a = self.riemannian_part(x)
        b = self.one_form(x)
        return jnp.sqrt(b @ jnp.linalg.solve(a, b))

    def F2(self, x: Any, y: Any) -> Any:
        if self.family == MetricFamily.EUCLIDEAN:
            return jnp.dot(y, y)
        a = self.riemannian_part(x)
        if self.family == MetricFamily.RIEMANNIAN:
            return y @ a @ y
        b = self.one_form(x)
        return (jnp.sqrt(y @ a @ y) + b @ y) ** 2

    def F(self, x: Any, y: Any) -> Any:
        if self.family == MetricFamily.RANDERS:
            a = self.riemannian_part(x)
            return jnp.sqrt(y @ a @ y) + self.one_form(x) @ y
        return jnp.sqrt(self.F2(x, y))

    def g(self, x: Any, y: Any) -> Any:
        if self.is_riemannian:
            return self.riemannian_part(x) + 0.0 * jnp.sum(y)
        return 0.5 * jax.hessian(self.F2, argnums=1)(x, y)

    def cartan(self, x: Any, y: Any) -> Any:
        if self.is_riemannian:
            return jnp.zeros((self.dim,) * 3) + 0.0 * jnp.sum(y)
        return 0.25 * jax.jacfwd(jax.hessian(self.F2, argnums=1), argnums=1)(x, y)

    def legendre(self, x: Any, y: Any) -> Any:
        return 0.5 * jax.grad(self.F2, argnums=1)(x, y)

    def dual(self, x: Any, xi: Any) -> Any:
        if self.family == MetricFamily.EUCLIDEAN:
            return jnp.sqrt(jnp.dot(xi, xi))
        a = self.riemannian_part(x)
        a_inv_xi = jnp.linalg.solve(a, xi)
        norm2 = xi @ a_inv_xi
        if self.family == MetricFamily.RIEMANNIAN:
            return jnp.sqrt(norm2)
        b = self.one_form(x)
        lam = 1.0 - b @ jnp.linalg.solve(a, b)
        pair = a_inv_xi @ b
        return (jnp.sqrt(lam * norm2 + pair**2) - pair) / lam

    def legendre_inv(self, x: Any, xi: Any) -> tuple[Any, Any]:
        """Solve l(y) = xi on the fiber; returns (y, residual)."""
        if self.family == MetricFamily.EUCLIDEAN:
            return xi, jnp.asarray(0.0)
        if self.family == MetricFamily.RIEMANNIAN:
            return jnp.linalg.solve(self.riemannian_part(x), xi), jnp.asarray(0.0)
        return self._fiber_newton(x, xi)

    def _fiber_newton(self, x: Any, xi: Any) -> tuple[Any, Any]:
        xi_norm = jnp.sqrt(jnp.dot(xi, xi))
        is_zero = xi_norm == 0.0
        target = jnp.where(is_zero, jnp.eye(self.dim)[0], xi)
        tol = self._newton_tol * jnp.maximum(1.0, jnp.sqrt(jnp.dot(target, target)))
        damping = self._newton_damping

        def residual(y: Any) -> Any:
            return self.legendre(x, y) - target

        def res_norm(y: Any) -> Any:
            r = residual(y)
            return jnp.sqrt(jnp.dot(r, r))

        def newton_step(state: tuple[Any, Any, Any]) -> tuple[Any, Any, Any]:
            k, y, res = state
            step = jnp.linalg.solve(self.g(x, y), residual(y))

            def shrink(c: tuple[Any, Any]) -> tuple[Any, Any]:
                s, _ = c
                s = s * damping
                return s, y - s * step

            def not_better(c: tuple[Any, Any]) -> Any:
                s, y_new = c
                return (res_norm(y_new) >= res) & (s > 1e-8)

            start = (jnp.asarray(1.0), y - step)
            _, y_new = jax.lax.while_loop(not_better, shrink, start)
            return k + 1, y_new, res_norm(y_new)

        def keep_going(state: tuple[Any, Any, Any]) -> Any:
            k, _, res = state
            return (k < self._newton_max_iter) & (res > tol)

        y0 = target * self.dual(x, target) / self.F(x, target)
        _, y, res = jax.lax.while_loop(keep_going, newton_step, (0, y0, res_norm(y0)))
        # one polishing step once inside the tolerance
        y = y - jnp.linalg.solve(self.g(x, y), residual(y))
        res = res_norm(y)
        y = jnp.where(is_zero, jnp.zeros_like(y), y)
        res = jnp.where(is_zero, 0.0, res / jnp.maximum(1.0, xi_norm))
        return y, res

    def batched(self, name: str) -> Callable[..., Any]:
        """jit(vmap(method)) over leading axes of every argument."""
        if name not in self._batched:
            self._batched[name] = jax.jit(jax.vmap(getattr(self, name)))
        return self._batched[name]

    # validation helpers

    def check_strong_convexity(self, points: np.ndarray) -> None:
        if self.family != MetricFamily.RANDERS:
            return
        norms = np.asarray(self.batched("beta_norm")(jnp.asarray(points)))
        worst = float(np.max(norms))
        if worst >= 1.0:
            idx = int(np.argmax(norms))
            raise InvalidMetricError(
                f"randers one-form has alpha-norm {worst:.6f} >= 1 at x={points[idx]}",
                value=worst,
            )


@lru_cache(maxsize=64)
def _compile(spec: MetricSpec) -> FinslerMetric:
    return FinslerMetric(spec)


def as_metric(metric: Union[MetricSpec, FinslerMetric]) -> FinslerMetric:
    if isinstance(metric, FinslerMetric):
        return metric
    return _compile(metric)


MetricLike = Union[MetricSpec, FinslerMetric]


def _checked(metric: MetricLike, x: np.ndarray) -> FinslerMetric:
    m = as_metric(metric)
    if x.shape != (m.dim,):
        raise DomainError(f"expected a point of dimension {m.dim}, got {x.shape}")
    m.check_strong_convexity(x[None, :])
    return m


def eval_F(metric: MetricLike, s: TangentSample) -> float:
    m = _checked(metric, s.x)
    return float(m.F(jnp.asarray(s.x), jnp.asarray(s.y)))


def fundamental_tensor(metric: MetricLike, s: TangentSample) -> FundamentalTensorVal:
    m = _checked(metric, s.x)
    g = np.asarray(m.g(jnp.asarray(s.x), jnp.asarray(s.y)))
    eig = np.linalg.eigvalsh(g)
    if eig[0] <= 0.0:
        raise InvalidMetricError(
            f"fundamental tensor is not positive definite (eigenvalue {eig[0]:.3e})",
            value=float(eig[0]),
        )
    return FundamentalTensorVal(g=g)


def cartan_tensor(metric: MetricLike, s: TangentSample) -> CartanTensorVal:
    m = _checked(metric, s.x)
    return CartanTensorVal(C=np.asarray(m.cartan(jnp.asarray(s.x), jnp.asarray(s.y))))


def dual_norm(metric: MetricLike, x: ArrayLike, xi: Covector) -> float:
    x_arr = np.asarray(x, dtype=float)
    m = _checked(metric, x_arr)
    if not np.any(xi.xi != 0.0):
        return 0.0
    return float(m.dual(jnp.asarray(x_arr), jnp.asarray(xi.xi)))


def legendre(metric: MetricLike, s: TangentSample) -> Covector:
    m = _checked(metric, s.x)
    return Covector(np.asarray(m.legendre(jnp.asarray(s.x), jnp.asarray(s.y))))


def legendre_inv(metric: MetricLike, x: ArrayLike, xi: Covector) -> np.ndarray:
    x_arr = np.asarray(x, dtype=float)
    m = _checked(metric, x_arr)
    y, res = legendre_inv_batch(m, x_arr[None, :], xi.xi[None, :])
    return y[0]


def legendre_inv_batch(
    metric: MetricLike, points: np.ndarray, covectors: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse Legendre map over rows; raises if any row fails to converge."""
    m = as_metric(metric)
    y, res = m.batched("legendre_inv")(jnp.asarray(points), jnp.asarray(covectors))
    y, res = np.asarray(y), np.asarray(res)
    worst = float(np.max(res)) if res.size else 0.0
    if not np.isfinite(worst) or worst > 10 * m._newton_tol:
        raise ConvergenceError(
            f"fiber Newton did not converge in {m._newton_max_iter} iterations",
            residual=worst,
        )
    return y, res


def direction_set(dim: int, count: int) -> np.ndarray:
    """Nested low-discrepancy unit directions: the first k of any larger set."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        theta = 2.0 * np.pi * qmc.Halton(d=1, scramble=False).random(count)[:, 0]
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pts = 2.0 * qmc.Halton(d=dim, scramble=False).random(count + 1)[1:] - 1.0
    norms = np.linalg.norm(pts, axis=1)
    keep = norms > 1e-12
    return pts[keep] / norms[keep, None]


def forward_ball_extremes(
    metric: MetricLike, p: ArrayLike, radius: float, count: int = 256
) -> np.ndarray:
    """Coordinate points p + radius y / F(p, y) over a sweep of unit directions y."""
    m = as_metric(metric)
    p_arr = np.asarray(p, dtype=float)
    dirs = direction_set(m.dim, count)
    base = jnp.asarray(np.broadcast_to(p_arr, dirs.shape))
    F = np.asarray(m.batched("F")(base, jnp.asarray(dirs)))
    return p_arr + radius * dirs / F[:, None]


def misalignment(
    metric: MetricLike,
    region: tuple[ArrayLike, ArrayLike],
    n_dirs: int,
    points_per_axis: int | None = None,
) -> float:
    """Sampled lower estimate of the misalignment constant.

    Returns max over sampled x and directions Z, V, U of
    g_V(Z, Z) / g_U(Z, Z). Direction sets are nested, so the estimate is
    nondecreasing in ``n_dirs``.
    """
    if n_dirs < 2:
        raise DomainError("misalignment needs at least two directions")
    m = as_metric(metric)
    if m.is_riemannian:
        return 1.0
    settings = get_settings()
    per_axis = points_per_axis or settings.MISALIGNMENT_POINTS
    lower = np.asarray(region[0], dtype=float)
    upper = np.asarray(region[1], dtype=float)
    if m.is_flat:
        samples = ((lower + upper) / 2.0)[None, :]
    else:
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(lower, upper)]
        samples = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, m.dim)
    m.check_strong_convexity(samples)
    dirs = jnp.asarray(direction_set(m.dim, n_dirs))
    g_batch = m.batched("g")
    best = 1.0
    for x in samples:
        xs = jnp.broadcast_to(jnp.asarray(x), dirs.shape)
        G = g_batch(xs, dirs)
        q = np.asarray(jnp.einsum("vij,zi,zj->vz", G, dirs, dirs))
        ratio = q.max(axis=0) / q.min(axis=0)
        best = max(best, float(ratio.max()))
    logger.debug(f"misalignment lower estimate {best:.6f} from {n_dirs} directions")
    return best
