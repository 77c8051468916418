"""Expression fields used in scenarios.

Field strings are parsed with sympy. The accepted grammar is arithmetic
(``+ - * / ** ^``), the functions ``exp log sqrt sin cos tan sinh cosh tanh
abs``, the constants ``pi`` and ``E``, the chart coordinates ``x1..xn`` and
the time ``t``. Anything else is rejected.
"""

import logging
from functools import cached_property
from typing import Any, Callable, Sequence, Union

import jax.numpy as jnp
import numpy as np
import sympy
from sympy.parsing.sympy_parser import (
    auto_number,
    convert_xor,
    factorial_notation,
    parse_expr,
)

from .errors import ScenarioError

logger = logging.getLogger(__name__)

_FUNCTIONS: dict[str, Any] = {
    "exp": sympy.exp,
    "log": sympy.log,
    "sqrt": sympy.sqrt,
    "sin": sympy.sin,
    "cos": sympy.cos,
    "tan": sympy.tan,
    "sinh": sympy.sinh,
    "cosh": sympy.cosh,
    "tanh": sympy.tanh,
    "abs": sympy.Abs,
    "pi": sympy.pi,
    "E": sympy.E,
}

_TRANSFORMS = (auto_number, factorial_notation, convert_xor)


def coordinate_symbols(dim: int) -> tuple[sympy.Symbol, ...]:
    return tuple(sympy.Symbol(f"x{i + 1}", real=True) for i in range(dim))


TIME = sympy.Symbol("t", real=True)


def parse(text: Union[str, float], dim: int) -> sympy.Expr:
    if isinstance(text, (int, float)):
        return sympy.Float(text) if isinstance(text, float) else sympy.Integer(text)
    symbols = {str(s): s for s in coordinate_symbols(dim)}
    symbols["t"] = TIME
    namespace: dict[str, Any] = {
        "Integer": sympy.Integer,
        "Float": sympy.Float,
        "Rational": sympy.Rational,
    }
    namespace.update(_FUNCTIONS)
    namespace.update(symbols)
    try:
        expr = parse_expr(
            str(text),
            local_dict={},
            global_dict=namespace,
            transformations=_TRANSFORMS,
            evaluate=True,
        )
    except NameError as e:
        raise ScenarioError(f"unknown name in expression '{text}': {str(e)}")
    except (SyntaxError, TypeError, sympy.SympifyError) as e:
        raise ScenarioError(f"cannot parse expression '{text}': {str(e)}")
    if not isinstance(expr, sympy.Expr):
        raise ScenarioError(f"expression '{text}' is not scalar")
    unknown = expr.free_symbols - set(symbols.values())
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise ScenarioError(f"unknown symbols in expression '{text}': {names}")
    return expr


class ScalarExpression:
    """A scalar field f(x, t) compiled for numpy grids and for jax kernels."""

    def __init__(self, text: Union[str, float], dim: int):
        self.text = str(text)
        self.dim = dim
        self.expr = parse(text, dim)
        self._args = (*coordinate_symbols(dim), TIME)

    @classmethod
    def from_sympy(cls, expr: sympy.Expr, dim: int) -> "ScalarExpression":
        obj = cls.__new__(cls)
        obj.text = str(expr)
        obj.dim = dim
        obj.expr = expr
        obj._args = (*coordinate_symbols(dim), TIME)
        return obj

    @property
    def is_constant(self) -> bool:
        return not self.expr.free_symbols

    @property
    def depends_on_time(self) -> bool:
        return TIME in self.expr.free_symbols

    def constant_value(self) -> float:
        return float(self.expr)

    @cached_property
    def _numpy_fn(self) -> Callable[..., Any]:
        return sympy.lambdify(self._args, self.expr, modules="numpy")

    @cached_property
    def _jax_fn(self) -> Callable[..., Any]:
        return sympy.lambdify(self._args, self.expr, modules="jax")

    def grid(self, coords: Sequence[np.ndarray], t: float = 0.0) -> np.ndarray:
        """Evaluate on meshgrid arrays, broadcasting constants to the grid."""
        shape = np.shape(coords[0])
        value = self._numpy_fn(*coords, t)
        return np.broadcast_to(np.asarray(value, dtype=float), shape).copy()

    def at(self, x: Any, t: Any = 0.0) -> Any:
        """Evaluate at one point inside a jax trace."""
        value = self._jax_fn(*[x[i] for i in range(self.dim)], t)
        return jnp.asarray(value, dtype=jnp.float64)

    def diff_time(self) -> "ScalarExpression":
        return ScalarExpression.from_sympy(sympy.diff(self.expr, TIME), self.dim)

    def log(self) -> "ScalarExpression":
        return ScalarExpression.from_sympy(
            sympy.expand_log(sympy.log(self.expr), force=True), self.dim
        )


class MatrixExpression:
    def __init__(self, rows: Sequence[Sequence[Union[str, float]]], dim: int):
        self.entries = [[ScalarExpression(e, dim) for e in row] for row in rows]
        self.dim = dim

    @property
    def is_constant(self) -> bool:
        return all(e.is_constant for row in self.entries for e in row)

    def at(self, x: Any) -> Any:
        return jnp.stack(
            [jnp.stack([e.at(x) for e in row]) for row in self.entries]
        )


class VectorExpression:
    def __init__(self, items: Sequence[Union[str, float]], dim: int):
        self.entries = [ScalarExpression(e, dim) for e in items]
        self.dim = dim

    @property
    def is_constant(self) -> bool:
        return all(e.is_constant for e in self.entries)

    def at(self, x: Any) -> Any:
        return jnp.stack([e.at(x) for e in self.entries])

    def grid(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([e.grid(coords) for e in self.entries])
