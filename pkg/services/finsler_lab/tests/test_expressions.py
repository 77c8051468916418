import jax
import jax.numpy as jnp
import numpy as np
import pytest

from finsler_lab.errors import ScenarioError
from finsler_lab.expressions import ScalarExpression, VectorExpression, parse


def test_grid_evaluation_matches_numpy():
    expr = ScalarExpression("x1^2 + 3*x2 - t", 2)
    x1, x2 = np.meshgrid(np.linspace(-1, 1, 5), np.linspace(0, 2, 4), indexing="ij")

    values = expr.grid([x1, x2], t=0.5)

    np.testing.assert_allclose(values, x1**2 + 3 * x2 - 0.5)


def test_constant_expression_is_broadcast_to_the_grid():
    expr = ScalarExpression(2.5, 2)
    x1, x2 = np.meshgrid(np.arange(3.0), np.arange(4.0), indexing="ij")

    values = expr.grid([x1, x2])

    assert expr.is_constant
    assert expr.constant_value() == 2.5
    assert values.shape == (3, 4)
    assert np.all(values == 2.5)


def test_jax_evaluation_is_differentiable():
    expr = ScalarExpression("exp(-(x1^2 + x2^2))", 2)

    grad = jax.grad(lambda x: expr.at(x))(jnp.array([0.5, -0.25]))

    value = np.exp(-(0.5**2 + 0.25**2))
    np.testing.assert_allclose(np.asarray(grad), [-2 * 0.5 * value, 2 * 0.25 * value])


def test_time_derivative():
    expr = ScalarExpression("t^2 * x1", 1)

    d = expr.diff_time()

    assert expr.depends_on_time
    assert float(d.grid([np.array([2.0])], t=3.0)[0]) == pytest.approx(12.0)


def test_log_of_product_expands():
    expr = ScalarExpression("exp(-x1^2) * 2", 1).log()

    value = float(expr.grid([np.array([1.5])])[0])

    assert value == pytest.approx(np.log(2.0) - 1.5**2)


@pytest.mark.parametrize("text", ["x3 + 1", "foo(x1)", "x1 +* 2", "y"])
def test_invalid_expressions_raise_scenario_error(text):
    with pytest.raises(ScenarioError):
        parse(text, 2)


def test_vector_expression_stacks_entries():
    vec = VectorExpression(["x1", "2"], 2)
    x1, x2 = np.meshgrid(np.arange(2.0), np.arange(3.0), indexing="ij")

    values = vec.grid([x1, x2])

    assert values.shape == (2, 2, 3)
    assert not vec.is_constant
    np.testing.assert_allclose(values[1], 2.0)
