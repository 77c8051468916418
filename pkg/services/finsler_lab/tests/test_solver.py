import numpy as np
import pytest

from finsler_lab.errors import DomainError, StabilityError
from finsler_lab.expressions import ScalarExpression
from finsler_lab.fields import GridChart, ScalarField, operators_for
from finsler_lab.models import MeasureSpec, MetricSpec, PDECoefficients, SolveConfig
from finsler_lab.solver import (
    LogSchrodingerSolver,
    measure_coefficient_bounds,
    solve_log_schrodinger,
    solve_stationary,
    time_mollify,
)

EUCLID = MetricSpec.euclidean(2)
RANDERS = MetricSpec.randers(beta=("0.2", "0"))
LEBESGUE = MeasureSpec()


def _heat_kernel(chart, t):
    r2 = chart.coords[0] ** 2 + chart.coords[1] ** 2
    return np.exp(-r2 / (4 * t)) / (4 * np.pi * t)


def _torus(points=16):
    upper = (2 * np.pi, 2 * np.pi)
    return GridChart((0.0, 0.0), upper, (points, points), periodic=True)


def test_gaussian_heat_flow_matches_the_shifted_kernel():
    # Mock
    chart = GridChart((-8.0, -8.0), (8.0, 8.0), (65, 65))
    u0 = ScalarField(chart, _heat_kernel(chart, 1.0), [0.0], order=4)
    cfg = SolveConfig(dt=0.01, final_time=1.0, stencil_order=4)

    # Call
    u = solve_log_schrodinger(EUCLID, LEBESGUE, PDECoefficients(), u0, cfg)

    # Assert
    assert len(u.times) == 101
    assert u.times[-1] == pytest.approx(1.0)
    exact = _heat_kernel(chart, 2.0)
    core = (np.abs(chart.coords[0]) <= 2.0) & (np.abs(chart.coords[1]) <= 2.0)
    rel = np.abs(u.values[-1] - exact)[core] / exact[core]
    assert rel.max() < 2e-3
    assert u.flags == ()


def test_constant_equilibrium_is_preserved():
    # Mock
    chart = _torus()
    coeffs = PDECoefficients(a="-1", b="0.5")
    u0 = ScalarField.from_expression("exp(0.5)", chart)
    cfg = SolveConfig(dt=0.05, final_time=1.0, boundary="periodic")

    # Call
    u = solve_log_schrodinger(EUCLID, LEBESGUE, coeffs, u0, cfg)

    # Assert
    np.testing.assert_allclose(u.values[-1], np.exp(0.5), rtol=1e-10)


def test_reaction_step_is_exact_in_log_variables():
    # Mock
    chart = _torus(8)
    coeffs = PDECoefficients(a="1", b="0")
    cfg = SolveConfig(dt=0.1, final_time=1.0, boundary="periodic")
    solver = LogSchrodingerSolver(EUCLID, LEBESGUE, coeffs, chart, cfg)
    u = np.full(chart.shape, np.e)

    # Call
    out = solver.react(u, 0.0, 0.5)

    # Assert
    np.testing.assert_allclose(np.log(out), np.exp(0.5), rtol=1e-12)


def test_randers_flow_stays_positive_and_finite():
    # Mock
    chart = GridChart((-4.0, -4.0), (4.0, 4.0), (25, 25))
    u0 = ScalarField.from_expression("1 + exp(-(x1^2 + x2^2))", chart)
    coeffs = PDECoefficients(a="0.5", b="-0.1")
    cfg = SolveConfig(dt=0.02, final_time=0.4)

    # Call
    u = solve_log_schrodinger(RANDERS, LEBESGUE, coeffs, u0, cfg)

    # Assert
    assert np.all(u.values > 0)
    assert np.all(np.isfinite(u.values))
    boundary = ~chart.interior_mask(1)
    np.testing.assert_array_equal(u.values[-1][boundary], u.values[0][boundary])


def test_explicit_scheme_refuses_an_unstable_step():
    # Mock
    chart = GridChart((-2.0, -2.0), (2.0, 2.0), (17, 17))
    u0 = ScalarField.from_expression("1", chart)
    cfg = SolveConfig(dt=0.1, final_time=1.0, scheme="explicit")

    # Call / Assert
    with pytest.raises(StabilityError) as excinfo:
        solve_log_schrodinger(EUCLID, LEBESGUE, PDECoefficients(), u0, cfg)
    assert excinfo.value.ratio > 1.0


def test_explicit_scheme_runs_below_the_limit():
    # Mock
    chart = GridChart((-2.0, -2.0), (2.0, 2.0), (17, 17))
    u0 = ScalarField.from_expression("2 + cos(x1)", chart)
    cfg = SolveConfig(dt=0.005, final_time=0.1, scheme="explicit")

    # Call
    u = solve_log_schrodinger(EUCLID, LEBESGUE, PDECoefficients(), u0, cfg)

    # Assert
    assert len(u.times) == 21
    assert u.values[-1].max() <= u.values[0].max() + 1e-12


@pytest.mark.parametrize(
    "chart, boundary",
    [
        (_torus(8), "dirichlet-positive"),
        (GridChart((0.0,), (1.0,), (9,)), "periodic"),
    ],
)
def test_solver_rejects_mismatched_boundary(chart, boundary):
    # Mock
    cfg = SolveConfig(dt=0.1, final_time=1.0, boundary=boundary)

    # Call / Assert
    with pytest.raises(DomainError):
        LogSchrodingerSolver(
            MetricSpec.euclidean(chart.dim), None, PDECoefficients(), chart, cfg
        )


def test_solver_rejects_nonpositive_initial_data():
    # Mock
    chart = GridChart((-1.0,), (1.0,), (9,))
    cfg = SolveConfig(dt=0.1, final_time=1.0)
    solver = LogSchrodingerSolver(
        MetricSpec.euclidean(1), None, PDECoefficients(), chart, cfg
    )

    # Call / Assert
    with pytest.raises(DomainError):
        solver.run(np.zeros(9))


def test_time_mollify_keeps_constants_and_trims_the_ends():
    # Mock
    chart = GridChart((0.0,), (1.0,), (5,))
    times = np.linspace(0.0, 1.0, 11)
    u = ScalarField(chart, np.full((11, 5), 3.0), times)

    # Call
    smooth = time_mollify(u, 0.25)

    # Assert
    np.testing.assert_allclose(smooth.times, [0.3, 0.4, 0.5, 0.6, 0.7])
    np.testing.assert_allclose(smooth.values, 3.0)


def test_time_mollify_needs_width_above_the_step():
    # Mock
    chart = GridChart((0.0,), (1.0,), (5,))
    u = ScalarField(chart, np.ones((11, 5)), np.linspace(0.0, 1.0, 11))

    # Call / Assert
    with pytest.raises(DomainError):
        time_mollify(u, 0.05)


def test_coefficient_bounds_for_linear_coefficients():
    # Mock
    chart = GridChart((-2.0, -2.0), (2.0, 2.0), (17, 17))
    ops = operators_for(EUCLID, LEBESGUE, chart)
    coeffs = PDECoefficients(a="x1", b="1 + t")
    u = ScalarField.from_expression(
        "1 + exp(-(x1^2 + x2^2))", chart, times=[0.0, 0.5, 1.0]
    )

    # Call
    bounds = measure_coefficient_bounds(ops, coeffs, u, chart.interior_mask())

    # Assert
    assert bounds.inf_a == pytest.approx(-1.5)
    assert bounds.sup_a == pytest.approx(1.5)
    assert bounds.sup_abs_a == pytest.approx(1.5)
    assert bounds.inf_b == pytest.approx(1.0)
    assert bounds.sup_b == pytest.approx(2.0)
    assert bounds.sup_abs_a_t == pytest.approx(0.0)
    assert bounds.sup_grad_a == pytest.approx(1.0)
    assert bounds.sup_grad_b == pytest.approx(0.0, abs=1e-12)
    assert bounds.inf_lap_b == pytest.approx(0.0, abs=1e-9)
    assert bounds.sup_lap_a_plus_a_t == pytest.approx(0.0, abs=1e-9)


def test_stationary_solve_with_zero_potential_is_one():
    # Mock
    chart = _torus()

    # Call
    result = solve_stationary(EUCLID, LEBESGUE, chart, ScalarExpression("0", 2))

    # Assert
    assert result.converged
    assert result.residual < 1e-8
    np.testing.assert_allclose(result.u.values[0], 1.0)


def test_stationary_solve_small_potential_converges():
    # Mock
    chart = _torus()
    V = ScalarExpression("0.1*cos(x1)", 2)

    # Call
    result = solve_stationary(EUCLID, LEBESGUE, chart, V)

    # Assert
    assert result.converged
    assert np.all(result.u.values > 0)


def test_stationary_solve_needs_a_periodic_chart():
    # Mock
    chart = GridChart((0.0, 0.0), (1.0, 1.0), (9, 9))

    # Call / Assert
    with pytest.raises(DomainError):
        solve_stationary(EUCLID, LEBESGUE, chart, ScalarExpression("0", 2))
