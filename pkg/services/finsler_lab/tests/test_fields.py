import json
import os

import numpy as np
import pytest

from finsler_lab.errors import DomainError
from finsler_lab.fields import (
    GridChart,
    ScalarField,
    Stencil,
    VectorField,
    divergence,
    finsler_laplacian,
    gradient,
    hessian_ref,
    linearized_laplacian,
    operators_for,
)
from finsler_lab.metric_core import Covector, TangentSample, dual_norm, eval_F
from finsler_lab.models import (
    GridSpec,
    MeasureKind,
    MeasureSpec,
    MetricFamily,
    MetricSpec,
)

EUCLID = MetricSpec.euclidean(2)
RANDERS = MetricSpec.randers(beta=("0.3", "0.1"))
LEBESGUE = MeasureSpec()
GAUSSIAN = MeasureSpec(kind=MeasureKind.CUSTOM, sigma="exp(-(x1^2 + x2^2))")


def _chart(points=17, half=2.0, **kwargs):
    return GridChart((-half, -half), (half, half), (points, points), **kwargs)


def test_chart_geometry():
    chart = _chart(points=17)

    assert chart.dim == 2
    np.testing.assert_allclose(chart.spacing, [0.25, 0.25])
    assert chart.index_of([0.0, 0.5]) == (8, 10)
    assert chart.interior_mask().sum() == 13 * 13
    assert chart.interior_mask(4).sum() == 9 * 9
    assert list(chart.contains(np.array([[0.0, 0.0], [2.5, 0.0]]))) == [True, False]


def test_chart_from_spec_and_coarsening():
    spec = GridSpec(lower=[0.0, 0.0], upper=[1.0, 2.0], points=[9, 17])

    chart = GridChart.from_spec(spec)
    coarse = chart.coarsened()

    assert coarse.points == (5, 9)
    np.testing.assert_allclose(coarse.spacing, 2 * chart.spacing)
    with pytest.raises(DomainError):
        GridChart((0.0,), (1.0,), (10,)).coarsened()


def test_periodic_chart_has_no_boundary():
    chart = GridChart((0.0,), (2 * np.pi,), (16,), periodic=True)

    assert chart.interior_mask().all()
    np.testing.assert_allclose(chart.spacing, [2 * np.pi / 16])
    assert chart.coarsened().points == (8,)


def test_index_of_rejects_off_grid_points():
    with pytest.raises(DomainError):
        _chart().index_of([0.1, 0.0])


def test_stencil_is_exact_on_quadratics():
    chart = _chart(points=9)
    x1, x2 = chart.coords
    f = x1**2 + x1 * x2 - 3 * x2

    stencil = Stencil(chart, order=2)

    np.testing.assert_allclose(stencil.first(f, 0), 2 * x1 + x2, atol=1e-12)
    np.testing.assert_allclose(stencil.laplacian(f), 2.0, atol=1e-10)
    np.testing.assert_allclose(stencil.hessian(f)[0, 1], 1.0, atol=1e-12)


def test_fourth_order_stencil_converges_faster():
    errors = {}
    for order in (2, 4):
        chart = GridChart((0.0,), (1.0,), (33,))
        f = np.sin(3 * chart.coords[0])
        d = Stencil(chart, order).first(f, 0)
        errors[order] = np.abs(d - 3 * np.cos(3 * chart.coords[0]))[2:-2].max()

    assert errors[4] < errors[2] / 10


def test_scalar_field_validation():
    chart = _chart(points=9)

    with pytest.raises(DomainError):
        ScalarField(chart, np.zeros((2, 5, 5)), [0.0, 1.0])
    with pytest.raises(DomainError):
        ScalarField(chart, np.full((9, 9), np.nan), [0.0])


def test_scalar_field_sampling_and_times():
    chart = _chart(points=9)
    u = ScalarField.from_expression("x1 + 2*x2 + t", chart, [0.0, 0.5, 1.0])

    assert u.dt == pytest.approx(0.5)
    assert u.index_of_time(0.5) == 1
    assert u.sample([0.1, 0.2], 0.25) == pytest.approx(0.1 + 0.4 + 0.25)
    with pytest.raises(DomainError):
        u.index_of_time(0.3)
    with pytest.raises(DomainError):
        u.sample([5.0, 0.0], 0.5)


def test_scalar_field_export(tmp_path):
    chart = _chart(points=9)
    u = ScalarField.from_expression("x1 * t", chart, np.linspace(0.0, 1.0, 11))

    files = u.export(str(tmp_path), 3, manifest={"initial": "x1 * t"})

    with open(os.path.join(tmp_path, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert files == ["u_000000.csv", "u_000005.csv", "u_000010.csv"]
    assert manifest["times"] == [0.0, 0.5, 1.0]
    assert manifest["initial"] == "x1 * t"


def test_euclidean_gradient():
    u = ScalarField.from_expression("x1", _chart(), 0.0)

    grad = gradient(EUCLID, u, [0.5, 0.5], 0.0)
    np.testing.assert_allclose(grad, [1.0, 0.0], atol=1e-12)


def test_gradient_vanishes_with_the_differential():
    u = ScalarField.from_expression("3", _chart(), 0.0)

    assert np.all(gradient(RANDERS, u, [0.0, 0.0], 0.0) == 0.0)


def test_randers_gradient_length_is_dual_norm():
    u = ScalarField.from_expression("x1 + 2*x2", _chart(), 0.0)
    x = np.array([0.5, -0.5])

    grad = gradient(RANDERS, u, x, 0.0)

    length = eval_F(RANDERS, TangentSample(x, grad))
    expected = dual_norm(RANDERS, x, Covector([1.0, 2.0]))
    assert length == pytest.approx(expected, abs=1e-8)


def test_euclidean_hessian_is_plain_second_derivative():
    u = ScalarField.from_expression("x1^2 + x1*x2", _chart(), 0.0)

    H = hessian_ref(EUCLID, u, u, [1.0, 0.5], 0.0)

    np.testing.assert_allclose(H, [[2.0, 1.0], [1.0, 0.0]], atol=1e-10)
    np.testing.assert_allclose(H, H.T, atol=1e-12)


def test_reference_hessian_is_symmetric_for_a_varying_randers_metric():
    metric = MetricSpec.randers(beta=("0.2*sin(x2)", "0.1*x1"))
    u = ScalarField.from_expression("x1^2 + x1*x2 + 2*x2", _chart(), 0.0)
    f = ScalarField.from_expression("sin(x1)*x2", _chart(), 0.0)

    H = hessian_ref(metric, u, f, [0.5, 0.5], 0.0)
    plain = hessian_ref(EUCLID, u, f, [0.5, 0.5], 0.0)

    np.testing.assert_allclose(H, H.T, atol=1e-9)
    assert not np.allclose(H, plain, atol=1e-6)


def test_divergence():
    chart = _chart()
    x1, x2 = chart.coords
    radial = VectorField(chart, np.stack([x1, np.zeros_like(x1)]))
    constant = VectorField(chart, np.stack([np.ones_like(x1), np.zeros_like(x1)]))

    assert divergence(LEBESGUE, radial, [0.5, 0.25]) == pytest.approx(1.0)
    assert divergence(GAUSSIAN, constant, [0.5, 0.25]) == pytest.approx(-1.0, abs=1e-10)


def test_divergence_is_linear():
    chart = _chart()
    x1, x2 = chart.coords
    V = VectorField(chart, np.stack([np.sin(x1), x1 * x2]))
    W = VectorField(chart, np.stack([x2**2, np.cos(x2)]))
    combo = VectorField(chart, 0.3 * V.values - 1.7 * W.values)
    x = [0.25, -0.5]

    lhs = divergence(GAUSSIAN, combo, x)
    rhs = 0.3 * divergence(GAUSSIAN, V, x) - 1.7 * divergence(GAUSSIAN, W, x)

    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_euclidean_laplacian_of_square_norm():
    u = ScalarField.from_expression("x1^2 + x2^2", _chart(), 0.0)
    x = [0.5, 0.5]

    lap = finsler_laplacian(EUCLID, LEBESGUE, u, x, 0.0)

    assert lap == pytest.approx(4.0, abs=1e-10)
    assert linearized_laplacian(EUCLID, LEBESGUE, u, u, x, 0.0) == pytest.approx(lap)


def test_linearized_laplacian_of_u_is_its_laplacian():
    u = ScalarField.from_expression("exp(-(x1^2 + 0.5*x2^2))", _chart(), 0.0)
    x = [0.5, -0.25]

    lin = linearized_laplacian(RANDERS, LEBESGUE, u, u, x, 0.0)

    full = finsler_laplacian(RANDERS, LEBESGUE, u, x, 0.0)
    assert lin == pytest.approx(full, abs=1e-10)


def test_riemannian_linearized_laplacian_ignores_reference():
    metric = MetricSpec(
        family=MetricFamily.RIEMANNIAN, dim=2, g=(("1 + x1^2", "0"), ("0", "1"))
    )
    chart = _chart()
    f = ScalarField.from_expression("sin(x1) * x2", chart, 0.0)
    u1 = ScalarField.from_expression("x1 + x2", chart, 0.0)
    u2 = ScalarField.from_expression("exp(x2) - x1", chart, 0.0)
    x = [0.5, 0.5]

    first = linearized_laplacian(metric, LEBESGUE, u1, f, x, 0.0)
    second = linearized_laplacian(metric, LEBESGUE, u2, f, x, 0.0)

    assert first == pytest.approx(second, abs=1e-12)


def _identity_residual(points, kind):
    chart = _chart(points=points)
    x1, x2 = chart.coords
    u = np.exp(-0.5 * (x1**2 + x2**2))
    ops = operators_for(RANDERS, LEBESGUE, chart)
    if kind == "trace":
        res = ops.trace_identity_residual(u)
    else:
        res = ops.exponential_identity_residual(u)
    r = np.sqrt(x1**2 + x2**2)
    region = (np.maximum(np.abs(x1), np.abs(x2)) <= 1.0) & (r >= 0.3)
    return float(np.nanmax(np.abs(res[region])))


@pytest.mark.parametrize("kind", ["trace", "exponential"])
def test_identity_residuals_are_second_order(kind):
    coarse = _identity_residual(33, kind)
    fine = _identity_residual(65, kind)

    assert fine < coarse / 2.5


def test_weak_form_residual_converges():
    residuals = []
    for points in (33, 65):
        chart = _chart(points=points)
        x1, x2 = chart.coords
        # critical point of u kept outside the support of the test function
        u = np.exp(-0.5 * ((x1 - 1.5) ** 2 + x2**2))
        test = np.maximum(1.0 - x1**2 - x2**2, 0.0) ** 3
        ops = operators_for(RANDERS, GAUSSIAN, chart)
        residuals.append(abs(ops.weak_form_residual(u, test)))

    assert residuals[1] < residuals[0] / 2.5
