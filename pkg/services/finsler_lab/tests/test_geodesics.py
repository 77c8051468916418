import numpy as np
import pytest
from scipy.integrate import quad

from finsler_lab.config import get_settings
from finsler_lab.errors import DomainError
from finsler_lab.fields import GridChart, ScalarField
from finsler_lab.geodesics import (
    ball_nodes,
    build_cutoff,
    cutoff_gradient_scan,
    distance_field,
    forward_distance,
    integrate_geodesic,
    optimize_path,
    path_action,
    profile_constants,
    quintic_profile,
    quintic_profile_d1,
)
from finsler_lab.metric_core import TangentSample, eval_F
from finsler_lab.models import MetricFamily, MetricSpec

EUCLID = MetricSpec.euclidean(2)
RANDERS = MetricSpec.randers(beta=("0.5", "0"))
# x-dependent Randers metric; straight lines are not geodesics
TILTED = MetricSpec.randers(beta=("0.3*cos(x2)", "0.1*sin(x1)"))
SPHERE = MetricSpec(
    family=MetricFamily.RIEMANNIAN,
    dim=2,
    g=(
        ("4/(1 + x1^2 + x2^2)^2", "0"),
        ("0", "4/(1 + x1^2 + x2^2)^2"),
    ),
)


def test_euclidean_geodesics_are_straight_lines():
    path = integrate_geodesic(EUCLID, [0.5, -0.5], [1.0, 2.0], 3.0, 0.1)

    expected = np.array([0.5, -0.5]) + path.s[:, None] * np.array([1.0, 2.0])
    np.testing.assert_allclose(path.x, expected, atol=1e-12)
    assert not path.truncated


def test_geodesic_speed_is_conserved():
    path = integrate_geodesic(TILTED, [0.0, 0.0], [1.0, 0.3], 10.0, 0.01)

    speed = path.speed(TILTED)

    assert np.max(np.abs(speed - speed[0])) / speed[0] <= 1e-6


def test_sphere_geodesic_closes_after_one_period():
    # the equator is the unit circle in these coordinates, traversed at unit speed
    errors = []
    for ds in (0.2, 0.1):
        path = integrate_geodesic(SPHERE, [1.0, 0.0], [0.0, 1.0], 2 * np.pi, ds)
        errors.append(float(np.linalg.norm(path.x[-1] - [1.0, 0.0])))

    assert errors[1] < 1e-3
    assert errors[1] < errors[0] / 8


def test_geodesic_leaving_the_chart_is_truncated():
    chart = GridChart((-1.0, -1.0), (1.0, 1.0), (9, 9))

    path = integrate_geodesic(EUCLID, [0.0, 0.0], [1.0, 0.0], 3.0, 0.1, chart)

    assert path.truncated
    assert path.x[:, 0].max() <= 1.0
    assert list(path.to_frame().columns) == ["s", "x1", "x2", "v1", "v2"]


def test_geodesic_needs_a_velocity():
    with pytest.raises(DomainError):
        integrate_geodesic(EUCLID, [0.0, 0.0], [0.0, 0.0], 1.0, 0.1)


def test_euclidean_distance():
    distance = forward_distance(EUCLID, [0.0, 0.0], [3.0, 4.0])
    assert distance == pytest.approx(5.0, abs=1e-6)
    assert forward_distance(RANDERS, [1.0, 1.0], [1.0, 1.0]) == 0.0


def test_randers_distance_is_asymmetric():
    forward = forward_distance(RANDERS, [0.0, 0.0], [1.0, 0.0])
    backward = forward_distance(RANDERS, [1.0, 0.0], [0.0, 0.0])

    assert forward == pytest.approx(quad(lambda s: 1.5, 0.0, 1.0)[0], abs=1e-4)
    assert backward == pytest.approx(quad(lambda s: 0.5, 0.0, 1.0)[0], abs=1e-4)
    assert backward < forward


def test_optimized_path_is_no_longer_than_the_chord():
    a, b = np.array([0.0, 0.0]), np.array([1.0, 0.5])
    segments = get_settings().PATH_CONTROL_POINTS + 1
    mids = a + (np.arange(segments)[:, None] + 0.5) / segments * (b - a)
    chord_energy = np.mean([eval_F(TILTED, TangentSample(m, b - a)) ** 2 for m in mids])

    best = optimize_path(TILTED, a, b, n_restarts=2)

    assert best.energy <= chord_energy + 1e-12
    assert best.points.shape == (segments + 1, 2)
    np.testing.assert_allclose(best.points[0], a)
    np.testing.assert_allclose(best.points[-1], b)


def test_path_action_scales_with_inverse_time():
    x2, x1 = [0.0, 0.0], [1.0, 2.0]

    flat = path_action(EUCLID, x2, x1, 0.5)
    once = path_action(TILTED, x2, [0.6, 0.2], 1.0, n_restarts=1)
    twice = path_action(TILTED, x2, [0.6, 0.2], 2.0, n_restarts=1)

    assert flat == pytest.approx(5.0 / (2 * 0.5), abs=1e-5)
    assert twice == pytest.approx(once / 2.0, abs=1e-10)
    with pytest.raises(DomainError):
        path_action(EUCLID, x2, x1, 0.0)


def test_profile_constants():
    r = np.linspace(0.0, 3.0, 301)

    phi = quintic_profile(r)
    C1, C2 = profile_constants()

    assert np.all(phi[r <= 1.0] == 1.0)
    assert np.all(phi[r >= 2.0] == 0.0)
    assert np.all(np.diff(phi) <= 1e-15)
    inner = (r > 1.0) & (r < 2.0)
    assert np.all(quintic_profile_d1(r[inner]) ** 2 <= C1**2 * phi[inner] + 1e-12)
    assert C2 > 0


def test_cutoff_plateau_and_support():
    chart = GridChart((-4.0, -4.0), (4.0, 4.0), (33, 33))

    cutoff = build_cutoff(EUCLID, chart, [0.0, 0.0], 1.0)

    r = np.sqrt(chart.coords[0] ** 2 + chart.coords[1] ** 2)
    np.testing.assert_allclose(cutoff.values[r <= 1.0], 1.0)
    np.testing.assert_allclose(cutoff.values[r >= 2.0], 0.0)
    assert cutoff.inner_mask().sum() == (r <= 1.0).sum()


def test_cutoff_gradient_bound_holds_on_euclidean_space():
    chart = GridChart((-4.0, -4.0), (4.0, 4.0), (65, 65))
    cutoff = build_cutoff(EUCLID, chart, [0.0, 0.0], 1.0)

    scan = cutoff_gradient_scan(EUCLID, cutoff)

    assert scan.passed
    assert scan.min_margin >= 0.0
    assert scan.bound == pytest.approx(cutoff.C1**2)


def test_cutoff_ball_must_stay_inside_the_chart():
    chart = GridChart((-1.0, -1.0), (1.0, 1.0), (9, 9))

    with pytest.raises(DomainError):
        build_cutoff(EUCLID, chart, [0.0, 0.0], 1.0)


def test_cutoff_covers_the_far_side_of_a_strongly_asymmetric_ball():
    # Mock
    # d(0, x) = |x| + 0.8 x1, so B_p(2R) reaches x1 = -10 for R = 1
    metric = MetricSpec.randers(beta=("0.8", "0"))
    chart = GridChart((-12.0, -12.0), (12.0, 12.0), (49, 49))

    # Call
    cutoff = build_cutoff(metric, chart, [0.0, 0.0], 1.0)

    # Assert
    x1, x2 = chart.coords
    exact = np.sqrt(x1**2 + x2**2) + 0.8 * x1
    assert cutoff.values[chart.index_of([-5.0, 0.0])] == pytest.approx(1.0)
    assert cutoff.inner_mask()[chart.index_of([-4.5, 0.0])]
    assert cutoff.support_mask()[chart.index_of([-9.0, 0.0])]
    assert not cutoff.support_mask()[chart.index_of([-11.0, 0.0])]
    np.testing.assert_allclose(cutoff.values[exact <= 0.99], 1.0)
    np.testing.assert_allclose(cutoff.values[exact >= 2.01], 0.0)
    assert not np.any(np.isnan(cutoff.r[exact < 1.99]))


def test_randers_distance_field_and_ball_nodes():
    chart = GridChart((-2.0, -2.0), (2.0, 2.0), (9, 9))
    u = ScalarField.from_expression("1", chart, 0.0)

    r = distance_field(RANDERS, chart, [0.0, 0.0])
    nodes = ball_nodes(u, r, 1.0)

    assert r[chart.index_of([1.0, 0.0])] == pytest.approx(1.5)
    assert r[chart.index_of([-1.0, 0.0])] == pytest.approx(0.5)
    assert all(r[tuple(n)] < 1.0 for n in nodes)
