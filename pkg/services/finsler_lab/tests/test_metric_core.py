import jax
import jax.numpy as jnp
import numpy as np
import pytest

from finsler_lab.errors import DomainError, InvalidMetricError
from finsler_lab.metric_core import (
    Covector,
    TangentSample,
    as_metric,
    cartan_tensor,
    direction_set,
    dual_norm,
    eval_F,
    fundamental_tensor,
    legendre,
    legendre_inv,
    misalignment,
)
from finsler_lab.models import MetricSpec

EUCLID = MetricSpec.euclidean(2)
RANDERS = MetricSpec.randers(beta=("0.5", "0"))
ORIGIN = np.zeros(2)


def _F2_half(y):
    # Randers with alpha = identity, beta = (0.5, 0)
    return 0.5 * (np.linalg.norm(y) + 0.5 * y[0]) ** 2


def test_euclidean_norm():
    assert eval_F(EUCLID, TangentSample(ORIGIN, [3.0, 4.0])) == pytest.approx(5.0)


def test_randers_norm_is_asymmetric():
    forward = eval_F(RANDERS, TangentSample(ORIGIN, [1.0, 0.0]))
    backward = eval_F(RANDERS, TangentSample(ORIGIN, [-1.0, 0.0]))

    assert forward == pytest.approx(1.5)
    assert backward == pytest.approx(0.5)


@pytest.mark.parametrize("spec", [EUCLID, RANDERS])
def test_positive_homogeneity(spec):
    y = np.array([0.3, -1.2])

    single = eval_F(spec, TangentSample(ORIGIN, y))
    double = eval_F(spec, TangentSample(ORIGIN, 2 * y))

    assert double == pytest.approx(2 * single, rel=1e-12)


def test_zero_vector_is_rejected():
    with pytest.raises(DomainError):
        TangentSample(ORIGIN, [0.0, 0.0])


def test_strong_convexity_violation():
    spec = MetricSpec.randers(beta=("1.2", "0"))

    with pytest.raises(InvalidMetricError) as exc:
        eval_F(spec, TangentSample(ORIGIN, [1.0, 0.0]))

    assert exc.value.value == pytest.approx(1.2)


def test_fundamental_tensor_matches_finite_differences():
    y = np.array([0.0, 1.0])
    h = 1e-4

    g = fundamental_tensor(RANDERS, TangentSample(ORIGIN, y)).g

    fd = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            fd[i, j] = (
                _F2_half(y + ei + ej)
                - _F2_half(y + ei - ej)
                - _F2_half(y - ei + ej)
                + _F2_half(y - ei - ej)
            ) / (4 * h * h)
    np.testing.assert_allclose(g, fd, atol=1e-6)
    np.testing.assert_allclose(g, g.T, atol=1e-14)


@pytest.mark.parametrize("y", [[0.3, 0.8], [-1.0, 0.2], [0.0, -2.0]])
def test_euler_identity(y):
    s = TangentSample(ORIGIN, y)

    g = fundamental_tensor(RANDERS, s).g

    assert s.y @ g @ s.y == pytest.approx(eval_F(RANDERS, s) ** 2, abs=1e-10)


def test_cartan_tensor_vanishes_for_euclidean_and_contracts_to_zero():
    s = TangentSample(ORIGIN, [0.4, 1.0])

    flat = cartan_tensor(EUCLID, s).C
    C = cartan_tensor(RANDERS, s).C

    assert np.all(flat == 0.0)
    np.testing.assert_allclose(np.einsum("i,ijk->jk", s.y, C), 0.0, atol=1e-9)


def test_dual_norm_inverts_legendre():
    for y in ([1.0, 0.0], [-0.3, 0.9], [2.0, -1.0]):
        s = TangentSample(ORIGIN, y)

        xi = legendre(RANDERS, s)

        expected = eval_F(RANDERS, s)
        assert dual_norm(RANDERS, ORIGIN, xi) == pytest.approx(expected, abs=1e-8)


def test_dual_norm_against_sphere_maximisation():
    dirs = direction_set(2, 10000)
    F = np.array([eval_F(RANDERS, TangentSample(ORIGIN, d)) for d in dirs[::50]])
    unit = dirs[::50] / F[:, None]
    xi = np.array([1.0, 0.0])

    brute = float(np.max(unit @ xi))

    assert dual_norm(RANDERS, ORIGIN, Covector(xi)) == pytest.approx(brute, abs=1e-2)
    assert dual_norm(EUCLID, ORIGIN, Covector([3.0, 4.0])) == pytest.approx(5.0)


def test_legendre_inverse_roundtrip():
    rng = np.random.default_rng(3)
    for _ in range(5):
        y = rng.normal(size=2)
        xi = legendre(RANDERS, TangentSample(ORIGIN, y))

        back = legendre_inv(RANDERS, ORIGIN, xi)

        np.testing.assert_allclose(back, y, atol=1e-8)


def test_legendre_inverse_of_zero_is_zero():
    back = legendre_inv(RANDERS, ORIGIN, Covector([0.0, 0.0]))

    assert np.all(back == 0.0)


def test_euclidean_legendre_is_identity():
    xi = legendre(EUCLID, TangentSample(ORIGIN, [1.0, 2.0]))

    np.testing.assert_allclose(xi.xi, [1.0, 2.0])


def test_misalignment():
    box = ([-1.0, -1.0], [1.0, 1.0])

    riemannian = misalignment(EUCLID, box, 64)
    coarse = misalignment(RANDERS, box, 64)
    fine = misalignment(RANDERS, box, 1024)

    assert riemannian == 1.0
    assert coarse > 1.0
    assert coarse <= fine


@pytest.mark.parametrize("dim", [2, 3])
def test_direction_sets_are_nested_unit_vectors(dim):
    small = direction_set(dim, 64)
    large = direction_set(dim, 1024)

    np.testing.assert_allclose(np.linalg.norm(large, axis=1), 1.0)
    np.testing.assert_array_equal(large[: len(small)], small)


def test_batched_kernels_agree_with_pointwise():
    m = as_metric(RANDERS)
    xs = jnp.zeros((3, 2))
    ys = jnp.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 1.0]])

    batched = np.asarray(m.batched("F")(xs, ys))
    pointwise = np.array([float(m.F(x, y)) for x, y in zip(xs, ys)])

    np.testing.assert_allclose(batched, pointwise)
    assert jax.config.jax_enable_x64
