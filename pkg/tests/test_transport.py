import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distgeom.chart import Box, TensorField
from distgeom.transport import (
    BackgroundConnection,
    CustomTransport,
    IdentityTransport,
    NoGeodesicError,
    ParallelTransport,
    ProjectiveTransport,
    check_admissibility,
    estimate_invertibility_radius,
    linear_perturbation,
    parallel_transport,
    projective_connection,
    transport_lie_derivative,
)

K = [0.4, -0.3]
points = arrays(np.float64, (4, 2), elements=st.floats(-0.3, 0.3))


def test_identity_transport():
    U = IdentityTransport(3)
    M = U(np.zeros((5, 3)), np.ones((5, 3)))
    np.testing.assert_array_equal(M, np.broadcast_to(np.eye(3), (5, 3, 3)))


def test_flat_parallel_transport_is_identity():
    U = ParallelTransport(BackgroundConnection.zero(2))
    assert U.is_identity
    np.testing.assert_array_equal(U(np.zeros(2), np.ones(2) * 0.1), np.eye(2))


@settings(max_examples=15, deadline=None)
@given(points, points)
def test_projective_closed_form_matches_shooting(x, y):
    closed = ProjectiveTransport(K)
    shot = ParallelTransport(projective_connection(K))
    np.testing.assert_allclose(closed(x, y), shot(x, y), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(points, points)
def test_projective_transport_group_laws(x, y):
    U = ProjectiveTransport(K)
    np.testing.assert_allclose(U(x, x), np.broadcast_to(np.eye(2), (4, 2, 2)), atol=1e-14)
    # walking back along the same segment inverts the map
    np.testing.assert_allclose(U(x, y) @ U(y, x), np.broadcast_to(np.eye(2), (4, 2, 2)), atol=1e-12)


def test_projective_small_separation_branch():
    U = ProjectiveTransport(K)
    x = np.array([[0.1, 0.1]])
    y = x + np.array([[3e-9, 4e-9]])  # k.D = 0 exactly: straight branch
    np.testing.assert_allclose(U(x, y), np.eye(2)[None], atol=1e-8)


def test_transport_preserves_geodesic_tangent():
    # the geodesic tangent of a straight segment is carried onto a multiple of itself
    U = ProjectiveTransport(K)
    x, y = np.array([0.2, -0.1]), np.array([-0.1, 0.15])
    D = x - y
    out = U(x, y) @ D
    assert abs(out[0] * D[1] - out[1] * D[0]) < 1e-14


def test_shooting_against_exponential_damping():
    # gamma^1_{01} = gamma^1_{10} = kappa: the x0 axis is a geodesic and the
    # second component decays like exp(-kappa t) along it
    kappa = 1.5
    c = np.zeros((2, 2, 2))
    c[1, 0, 1] = c[1, 1, 0] = kappa
    gam = BackgroundConnection.constant(c, "damping")
    P = parallel_transport(gam, np.array([-0.1, 0.0]), np.array([0.2, 0.0]))
    np.testing.assert_allclose(P, np.diag([1.0, np.exp(-kappa * 0.3)]), atol=1e-9)


def test_shooting_failure_raises():
    c = np.zeros((2, 2, 2))
    c[0, 0, 0] = 50.0
    with pytest.raises(NoGeodesicError):
        parallel_transport(BackgroundConnection.constant(c), np.zeros(2), np.array([0.4, 0.0]), max_iter=2)


def test_connection_from_metric_and_symmetry():
    gam = BackgroundConnection.from_metric(lambda p: np.einsum("n,ab->nab", np.exp(2 * p[:, 0]), np.eye(2)), 2)
    pts = np.array([[0.1, 0.2]])
    G = gam.gamma(pts)[0]
    # conformal factor e^{2 x0}: Gamma^0_00 = 1, Gamma^1_01 = 1, Gamma^0_11 = -1
    assert G[0, 0, 0] == pytest.approx(1.0, abs=1e-8)
    assert G[1, 0, 1] == pytest.approx(1.0, abs=1e-8)
    assert G[0, 1, 1] == pytest.approx(-1.0, abs=1e-8)
    assert gam.check_symmetric(pts, 1e-9)


def test_invertibility_radius():
    assert estimate_invertibility_radius(ProjectiveTransport(K), np.zeros((1, 2)), [0.1, 0.2, 0.4]) == 0.4


def test_admissibility_of_closed_form_net():
    rep = check_admissibility(lambda eps: ProjectiveTransport(K), Box.cube(np.zeros(2), 0.2), [0.1, 0.05, 0.025])
    assert rep.bounded and rep.diagonal_exact
    assert set(rep.to_dict()) >= {"eps_values", "slopes", "bounded"}


def test_perturbed_transport_is_detected_as_growing():
    # Upsilon_eps = I + (y - x)^c B_c / eps: first derivatives blow up like 1/eps
    B = np.zeros((2, 2, 2))
    B[0, 0, 1] = 1.0
    pert = linear_perturbation(B)

    def net(eps):
        return CustomTransport(2, lambda x, y: np.eye(2) + pert.matrices(x, y) / eps)

    rep = check_admissibility(net, Box.cube(np.zeros(2), 0.2), [0.1, 0.05, 0.025])
    assert rep.diagonal_exact and not rep.bounded


def test_transport_lie_derivative_of_identity():
    X = TensorField((1, 0), 2, lambda p: np.stack([1 + p[:, 1], p[:, 0] ** 2], axis=1))
    L = transport_lie_derivative(IdentityTransport(2), X)
    x = np.array([[0.1, 0.0], [0.0, 0.2]])
    y = np.array([[0.0, 0.05], [0.1, 0.1]])

    def jac(p):  # [a, b] = d_b X^a
        return np.array([[[0.0, 1.0], [2 * v[0], 0.0]] for v in p])

    np.testing.assert_allclose(L(x, y), jac(y) - jac(x), atol=1e-8)
    np.testing.assert_allclose(L(x, x), 0.0, atol=1e-8)
