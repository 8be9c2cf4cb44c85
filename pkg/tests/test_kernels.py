import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distgeom.chart import Box, Chart, TensorField, box_rule
from distgeom.kernels import (
    EpsNet,
    MollifierProfile,
    axis_perturbation,
    bump,
    kernel_lie_derivative,
    make_kernel,
    make_profile,
    spread_perturbation,
)


@pytest.mark.parametrize("q", [0, 1, 2, 3, 4])
def test_profile_moments(q):
    prof = make_profile(q)
    assert prof.moment(0) == pytest.approx(1.0, abs=1e-12)
    for k in range(1, q + 1):
        assert prof.moment(k) == pytest.approx(0.0, abs=1e-12)
    if q % 2 == 0:
        # first even moment left over is generically non-zero
        assert abs(prof.moment(q + 2)) > 1e-6


@pytest.mark.parametrize("q", [0, 2, 4])
@pytest.mark.parametrize("dim", [1, 2, 3])
def test_discrete_template_moments(q, dim):
    w = make_kernel(dim, q, cells_per_radius=2, order=6)
    z, _, c = w.template()
    assert np.sum(c) == pytest.approx(1.0, abs=1e-13)
    for k in range(1, q + 1):
        for axis in range(dim):
            assert np.sum(c * z[:, axis] ** k) == pytest.approx(0.0, abs=1e-13)


def test_profile_json_round_trip():
    prof = make_profile(2)
    back = MollifierProfile.from_json(prof.to_json())
    assert back == prof
    t = np.linspace(-1, 1, 7)
    np.testing.assert_array_equal(back(t), prof(t))


def test_negative_order_rejected():
    with pytest.raises(ValueError):
        make_profile(-1)


def test_bump_support():
    assert bump(np.array([-1.0, 1.0, 1.5]))[0] == 0.0
    assert bump(np.array([0.0]))[0] == pytest.approx(np.exp(-1.0))


def test_profile_derivative_matches_finite_difference():
    prof = make_profile(2)
    t = np.linspace(-0.9, 0.9, 11)
    h = 1e-6
    np.testing.assert_allclose(prof.derivative(t), (prof(t + h) - prof(t - h)) / (2 * h), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 0.2), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_kernel_density_has_unit_mass(eps, x0, x1):
    w = make_kernel(2, 0)
    x = np.array([x0, x1])
    nodes, weights = box_rule(Box.cube(x, eps), 16, 16)
    mass = np.sum(weights * w.density(x[None], eps, nodes))
    assert mass == pytest.approx(1.0, rel=1e-8)


def test_measure_reproduces_polynomials():
    w = make_kernel(2, 2, cells_per_radius=2, order=6)
    x = np.array([[0.1, -0.2], [0.0, 0.0]])
    [(idx, nodes, m)] = w.measure(x, 0.03)
    f = lambda p: 1 + p[..., 0] - 2 * p[..., 1] + p[..., 0] ** 2  # noqa: E731
    np.testing.assert_allclose(np.sum(m * f(nodes), axis=1), f(x[idx]), atol=1e-13)


def test_singular_group_near_excluded_point():
    w = make_kernel(2, 0, cells_per_radius=2, order=6, singular_cells=2)
    x = np.array([[0.01, 0.0], [0.3, 0.3]])
    groups = w.measure(x, 0.05, excluded=[(0.0, 0.0)])
    kinds = {len(g[0]) for g in groups}
    assert len(groups) == 2 and kinds == {1}
    for _, _, m in groups:
        assert np.sum(m) == pytest.approx(1.0)


def test_perturbations_have_zero_mass():
    w = make_kernel(2, 0)
    nodes, weights = box_rule(Box.cube(np.zeros(2), 1.0), 16, 16)
    for pert in (axis_perturbation(w, 0), axis_perturbation(w, 1), spread_perturbation(w, 0)):
        assert np.sum(weights * pert.density(np.zeros((1, 2)), 1.0, nodes)) == pytest.approx(0.0, abs=1e-10)


def test_kernel_lie_density_part_integrates_to_zero():
    # the y-part is the Lie derivative of a density: a divergence
    X = TensorField((1, 0), 2, lambda p: np.stack([1 + p[:, 1] ** 2, np.sin(p[:, 0])], axis=1))
    L = kernel_lie_derivative(make_kernel(2, 0), X, step=1e-5)
    x = np.array([0.1, 0.05])
    eps = 0.05
    nodes, weights = box_rule(Box.cube(x, eps), 16, 16)
    dens = L.density_part.density(x[None], eps, nodes)
    assert np.sum(weights * dens) == pytest.approx(0.0, abs=1e-8)
    # the base-point part does not vanish in general, but for constant X the
    # full derivative of a translation-invariant kernel is zero
    Xc = TensorField((1, 0), 2, lambda p: np.tile([0.3, -0.7], (len(p), 1)))
    Lc = kernel_lie_derivative(make_kernel(2, 0), Xc)
    np.testing.assert_allclose(Lc.density(x[None], eps, nodes), 0.0, atol=1e-9)


def test_kernel_lie_unknown_part():
    X = TensorField((1, 0), 2, lambda p: p)
    with pytest.raises(ValueError):
        kernel_lie_derivative(make_kernel(2, 0), X).part("bogus")


def test_eps_net_validation_and_values():
    net = EpsNet(0.05, 0.5, 4)
    np.testing.assert_allclose(net.values, [0.05, 0.025, 0.0125, 0.00625])
    assert len(net) == 4 and list(net)[0] == 0.05
    for bad in [(0.0, 0.5, 4), (0.1, 1.0, 4), (0.1, 0.5, 1)]:
        with pytest.raises(ValueError):
            EpsNet(*bad)
    assert EpsNet.default(Chart.unit(2)).eps0 == pytest.approx(0.1 * np.sqrt(2))
