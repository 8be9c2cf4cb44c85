import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distgeom.chart import (
    BoundaryProximityError,
    Box,
    Chart,
    ChartError,
    IntegrationPoisonedError,
    TensorField,
    TestDensity,
    box_rule,
    composite_rule,
    derivative_jet,
    gauss_legendre,
    gradient,
    graded_cells,
    cells_rule,
    integrate,
)


def test_box_basics():
    b = Box((-1.0, 0.0), (1.0, 2.0))
    assert b.dim == 2
    assert b.volume == pytest.approx(4.0)
    assert b.diameter == pytest.approx(math.sqrt(8))
    assert b.contains([[0, 1], [2, 1]]).tolist() == [True, False]
    assert b.grid(3).shape == (9, 2)


def test_box_rejects_mismatched_corners():
    with pytest.raises(ValueError):
        Box((0.0,), (1.0, 1.0))


def test_chart_dimensions():
    with pytest.raises(ValueError):
        Chart.unit(5)
    with pytest.raises(ValueError):
        Chart(Box.cube(np.zeros(2), 0.5), ((2.0, 0.0),))


def test_clearance_is_enforced(chart2):
    chart2.check_clearance(np.array([[0.0, 0.0]]), 0.1)
    with pytest.raises(BoundaryProximityError):
        chart2.check_clearance(np.array([[0.45, 0.0]]), 0.1)
    assert issubclass(BoundaryProximityError, ChartError)


@given(st.integers(1, 10), st.integers(0, 19))
def test_gauss_legendre_exact_for_polynomials(order, degree):
    t, w = gauss_legendre(order)
    exact = 0.0 if degree % 2 else 2.0 / (degree + 1)
    approx = float(np.sum(w * t**degree))
    if degree <= 2 * order - 1:
        assert approx == pytest.approx(exact, abs=1e-12)


def test_composite_rule_covers_interval():
    t, w = composite_rule(np.linspace(0.0, 3.0, 4), 4)
    assert np.sum(w) == pytest.approx(3.0)
    assert np.sum(w * t**5) == pytest.approx(3.0**6 / 6)


def test_box_rule_integrates_polynomial():
    box = Box((0.0, -1.0, 0.0), (1.0, 1.0, 2.0))
    nodes, weights = box_rule(box, 4, 2)
    val = np.sum(weights * nodes[:, 0] ** 3 * nodes[:, 1] ** 2 * nodes[:, 2])
    assert val == pytest.approx(0.25 * (2.0 / 3.0) * 2.0)


def test_graded_cells_resolve_focus():
    box = Box.cube(np.zeros(2), 1.0)
    lo, hi = graded_cells(box, [(0.2, -0.1)], 1e-3)
    sizes = np.max(hi - lo, axis=1)
    assert sizes.min() <= 1e-3 + 1e-15
    assert np.sum(np.prod(hi - lo, axis=1)) == pytest.approx(box.volume)


def test_integrate_point_singularity():
    # int_{[-1,1]^2} 1/|x| = 8 asinh(1)
    f = lambda p: 1.0 / np.linalg.norm(p - 1e-30, axis=1)  # noqa: E731
    val = integrate(f, Box.cube(np.zeros(2), 1.0), 8, focus=[(0.0, 0.0)], h_min=1e-7, ratio=0.5)
    assert val == pytest.approx(8 * math.asinh(1.0), rel=1e-5)


def test_integrate_refuses_non_finite_values():
    with pytest.raises(IntegrationPoisonedError):
        integrate(lambda p: np.where(p[:, 0] > 0.5, np.nan, 1.0), Box((0.0, 0.0), (1.0, 1.0)), 4)


def test_tensor_field_call_shapes():
    f = TensorField((1, 1), 2, lambda p: np.einsum("n,ab->nab", p[:, 0], np.eye(2)))
    assert f(np.array([0.5, 0.0])).shape == (2, 2)
    assert f(np.zeros((3, 4, 2))).shape == (3, 4, 2, 2)
    with pytest.raises(ValueError):
        TensorField((0, 0), 2, lambda p: p[:, 0], kind="regularized")


def test_regularized_step_scales_with_eps():
    f = TensorField((0, 0), 2, lambda p: p[:, 0], kind="regularized", eps=0.02)
    assert f.default_step() == pytest.approx(1e-3)


def test_gradient_and_jet_against_closed_form():
    f = TensorField((0, 0), 2, lambda p: np.sin(p[:, 0]) * np.exp(p[:, 1]))
    x = np.array([[0.1, 0.2], [-0.3, 0.05]])
    g = gradient(f, x, 1e-4)
    exact = np.stack([np.cos(x[:, 0]) * np.exp(x[:, 1]), np.sin(x[:, 0]) * np.exp(x[:, 1])], axis=1)
    np.testing.assert_allclose(g, exact, rtol=1e-7)
    vals, d1, d2 = derivative_jet(f, x, 1e-4, 1e-3)
    np.testing.assert_allclose(d2[:, 0, 1], exact[:, 0], rtol=1e-5)
    np.testing.assert_allclose(d2[:, 0, 0], -vals, rtol=1e-5)


def test_density_pairs_with_matching_valence():
    box = Box.cube(np.zeros(2), 0.5)
    psi = TestDensity((0, 1), 2, lambda p: np.stack([p[:, 0], np.ones(len(p))], axis=1), box)
    vals = np.array([[2.0, 3.0]])
    assert psi.pair_values(vals, np.array([[0.25, 0.0]]))[0] == pytest.approx(0.5 + 3.0)
    assert np.all(psi(np.array([[0.9, 0.0]])) == 0.0)
    with pytest.raises(ValueError):
        psi.pair_values(np.ones((1, 2, 2)), np.zeros((1, 2)))


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
def test_cells_rule_volume(a, b):
    lo = np.array([[min(a, b), -0.5]])
    hi = np.array([[max(a, b) + 0.1, 0.5]])
    nodes, weights = cells_rule(lo, hi, 3)
    assert np.sum(weights) == pytest.approx(float(np.prod(hi - lo)))
