import math

import numpy as np
import pytest
import sympy as sp

from distgeom.oracles import (
    SymbolicGeometry,
    cone_boundary_check,
    cone_m,
    cone_metric,
    cone_total_curvature,
    conformal_geometry,
    disguised_flat_geometry,
    skewed_flat_geometry,
    sphere_geometry,
)

PTS2 = np.array([[0.1, -0.2], [0.3, 0.05]])
PTS3 = np.array([[0.1, -0.2, 0.05], [0.0, 0.1, 0.2]])


@pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
def test_sphere_scalar_curvature(a):
    np.testing.assert_allclose(sphere_geometry(a)("scalar", PTS2), 2 / a**2, rtol=1e-12)


def test_flat_geometries_have_no_curvature():
    np.testing.assert_allclose(skewed_flat_geometry([[1.0, 0.4], [0.2, 1.3]])("riemann", PTS2), 0.0, atol=1e-12)
    np.testing.assert_allclose(disguised_flat_geometry()("riemann", PTS3), 0.0, atol=1e-10)


def test_conformal_scalar_matches_textbook_formula():
    # n = 3, g = e^{2 phi} delta: R = -e^{-2 phi} (4 lap phi + 2 |grad phi|^2)
    geom = conformal_geometry(lambda x0, x1, x2: 0.1 * x0 * x1, 3)
    x0, x1 = PTS3[:, 0], PTS3[:, 1]
    phi = 0.1 * x0 * x1
    grad2 = (0.1 * x1) ** 2 + (0.1 * x0) ** 2
    expect = -np.exp(-2 * phi) * (4 * 0 + 2 * grad2)
    np.testing.assert_allclose(geom("scalar", PTS3), expect, rtol=1e-12)


def test_constant_expressions_broadcast():
    x = sp.symbols("x0:2", real=True)
    geom = SymbolicGeometry(sp.eye(2) * 2, x)
    assert geom("metric", PTS2).shape == (2, 2, 2)
    assert geom("scalar", PTS2).shape == (2,)


def test_cone_m_eigenvalues_and_metric():
    m = cone_m(PTS2)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(m), axis=1), [[-1, 1], [-1, 1]], atol=1e-14)
    g = cone_metric(1.0)(PTS2)
    np.testing.assert_allclose(g, np.broadcast_to(np.eye(2), g.shape))
    for A in (0.3, 0.8):
        assert np.all(np.linalg.eigvalsh(cone_metric(A)(PTS2)) > 0)


def test_cone_metric_is_polar_cone():
    # in polar coordinates g = dr^2 + A^2 r^2 dphi^2
    A, r, phi = 0.6, 0.2, 0.7
    p = np.array([[r * math.cos(phi), r * math.sin(phi)]])
    J = np.array([[math.cos(phi), -r * math.sin(phi)], [math.sin(phi), r * math.cos(phi)]])
    polar = J.T @ cone_metric(A)(p)[0] @ J
    np.testing.assert_allclose(polar, np.diag([1.0, A * A * r * r]), atol=1e-14)


@pytest.mark.parametrize("A", [0.5, 0.8, 0.95])
def test_gauss_bonnet_boundary_check(A):
    assert cone_boundary_check(A) == pytest.approx(cone_total_curvature(A), rel=1e-6)
