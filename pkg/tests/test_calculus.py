import numpy as np
import pytest

from distgeom.calculus import (
    DegenerateMetricError,
    GeneralizedMetric,
    adjugate,
    component_names,
    contract,
    covariant_derivative,
    curvature,
    export_csv,
    gen_lie_derivative,
    levi_civita,
    lie_derivative,
    tensor_product,
)
from distgeom.chart import Chart, TensorField
from distgeom.embedding import RoughTensorField, iota, sigma
from distgeom.kernels import make_kernel
from distgeom.oracles import conformal_geometry, sphere_geometry
from distgeom.transport import BackgroundConnection, projective_connection

X = np.array([[0.1, -0.05], [0.0, 0.2], [-0.15, 0.1]])
X3 = np.array([[0.1, -0.05, 0.02], [0.0, 0.12, -0.1]])


def smooth_metric(geom, chart=None):
    return GeneralizedMetric(sigma(TensorField((0, 2), geom.n, geom.compiled("metric"), chart=chart)))


def test_adjugate_matches_inverse(rng):
    M = rng.normal(size=(5, 3, 3)) + 3 * np.eye(3)
    np.testing.assert_allclose(adjugate(M) / np.linalg.det(M)[:, None, None], np.linalg.inv(M), atol=1e-12)


def test_sphere_curvature_from_smooth_metric():
    geom = sphere_geometry(0.8)
    g = smooth_metric(geom)
    out = curvature(levi_civita(g), g).compute(X)
    np.testing.assert_allclose(out["scalar"], 2 / 0.8**2, rtol=1e-5)
    # two-dimensional Einstein tensor vanishes identically
    np.testing.assert_allclose(out["einstein"], 0.0, atol=1e-4)
    np.testing.assert_allclose(out["ricci"], geom("ricci", X), rtol=1e-5, atol=1e-6)


def test_conformal_ricci_against_symbolic_oracle():
    geom = conformal_geometry(lambda x0, x1, x2: 0.3 * x0 * x1 + 0.2 * x2**2, 3)
    g = smooth_metric(geom)
    out = curvature(levi_civita(g), g).compute(X3)
    np.testing.assert_allclose(out["ricci"], geom("ricci", X3), atol=2e-6)
    np.testing.assert_allclose(out["riemann"], geom("riemann", X3), atol=2e-6)


def test_background_connection_does_not_change_curvature():
    # the total connection gamma + Gamma_hat is the Levi-Civita one for any background
    geom = sphere_geometry(1.0)
    g = smooth_metric(geom)
    flat = curvature(levi_civita(g), g).compute(X)["scalar"]
    bg = projective_connection([0.4, -0.3])
    shifted = curvature(levi_civita(g, bg), g).compute(X)["scalar"]
    np.testing.assert_allclose(shifted, flat, rtol=1e-6)


def test_regularised_sphere_metric_converges():
    geom = sphere_geometry(1.0)
    chart = Chart.unit(2)
    g = GeneralizedMetric(iota(RoughTensorField.smooth(TensorField((0, 2), 2, geom.compiled("metric"))), chart))
    bundle = curvature(levi_civita(g), g)
    w = make_kernel(2, 0, cells_per_radius=2, order=6)
    errs = [np.max(np.abs(bundle.scalar.evaluate(X, None, w, e) - 2.0)) for e in (0.04, 0.02)]
    assert errs[1] < errs[0] / 3 and errs[1] < 1e-3


def test_degenerate_metric_raises():
    g = GeneralizedMetric(sigma(TensorField((0, 2), 2, lambda p: np.zeros((len(p), 2, 2)))))
    with pytest.raises(DegenerateMetricError):
        curvature(levi_civita(g), g).compute(X)


def test_metric_valence_checked():
    with pytest.raises(ValueError):
        GeneralizedMetric(sigma(TensorField((1, 1), 2, lambda p: np.zeros((len(p), 2, 2)))))


def test_covariant_derivative_of_metric_vanishes():
    geom = sphere_geometry(1.0)
    gf = sigma(TensorField((0, 2), 2, geom.compiled("metric")))
    g = GeneralizedMetric(gf)
    nab = covariant_derivative(gf, levi_civita(g), step=1e-5)
    assert nab.valence == (0, 3)
    np.testing.assert_allclose(nab.evaluate(X), 0.0, atol=1e-8)


def test_lie_derivative_of_covector_closed_form():
    # L_X w = X^c d_c w_b + w_c d_b X^c
    w = TensorField((0, 1), 2, lambda p: np.stack([p[:, 1] ** 2, np.sin(p[:, 0])], axis=1))
    Xf = TensorField((1, 0), 2, lambda p: np.stack([1 + p[:, 0], p[:, 0] * p[:, 1]], axis=1))
    x, y = X[:, 0], X[:, 1]
    expect = np.stack([
        (1 + x) * 0 + x * y * 2 * y + y**2 * 1 + np.sin(x) * y,
        (1 + x) * np.cos(x) + 0 + np.sin(x) * x,
    ], axis=1)
    np.testing.assert_allclose(lie_derivative(w, Xf, 1e-5)(X), expect, atol=1e-8)


def test_generalised_lie_derivative_of_sigma_is_ordinary():
    v = TensorField((1, 0), 2, lambda p: np.stack([np.sin(p[:, 0]) * p[:, 1] ** 2, np.cos(p[:, 0] + p[:, 1])], axis=1))
    Z = TensorField((1, 0), 2, lambda p: np.stack([1 + p[:, 1], 0.5 * p[:, 0]], axis=1))
    lhs = gen_lie_derivative(sigma(v), Z, 1e-5).evaluate(X, None, make_kernel(2, 0), 0.02)
    np.testing.assert_allclose(lhs, lie_derivative(v, Z, 1e-5)(X), atol=1e-12)


def test_product_and_contraction(chart2):
    v = TensorField((1, 0), 2, lambda p: np.stack([p[:, 0], 1 + 0 * p[:, 0]], axis=1))
    w = TensorField((0, 1), 2, lambda p: np.stack([2 + 0 * p[:, 0], p[:, 1]], axis=1))
    P = tensor_product(sigma(v), sigma(w))
    assert P.valence == (1, 1)
    np.testing.assert_allclose(P.evaluate(X), np.einsum("na,nb->nab", v(X), w(X)))
    C = contract(P, 0, 0)
    assert C.valence == (0, 0)
    np.testing.assert_allclose(C.evaluate(X), 2 * X[:, 0] + X[:, 1])


def test_component_names_and_csv(tmp_path):
    assert component_names((1, 1), 2, "T") == ["T^0_0", "T^0_1", "T^1_0", "T^1_1"]
    path = tmp_path / "t.csv"
    export_csv(path, X, np.ones((3, 2)), (0, 1), "w")
    header = path.read_text().splitlines()[0]
    assert header.startswith("x0,x1,w_0,w_1")
