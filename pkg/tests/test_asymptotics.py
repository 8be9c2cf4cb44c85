import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distgeom.asymptotics import (
    NOISE_FLOOR,
    PairingRule,
    Probe,
    associate,
    association_report,
    build_probes,
    bump_density,
    convergence_order,
    decay_profile,
    density_lie_derivative,
    dumps,
    fit_slope,
    pairing,
    pairing_many,
    plateau_density,
    richardson,
    sample_points,
    scaling_exponent,
    smooth_step,
    verdict_for,
)
from distgeom.chart import Box, Chart, TensorField, box_rule, integrate
from distgeom.embedding import RoughTensorField, iota, sigma
from distgeom.experiments import exact_pairing
from distgeom.kernels import EpsNet, make_kernel
from distgeom.transport import IdentityTransport, ProjectiveTransport

EPS = 0.05 * 0.5 ** np.arange(6)


@settings(max_examples=40)
@given(st.floats(-4, 4), st.floats(0.1, 10))
def test_fit_slope_recovers_power_law(p, C):
    fit = fit_slope(EPS, C * EPS**p)
    assert fit.slope == pytest.approx(p, abs=1e-9)
    assert fit.residual < 1e-9


def test_fit_slope_ignores_noise_floor():
    vals = np.array([1e-3, 2.5e-4, 1e-20, 0.0, 1e-13, 1e-14])
    fit = fit_slope(EPS, vals)
    assert fit.used == [True, True, False, False, False, False]
    assert fit.slope == pytest.approx(2.0)
    assert math.isinf(fit_slope(EPS, np.zeros(6)).slope)


@settings(max_examples=40)
@given(st.floats(-2, 2), st.floats(-3, 3), st.sampled_from([1.0, 2.0, 3.0]))
def test_richardson_exact_for_single_power(L, C, p):
    vals = L + C * EPS**p
    lim, order = richardson(EPS, vals)
    assert lim == pytest.approx(L, abs=1e-10)
    if C != 0 and abs(C) > 1e-3:
        assert order == pytest.approx(p, abs=1e-6)


def test_convergence_order_rejects_noise(rng):
    assert convergence_order(EPS, rng.normal(size=6)) is None
    assert convergence_order(EPS[:3], EPS[:3]) is None


def test_verdicts():
    assert verdict_for(-2.05, 0.01, "moderate", 2) == "moderate(2)"
    assert verdict_for(-2.5, 0.01, "moderate", 2) == "not_moderate"
    assert verdict_for(0.01, 0.01, "moderate", 0) == "moderate(0)"
    assert verdict_for(2.9, 0.01, "negligible", 3) == "negligible_to_order(3)"
    assert verdict_for(2.7, 0.01, "negligible", 3) == "not_negligible"
    assert verdict_for(2.0, 0.9, "negligible", 1) == "inconclusive"
    with pytest.raises(ValueError):
        verdict_for(0, 0, "bogus", 0)


def test_smooth_step_and_plateau():
    t = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    s = smooth_step(t)
    assert s[0] == 0 and s[1] == 0 and s[3] == 1 and s[4] == 1 and 0 < s[2] < 1
    psi = plateau_density((0.0, 0.0), 0.1, 0.3, amplitude=2.0)
    np.testing.assert_allclose(psi(np.array([[0.05, 0.0], [0.0, 0.35]])), [2.0, 0.0])


def test_bump_density_normalisation():
    psi = bump_density((0.1, 0.0), 0.2, amplitude=0.7)
    assert float(psi(np.array([0.1, 0.0]))) == pytest.approx(0.7)
    assert psi.label == "bump(c=(0.1,0),R=0.2,A=0.7)"


@pytest.mark.parametrize("valence", [(0, 0), (1, 0), (0, 1), (1, 1)])
def test_density_lie_derivative_integrates_to_zero(valence):
    # for a scalar density (valence (0,0)) the Lie derivative is a divergence
    Z = TensorField((1, 0), 2, lambda p: np.stack([1 + p[:, 1], np.sin(p[:, 0])], axis=1))
    coeff = None if valence == (0, 0) else (np.array([1.0, 0.5]) if sum(valence) == 1 else np.eye(2))
    psi = bump_density((0.0, 0.05), 0.25, coeff=coeff, valence=valence)
    L = density_lie_derivative(psi, Z)
    assert L.valence == psi.valence
    if valence == (0, 0):
        nodes, weights = box_rule(psi.support, 12, 8)
        assert float(np.sum(weights * L(nodes))) == pytest.approx(0.0, abs=1e-9)


def test_density_lie_derivative_transpose_identity():
    # <L_Z f, Psi> = -<f, L_Z Psi> for a smooth scalar f and scalar density Psi
    Z = TensorField((1, 0), 2, lambda p: np.stack([1 + p[:, 1], 0.5 * p[:, 0]], axis=1))
    f = lambda p: np.sin(p[:, 0]) + p[:, 1] ** 2  # noqa: E731
    df = lambda p: np.stack([np.cos(p[:, 0]), 2 * p[:, 1]], axis=1)  # noqa: E731
    psi = bump_density((0.05, 0.0), 0.3)
    L = density_lie_derivative(psi, Z)
    box = psi.support
    lhs = integrate(lambda p: np.sum(Z(p) * df(p), axis=1) * psi(p), box, 12, 8)
    rhs = -integrate(lambda p: f(p) * L(p), box, 12, 8)
    assert lhs == pytest.approx(rhs, rel=1e-7)


def test_pairing_rule_nodes():
    rule = PairingRule(order=4, cells=2, planes=((0, 0.1),))
    nodes, weights = rule.nodes(Box.cube(np.zeros(2), 0.5), [], 0.01)
    assert np.sum(weights) == pytest.approx(1.0)
    # the kink plane is a cell boundary: no node sits on it, nodes exist on both sides
    assert np.any(nodes[:, 0] < 0.1) and np.any(nodes[:, 0] > 0.1)
    graded, gw = PairingRule(order=4, reach=1.5).nodes(Box.cube(np.zeros(2), 0.5), [(0.0, 0.0)], 0.01)
    assert np.sum(gw) == pytest.approx(1.0)
    assert np.min(np.linalg.norm(graded, axis=1)) < 0.01


def test_pairing_many_matches_single(chart2):
    f = RoughTensorField((0, 0), 2, lambda p: np.abs(p[:, 0]) * np.cos(p[:, 1]))
    F = iota(f, chart2)
    w = make_kernel(2, 0, cells_per_radius=2, order=6)
    psis = [bump_density((0.0, 0.0), 0.3), plateau_density((0.1, 0.0), 0.05, 0.2)]
    # the shared node set covers the union of supports; both converge to the same values
    rule = PairingRule(order=8, cells=16, planes=((0, 0.0),))
    many = pairing_many(F, psis, None, w, 0.02, rule)
    single = [pairing(F, p, None, w, 0.02, rule) for p in psis]
    np.testing.assert_allclose(many, single, rtol=1e-8)


def test_association_report_verdicts():
    vals = 1.0 + 0.3 * EPS**2
    rep = association_report("x", "c", EPS, vals, target=1.0, tol_assoc=1e-6)
    assert rep.verdict == "associated" and rep.passed
    assert rep.slope == pytest.approx(2.0, abs=1e-6)
    bad = association_report("x", "c", EPS, vals + 0.1, target=1.0, tol_assoc=1e-3)
    assert bad.verdict == "not_associated"
    assert association_report("x", "c", EPS, vals).verdict == "inconclusive"


def test_associate_across_choices(chart2):
    f = RoughTensorField((0, 0), 2, lambda p: np.abs(p[:, 0]) + p[:, 1])
    psi = bump_density((0.05, 0.0), 0.3)
    target = exact_pairing(f, psi, PairingRule(order=10, cells=8, planes=((0, 0.0),)))
    choices = [("id/q0", IdentityTransport(2), make_kernel(2, 0, cells_per_radius=2, order=6)),
               ("id/q2", IdentityTransport(2), make_kernel(2, 2, cells_per_radius=2, order=6))]
    res = associate(iota(f, chart2), psi, EpsNet(0.04, 0.5, 4), choices, target, 1e-4,
                    PairingRule(order=8, cells=8, planes=((0, 0.0),)))
    assert res.passed
    assert len(res.spread) == 4
    json.loads(res.to_json())
    assert res.to_csv().splitlines()[0] == "choice,eps,pairing"


def test_scaling_of_delta_and_sigma(chart2):
    K = Box.cube(np.zeros(2), 0.1)
    w = make_kernel(2, 0, cells_per_radius=2, order=6)
    net = EpsNet(0.04, 0.5, 4)
    D = iota(RoughTensorField.delta((0.0, 0.0), 1.0), chart2)
    rep = scaling_exponent(D, K, net, kernel=w)
    assert rep.fitted_slope == pytest.approx(-2.0, abs=1e-6)
    f = TensorField((0, 0), 2, lambda p: np.sin(p[:, 0] + p[:, 1]))
    neg = scaling_exponent(iota(RoughTensorField.smooth(f), chart2), K, net, kernel=w, reference=sigma(f),
                           mode="negligible", order=1)
    assert neg.verdict == "negligible_to_order(1)"
    assert neg.fitted_slope == pytest.approx(2.0, abs=0.05)


def test_sample_points_follow_foci():
    K = Box.cube(np.zeros(2), 0.1)
    pts = sample_points(K, [(0.02, 0.0), (5.0, 5.0)], 0.001, per_axis=3, cluster=3)
    assert len(pts) == 9 + 9
    assert np.sum(np.linalg.norm(pts - [0.02, 0.0], axis=1) <= 0.0015) == 9


def test_probes_corpus():
    X = TensorField((1, 0), 2, lambda p: p)
    probes = build_probes(lie_fields=[X], l_max=2)
    labels = [p.label for p in probes]
    assert labels[0] == "T" and any("L[" in s for s in labels)
    assert all(isinstance(p, Probe) for p in probes)


def test_decay_profile_of_synthetic_field():
    # T_eps(x) = eps^-2 / (1 + |x|^2/eps^2)^2: inner alpha -2, outer (2, -4)
    from distgeom.embedding import GeneralizedField

    class Synthetic(GeneralizedField):
        valence, dim, chart, label = (0, 0), 2, None, "synthetic"

        def _evaluate(self, x, upsilon, kernel, eps):
            r2 = np.sum(x * x, axis=1)
            return eps**-2 / (1 + r2 / eps**2) ** 2

    prof = decay_profile(Synthetic(), (0.0, 0.0), np.geomspace(1e-4, 0.25, 21), EpsNet(0.05, 0.5, 5))
    assert prof.inner.alpha == pytest.approx(-2.0, abs=0.05)
    assert prof.outer.alpha == pytest.approx(2.0, abs=0.1)
    assert prof.outer.beta == pytest.approx(-4.0, abs=0.1)


def test_dumps_is_canonical():
    text = dumps({"b": np.float64(1.5), "a": [np.int64(2), float("inf")]})
    assert text == dumps(json.loads(text))
    assert text.index('"a"') < text.index('"b"')
    assert NOISE_FLOOR == 1e-12
