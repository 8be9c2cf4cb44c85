"""Closed-form reference geometry built with sympy.

These oracles are independent of the finite-difference machinery: the
Christoffel symbols and curvature are differentiated symbolically and
then compiled to numpy. They back the compatibility experiments and the
curvature tests.
"""
from __future__ import annotations

import functools
import math

import numpy as np
import sympy as sp


class SymbolicGeometry:
    """Metric, connection and curvature of a closed-form metric ``g(x)``.

    Same index conventions as :mod:`distgeom.calculus`.
    """

    def __init__(self, metric: sp.Matrix, coords, label: str = "g"):
        self.coords = tuple(coords)
        self.n = len(self.coords)
        self.label = label
        g = sp.Matrix(metric)
        self.g = g
        gi = sp.simplify(g.inv())
        n, x = self.n, self.coords
        Gam = [[[sp.simplify(sum(gi[a, d] * (sp.diff(g[c, d], x[b]) + sp.diff(g[b, d], x[c])
                                             - sp.diff(g[b, c], x[d])) for d in range(n)) / 2)
                 for c in range(n)] for b in range(n)] for a in range(n)]
        R = [[[[sp.diff(Gam[a][d][b], x[c]) - sp.diff(Gam[a][c][b], x[d])
                + sum(Gam[a][c][e] * Gam[e][d][b] - Gam[a][d][e] * Gam[e][c][b] for e in range(n))
                for d in range(n)] for c in range(n)] for b in range(n)] for a in range(n)]
        ric = [[sp.simplify(sum(R[a][b][a][d] for a in range(n))) for d in range(n)] for b in range(n)]
        scal = sp.simplify(sum(gi[b, d] * ric[b][d] for b in range(n) for d in range(n)))
        ein = [[sp.simplify(ric[a][b] - g[a, b] * scal / 2) for b in range(n)] for a in range(n)]
        self.exprs = {"metric": g.tolist(), "inverse": gi.tolist(), "christoffel": Gam,
                      "riemann": R, "ricci": ric, "scalar": scal, "einstein": ein,
                      "volume": sp.sqrt(sp.Abs(g.det()))}

    @functools.lru_cache(maxsize=None)
    def compiled(self, name: str):
        expr = self.exprs[name]
        f = sp.lambdify(self.coords, expr, "numpy")
        shape = np.shape(np.array(expr, dtype=object))

        def func(pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            cols = [pts[:, i] for i in range(self.n)]
            out = f(*cols)
            return _stack(out, shape, len(pts))

        return func

    def __call__(self, name: str, pts) -> np.ndarray:
        return self.compiled(name)(pts)


def _stack(out, shape, N):
    """Broadcast a nested list of scalars/arrays from lambdify to ``(N,) + shape``."""
    arr = np.empty(shape + (N,))

    def leaves(v, depth):
        if depth == 0:
            yield v
        else:
            for u in v:
                yield from leaves(u, depth - 1)

    for i, v in enumerate(leaves(out, len(shape))):
        arr.reshape(-1, N)[i] = np.broadcast_to(np.asarray(v, dtype=float), (N,))
    return np.moveaxis(arr, -1, 0)


def conformal_geometry(phi_expr, n: int = 3) -> SymbolicGeometry:
    x = sp.symbols(f"x0:{n}", real=True)
    phi = phi_expr(*x) if callable(phi_expr) else phi_expr
    return SymbolicGeometry(sp.exp(2 * phi) * sp.eye(n), x, "conformal")


def sphere_geometry(a: float = 1.0) -> SymbolicGeometry:
    """Round sphere of radius ``a`` in stereographic coordinates."""
    x = sp.symbols("x0:2", real=True)
    a = sp.nsimplify(a)
    f = (1 + (x[0] ** 2 + x[1] ** 2) / (4 * a**2)) ** -2
    return SymbolicGeometry(f * sp.eye(2), x, f"sphere(a={a})")


def disguised_flat_geometry(coeffs=(0.3, 0.2, 0.1), n: int = 3) -> SymbolicGeometry:
    """Euclidean metric pulled back by ``mu = (x0 + c0 x1^2, x1 + c1 x2^2, x2 + c2 x0^2)``."""
    x = sp.symbols(f"x0:{n}", real=True)
    c = [sp.nsimplify(v) for v in coeffs]
    mu = sp.Matrix([x[i] + c[i] * x[(i + 1) % n] ** 2 for i in range(n)])
    J = mu.jacobian(x)
    return SymbolicGeometry(sp.simplify(J.T * J), x, "disguised_flat")


def skewed_flat_geometry(L) -> SymbolicGeometry:
    """Euclidean metric in linear coordinates ``y = L x``: ``g = L^T L``."""
    L = sp.Matrix(L)
    n = L.shape[0]
    x = sp.symbols(f"x0:{n}", real=True)
    return SymbolicGeometry(L.T * L, x, "skewed_flat")


# ---------------------------------------------------------------------------
# cone


def cone_m(pts) -> np.ndarray:
    """The matrix ``m_ab = [[cos 2phi, sin 2phi], [sin 2phi, -cos 2phi]]`` (undefined at 0)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x, y = pts[:, 0], pts[:, 1]
    r2 = x * x + y * y
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (x * x - y * y) / r2
        s = 2 * x * y / r2
    out = np.empty((len(pts), 2, 2))
    out[:, 0, 0] = c
    out[:, 1, 1] = -c
    out[:, 0, 1] = out[:, 1, 0] = s
    return out


def cone_metric(A: float):
    """Closed-form cone metric ``1/2 (1+A^2) delta + 1/2 (1-A^2) m``."""
    a, b = 0.5 * (1 + A * A), 0.5 * (1 - A * A)

    def func(pts):
        return a * np.eye(2)[None] + b * cone_m(pts)

    return func


def cone_total_curvature(A: float) -> float:
    """``4 pi (1 - A)``.

    Provenance: in polar coordinates the metric is ``dr^2 + A^2 r^2 dphi^2``.
    Gauss-Bonnet on a disc of radius ``R`` gives
    ``int K dA + oint k_g ds = 2 pi``; the boundary circle has geodesic
    curvature ``1/R`` and length ``2 pi A R``, so the apex carries
    ``int K dA = 2 pi (1 - A)``. The scalar curvature is ``R = 2K``.
    """
    return 4.0 * math.pi * (1.0 - A)


def cone_boundary_check(A: float, R: float = 0.3, nodes: int = 64) -> float:
    """Numerical Gauss-Bonnet: ``2 (2 pi - oint k_g ds)`` on the circle ``r = R``.

    The geodesic curvature of the coordinate circle is computed from the
    closed-form metric in Cartesian coordinates, so this is an independent
    check of :func:`cone_total_curvature`.
    """
    t = (np.arange(nodes) + 0.5) * 2 * np.pi / nodes
    h = 1e-6
    g = cone_metric(A)
    pts = R * np.stack([np.cos(t), np.sin(t)], axis=1)
    vel = R * np.stack([-np.sin(t), np.cos(t)], axis=1)
    acc = -R * np.stack([np.cos(t), np.sin(t)], axis=1)
    G = g(pts)
    dG = np.stack([(g(pts + h * e) - g(pts - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    Gi = np.linalg.inv(G)
    low = 0.5 * (dG + np.einsum("ncbd->nbcd", dG) - np.einsum("ndbc->nbcd", dG))
    Gam = np.einsum("nad,nbcd->nabc", Gi, low)
    cov = acc + np.einsum("nabc,nb,nc->na", Gam, vel, vel)
    speed = np.sqrt(np.einsum("na,nab,nb->n", vel, G, vel))
    # unit normal pointing inward: rotate the tangent by the metric area form
    det = np.linalg.det(G)
    normal = np.einsum("nab,nb->na", Gi, np.stack([-vel[:, 1], vel[:, 0]], axis=1)) * np.sqrt(det)[:, None]
    normal = normal / np.sqrt(np.einsum("na,nab,nb->n", normal, G, normal))[:, None]
    kg = np.einsum("na,nab,nb->n", cov, G, normal) / speed**2
    ds = speed * 2 * np.pi / nodes
    return float(2 * (2 * np.pi - np.sum(kg * ds)))
