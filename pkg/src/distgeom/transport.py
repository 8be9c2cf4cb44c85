"""Transport operators, parallel transport along geodesics, and their Lie derivatives.

Index convention: ``upsilon(x, y)`` returns the matrix ``U[a, b]`` of
``Upsilon^a_b(x, y)``, with ``a`` a vector index at ``x`` and ``b`` a
covector index at ``y``. Vectors are carried from ``y`` to ``x`` by
``U @ v``; the reversed operator ``upsilon(y, x)`` carries covectors from
``y`` to ``x`` by ``beta @ upsilon(y, x)``.

For an operator built from a background connection, ``upsilon(x, y)`` is
parallel transport of vectors from ``y`` to ``x`` along the connecting
geodesic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chart import Box, Chart, ChartError, TensorField, gradient


class NoGeodesicError(ChartError):
    """The shooting iteration did not hit the target point."""


class DomainEscapeError(ChartError):
    """A geodesic left the chart while being integrated."""


@dataclass(frozen=True, eq=False)
class BackgroundConnection:
    """Torsion-free connection coefficients ``gamma^a_{bc}(x)`` in chart coordinates.

    ``func`` maps ``(N, n)`` points to ``(N, n, n, n)`` arrays indexed
    ``[a, b, c]``. ``dfunc`` (optional) returns ``(N, n, n, n, n)`` with the
    derivative index first; otherwise central differences are used.
    """

    dim: int
    func: Callable | None = None
    dfunc: Callable | None = None
    label: str = "custom"
    step: float = 1e-5

    @property
    def is_flat(self) -> bool:
        return self.func is None

    def gamma(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.func is None:
            return np.zeros((len(pts),) + (self.dim,) * 3)
        return np.asarray(self.func(pts), dtype=float)

    def dgamma(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.func is None:
            return np.zeros((len(pts),) + (self.dim,) * 4)
        if self.dfunc is not None:
            return np.asarray(self.dfunc(pts), dtype=float)
        f = TensorField((1, 2), self.dim, self.gamma)
        return gradient(f, pts, self.step)

    def check_symmetric(self, pts, tol: float = 1e-12) -> bool:
        g = self.gamma(pts)
        return bool(np.max(np.abs(g - np.swapaxes(g, 2, 3)), initial=0.0) <= tol)

    @classmethod
    def zero(cls, dim: int) -> "BackgroundConnection":
        return cls(dim, None, None, "flat")

    @classmethod
    def constant(cls, coeffs, label: str = "constant") -> "BackgroundConnection":
        c = np.asarray(coeffs, dtype=float)
        dim = c.shape[0]
        return cls(dim, lambda p: np.broadcast_to(c, (len(p),) + c.shape).copy(),
                   lambda p: np.zeros((len(p), dim) + c.shape), label)

    @classmethod
    def from_metric(cls, metric: Callable, dim: int, step: float = 1e-5,
                    label: str = "levi-civita") -> "BackgroundConnection":
        """Christoffel symbols of a closed-form metric (finite differences)."""
        gfield = TensorField((0, 2), dim, metric)

        def func(pts):
            g = gfield(pts)
            dg = gradient(gfield, pts, step)  # [N, c, a, b] = d_c g_ab
            gi = np.linalg.inv(g)
            # low[n, b, c, d] = 1/2 (d_b g_cd + d_c g_bd - d_d g_bc)
            low = 0.5 * (np.einsum("nbcd->nbcd", dg) + np.einsum("ncbd->nbcd", dg)
                         - np.einsum("ndbc->nbcd", dg))
            return np.einsum("nad,nbcd->nabc", gi, low)

        return cls(dim, func, None, label, step)


class TransportOperator:
    """Two-point tensor ``Upsilon^a_b(x, y)``; identity on the diagonal."""

    dim: int
    provenance: str = "custom"
    is_identity: bool = False
    invertibility_radius: float = float("nan")

    def matrices(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """``(N, n)`` x ``(N, n)`` -> ``(N, n, n)``."""
        raise NotImplementedError

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(x.shape, y.shape)
        xb = np.broadcast_to(x, shape).reshape(-1, self.dim)
        yb = np.broadcast_to(y, shape).reshape(-1, self.dim)
        out = self.matrices(xb, yb)
        return out.reshape(shape[:-1] + (self.dim, self.dim))

    def pair(self, x, y):
        """``(Upsilon(x, y), Upsilon(y, x))`` broadcast over ``x`` and ``y``."""
        return self(x, y), self(y, x)

    def describe(self) -> dict:
        return {"provenance": self.provenance, "dim": self.dim}


class IdentityTransport(TransportOperator):
    """``Upsilon^a_b = delta^a_b``: flat transport in chart coordinates."""

    provenance = "identity"
    is_identity = True
    invertibility_radius = float("inf")

    def __init__(self, dim: int):
        self.dim = dim

    def matrices(self, x, y):
        return np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim)).copy()


class CustomTransport(TransportOperator):
    """Transport given by an explicit vectorised function of ``(x, y)``."""

    def __init__(self, dim: int, func: Callable, label: str = "custom"):
        self.dim = dim
        self.func = func
        self.provenance = label

    def matrices(self, x, y):
        return np.asarray(self.func(x, y), dtype=float)


def _rk4(gamma: BackgroundConnection, x0, v0, steps: int, with_transport: bool, box: Box | None):
    """Integrate the geodesic (and optionally the transport matrix) on t in [0, 1]."""
    n = x0.shape[1]
    h = 1.0 / steps

    def rhs(pos, vel, P):
        g = gamma.gamma(pos)
        acc = -np.einsum("nabc,nb,nc->na", g, vel, vel)
        dP = -np.einsum("nabc,nb,ncd->nad", g, vel, P) if P is not None else None
        return vel, acc, dP

    pos, vel = x0.copy(), v0.copy()
    P = np.broadcast_to(np.eye(n), (len(x0), n, n)).copy() if with_transport else None
    for _ in range(steps):
        k1 = rhs(pos, vel, P)
        k2 = rhs(pos + 0.5 * h * k1[0], vel + 0.5 * h * k1[1],
                 None if P is None else P + 0.5 * h * k1[2])
        k3 = rhs(pos + 0.5 * h * k2[0], vel + 0.5 * h * k2[1],
                 None if P is None else P + 0.5 * h * k2[2])
        k4 = rhs(pos + h * k3[0], vel + h * k3[1], None if P is None else P + h * k3[2])
        pos = pos + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        vel = vel + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if P is not None:
            P = P + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if box is not None:
            out = ~box.contains(pos)
            if np.any(out):
                raise DomainEscapeError(f"geodesic left the chart near {tuple(pos[np.argmax(out)])}")
    return pos, P


def _steps_for(dist: float, steps_per_unit: int, refine: int, min_steps: int = 8) -> int:
    return max(min_steps, int(np.ceil(steps_per_unit * dist))) * 2**refine


def parallel_transport_batch(gamma: BackgroundConnection, x, y, *, steps_per_unit: int = 64,
                             refine: int = 0, tol: float = 1e-10, max_iter: int = 25,
                             chart: Chart | None = None) -> np.ndarray:
    """Parallel transport of vectors from ``x[i]`` to ``y[i]`` along the geodesic.

    Shooting: Newton iteration on the initial velocity (initial guess
    ``y - x``, finite-difference Jacobian) until the endpoint misses ``y``
    by at most ``tol``; then the transport equation is integrated along
    the converged geodesic with classical RK4. Returns ``(N, n, n)``
    matrices ``P`` with ``P @ v`` the transported vector.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    N, n = x.shape
    out = np.broadcast_to(np.eye(n), (N, n, n)).copy()
    move = np.any(x != y, axis=1)
    if gamma.is_flat or not move.any():
        return out
    xs, ys = x[move], y[move]
    box = chart.box if chart is not None else None
    steps = _steps_for(float(np.max(np.linalg.norm(ys - xs, axis=1))), steps_per_unit, refine)
    v = ys - xs
    active = np.ones(len(xs), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        end, _ = _rk4(gamma, xs[idx], v[idx], steps, False, box)
        res = end - ys[idx]
        done = np.max(np.abs(res), axis=1) <= tol
        active[idx[done]] = False
        if not active.any():
            break
        idx, res, end = idx[~done], res[~done], end[~done]
        J = np.empty((len(idx), n, n))
        for k in range(n):
            dv = 1e-7 * np.maximum(1.0, np.abs(v[idx, k]))
            vk = v[idx].copy()
            vk[:, k] += dv
            endk, _ = _rk4(gamma, xs[idx], vk, steps, False, box)
            J[:, :, k] = (endk - end) / dv[:, None]
        v[idx] -= np.linalg.solve(J, res[..., None])[..., 0]
    else:
        raise NoGeodesicError(f"shooting did not converge for {int(active.sum())} point pairs")
    _, P = _rk4(gamma, xs, v, steps, True, box)
    out[move] = P
    return out


def parallel_transport(gamma: BackgroundConnection, x, y, **kw) -> np.ndarray:
    """Transport matrix ``Upsilon_*(x, y): T_x -> T_y`` for a single pair of points."""
    return parallel_transport_batch(gamma, np.atleast_2d(x), np.atleast_2d(y), **kw)[0]


class ParallelTransport(TransportOperator):
    """Transport operator induced by parallel transport of a background connection."""

    def __init__(self, gamma: BackgroundConnection, chart: Chart | None = None,
                 steps_per_unit: int = 64, refine: int = 0):
        self.gamma = gamma
        self.dim = gamma.dim
        self.chart = chart
        self.steps_per_unit = steps_per_unit
        self.refine = refine
        self.provenance = f"parallel_transport({gamma.label})"
        self.is_identity = gamma.is_flat
        self.invertibility_radius = float("nan")

    def matrices(self, x, y):
        # vectors at y carried to x
        return parallel_transport_batch(self.gamma, y, x, steps_per_unit=self.steps_per_unit,
                                        refine=self.refine, chart=self.chart)

    def pair(self, x, y):
        fwd = self(x, y)
        if self.is_identity:
            return fwd, fwd.copy()
        # same geodesic walked backwards
        return fwd, np.linalg.inv(fwd)


def projective_connection(k, label: str | None = None) -> BackgroundConnection:
    """``gamma^a_{bc} = delta^a_b k_c + delta^a_c k_b`` for a constant covector ``k``.

    Its geodesics are reparametrized straight lines, which makes parallel
    transport available in closed form (:class:`ProjectiveTransport`).
    """
    k = np.asarray(k, dtype=float)
    n = len(k)
    I = np.eye(n)
    c = np.einsum("ab,c->abc", I, k) + np.einsum("ac,b->abc", I, k)
    return BackgroundConnection.constant(c, label or f"projective(k={tuple(k.tolist())})")


class ProjectiveTransport(TransportOperator):
    """Closed-form parallel transport of :func:`projective_connection`.

    Along the segment from ``y`` to ``x`` with ``D = x - y`` the transport
    equation has the constant matrix ``(k.D) I + D k^T``, so
    ``Upsilon(x, y) = exp(-s) (I + (exp(-s) - 1)/s  D k^T)`` with ``s = k.D``.
    """

    def __init__(self, k):
        self.k = np.asarray(k, dtype=float)
        self.dim = len(self.k)
        self.connection = projective_connection(self.k)
        self.provenance = f"parallel_transport({self.connection.label}, closed form)"
        self.is_identity = not np.any(self.k)

    def _closed_form(self, D, sign):
        s = sign * (D @ self.k)
        small = np.abs(s) < 1e-8
        ss = np.where(small, 1.0, s)
        f = np.where(small, -1.0 + 0.5 * s, np.expm1(-s) / ss)
        out = ((sign * f)[..., None] * D)[..., None] * self.k
        out += np.eye(self.dim)
        out *= np.exp(-s)[..., None, None]
        return out

    def matrices(self, x, y):
        return self._closed_form(x - y, 1.0)

    def pair(self, x, y):
        # the reverse map only flips the sign of D = x - y
        D = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return self._closed_form(D, 1.0), self._closed_form(D, -1.0)


def estimate_invertibility_radius(upsilon: TransportOperator, points, radii, directions: int = 8,
                                  cond_max: float = 1e8) -> float:
    """Largest tested separation below which every sampled ``Upsilon(x, y)`` is well conditioned."""
    pts = np.atleast_2d(points)
    n = pts.shape[1]
    rng_dirs = np.array([np.cos(np.linspace(0, 2 * np.pi, directions, endpoint=False) + k)
                         for k in range(n)]).T
    rng_dirs /= np.linalg.norm(rng_dirs, axis=1, keepdims=True)
    good = 0.0
    for r in sorted(radii):
        ys = (pts[:, None, :] + r * rng_dirs[None, :, :]).reshape(-1, n)
        xs = np.repeat(pts, directions, axis=0)
        try:
            M = upsilon(xs, ys)
        except ChartError:
            break
        if np.any(~np.isfinite(M)) or np.max(np.linalg.cond(M)) > cond_max:
            break
        good = r
    return good


# ---------------------------------------------------------------------------
# perturbations and Lie derivatives


class TransportPerturbation(TransportOperator):
    """Two-point direction vanishing on the diagonal (an element of the linear space)."""

    def __init__(self, dim: int, func: Callable, label: str = "perturbation", bound: float | None = None):
        self.dim = dim
        self.func = func
        self.provenance = label
        self.bound = bound

    def matrices(self, x, y):
        return np.asarray(self.func(x, y), dtype=float)


def linear_perturbation(B, label: str = "linear") -> TransportPerturbation:
    """``sum_c (y - x)^c B[c]``: zero on the diagonal, bounded near it."""
    B = np.asarray(B, dtype=float)
    dim = B.shape[0]
    return TransportPerturbation(dim, lambda x, y: np.einsum("nc,cab->nab", y - x, B), label,
                                 bound=float(np.abs(B).sum()))


def default_transport_directions(dim: int):
    dirs = []
    for k in range(3):
        B = np.zeros((dim, dim, dim))
        B[k % dim, (k + 1) % dim, k % dim] = 1.0
        B[(k + 1) % dim, k % dim, (k + 1) % dim] = -0.5
        dirs.append(linear_perturbation(B, f"linear[{k}]"))
    return dirs


class TransportLieDerivative(TransportOperator):
    """Lie derivative of a transport operator in the first, second or both slots.

    First slot (``x`` moves along ``X``, ``Upsilon`` seen as a vector at x)::

        X^c(x) d/dx^c U^a_b - U^c_b dX^a/dx^c (x)

    Second slot (``y`` moves along ``Y``, a covector at y)::

        Y^c(y) d/dy^c U^a_b + U^a_c dY^c/dy^b (y)

    ``slot="both"`` is the sum with ``Y = X``.
    """

    def __init__(self, upsilon: TransportOperator, X: TensorField, slot: str = "both",
                 Y: TensorField | None = None, step: float = 1e-5, field_step: float | None = None):
        if slot not in ("first", "second", "both"):
            raise ValueError(f"unknown slot {slot!r}")
        self.upsilon = upsilon
        self.X = X
        self.Y = X if Y is None else Y
        self.slot = slot
        self.step = step
        self.field_step = field_step
        self.dim = upsilon.dim
        self.provenance = f"lie_{slot}({upsilon.provenance})"

    def _d_upsilon(self, x, y, wrt: int, V: np.ndarray):
        if self.upsilon.is_identity:
            return 0.0
        h = self.step
        acc = 0.0
        for c in range(self.dim):
            e = np.zeros(self.dim)
            e[c] = h
            if wrt == 0:
                d = (self.upsilon(x + e, y) - self.upsilon(x - e, y)) / (2 * h)
            else:
                d = (self.upsilon(x, y + e) - self.upsilon(x, y - e)) / (2 * h)
            acc = acc + V[:, c, None, None] * d
        return acc

    def matrices(self, x, y):
        U = self.upsilon(x, y)
        out = np.zeros_like(U)
        if self.slot in ("first", "both"):
            Xx = self.X(x)
            dX = gradient(self.X, x, self.field_step)  # [N, c, a] = d_c X^a
            out += self._d_upsilon(x, y, 0, Xx) - np.einsum("ncb,nca->nab", U, dX)
        if self.slot in ("second", "both"):
            Yy = self.Y(y)
            dY = gradient(self.Y, y, self.field_step)  # [N, b, c] = d_b Y^c
            out += self._d_upsilon(x, y, 1, Yy) + np.einsum("nac,nbc->nab", U, dY)
        return out


def transport_lie_derivative(upsilon: TransportOperator, X: TensorField, slot: str = "both",
                             Y: TensorField | None = None, **kw) -> TransportLieDerivative:
    return TransportLieDerivative(upsilon, X, slot, Y, **kw)


# ---------------------------------------------------------------------------
# admissibility


@dataclass
class AdmissibilityReport:
    eps_values: list
    max_derivatives: dict  # order -> list of per-eps maxima
    slopes: dict
    diagonal_max_error: float
    diagonal_exact: bool
    bounded: bool
    slope_tolerance: float = 0.2
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "eps_values": list(map(float, self.eps_values)),
            "max_derivatives": {str(k): list(map(float, v)) for k, v in self.max_derivatives.items()},
            "slopes": {str(k): float(v) for k, v in self.slopes.items()},
            "diagonal_max_error": float(self.diagonal_max_error),
            "diagonal_exact": bool(self.diagonal_exact),
            "bounded": bool(self.bounded),
            "slope_tolerance": self.slope_tolerance,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _two_point_derivatives(U: TransportOperator, x, y, order: int, h: float):
    """Max Frobenius norms of all coordinate derivatives up to ``order`` in ``(x, y)``."""
    n = U.dim
    def F(z):
        return U(z[:, :n], z[:, n:])
    z = np.concatenate([x, y], axis=1)
    m = 2 * n
    E = np.eye(m) * h
    res = {0: float(np.max(np.linalg.norm(F(z), axis=(1, 2))))}
    if order >= 1:
        d1 = [(F(z + E[i]) - F(z - E[i])) / (2 * h) for i in range(m)]
        res[1] = float(max(np.max(np.linalg.norm(d, axis=(1, 2))) for d in d1))
    if order >= 2:
        best = 0.0
        f0 = F(z)
        for i in range(m):
            for j in range(i, m):
                if i == j:
                    d = (F(z + E[i]) - 2 * f0 + F(z - E[i])) / h**2
                else:
                    d = (F(z + E[i] + E[j]) - F(z + E[i] - E[j]) - F(z - E[i] + E[j])
                         + F(z - E[i] - E[j])) / (4 * h * h)
                best = max(best, float(np.max(np.linalg.norm(d, axis=(1, 2)))))
        res[2] = best
    return res


def check_admissibility(net, K: Box, eps_values: Sequence[float], *, order: int = 2,
                        near: float | None = None, per_axis: int = 3, step: float | None = None,
                        slope_tolerance: float = 0.2, floor: float = 1e-9) -> AdmissibilityReport:
    """Sample derivatives of ``Upsilon_eps`` near the diagonal over ``K``.

    ``net`` is a callable ``eps -> TransportOperator`` (or a fixed
    operator, treated as a constant net). The net counts as bounded when
    no derivative order grows as eps decreases: the log-log slope of its
    sampled maximum against eps must be at least ``-slope_tolerance``.
    """
    if isinstance(net, TransportOperator):
        fixed = net
        net = lambda eps: fixed  # noqa: E731
    eps_values = [float(e) for e in eps_values]
    pts = K.grid(per_axis)
    n = K.dim
    near = 0.05 * K.diameter if near is None else near
    h = step or 1e-3 * K.diameter
    offs = [np.zeros(n)] + [near * np.eye(n)[i] for i in range(n)] + [near / 2 * np.ones(n) / np.sqrt(n)]
    xs = np.repeat(pts, len(offs), axis=0)
    ys = xs + np.tile(np.array(offs), (len(pts), 1))
    maxima = {k: [] for k in range(order + 1)}
    diag_err = 0.0
    for eps in eps_values:
        U = net(eps)
        diag = U(pts, pts)
        diag_err = max(diag_err, float(np.max(np.abs(diag - np.eye(n)))))
        for k, v in _two_point_derivatives(U, xs, ys, order, h).items():
            maxima[k].append(v)
    slopes = {}
    bounded = True
    logs = np.log(eps_values)
    for k, vals in maxima.items():
        vals = np.asarray(vals)
        if np.all(vals <= floor):
            slopes[k] = 0.0
            continue
        s = float(np.polyfit(logs, np.log(np.maximum(vals, floor)), 1)[0])
        slopes[k] = s
        if s < -slope_tolerance:
            bounded = False
    return AdmissibilityReport(eps_values, maxima, slopes, diag_err, diag_err == 0.0,
                               bounded and diag_err == 0.0, slope_tolerance)
