"""Chart domains, tensor fields, finite differences and quadrature.

Everything here works on batches of chart points stored as ``(N, n)``
arrays. A tensor field of valence ``(r, s)`` maps such a batch to an array
of shape ``(N,) + (n,) * (r + s)`` with the upper indices first.

Densities are always integrated against the coordinate volume ``dx`` of
the single chart; the chart is taken to be positively oriented, so
``n``-forms and scalar densities coincide.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ArrayFunc = Callable[[np.ndarray], np.ndarray]

KINDS = ("closed_form", "regularized", "sampled")


class ChartError(Exception):
    """Base class for chart-level numerical errors."""


class BoundaryProximityError(ChartError):
    """A query point sits too close to the domain boundary or a singular point."""


class IntegrationPoisonedError(ChartError):
    """An integrand returned a non-finite value at a quadrature node."""

    def __init__(self, point):
        self.point = tuple(float(v) for v in np.atleast_1d(point))
        super().__init__(f"non-finite integrand value at {self.point}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[a1, b1] x ... x [an, bn]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi):
            raise ValueError("lower and upper corners differ in dimension")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} -> {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, center, half_width: float) -> "Box":
        c = np.asarray(center, dtype=float)
        return cls(tuple(c - half_width), tuple(c + half_width))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((p >= self.lo + margin) & (p <= self.hi - margin), axis=-1)

    def shrink(self, margin: float) -> "Box":
        return Box(tuple(self.lo + margin), tuple(self.hi - margin))

    def grid(self, per_axis: int) -> np.ndarray:
        """Uniform grid including the corners, shape ``(per_axis**n, n)``."""
        axes = [np.linspace(a, b, per_axis) for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Chart:
    """A single coordinate chart: a box plus isolated singular points."""

    box: Box
    excluded_points: tuple = ()

    def __post_init__(self):
        pts = tuple(tuple(float(v) for v in p) for p in self.excluded_points)
        if not 2 <= self.box.dim <= 4:
            raise ValueError("charts are supported in dimensions 2, 3 and 4")
        for p in pts:
            if len(p) != self.box.dim or not self.box.contains(p)[0]:
                raise ValueError(f"excluded point {p} is not inside the domain")
        object.__setattr__(self, "excluded_points", pts)

    @classmethod
    def unit(cls, dim: int, half_width: float = 0.5, excluded=()) -> "Chart":
        return cls(Box.cube(np.zeros(dim), half_width), tuple(excluded))

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def diameter(self) -> float:
        return self.box.diameter

    @property
    def excluded_array(self) -> np.ndarray:
        return np.array(self.excluded_points, dtype=float).reshape(-1, self.dim)

    def check_clearance(self, points, radius: float, *, excluded: bool = False, what: str = "query"):
        """Raise if a point is within ``radius`` of the boundary (box metric).

        With ``excluded=True`` the Euclidean distance to every excluded
        point must exceed ``radius`` as well.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        bad = ~self.box.contains(p, margin=radius)
        if np.any(bad):
            q = p[np.argmax(bad)]
            raise BoundaryProximityError(
                f"{what} point {tuple(q)} is within {radius:.3g} of the chart boundary"
            )
        if excluded and self.excluded_points:
            ex = self.excluded_array
            d = np.linalg.norm(p[:, None, :] - ex[None, :, :], axis=-1)
            if np.any(d <= radius):
                i, j = np.unravel_index(np.argmin(d), d.shape)
                raise BoundaryProximityError(
                    f"{what} point {tuple(p[i])} is within {radius:.3g} of excluded point "
                    f"{self.excluded_points[j]}"
                )


@dataclass(frozen=True, eq=False)
class TensorField:
    """A deterministic evaluator for a type ``(r, s)`` tensor field.

    ``func`` receives an ``(N, n)`` array of chart points and returns the
    component array of shape ``(N,) + (n,) * (r + s)``. Calling the field
    with a single point returns the bare component array.
    """

    valence: tuple
    dim: int
    func: ArrayFunc
    kind: str = "closed_form"
    eps: float | None = None
    chart: Chart | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown smoothness class {self.kind!r}")
        if self.kind == "regularized" and not self.eps:
            raise ValueError("regularized fields need their eps")
        object.__setattr__(self, "valence", tuple(int(v) for v in self.valence))

    @property
    def rank(self) -> int:
        return sum(self.valence)

    @property
    def shape(self) -> tuple:
        return (self.dim,) * self.rank

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x.reshape(-1, self.dim)
        out = np.asarray(self.func(pts), dtype=float).reshape((len(pts),) + self.shape)
        if single:
            return out[0]
        return out.reshape(x.shape[:-1] + self.shape)

    def replace(self, func: ArrayFunc, valence=None) -> "TensorField":
        return TensorField(valence or self.valence, self.dim, func, self.kind, self.eps, self.chart)

    def default_step(self) -> float:
        """Finite-difference step for this field.

        Regularized fields are smooth on the scale eps, so the step sits at
        eps/20; closed-form fields use 1e-5 of the domain diameter.
        """
        if self.kind == "regularized":
            return self.eps / 20.0
        diam = self.chart.diameter if self.chart is not None else 1.0
        return 1e-5 * diam


def constant_field(value, dim: int, valence=None, chart: Chart | None = None) -> TensorField:
    v = np.asarray(value, dtype=float)
    if valence is None:
        valence = (v.ndim, 0)
    def func(pts, v=v):
        return np.broadcast_to(v, (len(pts),) + v.shape).copy()
    return TensorField(valence, dim, func, chart=chart)


def identity_field(dim: int, chart: Chart | None = None) -> TensorField:
    """The Kronecker delta as a (1, 1) field."""
    return constant_field(np.eye(dim), dim, (1, 1), chart)


def _check_step(f: TensorField, pts: np.ndarray, step: float):
    if f.chart is None:
        return
    f.chart.check_clearance(pts, step, excluded=f.kind == "closed_form", what="differentiation")


def differentiate(f: TensorField, direction: int, step: float | None = None) -> TensorField:
    """Central-difference partial derivative of ``f`` along one coordinate axis.

    The result has the same valence as ``f``: the derivative index is not
    appended. The truncation error is O(step**2).
    """
    h = f.default_step() if step is None else float(step)
    if h <= 0:
        raise ValueError("step must be positive")
    e = np.zeros(f.dim)
    e[direction] = h

    def func(pts):
        _check_step(f, pts, h)
        both = f(np.concatenate([pts + e, pts - e]))
        n = len(pts)
        return (both[:n] - both[n:]) / (2.0 * h)

    return f.replace(func)


def gradient(f: TensorField, pts: np.ndarray, step: float | None = None) -> np.ndarray:
    """All first partials at once, shape ``(N, n) + f.shape``."""
    h = f.default_step() if step is None else float(step)
    pts = np.atleast_2d(pts)
    _check_step(f, pts, h)
    n, N = f.dim, len(pts)
    shifts = np.concatenate([np.eye(n) * h, -np.eye(n) * h])
    stacked = (pts[None, :, :] + shifts[:, None, :]).reshape(-1, n)
    vals = f(stacked).reshape((2 * n, N) + f.shape)
    d = (vals[:n] - vals[n:]) / (2.0 * h)
    return np.moveaxis(d, 0, 1)


def derivative_jet(f: TensorField, pts, h1: float, h2: float):
    """Value, first and second partials of ``f`` from one batched evaluation.

    First derivatives use step ``h1``; second derivatives (pure and mixed)
    use ``h2``. Returns ``(val, d1, d2)`` with shapes ``(N,)+S``,
    ``(N, n)+S`` and ``(N, n, n)+S``.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n, N = f.dim, len(pts)
    _check_step(f, pts, max(h1, h2))
    eye = np.eye(n)
    offsets = [np.zeros(n)]
    offsets += [s * h1 * eye[i] for i in range(n) for s in (1, -1)]
    offsets += [s * h2 * eye[i] for i in range(n) for s in (1, -1)]
    pairs = list(itertools.combinations(range(n), 2))
    for i, j in pairs:
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            offsets.append(h2 * (si * eye[i] + sj * eye[j]))
    offsets = np.array(offsets)
    stacked = (pts[None, :, :] + offsets[:, None, :]).reshape(-1, n)
    vals = f(stacked).reshape((len(offsets), N) + f.shape)
    val = vals[0]
    d1 = np.empty((n, N) + f.shape)
    d2 = np.empty((n, n, N) + f.shape)
    k = 1
    for i in range(n):
        d1[i] = (vals[k] - vals[k + 1]) / (2 * h1)
        k += 2
    for i in range(n):
        d2[i, i] = (vals[k] - 2 * val + vals[k + 1]) / h2**2
        k += 2
    for i, j in pairs:
        pp, pm, mp, mm = vals[k:k + 4]
        d2[i, j] = d2[j, i] = (pp - pm - mp + mm) / (4 * h2**2)
        k += 4
    return val, np.moveaxis(d1, 0, 1), np.moveaxis(d2, 2, 0)


# ---------------------------------------------------------------------------
# quadrature


@functools.lru_cache(maxsize=None)
def gauss_legendre(order: int):
    """Gauss-Legendre nodes and weights on [-1, 1]; exact to degree 2*order-1."""
    if order < 1:
        raise ValueError("order must be >= 1")
    x, w = np.polynomial.legendre.leggauss(order)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def composite_rule(breaks, order: int):
    """1D composite Gauss rule on consecutive breakpoints."""
    b = np.asarray(breaks, dtype=float)
    x, w = gauss_legendre(order)
    mid = 0.5 * (b[1:] + b[:-1])
    half = 0.5 * (b[1:] - b[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


def tensor_rule(rules_1d: Sequence):
    """Tensor product of 1D ``(nodes, weights)`` pairs."""
    nodes = np.meshgrid(*[r[0] for r in rules_1d], indexing="ij")
    weights = functools.reduce(np.multiply.outer, [r[1] for r in rules_1d])
    return np.stack([m.ravel() for m in nodes], axis=-1), weights.ravel()


def box_rule(box: Box, order: int, cells=1, breaks=None):
    """Gauss rule on a box split into a uniform grid of cells.

    ``breaks`` optionally adds interior breakpoints per axis, e.g. the
    coordinates of an excluded point, so that no node lands on it.
    """
    n = box.dim
    cells = (cells,) * n if np.isscalar(cells) else tuple(cells)
    rules = []
    for i in range(n):
        b = np.linspace(box.lower[i], box.upper[i], cells[i] + 1)
        if breaks is not None:
            extra = [v for v in np.atleast_1d(breaks[i]) if box.lower[i] < v < box.upper[i]]
            b = np.unique(np.concatenate([b, extra]))
        rules.append(composite_rule(b, order))
    return tensor_rule(rules)


def cells_rule(lower: np.ndarray, upper: np.ndarray, order: int):
    """Gauss rule of the given order on each of a list of boxes."""
    lower = np.atleast_2d(lower)
    upper = np.atleast_2d(upper)
    n = lower.shape[1]
    x, w = gauss_legendre(order)
    ref, refw = tensor_rule([(x, w)] * n)
    half = 0.5 * (upper - lower)
    mid = 0.5 * (upper + lower)
    nodes = mid[:, None, :] + half[:, None, :] * ref[None, :, :]
    weights = np.prod(half, axis=1)[:, None] * refw[None, :]
    return nodes.reshape(-1, n), weights.ravel()


def graded_cells(box: Box, focus, h_min: float, ratio: float = 1.0, max_cells: int = 200000,
                 reach: float = 0.0):
    """Cells refined geometrically toward focus points.

    The box is first split at the first focus point (so that it sits on
    cell corners), then cells are bisected in every axis while their
    size exceeds ``max(h_min, ratio * distance to the nearest focus)``.
    Cells closer than ``reach`` to a focus are refined all the way to ``h_min``.
    Returns ``(lower, upper)`` arrays of shape ``(C, n)``.
    """
    focus = np.asarray(focus, dtype=float).reshape(-1, box.dim)
    lo, hi = box.lo, box.hi
    if len(focus) and box.contains(focus[0])[0]:
        cuts = [np.unique([a, c, b]) for a, c, b in zip(lo, focus[0], hi)]
        cuts = [c[(c >= a) & (c <= b)] for c, a, b in zip(cuts, lo, hi)]
        starts = []
        for idx in itertools.product(*[range(len(c) - 1) for c in cuts]):
            starts.append(([cuts[i][k] for i, k in enumerate(idx)],
                           [cuts[i][k + 1] for i, k in enumerate(idx)]))
        todo = [(np.array(a), np.array(b)) for a, b in starts]
    else:
        todo = [(lo, hi)]
    done_lo, done_hi = [], []
    n = box.dim
    corners = np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)
    while todo:
        a, b = todo.pop()
        size = float(np.max(b - a))
        if len(focus):
            nearest = np.clip(focus, a, b)
            dist = float(np.min(np.linalg.norm(nearest - focus, axis=1)))
        else:
            dist = np.inf
        limit = h_min if dist < reach else max(h_min, ratio * dist)
        if size > limit and len(done_lo) + len(todo) < max_cells:
            m = 0.5 * (a + b)
            for c in corners:
                todo.append((np.where(c > 0, m, a), np.where(c > 0, b, m)))
        else:
            done_lo.append(a)
            done_hi.append(b)
    order_idx = np.lexsort(np.array(done_lo).T[::-1])
    return np.array(done_lo)[order_idx], np.array(done_hi)[order_idx]


def duffy_reference(dim: int, order: int, cells: int = 1):
    """Reference rule for a box whose corner carries a point singularity.

    The unit box ``[0, 1]^n`` with the singular corner at the origin is
    cut into ``n`` pyramids with apex at the origin, one per far face. In
    pyramid ``i`` a point is ``s * (t_1, .., 1, .., t_{n-1})`` with the 1 in
    slot ``i``; the Jacobian ``s**(n-1)`` cancels the homogeneous-degree-0
    behaviour of the integrand at the apex. Returns unit-box nodes
    ``(M, n)`` and weights ``(M,)`` summing to 1.
    """
    r01 = composite_rule(np.linspace(0.0, 1.0, cells + 1), order)
    ref, w = tensor_rule([r01] * dim)
    s = ref[:, :1]
    t = ref[:, 1:]
    w = w * s[:, 0] ** (dim - 1)
    nodes, weights = [], []
    for i in range(dim):
        face = np.insert(t, i, 1.0, axis=1)
        nodes.append(s * face)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def split_box_rule(lower: np.ndarray, upper: np.ndarray, apex: np.ndarray, ref_nodes, ref_weights):
    """Batched singular-corner rule for boxes containing ``apex``.

    ``lower``/``upper``/``apex`` have shape ``(N, n)``. Each box is split
    at the apex into ``2**n`` orthant boxes; the reference pyramid rule is
    mapped into every orthant with the apex as the singular corner.
    Returns nodes ``(N, M, n)`` and weights ``(N, M)``.
    """
    n = lower.shape[1]
    all_nodes, all_w = [], []
    for signs in itertools.product((-1.0, 1.0), repeat=n):
        signs = np.array(signs)
        far = np.where(signs > 0, upper, lower)
        span = far - apex
        nodes = apex[:, None, :] + ref_nodes[None, :, :] * span[:, None, :]
        w = ref_weights[None, :] * np.abs(np.prod(span, axis=1))[:, None]
        all_nodes.append(nodes)
        all_w.append(w)
    return np.concatenate(all_nodes, axis=1), np.concatenate(all_w, axis=1)


def integrate(f, box: Box, order: int = 8, cells=1, *, focus=None, h_min: float | None = None,
              ratio: float = 1.0, excluded=()) -> float | np.ndarray:
    """Integrate a field over a box with composite tensor Gauss-Legendre.

    ``f`` may be a :class:`TensorField` or a plain ``(N, n) -> (N, ...)``
    callable; component-valued integrands are integrated componentwise.
    Without ``focus`` the box is split into a uniform grid of ``cells``
    (with breakpoints at ``excluded`` coordinates); with ``focus`` a
    graded cell decomposition refined down to ``h_min`` is used.
    """
    if focus is not None and len(np.atleast_1d(focus)):
        lo, hi = graded_cells(box, focus, h_min or box.diameter * 1e-3, ratio)
        nodes, weights = cells_rule(lo, hi, order)
    else:
        breaks = None
        if len(excluded):
            breaks = np.asarray(excluded, dtype=float).reshape(-1, box.dim).T
        nodes, weights = box_rule(box, order, cells, breaks)
    return weighted_sum(f, nodes, weights)


def weighted_sum(f, nodes: np.ndarray, weights: np.ndarray, chunk: int = 20000):
    total = None
    for start in range(0, len(nodes), chunk):
        sl = slice(start, start + chunk)
        vals = np.asarray(f(nodes[sl]), dtype=float)
        finite = np.isfinite(vals.reshape(len(vals), -1)).all(axis=1)
        if not finite.all():
            raise IntegrationPoisonedError(nodes[sl][np.argmin(finite)])
        part = np.tensordot(weights[sl], vals, axes=(0, 0))
        total = part if total is None else total + part
    return float(total) if np.ndim(total) == 0 else total


@dataclass(frozen=True, eq=False)
class TestDensity:
    """Compactly supported smooth test density of valence ``(s, r)``.

    Pairs with type ``(r, s)`` fields: ``func`` returns components with the
    ``s`` upper indices first, matching the lower indices of the field.
    Outside ``support`` the evaluator is zero by construction.
    """

    valence: tuple
    dim: int
    func: ArrayFunc
    support: Box
    label: str = "psi"

    __test__ = False  # not a pytest class

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.dim)
        shape = (self.dim,) * sum(self.valence)
        out = np.asarray(self.func(pts), dtype=float).reshape((len(pts),) + shape)
        out = np.where(self.support.contains(pts).reshape((-1,) + (1,) * len(shape)), out, 0.0)
        return out[0] if x.ndim == 1 else out.reshape(x.shape[:-1] + shape)

    def pair_values(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Full contraction of field components ``(N,) + S`` with this density at ``pts``."""
        psi = self(pts)
        s, r = self.valence
        k = r + s
        if values.ndim - 1 != k:
            raise ValueError(f"valence mismatch: field rank {values.ndim - 1}, density rank {k}")
        # field indices (upper r, lower s); density indices (upper s, lower r)
        perm = [0] + [1 + s + i for i in range(r)] + [1 + i for i in range(s)]
        psi = np.transpose(psi, perm)
        return np.sum((values * psi).reshape(len(pts), -1), axis=1)
