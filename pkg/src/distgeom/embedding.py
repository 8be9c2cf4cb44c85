"""Rough tensor fields, generalized fields and the embeddings iota and sigma.

A :class:`GeneralizedField` is a recipe that, given a transport operator,
a kernel (family or kernel-like direction) and ``eps``, evaluates a smooth
representative at chart points. Fields built from embeddings, constants,
linear combinations, products and contractions depend affinely on each
transport slot and linearly on the kernel, so their differentials with
respect to the transport (``d_transport``) and the kernel (``d_kernel``)
are again fields of the same kind.

Directions for the differentials may be fixed objects or callables that
build the direction from the operator or kernel supplied at evaluation
time (this is how Lie derivatives of ``Upsilon`` and ``omega`` enter).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chart import Box, Chart, ChartError, TensorField, TestDensity, integrate
from .kernels import KernelLike, SmoothingKernelFamily
from .transport import IdentityTransport, TransportOperator


class AffineDependenceError(ChartError):
    """Differential requested for a field that is not affine in (Upsilon, omega)."""


class DomainError(ChartError):
    """A pulled-back point leaves the target chart."""


# ---------------------------------------------------------------------------
# rough fields


@dataclass(frozen=True, eq=False)
class DeltaTerm:
    point: tuple
    coefficient: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))
        object.__setattr__(self, "coefficient", np.asarray(self.coefficient, dtype=float))


@dataclass(frozen=True, eq=False)
class RoughTensorField:
    """Locally integrable part plus a finite sum of delta terms.

    ``func`` (optional) maps ``(N, n)`` points to ``(N,) + (n,)*(r+s)``
    components; it may be undefined at ``excluded`` points. Each delta term
    carries a constant coefficient tensor of the same valence.
    """

    valence: tuple
    dim: int
    func: Callable | None = None
    deltas: tuple = ()
    excluded: tuple = ()
    label: str = "T"

    def __post_init__(self):
        object.__setattr__(self, "valence", tuple(int(v) for v in self.valence))
        object.__setattr__(self, "deltas", tuple(self.deltas))
        object.__setattr__(self, "excluded", tuple(tuple(float(v) for v in p) for p in self.excluded))
        shape = self.shape
        for d in self.deltas:
            if d.coefficient.shape != shape or len(d.point) != self.dim:
                raise ValueError(f"delta term at {d.point} does not match valence {self.valence}")

    @property
    def shape(self) -> tuple:
        return (self.dim,) * sum(self.valence)

    @property
    def is_distribution(self) -> bool:
        return bool(self.deltas)

    def values(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.func is None:
            return np.zeros((len(pts),) + self.shape)
        return np.asarray(self.func(pts), dtype=float).reshape((len(pts),) + self.shape)

    @classmethod
    def smooth(cls, f: TensorField, label: str = "f", excluded=()) -> "RoughTensorField":
        return cls(f.valence, f.dim, f.func, (), excluded, label)

    @classmethod
    def delta(cls, point, coefficient=1.0, valence=(0, 0), dim: int | None = None,
              label: str = "delta") -> "RoughTensorField":
        dim = len(point) if dim is None else dim
        c = np.broadcast_to(np.asarray(coefficient, dtype=float), (dim,) * sum(valence)).copy()
        return cls(valence, dim, None, (DeltaTerm(point, c),), (), label)

    def _check(self, other: "RoughTensorField"):
        if self.valence != other.valence or self.dim != other.dim:
            raise ValueError("valence or dimension mismatch")

    def __add__(self, other: "RoughTensorField") -> "RoughTensorField":
        self._check(other)
        f, g = self.func, other.func
        if f is None or g is None:
            func = f or g
        else:
            def func(p):
                return np.asarray(f(p), dtype=float) + np.asarray(g(p), dtype=float)
        return RoughTensorField(self.valence, self.dim, func, self.deltas + other.deltas,
                                tuple(dict.fromkeys(self.excluded + other.excluded)),
                                f"({self.label}+{other.label})")

    def __rmul__(self, a: float) -> "RoughTensorField":
        a = float(a)
        f = self.func
        func = None if f is None else (lambda p: a * np.asarray(f(p), dtype=float))
        deltas = tuple(DeltaTerm(d.point, a * d.coefficient) for d in self.deltas)
        return RoughTensorField(self.valence, self.dim, func, deltas, self.excluded, f"{a}*{self.label}")

    def __sub__(self, other):
        return self + (-1.0) * other

    def pair(self, psi: TestDensity, order: int = 8, cells: int = 8, h_min: float | None = None) -> float:
        """Exact pairing ``<T, Psi>``: quadrature of the integrable part plus point evaluations."""
        total = 0.0
        if self.func is not None:
            box = psi.support
            focus = [p for p in self.excluded if box.contains(p)[0]]
            if focus:
                total += integrate(lambda p: psi.pair_values(self.values(p), p), box, order,
                                   focus=focus, h_min=h_min or box.diameter * 1e-4, ratio=0.5)
            else:
                total += integrate(lambda p: psi.pair_values(self.values(p), p), box, order, cells)
        for d in self.deltas:
            p = np.array(d.point)[None, :]
            total += float(psi.pair_values(d.coefficient[None], p)[0])
        return float(total)


# ---------------------------------------------------------------------------
# generalized fields


def _resolve(direction, base):
    """Directions are either fixed objects or factories of the evaluation-time object."""
    if isinstance(direction, (TransportOperator, KernelLike)):
        return direction
    return direction(base)


class GeneralizedField:
    """Map ``(Upsilon, omega, eps) -> smooth tensor field``.

    Subclasses implement ``_evaluate(x, upsilon, kernel, eps)`` on a batch
    ``x`` of shape ``(N, n)`` and, where affine, the differentials.
    """

    valence: tuple
    dim: int
    chart: Chart | None = None
    label: str = "T"

    upsilon_dependent: bool = False
    kernel_dependent: bool = False

    # ---- evaluation
    @property
    def shape(self) -> tuple:
        return (self.dim,) * sum(self.valence)

    @property
    def rank(self) -> int:
        return sum(self.valence)

    @property
    def regularized(self) -> bool:
        return self.kernel_dependent

    def clearance(self, eps: float) -> float:
        """Distance from the chart boundary that evaluation points must keep."""
        return 0.0

    def focus_points(self) -> list:
        """Points where representatives concentrate (delta locations, singular points)."""
        return []

    def _evaluate(self, x, upsilon, kernel, eps):
        raise NotImplementedError

    def evaluate(self, x, upsilon: TransportOperator | None = None,
                 kernel: KernelLike | None = None, eps: float | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x.reshape(-1, self.dim)
        if upsilon is None:
            upsilon = IdentityTransport(self.dim)
        out = self._evaluate(pts, upsilon, kernel, eps)
        return out[0] if single else out.reshape(x.shape[:-1] + self.shape)

    def represent(self, upsilon: TransportOperator | None = None, kernel: KernelLike | None = None,
                  eps: float | None = None) -> TensorField:
        """The smooth representative as a :class:`TensorField`."""
        if upsilon is None:
            upsilon = IdentityTransport(self.dim)

        def func(pts):
            return self._evaluate(pts, upsilon, kernel, eps)

        kind = "regularized" if self.regularized and eps else "closed_form"
        return TensorField(self.valence, self.dim, func, kind, eps if kind == "regularized" else None,
                           self.chart)

    # ---- differentials
    def d_transport(self, direction) -> "GeneralizedField":
        if not self.upsilon_dependent:
            return ZeroField(self.valence, self.dim, self.chart)
        raise AffineDependenceError(f"{type(self).__name__} has no transport differential")

    def d_kernel(self, direction) -> "GeneralizedField":
        if not self.kernel_dependent:
            return ZeroField(self.valence, self.dim, self.chart)
        raise AffineDependenceError(f"{type(self).__name__} has no kernel differential")

    # ---- algebra
    def __add__(self, other: "GeneralizedField") -> "GeneralizedField":
        return LinearCombination(((1.0, self), (1.0, other)))

    def __sub__(self, other: "GeneralizedField") -> "GeneralizedField":
        return LinearCombination(((1.0, self), (-1.0, other)))

    def __neg__(self):
        return LinearCombination(((-1.0, self),))

    def __rmul__(self, a: float) -> "GeneralizedField":
        return LinearCombination(((float(a), self),))

    def __repr__(self):
        return f"<{type(self).__name__} {self.label} {self.valence}>"


class ZeroField(GeneralizedField):
    def __init__(self, valence, dim: int, chart: Chart | None = None):
        self.valence = tuple(valence)
        self.dim = dim
        self.chart = chart
        self.label = "0"

    def _evaluate(self, x, upsilon, kernel, eps):
        return np.zeros((len(x),) + self.shape)


class ConstantField(GeneralizedField):
    """``sigma(T)``: the same smooth field for every ``(Upsilon, omega, eps)``."""

    def __init__(self, f: TensorField, label: str | None = None):
        self.field = f
        self.valence = f.valence
        self.dim = f.dim
        self.chart = f.chart
        self.label = label or "sigma"

    def _evaluate(self, x, upsilon, kernel, eps):
        return self.field(x)


def sigma(f: TensorField, label: str | None = None) -> ConstantField:
    return ConstantField(f, label)


def _apply_slots(vals, mats, valence):
    """Transport every index slot of ``vals`` ``(k, M) + S`` with per-slot matrices.

    ``mats[i]`` is ``None`` (identity) or ``(k, M, n, n)``. Upper slots use
    ``A[a, b] v^b``; lower slots receive ``B[d, b]`` already arranged as
    ``Upsilon^d_b(y, x)`` and use ``v_d B[d, b]``.
    """
    r, _ = valence
    for i, A in enumerate(mats):
        if A is None:
            continue
        ax = 2 + i
        v = np.moveaxis(vals, ax, -1)
        k, M = v.shape[:2]
        v = v.reshape(k, M, -1, v.shape[-1])
        # contract over the (small) slot index by broadcasting; einsum is slow here
        rows = A if i < r else np.swapaxes(A, -1, -2)
        acc = rows[:, :, None, :, 0] * v[..., 0:1]
        for b in range(1, v.shape[-1]):
            acc += rows[:, :, None, :, b] * v[..., b:b + 1]
        vals = np.moveaxis(acc.reshape(vals.shape[:2] + tuple(np.delete(vals.shape[2:], i)) + (-1,)), -1, ax)
    return vals


class EmbeddedField(GeneralizedField):
    """``iota(T)``: smoothing of a rough field by ``Upsilon`` and ``omega``.

    ``overrides`` fixes the transport used in selected slots (this is how
    transport differentials are represented); ``kernel_override`` fixes
    the kernel-like object (kernel differentials).
    """

    chunk_nodes = 200_000

    def __init__(self, rough: RoughTensorField, chart: Chart | None = None,
                 overrides: tuple = (), kernel_override=None, label: str | None = None):
        self.rough = rough
        self.valence = rough.valence
        self.dim = rough.dim
        self.chart = chart
        self.overrides = tuple(overrides)
        self.kernel_override = kernel_override
        self.label = label or f"iota({rough.label})"
        fixed = {s for s, _ in self.overrides}
        self.upsilon_dependent = self.rank > len(fixed)
        self.kernel_dependent = kernel_override is None

    @property
    def regularized(self) -> bool:
        return True

    def clearance(self, eps):
        return float(eps) * np.sqrt(self.dim)

    def focus_points(self):
        return [d.point for d in self.rough.deltas] + list(self.rough.excluded)

    def d_transport(self, direction):
        fixed = {s for s, _ in self.overrides}
        free = [s for s in range(self.rank) if s not in fixed]
        if not free:
            return ZeroField(self.valence, self.dim, self.chart)
        terms = [(1.0, EmbeddedField(self.rough, self.chart, self.overrides + ((s, direction),),
                                     self.kernel_override, f"d1[{s}]{self.label}"))
                 for s in free]
        return terms[0][1] if len(terms) == 1 else LinearCombination(tuple(terms))

    def d_kernel(self, direction):
        if self.kernel_override is not None:
            return ZeroField(self.valence, self.dim, self.chart)
        return EmbeddedField(self.rough, self.chart, self.overrides, direction, f"d2{self.label}")

    def _slot_mats(self, upsilon, x, y, cache):
        """Per-slot transport matrices for point pairs ``x`` ``(k, 1, n)``, ``y`` ``(k, M, n)``."""
        r, _ = self.valence
        fixed = dict(self.overrides)
        mats = []
        for s in range(self.rank):
            op = _resolve(fixed[s], upsilon) if s in fixed else upsilon
            if op.is_identity and s not in fixed:
                mats.append(None)
                continue
            key = (id(op), s < r)
            if key not in cache:
                mixed = 0 < r < self.rank
                if op is upsilon and mixed and "pair" not in cache:
                    xb = np.broadcast_to(x, y.shape)
                    cache["pair"] = op.pair(xb, y)
                if op is upsilon and mixed:
                    cache[key] = cache["pair"][0 if s < r else 1]
                else:
                    xb = np.broadcast_to(x, y.shape)
                    cache[key] = op(xb, y) if s < r else op(y, xb)
            mats.append(cache[key])
        return mats

    def _evaluate(self, x, upsilon, kernel, eps):
        if eps is None or kernel is None:
            raise ValueError("embedded fields need a kernel and eps")
        if self.chart is not None:
            self.chart.check_clearance(x, self.clearance(eps), what="smoothing")
        om = kernel if self.kernel_override is None else _resolve(self.kernel_override, kernel)
        N = len(x)
        out = np.zeros((N,) + self.shape)
        rough = self.rough
        if rough.func is not None:
            M = len(om.base.template()[0])
            step = max(1, self.chunk_nodes // max(M, 1))
            for start in range(0, N, step):
                xs = x[start:start + step]
                for idx, nodes, m in om.measure(xs, eps, rough.excluded or None):
                    k, Mk, n = nodes.shape
                    vals = rough.values(nodes.reshape(-1, n)).reshape((k, Mk) + self.shape)
                    mats = self._slot_mats(upsilon, xs[idx][:, None, :], nodes, {})
                    vals = _apply_slots(vals, mats, self.valence)
                    out[start + idx] += np.einsum("km,km...->k...", m, vals)
        for d in rough.deltas:
            p = np.broadcast_to(np.array(d.point), (N, 1, self.dim))
            w = om.density(x, eps, p[:, 0, :])
            vals = np.broadcast_to(d.coefficient, (N, 1) + self.shape)
            mats = self._slot_mats(upsilon, x[:, None, :], p, {})
            vals = _apply_slots(vals, mats, self.valence)
            out += w.reshape((N,) + (1,) * self.rank) * vals[:, 0]
        return out


def iota(T: RoughTensorField, chart: Chart | None = None, label: str | None = None) -> EmbeddedField:
    return EmbeddedField(T, chart, label=label)


class LinearCombination(GeneralizedField):
    def __init__(self, terms: Sequence, label: str | None = None):
        terms = tuple((float(a), f) for a, f in terms)
        if not terms:
            raise ValueError("empty linear combination")
        v = {f.valence for _, f in terms}
        if len(v) != 1:
            raise ValueError(f"cannot add fields of valences {sorted(v)}")
        self.terms = terms
        first = terms[0][1]
        self.valence, self.dim = first.valence, first.dim
        self.chart = next((f.chart for _, f in terms if f.chart is not None), None)
        self.label = label or "+".join(f"{a:g}*{f.label}" for a, f in terms)
        self.upsilon_dependent = any(f.upsilon_dependent for _, f in terms)
        self.kernel_dependent = any(f.kernel_dependent for _, f in terms)

    @property
    def regularized(self):
        return any(f.regularized for _, f in self.terms)

    def clearance(self, eps):
        return max(f.clearance(eps) for _, f in self.terms)

    def focus_points(self):
        return list(dict.fromkeys(p for _, f in self.terms for p in f.focus_points()))

    def _evaluate(self, x, upsilon, kernel, eps):
        out = np.zeros((len(x),) + self.shape)
        for a, f in self.terms:
            if a != 0.0:
                out += a * f._evaluate(x, upsilon, kernel, eps)
        return out

    def d_transport(self, direction):
        return LinearCombination(tuple((a, f.d_transport(direction)) for a, f in self.terms))

    def d_kernel(self, direction):
        return LinearCombination(tuple((a, f.d_kernel(direction)) for a, f in self.terms))


def _outer_perm(v1, v2):
    """Axis order turning ``S (x) T`` components into upper-first layout."""
    r1, s1 = v1
    r2, s2 = v2
    k1 = r1 + s1
    up = list(range(r1)) + [k1 + i for i in range(r2)]
    low = [r1 + i for i in range(s1)] + [k1 + r2 + i for i in range(s2)]
    return up + low


class ProductField(GeneralizedField):
    """Tensor product ``S (x) T`` with upper indices of both factors first."""

    def __init__(self, S: GeneralizedField, T: GeneralizedField):
        if S.dim != T.dim:
            raise ValueError("dimension mismatch")
        self.S, self.T = S, T
        self.dim = S.dim
        self.chart = S.chart or T.chart
        self.valence = (S.valence[0] + T.valence[0], S.valence[1] + T.valence[1])
        self.label = f"({S.label}x{T.label})"
        self.upsilon_dependent = S.upsilon_dependent or T.upsilon_dependent
        self.kernel_dependent = S.kernel_dependent or T.kernel_dependent
        self._perm = [0] + [1 + p for p in _outer_perm(S.valence, T.valence)]

    @property
    def regularized(self):
        return self.S.regularized or self.T.regularized

    def clearance(self, eps):
        return max(self.S.clearance(eps), self.T.clearance(eps))

    def focus_points(self):
        return list(dict.fromkeys(self.S.focus_points() + self.T.focus_points()))

    def _evaluate(self, x, upsilon, kernel, eps):
        a = self.S._evaluate(x, upsilon, kernel, eps)
        b = self.T._evaluate(x, upsilon, kernel, eps)
        N = len(x)
        prod = (a.reshape(N, -1)[:, :, None] * b.reshape(N, -1)[:, None, :])
        prod = prod.reshape((N,) + a.shape[1:] + b.shape[1:])
        return np.transpose(prod, self._perm)

    def d_transport(self, direction):
        if not self.upsilon_dependent:
            return ZeroField(self.valence, self.dim, self.chart)
        return ProductField(self.S.d_transport(direction), self.T) + ProductField(self.S, self.T.d_transport(direction))

    def d_kernel(self, direction):
        if not self.kernel_dependent:
            return ZeroField(self.valence, self.dim, self.chart)
        return ProductField(self.S.d_kernel(direction), self.T) + ProductField(self.S, self.T.d_kernel(direction))


class ContractionField(GeneralizedField):
    """Trace of an upper slot against a lower slot (slots counted within their kind)."""

    def __init__(self, S: GeneralizedField, upper: int, lower: int):
        r, s = S.valence
        if not (0 <= upper < r and 0 <= lower < s):
            raise IndexError(f"cannot contract upper {upper} with lower {lower} in valence {S.valence}")
        self.S, self.upper, self.lower = S, upper, lower
        self.dim, self.chart = S.dim, S.chart
        self.valence = (r - 1, s - 1)
        self.label = f"tr[{upper},{lower}]{S.label}"
        self.upsilon_dependent = S.upsilon_dependent
        self.kernel_dependent = S.kernel_dependent

    @property
    def regularized(self):
        return self.S.regularized

    def clearance(self, eps):
        return self.S.clearance(eps)

    def focus_points(self):
        return self.S.focus_points()

    def _evaluate(self, x, upsilon, kernel, eps):
        v = self.S._evaluate(x, upsilon, kernel, eps)
        r = self.S.valence[0]
        return np.trace(v, axis1=1 + self.upper, axis2=1 + r + self.lower)

    def d_transport(self, direction):
        return ContractionField(self.S.d_transport(direction), self.upper, self.lower)

    def d_kernel(self, direction):
        return ContractionField(self.S.d_kernel(direction), self.upper, self.lower)


class DerivedField(GeneralizedField):
    """Pointwise function of the values of parent fields (not affine in general).

    ``func(x, *values)`` receives the points and the parents' component
    arrays and returns the new components.
    """

    def __init__(self, func: Callable, parents: Sequence[GeneralizedField], valence, label: str = "derived",
                 clearance_extra: float = 0.0):
        self.func = func
        self.parents = tuple(parents)
        self.valence = tuple(valence)
        self.dim = parents[0].dim
        self.chart = next((p.chart for p in parents if p.chart is not None), None)
        self.label = label
        self.upsilon_dependent = any(p.upsilon_dependent for p in parents)
        self.kernel_dependent = any(p.kernel_dependent for p in parents)
        self.clearance_extra = clearance_extra

    @property
    def regularized(self):
        return any(p.regularized for p in self.parents)

    def clearance(self, eps):
        return max(p.clearance(eps) for p in self.parents) + self.clearance_extra

    def focus_points(self):
        return list(dict.fromkeys(q for p in self.parents for q in p.focus_points()))

    def _evaluate(self, x, upsilon, kernel, eps):
        vals = [p._evaluate(x, upsilon, kernel, eps) for p in self.parents]
        return np.asarray(self.func(x, *vals), dtype=float).reshape((len(x),) + self.shape)


# ---------------------------------------------------------------------------
# diffeomorphisms


@dataclass(frozen=True, eq=False)
class Diffeomorphism:
    """Closed-form map ``mu`` with inverse and Jacobian ``D mu`` (``(N, n, n)``, ``[a, b] = d mu^a / d x^b``)."""

    forward: Callable
    inverse: Callable
    jacobian: Callable
    dim: int
    label: str = "mu"
    target: Chart | None = None

    @classmethod
    def linear(cls, L, shift=None, label: str = "linear") -> "Diffeomorphism":
        L = np.asarray(L, dtype=float)
        n = L.shape[0]
        t = np.zeros(n) if shift is None else np.asarray(shift, dtype=float)
        Li = np.linalg.inv(L)
        return cls(lambda p: p @ L.T + t, lambda q: (q - t) @ Li.T,
                   lambda p: np.broadcast_to(L, (len(np.atleast_2d(p)), n, n)).copy(), n, label)

    @classmethod
    def translation(cls, shift) -> "Diffeomorphism":
        t = np.asarray(shift, dtype=float)
        return cls.linear(np.eye(len(t)), t, "translation")

    def jac(self, p):
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, self.dim)
        return np.asarray(self.jacobian(flat), dtype=float).reshape(p.shape[:-1] + (self.dim, self.dim))

    def fwd(self, p):
        p = np.asarray(p, dtype=float)
        return np.asarray(self.forward(p.reshape(-1, self.dim))).reshape(p.shape)

    def inv(self, q):
        q = np.asarray(q, dtype=float)
        return np.asarray(self.inverse(q.reshape(-1, self.dim))).reshape(q.shape)


class PushedKernel(KernelLike):
    """``(mu_* omega)_{x', eps}(y') = omega_{mu^-1 x', eps}(mu^-1 y') |det D mu^-1 (y')|``."""

    def __init__(self, kernel: KernelLike, mu: Diffeomorphism):
        self.kernel = kernel
        self.mu = mu

    @property
    def base(self):
        return self.kernel.base

    def density(self, x, eps, y):
        y = np.asarray(y, dtype=float)
        yi = self.mu.inv(y)
        det = np.abs(np.linalg.det(self.mu.jac(yi)))
        xi = self.mu.inv(np.broadcast_to(np.asarray(x, dtype=float), y.shape))
        return self.kernel.density(xi, eps, yi) / det

    def measure(self, x, eps, excluded=None):
        xi = self.mu.inv(np.atleast_2d(x))
        ex = None if excluded is None else [tuple(v) for v in self.mu.inv(np.atleast_2d(excluded))]
        return [(idx, self.mu.fwd(nodes), m) for idx, nodes, m in self.kernel.measure(xi, eps, ex)]


class PushedTransport(TransportOperator):
    """``(mu_* Upsilon)(x', y') = D mu(x) Upsilon(x, y) D mu(y)^-1`` with ``x' = mu(x)``."""

    def __init__(self, upsilon: TransportOperator, mu: Diffeomorphism):
        self.upsilon = upsilon
        self.mu = mu
        self.dim = upsilon.dim
        self.provenance = f"push({upsilon.provenance})"
        self.is_identity = False

    def matrices(self, xp, yp):
        x, y = self.mu.inv(xp), self.mu.inv(yp)
        U = self.upsilon.matrices(x, y)
        return self.mu.jac(x) @ U @ np.linalg.inv(self.mu.jac(y))


class PullbackField(GeneralizedField):
    """``(mu^* T)(Upsilon, omega)(x) = (D mu^-1)^r_s T(mu_* Upsilon, mu_* omega)(mu(x))``."""

    def __init__(self, T: GeneralizedField, mu: Diffeomorphism, chart: Chart | None = None):
        self.T, self.mu = T, mu
        self.valence, self.dim = T.valence, T.dim
        self.chart = chart
        self.label = f"{mu.label}*{T.label}"
        self.upsilon_dependent = T.upsilon_dependent
        self.kernel_dependent = T.kernel_dependent

    @property
    def regularized(self):
        return self.T.regularized

    def focus_points(self):
        pts = self.T.focus_points()
        return [tuple(v) for v in self.mu.inv(np.array(pts))] if pts else []

    def _evaluate(self, x, upsilon, kernel, eps):
        xp = self.mu.fwd(x)
        tgt = self.mu.target or self.T.chart
        if tgt is not None and not np.all(tgt.box.contains(xp)):
            bad = xp[np.argmin(tgt.box.contains(xp))]
            raise DomainError(f"image point {tuple(bad)} lies outside the target chart")
        up = PushedTransport(upsilon, self.mu)
        om = None if kernel is None else PushedKernel(kernel, self.mu)
        vals = self.T._evaluate(xp, up, om, eps)
        J = self.mu.jac(x)
        Ji = np.linalg.inv(J)
        r, s = self.valence
        for i in range(r + s):
            ax = 1 + i
            v = np.moveaxis(vals, ax, -1)
            if i < r:
                v = np.einsum("nab,n...b->n...a", Ji, v)
            else:
                v = np.einsum("ndb,n...d->n...b", J, v)
            vals = np.moveaxis(v, -1, ax)
        return vals

    def d_transport(self, direction):
        raise AffineDependenceError("differentials of pulled-back fields are not realised")

    def d_kernel(self, direction):
        raise AffineDependenceError("differentials of pulled-back fields are not realised")


def pullback_diffeo(T: GeneralizedField, mu: Diffeomorphism, chart: Chart | None = None) -> PullbackField:
    return PullbackField(T, mu, chart)
