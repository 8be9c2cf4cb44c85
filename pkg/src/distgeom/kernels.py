"""Smoothing kernels: mollifier profiles, kernel families and eps-nets.

A kernel family is the tensor product of a one-dimensional profile
``rho`` supported on ``[-1, 1]``, translated to the base point and scaled
by ``eps``::

    omega_{x,eps}(y) = eps**-n * prod_i rho((y_i - x_i) / eps)

Admissibility contract used throughout the package: unit mass, support
shrinking like ``eps``, moments ``1..q`` vanishing and uniform L1 bounds.
This is an operational reading of the admissible class, not a literal
transcription of its definition.

Every kernel-like object (families, perturbations, Lie derivatives)
exposes ``density(x, eps, y)`` and ``measure(x, eps, excluded)``. The
latter returns the discretised measure ``omega_{x,eps}(y) dy`` as groups
``(index, nodes, weights)`` consumed by the embedding code.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chart import (
    Chart,
    TensorField,
    composite_rule,
    duffy_reference,
    gradient,
    split_box_rule,
    tensor_rule,
)


def bump(t) -> np.ndarray:
    """Standard C-infinity bump ``exp(-1/(1-t^2))`` on ``(-1, 1)``, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ti * ti))
    return out


def bump_derivative(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    one = 1.0 - ti * ti
    out[inside] = np.exp(-1.0 / one) * (-2.0 * ti / one**2)
    return out


@functools.lru_cache(maxsize=None)
def _fine_rule():
    return composite_rule(np.linspace(-1.0, 1.0, 129), 16)


def bump_moment(k: int) -> float:
    t, w = _fine_rule()
    return float(np.sum(w * t**k * bump(t)))


@dataclass(frozen=True)
class MollifierProfile:
    """A bump times an even polynomial with unit mass and vanishing moments.

    ``rho(t) = bump(t) * sum_j c_j t**(2j)``. Odd moments vanish by
    symmetry; the even ones up to ``q`` are removed by the coefficients.
    """

    q: int
    coefficients: tuple

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return bump(t) * np.polynomial.polynomial.polyval(t * t, self.coefficients)

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        c = np.asarray(self.coefficients)
        poly = np.polynomial.polynomial.polyval(t * t, c)
        dpoly = 2 * t * np.polynomial.polynomial.polyval(t * t, np.polynomial.polynomial.polyder(c))
        return bump_derivative(t) * poly + bump(t) * dpoly

    def moment(self, k: int) -> float:
        t, w = _fine_rule()
        return float(np.sum(w * t**k * self(t)))

    def to_json(self) -> str:
        return json.dumps({"shape": "exp(-1/(1-t^2))", "q": self.q,
                           "coefficients": list(self.coefficients)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MollifierProfile":
        rec = json.loads(text)
        return cls(int(rec["q"]), tuple(float(c) for c in rec["coefficients"]))


@functools.lru_cache(maxsize=None)
def make_profile(q: int = 0) -> MollifierProfile:
    """Profile with unit mass and vanishing moments ``1..q``."""
    if q < 0:
        raise ValueError("moment order must be non-negative")
    m = q // 2 + 1
    gram = np.array([[bump_moment(2 * (i + j)) for j in range(m)] for i in range(m)])
    rhs = np.zeros(m)
    rhs[0] = 1.0
    # even-moment Hankel matrix of a positive weight: positive definite
    assert np.linalg.cond(gram) < 1e14
    coef = np.linalg.solve(gram, rhs)
    return MollifierProfile(q, tuple(float(c) for c in coef))


@functools.lru_cache(maxsize=None)
def _template(profile: MollifierProfile, dim: int, cells_per_radius: int, order: int):
    r1 = composite_rule(np.linspace(-1.0, 1.0, 2 * cells_per_radius + 1), order)
    keep = profile(r1[0]) != 0.0
    z1, w1 = r1[0][keep], r1[1][keep]
    # refit the even polynomial against the discrete measure so that the
    # quadrature kernel itself has unit mass and vanishing moments 1..q
    base = w1 * bump(z1)
    m = len(profile.coefficients)
    gram = np.array([[np.sum(base * z1 ** (2 * (i + j))) for j in range(m)] for i in range(m)])
    rhs = np.zeros(m)
    rhs[0] = 1.0
    coef = np.linalg.solve(gram, rhs)
    c1 = base * np.polynomial.polynomial.polyval(z1 * z1, coef)
    z, w = tensor_rule([(z1, w1)] * dim)
    _, c = tensor_rule([(z1, c1)] * dim)
    for a in (z, w, c):
        a.flags.writeable = False
    return z, w, c


@functools.lru_cache(maxsize=None)
def _singular_template(dim: int, cells: int, order: int):
    nodes, weights = duffy_reference(dim, order, cells)
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


class KernelLike:
    """Shared quadrature plumbing for kernel families and their perturbations."""

    base: "SmoothingKernelFamily"

    def density(self, x, eps, y):
        raise NotImplementedError

    def measure(self, x, eps, excluded=None):
        groups = []
        x = np.atleast_2d(np.asarray(x, dtype=float))
        for idx, nodes, dy, _ in self.base.quadrature(x, eps, excluded):
            xx = x[idx][:, None, :]
            groups.append((idx, nodes, dy * self.density(xx, eps, nodes)))
        return groups


@dataclass(frozen=True, eq=False)
class SmoothingKernelFamily(KernelLike):
    """Tensor-product kernel ``eps^-n prod rho((y - x)/eps)`` in chart coordinates.

    Quadrature over the support box uses ``2 * cells_per_radius`` Gauss
    cells of the given order per axis. When an excluded point of the
    smoothed field falls inside the support box, the box is split at that
    point and a singular-corner rule is used instead.
    """

    profile: MollifierProfile
    dim: int
    cells_per_radius: int = 4
    order: int = 8
    singular_cells: int = 4
    translation_invariant = True

    @property
    def base(self):
        return self

    @property
    def q(self) -> int:
        return self.profile.q

    def support_radius(self, eps: float) -> float:
        """Half-width of the support box; the support lies in ``ball(x, eps*sqrt(n))``."""
        return float(eps)

    def scaled(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.prod(self.profile(z), axis=-1)

    def density(self, x, eps, y):
        z = (np.asarray(y, dtype=float) - np.asarray(x, dtype=float)) / eps
        return self.scaled(z) / eps**self.dim

    def grad_y(self, x, eps, y):
        """Gradient of the density in ``y``, shape ``(..., n)``."""
        z = (np.asarray(y, dtype=float) - np.asarray(x, dtype=float)) / eps
        vals = self.profile(z)
        ders = self.profile.derivative(z)
        out = np.empty(z.shape)
        for c in range(self.dim):
            out[..., c] = ders[..., c] * np.prod(np.delete(vals, c, axis=-1), axis=-1)
        return out / eps ** (self.dim + 1)

    def template(self):
        return _template(self.profile, self.dim, self.cells_per_radius, self.order)

    def _singular_mask(self, x, eps, excluded):
        if excluded is None or len(excluded) == 0:
            return np.zeros(len(x), dtype=bool), None
        excluded = np.asarray(excluded, dtype=float).reshape(-1, self.dim)
        inside = np.all(np.abs(x[:, None, :] - excluded[None, :, :]) < eps, axis=-1)
        hits = inside.sum(axis=1)
        if np.any(hits > 1):
            raise NotImplementedError("two excluded points inside one kernel support")
        which = np.argmax(inside, axis=1)
        return hits == 1, excluded[which]

    def quadrature(self, x, eps, excluded=None):
        """Groups ``(index, nodes (k, M, n), dy, regular)`` covering each support box.

        The regular group shares one template, so its ``dy`` has shape
        ``(1, M)``; the singular group has per-row weights ``(k, M)``.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z, w, _ = self.template()
        sing, apex = self._singular_mask(x, eps, excluded)
        groups = []
        reg = np.flatnonzero(~sing)
        if len(reg):
            nodes = x[reg][:, None, :] + eps * z[None, :, :]
            groups.append((reg, nodes, (w * eps**self.dim)[None, :], True))
        sidx = np.flatnonzero(sing)
        if len(sidx):
            ref_nodes, ref_w = _singular_template(self.dim, self.singular_cells, self.order)
            xs = x[sidx]
            nodes, dy = split_box_rule(xs - eps, xs + eps, apex[sidx], ref_nodes, ref_w)
            groups.append((sidx, nodes, dy, False))
        return groups

    def measure(self, x, eps, excluded=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        groups = []
        for idx, nodes, dy, regular in self.quadrature(x, eps, excluded):
            if regular:
                _, _, c = self.template()
                groups.append((idx, nodes, c[None, :]))
            else:
                m = dy * self.density(x[idx][:, None, :], eps, nodes)
                groups.append((idx, nodes, m / m.sum(axis=1, keepdims=True)))
        return groups

    def to_dict(self) -> dict:
        return {"q": self.q, "coefficients": list(self.profile.coefficients),
                "cells_per_radius": self.cells_per_radius, "order": self.order}


def make_kernel(dim: int, q: int = 0, **kw) -> SmoothingKernelFamily:
    return SmoothingKernelFamily(make_profile(q), dim, **kw)


@dataclass(frozen=True, eq=False)
class KernelPerturbation(KernelLike):
    """Zero-mass kernel direction ``eps^-n * func((y - x)/eps)``.

    Scales like the kernel itself, so it stays bounded in L1 uniformly in
    eps.
    """

    base: SmoothingKernelFamily
    func: Callable
    label: str = "perturbation"

    def density(self, x, eps, y):
        z = (np.asarray(y, dtype=float) - np.asarray(x, dtype=float)) / eps
        return self.func(z) / eps**self.base.dim


def axis_perturbation(kernel: SmoothingKernelFamily, axis: int) -> KernelPerturbation:
    """``rho'(z_axis) * prod_{i != axis} rho(z_i)``; integrates to zero."""
    prof = kernel.profile

    def func(z):
        vals = prof(z)
        vals[..., axis] = prof.derivative(z[..., axis])
        return np.prod(vals, axis=-1)

    return KernelPerturbation(kernel, func, f"d_rho[{axis}]")


def spread_perturbation(kernel: SmoothingKernelFamily, axis: int = 0) -> KernelPerturbation:
    """Even, zero-mass direction ``prod rho(z) * (z_axis^2 - m2)``."""
    prof = kernel.profile
    m2 = prof.moment(2)

    def func(z):
        return np.prod(prof(z), axis=-1) * (z[..., axis] ** 2 - m2)

    return KernelPerturbation(kernel, func, f"spread[{axis}]")


def default_kernel_directions(kernel: SmoothingKernelFamily):
    return [axis_perturbation(kernel, 0), axis_perturbation(kernel, 1 % kernel.dim),
            spread_perturbation(kernel, 0)]


def divergence(X: TensorField, pts, step: float | None = None) -> np.ndarray:
    g = gradient(X, pts, step)
    return np.trace(g, axis1=1, axis2=2)


_PARTS = ("advection", "divergence", "base")


@dataclass(frozen=True, eq=False)
class KernelLieDerivative(KernelLike):
    """Lie derivative of a kernel family along a smooth vector field ``X``.

    Three pieces:

    * ``advection``  ``X^c(y) d/dy^c omega_x(y)``
    * ``divergence`` ``(div X)(y) omega_x(y)``
    * ``base``       ``X^c(x) d/dx^c omega_x(y)``

    The density Lie derivative in ``y`` is advection + divergence (it
    integrates to zero); the base-point part differentiates the smooth
    dependence on ``x``. The full Lie derivative is the sum of all three.
    """

    kernel: SmoothingKernelFamily
    X: TensorField
    parts: tuple = _PARTS
    step: float | None = None

    @property
    def base(self):
        return self.kernel

    def part(self, *names) -> "KernelLieDerivative":
        bad = set(names) - set(_PARTS)
        if bad:
            raise ValueError(f"unknown parts {bad}")
        return KernelLieDerivative(self.kernel, self.X, tuple(names), self.step)

    @property
    def density_part(self):
        return self.part("advection", "divergence")

    @property
    def base_part(self):
        return self.part("base")

    def density(self, x, eps, y):
        y = np.asarray(y, dtype=float)
        x = np.broadcast_to(np.asarray(x, dtype=float), y.shape)
        n = self.kernel.dim
        flat_y = y.reshape(-1, n)
        out = np.zeros(y.shape[:-1])
        need_grad = "advection" in self.parts or "base" in self.parts
        grad = self.kernel.grad_y(x, eps, y) if need_grad else None
        if "advection" in self.parts:
            Xy = self.X(flat_y).reshape(y.shape)
            out += np.sum(Xy * grad, axis=-1)
        if "divergence" in self.parts:
            div = divergence(self.X, flat_y, self.step).reshape(y.shape[:-1])
            out += div * self.kernel.density(x, eps, y)
        if "base" in self.parts:
            Xx = self.X(x.reshape(-1, n)).reshape(y.shape)
            # translation invariance: d/dx omega = -d/dy omega
            out -= np.sum(Xx * grad, axis=-1)
        return out


def kernel_lie_derivative(kernel: SmoothingKernelFamily, X: TensorField, step=None) -> KernelLieDerivative:
    return KernelLieDerivative(kernel, X, _PARTS, step)


@dataclass(frozen=True)
class EpsNet:
    """Geometric net ``eps_k = eps0 * ratio**k`` for ``k = 0 .. levels-1``."""

    eps0: float
    ratio: float = 0.5
    levels: int = 8

    def __post_init__(self):
        if self.eps0 <= 0 or not 0 < self.ratio < 1 or self.levels < 2:
            raise ValueError("need eps0 > 0, 0 < ratio < 1 and at least two levels")

    @classmethod
    def default(cls, chart: Chart) -> "EpsNet":
        return cls(0.1 * chart.diameter, 0.5, 8)

    @property
    def values(self) -> np.ndarray:
        return self.eps0 * self.ratio ** np.arange(self.levels)

    def __iter__(self):
        return iter(self.values.tolist())

    def __len__(self):
        return self.levels

    def check(self, chart: Chart, points, extra: float = 0.0):
        """Largest-eps support (plus ``extra``) must stay inside the chart."""
        pts = np.atleast_2d(points)
        chart.check_clearance(pts, self.eps0 * np.sqrt(chart.dim) + extra, what="kernel support")

    def to_dict(self) -> dict:
        return {"eps0": self.eps0, "ratio": self.ratio, "levels": self.levels}
