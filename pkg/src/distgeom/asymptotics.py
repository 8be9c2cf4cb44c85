"""Numerical versions of the moderateness, negligibility and association predicates.

Everything is evaluated on a finite eps-net and judged from log-log slope
fits, so verdicts are statements about the tested corpus only:

* ``moderate(N)``: sup-norms grow no faster than ``eps**-N`` (slope >= -N - tol);
* ``negligible_to_order(m)``: they decay at least like ``eps**m`` (slope >= m - tol);
* ``inconclusive``: the log-log fit is too poor to judge (residual above the cutoff).

Values at or below ``noise_floor`` carry no scaling information (they are
quadrature or round-off noise) and are dropped from fits.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .chart import Box, ChartError, TensorField, TestDensity, gradient, cells_rule, composite_rule, graded_cells, tensor_rule
from .calculus import _lie_values, lie_derivative
from .embedding import GeneralizedField
from .kernels import EpsNet, KernelLike, bump
from .transport import IdentityTransport, TransportOperator

SCHEMA_VERSION = "1.0"

SLOPE_TOL = 0.2
RESIDUAL_CUTOFF = 0.5
NOISE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# fits


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residual: float
    used: list

    def to_dict(self):
        return asdict(self)


def fit_slope(eps, values, noise_floor: float = NOISE_FLOOR) -> SlopeFit:
    """Least-squares slope of ``log|v|`` against ``log eps``.

    ``residual`` is the largest absolute deviation of the fit in natural
    log units. Levels with ``|v| <= noise_floor`` are left out; with fewer
    than two usable levels the slope is reported as +inf (nothing
    measurable above the floor) and the residual as 0.
    """
    e = np.asarray(eps, dtype=float)
    v = np.abs(np.asarray(values, dtype=float))
    used = np.isfinite(v) & (v > noise_floor)
    if used.sum() < 2:
        return SlopeFit(math.inf, -math.inf, 0.0, used.tolist())
    le, lv = np.log(e[used]), np.log(v[used])
    A = np.vstack([le, np.ones_like(le)]).T
    (s, c), *_ = np.linalg.lstsq(A, lv, rcond=None)
    resid = float(np.max(np.abs(lv - (s * le + c))))
    return SlopeFit(float(s), float(c), resid, used.tolist())


def local_slopes(eps, values) -> list:
    e = np.log(np.asarray(eps, dtype=float))
    v = np.log(np.abs(np.asarray(values, dtype=float)))
    return (np.diff(v) / np.diff(e)).tolist()


def convergence_order(eps, values, window: int = 3, spread: float = 0.3):
    """Order ``p`` of the leading error term from consecutive-difference ratios.

    Returns ``None`` when the last ``window`` estimates disagree by more than
    ``spread`` or are outside ``[0.5, 8]``.
    """
    e = np.asarray(eps, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(v) < window + 2:
        return None
    d = np.diff(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(d[:-1] / d[1:])
        step = e[:-1][:-1] / e[1:][:-1]
        p = np.log(ratio) / np.log(step)
    p = p[-window:]
    if not np.all(np.isfinite(p)) or np.ptp(p) > spread or not 0.5 <= np.median(p) <= 8:
        return None
    return float(np.median(p))


def richardson(eps, values, order: float | None = None, default_order: float = 1.0):
    """Extrapolate ``v(eps) -> v(0)`` from the two finest levels.

    Assumes ``v(eps) = L + C eps^p``; ``p`` is detected from the data when
    possible and falls back to ``default_order``. Returns ``(L, p)``.
    """
    e = np.asarray(eps, dtype=float)
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v[-1]), None
    p = order if order is not None else convergence_order(e, v)
    p = default_order if p is None else p
    t = (e[-2] / e[-1]) ** p
    return float(v[-1] + (v[-1] - v[-2]) / (t - 1.0)), float(p)


# ---------------------------------------------------------------------------
# scaling


def verdict_for(slope: float, residual: float, mode: str, order: float,
                tol: float = SLOPE_TOL, cutoff: float = RESIDUAL_CUTOFF) -> str:
    if residual > cutoff:
        return "inconclusive"
    if mode == "moderate":
        need = math.ceil(max(-slope - tol, 0.0) - 1e-12) if math.isfinite(slope) else 0
        return f"moderate({need})" if slope >= -order - tol else "not_moderate"
    if mode == "negligible":
        return f"negligible_to_order({order:g})" if slope >= order - tol else "not_negligible"
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class ScalingReport:
    quantity: str
    eps_values: list
    sup_norms: list
    fitted_slope: float
    residual: float
    verdict: str
    mode: str = "moderate"
    order: float = 0.0
    used: list = field(default_factory=list)
    probes: list = field(default_factory=list)
    worst_probe: str | None = None

    @property
    def passed(self) -> bool:
        return self.verdict.startswith(("moderate(", "negligible_to_order("))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probes"] = [p.to_dict() if isinstance(p, ScalingReport) else p for p in self.probes]
        for k in ("fitted_slope", "residual"):
            d[k] = _finite(d[k])
        return d

    def to_json(self) -> str:
        return dumps({"schema": SCHEMA_VERSION, "scaling": self.to_dict()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["eps", "sup_norm"])
        for e, s in zip(self.eps_values, self.sup_norms):
            w.writerow([repr(e), repr(s)])
        return buf.getvalue()


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def dumps(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (float, np.floating)):
            return _finite(float(o))
        return o

    return json.dumps(clean(obj), sort_keys=True, indent=2, default=default)


def sup_norm(values: np.ndarray) -> float:
    """Largest Frobenius norm of the component arrays (Euclidean frame)."""
    v = np.asarray(values, dtype=float)
    return float(np.max(np.sqrt(np.sum(v.reshape(len(v), -1) ** 2, axis=1))))


def scaling_report(label, eps, sups, mode="moderate", order=0.0, tol=SLOPE_TOL,
                   cutoff=RESIDUAL_CUTOFF, noise_floor=NOISE_FLOOR) -> ScalingReport:
    fit = fit_slope(eps, sups, noise_floor)
    if mode == "moderate" and not order:
        order = max(0.0, math.ceil(-fit.slope - tol - 1e-12)) if math.isfinite(fit.slope) else 0.0
    return ScalingReport(label, [float(e) for e in eps], [float(s) for s in sups], fit.slope,
                         fit.residual, verdict_for(fit.slope, fit.residual, mode, order, tol, cutoff),
                         mode, float(order), fit.used)


@dataclass
class Probe:
    """One tested expression: ``L_{X_l} .. L_{X_1} d1^j d2^k T``."""

    label: str
    transport: object = None
    kernel: object = None
    lie: tuple = ()


def build_probes(transport_dirs=(), kernel_dirs=(), lie_fields=(), j_max: int = 1, k_max: int = 1,
                 l_max: int = 2) -> list:
    """Corpus of probes with at most one transport and one kernel differential."""
    tdirs = [None] + list(transport_dirs)[: (len(transport_dirs) if j_max else 0)]
    kdirs = [None] + list(kernel_dirs)[: (len(kernel_dirs) if k_max else 0)]
    lies = [()]
    for l in range(1, l_max + 1):
        lies += list(itertools.product(lie_fields, repeat=l))
    probes = []
    for t, k, L in itertools.product(tdirs, kdirs, lies):
        parts = []
        if L:
            parts.append("L[" + ",".join(getattr(X, "label", "X") for X in L) + "]")
        if t is not None:
            parts.append(f"d1[{_label(t)}]")
        if k is not None:
            parts.append(f"d2[{_label(k)}]")
        probes.append(Probe(" ".join(parts) or "T", t, k, tuple(L)))
    return probes


def _label(obj):
    for attr in ("label", "provenance", "__name__"):
        if hasattr(obj, attr):
            return str(getattr(obj, attr))
    return type(obj).__name__


def _probe_field(T: GeneralizedField, probe: Probe) -> GeneralizedField:
    F = T
    if probe.transport is not None:
        F = F.d_transport(probe.transport)
    if probe.kernel is not None:
        F = F.d_kernel(probe.kernel)
    return F


def probe_values(T: GeneralizedField, probe: Probe, pts, upsilon, kernel, eps, step=None) -> np.ndarray:
    F = _probe_field(T, probe)
    rep = F.represent(upsilon, kernel, eps)
    for X in probe.lie:
        rep = lie_derivative(rep, _as_field(X), step)
    return rep(pts)


def _as_field(X):
    return X if isinstance(X, TensorField) else X.field


def sample_points(K: Box, foci, eps: float, per_axis: int = 4, cluster: int = 9) -> np.ndarray:
    """Grid on ``K`` plus an ``eps``-scaled cluster around every focus inside ``K``.

    Representatives of concentrated fields vary on the scale ``eps``, so a
    fixed grid alone would miss their sup as ``eps`` shrinks.
    """
    pts = [K.grid(per_axis)]
    offs = None
    for p in foci:
        p = np.asarray(p, dtype=float)
        if not K.contains(p)[0]:
            continue
        if offs is None:
            t = np.linspace(-1.0, 1.0, cluster)
            offs = np.stack(np.meshgrid(*[t] * K.dim, indexing="ij"), -1).reshape(-1, K.dim)
        c = p + eps * offs
        pts.append(c[K.contains(c)])
    return np.concatenate(pts)


def scaling_exponent(T: GeneralizedField, K: Box, net: EpsNet, *, upsilon: TransportOperator | None = None,
                     kernel: KernelLike | None = None, probes: Sequence[Probe] | None = None,
                     mode: str = "moderate", order: float = 0.0, per_axis: int = 4,
                     reference: GeneralizedField | None = None, tol: float = SLOPE_TOL,
                     cutoff: float = RESIDUAL_CUTOFF, noise_floor: float = NOISE_FLOOR,
                     label: str | None = None) -> ScalingReport:
    """Sup-norm scaling of ``T`` (minus ``reference`` if given) over samples of ``K``.

    With probes, each probe gets its own report and the overall verdict is
    that of the worst (smallest) slope.
    """
    upsilon = upsilon or IdentityTransport(T.dim)
    eps_vals = list(net)
    samples = [sample_points(K, T.focus_points(), e, per_axis) for e in eps_vals]
    chart = T.chart
    if chart is not None:
        chart.check_clearance(samples[0], T.clearance(eps_vals[0]), what="scaling sample")
    F = T if reference is None else T - reference
    probes = list(probes) if probes else [Probe("T")]
    reports = []
    for pr in probes:
        sups = [sup_norm(probe_values(F, pr, pts, upsilon, kernel, e)) for pts, e in zip(samples, eps_vals)]
        reports.append(scaling_report(pr.label, eps_vals, sups, mode, order, tol, cutoff, noise_floor))
    base = reports[0]
    if len(reports) == 1:
        base.quantity = label or T.label
        return base
    slopes = [r.fitted_slope for r in reports]
    worst = reports[int(np.argmin(slopes))]
    resid = max(r.residual for r in reports)
    if mode == "moderate" and not order:
        ords = [r.order for r in reports]
        order = max(ords)
    verdict = verdict_for(worst.fitted_slope, resid, mode, order, tol, cutoff)
    if any(r.verdict == "inconclusive" for r in reports):
        verdict = "inconclusive"
    return ScalingReport(label or T.label, base.eps_values, base.sup_norms, worst.fitted_slope, resid,
                         verdict, mode, float(order), base.used, reports, worst.quantity)


# ---------------------------------------------------------------------------
# test densities


def smooth_step(t) -> np.ndarray:
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def _fmt(c) -> str:
    return "(" + ",".join(f"{v:g}" for v in c) + ")"


def _tensor_density(scalar, coeff, valence, dim, support, label):
    c = np.ones(()) if coeff is None else np.asarray(coeff, dtype=float)
    shape = (dim,) * sum(valence)
    c = np.broadcast_to(c, shape).copy()

    def func(p):
        return scalar(p).reshape((-1,) + (1,) * len(shape)) * c

    return TestDensity(tuple(valence), dim, func, support, label)


def bump_density(center, radius: float, amplitude: float = 1.0, coeff=None, valence=(0, 0),
                 label: str | None = None) -> TestDensity:
    """Radial bump ``amplitude * e * exp(-1/(1 - |x-c|^2/R^2))``; equals ``amplitude`` at the centre."""
    c = np.asarray(center, dtype=float)
    dim = len(c)

    def scalar(p):
        s = np.linalg.norm(p - c, axis=1) / radius
        return amplitude * math.e * bump(s)

    return _tensor_density(scalar, coeff, valence, dim, Box.cube(c, radius),
                           label or f"bump(c={_fmt(c)},R={radius:g},A={amplitude:g})")


def plateau_density(center, inner: float, outer: float, amplitude: float = 1.0, coeff=None,
                    valence=(0, 0), label: str | None = None) -> TestDensity:
    """Equal to ``amplitude`` on the ball of radius ``inner``, zero beyond ``outer``."""
    c = np.asarray(center, dtype=float)
    dim = len(c)

    def scalar(p):
        r = np.linalg.norm(p - c, axis=1)
        return amplitude * smooth_step((outer - r) / (outer - inner))

    return _tensor_density(scalar, coeff, valence, dim, Box.cube(c, outer),
                           label or f"plateau(c={_fmt(c)},{inner:g},{outer:g})")


def density_lie_derivative(psi: TestDensity, Z: TensorField, step: float = 1e-4) -> TestDensity:
    """Lie derivative of a weight-one tensor density.

    ``L_Z Psi = Z^c d_c Psi + (d_c Z^c) Psi`` plus the usual index terms,
    so that ``<L_Z T, Psi> = -<T, L_Z Psi>`` for any field ``T``.
    """
    P = TensorField(tuple(psi.valence), psi.dim, psi)

    def func(p):
        dZ = gradient(Z, p, step)
        vals = _lie_values(psi(p), gradient(P, p, step), Z(p), dZ, psi.valence)
        div = np.einsum("ncc->n", dZ)
        return vals + div.reshape((-1,) + (1,) * sum(psi.valence)) * psi(p)

    return TestDensity(tuple(psi.valence), psi.dim, func, psi.support, f"L[{psi.label}]")


# ---------------------------------------------------------------------------
# pairing and association


@dataclass
class PairingRule:
    """Quadrature used for ``int T Psi`` over the support of ``Psi``.

    Cells are graded toward point foci down to ``h_factor * eps``; within
    ``reach * eps`` of a focus they stay at that size, which derivative
    integrands of kernels need. For fields with no foci a uniform grid of
    ``cells`` per axis is used, broken at the kink ``planes``.
    """

    order: int = 6
    cells: int = 8
    h_factor: float = 0.25
    ratio: float = 1.0
    h_floor: float = 0.0
    planes: tuple = ()
    reach: float = 0.0

    def _breaks(self, axis, a, b, eps):
        br = set(np.linspace(a, b, self.cells + 1).tolist())
        for ax, v in self.planes:
            if ax != axis or not a < v < b:
                continue
            br.add(float(v))
            # geometric ladder resolving the eps-wide smoothed kink
            h = max(self.h_factor * (eps or (b - a)), self.h_floor)
            while h < b - a:
                br.update(t for t in (v - h, v + h) if a < t < b)
                h *= 2.0
        return np.array(sorted(br))

    def nodes(self, box: Box, foci, eps):
        foci = [f for f in foci if box.contains(f)[0]]
        if foci and eps:
            h = max(self.h_factor * eps, self.h_floor)
            lo, hi = graded_cells(box, foci, h, self.ratio, reach=self.reach * eps)
            return cells_rule(lo, hi, self.order)
        rules = [composite_rule(self._breaks(i, a, b, eps), self.order)
                 for i, (a, b) in enumerate(zip(box.lower, box.upper))]
        return tensor_rule(rules)


def _union_box(boxes) -> Box:
    lo = np.min([b.lower for b in boxes], axis=0)
    hi = np.max([b.upper for b in boxes], axis=0)
    return Box(tuple(lo.tolist()), tuple(hi.tolist()))


def pairing_many(T: GeneralizedField, psis: Sequence[TestDensity], upsilon=None, kernel=None, eps=None,
                 rule: PairingRule | None = None, density: str | None = None, chunk: int = 4096) -> list:
    """Pairings of ``T`` with several densities from one evaluation of ``T``.

    The quadrature covers the union of the supports; each density vanishes
    outside its own support, so the shared rule is exact bookkeeping.
    """
    rule = rule or PairingRule()
    box = psis[0].support if len(psis) == 1 else _union_box([p.support for p in psis])
    nodes, weights = rule.nodes(box, T.focus_points(), eps)
    upsilon = upsilon or IdentityTransport(T.dim)
    totals = [0.0] * len(psis)
    for s in range(0, len(nodes), chunk):
        p, w = nodes[s:s + chunk], weights[s:s + chunk]
        pv = [psi(p).reshape(len(p), -1) for psi in psis]
        keep = np.any(np.concatenate(pv, axis=1) != 0.0, axis=1)
        if not keep.any():
            continue
        p, w = p[keep], w[keep]
        vals = T.evaluate(p, upsilon, kernel, eps)
        if density == "volume":
            vals = vals * T.bundle.compute(p, upsilon, kernel, eps)["volume"].reshape(
                (-1,) + (1,) * T.rank)
        vals = vals.reshape((len(p),) + T.shape)
        for i, psi in enumerate(psis):
            integrand = psi.pair_values(vals, p)
            if not np.all(np.isfinite(integrand)):
                raise ChartError("non-finite pairing integrand")
            totals[i] += float(np.dot(w, integrand))
    return totals


def pairing(T: GeneralizedField, psi: TestDensity, upsilon=None, kernel=None, eps=None,
            rule: PairingRule | None = None, density: str | None = None, chunk: int = 4096) -> float:
    """``int T(U, w, eps)(x) . Psi(x) dx`` with optional density factor.

    ``density="volume"`` multiplies by ``sqrt|det g|`` where ``T`` is a
    curvature field carrying its bundle.
    """
    return pairing_many(T, [psi], upsilon, kernel, eps, rule, density, chunk)[0]


@dataclass
class AssociationReport:
    label: str
    choice: str
    eps_values: list
    pairings: list
    extrapolated_limit: float
    order: float | None
    slope: float
    residual: float
    target: float | None
    tol_assoc: float
    verdict: str
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "associated"

    def to_dict(self):
        d = asdict(self)
        for k in ("slope", "residual"):
            d[k] = _finite(d[k])
        return d


@dataclass
class AssociationResult:
    reports: list
    spread: list
    spread_slope: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def to_dict(self):
        return {"reports": [r.to_dict() for r in self.reports], "spread": self.spread,
                "spread_slope": _finite(self.spread_slope)}

    def to_json(self):
        return dumps({"schema": SCHEMA_VERSION, "association": self.to_dict()})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["choice", "eps", "pairing"])
        for r in self.reports:
            for e, v in zip(r.eps_values, r.pairings):
                w.writerow([r.choice, repr(e), repr(v)])
        return buf.getvalue()


def association_verdict(limit, errors_fit: SlopeFit, target, tol_assoc, final_error=None) -> str:
    if target is None:
        return "inconclusive"
    if not math.isfinite(limit):
        return "inconclusive"
    if abs(limit - target) > tol_assoc:
        return "not_associated"
    if final_error is not None and final_error <= tol_assoc * 1e-3:
        return "associated"
    if errors_fit.slope > 0:
        return "associated"
    return "inconclusive"


def association_report(label, choice, eps, vals, target=None, tol_assoc=1e-3, order=None,
                       noise_floor=NOISE_FLOOR, errors=()) -> AssociationReport:
    eps = list(map(float, eps))
    vals = list(map(float, vals))
    limit, p = richardson(eps, vals, order)
    ref = target if target is not None else limit
    errs = [v - ref for v in vals]
    fit = fit_slope(eps, errs, noise_floor)
    final = abs(errs[-1]) if errs else None
    verdict = association_verdict(limit, fit, target, tol_assoc, final)
    return AssociationReport(label, choice, eps, vals, limit, p, fit.slope, fit.residual, target,
                             tol_assoc, verdict, list(errors))


def associate(T: GeneralizedField, psi: TestDensity, net: EpsNet, choices: Sequence[tuple],
              target: float | None = None, tol_assoc: float = 1e-3, rule: PairingRule | None = None,
              density: str | None = None, order: float | None = None, label: str | None = None,
              noise_floor: float = NOISE_FLOOR) -> AssociationResult:
    """Pair ``T`` with ``Psi`` over the net for every ``(name, Upsilon, omega)`` choice.

    Failures at individual levels are recorded and the level skipped.
    """
    reports = []
    table = []
    for name, U, w in choices:
        eps_ok, vals, errors = [], [], []
        for e in net:
            try:
                vals.append(pairing(T, psi, U, w, e, rule, density))
                eps_ok.append(e)
            except ChartError as exc:
                errors.append({"eps": e, "error": str(exc)})
        reports.append(association_report(label or T.label, name, eps_ok, vals, target, tol_assoc,
                                          order, noise_floor, errors))
        table.append(dict(zip(eps_ok, vals)))
    eps_all = [e for e in net if all(e in t for t in table)]
    spread = [float(np.ptp([t[e] for t in table])) for e in eps_all] if len(table) > 1 else [0.0] * len(eps_all)
    sfit = fit_slope(eps_all, spread, noise_floor) if len(table) > 1 else SlopeFit(math.inf, 0, 0, [])
    return AssociationResult(reports, spread, sfit.slope)


# ---------------------------------------------------------------------------
# decay profiles


@dataclass
class RegimeFit:
    alpha: float
    beta: float
    amplitude: float
    points: int
    sparse: bool

    def to_dict(self):
        return {k: _finite(v) if isinstance(v, float) else v for k, v in asdict(self).items()}


@dataclass
class DecayProfile:
    center: list
    R0: float
    rows: list           # (eps, r, max|T|, mean|T|)
    inner: RegimeFit
    outer: RegimeFit
    sensitivity: dict
    local_outer_slopes: list = field(default_factory=list)

    def to_dict(self):
        return {"center": self.center, "R0": self.R0, "rows": self.rows, "inner": self.inner.to_dict(),
                "outer": self.outer.to_dict(),
                "sensitivity": {k: {"inner": v[0].to_dict(), "outer": v[1].to_dict()}
                                for k, v in self.sensitivity.items()},
                "local_outer_slopes": self.local_outer_slopes}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["eps", "r", "max_abs", "mean_abs"])
        for row in self.rows:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _fit_regimes(rows, R0, floor, min_points=3):
    rows = np.asarray(rows, dtype=float)
    eps, r, mx = rows[:, 0], rows[:, 1], rows[:, 2]
    ok = mx > floor
    # inner: sup over r < eps R0 at each eps, against eps
    inner_eps, inner_sup = [], []
    for e in np.unique(eps):
        sel = (eps == e) & (r < e * R0) & ok
        if sel.any():
            inner_eps.append(e)
            inner_sup.append(mx[sel].max())
    if len(inner_eps) >= 2:
        f = fit_slope(inner_eps, inner_sup, floor)
        inner = RegimeFit(f.slope, 0.0, float(np.exp(f.intercept)), len(inner_eps), len(inner_eps) < min_points)
    else:
        inner = RegimeFit(math.nan, math.nan, math.nan, len(inner_eps), True)
    sel = (r > eps * R0) & ok
    if sel.sum() >= 3 and len(np.unique(eps[sel])) >= 2 and len(np.unique(r[sel])) >= 2:
        A = np.vstack([np.log(eps[sel]), np.log(r[sel]), np.ones(sel.sum())]).T
        (a, b, c), *_ = np.linalg.lstsq(A, np.log(mx[sel]), rcond=None)
        outer = RegimeFit(float(a), float(b), float(np.exp(c)), int(sel.sum()), int(sel.sum()) < min_points)
    else:
        outer = RegimeFit(math.nan, math.nan, math.nan, int(sel.sum()), True)
    return inner, outer


def decay_profile(T: GeneralizedField, center, radii, net: EpsNet, *, upsilon=None, kernel=None,
                  R0: float | None = None, angles: int = 8, sensitivity=(1.0, 2.0, 3.0, 4.0),
                  floor: float = NOISE_FLOOR, outer_max_ratio: float | None = None) -> DecayProfile:
    """Sample ``|T_eps|`` on circles (2D) or axis/diagonal rays around ``center``.

    ``R0`` defaults to twice the support factor ``sqrt(n)``. Rows with
    ``r > outer_max_ratio * eps`` can be dropped from the outer fit to
    keep it on the asymptotic tail only when requested.
    """
    c = np.asarray(center, dtype=float)
    n = len(c)
    R0 = 2.0 * math.sqrt(n) if R0 is None else float(R0)
    upsilon = upsilon or IdentityTransport(n)
    if n == 2:
        th = (np.arange(angles) + 0.5) * 2 * np.pi / angles
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        dirs = np.concatenate([np.eye(n), -np.eye(n)])
    rows = []
    for e in net:
        pts, rr = [], []
        for r in radii:
            if r == 0:
                pts.append(c[None, :])
                rr.append([0.0])
            else:
                pts.append(c + r * dirs)
                rr.append([r] * len(dirs))
        pts = np.concatenate(pts)
        rr = np.concatenate(rr)
        vals = T.evaluate(pts, upsilon, kernel, e).reshape(len(pts), -1)
        mag = np.sqrt(np.sum(vals**2, axis=1))
        for r in radii:
            sel = rr == r
            rows.append([float(e), float(r), float(mag[sel].max()), float(mag[sel].mean())])
    inner, outer = _fit_regimes(rows, R0, floor)
    sens = {f"{s:g}": _fit_regimes(rows, s, floor) for s in sensitivity}
    arr = np.asarray(rows)
    local = []
    e_last = arr[:, 0].min()
    tail = arr[(arr[:, 0] == e_last) & (arr[:, 1] > e_last * R0)]
    if len(tail) >= 2:
        local = local_slopes(tail[:, 1], tail[:, 2])
    return DecayProfile(c.tolist(), R0, rows, inner, outer, sens, local)
