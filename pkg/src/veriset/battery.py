"""Interval observer for a Lithium-ion equivalent-circuit model and
set-based identification of the open-circuit-voltage characteristic.

States are (sigma, v_TS, v_TL): state of charge and the two RC-network
voltages.  The quasi-linear system matrix is diagonal with entries
{0, -1/(C_TS R_TS), -1/(C_TL R_TL)}; the scalar output is the
offset-corrected terminal voltage

    y* = eta_oc(sigma) * sigma - v_TS - v_TL,

so the observer's output row is C(sigma) = [eta_oc(sigma), -1, -1] and the
open-circuit estimate is recovered as voc = y* + v_TS + v_TL.  With the
gain H = [h1, 0, 0]^T the observer matrix A - H C stays Metzler for every
h1 >= 0 (the new off-diagonal entries are +h1), re-verified every step
together with the stability of its (1,1) entry.

The factor (e^{v1 sigma} - 1)/sigma of the OCV fit is evaluated through
g(u) = (e^u - 1)/u = integral_0^1 e^{ut} dt, whose truncated power series
with a rigorous tail bound gives guaranteed values; g and g' are strictly
increasing (all derivatives of g are positive integrals), so interval
arguments reduce to endpoint evaluation.  The series itself is summed in
floats with a forward rounding-error bound folded into the enclosure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import rounding as rnd
from .expr import hc4_contract, var
from .interval import EMPTY, Interval, IntervalError, IntervalMatrix, IntervalVector
from .reach import _picard_enclosure, metzler_check

__all__ = [
    "IntervalPoly",
    "BatteryParams",
    "BatteryState",
    "GammaBox",
    "OCVTube",
    "ObserverStructureError",
    "g_factor",
    "g_factor_deriv",
    "eta_oc",
    "eta_oc_deriv",
    "eta_oc_range",
    "voc_curve",
    "voc_slope",
    "curve_consistent_box",
    "build_system",
    "observer_step",
    "voc_estimate",
    "tube_update",
    "voc_contract",
    "min_stabilizing_h1",
]

_EPS = 2.220446049250313e-16


class ObserverStructureError(RuntimeError):
    """Observer matrix violates the Metzler or stability requirements."""


@dataclass(frozen=True)
class IntervalPoly:
    """Polynomial in sigma with interval coefficients (ascending order)."""

    coeffs: tuple[Interval, ...]

    @staticmethod
    def from_nominal(vals: Sequence[float], rel_radius: float = 0.0) -> "IntervalPoly":
        cs = []
        for v in vals:
            r = abs(v) * rel_radius
            cs.append(Interval(v - r, v + r))
        return IntervalPoly(tuple(cs))

    def eval_iv(self, s: Interval) -> Interval:
        acc = Interval(0.0, 0.0)
        for c in reversed(self.coeffs):
            acc = acc * s + c
        return acc

    def eval_pt(self, s: float) -> float:
        acc = 0.0
        for c in reversed(self.coeffs):
            acc = acc * s + c.mid()
        return acc

    def deriv(self) -> "IntervalPoly":
        if len(self.coeffs) <= 1:
            return IntervalPoly((Interval(0.0, 0.0),))
        return IntervalPoly(
            tuple(c * float(k) for k, c in enumerate(self.coeffs) if k >= 1)
        )


def _g_point(x: float) -> tuple[float, float]:
    """Float series value of g(x) = (e^x - 1)/x with a guaranteed error bound
    covering both the truncation tail and the float summation rounding."""
    term = 1.0
    acc = 1.0
    absacc = 1.0
    k = 1
    while True:
        term = term * x / (k + 1.0)
        acc += term
        absacc += abs(term)
        k += 1
        if abs(term) <= 1e-20 * absacc or k > 170:
            break
    ax = abs(x)
    try:
        tail = (ax**k) * math.exp(min(ax, 700.0)) / math.factorial(k + 1)
    except OverflowError:  # pragma: no cover
        tail = math.inf
    err = 1.1 * (7e-16 * k * absacc + tail)
    return acc, err


def _gp_point(x: float) -> tuple[float, float]:
    """Float series value of g'(x) = sum_{k>=1} k x^{k-1}/(k+1)! with a
    guaranteed error bound."""
    term = 0.5
    acc = 0.5
    absacc = 0.5
    k = 2
    while True:
        term = term * x * (float(k) / (float(k - 1) * float(k + 1)))
        acc += term
        absacc += abs(term)
        k += 1
        if abs(term) <= 1e-20 * absacc or k > 170:
            break
    ax = abs(x)
    try:
        tail = (ax ** (k - 1)) * math.exp(min(ax, 700.0)) / math.factorial(k - 1)
    except OverflowError:  # pragma: no cover
        tail = math.inf
    err = 1.1 * (9e-16 * k * absacc + tail)
    return acc, err


def g_factor(u: Interval) -> Interval:
    """Guaranteed enclosure of g(u) = (e^u - 1)/u (g(0) = 1); g is strictly
    increasing, so endpoint evaluation is exact up to the series bounds."""
    if u.is_empty:
        return EMPTY
    vlo, elo = _g_point(u.lo)
    vhi, ehi = _g_point(u.hi)
    return Interval(rnd.sub_rd(vlo, elo), rnd.add_ru(vhi, ehi))


def g_factor_deriv(u: Interval) -> Interval:
    """Guaranteed enclosure of g'(u); also strictly increasing."""
    if u.is_empty:
        return EMPTY
    vlo, elo = _gp_point(u.lo)
    vhi, ehi = _gp_point(u.hi)
    return Interval(rnd.sub_rd(vlo, elo), rnd.add_ru(vhi, ehi))


@dataclass
class BatteryParams:
    """Equivalent-circuit parameters: capacity, RC fits in sigma, OCV fit."""

    c_bat: float
    r_ts: IntervalPoly
    r_tl: IntervalPoly
    c_ts: IntervalPoly
    c_tl: IntervalPoly
    v: tuple[Interval, ...]  # v0..v5; v2 is a pure output offset

    def __post_init__(self):
        if self.c_bat <= 0.0:
            raise IntervalError("battery capacity must be positive")
        if len(self.v) != 6:
            raise IntervalError("six OCV coefficients v0..v5 required")
        full = Interval(0.0, 1.0)
        for name in ("r_ts", "r_tl", "c_ts", "c_tl"):
            enc = getattr(self, name).eval_iv(full)
            if not enc.lo > 0.0:
                raise IntervalError(f"{name} enclosure must stay positive on sigma in [0,1]")


def eta_oc(params: BatteryParams, sigma: Interval) -> Interval:
    """Quasi-linear OCV output factor: voc~(sigma) = eta_oc(sigma) * sigma."""
    v = params.v
    u = v[1] * sigma
    return v[0] * v[1] * g_factor(u) + v[3] + v[4] * sigma + v[5] * sigma.sqr()


def eta_oc_deriv(params: BatteryParams, sigma: Interval) -> Interval:
    """Enclosure of d(eta_oc)/d(sigma), used in the step remainder bound."""
    v = params.v
    u = v[1] * sigma
    return v[0] * v[1].sqr() * g_factor_deriv(u) + v[4] + v[5] * sigma * 2.0


def eta_oc_range(params: BatteryParams, sigma: Interval, pieces: int = 32) -> Interval:
    """Tightened eta_oc enclosure over a wide sigma range via subdivision
    (counters the dependency effect of the single-shot evaluation)."""
    if sigma.is_degenerate or pieces <= 1:
        return eta_oc(params, sigma)
    acc = EMPTY
    step = (sigma.hi - sigma.lo) / pieces
    for i in range(pieces):
        a = sigma.lo + i * step
        b = sigma.hi if i == pieces - 1 else a + step
        acc = acc.hull(eta_oc(params, Interval(a, b)))
    return acc


def voc_curve(params: BatteryParams, sigma: Interval) -> Interval:
    """Offset-corrected open-circuit voltage voc~(sigma) = eta_oc * sigma,
    in the multiplied-through form that avoids the sigma dependency."""
    v = params.v
    u = v[1] * sigma
    poly = (v[3] + v[4] * sigma + v[5] * sigma.sqr()) * sigma
    return v[0] * v[1] * g_factor(u) * sigma + poly


def voc_slope(params: BatteryParams, sigma: Interval) -> Interval:
    """Enclosure of d(voc~)/d(sigma) = eta + eta' * sigma."""
    return eta_oc(params, sigma) + eta_oc_deriv(params, sigma) * sigma


def build_system(
    params: BatteryParams, sigma: Interval
) -> tuple[IntervalMatrix, IntervalVector, Interval]:
    """Interval A, b and output factor over the given state-of-charge range."""
    s = sigma.intersect(Interval(0.0, 1.0))
    if s.is_empty:
        raise IntervalError("sigma range outside [0, 1]")
    zero = Interval(0.0, 0.0)
    one = Interval(1.0, 1.0)
    a11 = -(one / (params.c_ts.eval_iv(s) * params.r_ts.eval_iv(s)))
    a22 = -(one / (params.c_tl.eval_iv(s) * params.r_tl.eval_iv(s)))
    A = IntervalMatrix([[zero, zero, zero], [zero, a11, zero], [zero, zero, a22]])
    b = IntervalVector(
        [
            Interval.point(-1.0) / Interval.point(params.c_bat),
            one / params.c_ts.eval_iv(s),
            one / params.c_tl.eval_iv(s),
        ]
    )
    return A, b, eta_oc(params, s)


@dataclass
class BatteryState:
    box: IntervalVector  # (sigma, v_TS, v_TL)

    def __post_init__(self):
        if len(self.box) != 3:
            raise IntervalError("battery state has three components")
        clipped = self.box[0].intersect(Interval(0.0, 1.0))
        if clipped.is_empty:
            raise IntervalError("state-of-charge bracket left [0, 1]")
        self.box = self.box.replace(0, clipped)


def _observer_matrices(
    params: BatteryParams, sigma: Interval, h1: float
) -> tuple[IntervalMatrix, IntervalVector, Interval]:
    A, b, c_eta = build_system(params, sigma)
    rows = [list(A.row(i)) for i in range(3)]
    # output row C = [eta_oc, -1, -1]; A_O = A - H C with H = [h1, 0, 0]^T
    rows[0][0] = rows[0][0] - c_eta * h1
    rows[0][1] = rows[0][1] + Interval.point(h1)
    rows[0][2] = rows[0][2] + Interval.point(h1)
    return IntervalMatrix(rows), b, c_eta


def min_stabilizing_h1(params: BatteryParams, margin: float = 1e-6) -> float:
    """Smallest gain keeping sup of the observer's (1,1) entry <= -margin
    over the whole state-of-charge range; requires eta_oc > 0 on [0, 1]."""
    eta = eta_oc_range(params, Interval(0.0, 1.0))
    if not eta.lo > 0.0:
        raise ObserverStructureError("eta_oc must be positive on [0, 1] for a stable gain")
    return margin / eta.lo


def observer_step(
    state: BatteryState,
    u: float,
    y_box: Interval,
    h1: float,
    params: BatteryParams,
    dt: float,
) -> BatteryState:
    """One rigorous bracketing step of the interval observer.

    The state-of-charge row exploits the monotonicity of the output map: its
    bracket derivatives anchor the curve evaluation at the respective bound,

        sigma_lo' = inf(b1 u) + h1 y_lo - h1 sup(voc~(sigma_lo)) + h1 vTS_lo + h1 vTL_lo,

    (sup side symmetric), which keeps the bracket contracting instead of
    feeding the quasi-linear eta-range back into itself.  The RC rows use
    the anchored cooperative form with interval entries over the a-priori
    state-of-charge range, and a second-order Taylor remainder (including
    the sigma-dependence of the coefficients) dominates the truncation.
    """
    if y_box.is_empty:
        raise IntervalError("empty measurement box")
    if h1 <= 0.0:
        raise IntervalError("observer gain h1 must be positive")
    box = state.box
    inj = Interval.point(h1) * y_box
    u_iv = Interval.point(u)

    # a-priori enclosure: quasi-linear matrices over a sigma range that is
    # re-verified to cover the flow; the same (wider) matrices serve the
    # checks, the RC rows, and the remainder below, which is sound since
    # every interval only widens
    sig_outer = box[0].inflate(1e-3).intersect(Interval(0.0, 1.0))
    for _ in range(8):
        A_out, b_out, eta_out = _observer_matrices(params, sig_outer, h1)
        off = IntervalVector([b_out[0] * u_iv + inj, b_out[1] * u_iv, b_out[2] * u_iv])
        apriori = _picard_enclosure(lambda bx: A_out.mat_vec(bx) + off, box, dt)
        sig_ap = apriori[0].intersect(Interval(0.0, 1.0))
        if sig_outer.encloses(sig_ap):
            break
        sig_outer = sig_outer.hull(sig_ap).inflate(1e-3).intersect(Interval(0.0, 1.0))
    else:  # pragma: no cover
        raise IntervalError("sigma range failed to stabilize; reduce dt")
    apriori = apriori.replace(0, sig_ap)

    if not metzler_check(A_out):
        raise ObserverStructureError("observer matrix lost the Metzler property")
    if not A_out[0, 0].hi < 0.0:
        raise ObserverStructureError(
            "observer (1,1) entry not negative: increase h1 or fix eta_oc"
        )
    deta = eta_oc_deriv(params, sig_outer)
    slope = eta_out + deta * sig_outer
    if 1.0 - dt * h1 * slope.mag() < 0.0:
        raise IntervalError("dt too large for the anchored output row")
    for i in (1, 2):
        if 1.0 + dt * A_out[i, i].lo < 0.0:
            raise IntervalError("dt too large for the anchored RC rows")

    # second-derivative bound over the a-priori enclosure:
    #   x'' = A_O x' + (dA_O/dsigma) sigma' x + (db/dsigma) sigma' u
    fdot = A_out.mat_vec(apriori) + off
    accel = A_out.mat_vec(fdot)
    sdot = fdot[0]
    rts, drts = params.r_ts.eval_iv(sig_outer), params.r_ts.deriv().eval_iv(sig_outer)
    cts, dcts = params.c_ts.eval_iv(sig_outer), params.c_ts.deriv().eval_iv(sig_outer)
    rtl, drtl = params.r_tl.eval_iv(sig_outer), params.r_tl.deriv().eval_iv(sig_outer)
    ctl, dctl = params.c_tl.eval_iv(sig_outer), params.c_tl.deriv().eval_iv(sig_outer)
    da11 = (dcts * rts + cts * drts) / (cts * rts).sqr()
    da22 = (dctl * rtl + ctl * drtl) / (ctl * rtl).sqr()
    extra0 = (-(deta * h1)) * sdot * apriori[0]
    extra1 = da11 * sdot * apriori[1] + (-(dcts / cts.sqr())) * sdot * u_iv
    extra2 = da22 * sdot * apriori[2] + (-(dctl / ctl.sqr())) * sdot * u_iv
    accel = accel + IntervalVector([extra0, extra1, extra2])

    v, w = box.lo(), box.hi()
    half_sq = (Interval.point(dt) * Interval.point(dt)) * Interval.point(0.5)

    # state-of-charge row: monotone anchored bracket
    b0u = b_out[0] * u_iv
    curve_v = voc_curve(params, Interval.point(v[0]))
    curve_w = voc_curve(params, Interval.point(w[0]))
    lo0_iv = b0u + Interval.point(h1 * y_box.lo) - curve_v * h1 \
        + Interval.point(h1) * Interval.point(v[1]) + Interval.point(h1) * Interval.point(v[2])
    hi0_iv = b0u + Interval.point(h1 * y_box.hi) - curve_w * h1 \
        + Interval.point(h1) * Interval.point(w[1]) + Interval.point(h1) * Interval.point(w[2])
    rem0 = half_sq * accel[0]
    new_lo = [rnd.add_rd(rnd.add_rd(v[0], rnd.mul_rd(dt, lo0_iv.lo)), rem0.lo)]
    new_hi = [rnd.add_ru(rnd.add_ru(w[0], rnd.mul_ru(dt, hi0_iv.hi)), rem0.hi)]

    # RC rows: anchored cooperative bracket with quasi-linear entries
    for i in (1, 2):
        lo = (A_out[i, i] * Interval.point(v[i])).lo
        hi = (A_out[i, i] * Interval.point(w[i])).hi
        for j in range(3):
            if j == i:
                continue
            prod = A_out[i, j] * box[j]
            lo = rnd.add_rd(lo, prod.lo)
            hi = rnd.add_ru(hi, prod.hi)
        lo = rnd.add_rd(lo, off[i].lo)
        hi = rnd.add_ru(hi, off[i].hi)
        rem = half_sq * accel[i]
        new_lo.append(rnd.add_rd(rnd.add_rd(v[i], rnd.mul_rd(dt, lo)), rem.lo))
        new_hi.append(rnd.add_ru(rnd.add_ru(w[i], rnd.mul_ru(dt, hi)), rem.hi))
    return BatteryState(IntervalVector.from_bounds(new_lo, new_hi))


@dataclass(frozen=True)
class GammaBox:
    """One identification sample: sigma range x open-circuit-voltage range."""

    sigma: Interval
    voc: Interval

    def __post_init__(self):
        if self.sigma.is_empty or self.voc.is_empty:
            raise IntervalError("empty identification box")


def voc_estimate(state: BatteryState, y_m: Interval) -> GammaBox:
    """Open-circuit-voltage box from the corrected terminal measurement and
    the estimated RC voltages: voc = y* + v_TS + v_TL, paired with sigma."""
    voc = y_m + state.box[1] + state.box[2]
    return GammaBox(state.box[0], voc)


def curve_consistent_box(params: BatteryParams, g: GammaBox) -> GammaBox:
    """Widen the voltage range so the box bounds the OCV curve over its
    whole sigma range (a raw box only pins the curve at the unknown true
    state of charge inside it); required before boxes with overlapping
    sigma ranges may be intersected."""
    growth = voc_slope(params, g.sigma).mag() * g.sigma.width()
    return GammaBox(g.sigma, g.voc.inflate(growth))


@dataclass
class OCVTube:
    """Sigma-disjoint, ascending list of (sigma, voc) segments."""

    segments: list[GammaBox] = field(default_factory=list)
    conflict_flags: int = 0

    def copy(self) -> "OCVTube":
        return OCVTube(list(self.segments), self.conflict_flags)

    def area(self) -> float:
        return sum(s.sigma.width() * s.voc.width() for s in self.segments)

    def sigma_cover(self) -> float:
        return sum(s.sigma.width() for s in self.segments)

    def voc_at(self, sigma: float) -> Optional[Interval]:
        for s in self.segments:
            if s.sigma.contains(sigma):
                return s.voc
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sigma_lo", "sigma_hi", "voc_lo", "voc_hi", "flag"])
            for s in self.segments:
                wr.writerow(
                    [repr(s.sigma.lo), repr(s.sigma.hi), repr(s.voc.lo), repr(s.voc.hi), "0"]
                )


def _merge_adjacent(segments: list[GammaBox]) -> list[GammaBox]:
    out: list[GammaBox] = []
    for seg in segments:
        if out:
            prev = out[-1]
            if (
                prev.sigma.hi == seg.sigma.lo
                and prev.voc.lo == seg.voc.lo
                and prev.voc.hi == seg.voc.hi
            ):
                out[-1] = GammaBox(Interval(prev.sigma.lo, seg.sigma.hi), prev.voc)
                continue
        out.append(seg)
    return out


def tube_update(tube: OCVTube, g: GammaBox) -> OCVTube:
    """Insert one identification box by splitting on sigma breakpoints and
    intersecting voltage ranges on overlaps.

    An empty voltage intersection marks a model/measurement conflict: the
    narrower of the two conflicting ranges is kept and a flag is counted,
    the run is never aborted.  Adjacent segments with identical voltage
    ranges are coalesced.
    """
    new_segments: list[GammaBox] = []
    flags = tube.conflict_flags
    remaining = [g]  # parts of g's sigma range not covered by existing segments
    for seg in tube.segments:
        ov = seg.sigma.intersect(g.sigma)
        if ov.is_empty or ov.is_degenerate:
            new_segments.append(seg)
            continue
        if seg.sigma.lo < ov.lo:
            new_segments.append(GammaBox(Interval(seg.sigma.lo, ov.lo), seg.voc))
        meet = seg.voc.intersect(g.voc)
        if meet.is_empty:
            flags += 1
            meet = seg.voc if seg.voc.width() <= g.voc.width() else g.voc
        new_segments.append(GammaBox(ov, meet))
        if ov.hi < seg.sigma.hi:
            new_segments.append(GammaBox(Interval(ov.hi, seg.sigma.hi), seg.voc))
        still = []
        for piece in remaining:
            cut = piece.sigma.intersect(ov)
            if cut.is_empty or cut.is_degenerate:
                still.append(piece)
                continue
            if piece.sigma.lo < cut.lo:
                still.append(GammaBox(Interval(piece.sigma.lo, cut.lo), piece.voc))
            if cut.hi < piece.sigma.hi:
                still.append(GammaBox(Interval(cut.hi, piece.sigma.hi), piece.voc))
        remaining = still
    new_segments.extend(p for p in remaining if not p.sigma.is_degenerate)
    new_segments.sort(key=lambda s: (s.sigma.lo, s.sigma.hi))
    return OCVTube(_merge_adjacent(new_segments), flags)


def voc_contract(tube: OCVTube, params: BatteryParams) -> OCVTube:
    """HC4-contract every segment through the structural OCV relation.

    Uses the multiplied-through form
        v0 (e^{v1 s} - 1) + (v3 + v4 s + v5 s^2) s - voc = 0,
    which avoids the removable singularity, with the coefficient priors as
    interval constants.  Segments only shrink; an empty contraction keeps
    the segment and counts a conflict flag.
    """
    s, voc = var(0), var(1)
    v = params.v
    relation = (
        (s * v[1]).exp() * v[0] - v[0]
        + (s * v[4] + s.sqr() * v[5] + v[3]) * s
        - voc
    )
    out: list[GammaBox] = []
    flags = tube.conflict_flags
    for seg in tube.segments:
        box = IntervalVector([seg.sigma, seg.voc])
        contracted = hc4_contract(relation, Interval(0.0, 0.0), box)
        if contracted is None or contracted.is_empty:
            flags += 1
            out.append(seg)
            continue
        out.append(GammaBox(contracted[0], contracted[1]))
    return OCVTube(out, flags)
