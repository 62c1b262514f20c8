"""Guaranteed propagation of state boxes through dynamics.

Three layers of machinery:

* wrapping-effect demonstrations for the 45-degree rotation map, in both the
  naive iterated form and the matrix-power form that defeats the blow-up;
* Mueller bracketing for interval-linear cooperative (Metzler) systems: the
  coupled lower/upper derivative system, a plain outward-rounded Euler step,
  and a tube integrator whose per-step truncation is dominated by a rigorous
  second-order remainder;
* a first-order validated Euler step for general nonlinear models, with a
  Picard/inflation a-priori enclosure and an AD-based remainder bound.

Parameter selections are treated as unknown constants over the horizon
(matching the vertex Monte-Carlo oracles used in the test-suite).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from . import rounding as rnd
from .expr import Expr
from .interval import Interval, IntervalError, IntervalMatrix, IntervalVector

__all__ = [
    "MetzlerError",
    "StepRejected",
    "LinearIntervalSystem",
    "NonlinearSystemModel",
    "BracketTube",
    "metzler_check",
    "mueller_step",
    "integrate_bracketing",
    "validated_euler_step",
    "wrapping_naive",
    "wrapping_power",
    "WRAPPING_MATRIX",
    "simulate_rk4",
]

PICARD_INFLATE_REL = 0.1
PICARD_INFLATE_ABS = 1e-12
PICARD_MAX_ATTEMPTS = 20


class MetzlerError(ValueError):
    """Off-diagonal lower bounds violate the cooperativity sign condition."""


class StepRejected(RuntimeError):
    """A-priori enclosure could not be validated; retry with a smaller step."""

    def __init__(self, msg: str, dt: float):
        super().__init__(msg)
        self.dt = dt


@dataclass
class LinearIntervalSystem:
    """x' = A x (+ b), entries of A and b uncertain within intervals."""

    A: IntervalMatrix
    b: Optional[IntervalVector] = None
    dt: Optional[float] = None

    def __post_init__(self):
        if not self.A.is_square:
            raise IntervalError("dynamics matrix must be square")
        n = self.A.shape[0]
        if self.b is not None and len(self.b) != n:
            raise IntervalError("input column dimension mismatch")
        if self.dt is not None and not self.dt > 0.0:
            raise IntervalError("dt must be positive")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def f_box(self, box: IntervalVector) -> IntervalVector:
        out = self.A.mat_vec(box)
        if self.b is not None:
            out = out + self.b
        return out


@dataclass
class NonlinearSystemModel:
    """x' = f(x, u, p), one expression per state derivative.

    Expression variables are indexed states || inputs || parameters.
    """

    f: tuple[Expr, ...]
    n_states: int
    n_inputs: int = 0
    n_params: int = 0

    def __post_init__(self):
        self.f = tuple(self.f)
        if len(self.f) != self.n_states:
            raise IntervalError("one derivative expression per state required")
        arity = self.n_states + self.n_inputs + self.n_params
        for e in self.f:
            if e.max_var() >= arity:
                raise IntervalError("expression uses a variable beyond the declared arity")

    @cached_property
    def state_jacobian(self) -> list[list[Expr]]:
        return [[fi.diff(j) for j in range(self.n_states)] for fi in self.f]

    def env(
        self,
        x: IntervalVector,
        u: Optional[IntervalVector] = None,
        p: Optional[IntervalVector] = None,
    ) -> IntervalVector:
        box = x
        if self.n_inputs:
            box = box.concat(u)
        if self.n_params:
            box = box.concat(p)
        return box

    def f_iv(self, env: IntervalVector) -> IntervalVector:
        return IntervalVector([fi.eval_iv(env) for fi in self.f])

    def f_pt(self, x: Sequence[float], u: Sequence[float] = (), p: Sequence[float] = ()) -> np.ndarray:
        env = list(x) + list(u) + list(p)
        return np.array([fi.eval_pt(env) for fi in self.f])


@dataclass
class BracketTube:
    """Sampled lower/upper state bounds: x_i(t) in [v_i(t), w_i(t)]."""

    times: list[float]
    v: list[list[float]]
    w: list[list[float]]

    def __post_init__(self):
        if not (len(self.times) == len(self.v) == len(self.w)):
            raise IntervalError("tube columns must share a time grid")
        for vk, wk in zip(self.v, self.w):
            if any(a > b for a, b in zip(vk, wk)):
                raise IntervalError("tube lower bound exceeds upper bound")

    def box_at(self, k: int) -> IntervalVector:
        return IntervalVector.from_bounds(self.v[k], self.w[k])

    def contains(self, k: int, xs: Sequence[float]) -> bool:
        return all(a <= x <= b for a, x, b in zip(self.v[k], xs, self.w[k]))

    def write_csv(self, path) -> None:
        n = len(self.v[0])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"v_{i+1}" for i in range(n)] + [f"w_{i+1}" for i in range(n)])
            for t, vk, wk in zip(self.times, self.v, self.w):
                wr.writerow([repr(t)] + [repr(x) for x in vk] + [repr(x) for x in wk])


def metzler_check(A: IntervalMatrix) -> bool:
    """True iff all off-diagonal lower bounds are nonnegative."""
    if not A.is_square:
        raise IntervalError("Metzler check needs a square matrix")
    n = A.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j and A[i, j].lo < 0.0:
                return False
    return True


def _mueller_derivatives(
    A: IntervalMatrix,
    v: Sequence[float],
    w: Sequence[float],
    offset: Optional[IntervalVector] = None,
) -> tuple[list[float], list[float]]:
    """Coupled bracket derivatives: diagonal terms anchored at v_i / w_i,
    off-diagonal terms evaluated over the full component intervals."""
    n = A.shape[0]
    vdot, wdot = [], []
    for i in range(n):
        lo = (A[i, i] * Interval.point(v[i])).lo
        hi = (A[i, i] * Interval.point(w[i])).hi
        for j in range(n):
            if j == i:
                continue
            prod = A[i, j] * Interval(v[j], w[j])
            lo = rnd.add_rd(lo, prod.lo)
            hi = rnd.add_ru(hi, prod.hi)
        if offset is not None:
            lo = rnd.add_rd(lo, offset[i].lo)
            hi = rnd.add_ru(hi, offset[i].hi)
        vdot.append(lo)
        wdot.append(hi)
    return vdot, wdot


def mueller_step(sys: LinearIntervalSystem, box: IntervalVector) -> IntervalVector:
    """One explicit-Euler step of the coupled bracketing system, outward
    rounded.  The per-step Euler truncation is NOT compensated here; use
    ``integrate_bracketing`` for tubes that are rigorous over a horizon."""
    if box.is_empty:
        raise IntervalError("empty state box")
    if not metzler_check(sys.A):
        raise MetzlerError("interval dynamics matrix is not Metzler")
    dt = sys.dt
    if dt is None:
        raise IntervalError("LinearIntervalSystem.dt required for stepping")
    v, w = box.lo(), box.hi()
    vdot, wdot = _mueller_derivatives(sys.A, v, w, sys.b)
    new_lo = [rnd.add_rd(v[i], rnd.mul_rd(dt, vdot[i])) for i in range(len(v))]
    new_hi = [rnd.add_ru(w[i], rnd.mul_ru(dt, wdot[i])) for i in range(len(w))]
    return IntervalVector.from_bounds(new_lo, new_hi)


def _picard_enclosure(
    f_box: Callable[[IntervalVector], IntervalVector],
    box: IntervalVector,
    dt: float,
) -> IntervalVector:
    """A-priori enclosure of all trajectories over [0, dt] from ``box``."""
    step = Interval(0.0, dt)
    cand = box.hull(box + f_box(box).scale(step)).inflate(PICARD_INFLATE_ABS, PICARD_INFLATE_REL)
    for _ in range(PICARD_MAX_ATTEMPTS):
        image = box + f_box(cand).scale(step)
        if cand.encloses(image):
            return cand
        cand = cand.hull(image).inflate(PICARD_INFLATE_ABS, PICARD_INFLATE_REL)
    raise StepRejected("Picard iteration failed to contract; halve the step", dt)


def _rigorous_linear_step(
    A: IntervalMatrix,
    box: IntervalVector,
    dt: float,
    b: Optional[IntervalVector] = None,
) -> IntervalVector:
    """Anchored Mueller-Euler step plus a second-order Taylor remainder.

    Sound for uncertain-constant selections A in [A], b in [b]: the Euler
    part under-approximates each trajectory's increment and the remainder
    (dt^2/2) * bound(x'') over the a-priori enclosure dominates the
    truncation error in both directions.
    """
    sys_f = lambda bx: (A.mat_vec(bx) + b) if b is not None else A.mat_vec(bx)
    apriori = _picard_enclosure(sys_f, box, dt)
    n = len(box)
    for i in range(n):
        if 1.0 + dt * A[i, i].lo < 0.0:
            raise StepRejected("step too large for anchored diagonal term", dt)
    v, w = box.lo(), box.hi()
    vdot, wdot = _mueller_derivatives(A, v, w, b)
    half_sq = (Interval.point(dt) * Interval.point(dt)) * Interval.point(0.5)
    accel = A.mat_vec(sys_f(apriori))
    new_lo, new_hi = [], []
    for i in range(n):
        rem = half_sq * accel[i]
        lo = rnd.add_rd(rnd.add_rd(v[i], rnd.mul_rd(dt, vdot[i])), rem.lo)
        hi = rnd.add_ru(rnd.add_ru(w[i], rnd.mul_ru(dt, wdot[i])), rem.hi)
        new_lo.append(lo)
        new_hi.append(hi)
    return IntervalVector.from_bounds(new_lo, new_hi)


def integrate_bracketing(
    sys: LinearIntervalSystem,
    box0: IntervalVector,
    t_end: float,
    dt: Optional[float] = None,
) -> BracketTube:
    """Bracketing tube for the cooperative interval-linear system.

    Every stored box encloses the reachable set of all constant selections
    A in [A] starting anywhere in ``box0``; Euler truncation is dominated by
    the rigorous per-step remainder.
    """
    if t_end < 0.0:
        raise IntervalError("t_end must be nonnegative")
    if box0.is_empty:
        raise IntervalError("empty initial box")
    if not metzler_check(sys.A):
        raise MetzlerError("interval dynamics matrix is not Metzler")
    step = dt if dt is not None else (sys.dt if sys.dt is not None else max(t_end, 1e-30) * 1e-3)
    times = [0.0]
    v = [box0.lo()]
    w = [box0.hi()]
    box = box0
    t = 0.0
    while t < t_end - 1e-15 * max(1.0, t_end):
        h = min(step, t_end - t)
        while True:
            try:
                nxt = _rigorous_linear_step(sys.A, box, h, sys.b)
                break
            except StepRejected:
                h *= 0.5
                if h < 1e-12 * max(step, 1.0):
                    raise
        box = nxt
        t += h
        times.append(t)
        v.append(box.lo())
        w.append(box.hi())
    return BracketTube(times, v, w)


def validated_euler_step(
    model: NonlinearSystemModel,
    box: IntervalVector,
    u: Optional[IntervalVector],
    p: Optional[IntervalVector],
    dt: float,
) -> IntervalVector:
    """First-order validated step for x' = f(x, u, p) over [0, dt].

    Computes a Picard-verified a-priori enclosure X of the flow, then

        [x] + dt * f(X)  (+)  [0, dt^2/2] * bound of df/dt along X,

    where df/dt = (df/dx) f is bounded by interval evaluation of the
    symbolic Jacobian.  The result encloses the exact flow at time dt for
    every constant selection of inputs and parameters.
    """
    if box.is_empty:
        raise IntervalError("empty state box")
    if dt <= 0.0:
        raise IntervalError("dt must be positive")

    def f_on(state_box: IntervalVector) -> IntervalVector:
        return model.f_iv(model.env(state_box, u, p))

    apriori = _picard_enclosure(f_on, box, dt)
    env_ap = model.env(apriori, u, p)
    fX = model.f_iv(env_ap)
    jac = model.state_jacobian
    rem_coeff = Interval(0.0, 1.0) * ((Interval.point(dt) * Interval.point(dt)) * Interval.point(0.5))
    out = []
    for i in range(model.n_states):
        acc = Interval(0.0, 0.0)
        for j in range(model.n_states):
            acc = acc + jac[i][j].eval_iv(env_ap) * fX[j]
        out.append(box[i] + Interval.point(dt) * fX[i] + rem_coeff * acc)
    return IntervalVector(out)


def affine_in_states(model: NonlinearSystemModel) -> bool:
    """True when f is affine in the state variables.

    Holds when the symbolic state Jacobian is state-independent and no
    abs/sign node acts on a state-dependent subtree (those have vanishing
    a.e. derivatives and would defeat the Jacobian test).
    """
    n = model.n_states
    for fi in model.f:
        if fi.nonsmooth_on_vars_below(n):
            return False
    for row in model.state_jacobian:
        for entry in row:
            if entry.uses_var_below(n):
                return False
    return True


def affine_interval_system(
    model: NonlinearSystemModel,
    u: Optional[IntervalVector],
    p: Optional[IntervalVector],
) -> tuple[IntervalMatrix, IntervalVector]:
    """Interval A, b with f(x, u, p) = A x + b over the given input and
    parameter boxes; only valid when ``affine_in_states(model)`` holds."""
    n = model.n_states
    zero_states = IntervalVector([Interval(0.0, 0.0)] * n)
    env0 = model.env(zero_states, u, p)
    A = IntervalMatrix(
        [[model.state_jacobian[i][j].eval_iv(env0) for j in range(n)] for i in range(n)]
    )
    b = IntervalVector([fi.eval_iv(env0) for fi in model.f])
    return A, b


def validated_affine_step(
    model: NonlinearSystemModel,
    box: IntervalVector,
    u: Optional[IntervalVector],
    p: Optional[IntervalVector],
    dt: float,
) -> IntervalVector:
    """Tight rigorous step for models affine in the states: the anchored
    bracket step avoids the width blow-up of the naive interval Euler."""
    A, b = affine_interval_system(model, u, p)
    return _rigorous_linear_step(A, box, dt, b)


# ---------------------------------------------------------------------------
# Wrapping-effect demonstrations
# ---------------------------------------------------------------------------

_SQ2 = 1.0 / math.sqrt(2.0)
WRAPPING_MATRIX = np.array([[_SQ2, _SQ2], [-_SQ2, _SQ2]])


def _wrap_box0() -> IntervalVector:
    return IntervalVector([Interval(-1.0, 1.0), Interval(-1.0, 1.0)])


def wrapping_naive(k: int) -> IntervalVector:
    """Iterated interval evaluation [x]_{j+1} = A [x]_j: exponential blow-up."""
    if k < 0:
        raise IntervalError("k must be nonnegative")
    A = IntervalMatrix.from_real(WRAPPING_MATRIX)
    box = _wrap_box0()
    for _ in range(k):
        box = A.mat_vec(box)
    return box


def wrapping_power(k: int) -> IntervalVector:
    """Point matrix power first, one interval product last: no blow-up."""
    if k < 0:
        raise IntervalError("k must be nonnegative")
    Ak = np.linalg.matrix_power(WRAPPING_MATRIX, k)
    return IntervalMatrix.from_real(Ak).mat_vec(_wrap_box0())


# ---------------------------------------------------------------------------
# Point-valued classical RK4 (oracle-grade, no enclosure guarantees)
# ---------------------------------------------------------------------------


def simulate_rk4(
    deriv: Callable[[float, np.ndarray], np.ndarray],
    x0: Sequence[float],
    t_grid: Sequence[float],
) -> np.ndarray:
    """Dense classical RK4 along ``t_grid``; returns states row per time."""
    xs = np.empty((len(t_grid), len(x0)))
    x = np.asarray(x0, dtype=float).copy()
    xs[0] = x
    for k in range(1, len(t_grid)):
        t0, t1 = t_grid[k - 1], t_grid[k]
        h = t1 - t0
        k1 = deriv(t0, x)
        k2 = deriv(t0 + 0.5 * h, x + 0.5 * h * k1)
        k3 = deriv(t0 + 0.5 * h, x + 0.5 * h * k2)
        k4 = deriv(t1, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        xs[k] = x
    return xs
