"""First- and second-order sliding-mode control with barrier extensions.

Point-valued laws for plants in nonlinear controller canonical form, their
one-sided (A) and two-sided (B) barrier variants, and the interval-valued
generalizations that enclose the control over state and parameter boxes.
At run time a point input is selected from the interval's inflated endpoint
candidates by certifying negativity of the interval Lyapunov-derivative
enclosure; if no candidate certifies, the caller falls back to holding the
previous input (flagged in the log).

Error-coordinate convention: ``xi`` is the vector
(xi^(-1), xi^(0), ..., xi^(n-1)) of the tracking-error integral, the error,
and its derivatives.  In second-order mode the sliding variable is the
algebraic surface value and its rate is the unique value satisfying the
first-order-lag surface definition for that s.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .expr import Expr
from .interval import Interval, IntervalError, IntervalVector
from .reach import simulate_rk4

__all__ = [
    "CanonicalPlant",
    "SurfaceConfig",
    "GainConfig",
    "BarrierConfig",
    "Reference",
    "ControllabilityError",
    "BarrierViolation",
    "StabilizationFailure",
    "sliding_values",
    "u_first_order",
    "u_second_order",
    "barrier_A_rate",
    "barrier_B_rate",
    "u_first_order_A",
    "u_second_order_A",
    "u_first_order_B",
    "u_second_order_B",
    "interval_control_box",
    "build_control",
    "select_point_control",
    "SMCScenario",
    "run_closed_loop",
    "ClosedLoopLog",
]

VARIANTS = ("I", "IA", "IB", "II", "IIA", "IIB")


class ControllabilityError(RuntimeError):
    """0 in [b](x, p): the feedback-linearizing division is undefined."""


class BarrierViolation(RuntimeError):
    """State (or state box hull) touches or crosses a barrier constraint."""


class StabilizationFailure(RuntimeError):
    """No inflated endpoint candidate certifies a negative Lyapunov rate."""


@dataclass
class CanonicalPlant:
    """x1' = x2, ..., xn' = a(x, p) + b(x, p) * v; expressions over x || p."""

    n: int
    a_expr: Expr
    b_expr: Expr
    p_box: IntervalVector

    def __post_init__(self):
        if self.n < 1:
            raise IntervalError("plant order must be >= 1")
        arity = self.n + len(self.p_box)
        if self.a_expr.max_var() >= arity or self.b_expr.max_var() >= arity:
            raise IntervalError("a/b expressions exceed the (x, p) arity")

    def ab_iv(self, x_box: IntervalVector) -> tuple[Interval, Interval]:
        env = x_box.concat(self.p_box)
        a = self.a_expr.eval_iv(env)
        b = self.b_expr.eval_iv(env)
        if b.contains(0.0):
            raise ControllabilityError(f"0 in [b] = {b}")
        return a, b

    def ab_pt(self, x: Sequence[float], p: Sequence[float]) -> tuple[float, float]:
        env = list(x) + list(p)
        return self.a_expr.eval_pt(env), self.b_expr.eval_pt(env)


@dataclass
class SurfaceConfig:
    """Sliding-surface coefficients; alpha[-1] entry is the integral weight."""

    alpha: tuple[float, ...]
    alpha_m1: float = 0.0
    gamma0: float = 1.0
    gamma1: float = 1.0
    lam: Optional[float] = None  # defaults to gamma1

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        if self.alpha[-1] != 1.0:
            raise IntervalError("highest surface coefficient must be normalized to 1")
        if self.gamma0 <= 0.0 or self.gamma1 <= 0.0:
            raise IntervalError("gamma coefficients must be positive")
        if self.lam is None:
            self.lam = self.gamma1
        if not self.is_hurwitz():
            raise IntervalError(f"surface polynomial {self.alpha} is not Hurwitz")

    @property
    def n(self) -> int:
        return len(self.alpha)

    def is_hurwitz(self) -> bool:
        if self.n == 1:
            return True
        roots = np.roots(list(reversed(self.alpha)))
        return bool(np.all(roots.real < 0.0))


@dataclass
class GainConfig:
    eta_t: float = 0.5
    eta1_t: float = 0.1
    eta2_t: float = 0.1
    eps_t: float = 1e-6
    eps_sel: float = 1e-3

    def __post_init__(self):
        for name in ("eta_t", "eta1_t", "eta2_t", "eps_t", "eps_sel"):
            if getattr(self, name) <= 0.0:
                raise IntervalError(f"{name} must be strictly positive")


@dataclass
class BarrierConfig:
    rho_v: float = 0.1
    sigma_v: float = 1.0
    dx1max: float = 0.3
    chi_bar: float = 0.3
    l: int = 1

    def __post_init__(self):
        if min(self.rho_v, self.sigma_v, self.dx1max, self.chi_bar) <= 0.0:
            raise IntervalError("barrier parameters must be positive")
        if self.l < 1:
            raise IntervalError("barrier exponent l must be >= 1")


@dataclass
class Reference:
    """Sampled desired trajectory with derivatives 0..n (columns)."""

    times: np.ndarray
    derivs: np.ndarray  # shape (len(times), n + 1)

    def at(self, k: int) -> np.ndarray:
        return self.derivs[k]

    @property
    def order(self) -> int:
        return self.derivs.shape[1] - 1

    @staticmethod
    def harmonic(n: int, times: np.ndarray, amp: float, omega: float, offset: float = 0.0) -> "Reference":
        cols = []
        for k in range(n + 1):
            phase = k % 4
            wk = amp * omega**k
            if phase == 0:
                col = wk * np.sin(omega * times)
            elif phase == 1:
                col = wk * np.cos(omega * times)
            elif phase == 2:
                col = -wk * np.sin(omega * times)
            else:
                col = -wk * np.cos(omega * times)
            if k == 0:
                col = col + offset
            cols.append(col)
        return Reference(np.asarray(times, dtype=float), np.column_stack(cols))

    @staticmethod
    def exp_settle(n: int, times: np.ndarray, level: float, amp: float, lam: float) -> "Reference":
        cols = []
        for k in range(n + 1):
            col = amp * (-lam) ** k * np.exp(-lam * times)
            if k == 0:
                col = col + level
            cols.append(col)
        return Reference(np.asarray(times, dtype=float), np.column_stack(cols))


def _sign(x: float) -> float:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


def sliding_values(xi: Sequence[float], cfg: SurfaceConfig) -> tuple[float, float]:
    """Surface value and rate from the error coordinates.

    s is the weighted error sum; s_dot solves the first-order-lag surface
    relation gamma1*s_dot + gamma0*s = sum_{r=-1}^{n-1} alpha_r xi^(r).
    """
    n = cfg.n
    if len(xi) != n + 1:
        raise IntervalError(f"xi must have length n+1 = {n + 1}")
    s = sum(cfg.alpha[r] * xi[1 + r] for r in range(n))
    rhs = cfg.alpha_m1 * xi[0] + s
    s_dot = (rhs - cfg.gamma0 * s) / cfg.gamma1
    return s, s_dot


def u_first_order(xi: Sequence[float], cfg: SurfaceConfig, gains: GainConfig, x1d_n: float) -> float:
    s, _ = sliding_values(xi, cfg)
    n = cfg.n
    drift = sum(cfg.alpha[r] * xi[1 + r + 1] for r in range(n - 1))
    return x1d_n - drift - gains.eta_t * _sign(s)


def u_second_order(xi: Sequence[float], cfg: SurfaceConfig, gains: GainConfig, x1d_n: float) -> float:
    s, s_dot = sliding_values(xi, cfg)
    n = cfg.n
    hist = cfg.alpha_m1 * xi[1 + 0]
    for r in range(1, n):
        hist += cfg.alpha[r - 1] * xi[1 + r]
    sw = _sign(s_dot) * (gains.eta1_t + gains.eta2_t * abs(s))
    return x1d_n + (cfg.gamma0 * s_dot - s - hist - sw) / cfg.alpha[n - 1]


def barrier_A_rate(
    x1: float, x1_dot: float, x1max: float, x1max_dot: float, bcfg: BarrierConfig
) -> float:
    """Rate of the one-sided logarithmic barrier; singular as x1 -> x1max."""
    if not x1 < x1max:
        raise BarrierViolation(f"x1 = {x1} violates the bound {x1max}")
    return (bcfg.rho_v / x1max) * ((-x1 * x1max_dot + x1_dot * x1max) / (x1max - x1))


def barrier_B_rate(
    x1: float, x1_dot: float, x1d: float, x1d_dot: float, bcfg: BarrierConfig
) -> float:
    """Rate of the symmetric two-sided barrier around the reference."""
    chi = x1 - x1d
    l2 = 2 * bcfg.l
    denom = bcfg.chi_bar**l2 - chi**l2
    if not abs(chi) < bcfg.chi_bar:
        raise BarrierViolation(f"|x1 - x1d| = {abs(chi)} violates the band {bcfg.chi_bar}")
    return bcfg.rho_v * l2 * chi ** (l2 - 1) * (x1_dot - x1d_dot) / denom


def _reg(s: float, eps_t: float) -> float:
    return s / (s * s + eps_t)


def u_first_order_A(xi, cfg, gains, x1d_n, x1, x1_dot, x1max, x1max_dot, bcfg) -> float:
    s, _ = sliding_values(xi, cfg)
    vda = barrier_A_rate(x1, x1_dot, x1max, x1max_dot, bcfg)
    return u_first_order(xi, cfg, gains, x1d_n) - _reg(s, gains.eps_t) * vda


def u_second_order_A(xi, cfg, gains, x1d_n, x1, x1_dot, x1max, x1max_dot, bcfg) -> float:
    _, s_dot = sliding_values(xi, cfg)
    vda = barrier_A_rate(x1, x1_dot, x1max, x1max_dot, bcfg)
    return u_second_order(xi, cfg, gains, x1d_n) - _reg(s_dot, gains.eps_t) * vda / cfg.alpha[-1]


def u_first_order_B(xi, cfg, gains, x1d_n, x1, x1_dot, x1d, x1d_dot, bcfg) -> float:
    s, _ = sliding_values(xi, cfg)
    vdb = barrier_B_rate(x1, x1_dot, x1d, x1d_dot, bcfg)
    return u_first_order(xi, cfg, gains, x1d_n) - _reg(s, gains.eps_t) * vdb


def u_second_order_B(xi, cfg, gains, x1d_n, x1, x1_dot, x1d, x1d_dot, bcfg) -> float:
    _, s_dot = sliding_values(xi, cfg)
    vdb = barrier_B_rate(x1, x1_dot, x1d, x1d_dot, bcfg)
    return u_second_order(xi, cfg, gains, x1d_n) - _reg(s_dot, gains.eps_t) * vdb / cfg.alpha[-1]


# ---------------------------------------------------------------------------
# Interval generalizations
# ---------------------------------------------------------------------------


def _sliding_values_iv(
    xi_iv: list[Interval], xi_m1: Interval, cfg: SurfaceConfig
) -> tuple[Interval, Interval]:
    n = cfg.n
    s = Interval(0.0, 0.0)
    for r in range(n):
        s = s + xi_iv[r] * cfg.alpha[r]
    rhs = xi_m1 * cfg.alpha_m1 + s
    s_dot = (rhs - s * cfg.gamma0) * (1.0 / cfg.gamma1)
    return s, s_dot


def _barrier_A_rate_iv(x1: Interval, x1_dot: Interval, x1max: float, x1max_dot: float, bcfg) -> Interval:
    if not x1.hi < x1max:
        raise BarrierViolation(f"state box {x1} touches the bound {x1max}")
    num = (-x1) * x1max_dot + x1_dot * x1max
    return num / (Interval.point(x1max) - x1) * (bcfg.rho_v / x1max)


def _barrier_B_rate_iv(chi: Interval, chi_dot: Interval, bcfg) -> Interval:
    l2 = 2 * bcfg.l
    if not chi.mag() < bcfg.chi_bar:
        raise BarrierViolation(f"error box {chi} touches the band {bcfg.chi_bar}")
    denom = Interval.point(bcfg.chi_bar) ** l2 - chi**l2
    return (chi ** (l2 - 1)) * chi_dot * (bcfg.rho_v * l2) / denom


@dataclass
class ControlContext:
    """Interval control enclosure plus the certification closure inputs."""

    variant: str
    v_box: Interval
    s: Interval
    s_dot: Interval
    a: Interval
    b: Interval
    xi: list[Interval]
    barrier_rate: Optional[Interval]
    cfg: SurfaceConfig
    gains: GainConfig
    x1d_n: float

    def lyap_rate(self, v: float) -> Interval:
        """Enclosure of the Lyapunov derivative with the candidate input
        substituted; second-order variants use the extended functional."""
        cfg, n = self.cfg, self.cfg.n
        xi_n = self.a + self.b * v - self.x1d_n
        if self.variant.startswith("I") and not self.variant.startswith("II"):
            s_dot_full = Interval(0.0, 0.0)
            for r in range(n - 1):
                s_dot_full = s_dot_full + self.xi[r + 1] * cfg.alpha[r]
            s_dot_full = s_dot_full + xi_n * cfg.alpha[n - 1]
            rate = self.s * s_dot_full
        else:
            hist = Interval(0.0, 0.0)
            hist = hist + self.xi[0] * cfg.alpha_m1
            for r in range(1, n):
                hist = hist + self.xi[r] * cfg.alpha[r - 1]
            hist = hist + xi_n * cfg.alpha[n - 1]
            rate = self.s * self.s_dot - self.s_dot.sqr() * cfg.gamma0 + self.s_dot * hist
        if self.barrier_rate is not None:
            rate = rate + self.barrier_rate
        return rate


def build_control(
    variant: str,
    plant: CanonicalPlant,
    x_box: IntervalVector,
    cfg: SurfaceConfig,
    gains: GainConfig,
    ref_row: Sequence[float],
    bcfg: Optional[BarrierConfig] = None,
    xi_m1: Interval = Interval(0.0, 0.0),
) -> ControlContext:
    """Assemble the interval control law of the requested variant over the
    state box; the returned context carries the certification closure."""
    if variant not in VARIANTS:
        raise IntervalError(f"unknown controller variant {variant!r}")
    n = plant.n
    if variant not in ("I", "II") and n < 2:
        raise IntervalError("barrier variants need plant order >= 2 (x1' must be a state)")
    a, b = plant.ab_iv(x_box)
    xi_iv = [x_box[r] - Interval.point(float(ref_row[r])) for r in range(n)]
    s, s_dot = _sliding_values_iv(xi_iv, xi_m1, cfg)
    x1d_n = float(ref_row[n])

    barrier = None
    if variant in ("IA", "IIA"):
        assert bcfg is not None
        x1max = float(ref_row[0]) + bcfg.dx1max
        barrier = _barrier_A_rate_iv(x_box[0], x_box[1], x1max, float(ref_row[1]), bcfg)
    elif variant in ("IB", "IIB"):
        assert bcfg is not None
        chi_dot = x_box[1] - Interval.point(float(ref_row[1]))
        barrier = _barrier_B_rate_iv(xi_iv[0], chi_dot, bcfg)

    if variant.startswith("II"):
        hist = xi_m1 * cfg.alpha_m1
        for r in range(1, n):
            hist = hist + xi_iv[r] * cfg.alpha[r - 1]
        sw = s_dot.sign() * (s.abs_() * gains.eta2_t + gains.eta1_t)
        u = (s_dot * cfg.gamma0 - s - hist - sw) * (1.0 / cfg.alpha[n - 1]) + x1d_n
        v_box = (-a + u) / b
        if barrier is not None:
            regf = s_dot / (s_dot.sqr() + gains.eps_t)
            v_box = v_box - (Interval.point(1.0) / b) * regf * barrier * (1.0 / cfg.alpha[n - 1])
    else:
        drift = Interval(0.0, 0.0)
        for r in range(n - 1):
            drift = drift + xi_iv[r + 1] * cfg.alpha[r]
        u = Interval.point(x1d_n) - drift - s.sign() * gains.eta_t
        v_box = (-a + u) / b
        if barrier is not None:
            regf = s / (s.sqr() + gains.eps_t)
            v_box = v_box - (Interval.point(1.0) / b) * regf * barrier

    return ControlContext(variant, v_box, s, s_dot, a, b, xi_iv, barrier, cfg, gains, x1d_n)


def interval_control_box(
    variant: str,
    x_box: IntervalVector,
    plant: CanonicalPlant,
    cfg: SurfaceConfig,
    gains: GainConfig,
    ref_row: Sequence[float],
    bcfg: Optional[BarrierConfig] = None,
    xi_m1: Interval = Interval(0.0, 0.0),
) -> Interval:
    """Interval enclosure of the selected control law over the boxes."""
    return build_control(variant, plant, x_box, cfg, gains, ref_row, bcfg, xi_m1).v_box


def select_point_control(
    v_box: Interval,
    lyap_rate: Callable[[float], Interval],
    eps_sel: float,
) -> float:
    """Pick the minimum-|value| candidate among the inflated interval
    endpoints whose Lyapunov-rate enclosure is strictly negative."""
    if v_box.is_empty:
        raise IntervalError("empty control interval")
    cands = [v_box.lo - eps_sel, v_box.lo + eps_sel, v_box.hi - eps_sel, v_box.hi + eps_sel]
    certified = [v for v in cands if lyap_rate(v).hi < 0.0]
    if not certified:
        raise StabilizationFailure("no candidate certifies a negative Lyapunov rate")
    return min(certified, key=lambda v: (abs(v), v))


# ---------------------------------------------------------------------------
# Closed-loop simulation harness
# ---------------------------------------------------------------------------


@dataclass
class SMCScenario:
    plant: CanonicalPlant
    cfg: SurfaceConfig
    gains: GainConfig
    variant: str
    ref: Reference
    x0: Sequence[float]
    p_true: Sequence[float]
    dt: float
    n_steps: int
    meas_halfwidth: float = 1e-7
    bcfg: Optional[BarrierConfig] = None


@dataclass
class ClosedLoopLog:
    t: list[float] = field(default_factory=list)
    x: list[list[float]] = field(default_factory=list)
    s: list[float] = field(default_factory=list)
    s_dot: list[float] = field(default_factory=list)
    u_applied: list[float] = field(default_factory=list)
    u_lo: list[float] = field(default_factory=list)
    u_hi: list[float] = field(default_factory=list)
    certified: list[int] = field(default_factory=list)

    def write_csv(self, path) -> None:
        n = len(self.x[0])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(
                ["t"] + [f"x_{i+1}" for i in range(n)]
                + ["s", "s_dot", "u_applied", "u_lo", "u_hi", "certified"]
            )
            for k in range(len(self.t)):
                wr.writerow(
                    [repr(self.t[k])] + [repr(v) for v in self.x[k]]
                    + [repr(self.s[k]), repr(self.s_dot[k]), repr(self.u_applied[k]),
                       repr(self.u_lo[k]), repr(self.u_hi[k]), str(self.certified[k])]
                )


def run_closed_loop(scn: SMCScenario) -> ClosedLoopLog:
    """Simulate the true plant under the interval controller.

    The controller sees the true state inflated to a measurement box and the
    full parameter box; the plant integrates with the true parameters (RK4,
    zero-order-hold input).  On certification failure the previous input is
    held and the step is flagged uncertified.
    """
    n = scn.plant.n
    p_true = list(scn.p_true)
    x = np.asarray(scn.x0, dtype=float).copy()
    log = ClosedLoopLog()
    xi_m1_iv = Interval(0.0, 0.0)
    v_prev = 0.0
    h = scn.meas_halfwidth

    def deriv(_t: float, xv: np.ndarray, v: float) -> np.ndarray:
        a, b = scn.plant.ab_pt(xv, p_true)
        out = np.empty(n)
        out[:-1] = xv[1:]
        out[-1] = a + b * v
        return out

    for k in range(scn.n_steps):
        t = k * scn.dt
        ref_row = scn.ref.at(k)
        x_box = IntervalVector([Interval(xv - h, xv + h) for xv in x])
        ctx = build_control(
            scn.variant, scn.plant, x_box, scn.cfg, scn.gains, ref_row, scn.bcfg, xi_m1_iv
        )
        try:
            v = select_point_control(ctx.v_box, ctx.lyap_rate, scn.gains.eps_sel)
            cert = 1
        except StabilizationFailure:
            v = v_prev
            cert = 0
        xi_pt = [0.0] * (n + 1)
        xi_pt[0] = xi_m1_iv.mid()
        for r in range(n):
            xi_pt[1 + r] = x[r] - ref_row[r]
        s_pt, s_dot_pt = sliding_values(xi_pt, scn.cfg)
        log.t.append(t)
        log.x.append(list(x))
        log.s.append(s_pt)
        log.s_dot.append(s_dot_pt)
        log.u_applied.append(v)
        log.u_lo.append(ctx.v_box.lo)
        log.u_hi.append(ctx.v_box.hi)
        log.certified.append(cert)
        # integrate the truth one control interval (RK4, ZOH input)
        grid = np.array([t, t + 0.5 * scn.dt, t + scn.dt])
        x = simulate_rk4(lambda tt, xv: deriv(tt, xv, v), x, grid)[-1]
        xi_m1_iv = xi_m1_iv + (ctx.xi[0] * scn.dt)
        v_prev = v
    return log
