"""Ellipsoidal calculus for guaranteed confidence-set prediction and the
stochastic iterative-learning observer.

The confidence set is {z : (z - mu)' G^-T G^-1 (z - mu) <= r^2} with shape
factor G and magnification r.  Prediction of a quasi-linear map z+ = Phi(z,p) z
runs in three stages: a bisection on the smallest alpha certifying the
shape LMI over the ellipsoid's box hull and the parameter box, an interval
bound on the midpoint-mismatch term with the induced inflation rho, and the
midpoint/shape update G+ = alpha (1 + rho) Phi~ G.  When the interval
evaluation of Phi is degenerate (point matrices, e.g. LTI systems) the
mapping is applied exactly, so the machinery reduces to textbook covariance
propagation without conservatism.

LMI certification uses the sound midpoint-plus-radius eigenvalue bound;
near the decision boundary the test falls back to an exact rational LDL
factorization so semidefinite edge cases (alpha = 1 for identity maps) are
decided without floating-point coin flips.

The iterative-learning observer couples two consecutive trials of a
repeated task in a joint 2n-state estimate, propagates it with the
block-augmented dynamics (process noise entering through per-trial E
blocks), and updates both trials with a causality-structured gain pair
solved from the trace-minimal covariance condition.  A lumped correction
term learned across trials absorbs systematic model mismatch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import rounding as rnd
from .expr import Expr
from .interval import Interval, IntervalError, IntervalMatrix, IntervalVector

__all__ = [
    "Ellipsoid",
    "QLModel",
    "EnclosureFailure",
    "psd_upper_check",
    "alpha_min",
    "predict",
    "PredictResult",
    "ILOSystem",
    "ILOState",
    "ILOConfig",
    "predict_joint",
    "innovate",
    "ilo_run",
    "single_trial_run",
]


class EnclosureFailure(RuntimeError):
    """No certified inflation factor below the cap; enclosure impossible."""


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _sqrtm_psd(M: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; eigenvalues are
    clipped at zero and optionally floored to keep the factor invertible."""
    w, V = np.linalg.eigh(_sym(M))
    w = np.clip(w, 0.0, None)
    if floor > 0.0:
        w = np.maximum(w, floor)
    return _sym(V @ np.diag(np.sqrt(w)) @ V.T)


@dataclass
class Ellipsoid:
    """Confidence set {z : (z-mu)' (G G')^{-1} (z-mu) <= r^2}."""

    mu: np.ndarray
    gamma: np.ndarray  # shape factor G (Gamma'), full rank
    r: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        n = self.mu.shape[0]
        if self.gamma.shape != (n, n):
            raise IntervalError("shape factor must be square and match mu")
        if self.r < 1.0:
            raise IntervalError("magnification factor r must be >= 1")
        if self.cond() > 1e12:
            raise IntervalError("shape factor condition number above 1e12")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def cond(self) -> float:
        return float(np.linalg.cond(self.gamma))

    def q_prime(self) -> np.ndarray:
        return _sym(self.gamma @ self.gamma.T)

    def box_hull(self) -> IntervalVector:
        """Exact axis-aligned hull: half-width r * row norm of the factor."""
        half = self.r * np.sqrt((self.gamma**2).sum(axis=1))
        return IntervalVector(
            [Interval(rnd.sub_rd(m, h), rnd.add_ru(m, h)) for m, h in zip(self.mu, half)]
        )

    def contains(self, z: Sequence[float], tol: float = 1e-9) -> bool:
        w = np.linalg.solve(self.gamma, np.asarray(z, dtype=float) - self.mu)
        return float(np.linalg.norm(w)) <= self.r * (1.0 + tol)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Uniform samples in the set: normal direction, radial U^(1/dim)."""
        d = self.dim
        g = rng.standard_normal((count, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        radii = rng.uniform(0.0, 1.0, count) ** (1.0 / d)
        return (self.r * (g * radii[:, None]) @ self.gamma.T) + self.mu

    def boundary_sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        d = self.dim
        g = rng.standard_normal((count, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return (self.r * g @ self.gamma.T) + self.mu


@dataclass
class QLModel:
    """Quasi-linear map z+ = Phi(z, p) z with expression-valued entries.

    Expression variables are indexed z (0..n-1) then parameters (n..).
    """

    phi: tuple[tuple[Expr, ...], ...]
    n: int
    p_box: Optional[IntervalVector] = None

    def __post_init__(self):
        self.phi = tuple(tuple(row) for row in self.phi)
        if len(self.phi) != self.n or any(len(r) != self.n for r in self.phi):
            raise IntervalError("Phi must be square in the state dimension")
        arity = self.n + (len(self.p_box) if self.p_box is not None else 0)
        for row in self.phi:
            for e in row:
                if e.max_var() >= arity:
                    raise IntervalError("Phi entry uses a variable beyond (z, p)")

    @staticmethod
    def from_constant(M: np.ndarray, p_box: Optional[IntervalVector] = None) -> "QLModel":
        from .expr import Const

        M = np.atleast_2d(np.asarray(M, dtype=float))
        return QLModel(
            tuple(tuple(Const(float(x)) for x in row) for row in M), M.shape[0], p_box
        )

    def env(self, z_box: IntervalVector) -> IntervalVector:
        return z_box.concat(self.p_box) if self.p_box is not None else z_box

    def eval_iv(self, z_box: IntervalVector) -> IntervalMatrix:
        env = self.env(z_box)
        return IntervalMatrix([[e.eval_iv(env) for e in row] for row in self.phi])

    def eval_pt(self, z: Sequence[float]) -> np.ndarray:
        env = list(z)
        if self.p_box is not None:
            env += self.p_box.mid()
        return np.array([[e.eval_pt(env) for e in row] for row in self.phi])


# ---------------------------------------------------------------------------
# Sound negative-semidefiniteness certificate
# ---------------------------------------------------------------------------


def _psd_fraction(M: list[list[Fraction]]) -> bool:
    """Exact PSD test by fraction-exact symmetric Gaussian elimination."""
    n = len(M)
    A = [row[:] for row in M]
    for k in range(n):
        piv = A[k][k]
        if piv < 0:
            return False
        if piv == 0:
            if any(A[k][j] != 0 for j in range(k, n)) or any(
                A[i][k] != 0 for i in range(k, n)
            ):
                return False
            continue
        for i in range(k + 1, n):
            f = A[i][k] / piv
            for j in range(k + 1, n):
                A[i][j] -= f * A[k][j]
            A[i][k] = Fraction(0)
    return True


def psd_upper_check(M: IntervalMatrix) -> bool:
    """Certify M <= 0 for ALL realizations of the symmetric interval matrix.

    Certificate: lambda_max(mid) + max-row-sum(rad) <= 0.  Sound but
    conservative (false negatives possible, false positives never).  The
    decision is exact: a float eigenvalue screen handles clear cases and a
    rational LDL factorization decides the boundary.
    """
    n, m = M.shape
    if n != m:
        raise IntervalError("psd_upper_check needs a square matrix")
    for i in range(n):
        for j in range(i + 1, n):
            a, b = M[i, j], M[j, i]
            if a.lo != b.lo or a.hi != b.hi:
                raise IntervalError("psd_upper_check needs a symmetric interval matrix")
    mid = M.mid()
    rad = M.rad_sound()
    rho = 0.0
    for row in rad:
        s = 0.0
        for x in row:
            s = rnd.add_ru(s, x)
        rho = max(rho, s)
    S = np.array(mid) + rho * np.eye(n)
    S = _sym(S)
    lam_max = float(np.linalg.eigvalsh(S)[-1])
    scale = max(float(np.abs(S).max()), 1e-300)
    if lam_max < -1e-10 * scale:
        return True
    if lam_max > 1e-10 * scale:
        return False
    # boundary: decide -(mid + rho I) >= 0 exactly over rationals
    frac = [
        [Fraction(-mid[i][j]) - (Fraction(rho) if i == j else 0) for j in range(n)]
        for i in range(n)
    ]
    # symmetrize exactly (mid entries may differ across the diagonal by rounding)
    for i in range(n):
        for j in range(i + 1, n):
            v = (frac[i][j] + frac[j][i]) / 2
            frac[i][j] = frac[j][i] = v
    return _psd_fraction(frac)


# ---------------------------------------------------------------------------
# Prediction: P1 (shape LMI), P2 (midpoint mismatch), P3 (update)
# ---------------------------------------------------------------------------


def _prepare(model: QLModel, E: Ellipsoid, phi_tilde: Optional[np.ndarray]):
    box = E.box_hull()
    phi_iv = model.eval_iv(box)
    if phi_tilde is None:
        phi_tilde = model.eval_pt(E.mu)
    phi_tilde = np.atleast_2d(np.asarray(phi_tilde, dtype=float))
    return phi_iv, phi_tilde


def _assemble_lmi(
    B_iv: IntervalMatrix,
    q_inv: np.ndarray,
    r_ivm: IntervalMatrix,
    lam: np.ndarray,
    alpha: float,
) -> IntervalMatrix:
    n = q_inv.shape[0]
    a2 = Interval.point(alpha) * Interval.point(alpha)
    rows: list[list[Interval]] = [[None] * (2 * n) for _ in range(2 * n)]
    for i in range(n):
        for j in range(n):
            rows[i][j] = Interval.point(-q_inv[i, j])
            rows[n + i][n + j] = -(a2 * r_ivm[i, j])
            b = B_iv[i, j]
            rows[n + i][j] = b
            rows[j][n + i] = b
    scaled = []
    for i in range(2 * n):
        row_sc = []
        for j in range(2 * n):
            f = Interval.point(lam[i]) * Interval.point(lam[j])
            row_sc.append(rows[i][j] * f)
        scaled.append(row_sc)
    return IntervalMatrix(scaled)


def alpha_min(
    model: QLModel,
    E_k: Ellipsoid,
    R_k: Optional[np.ndarray] = None,
    Lambda: Optional[np.ndarray] = None,
    phi_tilde: Optional[np.ndarray] = None,
) -> float:
    """Smallest certified inflation factor for the shape-update LMI.

    Doubling from 1 until the certificate passes, then bisection to 1e-6
    relative; the returned value is always itself certified.
    """
    phi_iv, phi_t = _prepare(model, E_k, phi_tilde)
    return _alpha_min_core(phi_iv, phi_t, E_k, R_k, Lambda)


def _alpha_min_core(
    phi_iv: IntervalMatrix,
    phi_tilde: np.ndarray,
    E_k: Ellipsoid,
    R_k: Optional[np.ndarray],
    Lambda: Optional[np.ndarray],
) -> float:
    n = E_k.dim
    if np.linalg.cond(phi_tilde) > 1e12:
        raise EnclosureFailure("midpoint matrix is numerically singular")
    B_iv = IntervalMatrix.from_real(np.linalg.inv(phi_tilde)) @ phi_iv
    Q = _sym((E_k.r**2) * (E_k.gamma @ E_k.gamma.T))
    q_inv = _sym(np.linalg.inv(Q))
    r_mat = Q if R_k is None else _sym(np.asarray(R_k, dtype=float))
    r_ivm = IntervalMatrix.from_real(r_mat)
    if Lambda is None:
        beta = math.sqrt(max(float(np.linalg.eigvalsh(Q)[0]), 1e-150))
        lam = np.array([beta] * n + [1.0 / beta] * n)
    else:
        L = np.asarray(Lambda, dtype=float)
        lam = np.diag(L) if L.ndim == 2 else L.reshape(-1)

    def ok(alpha: float) -> bool:
        M = _assemble_lmi(B_iv, q_inv, r_ivm, lam, alpha)
        return psd_upper_check(M)

    hi = 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > 1e6:
            raise EnclosureFailure("no certified alpha below 1e6")
    lo = 0.0 if hi == 1.0 else hi / 2.0
    while hi - lo > 1e-6 * max(hi, 1e-30):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class PredictResult:
    ellipsoid: Ellipsoid
    alpha: float
    rho_o: float
    exact: bool = False


def predict(
    model: QLModel,
    E_k: Ellipsoid,
    R_k: Optional[np.ndarray] = None,
    Lambda: Optional[np.ndarray] = None,
    phi_tilde: Optional[np.ndarray] = None,
) -> PredictResult:
    """Guaranteed outer ellipsoid of the quasi-linear image of E_k.

    For every z in E_k and p in the parameter box, Phi(z, p) z lies in the
    result.  Degenerate (point) interval evaluations of Phi short-circuit
    to the exact linear map with alpha = 1 and rho = 0.
    """
    phi_iv, phi_t = _prepare(model, E_k, phi_tilde)
    if phi_iv.is_degenerate():
        Phi = np.array([[phi_iv[i, j].lo for j in range(E_k.dim)] for i in range(E_k.dim)])
        ell = Ellipsoid(Phi @ E_k.mu, Phi @ E_k.gamma, E_k.r)
        return PredictResult(ell, 1.0, 0.0, exact=True)
    alpha = _alpha_min_core(phi_iv, phi_t, E_k, R_k, Lambda)
    # midpoint-mismatch term b = (Phi - Phi~) mu, absorbed by inflating with
    # rho = sup || (alpha Phi~ Gamma)^{-1} [b] ||
    diff = phi_iv - IntervalMatrix.from_real(phi_t)
    b_iv = diff.mat_vec(IntervalVector.from_point(E_k.mu))
    T = phi_t @ (E_k.r * E_k.gamma)
    y_iv = IntervalMatrix.from_real(np.linalg.inv(T) / alpha).mat_vec(b_iv)
    acc = 0.0
    for comp in y_iv:
        acc = rnd.add_ru(acc, rnd.mul_ru(comp.mag(), comp.mag()))
    rho = rnd.sqrt_ru(acc)
    factor = alpha * (1.0 + rho)
    ell = Ellipsoid(phi_t @ E_k.mu, factor * (phi_t @ E_k.gamma), E_k.r)
    return PredictResult(ell, alpha, rho, exact=False)


# ---------------------------------------------------------------------------
# Iterative-learning observer
# ---------------------------------------------------------------------------


@dataclass
class ILOSystem:
    """Quasi-linear plant x+ = A(x, p) x + E(x, p) w + delta, y = C(x, p) x + v.

    Expression variables for all entry matrices are x (0..n-1) then p.
    """

    a: tuple[tuple[Expr, ...], ...]
    e: tuple[tuple[Expr, ...], ...]
    c: tuple[tuple[Expr, ...], ...]
    cw: np.ndarray
    cv: np.ndarray
    p_box: Optional[IntervalVector] = None

    def __post_init__(self):
        self.a = tuple(tuple(r) for r in self.a)
        self.e = tuple(tuple(r) for r in self.e)
        self.c = tuple(tuple(r) for r in self.c)
        self.cw = _sym(np.atleast_2d(np.asarray(self.cw, dtype=float)))
        self.cv = _sym(np.atleast_2d(np.asarray(self.cv, dtype=float)))
        if len(self.a) != self.n or any(len(r) != self.n for r in self.a):
            raise IntervalError("A must be n x n")
        if any(len(r) != self.n_w for r in self.e) or len(self.e) != self.n:
            raise IntervalError("E must be n x n_w")
        if any(len(r) != self.n for r in self.c):
            raise IntervalError("C must be m x n")
        for M, name in ((self.cw, "Cw"), (self.cv, "Cv")):
            if np.linalg.eigvalsh(M).min() < -1e-12:
                raise IntervalError(f"{name} must be positive semidefinite")

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def n_w(self) -> int:
        return self.cw.shape[0]

    @property
    def m(self) -> int:
        return len(self.c)

    @property
    def n_p(self) -> int:
        return len(self.p_box) if self.p_box is not None else 0

    def c_pt(self, x: Sequence[float]) -> np.ndarray:
        env = list(x)
        if self.p_box is not None:
            env += self.p_box.mid()
        return np.array([[e.eval_pt(env) for e in row] for row in self.c])

    def a_pt(self, x: Sequence[float]) -> np.ndarray:
        env = list(x)
        if self.p_box is not None:
            env += self.p_box.mid()
        return np.array([[e.eval_pt(env) for e in row] for row in self.a])


@dataclass
class ILOConfig:
    mu0: np.ndarray
    gamma0: np.ndarray
    r: float = 1.0
    delta_ema: float = 0.5
    learn_delta: bool = True


@dataclass
class ILOState:
    """Joint estimate over two consecutive trials: 2n-dimensional ellipsoid."""

    mu: np.ndarray
    gamma: np.ndarray
    r: float

    @property
    def n2(self) -> int:
        return self.mu.shape[0]

    def cov(self) -> np.ndarray:
        return _sym(self.gamma @ self.gamma.T)


def _remap_block(exprs, state_map: list[int], n_state_old: int, n_aug: int, n_p: int):
    """Re-index a block's expressions from (x, p) to (z_aug, p) variables."""
    mapping = list(range(n_state_old + n_p))
    for i in range(n_state_old):
        mapping[i] = state_map[i]
    for j in range(n_p):
        mapping[n_state_old + j] = n_aug + j
    return [[e.remap_vars(mapping) for e in row] for row in exprs]


def _const(v: float) -> Expr:
    from .expr import Const

    return Const(float(v))


def _augmented_phi(system: ILOSystem) -> QLModel:
    """Block dynamics over z = (x^i, x^{i+1}, w^i, w^{i+1})."""
    n, nw, npar = system.n, system.n_w, system.n_p
    dim = 2 * n + 2 * nw
    zero = _const(0.0)
    rows = [[zero] * dim for _ in range(dim)]
    a_i = _remap_block(system.a, list(range(n)), n, dim, npar)
    a_j = _remap_block(system.a, [n + k for k in range(n)], n, dim, npar)
    e_i = _remap_block(system.e, list(range(n)), n, dim, npar)
    e_j = _remap_block(system.e, [n + k for k in range(n)], n, dim, npar)
    for i in range(n):
        for j in range(n):
            rows[i][j] = a_i[i][j]
            rows[n + i][n + j] = a_j[i][j]
        for j in range(nw):
            rows[i][2 * n + j] = e_i[i][j]
            rows[n + i][2 * n + nw + j] = e_j[i][j]
    for k in range(2 * nw):
        rows[2 * n + k][2 * n + k] = _const(1.0)
    return QLModel(tuple(tuple(r) for r in rows), dim, system.p_box)


def _output_phi(system: ILOSystem) -> QLModel:
    """Output-augmented square map used for the residual covariance."""
    n, m, npar = system.n, system.m, system.n_p
    dim = 2 * n
    zero = _const(0.0)
    rows = [[zero] * dim for _ in range(dim)]
    c_i = _remap_block(system.c, list(range(n)), n, dim, npar)
    c_j = _remap_block(system.c, [n + k for k in range(n)], n, dim, npar)
    for i in range(m):
        for j in range(n):
            rows[i][j] = c_i[i][j]
            rows[m + i][n + j] = c_j[i][j]
    for k in range(n - m):
        rows[2 * m + k][m + k] = _const(1.0)
        rows[2 * m + (n - m) + k][n + m + k] = _const(1.0)
    return QLModel(tuple(tuple(r) for r in rows), dim, system.p_box)


@dataclass
class StepInfo:
    alpha: float = 1.0
    rho_o: float = 0.0
    trace_cp: float = 0.0
    trace_ce: float = 0.0
    h1: Optional[np.ndarray] = None
    h2: Optional[np.ndarray] = None
    residual_fallback: bool = False


def predict_joint(
    state: ILOState, system: ILOSystem, delta: Optional[np.ndarray] = None
) -> tuple[ILOState, StepInfo]:
    """Noise-augmented joint prediction through the block dynamics.

    The learned correction is added to both trials' state midpoints; the
    2n x 2n covariance block of the mapped ellipsoid becomes the new joint
    shape factor.
    """
    n = system.n
    nw = system.n_w
    n2 = 2 * n
    noise_scale = max(1.0, float(np.abs(state.gamma).max()))
    gamma_w = _sqrtm_psd(system.cw, floor=(1e-10 * noise_scale) ** 2)
    gamma_aug = np.zeros((n2 + 2 * nw, n2 + 2 * nw))
    gamma_aug[:n2, :n2] = state.gamma
    gamma_aug[n2 : n2 + nw, n2 : n2 + nw] = gamma_w
    gamma_aug[n2 + nw :, n2 + nw :] = gamma_w
    mu_aug = np.concatenate([state.mu, np.zeros(2 * nw)])
    E_aug = Ellipsoid(mu_aug, gamma_aug, state.r)
    res = predict(_augmented_phi(system), E_aug)
    cov_full = res.ellipsoid.q_prime()
    cov_state = _sym(cov_full[:n2, :n2])
    mu_new = res.ellipsoid.mu[:n2].copy()
    if delta is not None:
        mu_new[:n] += delta
        mu_new[n:] += delta
    gamma_new = _sqrtm_psd(cov_state, floor=(1e-12 * max(1.0, np.abs(cov_state).max())))
    info = StepInfo(alpha=res.alpha, rho_o=res.rho_o, trace_cp=float(np.trace(cov_state)))
    return ILOState(mu_new, gamma_new, state.r), info


def _residual_blocks(
    state: ILOState, system: ILOSystem, info: StepInfo
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual covariance blocks via quasi-linear output propagation."""
    n, m = system.n, system.m
    out_model = _output_phi(system)
    phi_iv = out_model.eval_iv(Ellipsoid(state.mu, state.gamma, state.r).box_hull())
    if phi_iv.is_degenerate():
        Phi = np.array(
            [[phi_iv[i, j].lo for j in range(2 * n)] for i in range(2 * n)]
        )
        S_full = _sym(Phi @ state.cov() @ Phi.T)
    else:
        phi_t = out_model.eval_pt(state.mu)
        if np.linalg.cond(phi_t) > 1e12:
            info.residual_fallback = True
            C_i = system.c_pt(state.mu[:n])
            C_j = system.c_pt(state.mu[n:])
            Ct = np.block(
                [[C_i, np.zeros((m, n))], [np.zeros((m, n)), C_j]]
            )
            S_full = np.zeros((2 * n, 2 * n))
            S_full[: 2 * m, : 2 * m] = _sym(Ct @ state.cov() @ Ct.T)
        else:
            res = predict(out_model, Ellipsoid(state.mu, state.gamma, state.r),
                          phi_tilde=phi_t)
            S_full = res.ellipsoid.q_prime()
    S = _sym(S_full[: 2 * m, : 2 * m])
    cv = system.cv
    C_A = _sym(S[:m, :m] + cv)
    C_B = S[:m, m:]
    C_C = _sym(S[m:, m:] + cv)
    return C_A, C_B, C_C


def innovate(
    state: ILOState,
    y_i: np.ndarray,
    y_ip1: np.ndarray,
    system: ILOSystem,
) -> tuple[ILOState, StepInfo]:
    """Measurement update of the joint estimate with the causality-structured
    gain pair minimizing the estimation-error covariance trace."""
    n, m = system.n, system.m
    mu_p = state.mu
    C_p = state.cov()
    C_Ap = C_p[:n, :n]
    C_Bp = C_p[:n, n:]
    C_Cp = C_p[n:, n:]
    C_i = system.c_pt(mu_p[:n])
    C_j = system.c_pt(mu_p[n:])
    info = StepInfo(trace_cp=float(np.trace(C_p)))
    C_A, C_B, C_C = _residual_blocks(state, system, info)

    X = np.hstack([(C_i @ C_Ap + C_j @ C_Cp).T, (C_i @ C_Bp - C_j @ C_Cp).T])
    G = np.block(
        [
            [C_A + C_C, (C_B - C_C).T],
            [C_B - C_C, C_A - (C_B + C_B.T) + C_C],
        ]
    )
    try:
        H12 = np.linalg.solve(G.T, X.T).T
    except np.linalg.LinAlgError:
        info.residual_fallback = True
        H12 = np.linalg.solve((G + 1e-12 * np.eye(2 * m)).T, X.T).T
    H1 = H12[:, :m]
    H2 = H12[:, m:]
    H_tilde = np.block([[H1, np.zeros((n, m))], [H2, H1 - H2]])
    C_tilde = np.block([[C_i, np.zeros((m, n))], [np.zeros((m, n)), C_j]])
    y = np.concatenate([np.asarray(y_i, dtype=float), np.asarray(y_ip1, dtype=float)])
    mu_e = mu_p + H_tilde @ (y - C_tilde @ mu_p)
    M = np.eye(2 * n) - H_tilde @ C_tilde
    cv2 = np.block(
        [[system.cv, np.zeros((m, m))], [np.zeros((m, m)), system.cv]]
    )
    C_e = _sym(M @ C_p @ M.T + H_tilde @ cv2 @ H_tilde.T)
    gamma_e = _sqrtm_psd(C_e, floor=(1e-12 * max(1.0, np.abs(C_e).max())))
    info.trace_ce = float(np.trace(C_e))
    info.h1 = H1
    info.h2 = H2
    return ILOState(mu_e, gamma_e, state.r), info


# ---------------------------------------------------------------------------
# Single-trial bootstrap and the multi-trial run
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    mu: list[np.ndarray] = field(default_factory=list)
    trace_cp: list[float] = field(default_factory=list)
    trace_ce: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    rho_o: list[float] = field(default_factory=list)
    residual_norm: float = 0.0


def _single_phi(system: ILOSystem) -> QLModel:
    n, nw, npar = system.n, system.n_w, system.n_p
    dim = n + nw
    zero = _const(0.0)
    rows = [[zero] * dim for _ in range(dim)]
    a = _remap_block(system.a, list(range(n)), n, dim, npar)
    e = _remap_block(system.e, list(range(n)), n, dim, npar)
    for i in range(n):
        for j in range(n):
            rows[i][j] = a[i][j]
        for j in range(nw):
            rows[i][n + j] = e[i][j]
    for k in range(nw):
        rows[n + k][n + k] = _const(1.0)
    return QLModel(tuple(tuple(r) for r in rows), dim, system.p_box)


def single_trial_run(
    system: ILOSystem,
    ys: np.ndarray,
    config: ILOConfig,
    delta: Optional[np.ndarray] = None,
) -> TrialRecord:
    """Kalman-structured single-trial filter built on the same ellipsoidal
    prediction; bootstraps the first trial of an iterative-learning run."""
    n, nw, m = system.n, system.n_w, system.m
    mu = np.asarray(config.mu0, dtype=float).copy()
    gamma = np.atleast_2d(np.asarray(config.gamma0, dtype=float)).copy()
    rec = TrialRecord()
    model = _single_phi(system)
    K = len(ys)
    rec.mu.append(mu.copy())
    rec.trace_cp.append(float(np.trace(gamma @ gamma.T)))
    rec.trace_ce.append(rec.trace_cp[0])
    rec.alpha.append(1.0)
    rec.rho_o.append(0.0)
    for k in range(K - 1):
        noise_scale = max(1.0, float(np.abs(gamma).max()))
        gw = _sqrtm_psd(system.cw, floor=(1e-10 * noise_scale) ** 2)
        g_aug = np.zeros((n + nw, n + nw))
        g_aug[:n, :n] = gamma
        g_aug[n:, n:] = gw
        res = predict(model, Ellipsoid(np.concatenate([mu, np.zeros(nw)]), g_aug, config.r))
        cov = res.ellipsoid.q_prime()[:n, :n]
        mu_p = res.ellipsoid.mu[:n].copy()
        if delta is not None:
            mu_p += delta[k]
        C = system.c_pt(mu_p)
        S = _sym(C @ cov @ C.T + system.cv)
        Kk = np.linalg.solve(S.T, (cov @ C.T).T).T
        mu = mu_p + Kk @ (ys[k + 1] - C @ mu_p)
        Mk = np.eye(n) - Kk @ C
        cov_e = _sym(Mk @ cov @ Mk.T + Kk @ system.cv @ Kk.T)
        gamma = _sqrtm_psd(cov_e, floor=(1e-12 * max(1.0, np.abs(cov_e).max())))
        rec.mu.append(mu.copy())
        rec.trace_cp.append(float(np.trace(cov)))
        rec.trace_ce.append(float(np.trace(cov_e)))
        rec.alpha.append(res.alpha)
        rec.rho_o.append(res.rho_o)
    return rec


def _trial_residuals(
    system: ILOSystem, mus: list[np.ndarray]
) -> np.ndarray:
    """Post-innovation one-step residuals mu_{k+1} - A(mu_k) mu_k."""
    out = []
    for k in range(len(mus) - 1):
        A = system.a_pt(mus[k])
        out.append(mus[k + 1] - A @ mus[k])
    return np.array(out)


@dataclass
class ILORunResult:
    trials: list[TrialRecord]
    delta: np.ndarray  # learned per-step correction, shape (K-1, n)
    residual_norms: list[float]


def ilo_run(
    system: ILOSystem,
    trials: Sequence[np.ndarray],
    config: ILOConfig,
) -> ILORunResult:
    """Iterative-learning estimation across repeated executions.

    Trial 1 runs a single-trial bootstrap; every later trial is estimated
    jointly with its predecessor.  After each trial the per-step correction
    is refreshed from the post-innovation residuals (first observation
    initializes, later ones blend with the configured averaging factor);
    the reported residual norm is the mean unexplained residual.
    """
    if not trials:
        raise IntervalError("at least one trial required")
    K = len(trials[0])
    if any(len(t) != K for t in trials):
        raise IntervalError("all trials must share the horizon length")
    n = system.n
    delta = np.zeros((K - 1, n))
    have_delta = False
    records: list[TrialRecord] = []
    norms: list[float] = []

    def finish_trial(rec: TrialRecord, used: np.ndarray) -> None:
        nonlocal delta, have_delta
        resid = _trial_residuals(system, rec.mu)
        rec.residual_norm = float(np.mean(np.linalg.norm(resid - used, axis=1)))
        norms.append(rec.residual_norm)
        if config.learn_delta:
            if not have_delta:
                delta = resid.copy()
                have_delta = True
            else:
                delta = delta + config.delta_ema * (resid - delta)

    used = delta.copy()
    rec1 = single_trial_run(system, np.asarray(trials[0], dtype=float), config,
                            delta=used if have_delta else None)
    finish_trial(rec1, used)
    records.append(rec1)

    for t in range(1, len(trials)):
        used = delta.copy()
        y_prev = np.asarray(trials[t - 1], dtype=float)
        y_curr = np.asarray(trials[t], dtype=float)
        mu0 = np.asarray(config.mu0, dtype=float)
        g0 = np.atleast_2d(np.asarray(config.gamma0, dtype=float))
        state = ILOState(
            np.concatenate([mu0, mu0]),
            np.block([[g0, np.zeros((n, n))], [np.zeros((n, n)), g0]]),
            config.r,
        )
        rec = TrialRecord()
        rec.mu.append(mu0.copy())
        rec.trace_cp.append(float(np.trace(state.cov())))
        rec.trace_ce.append(rec.trace_cp[0])
        rec.alpha.append(1.0)
        rec.rho_o.append(0.0)
        for k in range(K - 1):
            state, pinfo = predict_joint(state, system, delta=used[k])
            state, iinfo = innovate(state, y_prev[k + 1], y_curr[k + 1], system)
            rec.mu.append(state.mu[n:].copy())
            rec.trace_cp.append(pinfo.trace_cp)
            rec.trace_ce.append(iinfo.trace_ce)
            rec.alpha.append(pinfo.alpha)
            rec.rho_o.append(pinfo.rho_o)
        finish_trial(rec, used)
        records.append(rec)
    return ILORunResult(records, delta, norms)
