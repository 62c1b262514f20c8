"""Interval-based nonlinear model predictive control.

A receding-horizon tree search over piecewise-constant input boxes: the
input domain is subdivided per step, every node's state slice enclosure is
checked against the per-step corridor (unsafe nodes pruned immediately),
and surviving complete sequences carry a guaranteed cost enclosure.  The
applied input is the midpoint of the first box of the sup-cost-minimal
sequence.

Convergence toward the set-point box is enforced by a surrogate test on the
terminal slice (midpoint distance non-increasing and nonempty intersection
with the reference box); see ``is_safe``.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .interval import Interval, IntervalError, IntervalVector
from .reach import (
    NonlinearSystemModel,
    StepRejected,
    affine_in_states,
    validated_affine_step,
    validated_euler_step,
)

__all__ = [
    "MPCConfig",
    "InputBoxSequence",
    "CostEnclosure",
    "InfeasibleHorizon",
    "predict_slices",
    "is_safe",
    "cost_enclosure",
    "filter_and_branch",
    "optimize_and_extract",
    "mpc_step",
    "MPCStepResult",
]


class InfeasibleHorizon(RuntimeError):
    """No safe input sequence exists within the search budget."""

    def __init__(self, nodes_expanded: int, deepest: int):
        super().__init__(
            f"no safe input sequence found ({nodes_expanded} nodes, deepest level {deepest})"
        )
        self.nodes_expanded = nodes_expanded
        self.deepest = deepest


def _psd_check(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T, atol=1e-12):
        raise IntervalError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-12:
        raise IntervalError(f"{name} must be positive semidefinite")
    return M


@dataclass
class MPCConfig:
    np_steps: int
    tc: float
    q: np.ndarray
    r: np.ndarray
    x_min: np.ndarray  # shape (Np, n) or (n,)
    x_max: np.ndarray
    x_ref: IntervalVector
    u_domain: IntervalVector
    branch_factor: int = 3
    max_nodes: int = 10000
    substeps: int = 4

    def __post_init__(self):
        if self.np_steps < 1:
            raise IntervalError("prediction horizon must be >= 1 steps")
        if self.tc <= 0.0:
            raise IntervalError("control update step must be positive")
        if self.branch_factor < 1:
            raise IntervalError("branch factor must be >= 1")
        self.q = _psd_check(self.q, "Q")
        self.r = _psd_check(self.r, "R")
        n = len(self.x_ref)
        self.x_min = np.broadcast_to(np.asarray(self.x_min, dtype=float), (self.np_steps, n)).copy()
        self.x_max = np.broadcast_to(np.asarray(self.x_max, dtype=float), (self.np_steps, n)).copy()
        if np.any(self.x_min > self.x_max):
            raise IntervalError("empty state corridor")
        for j, e in enumerate(self.x_ref):
            if not (self.x_min[:, j].max() <= e.lo and e.hi <= self.x_max[:, j].min()):
                raise IntervalError("reference box must lie inside the corridor")

    def corridor_box(self, j: int) -> IntervalVector:
        return IntervalVector.from_bounds(self.x_min[j], self.x_max[j])


@dataclass(frozen=True)
class InputBoxSequence:
    boxes: tuple[IntervalVector, ...]

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class CostEnclosure:
    J: Interval


def _subdivide(domain: IntervalVector, parts: int) -> list[IntervalVector]:
    """Cartesian subdivision of the input box, `parts` slices per dimension."""
    per_dim: list[list[Interval]] = []
    for e in domain:
        if parts == 1 or e.is_degenerate:
            per_dim.append([e])
            continue
        cuts = np.linspace(e.lo, e.hi, parts + 1)
        cuts[0], cuts[-1] = e.lo, e.hi
        per_dim.append([Interval(cuts[i], cuts[i + 1]) for i in range(parts)])
    return [IntervalVector(combo) for combo in itertools.product(*per_dim)]


def _predict_one_slice(
    model: NonlinearSystemModel,
    x_box: IntervalVector,
    u_box: IntervalVector,
    p_box: Optional[IntervalVector],
    cfg: MPCConfig,
) -> tuple[IntervalVector, IntervalVector]:
    """Enclosure of all states over one control interval and the endpoint box."""
    stepper = validated_affine_step if affine_in_states(model) else validated_euler_step
    dt = cfg.tc / cfg.substeps
    box = x_box
    slice_hull = x_box
    for _ in range(cfg.substeps):
        h = dt
        while True:
            try:
                nxt = stepper(model, box, u_box, p_box, h)
                break
            except StepRejected:
                h *= 0.5
                if h < 1e-9 * dt:
                    raise
        # a sub-step may have been shortened; finish the remaining time
        remaining = dt - h
        while remaining > 1e-12 * dt:
            hh = min(h, remaining)
            nxt = stepper(model, nxt, u_box, p_box, hh)
            remaining -= hh
        slice_hull = slice_hull.hull(box.hull(nxt))
        box = nxt
    return slice_hull, box


def predict_slices(
    model: NonlinearSystemModel,
    x_box: IntervalVector,
    useq: InputBoxSequence,
    p_box: Optional[IntervalVector],
    cfg: MPCConfig,
) -> tuple[list[IntervalVector], list[IntervalVector]]:
    """Per-slice reachable-state enclosures and endpoint boxes for a full
    input sequence; sound for every parameter selection and every input
    selection within the per-step boxes."""
    if x_box.is_empty:
        raise IntervalError("empty initial state box")
    slices: list[IntervalVector] = []
    endpoints: list[IntervalVector] = []
    box = x_box
    for u_box in useq.boxes:
        sl, box = _predict_one_slice(model, box, u_box, p_box, cfg)
        slices.append(sl)
        endpoints.append(box)
    return slices, endpoints


def _mid_distance(box: IntervalVector, ref_mid: np.ndarray) -> float:
    return float(np.linalg.norm(np.array(box.mid()) - ref_mid))


def is_safe(
    slices: Sequence[IntervalVector],
    cfg: MPCConfig,
    x0_box: Optional[IntervalVector] = None,
) -> bool:
    """Corridor containment for every slice plus the terminal progress
    surrogate: terminal midpoint no farther from the reference midpoint than
    the initial box, and terminal slice intersecting the reference box."""
    for j, sl in enumerate(slices):
        if not cfg.corridor_box(j).encloses(sl):
            return False
    terminal = slices[-1]
    ref_mid = np.array(cfg.x_ref.mid())
    if terminal.intersect(cfg.x_ref).is_empty:
        return False
    start = x0_box if x0_box is not None else slices[0]
    return _mid_distance(terminal, ref_mid) <= _mid_distance(start, ref_mid) + 1e-12


def _quad_form_iv(d: Sequence[Interval], M: np.ndarray) -> Interval:
    """Dependency-aware interval quadratic form d' M d (diagonal via squares)."""
    acc = Interval(0.0, 0.0)
    n = len(d)
    for i in range(n):
        mii = M[i, i]
        if mii != 0.0:
            acc = acc + d[i].sqr() * float(mii)
        for j in range(i + 1, n):
            mij = M[i, j] + M[j, i]
            if mij != 0.0:
                acc = acc + d[i] * d[j] * float(mij)
    return acc


def cost_enclosure(
    slices: Sequence[IntervalVector],
    useq: InputBoxSequence,
    cfg: MPCConfig,
) -> CostEnclosure:
    """Guaranteed enclosure of the quadratic cost over the horizon.

    Sound for the exact integral cost of any admissible realization, since
    each slice box covers the state over its whole control interval.
    """
    if len(slices) != len(useq.boxes):
        raise IntervalError("slice / input sequence length mismatch")
    ref_mid = cfg.x_ref.mid()
    total = Interval(0.0, 0.0)
    for sl, ub in zip(slices, useq.boxes):
        dev = [sl[i] - Interval.point(ref_mid[i]) for i in range(len(sl))]
        total = total + _quad_form_iv(dev, cfg.q) + _quad_form_iv(list(ub), cfg.r)
    total = total * cfg.tc
    # Q, R PSD makes the true cost nonnegative; clamp the enclosure
    if total.lo < 0.0:
        total = total.intersect(Interval(0.0, np.inf))
    return CostEnclosure(total)


@dataclass(order=True)
class _Node:
    priority: float
    order: int
    depth: int = field(compare=False)
    useq: tuple[IntervalVector, ...] = field(compare=False)
    slices: tuple[IntervalVector, ...] = field(compare=False)
    endpoint: IntervalVector = field(compare=False)
    cost: Interval = field(compare=False)


def filter_and_branch(
    model: NonlinearSystemModel,
    x_box: IntervalVector,
    p_box: Optional[IntervalVector],
    cfg: MPCConfig,
) -> list[tuple[InputBoxSequence, CostEnclosure]]:
    """Best-first tree search over per-step input subdivisions.

    Unsafe nodes (corridor-violating slices, failed validated steps) are
    pruned immediately; complete sequences must additionally pass the
    terminal progress test.  Raises ``InfeasibleHorizon`` when the budget is
    exhausted without a single safe sequence.
    """
    if x_box.is_empty:
        raise IntervalError("empty initial state box")
    children = _subdivide(cfg.u_domain, cfg.branch_factor)
    ref_mid = cfg.x_ref.mid()
    heap: list[_Node] = []
    counter = itertools.count()
    heapq.heappush(
        heap, _Node(0.0, next(counter), 0, (), (), x_box, Interval(0.0, 0.0))
    )
    out: list[tuple[InputBoxSequence, CostEnclosure]] = []
    expanded = 0
    deepest = 0
    while heap and expanded < cfg.max_nodes:
        node = heapq.heappop(heap)
        if node.depth == cfg.np_steps:
            if is_safe(node.slices, cfg, x_box):
                seq = InputBoxSequence(node.useq)
                out.append((seq, cost_enclosure(node.slices, seq, cfg)))
            continue
        expanded += 1
        for u_box in children:
            try:
                sl, endpoint = _predict_one_slice(model, node.endpoint, u_box, p_box, cfg)
            except StepRejected:
                continue  # unsafe node: validated step failed
            if not cfg.corridor_box(node.depth).encloses(sl):
                continue
            dev = [sl[i] - Interval.point(ref_mid[i]) for i in range(len(sl))]
            contrib = (_quad_form_iv(dev, cfg.q) + _quad_form_iv(list(u_box), cfg.r)) * cfg.tc
            cost = node.cost + contrib
            deepest = max(deepest, node.depth + 1)
            heapq.heappush(
                heap,
                _Node(cost.lo, next(counter), node.depth + 1,
                      node.useq + (u_box,), node.slices + (sl,), endpoint, cost),
            )
    if not out:
        raise InfeasibleHorizon(expanded, deepest)
    return out


def _selection_key(item: tuple[InputBoxSequence, CostEnclosure]):
    seq, cost = item
    mids = tuple(m for box in seq.boxes for m in box.mid())
    return (cost.J.hi, cost.J.width(), mids)


def optimize_and_extract(
    candidates: Sequence[tuple[InputBoxSequence, CostEnclosure]],
) -> tuple[InputBoxSequence, np.ndarray]:
    """Deterministic selection: minimal sup-cost, ties by enclosure width,
    then lexicographic box midpoints; the applied input is the midpoint of
    the winner's first box."""
    if not candidates:
        raise IntervalError("empty candidate list")
    best_seq, _ = min(candidates, key=_selection_key)
    return best_seq, np.array(best_seq.boxes[0].mid())


@dataclass
class MPCStepResult:
    u_apply: np.ndarray
    cost: CostEnclosure
    n_candidates: int
    sequence: InputBoxSequence


def mpc_step(
    model: NonlinearSystemModel,
    x_meas_box: IntervalVector,
    p_box: Optional[IntervalVector],
    cfg: MPCConfig,
    prestab: Optional[np.ndarray] = None,
) -> MPCStepResult:
    """One receding-horizon update: branch, filter, optimize, extract.

    With a pre-stabilizing gain K the model is understood as the
    pre-stabilized plant and the optimized signal is the feedforward
    component; the applied input is u_ff - K x with x the box midpoint.
    """
    candidates = filter_and_branch(model, x_meas_box, p_box, cfg)
    best, cost = min(candidates, key=_selection_key)
    u_ff = np.array(best.boxes[0].mid())
    u_apply = u_ff
    if prestab is not None:
        K = np.atleast_2d(np.asarray(prestab, dtype=float))
        u_apply = u_ff - K @ np.array(x_meas_box.mid())
    return MPCStepResult(u_apply, cost, len(candidates), best)
