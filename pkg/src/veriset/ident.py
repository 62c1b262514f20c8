"""Guaranteed parameter identification.

Two cooperating procedures:

* a branch-and-bound partition of the parameter box (SIVIA-style) driven by
  the three-way feasibility classification of simulated output enclosures
  against interval-valued measurements, and
* a predictor/corrector loop that alternates validated state prediction with
  measurement intersection and HC4 contraction of states and parameters.

Classification is conservative throughout: integration failures and
undecidable overlaps never exclude a parameter region.
"""

from __future__ import annotations

import csv
import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .expr import Expr, hc4_contract
from .interval import Interval, IntervalError, IntervalVector
from .reach import (
    NonlinearSystemModel,
    StepRejected,
    affine_in_states,
    simulate_rk4,
    validated_affine_step,
    validated_euler_step,
)

__all__ = [
    "Status",
    "MeasurementRecord",
    "ParamBox",
    "IdentConfig",
    "ModelInconsistency",
    "classify_box",
    "sivia_identify",
    "SiviaResult",
    "sensitivity_bisect_dim",
    "predictor_corrector_run",
    "PredictorCorrectorResult",
    "read_measurements_csv",
    "write_boxes_csv",
]

log = logging.getLogger(__name__)


class Status(enum.Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class MeasurementRecord:
    """One sampling instant: sensor values with half-width tolerances."""

    t: float
    y: tuple[float, ...]
    dy: tuple[float, ...]

    def __post_init__(self):
        if len(self.y) != len(self.dy):
            raise IntervalError("y / dy length mismatch")
        if any(d < 0.0 for d in self.dy):
            raise IntervalError("tolerances must be nonnegative")

    def tube(self, j: int) -> Interval:
        return Interval(self.y[j] - self.dy[j], self.y[j] + self.dy[j])


def _check_records(data: Sequence[MeasurementRecord]) -> None:
    if not data:
        raise IntervalError("no measurement records")
    for a, b in zip(data, data[1:]):
        if not b.t > a.t:
            raise IntervalError("records must be strictly increasing in t")


@dataclass
class ParamBox:
    box: IntervalVector
    status: Status = Status.UNDECIDED

    def decide(self, status: Status) -> "ParamBox":
        if self.status is not Status.UNDECIDED:
            raise IntervalError("status is definitive once decided")
        return ParamBox(self.box, status)


@dataclass
class IdentConfig:
    model: NonlinearSystemModel
    output: tuple[Expr, ...]
    x0: IntervalVector
    min_box_width: float = 1e-3
    max_boxes: int = 100000
    bisect_rule: str = "widest-relative"
    inputs: Optional[list[tuple[float, ...]]] = None  # one vector per record, ZOH
    dt: Optional[float] = None  # integration sub-step; derived from data spacing if None

    def __post_init__(self):
        if self.min_box_width <= 0.0:
            raise IntervalError("min_box_width must be positive")
        if self.max_boxes < 1:
            raise IntervalError("max_boxes must be at least 1")
        if self.bisect_rule not in ("widest-relative", "sensitivity"):
            raise IntervalError(f"unknown bisect rule {self.bisect_rule!r}")

    def u_box(self, k: int) -> Optional[IntervalVector]:
        if self.model.n_inputs == 0:
            return None
        if self.inputs is None:
            raise IntervalError("model declares inputs but none were supplied")
        return IntervalVector.from_point(self.inputs[k])

    def sub_dt(self, gap: float) -> float:
        base = self.dt if self.dt is not None else gap / 8.0
        return min(base, gap)

    @property
    def affine(self) -> bool:
        # bracket-style stepping for state-affine models keeps enclosures
        # tight enough to actually certify feasibility (Case 2)
        if not hasattr(self, "_affine"):
            self._affine = affine_in_states(self.model)
        return self._affine


class ModelInconsistency(RuntimeError):
    """Predicted outputs and measurement tube are disjoint."""

    def __init__(self, k: int, sensor: int):
        super().__init__(f"measurement {k} (sensor {sensor}) excludes the whole model set")
        self.k = k
        self.sensor = sensor


def _integrate_to(
    cfg: IdentConfig,
    x_box: IntervalVector,
    p_box: IntervalVector,
    u_box: Optional[IntervalVector],
    t_from: float,
    t_to: float,
) -> IntervalVector:
    step = validated_affine_step if cfg.affine else validated_euler_step
    t = t_from
    box = x_box
    while t < t_to - 1e-12 * max(1.0, abs(t_to)):
        h = min(cfg.sub_dt(t_to - t_from), t_to - t)
        while True:
            try:
                box = step(cfg.model, box, u_box, p_box, h)
                break
            except StepRejected:
                h *= 0.5
                if h < 1e-10 * (t_to - t_from):
                    raise
        t += h
    return box


def _output_box(cfg: IdentConfig, x_box, u_box, p_box) -> list[Interval]:
    env = cfg.model.env(x_box, u_box, p_box)
    return [e.eval_iv(env) for e in cfg.output]


def classify_box(
    p_box: IntervalVector,
    cfg: IdentConfig,
    data: Sequence[MeasurementRecord],
) -> Status:
    """Three-way consistency test of a parameter box against the data.

    INFEASIBLE as soon as one sensor's output enclosure is disjoint from its
    measurement tube (simulation aborts there); FEASIBLE only if every
    enclosure is a subset of its tube at every instant; UNDECIDED otherwise,
    including when validated integration rejects the step (conservative).
    """
    if p_box.is_empty:
        raise IntervalError("empty parameter box")
    _check_records(data)
    x_box = cfg.x0
    t = 0.0
    all_inside = True
    for k, rec in enumerate(data):
        u_box = cfg.u_box(k)
        try:
            if rec.t > t:
                x_box = _integrate_to(cfg, x_box, p_box, u_box, t, rec.t)
            t = rec.t
        except StepRejected:
            log.warning("integration rejected for %s; box left undecided", p_box)
            return Status.UNDECIDED
        ys = _output_box(cfg, x_box, u_box, p_box)
        for j, y in enumerate(ys):
            tube = rec.tube(j)
            if y.intersect(tube).is_empty:
                return Status.INFEASIBLE
            if not tube.encloses(y):
                all_inside = False
    return Status.FEASIBLE if all_inside else Status.UNDECIDED


@dataclass
class SiviaResult:
    feasible: list[IntervalVector] = field(default_factory=list)
    undecided: list[IntervalVector] = field(default_factory=list)
    infeasible: list[IntervalVector] = field(default_factory=list)
    complete: bool = True
    n_classified: int = 0

    def volumes(self) -> dict[str, float]:
        return {
            "feasible": sum(b.volume() for b in self.feasible),
            "undecided": sum(b.volume() for b in self.undecided),
            "infeasible": sum(b.volume() for b in self.infeasible),
        }


def _widest_relative_dim(p: IntervalVector, p0: IntervalVector) -> int:
    best, best_val = 0, -1.0
    for i, (e, e0) in enumerate(zip(p, p0)):
        w0 = e0.width()
        val = e.width() / w0 if w0 > 0.0 else 0.0
        if val > best_val + 1e-15:
            best, best_val = i, val
    return best


def sensitivity_bisect_dim(
    p: IntervalVector,
    cfg: IdentConfig,
    data: Sequence[MeasurementRecord],
) -> int:
    """Dimension maximizing width * |d(worst-case output mismatch)/dp_i|,
    finite differences at the box midpoint; ties resolve to the lowest index."""
    widths = p.widths()
    if all(w == 0.0 for w in widths):
        raise IntervalError("all parameter components degenerate")

    def mismatch(pvec: np.ndarray) -> float:
        x0 = np.array(cfg.x0.mid())
        worst = 0.0
        t = 0.0
        x = x0
        for k, rec in enumerate(data):
            u = cfg.inputs[k] if cfg.inputs is not None else ()
            if rec.t > t:
                grid = np.linspace(t, rec.t, 9)
                deriv = lambda _t, xv: cfg.model.f_pt(xv, u, pvec)
                x = simulate_rk4(deriv, x, grid)[-1]
                t = rec.t
            env = list(x) + list(u) + list(pvec)
            for j, e in enumerate(cfg.output):
                worst = max(worst, abs(e.eval_pt(env) - rec.y[j]))
        return worst

    mid = np.array(p.mid())
    best, best_val = 0, -1.0
    for i, w in enumerate(widths):
        if w == 0.0:
            continue
        h = max(1e-6, 1e-2 * w)
        lo = mid.copy()
        hi = mid.copy()
        lo[i] -= h
        hi[i] += h
        sens = abs(mismatch(hi) - mismatch(lo)) / (2.0 * h)
        val = w * sens
        if val > best_val + 1e-15:
            best, best_val = i, val
    return best


def sivia_identify(
    p0: IntervalVector,
    cfg: IdentConfig,
    data: Sequence[MeasurementRecord],
) -> SiviaResult:
    """Breadth-first branch-and-bound partition of the parameter box.

    The union of the three returned lists is an exact partition of ``p0``;
    any parameter consistent with the data lies in feasible + undecided.
    Boxes at or below ``min_box_width`` stay undecided; exhausting
    ``max_boxes`` classifications flags the result incomplete.
    """
    if p0.is_empty:
        raise IntervalError("empty initial parameter box")
    res = SiviaResult()
    queue: deque[IntervalVector] = deque([p0])
    while queue:
        if res.n_classified >= cfg.max_boxes:
            res.undecided.extend(queue)
            res.complete = False
            break
        box = queue.popleft()
        status = classify_box(box, cfg, data)
        res.n_classified += 1
        if status is Status.FEASIBLE:
            res.feasible.append(box)
        elif status is Status.INFEASIBLE:
            res.infeasible.append(box)
        elif box.max_width() <= cfg.min_box_width:
            res.undecided.append(box)
        else:
            if cfg.bisect_rule == "sensitivity":
                dim = sensitivity_bisect_dim(box, cfg, data)
            else:
                dim = _widest_relative_dim(box, p0)
            left, right = box.bisect(dim)
            queue.append(left)
            queue.append(right)
    return res


@dataclass
class PredictorCorrectorResult:
    times: list[float]
    state_tube: list[IntervalVector]
    p_box: Optional[IntervalVector]


def predictor_corrector_run(
    cfg: IdentConfig,
    data: Sequence[MeasurementRecord],
    p0: Optional[IntervalVector] = None,
) -> PredictorCorrectorResult:
    """Alternating validated prediction and measurement-based correction.

    At each measurement instant the predicted output enclosure is intersected
    with the tube; the output constraint is then propagated backwards through
    an HC4 sweep over the joint (state, input, parameter) box.  The parameter
    box never grows; an empty intersection raises ``ModelInconsistency``.
    """
    _check_records(data)
    if p0 is None and cfg.model.n_params:
        raise IntervalError("initial parameter box required")
    p_box = p0 if cfg.model.n_params else None
    x_box = cfg.x0
    t = 0.0
    times: list[float] = []
    tube: list[IntervalVector] = []
    n, m = cfg.model.n_states, cfg.model.n_inputs
    for k, rec in enumerate(data):
        u_box = cfg.u_box(k)
        if rec.t > t:
            x_box = _integrate_to(cfg, x_box, p_box, u_box, t, rec.t)
        t = rec.t
        for j, e in enumerate(cfg.output):
            env = cfg.model.env(x_box, u_box, p_box)
            y_pred = e.eval_iv(env)
            target = y_pred.intersect(rec.tube(j))
            if target.is_empty:
                raise ModelInconsistency(k, j)
            contracted = hc4_contract(e, target, env)
            if contracted is None:
                raise ModelInconsistency(k, j)
            x_box = contracted[:n]
            if cfg.model.n_params:
                p_box = contracted[n + m:]
        times.append(t)
        tube.append(x_box)
    return PredictorCorrectorResult(times, tube, p_box)


# ---------------------------------------------------------------------------
# CSV interfaces: `t, y_1..y_m, dy_1..dy_m` in; boxes out.
# ---------------------------------------------------------------------------


def read_measurements_csv(path, n_sensors: int) -> list[MeasurementRecord]:
    records = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if len(header) != 1 + 2 * n_sensors:
            raise IntervalError("measurement CSV column count mismatch")
        for row in rd:
            vals = [float(x) for x in row]
            records.append(
                MeasurementRecord(
                    vals[0],
                    tuple(vals[1 : 1 + n_sensors]),
                    tuple(vals[1 + n_sensors :]),
                )
            )
    _check_records(records)
    return records


def write_boxes_csv(path, result: SiviaResult) -> None:
    groups = (
        (Status.FEASIBLE, result.feasible),
        (Status.UNDECIDED, result.undecided),
        (Status.INFEASIBLE, result.infeasible),
    )
    n_dims = None
    for _, boxes in groups:
        if boxes:
            n_dims = len(boxes[0])
            break
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        cols = ["status"]
        for i in range(n_dims or 0):
            cols += [f"p{i+1}_lo", f"p{i+1}_hi"]
        wr.writerow(cols)
        for status, boxes in groups:
            for b in boxes:
                row = [status.value]
                for e in b:
                    row += [repr(e.lo), repr(e.hi)]
                wr.writerow(row)
