"""Outward-rounded interval arithmetic: scalars, boxes, and matrices.

All values are immutable and every operation is pure, so intervals can be
shared freely across threads.  Arithmetic results always enclose the exact
real-set result; finite bounds are widened by at most one ULP and only when
the float computation was inexact.

The empty interval is a first-class value (``EMPTY``), produced by empty
intersections, so that intersection chains compose without exceptions.
Division by an interval containing zero raises ``IntervalDivisionError``
(extended division is deliberately unsupported).
"""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, Union

from . import rounding as rnd

__all__ = [
    "Interval",
    "IntervalVector",
    "IntervalMatrix",
    "EMPTY",
    "IntervalError",
    "IntervalDivisionError",
    "DomainError",
    "hull",
    "sign_iv",
]

IntervalLike = Union["Interval", float, int]


class IntervalError(ValueError):
    """Invalid interval construction or operation."""


class IntervalDivisionError(IntervalError):
    """Division by an interval containing zero."""


class DomainError(IntervalError):
    """Function evaluated outside its real domain (ln, sqrt, ...)."""


@dataclass(frozen=True, slots=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = self.lo, self.hi
        if math.isnan(lo) or math.isnan(hi):
            raise IntervalError("NaN interval bound")
        if lo > hi and not (lo == math.inf and hi == -math.inf):
            raise IntervalError(f"inverted bounds [{lo}, {hi}]")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def point(x: float) -> "Interval":
        x = float(x)
        return Interval(x, x)

    @staticmethod
    def sym(radius: float) -> "Interval":
        return Interval(-radius, radius)

    @staticmethod
    def empty() -> "Interval":
        return EMPTY

    @staticmethod
    def _coerce(x: IntervalLike) -> "Interval":
        if isinstance(x, Interval):
            return x
        return Interval.point(float(x))

    # -- predicates and measures -------------------------------------------

    @property
    def is_empty(self) -> bool:
        return self.lo > self.hi

    @property
    def is_degenerate(self) -> bool:
        return self.lo == self.hi

    def width(self) -> float:
        if self.is_empty:
            return 0.0
        return rnd.sub_ru(self.hi, self.lo)

    def rad(self) -> float:
        return 0.5 * self.width()

    def mid(self) -> float:
        if self.is_empty:
            raise IntervalError("mid of empty interval")
        if self.lo == -math.inf and self.hi == math.inf:
            return 0.0
        m = 0.5 * (self.lo + self.hi)
        if math.isinf(m) or math.isnan(m):
            m = 0.5 * self.lo + 0.5 * self.hi
        if math.isnan(m):
            m = 0.0 if self.contains(0.0) else (self.lo if math.isinf(self.hi) else self.hi)
        return min(max(m, self.lo), self.hi)

    def mag(self) -> float:
        """sup |x| over the interval."""
        if self.is_empty:
            return 0.0
        return max(abs(self.lo), abs(self.hi))

    def mig(self) -> float:
        """inf |x| over the interval."""
        if self.is_empty:
            return 0.0
        if self.lo <= 0.0 <= self.hi:
            return 0.0
        return min(abs(self.lo), abs(self.hi))

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    def encloses(self, other: "Interval") -> bool:
        if other.is_empty:
            return True
        return self.lo <= other.lo and other.hi <= self.hi

    def interior_contains(self, x: float) -> bool:
        return self.lo < x < self.hi

    # -- lattice -------------------------------------------------------------

    def intersect(self, other: IntervalLike) -> "Interval":
        o = Interval._coerce(other)
        if self.is_empty or o.is_empty:
            return EMPTY
        lo = max(self.lo, o.lo)
        hi = min(self.hi, o.hi)
        if lo > hi:
            return EMPTY
        return Interval(lo, hi)

    def hull(self, other: IntervalLike) -> "Interval":
        o = Interval._coerce(other)
        if self.is_empty:
            return o
        if o.is_empty:
            return self
        return Interval(min(self.lo, o.lo), max(self.hi, o.hi))

    def inflate(self, abs_delta: float, rel: float = 0.0) -> "Interval":
        if self.is_empty:
            return self
        r = rnd.add_ru(rnd.mul_ru(self.rad(), rel), abs_delta)
        return Interval(rnd.sub_rd(self.lo, r), rnd.add_ru(self.hi, r))

    def bisect(self, rel_pos: float = 0.5) -> tuple["Interval", "Interval"]:
        if self.is_empty or self.is_degenerate:
            raise IntervalError("bisect needs a nonempty, nondegenerate interval")
        if not 0.0 < rel_pos < 1.0:
            raise IntervalError("bisect rel_pos must lie in (0, 1)")
        cut = self.lo + rel_pos * (self.hi - self.lo)
        if not self.lo < cut < self.hi:
            cut = self.mid()
        if not self.lo < cut < self.hi:
            cut = math.nextafter(self.lo, self.hi)
        return Interval(self.lo, cut), Interval(cut, self.hi)

    # -- arithmetic ----------------------------------------------------------

    def __neg__(self) -> "Interval":
        if self.is_empty:
            return EMPTY
        return Interval(-self.hi, -self.lo)

    def __add__(self, other: IntervalLike) -> "Interval":
        if not isinstance(other, (Interval, numbers.Real)):
            return NotImplemented
        o = Interval._coerce(other)
        if self.is_empty or o.is_empty:
            return EMPTY
        return Interval(rnd.add_rd(self.lo, o.lo), rnd.add_ru(self.hi, o.hi))

    __radd__ = __add__

    def __sub__(self, other: IntervalLike) -> "Interval":
        if not isinstance(other, (Interval, numbers.Real)):
            return NotImplemented
        o = Interval._coerce(other)
        if self.is_empty or o.is_empty:
            return EMPTY
        return Interval(rnd.sub_rd(self.lo, o.hi), rnd.sub_ru(self.hi, o.lo))

    def __rsub__(self, other: IntervalLike) -> "Interval":
        if not isinstance(other, (Interval, numbers.Real)):
            return NotImplemented
        return Interval._coerce(other).__sub__(self)

    def __mul__(self, other: IntervalLike) -> "Interval":
        if not isinstance(other, (Interval, numbers.Real)):
            return NotImplemented
        o = Interval._coerce(other)
        if self.is_empty or o.is_empty:
            return EMPTY
        a, b, c, d = self.lo, self.hi, o.lo, o.hi
        lo = min(rnd.mul_rd(a, c), rnd.mul_rd(a, d), rnd.mul_rd(b, c), rnd.mul_rd(b, d))
        hi = max(rnd.mul_ru(a, c), rnd.mul_ru(a, d), rnd.mul_ru(b, c), rnd.mul_ru(b, d))
        return Interval(lo, hi)

    __rmul__ = __mul__

    def __truediv__(self, other: IntervalLike) -> "Interval":
        if not isinstance(other, (Interval, numbers.Real)):
            return NotImplemented
        o = Interval._coerce(other)
        if self.is_empty or o.is_empty:
            return EMPTY
        if o.lo <= 0.0 <= o.hi:
            raise IntervalDivisionError(f"division by {o} containing zero")
        a, b, c, d = self.lo, self.hi, o.lo, o.hi
        lo = min(rnd.div_rd(a, c), rnd.div_rd(a, d), rnd.div_rd(b, c), rnd.div_rd(b, d))
        hi = max(rnd.div_ru(a, c), rnd.div_ru(a, d), rnd.div_ru(b, c), rnd.div_ru(b, d))
        return Interval(lo, hi)

    def __rtruediv__(self, other: IntervalLike) -> "Interval":
        if not isinstance(other, (Interval, numbers.Real)):
            return NotImplemented
        return Interval._coerce(other).__truediv__(self)

    def __pow__(self, n: int) -> "Interval":
        if not isinstance(n, int):
            raise TypeError("interval power requires an integer exponent")
        if self.is_empty:
            return EMPTY
        if n == 0:
            return Interval(1.0, 1.0)
        if n < 0:
            return Interval(1.0, 1.0) / self.__pow__(-n)
        if n % 2 == 1:
            return Interval(rnd.pow_int_rd(self.lo, n), rnd.pow_int_ru(self.hi, n))
        m = self.mag()
        if self.lo <= 0.0 <= self.hi:
            return Interval(0.0, rnd.pow_int_ru(m, n))
        return Interval(rnd.pow_int_rd(self.mig(), n), rnd.pow_int_ru(m, n))

    def sqr(self) -> "Interval":
        """Dependency-aware square: the exact range of x**2."""
        return self.__pow__(2)

    def sqrt(self) -> "Interval":
        if self.is_empty:
            return EMPTY
        if self.lo < 0.0:
            raise DomainError(f"sqrt of {self} touching negatives")
        return Interval(rnd.sqrt_rd(self.lo), rnd.sqrt_ru(self.hi))

    def exp(self) -> "Interval":
        if self.is_empty:
            return EMPTY
        return Interval(rnd.exp_rd(self.lo), rnd.exp_ru(self.hi))

    def log(self) -> "Interval":
        if self.is_empty:
            return EMPTY
        if self.lo <= 0.0:
            raise DomainError(f"ln of {self} touching non-positives")
        return Interval(rnd.log_rd(self.lo), rnd.log_ru(self.hi))

    def abs_(self) -> "Interval":
        if self.is_empty:
            return EMPTY
        return Interval(self.mig(), self.mag())

    def sign(self) -> "Interval":
        """Set-valued sign with the sign(0) = 0 point convention."""
        if self.is_empty:
            return EMPTY
        if self.lo > 0.0:
            return Interval(1.0, 1.0)
        if self.hi < 0.0:
            return Interval(-1.0, -1.0)
        if self.lo == 0.0 and self.hi == 0.0:
            return Interval(0.0, 0.0)
        if self.lo == 0.0:
            return Interval(0.0, 1.0)
        if self.hi == 0.0:
            return Interval(-1.0, 0.0)
        return Interval(-1.0, 1.0)

    def __repr__(self) -> str:
        if self.is_empty:
            return "Interval.EMPTY"
        return f"[{self.lo!r}, {self.hi!r}]"


EMPTY = Interval(math.inf, -math.inf)


def hull(items: Iterable[IntervalLike]) -> Interval:
    acc = EMPTY
    for it in items:
        acc = acc.hull(Interval._coerce(it))
    return acc


def sign_iv(s: Interval) -> Interval:
    return s.sign()


class IntervalVector:
    """Axis-aligned box: the Cartesian product of scalar intervals.

    A box with any empty component is treated as the empty box.
    """

    __slots__ = ("_elems",)

    def __init__(self, elems: Iterable[IntervalLike]):
        self._elems = tuple(Interval._coerce(e) for e in elems)
        if not self._elems:
            raise IntervalError("empty dimension box")

    @staticmethod
    def from_point(xs: Sequence[float]) -> "IntervalVector":
        return IntervalVector([Interval.point(x) for x in xs])

    @staticmethod
    def from_bounds(lo: Sequence[float], hi: Sequence[float]) -> "IntervalVector":
        if len(lo) != len(hi):
            raise IntervalError("bound length mismatch")
        return IntervalVector([Interval(float(a), float(b)) for a, b in zip(lo, hi)])

    # -- container protocol ----------------------------------------------

    def __len__(self) -> int:
        return len(self._elems)

    def __iter__(self) -> Iterator[Interval]:
        return iter(self._elems)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return IntervalVector(self._elems[i])
        return self._elems[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, IntervalVector) and self._elems == other._elems

    def __hash__(self):
        return hash(self._elems)

    def replace(self, i: int, value: Interval) -> "IntervalVector":
        elems = list(self._elems)
        elems[i] = value
        return IntervalVector(elems)

    def concat(self, other: "IntervalVector") -> "IntervalVector":
        return IntervalVector(self._elems + other._elems)

    # -- predicates and measures -------------------------------------------

    @property
    def is_empty(self) -> bool:
        return any(e.is_empty for e in self._elems)

    def widths(self) -> list[float]:
        return [e.width() for e in self._elems]

    def max_width(self) -> float:
        return max(self.widths())

    def mid(self) -> list[float]:
        return [e.mid() for e in self._elems]

    def lo(self) -> list[float]:
        return [e.lo for e in self._elems]

    def hi(self) -> list[float]:
        return [e.hi for e in self._elems]

    def contains_point(self, xs: Sequence[float]) -> bool:
        return all(e.contains(float(x)) for e, x in zip(self._elems, xs))

    def encloses(self, other: "IntervalVector") -> bool:
        if other.is_empty:
            return True
        return all(a.encloses(b) for a, b in zip(self._elems, other._elems))

    def volume(self) -> float:
        v = 1.0
        for e in self._elems:
            v *= e.width()
        return v

    # -- elementwise set operations ----------------------------------------

    def intersect(self, other: "IntervalVector") -> "IntervalVector":
        return IntervalVector([a.intersect(b) for a, b in zip(self._elems, other._elems)])

    def hull(self, other: "IntervalVector") -> "IntervalVector":
        return IntervalVector([a.hull(b) for a, b in zip(self._elems, other._elems)])

    def inflate(self, abs_delta: float, rel: float = 0.0) -> "IntervalVector":
        return IntervalVector([e.inflate(abs_delta, rel) for e in self._elems])

    def bisect(self, dim: int, rel_pos: float = 0.5):
        a, b = self._elems[dim].bisect(rel_pos)
        return self.replace(dim, a), self.replace(dim, b)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: "IntervalVector") -> "IntervalVector":
        return IntervalVector([a + b for a, b in zip(self._elems, other._elems)])

    def __sub__(self, other: "IntervalVector") -> "IntervalVector":
        return IntervalVector([a - b for a, b in zip(self._elems, other._elems)])

    def __neg__(self) -> "IntervalVector":
        return IntervalVector([-a for a in self._elems])

    def scale(self, k: IntervalLike) -> "IntervalVector":
        k = Interval._coerce(k)
        return IntervalVector([k * a for a in self._elems])

    def __repr__(self) -> str:
        return "Box(" + ", ".join(repr(e) for e in self._elems) + ")"


class IntervalMatrix:
    """Rectangular grid of intervals with enclosure-preserving products."""

    __slots__ = ("_rows", "shape")

    def __init__(self, rows: Iterable[Iterable[IntervalLike]]):
        self._rows = tuple(tuple(Interval._coerce(e) for e in row) for row in rows)
        if not self._rows or not self._rows[0]:
            raise IntervalError("empty matrix")
        ncols = len(self._rows[0])
        if any(len(r) != ncols for r in self._rows):
            raise IntervalError("ragged matrix rows")
        self.shape = (len(self._rows), ncols)

    @staticmethod
    def from_real(m) -> "IntervalMatrix":
        return IntervalMatrix([[Interval.point(float(x)) for x in row] for row in m])

    @staticmethod
    def identity(n: int) -> "IntervalMatrix":
        return IntervalMatrix(
            [[Interval.point(1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
        )

    def __getitem__(self, ij) -> Interval:
        i, j = ij
        return self._rows[i][j]

    def row(self, i: int) -> tuple[Interval, ...]:
        return self._rows[i]

    @property
    def rows(self) -> tuple[tuple[Interval, ...], ...]:
        return self._rows

    @property
    def is_square(self) -> bool:
        return self.shape[0] == self.shape[1]

    def transpose(self) -> "IntervalMatrix":
        n, m = self.shape
        return IntervalMatrix([[self._rows[i][j] for i in range(n)] for j in range(m)])

    @property
    def T(self) -> "IntervalMatrix":
        return self.transpose()

    def mid(self) -> list[list[float]]:
        return [[e.mid() for e in row] for row in self._rows]

    def rad_sound(self) -> list[list[float]]:
        """Elementwise radii guaranteed to cover the rounded midpoints."""
        out = []
        for row in self._rows:
            r = []
            for e in row:
                m = e.mid()
                r.append(max(rnd.sub_ru(e.hi, m), rnd.sub_ru(m, e.lo), 0.0))
            out.append(r)
        return out

    def is_degenerate(self) -> bool:
        return all(e.is_degenerate for row in self._rows for e in row)

    def __add__(self, other: "IntervalMatrix") -> "IntervalMatrix":
        if self.shape != other.shape:
            raise IntervalError("matrix shape mismatch")
        return IntervalMatrix(
            [[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(self._rows, other._rows)]
        )

    def __sub__(self, other: "IntervalMatrix") -> "IntervalMatrix":
        if self.shape != other.shape:
            raise IntervalError("matrix shape mismatch")
        return IntervalMatrix(
            [[a - b for a, b in zip(r1, r2)] for r1, r2 in zip(self._rows, other._rows)]
        )

    def scale(self, k: IntervalLike) -> "IntervalMatrix":
        k = Interval._coerce(k)
        return IntervalMatrix([[k * e for e in row] for row in self._rows])

    def mat_vec(self, x: IntervalVector) -> IntervalVector:
        n, m = self.shape
        if m != len(x):
            raise IntervalError(f"mat_vec dimension mismatch {self.shape} @ {len(x)}")
        out = []
        for i in range(n):
            acc = Interval(0.0, 0.0)
            row = self._rows[i]
            for j in range(m):
                acc = acc + row[j] * x[j]
            out.append(acc)
        return IntervalVector(out)

    def mat_mul(self, other: "IntervalMatrix") -> "IntervalMatrix":
        n, m = self.shape
        m2, p = other.shape
        if m != m2:
            raise IntervalError(f"mat_mul dimension mismatch {self.shape} @ {other.shape}")
        out = []
        for i in range(n):
            row = []
            for j in range(p):
                acc = Interval(0.0, 0.0)
                for k in range(m):
                    acc = acc + self._rows[i][k] * other._rows[k][j]
                row.append(acc)
            out.append(row)
        return IntervalMatrix(out)

    def __matmul__(self, other):
        if isinstance(other, IntervalVector):
            return self.mat_vec(other)
        if isinstance(other, IntervalMatrix):
            return self.mat_mul(other)
        return NotImplemented

    def __repr__(self) -> str:
        body = ";\n ".join(", ".join(repr(e) for e in row) for row in self._rows)
        return f"IntervalMatrix(\n {body})\n"
