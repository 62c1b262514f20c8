"""Directed-rounding float kernels.

Every bound computed here satisfies a one-sided guarantee: ``*_rd`` results
are <= the exact real value, ``*_ru`` results are >= it.  Exact results are
returned unchanged (no gratuitous widening), which lets integer-endpoint
arithmetic stay exact; inexact results are stepped outward by one ULP.

Exactness detection uses error-free transformations (2Sum for sums, Dekker's
two-product for products) with a ``fractions.Fraction`` fallback for the
ranges where the float tricks lose validity (overflow, subnormals).
"""

from __future__ import annotations

import math
from fractions import Fraction

INF = math.inf
MAX_FLOAT = math.nextafter(INF, 0.0)
TINY_FLOAT = math.nextafter(0.0, 1.0)

# Dekker splitting and the two-product error term are valid well inside
# these magnitude limits; outside them we fall back to exact rationals.
_SPLITTER = 134217729.0  # 2**27 + 1
_SAFE_LO = 1e-290
_SAFE_HI = 1e290


def next_down(x: float) -> float:
    return math.nextafter(x, -INF)


def next_up(x: float) -> float:
    return math.nextafter(x, INF)


def _sum_err(a: float, b: float, s: float) -> float:
    # 2Sum: exact error of the rounded sum (finite, non-overflowing case).
    bv = s - a
    return (a - (s - bv)) + (b - bv)


def add_rd(a: float, b: float) -> float:
    s = a + b
    if math.isinf(s):
        if s > 0.0 and not (math.isinf(a) or math.isinf(b)):
            return MAX_FLOAT
        return s
    if math.isinf(a) or math.isinf(b):
        return s
    return s if _sum_err(a, b, s) >= 0.0 else next_down(s)


def add_ru(a: float, b: float) -> float:
    s = a + b
    if math.isinf(s):
        if s < 0.0 and not (math.isinf(a) or math.isinf(b)):
            return -MAX_FLOAT
        return s
    if math.isinf(a) or math.isinf(b):
        return s
    return s if _sum_err(a, b, s) <= 0.0 else next_up(s)


def sub_rd(a: float, b: float) -> float:
    return add_rd(a, -b)


def sub_ru(a: float, b: float) -> float:
    return add_ru(a, -b)


def _prod_err(a: float, b: float, p: float) -> float:
    # Dekker two-product: exact error of the rounded product.
    c = _SPLITTER * a
    ah = c - (c - a)
    al = a - ah
    c = _SPLITTER * b
    bh = c - (c - b)
    bl = b - bh
    return ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _mul_sign_exact(a: float, b: float, p: float) -> int:
    """Sign of a*b - p, decided exactly via rationals (slow path)."""
    d = Fraction(a) * Fraction(b) - Fraction(p)
    return (d > 0) - (d < 0)


def mul_rd(a: float, b: float) -> float:
    if a == 0.0 or b == 0.0:
        return 0.0
    p = a * b
    if math.isinf(p):
        if math.isinf(a) or math.isinf(b):
            return p
        return MAX_FLOAT if p > 0.0 else p
    ap, bp, pp = abs(a), abs(b), abs(p)
    if _SAFE_LO < pp < _SAFE_HI and ap < _SAFE_HI and bp < _SAFE_HI:
        err = _prod_err(a, b, p)
        return p if err >= 0.0 else next_down(p)
    s = _mul_sign_exact(a, b, p)
    return p if s >= 0 else next_down(p)


def mul_ru(a: float, b: float) -> float:
    if a == 0.0 or b == 0.0:
        return 0.0
    p = a * b
    if math.isinf(p):
        if math.isinf(a) or math.isinf(b):
            return p
        return -MAX_FLOAT if p < 0.0 else p
    ap, bp, pp = abs(a), abs(b), abs(p)
    if _SAFE_LO < pp < _SAFE_HI and ap < _SAFE_HI and bp < _SAFE_HI:
        err = _prod_err(a, b, p)
        return p if err <= 0.0 else next_up(p)
    s = _mul_sign_exact(a, b, p)
    return p if s <= 0 else next_up(p)


def _div_cmp_exact(q: float, b: float, a: float) -> int:
    """Exact sign of a/b - q, via rationals."""
    d = Fraction(a) - Fraction(q) * Fraction(b)
    if d == 0:
        return 0
    num_pos = d > 0
    return 1 if num_pos == (b > 0.0) else -1


def _div_cmp(a: float, b: float, q: float) -> int:
    """Sign of a/b - q.  Fast error-free path, rational fallback."""
    if not (_SAFE_LO < abs(q) < _SAFE_HI and _SAFE_LO < abs(a) < _SAFE_HI
            and _SAFE_LO < abs(b) < _SAFE_HI):
        return _div_cmp_exact(q, b, a)
    p = q * b
    err = _prod_err(q, b, p)
    d = a - p  # exact by Sterbenz: q*b agrees with a to within rounding
    # a - q*b = d - err exactly; float subtraction never flips the sign.
    if d == err:
        return 0
    num_pos = d > err
    return 1 if num_pos == (b > 0.0) else -1


def div_rd(a: float, b: float) -> float:
    if a == 0.0:
        return 0.0
    if math.isinf(a):
        return a if (a > 0.0) == (b > 0.0) else -INF
    q = a / b
    if math.isinf(q):
        return MAX_FLOAT if q > 0.0 else q
    return q if _div_cmp(a, b, q) >= 0 else next_down(q)


def div_ru(a: float, b: float) -> float:
    if a == 0.0:
        return 0.0
    if math.isinf(a):
        return a if (a > 0.0) == (b > 0.0) else -INF
    q = a / b
    if math.isinf(q):
        return -MAX_FLOAT if q < 0.0 else q
    return q if _div_cmp(a, b, q) <= 0 else next_up(q)


def sqrt_rd(x: float) -> float:
    if x == 0.0:
        return 0.0
    s = math.sqrt(x)
    if math.isinf(s):
        return MAX_FLOAT
    return s if Fraction(s) * Fraction(s) <= Fraction(x) else next_down(s)


def sqrt_ru(x: float) -> float:
    if x == 0.0:
        return 0.0
    s = math.sqrt(x)
    if math.isinf(s):
        return s
    return s if Fraction(s) * Fraction(s) >= Fraction(x) else next_up(s)


def exp_rd(x: float) -> float:
    if x == 0.0:
        return 1.0
    if x == -INF:
        return 0.0
    v = math.exp(min(x, 709.9)) if x < 710.0 else INF
    if math.isinf(v):
        return MAX_FLOAT
    if v == 0.0:
        return 0.0
    return next_down(v)


def exp_ru(x: float) -> float:
    if x == 0.0:
        return 1.0
    if x == -INF:
        return 0.0
    if x > 709.9:
        return INF
    v = math.exp(x)
    if math.isinf(v):
        return INF
    if v == 0.0:
        return TINY_FLOAT
    return next_up(v)


def log_rd(x: float) -> float:
    if x == 1.0:
        return 0.0
    if math.isinf(x):
        return INF
    return next_down(math.log(x))


def log_ru(x: float) -> float:
    if x == 1.0:
        return 0.0
    if math.isinf(x):
        return INF
    return next_up(math.log(x))


def float_rd(x: Fraction) -> float:
    """Largest float <= the exact rational x."""
    try:
        f = float(x)
    except OverflowError:
        return MAX_FLOAT if x > 0 else -INF
    if math.isinf(f):
        return MAX_FLOAT if f > 0.0 else f
    return f if Fraction(f) <= x else next_down(f)


def float_ru(x: Fraction) -> float:
    try:
        f = float(x)
    except OverflowError:
        return INF if x > 0 else -MAX_FLOAT
    if math.isinf(f):
        return -MAX_FLOAT if f < 0.0 else f
    return f if Fraction(f) >= x else next_up(f)


def pow_int_rd(x: float, n: int) -> float:
    if n == 0:
        return 1.0
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        v = x ** n
        return v if not math.isnan(v) else 0.0
    return float_rd(Fraction(x) ** n)


def pow_int_ru(x: float, n: int) -> float:
    if n == 0:
        return 1.0
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        v = x ** n
        return v if not math.isnan(v) else 0.0
    return float_ru(Fraction(x) ** n)


def root_rd(y: float, n: int) -> float:
    """Largest float r with r**n <= y, for y >= 0 and n >= 1."""
    if y == 0.0:
        return 0.0
    if math.isinf(y):
        return INF
    r = y ** (1.0 / n)
    fy = Fraction(y)
    for _ in range(8):
        if Fraction(r) ** n <= fy:
            break
        r = next_down(r)
    else:  # pragma: no cover
        raise ArithmeticError("root_rd failed to converge")
    while Fraction(next_up(r)) ** n <= fy:
        r = next_up(r)
    return r


def root_ru(y: float, n: int) -> float:
    """Smallest float r with r**n >= y, for y >= 0 and n >= 1."""
    if y == 0.0:
        return 0.0
    if math.isinf(y):
        return INF
    r = y ** (1.0 / n)
    fy = Fraction(y)
    for _ in range(8):
        if Fraction(r) ** n >= fy:
            break
        r = next_up(r)
    else:  # pragma: no cover
        raise ArithmeticError("root_ru failed to converge")
    while Fraction(next_down(r)) ** n >= fy:
        r = next_down(r)
    return r
