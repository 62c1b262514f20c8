"""Expression trees: natural interval extensions, AD, and HC4 contraction.

An ``Expr`` encodes a scalar function of an indexed variable environment.
Evaluating it over a box yields the natural interval extension, which
encloses the exact image set.  ``diff`` produces the symbolic partial
derivative (used for validated-integration remainder bounds and for
sensitivity analysis); ``hc4_contract`` runs a single forward/backward
constraint-propagation sweep.

Node kinds: constants (point or interval), variables, unary {neg, exp, ln,
abs, sqr, sign}, binary {add, sub, mul, div}, and integer powers.
"""

from __future__ import annotations

import math
from typing import Sequence, Union

from .interval import (
    EMPTY,
    DomainError,
    Interval,
    IntervalError,
    IntervalVector,
)

__all__ = ["Expr", "Const", "Var", "var", "const", "hc4_contract"]

Operand = Union["Expr", Interval, float, int]


class Expr:
    """Immutable expression node; build trees with normal Python operators."""

    __slots__ = ()

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _wrap(x: Operand) -> "Expr":
        if isinstance(x, Expr):
            return x
        if isinstance(x, Interval):
            return Const(x)
        return Const(Interval.point(float(x)))

    def __add__(self, other: Operand) -> "Expr":
        return Binary("add", self, Expr._wrap(other))

    def __radd__(self, other: Operand) -> "Expr":
        return Binary("add", Expr._wrap(other), self)

    def __sub__(self, other: Operand) -> "Expr":
        return Binary("sub", self, Expr._wrap(other))

    def __rsub__(self, other: Operand) -> "Expr":
        return Binary("sub", Expr._wrap(other), self)

    def __mul__(self, other: Operand) -> "Expr":
        return Binary("mul", self, Expr._wrap(other))

    def __rmul__(self, other: Operand) -> "Expr":
        return Binary("mul", Expr._wrap(other), self)

    def __truediv__(self, other: Operand) -> "Expr":
        return Binary("div", self, Expr._wrap(other))

    def __rtruediv__(self, other: Operand) -> "Expr":
        return Binary("div", Expr._wrap(other), self)

    def __neg__(self) -> "Expr":
        return Unary("neg", self)

    def __pow__(self, n: int) -> "Expr":
        if not isinstance(n, int):
            raise TypeError("expression power requires an integer exponent")
        return PowInt(self, n)

    def exp(self) -> "Expr":
        return Unary("exp", self)

    def log(self) -> "Expr":
        return Unary("ln", self)

    def abs_(self) -> "Expr":
        return Unary("abs", self)

    def sqr(self) -> "Expr":
        return Unary("sqr", self)

    def sign(self) -> "Expr":
        return Unary("sign", self)

    # -- queries --------------------------------------------------------------

    def max_var(self) -> int:
        """Largest variable index used, or -1 for constant expressions."""
        raise NotImplementedError

    def eval_iv(self, env: IntervalVector | Sequence[Interval]) -> Interval:
        raise NotImplementedError

    def eval_pt(self, xs: Sequence[float]) -> float:
        raise NotImplementedError

    def diff(self, i: int) -> "Expr":
        raise NotImplementedError

    def shift_vars(self, offset: int) -> "Expr":
        """Same expression with every variable index shifted by ``offset``."""
        raise NotImplementedError

    def uses_var_below(self, k: int) -> bool:
        """Does the expression reference any variable with index < k?"""
        raise NotImplementedError

    def remap_vars(self, mapping: Sequence[int]) -> "Expr":
        """Same expression with variable i replaced by Var(mapping[i])."""
        raise NotImplementedError

    def nonsmooth_on_vars_below(self, k: int) -> bool:
        """Is there an abs/sign node over a subtree referencing vars < k?"""
        raise NotImplementedError


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: Interval | float):
        self.value = value if isinstance(value, Interval) else Interval.point(float(value))

    def max_var(self) -> int:
        return -1

    def eval_iv(self, env) -> Interval:
        return self.value

    def eval_pt(self, xs) -> float:
        return self.value.mid()

    def diff(self, i: int) -> Expr:
        return _ZERO

    def shift_vars(self, offset: int) -> Expr:
        return self

    def uses_var_below(self, k: int) -> bool:
        return False

    def nonsmooth_on_vars_below(self, k: int) -> bool:
        return False

    def remap_vars(self, mapping) -> Expr:
        return self

    def __repr__(self):
        return f"Const({self.value!r})"


class Var(Expr):
    __slots__ = ("index",)

    def __init__(self, index: int):
        if index < 0:
            raise IntervalError("variable index must be nonnegative")
        self.index = index

    def max_var(self) -> int:
        return self.index

    def eval_iv(self, env) -> Interval:
        return env[self.index]

    def eval_pt(self, xs) -> float:
        return float(xs[self.index])

    def diff(self, i: int) -> Expr:
        return _ONE if i == self.index else _ZERO

    def shift_vars(self, offset: int) -> Expr:
        return Var(self.index + offset) if offset else self

    def uses_var_below(self, k: int) -> bool:
        return self.index < k

    def nonsmooth_on_vars_below(self, k: int) -> bool:
        return False

    def remap_vars(self, mapping) -> Expr:
        return Var(mapping[self.index])

    def __repr__(self):
        return f"Var({self.index})"


def _sign_pt(x: float) -> float:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


class Unary(Expr):
    __slots__ = ("op", "child")

    _OPS = ("neg", "exp", "ln", "abs", "sqr", "sign")

    def __init__(self, op: str, child: Expr):
        if op not in self._OPS:
            raise IntervalError(f"unknown unary op {op!r}")
        self.op = op
        self.child = child

    def max_var(self) -> int:
        return self.child.max_var()

    def eval_iv(self, env) -> Interval:
        v = self.child.eval_iv(env)
        op = self.op
        if op == "neg":
            return -v
        if op == "exp":
            return v.exp()
        if op == "ln":
            return v.log()
        if op == "abs":
            return v.abs_()
        if op == "sqr":
            return v.sqr()
        return v.sign()

    def eval_pt(self, xs) -> float:
        v = self.child.eval_pt(xs)
        op = self.op
        if op == "neg":
            return -v
        if op == "exp":
            return math.exp(v)
        if op == "ln":
            if v <= 0.0:
                raise DomainError(f"ln of {v}")
            return math.log(v)
        if op == "abs":
            return abs(v)
        if op == "sqr":
            return v * v
        return _sign_pt(v)

    def diff(self, i: int) -> Expr:
        du = self.child.diff(i)
        op = self.op
        if op == "neg":
            return _neg(du)
        if op == "exp":
            return _mul(Unary("exp", self.child), du)
        if op == "ln":
            return _div(du, self.child)
        if op == "abs":
            return _mul(Unary("sign", self.child), du)
        if op == "sqr":
            return _mul(_mul(Const(2.0), self.child), du)
        # sign: zero a.e.; the switching point itself is never differentiated
        return _ZERO

    def shift_vars(self, offset: int) -> Expr:
        return Unary(self.op, self.child.shift_vars(offset)) if offset else self

    def uses_var_below(self, k: int) -> bool:
        return self.child.uses_var_below(k)

    def nonsmooth_on_vars_below(self, k: int) -> bool:
        if self.op in ("abs", "sign") and self.child.uses_var_below(k):
            return True
        return self.child.nonsmooth_on_vars_below(k)

    def remap_vars(self, mapping) -> Expr:
        return Unary(self.op, self.child.remap_vars(mapping))

    def __repr__(self):
        return f"{self.op}({self.child!r})"


class Binary(Expr):
    __slots__ = ("op", "a", "b")

    _OPS = ("add", "sub", "mul", "div")

    def __init__(self, op: str, a: Expr, b: Expr):
        if op not in self._OPS:
            raise IntervalError(f"unknown binary op {op!r}")
        self.op = op
        self.a = a
        self.b = b

    def max_var(self) -> int:
        return max(self.a.max_var(), self.b.max_var())

    def eval_iv(self, env) -> Interval:
        x = self.a.eval_iv(env)
        y = self.b.eval_iv(env)
        op = self.op
        if op == "add":
            return x + y
        if op == "sub":
            return x - y
        if op == "mul":
            return x * y
        return x / y

    def eval_pt(self, xs) -> float:
        x = self.a.eval_pt(xs)
        y = self.b.eval_pt(xs)
        op = self.op
        if op == "add":
            return x + y
        if op == "sub":
            return x - y
        if op == "mul":
            return x * y
        return x / y

    def diff(self, i: int) -> Expr:
        da, db = self.a.diff(i), self.b.diff(i)
        op = self.op
        if op == "add":
            return _add(da, db)
        if op == "sub":
            return _sub(da, db)
        if op == "mul":
            return _add(_mul(da, self.b), _mul(self.a, db))
        # quotient rule
        num = _sub(_mul(da, self.b), _mul(self.a, db))
        return _div(num, Unary("sqr", self.b))

    def shift_vars(self, offset: int) -> Expr:
        if not offset:
            return self
        return Binary(self.op, self.a.shift_vars(offset), self.b.shift_vars(offset))

    def uses_var_below(self, k: int) -> bool:
        return self.a.uses_var_below(k) or self.b.uses_var_below(k)

    def nonsmooth_on_vars_below(self, k: int) -> bool:
        return self.a.nonsmooth_on_vars_below(k) or self.b.nonsmooth_on_vars_below(k)

    def remap_vars(self, mapping) -> Expr:
        return Binary(self.op, self.a.remap_vars(mapping), self.b.remap_vars(mapping))

    def __repr__(self):
        return f"{self.op}({self.a!r}, {self.b!r})"


class PowInt(Expr):
    __slots__ = ("child", "n")

    def __init__(self, child: Expr, n: int):
        self.child = child
        self.n = int(n)

    def max_var(self) -> int:
        return self.child.max_var()

    def eval_iv(self, env) -> Interval:
        return self.child.eval_iv(env) ** self.n

    def eval_pt(self, xs) -> float:
        return self.child.eval_pt(xs) ** self.n

    def diff(self, i: int) -> Expr:
        if self.n == 0:
            return _ZERO
        du = self.child.diff(i)
        return _mul(_mul(Const(float(self.n)), PowInt(self.child, self.n - 1)), du)

    def shift_vars(self, offset: int) -> Expr:
        return PowInt(self.child.shift_vars(offset), self.n) if offset else self

    def uses_var_below(self, k: int) -> bool:
        return self.child.uses_var_below(k)

    def nonsmooth_on_vars_below(self, k: int) -> bool:
        return self.child.nonsmooth_on_vars_below(k)

    def remap_vars(self, mapping) -> Expr:
        return PowInt(self.child.remap_vars(mapping), self.n)

    def __repr__(self):
        return f"pow({self.child!r}, {self.n})"


_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is_const(e: Expr, v: float) -> bool:
    return isinstance(e, Const) and e.value.is_degenerate and e.value.lo == v


def _add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Binary("add", a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return Binary("sub", a, b)


def _neg(a: Expr) -> Expr:
    if _is_const(a, 0.0):
        return _ZERO
    return Unary("neg", a)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Binary("mul", a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return _ZERO
    if _is_const(b, 1.0):
        return a
    return Binary("div", a, b)


def var(i: int) -> Var:
    return Var(i)


def const(v: Interval | float) -> Const:
    return Const(v)


# ---------------------------------------------------------------------------
# HC4: forward evaluation with stored node ranges, backward projection.
# ---------------------------------------------------------------------------


class _Trace:
    __slots__ = ("node", "range", "children")

    def __init__(self, node, rng, children):
        self.node = node
        self.range = rng
        self.children = children


class _Infeasible(Exception):
    pass


def _forward(node: Expr, env: list[Interval]) -> _Trace:
    if isinstance(node, Const):
        return _Trace(node, node.value, ())
    if isinstance(node, Var):
        return _Trace(node, env[node.index], ())
    if isinstance(node, Unary):
        c = _forward(node.child, env)
        v = c.range
        op = node.op
        if op == "neg":
            r = -v
        elif op == "exp":
            r = v.exp()
        elif op == "ln":
            # the constraint itself implies arg > 0: trim instead of failing
            v = v.intersect(Interval(5e-324, math.inf))
            if v.is_empty:
                raise _Infeasible
            c.range = v
            r = v.log()
        elif op == "abs":
            r = v.abs_()
        elif op == "sqr":
            r = v.sqr()
        else:
            r = v.sign()
        return _Trace(node, r, (c,))
    if isinstance(node, Binary):
        a = _forward(node.a, env)
        b = _forward(node.b, env)
        op = node.op
        if op == "add":
            r = a.range + b.range
        elif op == "sub":
            r = a.range - b.range
        elif op == "mul":
            r = a.range * b.range
        else:
            # consistent with expr_eval: division needs 0 outside the divisor
            r = a.range / b.range
        return _Trace(node, r, (a, b))
    assert isinstance(node, PowInt)
    c = _forward(node.child, env)
    return _Trace(node, c.range ** node.n, (c,))


def _even_root_project(current: Interval, want: Interval, n: int) -> Interval:
    """Backward projection through x**n (n even) or abs/sqr-style ops."""
    w = want.intersect(Interval(0.0, math.inf))
    if w.is_empty:
        return EMPTY
    from . import rounding as rnd

    root_hi = rnd.root_ru(w.hi, n)
    root_lo = rnd.root_rd(w.lo, n) if w.lo > 0.0 else 0.0
    pos = current.intersect(Interval(root_lo, root_hi))
    neg = current.intersect(Interval(-root_hi, -root_lo))
    return pos.hull(neg)


def _backward(tr: _Trace, want: Interval, env: list[Interval]) -> None:
    node = tr.node
    new = tr.range.intersect(want)
    if new.is_empty:
        raise _Infeasible
    tr.range = new
    if isinstance(node, Const):
        return
    if isinstance(node, Var):
        nv = env[node.index].intersect(new)
        if nv.is_empty:
            raise _Infeasible
        env[node.index] = nv
        return
    if isinstance(node, Unary):
        (c,) = tr.children
        v = c.range
        op = node.op
        if op == "neg":
            _backward(c, -new, env)
        elif op == "exp":
            w = new.intersect(Interval(5e-324, math.inf))
            if w.is_empty:
                raise _Infeasible
            _backward(c, w.log(), env)
        elif op == "ln":
            _backward(c, new.exp(), env)
        elif op == "abs":
            proj = _even_root_project(v, new, 1)
            if proj.is_empty:
                raise _Infeasible
            _backward(c, proj, env)
        elif op == "sqr":
            proj = _even_root_project(v, new, 2)
            if proj.is_empty:
                raise _Infeasible
            _backward(c, proj, env)
        else:
            # sign carries no usable inverse information at closed-interval
            # granularity; leave the child untouched (sound, no contraction)
            _backward(c, v, env)
        return
    if isinstance(node, Binary):
        a, b = tr.children
        op = node.op
        if op == "add":
            _backward(a, new - b.range, env)
            _backward(b, new - a.range, env)
        elif op == "sub":
            _backward(a, new + b.range, env)
            _backward(b, a.range - new, env)
        elif op == "mul":
            if not b.range.contains(0.0):
                _backward(a, new / b.range, env)
            else:
                _backward(a, a.range, env)
            if not a.range.contains(0.0):
                _backward(b, new / a.range, env)
            else:
                _backward(b, b.range, env)
        else:  # div: r = a / b
            _backward(a, new * b.range, env)
            if not new.contains(0.0):
                _backward(b, a.range / new, env)
            else:
                _backward(b, b.range, env)
        return
    assert isinstance(node, PowInt)
    (c,) = tr.children
    n = node.n
    if n == 0:
        _backward(c, c.range, env)
        return
    if n < 0:
        # x**n = 1 / x**(-n); project through the reciprocal when safe
        if not new.contains(0.0):
            _backward_pow_pos(c, Interval(1.0, 1.0) / new, -n, env)
        else:
            _backward(c, c.range, env)
        return
    _backward_pow_pos(c, new, n, env)


def _backward_pow_pos(c: _Trace, want: Interval, n: int, env: list[Interval]) -> None:
    from . import rounding as rnd

    if n % 2 == 1:
        if want.is_empty:
            raise _Infeasible
        lo = -rnd.root_ru(-want.lo, n) if want.lo < 0.0 else (
            rnd.root_rd(want.lo, n) if want.lo > 0.0 else 0.0
        )
        hi = rnd.root_ru(want.hi, n) if want.hi > 0.0 else (
            -rnd.root_rd(-want.hi, n) if want.hi < 0.0 else 0.0
        )
        _backward(c, Interval(lo, hi), env)
    else:
        proj = _even_root_project(c.range, want, n)
        if proj.is_empty:
            raise _Infeasible
        _backward(c, proj, env)


def hc4_contract(
    expr: Expr, rhs: Interval, box: IntervalVector
) -> IntervalVector | None:
    """One HC4-revise sweep of the constraint ``expr(box) in rhs``.

    Returns the contracted box (a subset of the input), or ``None`` when the
    constraint is certainly infeasible on the box.  No point of the box that
    satisfies the constraint is ever removed.
    """
    env = list(box)
    try:
        tr = _forward(expr, env)
        _backward(tr, rhs, env)
    except _Infeasible:
        return None
    return IntervalVector(env)
