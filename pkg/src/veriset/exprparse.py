"""Tiny recursive-descent parser turning config strings into Expr trees.

Grammar: +, -, *, /, unary minus, integer powers with ^, parentheses, and
the functions exp, ln, abs, sqr, sign.  Variable names are resolved through
an explicit name -> index mapping supplied by the caller (e.g. x1, x2, u1,
p1 for a plant with the states || inputs || parameters convention).
"""

from __future__ import annotations

import re
from typing import Mapping

from .expr import Expr, const, var

__all__ = ["parse_expr", "ParseError", "state_names"]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\^|[()+\-*/]))"
)

_FUNCS = ("exp", "ln", "abs", "sqr", "sign")


class ParseError(ValueError):
    pass


def state_names(n: int, m: int = 0, p: int = 0) -> dict[str, int]:
    """Conventional naming for the states || inputs || parameters layout."""
    names = {f"x{i+1}": i for i in range(n)}
    names.update({f"u{i+1}": n + i for i in range(m)})
    names.update({f"p{i+1}": n + m + i for i in range(p)})
    return names


def _tokenize(text: str) -> list[tuple[str, str]]:
    out = []
    pos = 0
    while pos < len(text):
        mo = _TOKEN.match(text, pos)
        if not mo or mo.end() == pos:
            if text[pos:].strip():
                raise ParseError(f"unexpected character at {text[pos:]!r}")
            break
        pos = mo.end()
        for kind in ("num", "name", "op"):
            val = mo.group(kind)
            if val is not None:
                out.append((kind, val))
                break
    return out


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]], names: Mapping[str, int]):
        self.tokens = tokens
        self.pos = 0
        self.names = names

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, val = self.take()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val!r}")

    def parse(self) -> Expr:
        e = self.expr()
        if self.pos != len(self.tokens):
            raise ParseError(f"trailing input at {self.tokens[self.pos:]!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            e = e + rhs if op == "+" else e - rhs
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.factor()
            e = e * rhs if op == "*" else e / rhs
        return e

    def factor(self) -> Expr:
        kind, val = self.peek()
        if val == "-":
            self.take()
            return -self.factor()
        if val == "+":
            self.take()
            return self.factor()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            kind, val = self.take()
            neg = False
            if val == "-":
                neg = True
                kind, val = self.take()
            if kind != "num" or "." in val or "e" in val.lower():
                raise ParseError("power requires an integer exponent")
            n = int(val)
            base = base ** (-n if neg else n)
        return base

    def atom(self) -> Expr:
        kind, val = self.take()
        if kind == "num":
            return const(float(val))
        if kind == "name":
            if val in _FUNCS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return {
                    "exp": arg.exp,
                    "ln": arg.log,
                    "abs": arg.abs_,
                    "sqr": arg.sqr,
                    "sign": arg.sign,
                }[val]()
            if val not in self.names:
                raise ParseError(f"unknown variable {val!r}")
            return var(self.names[val])
        if val == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ParseError(f"unexpected token {val!r}")


def parse_expr(text: str, names: Mapping[str, int]) -> Expr:
    return _Parser(_tokenize(text), names).parse()
