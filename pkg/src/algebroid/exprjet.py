"""Scalar expression DSL over chart coordinates, evaluated as truncated jets.

An :class:`Expr` is an immutable AST over coordinate identifiers, literals,
arithmetic, and a small set of elementary functions.  Evaluation produces a
:class:`Jet`: the value together with all partial derivatives up to a
configurable order (0..3), propagated by truncated Taylor arithmetic.
``fd_crosscheck`` provides the independent finite-difference oracle for the
first-order slots.

Grammar (whitespace insignificant)::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := base ("^" factor)?
    base   := number | ident | "(" expr ")" | "-" base | ident "(" expr ")"

Precedence is ``^`` > unary minus > ``*``,``/`` > ``+``,``-`` and ``^`` is
right-associative; where the raw grammar is ambiguous against that ranking
(``-x^2``), precedence wins, so ``-x^2`` parses as ``-(x^2)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow", "Call",
    "Jet", "ExprError", "ParseError", "UndeclaredIdentifierError",
    "EvalDomainError", "parse_expr", "render", "diff", "eval_jet",
    "fd_crosscheck", "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "sqrt", "tanh", "abs")


class ExprError(Exception):
    """Base class for expression-layer failures."""


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UndeclaredIdentifierError(ParseError):
    def __init__(self, name: str, offset: int):
        ParseError.__init__(self, f"undeclared identifier '{name}'", offset)
        self.name = name


class EvalDomainError(ExprError):
    """Raised when a subexpression leaves its real domain at a point."""

    def __init__(self, reason: str, subexpr: "Expr", point):
        pt = tuple(float(v) for v in point)
        super().__init__(f"{reason} in '{render(subexpr)}' at point {pt}")
        self.reason = reason
        self.subexpr = subexpr
        self.point = pt


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Div:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"


Expr = Num | Var | Neg | Add | Sub | Mul | Div | Pow | Call

ZERO = Num(0.0)
ONE = Num(1.0)


# --------------------------------------------------------------------------
# Parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].lstrip()
            if not rest:
                break
            raise ParseError(f"unexpected character {rest[0]!r}", len(text) - len(rest))
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, coords: list[str]):
        self.text = text
        self.coords = {name: i for i, name in enumerate(coords)}
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is not None:
            self.pos += 1
        return tok

    def expect_op(self, op: str):
        tok = self.next()
        if tok is None:
            raise ParseError(f"expected '{op}', found end of input", len(self.text))
        if tok[0] != "op" or tok[1] != op:
            raise ParseError(f"expected '{op}', found {tok[1]!r}", tok[2])

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok is not None:
            raise ParseError(f"trailing input {tok[1]!r}", tok[2])
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            tok = self.peek()
            if tok is not None and tok[0] == "op" and tok[1] in "+-":
                self.next()
                rhs = self.term()
                e = Add(e, rhs) if tok[1] == "+" else Sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.factor()
        while True:
            tok = self.peek()
            if tok is not None and tok[0] == "op" and tok[1] in "*/":
                self.next()
                rhs = self.factor()
                e = Mul(e, rhs) if tok[1] == "*" else Div(e, rhs)
            else:
                return e

    def factor(self) -> Expr:
        tok = self.peek()
        if tok is not None and tok[0] == "op" and tok[1] == "-":
            # unary minus sits between */ and ^ in the precedence ranking
            self.next()
            return Neg(self.factor())
        e = self.base()
        tok = self.peek()
        if tok is not None and tok[0] == "op" and tok[1] == "^":
            self.next()
            return Pow(e, self.factor())
        return e

    def base(self) -> Expr:
        tok = self.next()
        if tok is None:
            raise ParseError("unexpected end of input", len(self.text))
        kind, value, offset = tok
        if kind == "num":
            return Num(float(value))
        if kind == "ident":
            nxt = self.peek()
            if nxt is not None and nxt[0] == "op" and nxt[1] == "(":
                if value not in FUNCTIONS:
                    raise ParseError(f"unknown function '{value}'", offset)
                self.next()
                arg = self.expr()
                self.expect_op(")")
                return Call(value, arg)
            if value not in self.coords:
                raise UndeclaredIdentifierError(value, offset)
            return Var(value, self.coords[value])
        if kind == "op" and value == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        if kind == "op" and value == "-":
            return Neg(self.base())
        raise ParseError(f"unexpected token {value!r}", offset)


def parse_expr(text: str, coords) -> Expr:
    """Parse ``text`` against the ordered coordinate list ``coords``."""
    if not text or not text.strip():
        raise ParseError("empty expression", 0)
    coords = list(coords)
    if not coords:
        raise ValueError("coordinate list must be nonempty")
    if len(set(coords)) != len(coords):
        raise ValueError("coordinate names must be duplicate-free")
    return _Parser(text, coords).parse()


# --------------------------------------------------------------------------
# Rendering (inverse of parse up to structural equality)

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4, Num: 5, Var: 5, Call: 5}


def _render(e: Expr, parent_prec: int) -> str:
    prec = _PREC[type(e)]
    if isinstance(e, Num):
        if e.value == 0.0:
            s = "0.0"  # folds the sign of zero; -0.0 compares equal anyway
        elif e.value < 0:
            s = f"({repr(e.value)})"
        else:
            s = repr(e.value)
    elif isinstance(e, Var):
        s = e.name
    elif isinstance(e, Call):
        s = f"{e.func}({_render(e.arg, 0)})"
    elif isinstance(e, Neg):
        s = f"-{_render(e.arg, 3)}"
    elif isinstance(e, Pow):
        s = f"{_render(e.base, 5)}^{_render(e.exponent, 3)}"
    elif isinstance(e, Add):
        s = f"{_render(e.left, 1)} + {_render(e.right, 2)}"
    elif isinstance(e, Sub):
        s = f"{_render(e.left, 1)} - {_render(e.right, 2)}"
    elif isinstance(e, Mul):
        s = f"{_render(e.left, 2)}*{_render(e.right, 3)}"
    elif isinstance(e, Div):
        s = f"{_render(e.left, 2)}/{_render(e.right, 3)}"
    else:  # pragma: no cover
        raise TypeError(f"not an Expr: {e!r}")
    if prec < parent_prec:
        return f"({s})"
    return s


def render(e: Expr) -> str:
    """Serialize to the surface grammar; parse(render(e)) == e structurally."""
    return _render(e, 0)


# --------------------------------------------------------------------------
# Formal differentiation (with light folding so nested derivatives stay small)


def _const(e: Expr):
    """Return the float value of a constant expression, else None."""
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Neg):
        v = _const(e.arg)
        return None if v is None else -v
    return None


def e_add(a: Expr, b: Expr) -> Expr:
    if _const(a) == 0.0:
        return b
    if _const(b) == 0.0:
        return a
    va, vb = _const(a), _const(b)
    if va is not None and vb is not None:
        return Num(va + vb)
    return Add(a, b)


def e_sub(a: Expr, b: Expr) -> Expr:
    if _const(b) == 0.0:
        return a
    if _const(a) == 0.0:
        return Neg(b)
    va, vb = _const(a), _const(b)
    if va is not None and vb is not None:
        return Num(va - vb)
    return Sub(a, b)


def e_mul(a: Expr, b: Expr) -> Expr:
    va, vb = _const(a), _const(b)
    if va == 0.0 or vb == 0.0:
        return ZERO
    if va == 1.0:
        return b
    if vb == 1.0:
        return a
    if va is not None and vb is not None:
        return Num(va * vb)
    return Mul(a, b)


def e_div(a: Expr, b: Expr) -> Expr:
    if _const(a) == 0.0:
        return ZERO
    if _const(b) == 1.0:
        return a
    return Div(a, b)


def e_neg(a: Expr) -> Expr:
    v = _const(a)
    if v is not None:
        return Num(-v)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def diff(e: Expr, index: int) -> Expr:
    """Formal partial derivative with respect to coordinate ``index``."""
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == index else ZERO
    if isinstance(e, Neg):
        return e_neg(diff(e.arg, index))
    if isinstance(e, Add):
        return e_add(diff(e.left, index), diff(e.right, index))
    if isinstance(e, Sub):
        return e_sub(diff(e.left, index), diff(e.right, index))
    if isinstance(e, Mul):
        return e_add(e_mul(diff(e.left, index), e.right),
                     e_mul(e.left, diff(e.right, index)))
    if isinstance(e, Div):
        num = e_sub(e_mul(diff(e.left, index), e.right),
                    e_mul(e.left, diff(e.right, index)))
        return e_div(num, e_mul(e.right, e.right))
    if isinstance(e, Pow):
        p = _const(e.exponent)
        if p is None:
            raise ExprError(f"non-constant exponent in '{render(e)}'")
        if p == 0.0:
            return ZERO
        return e_mul(Num(p), e_mul(Pow(e.base, Num(p - 1.0)), diff(e.base, index)))
    if isinstance(e, Call):
        du = diff(e.arg, index)
        u = e.arg
        if e.func == "sin":
            outer = Call("cos", u)
        elif e.func == "cos":
            outer = e_neg(Call("sin", u))
        elif e.func == "tan":
            t = Call("tan", u)
            outer = e_add(ONE, e_mul(t, t))
        elif e.func == "exp":
            outer = Call("exp", u)
        elif e.func == "ln":
            return e_div(du, u)
        elif e.func == "sqrt":
            return e_div(du, e_mul(Num(2.0), Call("sqrt", u)))
        elif e.func == "tanh":
            t = Call("tanh", u)
            outer = e_sub(ONE, e_mul(t, t))
        elif e.func == "abs":
            outer = e_div(u, Call("abs", u))
        else:  # pragma: no cover
            raise ExprError(f"unknown function '{e.func}'")
        return e_mul(outer, du)
    raise TypeError(f"not an Expr: {e!r}")


# --------------------------------------------------------------------------
# Jets


@dataclass
class Jet:
    """Truncated Taylor data of a scalar at a point: value and partials up to
    ``order`` in ``n`` chart coordinates.  Arrays of second and third partials
    are symmetric under index permutation by construction."""

    order: int
    n: int
    value: float
    grad: np.ndarray | None = None          # shape (n,)
    hess: np.ndarray | None = None          # shape (n, n)
    third: np.ndarray | None = None         # shape (n, n, n)

    @staticmethod
    def constant(value: float, n: int, order: int) -> "Jet":
        j = Jet(order, n, float(value))
        if order >= 1:
            j.grad = np.zeros(n)
        if order >= 2:
            j.hess = np.zeros((n, n))
        if order >= 3:
            j.third = np.zeros((n, n, n))
        return j

    @staticmethod
    def coordinate(index: int, value: float, n: int, order: int) -> "Jet":
        j = Jet.constant(value, n, order)
        if order >= 1:
            j.grad[index] = 1.0
        return j

    def _like(self, value: float) -> "Jet":
        return Jet(self.order, self.n, value)

    def __add__(self, other: "Jet") -> "Jet":
        out = self._like(self.value + other.value)
        if self.order >= 1:
            out.grad = self.grad + other.grad
        if self.order >= 2:
            out.hess = self.hess + other.hess
        if self.order >= 3:
            out.third = self.third + other.third
        return out

    def __sub__(self, other: "Jet") -> "Jet":
        out = self._like(self.value - other.value)
        if self.order >= 1:
            out.grad = self.grad - other.grad
        if self.order >= 2:
            out.hess = self.hess - other.hess
        if self.order >= 3:
            out.third = self.third - other.third
        return out

    def __neg__(self) -> "Jet":
        out = self._like(-self.value)
        if self.order >= 1:
            out.grad = -self.grad
        if self.order >= 2:
            out.hess = -self.hess
        if self.order >= 3:
            out.third = -self.third
        return out

    def __mul__(self, other: "Jet") -> "Jet":
        u, v = self, other
        out = self._like(u.value * v.value)
        if self.order >= 1:
            out.grad = u.grad * v.value + u.value * v.grad
        if self.order >= 2:
            gg = np.outer(u.grad, v.grad)
            out.hess = u.hess * v.value + u.value * v.hess + gg + gg.T
        if self.order >= 3:
            a = np.einsum("ij,k->ijk", u.hess, v.grad)
            b = np.einsum("ij,k->ijk", v.hess, u.grad)
            mixed = (a + a.transpose(0, 2, 1) + a.transpose(2, 0, 1)
                     + b + b.transpose(0, 2, 1) + b.transpose(2, 0, 1))
            out.third = u.third * v.value + u.value * v.third + mixed
        return out

    def compose(self, f0: float, f1: float = 0.0, f2: float = 0.0,
                f3: float = 0.0) -> "Jet":
        """Chain rule: apply a univariate function with derivatives f0..f3 at
        this jet's value."""
        out = self._like(f0)
        if self.order >= 1:
            out.grad = f1 * self.grad
        if self.order >= 2:
            out.hess = f2 * np.outer(self.grad, self.grad) + f1 * self.hess
        if self.order >= 3:
            g = self.grad
            a = np.einsum("ij,k->ijk", self.hess, g)
            out.third = (f3 * np.einsum("i,j,k->ijk", g, g, g)
                         + f2 * (a + a.transpose(0, 2, 1) + a.transpose(2, 0, 1))
                         + f1 * self.third)
        return out

    def reciprocal(self) -> "Jet":
        v = self.value
        return self.compose(1.0 / v, -1.0 / v**2, 2.0 / v**3, -6.0 / v**4)

    def __truediv__(self, other: "Jet") -> "Jet":
        return self * other.reciprocal()

    def int_pow(self, k: int) -> "Jet":
        """Nonnegative integer power by repeated multiplication."""
        out = Jet.constant(1.0, self.n, self.order)
        for _ in range(k):
            out = out * self
        return out

    def truncated(self, order: int) -> "Jet":
        out = Jet(order, self.n, self.value)
        if order >= 1:
            out.grad = self.grad
        if order >= 2:
            out.hess = self.hess
        if order >= 3:
            out.third = self.third
        return out


def _apply_call(func: str, u: Jet, node: Expr, point) -> Jet:
    v = u.value
    if func == "sin":
        s, c = math.sin(v), math.cos(v)
        return u.compose(s, c, -s, -c)
    if func == "cos":
        s, c = math.sin(v), math.cos(v)
        return u.compose(c, -s, -c, s)
    if func == "tan":
        t = math.tan(v)
        sec2 = 1.0 + t * t
        return u.compose(t, sec2, 2.0 * t * sec2, sec2 * (2.0 + 6.0 * t * t))
    if func == "exp":
        ev = math.exp(v)
        return u.compose(ev, ev, ev, ev)
    if func == "ln":
        if v <= 0.0:
            raise EvalDomainError("ln of nonpositive value", node, point)
        return u.compose(math.log(v), 1.0 / v, -1.0 / v**2, 2.0 / v**3)
    if func == "sqrt":
        if v < 0.0:
            raise EvalDomainError("sqrt of negative value", node, point)
        s = math.sqrt(v)
        if u.order == 0:
            return u.compose(s)
        if v == 0.0:
            raise EvalDomainError("sqrt derivative at zero", node, point)
        return u.compose(s, 0.5 / s, -0.25 / v**1.5, 0.375 / v**2.5)
    if func == "tanh":
        t = math.tanh(v)
        d1 = 1.0 - t * t
        return u.compose(t, d1, -2.0 * t * d1, d1 * (6.0 * t * t - 2.0))
    if func == "abs":
        sign = 0.0 if v == 0.0 else math.copysign(1.0, v)
        return u.compose(abs(v), sign, 0.0, 0.0)
    raise ExprError(f"unknown function '{func}'")  # pragma: no cover


def _eval(e: Expr, point, n: int, order: int) -> Jet:
    if isinstance(e, Num):
        return Jet.constant(e.value, n, order)
    if isinstance(e, Var):
        return Jet.coordinate(e.index, float(point[e.index]), n, order)
    if isinstance(e, Neg):
        return -_eval(e.arg, point, n, order)
    if isinstance(e, Add):
        return _eval(e.left, point, n, order) + _eval(e.right, point, n, order)
    if isinstance(e, Sub):
        return _eval(e.left, point, n, order) - _eval(e.right, point, n, order)
    if isinstance(e, Mul):
        return _eval(e.left, point, n, order) * _eval(e.right, point, n, order)
    if isinstance(e, Div):
        denom = _eval(e.right, point, n, order)
        if denom.value == 0.0:
            raise EvalDomainError("division by zero", e, point)
        return _eval(e.left, point, n, order) * denom.reciprocal()
    if isinstance(e, Pow):
        exp_jet = _eval(e.exponent, point, n, max(order, 1))
        if np.any(exp_jet.grad != 0.0):
            raise EvalDomainError("non-constant exponent", e, point)
        p = exp_jet.value
        base = _eval(e.base, point, n, order)
        if p == round(p) and abs(p) <= 1024:
            k = int(round(p))
            if k >= 0:
                return base.int_pow(k)
            if base.value == 0.0:
                raise EvalDomainError("division by zero", e, point)
            return base.int_pow(-k).reciprocal()
        if base.value <= 0.0:
            raise EvalDomainError("non-integer power of nonpositive base", e, point)
        v = base.value
        return base.compose(v**p, p * v**(p - 1.0),
                            p * (p - 1.0) * v**(p - 2.0),
                            p * (p - 1.0) * (p - 2.0) * v**(p - 3.0))
    if isinstance(e, Call):
        return _apply_call(e.func, _eval(e.arg, point, n, order), e, point)
    raise TypeError(f"not an Expr: {e!r}")


def eval_jet(e: Expr, point, order: int = 1, n: int | None = None) -> Jet:
    """Evaluate ``e`` at ``point`` together with all partials up to ``order``.

    ``point`` supplies one real per chart coordinate; ``n`` defaults to
    ``len(point)``.
    """
    if not 0 <= order <= 3:
        raise ValueError("jet order must be in 0..3")
    point = np.asarray(point, dtype=float)
    if n is None:
        n = point.shape[0]
    return _eval(e, point, n, order)


def fd_crosscheck(e: Expr, point, h: float = 1e-4) -> float:
    """Max over coordinates of |jet first partial - central finite difference|."""
    point = np.asarray(point, dtype=float)
    n = point.shape[0]
    jet = eval_jet(e, point, order=1, n=n)
    worst = 0.0
    for i in range(n):
        shift = np.zeros(n)
        shift[i] = h
        plus = eval_jet(e, point + shift, order=0, n=n).value
        minus = eval_jet(e, point - shift, order=0, n=n).value
        worst = max(worst, abs(jet.grad[i] - (plus - minus) / (2.0 * h)))
    return worst
