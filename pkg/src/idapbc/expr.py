"""Symbolic scalar expressions in configuration variables.

Supports the grammar +, -, *, /, integer powers, sin, cos and unary
negation, closed under exact differentiation. Equality of expressions is
a value-level notion (test by evaluation); the only simplification
performed is constant folding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence


class ExprError(ValueError):
    """Problem while parsing or evaluating an expression."""


class ParseError(ExprError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos}: {text!r}")
        self.pos = pos


class Expr:
    """Immutable expression node."""

    __slots__ = ()

    def eval(self, point: Sequence[float]) -> float:
        raise NotImplementedError

    def diff(self, index: int) -> "Expr":
        """Exact partial derivative with respect to variable number ``index``."""
        raise NotImplementedError

    def _code(self) -> str:
        """Python source fragment used by :func:`compile_expr`."""
        raise NotImplementedError

    def variables(self) -> set[int]:
        """Indices of variables that occur in the tree."""
        out: set[int] = set()
        _collect_vars(self, out)
        return out

    def __str__(self) -> str:
        return to_string(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({to_string(self)})"


@dataclass(frozen=True, slots=True)
class Const(Expr):
    value: float

    def eval(self, point: Sequence[float]) -> float:
        return self.value

    def diff(self, index: int) -> Expr:
        return Const(0.0)

    def _code(self) -> str:
        return repr(self.value)


@dataclass(frozen=True, slots=True)
class Var(Expr):
    name: str
    index: int

    def eval(self, point: Sequence[float]) -> float:
        return point[self.index]

    def diff(self, index: int) -> Expr:
        return Const(1.0 if index == self.index else 0.0)

    def _code(self) -> str:
        return f"_q[{self.index}]"


@dataclass(frozen=True, slots=True)
class Add(Expr):
    left: Expr
    right: Expr

    def eval(self, point: Sequence[float]) -> float:
        return self.left.eval(point) + self.right.eval(point)

    def diff(self, index: int) -> Expr:
        return add(self.left.diff(index), self.right.diff(index))

    def _code(self) -> str:
        return f"({self.left._code()} + {self.right._code()})"


@dataclass(frozen=True, slots=True)
class Sub(Expr):
    left: Expr
    right: Expr

    def eval(self, point: Sequence[float]) -> float:
        return self.left.eval(point) - self.right.eval(point)

    def diff(self, index: int) -> Expr:
        return sub(self.left.diff(index), self.right.diff(index))

    def _code(self) -> str:
        return f"({self.left._code()} - {self.right._code()})"


@dataclass(frozen=True, slots=True)
class Mul(Expr):
    left: Expr
    right: Expr

    def eval(self, point: Sequence[float]) -> float:
        return self.left.eval(point) * self.right.eval(point)

    def diff(self, index: int) -> Expr:
        return add(
            mul(self.left.diff(index), self.right),
            mul(self.left, self.right.diff(index)),
        )

    def _code(self) -> str:
        return f"({self.left._code()} * {self.right._code()})"


@dataclass(frozen=True, slots=True)
class Div(Expr):
    left: Expr
    right: Expr

    def eval(self, point: Sequence[float]) -> float:
        denom = self.right.eval(point)
        if denom == 0.0:
            raise ExprError(f"division by zero in {to_string(self)}")
        return self.left.eval(point) / denom

    def diff(self, index: int) -> Expr:
        # (u/v)' = u'/v - u v'/v^2
        return sub(
            div(self.left.diff(index), self.right),
            div(mul(self.left, self.right.diff(index)), mul(self.right, self.right)),
        )

    def _code(self) -> str:
        return f"({self.left._code()} / {self.right._code()})"


@dataclass(frozen=True, slots=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def eval(self, point: Sequence[float]) -> float:
        b = self.base.eval(point)
        if b == 0.0 and self.exponent < 0:
            raise ExprError(f"division by zero in {to_string(self)}")
        return b ** self.exponent

    def diff(self, index: int) -> Expr:
        # d(u^k) = k u^(k-1) u'
        return mul(
            mul(Const(float(self.exponent)), powi(self.base, self.exponent - 1)),
            self.base.diff(index),
        )

    def _code(self) -> str:
        return f"({self.base._code()} ** {self.exponent})"


@dataclass(frozen=True, slots=True)
class Sin(Expr):
    arg: Expr

    def eval(self, point: Sequence[float]) -> float:
        return math.sin(self.arg.eval(point))

    def diff(self, index: int) -> Expr:
        return mul(cos(self.arg), self.arg.diff(index))

    def _code(self) -> str:
        return f"_sin({self.arg._code()})"


@dataclass(frozen=True, slots=True)
class Cos(Expr):
    arg: Expr

    def eval(self, point: Sequence[float]) -> float:
        return math.cos(self.arg.eval(point))

    def diff(self, index: int) -> Expr:
        return neg(mul(sin(self.arg), self.arg.diff(index)))

    def _code(self) -> str:
        return f"_cos({self.arg._code()})"


@dataclass(frozen=True, slots=True)
class Neg(Expr):
    arg: Expr

    def eval(self, point: Sequence[float]) -> float:
        return -self.arg.eval(point)

    def diff(self, index: int) -> Expr:
        return neg(self.arg.diff(index))

    def _code(self) -> str:
        return f"(-{self.arg._code()})"


def _collect_vars(e: Expr, out: set[int]) -> None:
    if isinstance(e, Var):
        out.add(e.index)
    elif isinstance(e, (Add, Sub, Mul, Div)):
        _collect_vars(e.left, out)
        _collect_vars(e.right, out)
    elif isinstance(e, Pow):
        _collect_vars(e.base, out)
    elif isinstance(e, (Sin, Cos, Neg)):
        _collect_vars(e.arg, out)


# Smart constructors with constant folding.

def _is_const(e: Expr, v: float | None = None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(b) and b.value != 0.0:
        if _is_const(a):
            return Const(a.value / b.value)
        if b.value == 1.0:
            return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return Const(0.0)
    return Div(a, b)


def powi(base: Expr, exponent: int) -> Expr:
    if exponent == 0:
        return Const(1.0)
    if exponent == 1:
        return base
    if _is_const(base) and (base.value != 0.0 or exponent > 0):
        return Const(base.value ** exponent)
    return Pow(base, exponent)


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def sin(a: Expr) -> Expr:
    if _is_const(a):
        return Const(math.sin(a.value))
    return Sin(a)


def cos(a: Expr) -> Expr:
    if _is_const(a):
        return Const(math.cos(a.value))
    return Cos(a)


# Tokenizer and recursive-descent parser.

_OPS = set("+-*/^()")


def _tokenize(text: str) -> Iterator[tuple[str, str, int]]:
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in _OPS:
            yield ("op", ch, i)
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            tok = text[i:j]
            try:
                float(tok)
            except ValueError:
                raise ParseError(f"malformed number {tok!r}", text, i) from None
            yield ("num", tok, i)
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            yield ("name", text[i:j], i)
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", text, i)
    yield ("end", "", n)


class _Parser:
    def __init__(self, text: str, vars: Sequence[str], params: dict[str, float] | None):
        self.text = text
        self.vars = {name: i for i, name in enumerate(vars)}
        self.params = params or {}
        self.tokens = list(_tokenize(text))
        self.pos = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.pos]

    def next(self) -> tuple[str, str, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str) -> None:
        kind, val, at = self.next()
        if val != value:
            raise ParseError(f"expected {value!r}, found {val or 'end of input'!r}", self.text, at)

    def parse(self) -> Expr:
        e = self.sum()
        kind, val, at = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {val!r}", self.text, at)
        return e

    def sum(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def unary(self) -> Expr:
        if self.peek()[1] == "-":
            self.next()
            return neg(self.unary())
        if self.peek()[1] == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[1] != "^":
            return base
        self.next()
        sign = 1
        if self.peek()[1] == "-":
            self.next()
            sign = -1
        kind, val, at = self.next()
        if kind != "num" or not val.isdigit():
            raise ParseError("exponent must be a constant integer", self.text, at)
        return powi(base, sign * int(val))

    def atom(self) -> Expr:
        kind, val, at = self.next()
        if kind == "num":
            return Const(float(val))
        if val == "(":
            e = self.sum()
            self.expect(")")
            return e
        if kind == "name":
            if val in ("sin", "cos"):
                self.expect("(")
                arg = self.sum()
                self.expect(")")
                return sin(arg) if val == "sin" else cos(arg)
            if val in self.vars:
                return Var(val, self.vars[val])
            if val in self.params:
                return Const(float(self.params[val]))
            raise ParseError(f"undeclared identifier {val!r}", self.text, at)
        raise ParseError(f"unexpected {val or 'end of input'!r}", self.text, at)


def parse(text: str, vars: Sequence[str], params: dict[str, float] | None = None) -> Expr:
    """Parse ``text`` over the declared variables.

    ``params`` maps extra identifiers (design constants) to numeric values,
    folded into the tree at parse time.
    """
    return _Parser(text, vars, params).parse()


def differentiate(e: Expr, index: int) -> Expr:
    return e.diff(index)


# Printing with minimal parentheses: precedence sum=1, product=2, unary=3, power=4.

def _print(e: Expr, parent_prec: int) -> str:
    if isinstance(e, Const):
        v = e.value
        s = repr(int(v)) if v == int(v) and abs(v) < 1e16 else repr(v)
        return f"({s})" if v < 0 and parent_prec > 1 else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Add):
        s = f"{_print(e.left, 1)} + {_print(e.right, 1)}"
        return f"({s})" if parent_prec > 1 else s
    if isinstance(e, Sub):
        s = f"{_print(e.left, 1)} - {_print(e.right, 2)}"
        return f"({s})" if parent_prec > 1 else s
    if isinstance(e, Mul):
        s = f"{_print(e.left, 2)}*{_print(e.right, 2)}"
        return f"({s})" if parent_prec > 2 else s
    if isinstance(e, Div):
        s = f"{_print(e.left, 2)}/{_print(e.right, 3)}"
        return f"({s})" if parent_prec > 2 else s
    if isinstance(e, Neg):
        s = f"-{_print(e.arg, 3)}"
        return f"({s})" if parent_prec > 2 else s
    if isinstance(e, Pow):
        exp = str(e.exponent) if e.exponent >= 0 else f"(-{-e.exponent})"
        return f"{_print(e.base, 5)}^{exp}"
    if isinstance(e, Sin):
        return f"sin({_print(e.arg, 0)})"
    if isinstance(e, Cos):
        return f"cos({_print(e.arg, 0)})"
    raise TypeError(f"unknown node {type(e).__name__}")


def to_string(e: Expr) -> str:
    return _print(e, 0)


def compile_expr(e: Expr) -> Callable[[Sequence[float]], float]:
    """Compile to a fast point evaluator.

    The returned callable raises the same ZeroDivisionError float semantics
    as Python itself; use :meth:`Expr.eval` for the checked error message.
    """
    src = f"lambda _q: {e._code()}"
    return eval(compile(src, "<expr>", "eval"), {"_sin": math.sin, "_cos": math.cos})
