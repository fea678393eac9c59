"""
Small expression language for user-specified fields.

Drifts, diffusion entries, transition rates and boundary data are written as
text such as ``"-x1 + 0.5*sin(x2)"``.  This module parses them into an
immutable tree, evaluates the tree, takes central-difference gradients and
translates a tree into Python source (``math`` flavour for numba kernels,
``numpy`` flavour for vectorized evaluation).

Grammar::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := "-" factor | power
    power  := atom ("^" factor)?
    atom   := number | ident | ident "(" expr ("," expr)* ")" | "(" expr ")"

``^`` is right associative and binds tighter than unary minus, so
``-x1^2`` is ``-(x1^2)`` while ``2^-1`` is ``0.5``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "BinOp", "Call",
    "FieldError", "FieldSyntaxError", "FieldDomainError",
    "FUNCTIONS", "parse", "evaluate", "grad", "to_source", "compile_numpy",
    "variables_of",
]


class FieldError(ValueError):
    """Base class for expression errors."""


class FieldSyntaxError(FieldError):
    """Malformed source text, unknown identifier or wrong call arity."""

    def __init__(self, message: str, offset: int, source: str = ""):
        self.offset = offset
        self.source = source
        super().__init__(f"{message} at offset {offset}")


class FieldDomainError(FieldError):
    """Evaluation left the domain of a function (log of 0, sqrt of -1, ...)."""


# -- tree ---------------------------------------------------------------------

class Expr:
    __slots__ = ()

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple[Expr, ...]


# name -> (min arity, max arity or None)
FUNCTIONS: dict[str, tuple[int, int | None]] = {
    "sin": (1, 1), "cos": (1, 1), "exp": (1, 1), "log": (1, 1),
    "tanh": (1, 1), "sqrt": (1, 1), "abs": (1, 1),
    "min": (2, None), "max": (2, None),
}

# -- tokenizer / parser -------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise FieldSyntaxError(f"unexpected character {source[bad]!r}", bad, source)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, source: str, allowed: frozenset[str]):
        self.source = source
        self.allowed = allowed
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, off = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise FieldSyntaxError(f"expected {value!r}, found {found}", off, self.source)

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, off = self.peek()
        if kind != "end":
            raise FieldSyntaxError(f"unexpected token {text!r}", off, self.source)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.factor())
        return left

    def factor(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.factor())
        return base

    def atom(self) -> Expr:
        kind, text, off = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "id":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    raise FieldSyntaxError(f"unknown function {text!r}", off, self.source)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                lo, hi = FUNCTIONS[text]
                if len(args) < lo or (hi is not None and len(args) > hi):
                    want = f"{lo}" if lo == hi else f"at least {lo}"
                    raise FieldSyntaxError(
                        f"{text}() takes {want} argument(s), got {len(args)}", off, self.source)
                return Call(text, tuple(args))
            if text in FUNCTIONS:
                raise FieldSyntaxError(f"function {text!r} used without arguments", off, self.source)
            if text not in self.allowed:
                raise FieldSyntaxError(f"unknown identifier {text!r}", off, self.source)
            return Var(text)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(text)
        raise FieldSyntaxError(f"unexpected {found}", off, self.source)


def parse(source: str, allowed_vars: Sequence[str]) -> Expr:
    """Parse ``source`` into an expression tree over ``allowed_vars``.

    Raises
    ------
    FieldSyntaxError
        With the byte offset of the offending token.
    """
    if not isinstance(source, str):
        source = repr(float(source))
    return _Parser(source, frozenset(allowed_vars)).parse()


def variables_of(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Neg):
        return variables_of(expr.operand)
    if isinstance(expr, BinOp):
        return variables_of(expr.left) | variables_of(expr.right)
    if isinstance(expr, Call):
        out: set[str] = set()
        for a in expr.args:
            out |= variables_of(a)
        return out
    return set()


# -- evaluation ---------------------------------------------------------------

def _checked(name: str, fn: Callable[[float], float], v: float) -> float:
    try:
        out = fn(v)
    except (ValueError, OverflowError) as exc:
        raise FieldDomainError(f"{name}({v!r}): {exc}") from None
    return out


def _pow(a: float, b: float) -> float:
    if a == 0.0 and b < 0:
        raise FieldDomainError(f"0 raised to negative power {b!r}")
    if a < 0 and b != math.floor(b):
        raise FieldDomainError(f"negative base {a!r} with non-integer exponent {b!r}")
    try:
        return math.pow(a, b)
    except OverflowError:
        raise FieldDomainError(f"overflow in {a!r}^{b!r}") from None


def _log(v: float) -> float:
    if v <= 0:
        raise FieldDomainError(f"log of nonpositive value {v!r}")
    return math.log(v)


def _sqrt(v: float) -> float:
    if v < 0:
        raise FieldDomainError(f"sqrt of negative value {v!r}")
    return math.sqrt(v)


_SCALAR_FN: dict[str, Callable[..., float]] = {
    "sin": math.sin, "cos": math.cos, "exp": math.exp, "log": _log,
    "tanh": math.tanh, "sqrt": _sqrt, "abs": abs,
}


def evaluate(expr: Expr, bindings: Mapping[str, float]) -> float:
    """Evaluate ``expr`` in IEEE double precision.

    Every failure (unbound variable, domain error, overflow, division by
    zero) raises :class:`FieldError`; a NaN is never returned silently.
    """
    value = _eval(expr, bindings)
    if math.isnan(value):
        raise FieldDomainError(f"expression {to_source(expr)} evaluated to NaN")
    return value


def _eval(e: Expr, b: Mapping[str, float]) -> float:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return float(b[e.name])
        except KeyError:
            raise FieldError(f"variable {e.name!r} is not bound") from None
    if isinstance(e, Neg):
        return -_eval(e.operand, b)
    if isinstance(e, BinOp):
        x = _eval(e.left, b)
        y = _eval(e.right, b)
        if e.op == "+":
            return x + y
        if e.op == "-":
            return x - y
        if e.op == "*":
            return x * y
        if e.op == "/":
            if y == 0.0:
                raise FieldDomainError("division by zero")
            return x / y
        return _pow(x, y)
    if isinstance(e, Call):
        args = [_eval(a, b) for a in e.args]
        if e.name == "min":
            return min(args)
        if e.name == "max":
            return max(args)
        return _checked(e.name, _SCALAR_FN[e.name], args[0])
    raise TypeError(f"not an expression: {e!r}")


def grad(expr: Expr, point: Mapping[str, float], h: float = 1e-5,
         wrt: Sequence[str] | None = None) -> np.ndarray:
    """Central-difference gradient of ``expr`` at ``point``.

    ``wrt`` defaults to the keys of ``point`` in insertion order.
    """
    names = list(point) if wrt is None else list(wrt)
    out = np.zeros(len(names))
    base = dict(point)
    for i, name in enumerate(names):
        up = dict(base)
        dn = dict(base)
        up[name] = base[name] + h
        dn[name] = base[name] - h
        out[i] = (evaluate(expr, up) - evaluate(expr, dn)) / (2.0 * h)
    return out


# -- printing / code generation -----------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _num_text(v: float) -> str:
    if math.isinf(v):
        return "1e999"
    return repr(float(v))


def to_source(expr: Expr, flavour: str = "fieldlang") -> str:
    """Render ``expr`` as text.

    ``fieldlang`` output re-parses to a structurally equal tree; ``math`` and
    ``numpy`` produce Python source for generated kernels.
    """
    if flavour not in ("fieldlang", "math", "numpy"):
        raise ValueError(f"unknown flavour {flavour!r}")
    return _render(expr, flavour)[0]


def _render(e: Expr, fl: str) -> tuple[str, int]:
    # returns (text, precedence of the outermost construct)
    if isinstance(e, Num):
        return _num_text(e.value), 6
    if isinstance(e, Var):
        return e.name, 6
    if isinstance(e, Neg):
        inner, p = _render(e.operand, fl)
        if fl != "fieldlang" or p < 3:
            inner = f"({inner})"
        return f"-{inner}", 3
    if isinstance(e, BinOp):
        if e.op == "^":
            left, lp = _render(e.left, fl)
            right, rp = _render(e.right, fl)
            if fl != "fieldlang":
                return f"(({left}) ** ({right}))", 6
            if lp < 5:
                left = f"({left})"
            if rp < 3:
                right = f"({right})"
            return f"{left}^{right}", 4
        prec = _PREC[e.op]
        left, lp = _render(e.left, fl)
        right, rp = _render(e.right, fl)
        if lp < prec:
            left = f"({left})"
        if rp <= prec:
            right = f"({right})"
        if fl != "fieldlang":
            return f"({left} {e.op} {right})", 6
        return f"{left} {e.op} {right}", prec
    if isinstance(e, Call):
        args = [_render(a, fl)[0] for a in e.args]
        if fl == "fieldlang":
            return f"{e.name}({', '.join(args)})", 6
        if e.name in ("min", "max"):
            fn = {"numpy": {"min": "np.minimum", "max": "np.maximum"},
                  "math": {"min": "min", "max": "max"}}[fl][e.name]
            acc = args[0]
            for a in args[1:]:
                acc = f"{fn}({acc}, {a})"
            return acc, 6
        if e.name == "abs":
            return (f"np.abs({args[0]})" if fl == "numpy" else f"abs({args[0]})"), 6
        mod = "np" if fl == "numpy" else "math"
        return f"{mod}.{e.name}({args[0]})", 6
    raise TypeError(f"not an expression: {e!r}")


def compile_numpy(expr: Expr, arg_names: Sequence[str]) -> Callable[..., np.ndarray]:
    """Compile ``expr`` into a vectorized function of positional arrays.

    The returned callable broadcasts its arguments and raises
    :class:`FieldDomainError` if any finite input produces a non-finite value.
    """
    body = to_source(expr, "numpy")
    src = f"def _f({', '.join(arg_names)}):\n    return {body}\n"
    ns: dict = {"np": np, "math": math}
    exec(compile(src, "<fieldlang>", "exec"), ns)
    raw = ns["_f"]
    text = to_source(expr)

    def f(*args):
        arrs = [np.asarray(a, dtype=float) for a in args]
        shape = np.broadcast_shapes(*(a.shape for a in arrs)) if arrs else ()
        with np.errstate(all="ignore"):
            out = np.asarray(raw(*arrs), dtype=float)
        out = np.broadcast_to(out, shape).copy() if out.shape != shape else out
        bad = ~np.isfinite(out)
        if bad.any():
            finite_in = np.ones(shape, dtype=bool)
            for a in arrs:
                finite_in &= np.broadcast_to(np.isfinite(a), shape)
            if (bad & finite_in).any():
                raise FieldDomainError(f"{text} is not finite at some evaluation points")
        return out

    f.source = text
    return f
