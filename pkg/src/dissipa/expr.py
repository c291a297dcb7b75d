"""Expression language for scalar state fields.

Expressions are immutable trees over the state variables ``x1..xn``.
They support vectorised evaluation, exact symbolic differentiation and
outward-conservative interval range bounding.  Every dynamics field of a
:class:`~dissipa.model.DynamicsModel` is described with this language.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom (('^' | '**') ['-'] INTEGER)?
    atom   := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'

so ``-x1^2`` parses as ``-(x1^2)``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expression", "Num", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow", "Call",
    "Interval", "ExpressionSyntaxError", "ExpressionDomainError",
    "parse_expression", "evaluate", "differentiate", "interval_range",
    "second_derivative_sup", "hessian_exprs", "variables_of", "FUNCTIONS",
]

FUNCTIONS = ("sin", "cos", "exp", "tanh")


class ExpressionSyntaxError(ValueError):
    """Malformed expression text; ``offset`` is the byte offset of the culprit."""

    def __init__(self, message: str, offset: int, text: str = ""):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset
        self.text = text


class ExpressionDomainError(ArithmeticError):
    """Evaluation or bounding left the domain of an operator (division by zero)."""


# --------------------------------------------------------------------------
# AST
# --------------------------------------------------------------------------

class Expression:
    """Base class of all expression nodes."""

    __slots__ = ()

    def __str__(self) -> str:
        return _fmt(self, 0)

    def __repr__(self) -> str:
        return f"Expression({_fmt(self, 0)!r})"


@dataclass(frozen=True, eq=True)
class Num(Expression):
    value: float


@dataclass(frozen=True, eq=True)
class Var(Expression):
    index: int  # zero based


@dataclass(frozen=True, eq=True)
class Neg(Expression):
    a: Expression


@dataclass(frozen=True, eq=True)
class Add(Expression):
    a: Expression
    b: Expression


@dataclass(frozen=True, eq=True)
class Sub(Expression):
    a: Expression
    b: Expression


@dataclass(frozen=True, eq=True)
class Mul(Expression):
    a: Expression
    b: Expression


@dataclass(frozen=True, eq=True)
class Div(Expression):
    a: Expression
    b: Expression


@dataclass(frozen=True, eq=True)
class Pow(Expression):
    a: Expression
    k: int


@dataclass(frozen=True, eq=True)
class Call(Expression):
    fn: str
    a: Expression


ZERO = Num(0.0)
ONE = Num(1.0)


def _is(e: Expression, v: float) -> bool:
    return isinstance(e, Num) and e.value == v


# Smart constructors with light constant folding.  This keeps derivative
# trees small; it is not a general simplifier.

def add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.a)
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.a)
    return Sub(a, b)


def neg(a: Expression) -> Expression:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.a
    return Neg(a)


def mul(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    if isinstance(b, Num):
        a, b = b, a
    if isinstance(a, Num) and isinstance(b, Mul) and isinstance(b.a, Num):
        return mul(Num(a.value * b.a.value), b.b)
    if isinstance(a, Neg):
        return neg(mul(a.a, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.a))
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return Num(a.value / b.value)
    return Div(a, b)


def power(a: Expression, k: int) -> Expression:
    if k == 0:
        return ONE
    if k == 1:
        return a
    if isinstance(a, Num) and (a.value != 0.0 or k > 0):
        return Num(a.value ** k)
    return Pow(a, k)


def call(fn: str, a: Expression) -> Expression:
    if isinstance(a, Num):
        return Num(float(_SCALAR_FUN[fn](a.value)))
    return Call(fn, a)


_SCALAR_FUN = {"sin": math.sin, "cos": math.cos, "exp": math.exp, "tanh": math.tanh}
_ARRAY_FUN = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "tanh": np.tanh}


# --------------------------------------------------------------------------
# Printing
# --------------------------------------------------------------------------

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _num_str(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return format(v, ".17g")


def _fmt(e: Expression, ctx: int) -> str:
    if isinstance(e, Num):
        s = _num_str(e.value)
        return f"({s})" if e.value < 0 and ctx > 1 else s
    if isinstance(e, Var):
        return f"x{e.index + 1}"
    if isinstance(e, Call):
        return f"{e.fn}({_fmt(e.a, 0)})"
    p = _PREC[type(e)]
    if isinstance(e, Neg):
        s = "-" + _fmt(e.a, p)
    elif isinstance(e, Pow):
        s = f"{_fmt(e.a, 5)}^{e.k}" if e.k >= 0 else f"{_fmt(e.a, 5)}^({e.k})"
    else:
        op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
        # right operand of - and / needs parentheses at equal precedence
        s = f"{_fmt(e.a, p)} {op} {_fmt(e.b, p + (op in '-/'))}" if op in "+-" \
            else f"{_fmt(e.a, p)}{op}{_fmt(e.b, p + (op == '/'))}"
    return f"({s})" if p < ctx else s


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str):
    toks = []
    pos = 0
    raw = text.encode()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            stripped = len(text[pos:]) - len(text[pos:].lstrip())
            off = len(text[:pos + stripped].encode())
            raise ExpressionSyntaxError(f"unexpected character {text[pos + stripped]!r}", off, text)
        kind = m.lastgroup
        start = m.start(kind)
        toks.append((kind, m.group(kind), len(text[:start].encode())))
        pos = m.end()
    toks.append(("end", "", len(raw)))
    return toks


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        what = "end of input" if tok[0] == "end" else repr(tok[1])
        raise ExpressionSyntaxError(f"{msg} (got {what})", tok[2], self.text)

    def expect(self, value):
        t = self.peek()
        if t[1] != value or t[0] != "op":
            self.error(f"expected {value!r}")
        return self.take()

    def parse(self) -> Expression:
        e = self.expr()
        if self.peek()[0] != "end":
            self.error("unexpected token")
        return e

    def expr(self):
        e = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            rhs = self.term()
            e = Add(e, rhs) if op == "+" else Sub(e, rhs)
        return e

    def term(self):
        e = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            e = Mul(e, rhs) if op == "*" else Div(e, rhs)
        return e

    def unary(self):
        t = self.peek()
        if t[0] == "op" and t[1] in "+-":
            self.take()
            e = self.unary()
            return Neg(e) if t[1] == "-" else e
        return self.power()

    def power(self):
        base = self.atom()
        t = self.peek()
        if t[0] == "op" and t[1] in ("^", "**"):
            self.take()
            sign = 1
            if self.peek()[0] == "op" and self.peek()[1] == "-":
                self.take()
                sign = -1
            k = self.peek()
            if k[0] != "num" or not re.fullmatch(r"\d+", k[1]):
                self.error("exponent must be an integer literal")
            self.take()
            return Pow(base, sign * int(k[1]))
        return base

    def atom(self):
        t = self.peek()
        if t[0] == "num":
            self.take()
            return Num(float(t[1]))
        if t[0] == "name":
            self.take()
            name = t[1]
            if name in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(name, arg)
            if name == "pi":
                return Num(math.pi)
            m = re.fullmatch(r"x(\d+)", name)
            if m is None:
                raise ExpressionSyntaxError(f"unknown identifier {name!r}", t[2], self.text)
            idx = int(m.group(1))
            if idx < 1 or idx > self.n:
                raise ExpressionSyntaxError(
                    f"variable index {name} out of range 1..{self.n}", t[2], self.text)
            return Var(idx - 1)
        if t[0] == "op" and t[1] == "(":
            self.take()
            e = self.expr()
            self.expect(")")
            return e
        self.error("expected a number, variable, function or '('")


def parse_expression(text: str, n: int) -> Expression:
    """Parse ``text`` into an expression over ``x1..xn``.

    Parameters
    ----------
    text : str
        Infix expression, e.g. ``"x1^3 - 3*x1"``.
    n : int
        Number of state variables that may be referenced.

    Raises
    ------
    ExpressionSyntaxError
        On malformed text, unknown identifiers or out-of-range variables.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionSyntaxError("empty expression", 0, str(text))
    return _Parser(text, n).parse()


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def evaluate(e: Expression, x) -> Union[float, np.ndarray]:
    """Evaluate ``e`` at a point ``x`` of shape ``(n,)`` or a batch ``(N, n)``.

    Returns a float for a single point and an array of shape ``(N,)`` for
    a batch.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(_eval(e, x[:, None])[0])
    cols = x.T
    out = _eval(e, cols)
    return np.broadcast_to(out, (x.shape[0],)).astype(float, copy=True)


def _eval(e: Expression, cols: np.ndarray):
    if isinstance(e, Num):
        return np.full(cols.shape[1], e.value)
    if isinstance(e, Var):
        return cols[e.index]
    if isinstance(e, Add):
        return _eval(e.a, cols) + _eval(e.b, cols)
    if isinstance(e, Sub):
        return _eval(e.a, cols) - _eval(e.b, cols)
    if isinstance(e, Mul):
        return _eval(e.a, cols) * _eval(e.b, cols)
    if isinstance(e, Neg):
        return -_eval(e.a, cols)
    if isinstance(e, Div):
        den = _eval(e.b, cols)
        if np.any(den == 0.0):
            raise ExpressionDomainError("division by zero")
        return _eval(e.a, cols) / den
    if isinstance(e, Pow):
        base = _eval(e.a, cols)
        if e.k < 0:
            if np.any(base == 0.0):
                raise ExpressionDomainError("division by zero in negative power")
            return 1.0 / base ** (-e.k)
        return base ** e.k
    if isinstance(e, Call):
        return _ARRAY_FUN[e.fn](_eval(e.a, cols))
    raise TypeError(f"not an expression node: {e!r}")


def variables_of(e: Expression) -> set:
    """Zero-based indices of the variables referenced by ``e``."""
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Pow, Call)):
        return variables_of(e.a)
    return variables_of(e.a) | variables_of(e.b)


# --------------------------------------------------------------------------
# Differentiation
# --------------------------------------------------------------------------

def differentiate(e: Expression, i: int) -> Expression:
    """Exact partial derivative of ``e`` with respect to the zero-based variable ``i``."""
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == i else ZERO
    if isinstance(e, Neg):
        return neg(differentiate(e.a, i))
    if isinstance(e, Add):
        return add(differentiate(e.a, i), differentiate(e.b, i))
    if isinstance(e, Sub):
        return sub(differentiate(e.a, i), differentiate(e.b, i))
    if isinstance(e, Mul):
        return add(mul(differentiate(e.a, i), e.b), mul(e.a, differentiate(e.b, i)))
    if isinstance(e, Div):
        da, db = differentiate(e.a, i), differentiate(e.b, i)
        if _is(db, 0.0):
            return div(da, e.b)
        return div(sub(mul(da, e.b), mul(e.a, db)), power(e.b, 2))
    if isinstance(e, Pow):
        da = differentiate(e.a, i)
        return mul(mul(Num(float(e.k)), power(e.a, e.k - 1)), da)
    if isinstance(e, Call):
        da = differentiate(e.a, i)
        if _is(da, 0.0):
            return ZERO
        if e.fn == "sin":
            outer = call("cos", e.a)
        elif e.fn == "cos":
            outer = neg(call("sin", e.a))
        elif e.fn == "exp":
            outer = e
        else:  # tanh
            outer = sub(ONE, power(e, 2))
        return mul(outer, da)
    raise TypeError(f"not an expression node: {e!r}")


def hessian_exprs(e: Expression, n: int) -> dict:
    """Upper-triangle second partials ``{(q, r): d2e/dxq dxr}`` with ``q <= r``."""
    out = {}
    for q in range(n):
        dq = differentiate(e, q)
        for r in range(q, n):
            out[(q, r)] = differentiate(dq, r)
    return out


# --------------------------------------------------------------------------
# Interval arithmetic
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    """Closed interval ``[lo, hi]``; ``lo``/``hi`` may be arrays of equal shape."""

    lo: Union[float, np.ndarray]
    hi: Union[float, np.ndarray]

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise ValueError("interval with lo > hi")

    def contains(self, v, tol: float = 0.0) -> bool:
        return bool(np.all((np.asarray(self.lo) - tol <= v) & (v <= np.asarray(self.hi) + tol)))

    @property
    def sup_abs(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))


def _widen(lo, hi):
    # transcendental kernels are not correctly rounded; step out one ulp
    return np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)


def _imul(alo, ahi, blo, bhi):
    p = np.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])
    return p.min(axis=0), p.max(axis=0)


def _ipow(lo, hi, k):
    if k == 0:
        return np.ones_like(lo), np.ones_like(hi)
    if k < 0:
        if np.any((lo <= 0.0) & (hi >= 0.0)):
            raise ExpressionDomainError("negative power of an interval containing 0")
        plo, phi = _ipow(lo, hi, -k)
        return 1.0 / phi, 1.0 / plo
    a, b = lo ** k, hi ** k
    if k % 2 == 1:
        return a, b
    mx = np.maximum(a, b)
    mn = np.where(lo > 0.0, a, np.where(hi < 0.0, b, 0.0))
    return mn, mx


def _contains_point(lo, hi, phase):
    # does [lo, hi] contain phase + 2*pi*k for some integer k
    k = np.ceil((lo - phase) / (2 * np.pi))
    return phase + 2 * np.pi * k <= hi


def _isin(lo, hi):
    full = (hi - lo) >= 2 * np.pi
    slo, shi = np.sin(lo), np.sin(hi)
    mx = np.where(_contains_point(lo, hi, np.pi / 2) | full, 1.0, np.maximum(slo, shi))
    mn = np.where(_contains_point(lo, hi, -np.pi / 2) | full, -1.0, np.minimum(slo, shi))
    mn, mx = _widen(mn, mx)
    return np.maximum(mn, -1.0), np.minimum(mx, 1.0)


def _icos(lo, hi):
    full = (hi - lo) >= 2 * np.pi
    clo, chi = np.cos(lo), np.cos(hi)
    mx = np.where(_contains_point(lo, hi, 0.0) | full, 1.0, np.maximum(clo, chi))
    mn = np.where(_contains_point(lo, hi, np.pi) | full, -1.0, np.minimum(clo, chi))
    mn, mx = _widen(mn, mx)
    return np.maximum(mn, -1.0), np.minimum(mx, 1.0)


def _irange(e: Expression, lo: np.ndarray, hi: np.ndarray):
    """Interval evaluation; ``lo``/``hi`` have shape ``(n, K)`` for ``K`` boxes."""
    if isinstance(e, Num):
        v = np.full(lo.shape[1], e.value)
        return v, v.copy()
    if isinstance(e, Var):
        return lo[e.index], hi[e.index]
    if isinstance(e, Neg):
        a, b = _irange(e.a, lo, hi)
        return -b, -a
    if isinstance(e, Add):
        a1, b1 = _irange(e.a, lo, hi)
        a2, b2 = _irange(e.b, lo, hi)
        return a1 + a2, b1 + b2
    if isinstance(e, Sub):
        a1, b1 = _irange(e.a, lo, hi)
        a2, b2 = _irange(e.b, lo, hi)
        return a1 - b2, b1 - a2
    if isinstance(e, Mul):
        if e.a == e.b:
            return _ipow(*_irange(e.a, lo, hi), 2)
        return _imul(*_irange(e.a, lo, hi), *_irange(e.b, lo, hi))
    if isinstance(e, Div):
        a2, b2 = _irange(e.b, lo, hi)
        if np.any((a2 <= 0.0) & (b2 >= 0.0)):
            raise ExpressionDomainError(f"denominator of {e} may vanish on the box")
        return _imul(*_irange(e.a, lo, hi), 1.0 / b2, 1.0 / a2)
    if isinstance(e, Pow):
        return _ipow(*_irange(e.a, lo, hi), e.k)
    if isinstance(e, Call):
        a, b = _irange(e.a, lo, hi)
        if e.fn == "sin":
            return _isin(a, b)
        if e.fn == "cos":
            return _icos(a, b)
        f = _ARRAY_FUN[e.fn]
        return _widen(f(a), f(b))
    raise TypeError(f"not an expression node: {e!r}")


def _boxes(box):
    """Normalise a box to ``(lo, hi)`` arrays of shape ``(n, K)``."""
    b = np.asarray(box, dtype=float)
    if b.ndim == 2:  # (n, 2) single box
        lo, hi = b[:, 0:1], b[:, 1:2]
    elif b.ndim == 3:  # (K, n, 2) batch
        lo, hi = b[:, :, 0].T, b[:, :, 1].T
    else:
        raise ValueError("box must have shape (n, 2) or (K, n, 2)")
    if np.any(lo > hi):
        raise ValueError("empty box")
    return np.ascontiguousarray(lo), np.ascontiguousarray(hi)


def interval_range(e: Expression, box) -> Interval:
    """Enclosure of ``{e(x) : x in box}``.

    Parameters
    ----------
    e : Expression
    box : array_like
        ``(n, 2)`` rows of ``[lo, hi]`` or a batch ``(K, n, 2)``; for a batch
        the returned interval holds arrays of length ``K``.
    """
    b = np.asarray(box, dtype=float)
    lo, hi = _boxes(b)
    rlo, rhi = _irange(e, lo, hi)
    rlo = np.broadcast_to(rlo, (lo.shape[1],))
    rhi = np.broadcast_to(rhi, (lo.shape[1],))
    if b.ndim == 2:
        return Interval(float(rlo[0]), float(rhi[0]))
    return Interval(rlo.copy(), rhi.copy())


def second_derivative_sup(e: Expression, box, n: int | None = None, mode: str = "interval",
                          hessian: dict | None = None, grid: int = 21):
    """Upper bound on ``max_{q,r} max_{xi in box} |d2e/dxq dxr (xi)|``.

    Parameters
    ----------
    e : Expression
    box : array_like
        ``(n, 2)`` or a batch ``(K, n, 2)``.
    n : int, optional
        State dimension; inferred from ``box``.
    mode : {"interval", "sampled"}
        ``"interval"`` is rigorous.  ``"sampled"`` takes a grid maximum times
        1.1 and is *not* a certified bound.
    hessian : dict, optional
        Precomputed :func:`hessian_exprs` output.

    Returns
    -------
    float or ndarray
        A float for a single box, an array of length ``K`` for a batch.
    """
    b = np.asarray(box, dtype=float)
    lo, hi = _boxes(b)
    n = lo.shape[0] if n is None else n
    hess = hessian if hessian is not None else hessian_exprs(e, n)
    K = lo.shape[1]
    out = np.zeros(K)
    for d2 in hess.values():
        if isinstance(d2, Num):
            out = np.maximum(out, abs(d2.value))
            continue
        if mode == "interval":
            rlo, rhi = _irange(d2, lo, hi)
            out = np.maximum(out, np.maximum(np.abs(rlo), np.abs(rhi)))
        elif mode == "sampled":
            t = np.linspace(0.0, 1.0, grid)
            mesh = np.stack(np.meshgrid(*([t] * n), indexing="ij"), -1).reshape(-1, n)
            for k in range(K):
                pts = lo[:, k] + mesh * (hi[:, k] - lo[:, k])
                out[k] = max(out[k], 1.1 * float(np.max(np.abs(evaluate(d2, pts)))))
        else:
            raise ValueError(f"unknown bound mode {mode!r}")
    return float(out[0]) if b.ndim == 2 else out
