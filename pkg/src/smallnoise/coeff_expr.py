"""
A small arithmetic language for coefficient fields declared in config files.

Grammar (whitespace-insensitive)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?            # right-associative
    atom   := NUMBER | 't' | 'x' INDEX | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Precedence is ``^`` > unary ``-`` > ``* /`` > ``+ -``, so ``-x1^2`` means ``-(x1^2)``
and ``2^3^2`` is ``2^9``. There is no implicit multiplication: ``2x1`` is rejected.

Functions: ``sin cos exp tanh abs sqrt sign`` (one argument) and ``min max`` (two).
``sign(0) = 0``.

Compiled expressions evaluate on floats or numpy arrays of any matching shape; the
state argument has the dimension index last. Division by zero and ``sqrt`` of a
negative number raise :class:`EvalDomainError`; overflow yields ``inf`` silently so
that path integrators can record it as a blow-up.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import SmallNoiseError

MAX_DEPTH = 200
MAX_SOURCE_LENGTH = 10_000

UNARY_FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "sign": np.sign,
}
BINARY_FUNCTIONS: dict[str, Callable] = {
    "min": np.minimum,
    "max": np.maximum,
}
FUNCTION_ARITY = {**{k: 1 for k in UNARY_FUNCTIONS}, **{k: 2 for k in BINARY_FUNCTIONS}}


class ExprError(SmallNoiseError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError, ValueError):
    """Malformed source. ``column`` is 1-based."""

    def __init__(self, message: str, column: int, source: str = ""):
        super().__init__(f"{message} at column {column}")
        self.column = column
        self.source = source
        self.reason = message


class UnknownIdentifierError(ExprSyntaxError):
    def __init__(self, name: str, column: int, source: str = ""):
        super().__init__(f"unknown identifier '{name}'", column, source)
        self.name = name


class ArityError(ExprSyntaxError):
    def __init__(self, name: str, expected: int, got: int, column: int, source: str = ""):
        super().__init__(
            f"function '{name}' takes {expected} argument(s), got {got}", column, source
        )
        self.name = name


class EvalDomainError(ExprError, ArithmeticError):
    """Evaluation left the domain of an operation (``x/0``, ``sqrt(-1)``)."""

    def __init__(self, message: str, subexpression: str):
        super().__init__(f"{message} in '{subexpression}'")
        self.subexpression = subexpression


# -- AST ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    """``t`` (index ``None``) or the 1-based state component ``x<index>``."""
    name: str
    index: int | None = None


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


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
    name: str
    args: tuple["Expr", ...]


Expr = Union[Num, Var, Neg, Add, Sub, Mul, Div, Pow, Call]

_BINARY_SYMBOL = {Add: "+", Sub: "-", Mul: "*", Div: "/", Pow: "^"}


def to_source(e: Expr) -> str:
    """Fully parenthesised source text that re-parses to an equal tree."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return f"(-{to_source(e.operand)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    if isinstance(e, Pow):
        return f"({to_source(e.base)} ^ {to_source(e.exponent)})"
    sym = _BINARY_SYMBOL[type(e)]
    return f"({to_source(e.left)} {sym} {to_source(e.right)})"


# -- lexer -------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    column: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos + 1, source)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos + 1))
        pos = m.end()
    tokens.append(_Token("end", "", len(source) + 1))
    return tokens


# -- parser ------------------------------------------------------------------------

class _Parser:
    def __init__(self, source: str, r: int):
        self.source = source
        self.r = r
        self.tokens = _tokenize(source)
        self.pos = 0
        self.depth = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.text != text:
            found = "end of input" if tok.kind == "end" else repr(tok.text)
            raise ExprSyntaxError(f"expected '{text}', found {found}", tok.column, self.source)
        return self.advance()

    def _enter(self, column: int):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ExprSyntaxError("expression nested too deeply", column, self.source)

    def parse(self) -> Expr:
        e = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected token {tok.text!r}", tok.column, self.source)
        if tree_depth(e) > MAX_DEPTH:
            raise ExprSyntaxError("expression nested too deeply", 1, self.source)
        return e

    def expr(self) -> Expr:
        self._enter(self.peek().column)
        left = self.term()
        while self.peek().text in ("+", "-"):
            op = self.advance()
            right = self.term()
            left = Add(left, right) if op.text == "+" else Sub(left, right)
        self.depth -= 1
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.advance()
            right = self.unary()
            left = Mul(left, right) if op.text == "*" else Div(left, right)
        return left

    def unary(self) -> Expr:
        tok = self.peek()
        if tok.text == "-":
            self.advance()
            self._enter(tok.column)
            operand = self.unary()
            self.depth -= 1
            return Neg(operand)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        tok = self.peek()
        if tok.text == "^":
            self.advance()
            self._enter(tok.column)
            exponent = self.unary()
            self.depth -= 1
            return Pow(base, exponent)
        return base

    def atom(self) -> Expr:
        tok = self.advance()
        if tok.kind == "num":
            nxt = self.peek()
            if nxt.kind in ("num", "name") or nxt.text == "(":
                raise ExprSyntaxError(
                    "implicit multiplication is not allowed", nxt.column, self.source
                )
            return Num(float(tok.text))
        if tok.kind == "name":
            return self.identifier(tok)
        if tok.text == "(":
            self._enter(tok.column)
            inner = self.expr()
            self.expect(")")
            self.depth -= 1
            return inner
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExprSyntaxError(f"unexpected {found}", tok.column, self.source)

    def identifier(self, tok: _Token) -> Expr:
        name = tok.text
        if name in FUNCTION_ARITY:
            if self.peek().text != "(":
                raise ExprSyntaxError(
                    f"function '{name}' must be called with parentheses",
                    self.peek().column, self.source,
                )
            self.advance()
            self._enter(tok.column)
            args = [self.expr()]
            while self.peek().text == ",":
                self.advance()
                args.append(self.expr())
            self.expect(")")
            self.depth -= 1
            if len(args) != FUNCTION_ARITY[name]:
                raise ArityError(name, FUNCTION_ARITY[name], len(args), tok.column, self.source)
            return Call(name, tuple(args))
        if self.peek().text == "(":
            raise UnknownIdentifierError(name, tok.column, self.source)
        if name == "t":
            return Var("t")
        m = re.fullmatch(r"x([1-9][0-9]*)", name)
        if m and int(m.group(1)) <= self.r:
            return Var(name, int(m.group(1)))
        raise UnknownIdentifierError(name, tok.column, self.source)


def parse(source, r: int) -> Expr:
    """
    Parse ``source`` into an expression tree over ``t`` and ``x1..x<r>``.

    Raises :class:`ExprSyntaxError` (or a subclass) with a 1-based column on any
    malformed input; bytes that are not valid UTF-8 are rejected the same way.
    """
    if r < 1:
        raise ValueError("state dimension r must be >= 1")
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ExprSyntaxError("source is not valid UTF-8", exc.start + 1) from None
    if not isinstance(source, str):
        raise ExprSyntaxError("source must be text", 1)
    if not source.strip():
        raise ExprSyntaxError("empty expression", 1, source)
    if len(source) > MAX_SOURCE_LENGTH:
        raise ExprSyntaxError("expression too long", MAX_SOURCE_LENGTH + 1, source)
    return _Parser(source, r).parse()


# -- evaluation --------------------------------------------------------------------

def _compile(e: Expr) -> Callable:
    if isinstance(e, Num):
        v = float(e.value)
        return lambda t, x: v
    if isinstance(e, Var):
        if e.index is None:
            return lambda t, x: t
        i = e.index - 1
        return lambda t, x: x[..., i]
    if isinstance(e, Neg):
        f = _compile(e.operand)
        return lambda t, x: -f(t, x)
    if isinstance(e, Add):
        f, g = _compile(e.left), _compile(e.right)
        return lambda t, x: f(t, x) + g(t, x)
    if isinstance(e, Sub):
        f, g = _compile(e.left), _compile(e.right)
        return lambda t, x: f(t, x) - g(t, x)
    if isinstance(e, Mul):
        f, g = _compile(e.left), _compile(e.right)
        return lambda t, x: f(t, x) * g(t, x)
    if isinstance(e, Div):
        f, g = _compile(e.left), _compile(e.right)
        text = to_source(e)

        def div(t, x):
            num, den = f(t, x), g(t, x)
            if np.any(np.equal(den, 0.0)):
                raise EvalDomainError("division by zero", text)
            return np.true_divide(num, den)
        return div
    if isinstance(e, Pow):
        f, g = _compile(e.base), _compile(e.exponent)
        return lambda t, x: np.power(f(t, x), g(t, x))
    if isinstance(e, Call):
        if e.name == "sqrt":
            f = _compile(e.args[0])
            text = to_source(e)

            def sqrt(t, x):
                a = f(t, x)
                if np.any(np.less(a, 0.0)):
                    raise EvalDomainError("square root of a negative number", text)
                return np.sqrt(a)
            return sqrt
        if e.name in UNARY_FUNCTIONS:
            fn = UNARY_FUNCTIONS[e.name]
            f = _compile(e.args[0])
            return lambda t, x: fn(f(t, x))
        fn = BINARY_FUNCTIONS[e.name]
        f, g = _compile(e.args[0]), _compile(e.args[1])
        return lambda t, x: fn(f(t, x), g(t, x))
    raise TypeError(f"not an expression node: {e!r}")


class CompiledExpr:
    """An expression tree bound to its state dimension, callable as ``f(t, x)``."""

    def __init__(self, tree: Expr, r: int, source: str | None = None):
        self.tree = tree
        self.r = r
        self.source = source if source is not None else to_source(tree)
        self._fn = _compile(tree)

    @classmethod
    def from_source(cls, source: str, r: int) -> "CompiledExpr":
        return cls(parse(source, r), r, source)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.r,):
            raise ValueError(f"state must have trailing dimension {self.r}, got {x.shape}")
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = self._fn(t, x)
        shape = np.broadcast_shapes(np.shape(t), x.shape[:-1])
        return np.broadcast_to(np.asarray(out, dtype=float), shape)

    def __repr__(self):
        return f"CompiledExpr({self.source!r}, r={self.r})"


def evaluate(e: Expr, t, x) -> float | np.ndarray:
    """Evaluate a tree at time ``t`` and state ``x`` (scalar result for a single point)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _compile(e)(t, x)
    out = np.broadcast_to(np.asarray(out, dtype=float), np.broadcast_shapes(np.shape(t), x.shape[:-1]))
    return float(out) if out.ndim == 0 else out


def parse_vector(sources: list[str], r: int, *, rows: int) -> list[CompiledExpr]:
    """Parse a list of component expressions, checking the row count."""
    if len(sources) != rows:
        raise ValueError(f"expected {rows} expressions, got {len(sources)}")
    return [CompiledExpr.from_source(s, r) for s in sources]


def _children(e: Expr) -> tuple:
    if isinstance(e, (Num, Var)):
        return ()
    if isinstance(e, Call):
        return e.args
    if isinstance(e, Neg):
        return (e.operand,)
    if isinstance(e, Pow):
        return (e.base, e.exponent)
    return (e.left, e.right)


def tree_depth(e: Expr) -> int:
    """Height of the tree, computed without recursion."""
    best = 0
    stack = [(e, 1)]
    while stack:
        node, d = stack.pop()
        best = max(best, d)
        stack.extend((c, d + 1) for c in _children(node))
    return best


def constant_value(e: Expr) -> float | None:
    """The value of a tree that references neither ``t`` nor ``x``; otherwise ``None``."""
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            return None
        stack.extend(_children(node))
    try:
        return float(evaluate(e, 0.0, np.zeros(1)))
    except EvalDomainError:
        return None


__all__ = [
    "Add", "ArityError", "Call", "CompiledExpr", "Div", "EvalDomainError", "Expr",
    "ExprError", "ExprSyntaxError", "Mul", "Neg", "Num", "Pow", "Sub",
    "UnknownIdentifierError", "Var", "constant_value", "evaluate", "parse",
    "parse_vector", "to_source", "tree_depth",
]
