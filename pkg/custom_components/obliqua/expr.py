"""Expression language for the scalar fields of a scenario.

Grammar (see docs/grammar.md):

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" ["-"] INT)?
    atom   := NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"

Variables are `x1` and `x2`. `pi` and caller-supplied constants are substituted as numbers
at parse time. Functions: abs, sqrt, sin, cos, exp, min, max, plus `sign(u)` and
`ifle(a, b, p, q)` (p where a <= b, else q), which appear in derivatives.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from .base import FloatArray, ObliquaError, PointLike, as_points


class ExpressionError(ObliquaError):
    pass


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExpressionError):
    def __init__(self, name: str, offset: int) -> None:
        super().__init__(f"Unknown identifier {name!r} at byte offset {offset}")
        self.name = name
        self.offset = offset


class EvaluationDomainError(ExpressionError):
    """Division by zero, square root of a negative, or a non-finite value."""

    pass


class KinkError(ExpressionError):
    """A strict evaluation landed exactly on a kink of abs/min/max."""

    pass


VARIABLES = ("x1", "x2")

FUNCTION_ARITY = {
    "abs": 1,
    "cos": 1,
    "exp": 1,
    "ifle": 4,
    "max": 2,
    "min": 2,
    "sign": 1,
    "sin": 1,
    "sqrt": 1,
}

BUILTIN_CONSTANTS = {"pi": math.pi}


@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: tuple[Node, ...]


ZERO = Const(0.0)
ONE = Const(1.0)


# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
    |(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
    |(?P<ident>[A-Za-z_][A-Za-z_0-9]*)
    |(?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ExpressionSyntaxError(f"Unexpected character {text[pos]!r}", _byte_offset(text, pos))
        kind = match.lastgroup
        assert kind is not None
        if kind != "ws":
            tokens.append(_Token(kind, match.group(), _byte_offset(text, pos)))
        pos = match.end()
    tokens.append(_Token("eof", "", _byte_offset(text, len(text))))
    return tokens


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


class _Parser:
    def __init__(self, text: str, constants: Mapping[str, float]) -> None:
        self.tokens = _tokenize(text)
        self.pos = 0
        self.constants = constants

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, text: str) -> _Token:
        token = self.current
        if token.text != text:
            found = "end of input" if token.kind == "eof" else repr(token.text)
            raise ExpressionSyntaxError(f"Expected {text!r}, found {found}", token.offset)
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.current.kind != "eof":
            raise ExpressionSyntaxError(f"Unexpected {self.current.text!r}", self.current.offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.current.text in ("+", "-"):
            op = self.advance().text
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.current.text in ("*", "/"):
            op = self.advance().text
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.current.text == "-":
            self.advance()
            arg = self.unary()
            if isinstance(arg, Const):
                return Const(-arg.value)
            return Neg(arg)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.current.text != "^":
            return base
        self.advance()
        sign = 1
        if self.current.text == "-":
            self.advance()
            sign = -1
        token = self.current
        if token.kind != "number" or not token.text.isdigit():
            raise ExpressionSyntaxError("Exponent must be an integer literal", token.offset)
        self.advance()
        return Pow(base, sign * int(token.text))

    def atom(self) -> Node:
        token = self.current
        if token.kind == "number":
            self.advance()
            value = float(token.text)
            if not math.isfinite(value):
                raise ExpressionSyntaxError(f"Number {token.text} out of range", token.offset)
            return Const(value)
        if token.kind == "ident":
            self.advance()
            if self.current.text == "(":
                return self.call(token)
            if token.text in VARIABLES:
                return Var(token.text)
            if token.text in self.constants:
                return Const(float(self.constants[token.text]))
            if token.text in BUILTIN_CONSTANTS:
                return Const(BUILTIN_CONSTANTS[token.text])
            raise UnknownIdentifierError(token.text, token.offset)
        if token.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if token.kind == "eof" else repr(token.text)
        raise ExpressionSyntaxError(f"Unexpected {found}", token.offset)

    def call(self, name: _Token) -> Node:
        if name.text not in FUNCTION_ARITY:
            raise UnknownIdentifierError(name.text, name.offset)
        self.expect("(")
        args = [self.expr()]
        while self.current.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        arity = FUNCTION_ARITY[name.text]
        if len(args) != arity:
            raise ExpressionSyntaxError(
                f"{name.text}() takes {arity} argument(s), got {len(args)}", name.offset
            )
        return Call(name.text, tuple(args))


# Printing

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value)) if value != 0 else "0"
    return repr(value)


def _fmt(node: Node) -> tuple[str, int]:
    if isinstance(node, Const):
        text = _format_number(abs(node.value))
        if node.value < 0 or (node.value == 0 and math.copysign(1.0, node.value) < 0):
            return "-" + text, _PREC_UNARY
        return text, _PREC_ATOM
    if isinstance(node, Var):
        return node.name, _PREC_ATOM
    if isinstance(node, Call):
        return f"{node.name}({', '.join(_fmt(arg)[0] for arg in node.args)})", _PREC_ATOM
    if isinstance(node, Pow):
        return f"{_wrap(node.base, _PREC_ATOM)}^{node.exponent}", _PREC_POW
    if isinstance(node, Neg):
        return "-" + _wrap(node.arg, _PREC_UNARY), _PREC_UNARY
    if isinstance(node, BinOp):
        prec = _PREC_ADD if node.op in "+-" else _PREC_MUL
        left = _wrap(node.left, prec)
        right = _wrap(node.right, prec + 1)
        return f"{left} {node.op} {right}", prec
    raise TypeError(f"Unknown node {node!r}")


def _wrap(node: Node, min_prec: int) -> str:
    text, prec = _fmt(node)
    return text if prec >= min_prec else f"({text})"


# Evaluation

_Values = tuple[FloatArray, np.ndarray]


def _eval(node: Node, x1: FloatArray, x2: FloatArray, strict: bool) -> _Values:
    """Evaluate to (values, invalid-mask)."""
    if isinstance(node, Const):
        return np.full(x1.shape, node.value), np.zeros(x1.shape, dtype=bool)
    if isinstance(node, Var):
        return (x1 if node.name == "x1" else x2).copy(), np.zeros(x1.shape, dtype=bool)
    if isinstance(node, Neg):
        value, bad = _eval(node.arg, x1, x2, strict)
        return -value, bad
    if isinstance(node, BinOp):
        left, bad_l = _eval(node.left, x1, x2, strict)
        right, bad_r = _eval(node.right, x1, x2, strict)
        bad = bad_l | bad_r
        if node.op == "+":
            return left + right, bad
        if node.op == "-":
            return left - right, bad
        if node.op == "*":
            return left * right, bad
        zero = right == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            return left / np.where(zero, 1.0, right), bad | zero
    if isinstance(node, Pow):
        base, bad = _eval(node.base, x1, x2, strict)
        if node.exponent < 0:
            zero = base == 0
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                return np.power(np.where(zero, 1.0, base), node.exponent), bad | zero
        with np.errstate(over="ignore", invalid="ignore"):
            return np.power(base, node.exponent), bad
    if isinstance(node, Call):
        return _eval_call(node, x1, x2, strict)
    raise TypeError(f"Unknown node {node!r}")


def _eval_call(node: Call, x1: FloatArray, x2: FloatArray, strict: bool) -> _Values:
    if node.name == "ifle":
        a, bad_a = _eval(node.args[0], x1, x2, strict)
        b, bad_b = _eval(node.args[1], x1, x2, strict)
        p, bad_p = _eval(node.args[2], x1, x2, strict)
        q, bad_q = _eval(node.args[3], x1, x2, strict)
        take_p = a <= b
        if strict and np.any((a == b) & ~(bad_a | bad_b)):
            raise KinkError("ifle() evaluated at a tie")
        return np.where(take_p, p, q), bad_a | bad_b | np.where(take_p, bad_p, bad_q)

    values = [_eval(arg, x1, x2, strict) for arg in node.args]
    bad = np.logical_or.reduce([v[1] for v in values])
    u = values[0][0]
    if node.name == "min":
        return np.minimum(u, values[1][0]), bad
    if node.name == "max":
        return np.maximum(u, values[1][0]), bad
    if node.name == "abs":
        return np.abs(u), bad
    if node.name == "sign":
        if strict and np.any((u == 0) & ~bad):
            raise KinkError("sign() evaluated at zero")
        return np.sign(u), bad
    if node.name == "sqrt":
        negative = u < 0
        return np.sqrt(np.where(negative, 0.0, u)), bad | negative
    if node.name == "sin":
        return np.sin(u), bad
    if node.name == "cos":
        return np.cos(u), bad
    if node.name == "exp":
        with np.errstate(over="ignore"):
            return np.exp(u), bad
    raise TypeError(f"Unknown function {node.name!r}")


# Symbolic differentiation with minimal folding


def _is_const(node: Node, value: float) -> bool:
    return isinstance(node, Const) and node.value == value


def _add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return BinOp("+", a, b)


def _sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    return BinOp("-", a, b)


def _mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return BinOp("*", a, b)


def _div(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return BinOp("/", a, b)


def _neg(a: Node) -> Node:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(base: Node, exponent: int) -> Node:
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    return Pow(base, exponent)


def _ifle(a: Node, b: Node, p: Node, q: Node) -> Node:
    if p == q:
        return p
    return Call("ifle", (a, b, p, q))


def differentiate(node: Node, var: str) -> Node:
    """Symbolic derivative of `node` with respect to `var`.

    abs differentiates to sign(u) u' with sign(0) = 0; min and max follow the attained
    branch, ties going to the first argument.
    """

    def d(n: Node) -> Node:
        return differentiate(n, var)

    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == var else ZERO
    if isinstance(node, Neg):
        return _neg(d(node.arg))
    if isinstance(node, BinOp):
        a, b = node.left, node.right
        if node.op == "+":
            return _add(d(a), d(b))
        if node.op == "-":
            return _sub(d(a), d(b))
        if node.op == "*":
            return _add(_mul(a, d(b)), _mul(d(a), b))
        return _div(_sub(_mul(d(a), b), _mul(a, d(b))), _pow(b, 2))
    if isinstance(node, Pow):
        n = node.exponent
        if n == 0:
            return ZERO
        return _mul(_mul(Const(float(n)), _pow(node.base, n - 1)), d(node.base))
    if isinstance(node, Call):
        args = node.args
        u = args[0]
        if node.name == "sqrt":
            return _div(d(u), _mul(Const(2.0), node))
        if node.name == "sin":
            return _mul(Call("cos", (u,)), d(u))
        if node.name == "cos":
            return _neg(_mul(Call("sin", (u,)), d(u)))
        if node.name == "exp":
            return _mul(node, d(u))
        if node.name == "abs":
            return _mul(Call("sign", (u,)), d(u))
        if node.name == "sign":
            return ZERO
        if node.name == "min":
            return _ifle(args[0], args[1], d(args[0]), d(args[1]))
        if node.name == "max":
            return _ifle(args[1], args[0], d(args[0]), d(args[1]))
        if node.name == "ifle":
            return _ifle(args[0], args[1], d(args[2]), d(args[3]))
    raise TypeError(f"Cannot differentiate {node!r}")


def _walk(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, Neg):
        yield from _walk(node.arg)
    elif isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Pow):
        yield from _walk(node.base)
    elif isinstance(node, Call):
        for arg in node.args:
            yield from _walk(arg)


# Field types


@dataclass(frozen=True)
class ScalarField:
    """An immutable scalar field over (x1, x2) with symbolic derivatives."""

    node: Node
    source: str = field(default="", compare=False)

    def __str__(self) -> str:
        return to_text(self)

    @cached_property
    def constant_value(self) -> Optional[float]:
        """The value when the field does not depend on x1 or x2."""
        if any(isinstance(n, Var) for n in _walk(self.node)):
            return None
        origin = np.zeros(1)
        values, bad = _eval(self.node, origin, origin, False)
        if bad[0] or not np.isfinite(values[0]):
            return None
        return float(values[0])

    def derivative(self, var: str) -> "ScalarField":
        if var not in VARIABLES:
            raise ValueError(f"Unknown variable {var!r}")
        return self._derivatives[var]

    @cached_property
    def _derivatives(self) -> dict[str, "ScalarField"]:
        return {v: ScalarField(differentiate(self.node, v)) for v in VARIABLES}

    @cached_property
    def gradient(self) -> "VectorField":
        return VectorField(self.derivative("x1"), self.derivative("x2"))

    @cached_property
    def hessian(self) -> "MatrixField":
        d1, d2 = self.derivative("x1"), self.derivative("x2")
        h12 = d1.derivative("x2")
        return MatrixField(((d1.derivative("x1"), h12), (h12, d2.derivative("x2"))))

    def evaluate(self, x: PointLike, *, strict: bool = False) -> float:
        return float(self.evaluate_many(np.asarray(x, dtype=np.float64).reshape(1, 2), strict=strict)[0])

    def evaluate_many(self, xs: PointLike, *, strict: bool = False, invalid: str = "raise") -> FloatArray:
        """Evaluate at each row of an (n, 2) array.

        Args:
            xs: Points, shape (n, 2).
            strict: Raise KinkError when a kink of abs/min/max is hit exactly.
            invalid: `raise` for EvaluationDomainError on any invalid point, `nan` to
                return NaN there instead.
        """
        pts = as_points(xs)
        const = None if strict else self.constant_value
        if const is not None:
            return np.full(pts.shape[0], const)
        values, bad = _eval(self.node, pts[:, 0], pts[:, 1], strict)
        bad = bad | ~np.isfinite(values)
        if np.any(bad):
            if invalid == "raise":
                where = pts[int(np.argmax(bad))]
                raise EvaluationDomainError(
                    f"{to_text(self)} is undefined at ({where[0]!r}, {where[1]!r})"
                )
            values = np.where(bad, np.nan, values)
        return values


@dataclass(frozen=True)
class VectorField:
    u1: ScalarField
    u2: ScalarField

    @classmethod
    def parse(cls, texts: Sequence[str], constants: Optional[Mapping[str, float]] = None) -> "VectorField":
        if len(texts) != 2:
            raise ValueError(f"A vector field needs 2 components, got {len(texts)}")
        return cls(parse(texts[0], constants), parse(texts[1], constants))

    @cached_property
    def constant_value(self) -> Optional[tuple[float, float]]:
        c1, c2 = self.u1.constant_value, self.u2.constant_value
        if c1 is None or c2 is None:
            return None
        return (c1, c2)

    def evaluate(self, x: PointLike, *, strict: bool = False) -> FloatArray:
        return self.evaluate_many(np.asarray(x, dtype=np.float64).reshape(1, 2), strict=strict)[0]

    def evaluate_many(self, xs: PointLike, *, strict: bool = False, invalid: str = "raise") -> FloatArray:
        pts = as_points(xs)
        return np.stack(
            [
                self.u1.evaluate_many(pts, strict=strict, invalid=invalid),
                self.u2.evaluate_many(pts, strict=strict, invalid=invalid),
            ],
            axis=1,
        )

    def unit_at(self, x: PointLike) -> FloatArray:
        """Value at `x` scaled to unit length."""
        value = self.evaluate(x)
        norm = float(np.hypot(value[0], value[1]))
        if norm == 0.0:
            raise EvaluationDomainError(f"Vector field vanishes at {tuple(np.asarray(x).tolist())}")
        return value / norm


@dataclass(frozen=True)
class MatrixField:
    rows: tuple[tuple[ScalarField, ScalarField], tuple[ScalarField, ScalarField]]

    @classmethod
    def parse(
        cls, texts: Sequence[Sequence[str]], constants: Optional[Mapping[str, float]] = None
    ) -> "MatrixField":
        if len(texts) != 2 or any(len(row) != 2 for row in texts):
            raise ValueError("A matrix field needs 2x2 entries")
        return cls(tuple(tuple(parse(t, constants) for t in row) for row in texts))  # type: ignore[arg-type]

    @cached_property
    def constant_value(self) -> Optional[FloatArray]:
        values = [f.constant_value for row in self.rows for f in row]
        if any(v is None for v in values):
            return None
        return np.array(values, dtype=np.float64).reshape(2, 2)

    def evaluate(self, x: PointLike, *, strict: bool = False) -> FloatArray:
        return self.evaluate_many(np.asarray(x, dtype=np.float64).reshape(1, 2), strict=strict)[0]

    def evaluate_many(self, xs: PointLike, *, strict: bool = False, invalid: str = "raise") -> FloatArray:
        """Shape (n, 2, 2)."""
        pts = as_points(xs)
        const = self.constant_value
        if const is not None:
            return np.broadcast_to(const, (pts.shape[0], 2, 2)).copy()
        out = np.empty((pts.shape[0], 2, 2))
        for i, row in enumerate(self.rows):
            for j, entry in enumerate(row):
                out[:, i, j] = entry.evaluate_many(pts, strict=strict, invalid=invalid)
        return out


# Module-level operations


def parse(text: str, constants: Optional[Mapping[str, float]] = None) -> ScalarField:
    """Parse `text` into a ScalarField.

    Args:
        text: Expression over x1 and x2.
        constants: Extra named constants (scenario parameters).

    Raises:
        ExpressionSyntaxError: With the byte offset of the problem.
        UnknownIdentifierError: For names other than x1, x2, pi and `constants`.

    Examples:
        >>> to_text(parse("x2 - x1^2"))
        'x2 - x1^2'
    """
    constants = dict(constants or {})
    clash = set(constants) & (set(VARIABLES) | set(FUNCTION_ARITY))
    if clash:
        raise ValueError(f"Constant names shadow built-ins: {sorted(clash)}")
    node = _Parser(text, constants).parse()
    logging.debug(f"Parsed {text!r} -> {to_text(node)}")
    return ScalarField(node, text)


def evaluate(f: ScalarField, x: PointLike) -> float:
    """Evaluate `f` at a single point, raising EvaluationDomainError where undefined."""
    return f.evaluate(x)


def gradient(f: ScalarField) -> VectorField:
    return f.gradient


def hessian(f: ScalarField) -> MatrixField:
    """Symbolic Hessian; the off-diagonal entries share one field, so it is symmetric."""
    return f.hessian


def to_text(f: Union[ScalarField, Node]) -> str:
    """Canonical text; `parse(to_text(f))` rebuilds the same tree."""
    node = f.node if isinstance(f, ScalarField) else f
    return _fmt(node)[0]


def from_node(node: Node) -> ScalarField:
    return ScalarField(node, to_text(node))
