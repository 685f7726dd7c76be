import math

import numpy as np
import pytest
from obliqua.expr import (
    FUNCTION_ARITY,
    VARIABLES,
    BinOp,
    Call,
    Const,
    EvaluationDomainError,
    ExpressionSyntaxError,
    KinkError,
    Neg,
    Node,
    Pow,
    UnknownIdentifierError,
    Var,
    from_node,
    parse,
    to_text,
)


@pytest.mark.parametrize(
    "text",
    [
        "x2 - x1^2",
        "2*x1*abs(x1) - x2",
        "1 - (x1 - 1)^2 - x2^2",
        "-(x1 + x2) / 3",
        "min(x1, sqrt(x2))^2",
        "x1 * -2",
        "x1 - (x2 - 1)",
    ],
)
def test_printed_text_parses_to_the_same_tree(text):
    """Canonical text is a fixed point of parse."""
    f = parse(text)
    assert parse(to_text(f)).node == f.node


def test_canonical_text_of_a_simple_field():
    assert to_text(parse("x2-x1^2")) == "x2 - x1^2"


def test_evaluate_with_constants():
    """Scenario parameters are substituted as numbers."""
    f = parse("cos(theta)*(1 - x1) - sin(theta)*x2", {"theta": math.pi / 2})
    assert f.evaluate((0.0, 2.0)) == pytest.approx(-2.0)
    assert parse("1 - (x1 - 1)^2 - x2^2").evaluate((1.0, 0.5)) == 0.75
    assert parse("pi").evaluate((0.0, 0.0)) == math.pi


def test_syntax_error_reports_byte_offset():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("1 +")
    assert info.value.offset == 3


def test_unknown_identifiers():
    with pytest.raises(UnknownIdentifierError) as info:
        parse("x3 + 1")
    assert info.value.name == "x3"
    assert info.value.offset == 0
    with pytest.raises(UnknownIdentifierError):
        parse("tan(x1)")


@pytest.mark.parametrize("text", ["min(x1)", "x1^2.5", "(x1 + 1", "x1 $ 2", "x1 x2"])
def test_malformed_expressions(text):
    with pytest.raises(ExpressionSyntaxError):
        parse(text)


def test_constants_may_not_shadow_builtins():
    with pytest.raises(ValueError):
        parse("x1", {"sin": 1.0})


def test_gradient_and_hessian_are_symbolic():
    f = parse("x1^2*x2")
    np.testing.assert_allclose(f.gradient.evaluate((2.0, 3.0)), [12.0, 4.0])
    h = parse("x1^3*x2^2").hessian.evaluate((1.0, 2.0))
    np.testing.assert_allclose(h, [[24.0, 12.0], [12.0, 2.0]])
    assert h[0, 1] == h[1, 0]


def test_abs_kink_only_raises_in_strict_mode():
    """The Hessian of x1|x1| contains sign(x1), undefined for strict evaluation at 0."""
    f = parse("x1*abs(x1)")
    assert f.hessian.evaluate((0.0, 0.0))[0, 0] == 0.0
    with pytest.raises(KinkError):
        f.hessian.evaluate((0.0, 0.0), strict=True)
    np.testing.assert_allclose(f.hessian.evaluate((0.5, 0.0), strict=True), [[2.0, 0.0], [0.0, 0.0]])


def test_evaluation_domain_errors():
    with pytest.raises(EvaluationDomainError):
        parse("1/x1").evaluate((0.0, 1.0))
    values = parse("sqrt(x1)").evaluate_many(np.array([[-1.0, 0.0], [4.0, 0.0]]), invalid="nan")
    assert math.isnan(values[0])
    assert values[1] == 2.0


def test_constant_fields_broadcast():
    f = parse("2*pi")
    assert f.constant_value == pytest.approx(2 * math.pi)
    assert f.evaluate_many(np.zeros((3, 2))).shape == (3,)


SMOOTH_FUNCTIONS = ("sqrt", "sin", "cos", "exp")
KINKED_FUNCTIONS = ("abs", "sign", "min", "max", "ifle")
LEAF_VALUES = (0.25, 0.5, 1.0, 1.5, 2.0, 3.0)


def random_tree(rng: np.random.Generator, depth: int, smooth: bool = False) -> Node:
    """A random tree of the shapes the parser builds: no negated constants, no zero constants."""
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.65:
            return Var(VARIABLES[int(rng.integers(2))])
        value = LEAF_VALUES[int(rng.integers(len(LEAF_VALUES)))]
        return Const(-value if rng.random() < 0.3 else value)
    kind = int(rng.integers(4))
    if kind == 0:
        arg = random_tree(rng, depth - 1, smooth)
        return Const(-arg.value) if isinstance(arg, Const) else Neg(arg)
    if kind == 1:
        op = "+-*/"[int(rng.integers(4))]
        return BinOp(op, random_tree(rng, depth - 1, smooth), random_tree(rng, depth - 1, smooth))
    if kind == 2:
        return Pow(random_tree(rng, depth - 1, smooth), int(rng.integers(-2, 4)))
    names = SMOOTH_FUNCTIONS if smooth else SMOOTH_FUNCTIONS + KINKED_FUNCTIONS
    name = names[int(rng.integers(len(names)))]
    return Call(name, tuple(random_tree(rng, depth - 1, smooth) for _ in range(FUNCTION_ARITY[name])))


def reference_value(node: Node, x: tuple[float, float], seen: list[float]) -> float:
    """Plain-Python walk of the tree, NaN where it is undefined or overflows.

    Magnitudes of the finite intermediate values are appended to `seen`.
    """
    try:
        return _walk_value(node, x, seen)
    except (ValueError, ZeroDivisionError, OverflowError):
        return math.nan


def _walk_value(node: Node, x: tuple[float, float], seen: list[float]) -> float:
    if isinstance(node, Const):
        value = node.value
    elif isinstance(node, Var):
        value = x[VARIABLES.index(node.name)]
    elif isinstance(node, Neg):
        value = -_walk_value(node.arg, x, seen)
    elif isinstance(node, BinOp):
        a, b = _walk_value(node.left, x, seen), _walk_value(node.right, x, seen)
        value = {"+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b, "/": lambda: a / b}[node.op]()
    elif isinstance(node, Pow):
        value = _walk_value(node.base, x, seen) ** node.exponent
    elif node.name == "ifle":
        a, b = _walk_value(node.args[0], x, seen), _walk_value(node.args[1], x, seen)
        value = _walk_value(node.args[2] if a <= b else node.args[3], x, seen)
    else:
        args = [_walk_value(arg, x, seen) for arg in node.args]
        u = args[0]
        if any(math.isnan(v) for v in args):
            value = math.nan
        elif node.name in ("min", "max"):
            value = (min if node.name == "min" else max)(args)
        elif node.name == "sign":
            value = float((u > 0) - (u < 0))
        else:
            value = {"abs": abs, "sqrt": math.sqrt, "sin": math.sin, "cos": math.cos, "exp": math.exp}[node.name](u)
    if math.isfinite(value):
        seen.append(abs(value))
    return value


def test_random_trees_print_and_parse_back():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        node = random_tree(rng, 4)
        text = to_text(node)
        assert parse(text).node == node, text
        assert to_text(parse(text)) == text


def test_evaluation_matches_a_plain_python_walk():
    rng = np.random.default_rng(12)
    checked = 0
    for _ in range(1000):
        node = random_tree(rng, 4)
        points = rng.uniform(-2.0, 2.0, (16, 2))
        values = from_node(node).evaluate_many(points, invalid="nan")
        for point, value in zip(points, values):
            seen = [0.0]
            expected = reference_value(node, (float(point[0]), float(point[1])), seen)
            if not math.isfinite(expected):
                continue
            assert value == pytest.approx(expected, abs=1e-9 * (1.0 + max(seen))), to_text(node)
            checked += 1
    assert checked > 4000


def test_gradients_match_central_differences():
    """Central differences with h = 1e-6; the gap to the 2h difference bounds their truncation error."""
    rng = np.random.default_rng(13)
    h = 1e-6
    offsets = np.array([[h, 0], [-h, 0], [2 * h, 0], [-2 * h, 0], [0, h], [0, -h], [0, 2 * h], [0, -2 * h]])
    checked = 0
    for _ in range(1000):
        node = random_tree(rng, 4, smooth=True)
        f = from_node(node)
        for x in rng.uniform(-2.0, 2.0, (8, 2)):
            around = f.evaluate_many(x + offsets, invalid="nan")
            grad = f.gradient.evaluate_many(x.reshape(1, 2), invalid="nan")[0]
            seen = [0.0]
            value = reference_value(node, (float(x[0]), float(x[1])), seen)
            if not (np.isfinite(around).all() and np.isfinite(grad).all() and abs(value) < 1e6):
                continue
            for i in range(2):
                near = (around[4 * i] - around[4 * i + 1]) / (2 * h)
                far = (around[4 * i + 2] - around[4 * i + 3]) / (4 * h)
                tol = abs(near - far) + 1e-6 * (1.0 + abs(grad[i])) + 1e-8 * (1.0 + max(seen))
                assert abs(near - grad[i]) <= tol, (to_text(node), x.tolist(), i)
            checked += 1
    assert checked > 2000
