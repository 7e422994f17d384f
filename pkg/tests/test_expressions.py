import random

import pytest

from mavguard.dsl import parse_expr
from mavguard.expressions import (
    Binary,
    Bindings,
    EvalError,
    Literal,
    Ref,
    Unary,
    eval_expr,
    format_expr,
    uses_telemetry,
)
from tests.reference import REFERENCE_BINDINGS, random_tree, reference_eval, same_result


def to_expr(tree):
    tag = tree[0]
    if tag in ("num", "bool", "str"):
        return Literal(tree[1])
    if tag == "ref":
        return Ref(tree[1], tree[2])
    if tag == "neg":
        return Unary("-", to_expr(tree[1]))
    if tag == "not":
        return Unary("not", to_expr(tree[1]))
    return Binary(tree[0], to_expr(tree[1]), to_expr(tree[2]))


def reference_env() -> Bindings:
    state = {name: value for (scope, name), value in REFERENCE_BINDINGS.items() if scope == "state"}

    def lookup(name):
        if name not in state:
            raise EvalError("unbound name", f"state.{name}")
        return state[name]

    return Bindings(
        fields={name: value for (scope, name), value in REFERENCE_BINDINGS.items() if scope == "msg"},
        binders={"flag": REFERENCE_BINDINGS[("name", "flag")]},
        consts={"k": REFERENCE_BINDINGS[("name", "k")]},
        state=lookup,
    )


def outcome(expr, env):
    try:
        return ("ok", expr.evaluate(env))
    except EvalError as e:
        return ("err", e.kind)


@pytest.mark.slow
def test_agrees_with_reference_interpreter():
    rng = random.Random(2024)
    env = reference_env()
    errors = 0
    for _ in range(10_000):
        tree = random_tree(rng)
        expected = reference_eval(tree)
        actual = outcome(to_expr(tree), env)
        assert same_result(actual, expected), (tree, actual, expected)
        errors += expected[0] == "err"
    # the generator must exercise both outcomes
    assert 0 < errors < 10_000


def test_arithmetic_is_float64():
    assert eval_expr(parse_expr("1 / 3"), {}) == 1.0 / 3.0
    assert eval_expr(parse_expr("0.1 + 0.2"), {}) == 0.1 + 0.2
    assert eval_expr(parse_expr("-msg.a * 2"), {"a": 4.0}) == -8.0


def test_precedence():
    assert eval_expr(parse_expr("1 + 2 * 3"), {}) == 7.0
    assert eval_expr(parse_expr("(1 + 2) * 3"), {}) == 9.0
    assert eval_expr(parse_expr("not 1 < 2 or true"), {}) is True
    assert eval_expr(parse_expr("true or false and false"), {}) is True


def test_division_by_zero_is_an_eval_error():
    with pytest.raises(EvalError) as info:
        eval_expr(parse_expr("msg.a / (msg.b - msg.b)"), {"a": 1.0, "b": 2.0})
    assert info.value.kind == "division by zero"


def test_type_mismatch():
    with pytest.raises(EvalError) as info:
        eval_expr(parse_expr('msg.name == 3'), {"name": "MC_PITCH_P"})
    assert info.value.kind == "type mismatch"
    with pytest.raises(EvalError):
        eval_expr(parse_expr("1 and true"), {})


def test_and_short_circuits_before_errors():
    assert eval_expr(parse_expr("false and (1 / 0 > 0)"), {}) is False
    assert eval_expr(parse_expr("true or msg.missing"), {}) is True


def test_unbound_names():
    with pytest.raises(EvalError) as info:
        eval_expr(parse_expr("msg.missing > 0"), {})
    assert info.value.kind == "unbound name"
    with pytest.raises(EvalError):
        eval_expr(parse_expr("state.armed"), {})


def test_lookup_order_binders_then_consts():
    expr = parse_expr("n <= limit")
    assert eval_expr(expr, {}, binders={"n": 5.0}, consts={"limit": 10.0}) is True
    assert eval_expr(expr, {}, binders={"n": 5.0, "limit": 1.0}, consts={"limit": 10.0}) is False


def test_iteration_and_mode_refs():
    expr = parse_expr("iter.index < iter.count and state.flight_mode != mode.FLIP")
    value = eval_expr(
        expr,
        {},
        state=lambda name: 5.0,
        iter_bindings={"index": 2.0, "count": 3.0, "received": 2.0},
        modes={"FLIP": 14},
    )
    assert value is True


def test_uses_telemetry():
    assert uses_telemetry(parse_expr("state.climb_rate_mps <= 0"))
    assert uses_telemetry(parse_expr("msg.x > 0 and state.armed"))
    assert not uses_telemetry(parse_expr("state.MC_PITCH_P * 2 > n"))


def test_format_expr_round_trips():
    for text in [
        "n <= (m1 * state.MC_PITCH_P) * (m2 * state.MC_PITCHRATE_P)",
        "not state.armed or msg.param1 == -2",
        '-(msg.x + 1) / 2 != 0.5 and msg.param_id == "A\\"B"',
    ]:
        expr = parse_expr(text)
        assert parse_expr(format_expr(expr)) == expr


def test_format_expr_parenthesises_binary_nodes():
    assert format_expr(parse_expr("1 + 2 * x")) == "(1.0 + (2.0 * x))"
    assert format_expr(parse_expr("not a")) == "(not a)"
