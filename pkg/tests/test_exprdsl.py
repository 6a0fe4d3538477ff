import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drcontrol.errors import (
    DivisionByZero,
    ExprSyntaxError,
    FutureNoiseReference,
    NonIntegerExponent,
    NumericalOverflow,
    UnboundVariable,
    UnknownIdentifier,
)
from drcontrol.exprdsl import (
    Env,
    eval_with_partials,
    evaluate,
    parse,
    print_expr,
)
from randexpr import central_difference, random_case


def test_parse_paper_dynamics():
    e = parse("sin(pi/2 * w1_1) * x1 + u1 + (x1 + u1)", (1, 1, 1, 1))
    v = evaluate(e, Env(x=[2.0], u=[0.5], w={1: [1.0]}))
    assert v == pytest.approx(2.0 + 0.5 + 2.5)


def test_parse_affine():
    assert parse("x1 + u1", (1, 1, 2, 0)) is not None


def test_future_noise_reference():
    with pytest.raises(FutureNoiseReference):
        parse("w3_1", (1, 1, 1, 1))


def test_unknown_identifiers():
    with pytest.raises(UnknownIdentifier):
        parse("x2", (1, 1, 1, 0))
    with pytest.raises(UnknownIdentifier):
        parse("u2 + x1", (1, 1, 1, 0))
    with pytest.raises(UnknownIdentifier):
        parse("foo(x1)", (1, 1, 1, 0))
    with pytest.raises(UnknownIdentifier):
        parse("w1_3", (1, 1, 2, 1))


def test_syntax_error_carries_position():
    with pytest.raises(ExprSyntaxError) as err:
        parse("x1 + ", (1, 1, 1, 0))
    assert err.value.position == 5
    with pytest.raises(ExprSyntaxError) as err:
        parse("x1 $ 2", (1, 1, 1, 0))
    assert err.value.position == 3


def test_empty_expression():
    with pytest.raises(ExprSyntaxError):
        parse("   ", (1, 1, 1, 0))


def test_integer_exponents_only():
    with pytest.raises(NonIntegerExponent):
        parse("x1^2.5", (1, 1, 1, 0))
    with pytest.raises(NonIntegerExponent):
        parse("x1^u1", (1, 1, 1, 0))
    with pytest.raises(NonIntegerExponent):
        parse("x1^-2", (1, 1, 1, 0))


def test_precedence():
    env = Env(x=[3.0], u=[2.0])
    assert evaluate(parse("-x1^2", (1, 1, 1, 0)), env) == -9.0
    assert evaluate(parse("2 - 3 - 4", (1, 1, 1, 0)), env) == -5.0
    assert evaluate(parse("12 / 4 / 3", (1, 1, 1, 0)), env) == 1.0
    assert evaluate(parse("2 * x1 + 1", (1, 1, 1, 0)), env) == 7.0
    assert evaluate(parse("2 + x1 * u1", (1, 1, 1, 0)), env) == 8.0
    assert evaluate(parse("(2 + x1) * u1", (1, 1, 1, 0)), env) == 10.0
    assert evaluate(parse("2^3", (1, 1, 1, 0)), env) == 8.0


def test_evaluate_examples():
    assert evaluate(parse("x1^2", (1, 0, 0, 0)), Env(x=[3.0])) == 9.0
    v = evaluate(parse("sin(pi/2 * w1_1)", (1, 1, 1, 1)), Env(w={1: [1.0]}))
    assert v == pytest.approx(1.0)
    with pytest.raises(DivisionByZero):
        evaluate(parse("1 / x1", (1, 0, 0, 0)), Env(x=[0.0]))


def test_overflow_detected():
    with pytest.raises(NumericalOverflow):
        evaluate(parse("exp(exp(x1))", (1, 0, 0, 0)), Env(x=[100.0]))


def test_unbound_variable():
    with pytest.raises(UnboundVariable):
        evaluate(parse("u1", (1, 1, 1, 0)), Env(x=[1.0]))
    with pytest.raises(UnboundVariable):
        evaluate(parse("w1_1", (1, 1, 1, 1)), Env(x=[1.0], u=[1.0]))


def test_partials_examples():
    v, p = eval_with_partials(parse("x1^2", (1, 0, 0, 0)), Env(x=[3.0]), ["x1"])
    assert v == 9.0 and p[0] == pytest.approx(6.0)

    env = Env(x=[2.0], u=[0.7], w={1: [1.0]})
    v, p = eval_with_partials(
        parse("sin(pi/2*w1_1)*x1 + u1", (1, 1, 1, 1)), env, ["x1", "u1"]
    )
    assert v == pytest.approx(2.7)
    assert p == pytest.approx([1.0, 1.0])

    v, p = eval_with_partials(
        parse("u1*w1_1", (1, 1, 1, 1)), Env(x=[0.0], u=[0.4], w={1: [-1.0]}), ["u1"]
    )
    assert v == pytest.approx(-0.4)
    assert p[0] == pytest.approx(-1.0)


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    e = parse("sin(x1) * u1 + x2^3 / (2 + cos(u2))", (2, 2, 1, 0))
    X = rng.uniform(-2, 2, size=(17, 2))
    U = rng.uniform(-2, 2, size=(17, 2))
    vec = evaluate(e, Env(x=X, u=U))
    for i in range(17):
        assert vec[i] == pytest.approx(evaluate(e, Env(x=X[i], u=U[i])), abs=1e-14)


def test_vectorized_partials_match_scalar():
    rng = np.random.default_rng(4)
    e = parse("x1 * u1 + exp(x2 / 4)", (2, 1, 1, 0))
    X = rng.uniform(-2, 2, size=(9, 2))
    U = rng.uniform(-2, 2, size=(9, 1))
    v, p = eval_with_partials(e, Env(x=X, u=U), ["x1", "x2", "u1"])
    assert p.shape == (3, 9)
    for i in range(9):
        vi, pi = eval_with_partials(e, Env(x=X[i], u=U[i]), ["x1", "x2", "u1"])
        assert v[i] == pytest.approx(vi)
        assert p[:, i] == pytest.approx(pi)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_print_parse_fixed_point(seed):
    rng = np.random.default_rng(seed)
    expr, _, _ = random_case(rng)
    text = print_expr(expr)
    once = print_expr(parse(text, (2, 2, 2, 2)))
    twice = print_expr(parse(once, (2, 2, 2, 2)))
    assert once == twice


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_print_preserves_value(seed):
    rng = np.random.default_rng(seed)
    expr, env, _ = random_case(rng)
    reparsed = parse(print_expr(expr), (2, 2, 2, 2))
    assert evaluate(reparsed, env) == pytest.approx(evaluate(expr, env), rel=1e-12)


def test_derivatives_vs_finite_differences_sample():
    rng = np.random.default_rng(1234)
    for _ in range(150):
        expr, env, wrt = random_case(rng)
        _, exact = eval_with_partials(expr, env, wrt)
        fd = central_difference(expr, env, wrt)
        assert np.all(np.abs(exact - fd) <= 1e-5 * (1.0 + np.abs(exact)))


def test_evaluate_is_pure():
    e = parse("x1 + pi * u1", (1, 1, 1, 0))
    env = Env(x=[1.5], u=[2.5])
    assert evaluate(e, env) == evaluate(e, env)
    assert print_expr(e) == "x1 + pi * u1"
