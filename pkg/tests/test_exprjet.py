import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from algebroid.exprjet import (
    Add, Call, Div, EvalDomainError, Jet, Mul, Neg, Num, ParseError,
    Pow, Sub, UndeclaredIdentifierError, Var, diff, eval_jet, fd_crosscheck,
    parse_expr, render,
)
from algebroid.spec_model import sample_points

from conftest import FIXTURES, fixture_doc, load_doc

XY = ["x", "y"]


# --------------------------------------------------------------------------
# Parsing


def test_parse_power_and_call():
    e = parse_expr("x^2 + sin(y)", XY)
    assert e == Add(Pow(Var("x", 0), Num(2.0)), Call("sin", Var("y", 1)))


def test_parse_nested_division():
    e = parse_expr("1/(1+y^2)", XY)
    assert e == Div(Num(1.0), Add(Num(1.0), Pow(Var("y", 1), Num(2.0))))


def test_parse_undeclared_identifier():
    with pytest.raises(UndeclaredIdentifierError) as err:
        parse_expr("x + z", XY)
    assert err.value.name == "z"
    assert err.value.offset == 4


def test_parse_syntax_error_offset():
    with pytest.raises(ParseError) as err:
        parse_expr("x + * y", XY)
    assert err.value.offset == 4
    with pytest.raises(ParseError):
        parse_expr("x @ y", XY)
    with pytest.raises(ParseError):
        parse_expr("(x + y", XY)
    with pytest.raises(ParseError):
        parse_expr("x y", XY)
    with pytest.raises(ParseError):
        parse_expr("", XY)
    with pytest.raises(ParseError):
        parse_expr("foo(x)", XY)


def test_precedence():
    # ^ binds tighter than unary minus, which binds tighter than *
    assert parse_expr("-x^2", XY) == Neg(Pow(Var("x", 0), Num(2.0)))
    assert parse_expr("-x*y", XY) == Mul(Neg(Var("x", 0)), Var("y", 1))
    assert parse_expr("x - -y", XY) == Sub(Var("x", 0), Neg(Var("y", 1)))
    # right associativity of ^
    e = parse_expr("x^2^3", XY)
    assert e == Pow(Var("x", 0), Pow(Num(2.0), Num(3.0)))
    assert parse_expr("2e-3", XY) == Num(0.002)
    assert parse_expr("x^-2", XY) == Pow(Var("x", 0), Neg(Num(2.0)))


def _exprs(coords):
    # literal tokens are unsigned in the grammar; negatives come from Neg
    leaves = st.one_of(
        st.floats(min_value=0, max_value=4, allow_nan=False).map(
            lambda v: Num(round(v, 3))),
        st.sampled_from([Var(c, i) for i, c in enumerate(coords)]),
    )

    def extend(children):
        return st.one_of(
            st.tuples(children, children).map(lambda ab: Add(*ab)),
            st.tuples(children, children).map(lambda ab: Sub(*ab)),
            st.tuples(children, children).map(lambda ab: Mul(*ab)),
            st.tuples(children, children).map(lambda ab: Div(*ab)),
            children.map(Neg),
            st.tuples(children, st.integers(0, 3)).map(
                lambda ek: Pow(ek[0], Num(float(ek[1])))),
            st.tuples(st.sampled_from(["sin", "cos", "exp", "tanh"]),
                      children).map(lambda fe: Call(*fe)),
        )

    return st.recursive(leaves, extend, max_leaves=12)


@given(_exprs(XY))
@settings(max_examples=200, deadline=None)
def test_render_parse_roundtrip(e):
    assert parse_expr(render(e), XY) == e


# --------------------------------------------------------------------------
# Jets


def test_eval_product_rule():
    jet = eval_jet(parse_expr("x*y", XY), (2.0, 3.0), order=1)
    assert jet.value == 6.0
    assert jet.grad.tolist() == [3.0, 2.0]


def test_eval_sine_second_order():
    jet = eval_jet(parse_expr("sin(x)", XY), (0.0, 0.7), order=2)
    assert jet.value == 0.0
    assert jet.grad.tolist() == [1.0, 0.0]
    assert jet.hess[0, 0] == 0.0


def test_eval_polynomial():
    jet = eval_jet(parse_expr("1+y^2", XY), (0.0, 1.0), order=1)
    assert jet.value == 2.0
    assert jet.grad.tolist() == [0.0, 2.0]


def test_integer_power_exact():
    jet = eval_jet(parse_expr("x^3", XY), (2.0, 0.0), order=2)
    assert jet.value == 8.0
    assert jet.grad[0] == 12.0
    assert jet.hess[0, 0] == 12.0


def test_third_order_partials():
    jet = eval_jet(parse_expr("x^2*y", XY), (1.5, -2.0), order=3)
    assert jet.third[0, 0, 1] == 2.0
    assert jet.third[0, 1, 0] == 2.0
    assert jet.third[1, 0, 0] == 2.0
    assert jet.third[0, 0, 0] == 0.0
    jet = eval_jet(parse_expr("exp(2*x)", XY), (0.3, 0.0), order=3)
    assert jet.third[0, 0, 0] == pytest.approx(8.0 * math.exp(0.6), rel=1e-14)


@pytest.mark.parametrize("text, point, reason", [
    ("1/x", (0.0, 1.0), "division by zero"),
    ("ln(x)", (0.0, 1.0), "ln of nonpositive"),
    ("ln(x)", (-1.0, 1.0), "ln of nonpositive"),
    ("sqrt(x)", (-1.0, 1.0), "sqrt of negative"),
    ("x^0.5", (-1.0, 1.0), "non-integer power"),
])
def test_domain_errors(text, point, reason):
    with pytest.raises(EvalDomainError) as err:
        eval_jet(parse_expr(text, XY), point, order=1)
    assert reason.split()[0] in str(err.value)


def test_domain_error_reports_subexpression_and_point():
    with pytest.raises(EvalDomainError) as err:
        eval_jet(parse_expr("1 + ln(y - 2)", XY), (0.0, 1.0), order=0)
    assert "ln(y - 2" in str(err.value)
    assert "1.0" in str(err.value)


def test_non_constant_exponent_rejected():
    with pytest.raises(EvalDomainError):
        eval_jet(parse_expr("x^y", XY), (2.0, 3.0), order=1)


# --------------------------------------------------------------------------
# Finite-difference oracle


def test_fd_crosscheck_cubic():
    # central differences have O(h^2) error: h = 1e-4 gives ~1e-8 on x^3
    e = parse_expr("x^3", ["x"])
    assert fd_crosscheck(e, (1.0,), h=1e-4) <= 1e-7
    jet = eval_jet(e, (1.0,), order=1)
    plus = eval_jet(e, (1.0 + 1e-4,), order=0).value
    minus = eval_jet(e, (1.0 - 1e-4,), order=0).value
    independent = abs(jet.grad[0] - (plus - minus) / 2e-4)
    assert fd_crosscheck(e, (1.0,), h=1e-4) == pytest.approx(independent)


def test_fd_crosscheck_constant_and_exp():
    assert fd_crosscheck(parse_expr("5", XY), (0.3, -0.2)) ==pytest.approx(0.0, abs=1e-12)
    assert fd_crosscheck(parse_expr("exp(x)", ["x"]), (0.0,), h=1e-4) <= 1e-7


def test_fd_crosscheck_all_fixture_expressions():
    # every expression of every fixture, 100 seeded points each
    for name in FIXTURES:
        spec = load_doc(fixture_doc(name))
        points = sample_points(spec.chart, 100, seed=42)
        exprs = [e for row in spec.anchor for e in row]
        exprs += [e for block in spec.connection for row in block for e in row]
        exprs += list(spec.structure.values())
        for block in (spec.metric, spec.two_form, spec.symplectic, spec.poisson):
            if block is not None:
                exprs += list(block.values())
        for e in exprs:
            for p in points:
                assert fd_crosscheck(e, p, h=1e-4) <= 1e-6, (name, render(e), p)


# --------------------------------------------------------------------------
# Jet arithmetic properties


def _random_jet(rng, n=2, order=3):
    j = Jet.constant(rng.uniform(-2, 2), n, order)
    j.grad = rng.uniform(-2, 2, size=n)
    h = rng.uniform(-2, 2, size=(n, n))
    j.hess = h + h.T
    t = rng.uniform(-2, 2, size=(n, n, n))
    j.third = sum(t.transpose(p) for p in
                  [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)])
    return j


def _jet_close(a, b, rel=1e-12):
    scale = max(1.0, abs(a.value))
    ok = abs(a.value - b.value) <= rel * scale
    for part in ("grad", "hess", "third"):
        pa, pb = getattr(a, part), getattr(b, part)
        if pa is not None:
            scale = max(1.0, float(np.max(np.abs(pa))))
            ok = ok and float(np.max(np.abs(pa - pb))) <= rel * scale
    return ok


@pytest.mark.parametrize("seed", range(5))
def test_jet_add_mul_commutative_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_random_jet(rng) for _ in range(3))
    assert _jet_close(a + b, b + a)
    assert _jet_close(a * b, b * a)
    assert _jet_close((a + b) + c, a + (b + c))
    assert _jet_close((a * b) * c, a * (b * c))


def test_order_consistency_exact():
    # lower-order slots agree bitwise with the same slots at higher order
    exprs = ["x*y + sin(x)*exp(y)", "1/(1 + x^2)", "sqrt(1 + y^2)*tanh(x)"]
    points = [(0.3, -1.2), (1.7, 0.4)]
    for text in exprs:
        e = parse_expr(text, XY)
        for p in points:
            for k in range(3):
                lo = eval_jet(e, p, order=k)
                hi = eval_jet(e, p, order=k + 1)
                assert lo.value == hi.value
                if k >= 1:
                    assert np.array_equal(lo.grad, hi.grad)
                if k >= 2:
                    assert np.array_equal(lo.hess, hi.hess)


def test_hessian_symmetry():
    e = parse_expr("sin(x*y) + x^3/(2 + cos(y))", XY)
    jet = eval_jet(e, (0.7, -0.4), order=3)
    assert np.array_equal(jet.hess, jet.hess.T)
    for perm in [(0, 2, 1), (1, 0, 2), (2, 1, 0)]:
        assert np.array_equal(jet.third, jet.third.transpose(perm))


# --------------------------------------------------------------------------
# Formal derivative (used by the free-algebroid extension)


@pytest.mark.parametrize("text", [
    "x^2*y", "sin(x*y)", "exp(x)/(1 + y^2)", "sqrt(1 + x^2)", "tanh(x)*ln(2 + y)",
    "tan(x/4)", "abs(1 + x^2)",
])
def test_diff_matches_jet_gradient(text):
    e = parse_expr(text, XY)
    for p in [(0.4, 0.8), (1.1, -0.3)]:
        jet = eval_jet(e, p, order=1)
        for i in range(2):
            val = eval_jet(diff(e, i), p, order=0).value
            assert val == pytest.approx(jet.grad[i], rel=1e-12, abs=1e-12)
