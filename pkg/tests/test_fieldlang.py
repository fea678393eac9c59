import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exitlab import fieldlang as fl
from exitlab.fieldlang import BinOp, Call, Neg, Num, Var

XY = ["x1", "x2"]


def test_parse_example_is_valid_tree():
    e = fl.parse("-x1 + 0.5*sin(x2)", XY)
    assert isinstance(e, BinOp) and e.op == "+"
    assert fl.variables_of(e) == {"x1", "x2"}


def test_unknown_identifier_reports_offset():
    with pytest.raises(fl.FieldSyntaxError) as info:
        fl.parse("x3", XY)
    assert "unknown identifier" in str(info.value)
    assert info.value.offset == 0


def test_arity_error():
    with pytest.raises(fl.FieldSyntaxError, match="argument"):
        fl.parse("min(x1)", XY)
    with pytest.raises(fl.FieldSyntaxError):
        fl.parse("sin(x1, x2)", XY)


@pytest.mark.parametrize("src,offset", [("1 +", 3), ("(x1", 3), ("x1 $ 2", 3), ("2 3", 2)])
def test_syntax_errors_carry_offsets(src, offset):
    with pytest.raises(fl.FieldSyntaxError) as info:
        fl.parse(src, XY)
    assert info.value.offset == offset


@pytest.mark.parametrize("src,bind,value", [
    ("-x1 + 0.5*sin(x2)", {"x1": 1.0, "x2": 0.0}, -1.0),
    ("x1^2/2", {"x1": 2.0}, 2.0),
    ("exp(0)*max(1,2)", {}, 2.0),
    ("min(3, x1, 2)", {"x1": 5.0}, 2.0),
    ("abs(-2) + tanh(0) + sqrt(4) + cos(0) + log(1)", {}, 5.0),
])
def test_evaluate_examples(src, bind, value):
    assert fl.evaluate(fl.parse(src, XY), bind) == value


def test_precedence_structure():
    assert fl.parse("a+b*c", "abc") == fl.parse("a+(b*c)", "abc")
    assert fl.parse("a^b^c", "abc") == fl.parse("a^(b^c)", "abc")
    # unary minus binds tighter than * but not over ^
    assert fl.parse("-a*b", "abc") == BinOp("*", Neg(Var("a")), Var("b"))
    assert fl.parse("-a^2", "abc") == Neg(BinOp("^", Var("a"), Num(2.0)))
    assert fl.evaluate(fl.parse("-x1^2", ["x1"]), {"x1": 3.0}) == -9.0
    assert fl.evaluate(fl.parse("2^-1", []), {}) == 0.5
    assert fl.evaluate(fl.parse("8/4/2", []), {}) == 1.0
    assert fl.evaluate(fl.parse("8-4-2", []), {}) == 2.0


@pytest.mark.parametrize("src,bind", [
    ("log(x1)", {"x1": 0.0}), ("log(x1)", {"x1": -1.0}), ("sqrt(x1)", {"x1": -1.0}),
    ("1/x1", {"x1": 0.0}), ("x1^0.5", {"x1": -2.0}),
])
def test_domain_errors_are_reported(src, bind):
    with pytest.raises(fl.FieldDomainError):
        fl.evaluate(fl.parse(src, ["x1"]), bind)


def test_gradient_examples():
    assert fl.grad(fl.parse("x1^2/2", ["x1"]), {"x1": 3.0}, h=1e-5)[0] == pytest.approx(3.0, abs=1e-8)
    assert np.all(fl.grad(fl.parse("5", ["x1"]), {"x1": 0.3}) == 0.0)
    g = fl.grad(fl.parse("x1*x2", XY), {"x1": 1.0, "x2": 2.0})
    assert np.allclose(g, [2.0, 1.0], atol=1e-8)


def test_compiled_numpy_matches_evaluate():
    e = fl.parse("-x1 + 0.5*sin(x2) + max(x1, x2)^2 - exp(-x1*x2)", XY)
    f = fl.compile_numpy(e, XY)
    pts = np.random.default_rng(1).normal(size=(50, 2))
    out = f(pts[:, 0], pts[:, 1])
    ref = [fl.evaluate(e, {"x1": a, "x2": b}) for a, b in pts]
    assert np.allclose(out, ref, rtol=1e-14, atol=1e-14)
    with pytest.raises(fl.FieldDomainError):
        fl.compile_numpy(fl.parse("log(x1)", ["x1"]), ["x1"])(np.array([1.0, -1.0]))


def test_constant_broadcasts():
    f = fl.compile_numpy(fl.parse("2", ["x1"]), ["x1"])
    assert f(np.zeros((3, 4))).shape == (3, 4)


# -- random expressions -----------------------------------------------------------

names = st.sampled_from(["x1", "x2", "t", "u"])
leaves = st.one_of(
    st.builds(Num, st.floats(min_value=0.0, max_value=1e3, allow_nan=False, allow_infinity=False)),
    st.builds(Var, names),
)


def _extend(children):
    unary = st.builds(Call, st.sampled_from(["sin", "cos", "exp", "tanh", "abs", "log", "sqrt"]),
                      st.tuples(children))
    nary = st.builds(Call, st.sampled_from(["min", "max"]),
                     st.lists(children, min_size=2, max_size=3).map(tuple))
    return st.one_of(
        st.builds(Neg, children),
        st.builds(BinOp, st.sampled_from(["+", "-", "*", "/", "^"]), children, children),
        unary, nary,
    )


exprs = st.recursive(leaves, _extend, max_leaves=12)


@settings(max_examples=1000, deadline=None)
@given(exprs)
def test_parse_print_parse_idempotent(e):
    text = fl.to_source(e)
    again = fl.parse(text, ["x1", "x2", "t", "u"])
    assert again == e
    assert fl.to_source(again) == text


@settings(max_examples=300, deadline=None)
@given(exprs, st.floats(-3, 3), st.floats(-3, 3))
def test_evaluation_is_total(e, a, b):
    bind = {"x1": a, "x2": b, "t": 0.5, "u": -1.0}
    try:
        v = fl.evaluate(e, bind)
    except fl.FieldError:
        return
    except OverflowError:
        pytest.fail("overflow escaped as a Python exception")
    assert isinstance(v, float) and not math.isnan(v)
