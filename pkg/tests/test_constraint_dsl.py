"""Constraint-language tests: parsing, printing, canonical forms, verdicts."""

import itertools
import random

import pytest

from restgpt.constraint_dsl import (
    Arithmetic,
    BoolLit,
    Dependency,
    DslSyntaxError,
    Logical,
    NumberLit,
    ParamRef,
    Relational,
    TextLit,
    Verdict,
    canonical_text,
    canonicalize,
    evaluate_constraint,
    expr_from_json,
    expr_json_text,
    expr_to_json,
    parse_constraint,
    to_text,
)

from exprgen import gen_expr, permute_commutative

SAT = Verdict.SATISFIED
VIO = Verdict.VIOLATED
INAPP = Verdict.INAPPLICABLE


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def test_parse_dependency_call():
    expr = parse_constraint("AllOrNone(limit, offset)")
    assert expr == Dependency("AllOrNone", (ParamRef("limit"), ParamRef("offset")))


def test_parse_relational():
    expr = parse_constraint("min_results <= max_results")
    assert expr == Relational("<=", ParamRef("min_results"), ParamRef("max_results"))


def test_parse_precedence_arithmetic_before_relational():
    expr = parse_constraint("a + b * 2 <= 100")
    assert expr == Relational(
        "<=",
        Arithmetic("+", ParamRef("a"), Arithmetic("*", ParamRef("b"), NumberLit(2))),
        NumberLit(100),
    )


def test_parse_relational_before_logical():
    expr = parse_constraint("a < 1 and b < 2 or not c == 3")
    assert expr == Logical("or", (
        Logical("and", (
            Relational("<", ParamRef("a"), NumberLit(1)),
            Relational("<", ParamRef("b"), NumberLit(2)),
        )),
        Logical("not", (Relational("==", ParamRef("c"), NumberLit(3)),)),
    ))


def test_parse_nested_predicate_in_dependency():
    expr = parse_constraint("Requires(page == 2, limit > 0)")
    assert expr == Dependency("Requires", (
        Relational("==", ParamRef("page"), NumberLit(2)),
        Relational(">", ParamRef("limit"), NumberLit(0)),
    ))


def test_dependency_op_name_is_distinct_from_logical_keyword():
    expr = parse_constraint("Or(a, b) or Or(c, d)")
    assert expr == Logical("or", (
        Dependency("Or", (ParamRef("a"), ParamRef("b"))),
        Dependency("Or", (ParamRef("c"), ParamRef("d"))),
    ))


def test_non_scalar_assignment_values_do_not_crash():
    expr = parse_constraint("x < 10")
    assert evaluate_constraint(expr, {"x": [1, 2]}) is VIO  # mismatch, not a crash
    assert evaluate_constraint(parse_constraint("x == y"),
                               {"x": [1], "y": [1]}) is SAT


def test_parse_literals():
    assert parse_constraint("x == 'ASC'") == Relational("==", ParamRef("x"), TextLit("ASC"))
    assert parse_constraint("x == true") == Relational("==", ParamRef("x"), BoolLit(True))
    assert parse_constraint("x == -2.5") == Relational("==", ParamRef("x"), NumberLit(-2.5))
    assert parse_constraint("user.address.city == \"Pisa\"") == Relational(
        "==", ParamRef("user.address.city"), TextLit("Pisa"))


def test_parse_unknown_operator_lists_vocabulary():
    with pytest.raises(DslSyntaxError) as err:
        parse_constraint("AllOrNothing(a, b)")
    message = str(err.value)
    for name in ("AllOrNone", "ZeroOrOne", "OnlyOne", "Or", "Requires"):
        assert name in message


def test_literal_zero_divisor_rejected_at_construction():
    with pytest.raises(ValueError):
        Arithmetic("/", ParamRef("x"), NumberLit(0))
    # A non-literal zero denominator is a runtime concern, not a parse error.
    assert Arithmetic("/", ParamRef("x"), ParamRef("y"))


def test_parse_errors_carry_position():
    with pytest.raises(DslSyntaxError) as err:
        parse_constraint("a <= ?")
    assert err.value.position == 5
    with pytest.raises(DslSyntaxError):
        parse_constraint("")
    with pytest.raises(DslSyntaxError):
        parse_constraint("AllOrNone(a)")  # arity
    with pytest.raises(DslSyntaxError):
        parse_constraint("Requires(a, b, c)")
    with pytest.raises(DslSyntaxError):
        parse_constraint("a < b < c")
    with pytest.raises(DslSyntaxError):
        parse_constraint("a / 0 > 1")  # literal-zero divisor rejected up front


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def test_all_or_none_both_present():
    expr = parse_constraint("AllOrNone(a, b)")
    assert evaluate_constraint(expr, {"a": 1, "b": 2}) is SAT


def test_zero_or_one_truth_table():
    # All four presence patterns for two parameters, enumerated by hand:
    # (absent, absent) ok; one present ok; both present violated.
    expr = parse_constraint("ZeroOrOne(a, b)")
    assert evaluate_constraint(expr, {}) is SAT
    assert evaluate_constraint(expr, {"a": 1}) is SAT
    assert evaluate_constraint(expr, {"b": 1}) is SAT
    assert evaluate_constraint(expr, {"a": 1, "b": 2}) is VIO


def test_only_one_and_or():
    only_one = parse_constraint("OnlyOne(a, b)")
    either = parse_constraint("Or(a, b)")
    assert evaluate_constraint(only_one, {"a": 1}) is SAT
    assert evaluate_constraint(only_one, {}) is VIO
    assert evaluate_constraint(only_one, {"a": 1, "b": 1}) is VIO
    assert evaluate_constraint(either, {}) is VIO
    assert evaluate_constraint(either, {"b": 0}) is SAT


def test_requires_semantics():
    expr = parse_constraint("Requires(a, b)")
    assert evaluate_constraint(expr, {}) is SAT  # condition not met
    assert evaluate_constraint(expr, {"b": 1}) is SAT
    assert evaluate_constraint(expr, {"a": 1, "b": 1}) is SAT
    assert evaluate_constraint(expr, {"a": 1}) is VIO


def test_requires_with_predicates():
    expr = parse_constraint("Requires(page == 2, limit > 0)")
    assert evaluate_constraint(expr, {"page": 1}) is SAT
    assert evaluate_constraint(expr, {"page": 2, "limit": 5}) is SAT
    assert evaluate_constraint(expr, {"page": 2, "limit": 0}) is VIO
    # Consequence unresolvable while the condition holds: not satisfied.
    assert evaluate_constraint(expr, {"page": 2}) is VIO


def test_relational_missing_param_is_inapplicable():
    expr = parse_constraint("x < 10")
    assert evaluate_constraint(expr, {}) is INAPP
    assert evaluate_constraint(expr, {"x": None}) is INAPP
    assert evaluate_constraint(expr, {"x": 9}) is SAT


def test_type_mismatch_is_violated_not_a_crash():
    expr = parse_constraint("x < 10")
    assert evaluate_constraint(expr, {"x": "ten"}) is VIO
    assert evaluate_constraint(parse_constraint("x == 'a'"), {"x": 5}) is VIO
    assert evaluate_constraint(parse_constraint("x + 1 > 0"), {"x": "a"}) is VIO
    # Runtime division by zero is a violation, not an exception.
    assert evaluate_constraint(parse_constraint("1 / x > 0"), {"x": 0}) is VIO


def test_text_comparison_is_lexicographic():
    assert evaluate_constraint(parse_constraint("x < 'b'"), {"x": "a"}) is SAT
    assert evaluate_constraint(parse_constraint("x == 'ASC'"), {"x": "ASC"}) is SAT


def test_logical_kleene_propagation():
    both = parse_constraint("x < 10 and y < 10")
    assert evaluate_constraint(both, {"x": 1, "y": 1}) is SAT
    assert evaluate_constraint(both, {"x": 11, "y": 1}) is VIO
    assert evaluate_constraint(both, {"x": 1}) is INAPP
    assert evaluate_constraint(both, {"x": 11}) is VIO  # violated wins over missing
    either = parse_constraint("x < 10 or y < 10")
    assert evaluate_constraint(either, {"x": 1}) is SAT
    assert evaluate_constraint(either, {"x": 11}) is INAPP
    negated = parse_constraint("not x < 10")
    assert evaluate_constraint(negated, {}) is INAPP
    assert evaluate_constraint(negated, {"x": 11}) is SAT


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

def test_canonicalize_sorts_dependency_args():
    assert canonicalize(parse_constraint("ZeroOrOne(b, a)")) == \
        parse_constraint("ZeroOrOne(a, b)")


def test_canonicalize_flips_ordering_operators():
    assert canonical_text(parse_constraint("10 >= x")) == "x <= 10"
    assert canonical_text(parse_constraint("b > a")) == "a < b"


def test_canonicalize_keeps_requires_order():
    expr = parse_constraint("Requires(b, a)")
    assert canonicalize(expr) == expr


def test_canonicalize_sorts_commutative_operands():
    assert canonical_text(parse_constraint("y == x")) == "x == y"
    assert canonical_text(parse_constraint("y + x < 3")) == "x + y < 3"
    # Non-commutative arithmetic keeps its order.
    assert canonical_text(parse_constraint("y - x < 3")) == "y - x < 3"


def test_canonicalize_removes_double_negation():
    assert canonicalize(parse_constraint("not not x < 1")) == parse_constraint("x < 1")
    assert canonicalize(parse_constraint("not not not x < 1")) == \
        parse_constraint("not x < 1")


def test_commuted_pairs_share_canonical_form():
    rng = random.Random(20240117)
    for _ in range(1000):
        expr = gen_expr(rng)
        variant = permute_commutative(rng, expr)
        assert canonicalize(expr) == canonicalize(variant), to_text(expr)


def test_round_trip_and_idempotence_on_random_expressions():
    rng = random.Random(99)
    for _ in range(1000):
        expr = gen_expr(rng)
        assert parse_constraint(to_text(expr)) == expr, to_text(expr)
        once = canonicalize(expr)
        assert canonicalize(once) == once, to_text(expr)


def test_canonicalize_preserves_verdicts():
    rng = random.Random(7)
    domain = (None, 1, 2, "a", True)
    params = ("x", "y", "z")
    for _ in range(300):
        expr = gen_expr(rng, depth=2)
        canon = canonicalize(expr)
        for values in itertools.product(domain, repeat=len(params)):
            assignment = {p: v for p, v in zip(params, values) if v is not None}
            assert evaluate_constraint(expr, assignment) is \
                evaluate_constraint(canon, assignment), to_text(expr)


# ---------------------------------------------------------------------------
# JSON form
# ---------------------------------------------------------------------------

def test_json_round_trip():
    rng = random.Random(123)
    for _ in range(200):
        expr = gen_expr(rng)
        assert expr_from_json(expr_to_json(expr)) == expr
    assert expr_json_text(parse_constraint("a < 1")) == \
        expr_json_text(parse_constraint("a < 1"))
