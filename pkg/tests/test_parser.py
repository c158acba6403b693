import random

import pytest
from hypothesis import given, settings, strategies as st

from helpers import rand_expr
from rodentstore.algebra import (
    AttrStride, Comprehension, FieldAccess, Generator, ListExpr, Literal, Nest, TableRef, Transform, Var,
)
from rodentstore.parser import ParseError, format_expr, format_program, parse, parse_program


def test_comprehension_example():
    e = parse("[[r.lat, r.lon] | \\r <- Traces]")
    assert e == Comprehension(ListExpr((FieldAccess(Var("r"), "lat"), FieldAccess(Var("r"), "lon"))),
                              (Generator("r", TableRef("Traces")),))


def test_transform_example():
    e = parse("zorder(grid[lat:0.01, lon:0.01](N2))")
    grid = Transform("grid", ((AttrStride("lat", 0.01), AttrStride("lon", 0.01)),), (TableRef("N2"),))
    assert e == Transform("zorder", (), (grid,))


def test_unclosed_comprehension():
    text = "[x | \\x <- T"
    with pytest.raises(ParseError) as info:
        parse(text)
    err = info.value
    assert err.span.start == len(text)
    assert "]" in err.expected


def test_format_examples():
    assert format_expr(Transform("delta", (("lat",),), (TableRef("N"),))) == "delta[lat](N)"
    n0 = Literal(Nest([Nest([1, 2, 3]), Nest([12, 13, 14])]))
    assert format_expr(n0) == "[[1, 2, 3], [12, 13, 14]]"
    assert parse("[[1,2,3],[12,13,14]]") == n0


def test_whitespace_and_comments_ignored():
    a = parse("fold[Zip,Addr;Area](T)")
    b = parse("fold [ Zip , Addr ; Area ]\n  ( T )  -- group addresses by area\n")
    assert a == b
    assert format_expr(a) == "fold[Zip, Addr; Area](T)"


def test_let_bindings_inline():
    prog = parse_program("let N2 = [[r.lat, r.lon] | \\r <- Traces, orderby r.t]\nzorder(grid[lat:0.5](N2))")
    assert [name for name, _ in prog.bindings] == ["N2"]
    e = parse(format_program(prog))
    assert isinstance(e.inputs[0].inputs[0], Comprehension)


def test_bare_names_resolve_to_generator_vars():
    e = parse("[x | \\x <- T, x > 1]")
    assert e.head == Var("x")
    assert parse("[T | \\x <- T]").head == TableRef("T")


def test_string_escapes_round_trip():
    e = parse('["a\\"b", "back\\\\slash", "\\n"]')
    assert e.value == Nest(["a\"b", "back\\slash", "\n"])
    assert parse(format_expr(e)) == e


def test_round_trip_random_asts():
    for seed in range(1000):
        e = rand_expr(random.Random(seed), depth=3)
        text = format_expr(e)
        assert parse(text) == e, text
        assert format_expr(parse(text)) == text


@pytest.mark.parametrize("text", [
    "[x | \\x <- T", "grid[lat:0.01](", "[1, 2", "a +", "\"abc", "let x = T\nlet", "f[;](T)",
    "[x | ]", "project[](T)", "1 +* 2", "", "   ", "\\", "[1,,2]", "(", ")", "orderby",
])
def test_error_spans_in_bounds(text):
    with pytest.raises(ParseError) as info:
        parse(text)
    span = info.value.span
    assert 0 <= span.start <= span.end <= len(text.encode())
    assert span.line >= 1 and span.column >= 1
    assert info.value.message


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="[]()|\\<-,.;:abxT 0123456789\"+*=<>", max_size=40))
def test_parse_total_on_garbage(text):
    try:
        e = parse(text)
    except ParseError as err:
        assert 0 <= err.span.start <= err.span.end <= len(text.encode())
    else:
        assert parse(format_expr(e)) == e
