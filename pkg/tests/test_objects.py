import math
import random

import pytest

from minilisp.objects import (
    FIXNUM_MAX, FIXNUM_MIN, NIL, T, Cons, FixnumOverflowError, PrintError,
    ReadError, Subr, intern, list_to_value, print_value, read, read_all,
    structurally_equal,
)


def test_symbols_are_interned():
    assert read("foo") is read("foo")
    assert intern("bar") is read("bar")
    assert read("foo") is not read("fop")


def test_nil_and_t_are_canonical():
    assert read("nil") is NIL
    assert read("()") is NIL
    assert read("t") is T


def test_read_paper_example_shape():
    v = read("(if *bar* (+ *bar* 2) 'foo)")
    items = []
    while v is not NIL:
        items.append(v.car)
        v = v.cdr
    assert len(items) == 4
    assert items[0] is intern("if")
    assert items[1] is intern("*bar*")
    quoted = items[3]
    assert quoted.car is intern("quote")
    assert quoted.cdr.car is intern("foo")


def test_read_numbers():
    assert read("42") == 42
    assert read("-7") == -7
    assert read("2.5") == 2.5
    assert read("1e3") == 1000.0
    assert read("-2.5e-3") == -0.0025


def test_read_fixnum_range_enforced():
    assert read(str(FIXNUM_MAX)) == FIXNUM_MAX
    assert read(str(FIXNUM_MIN)) == FIXNUM_MIN
    with pytest.raises(FixnumOverflowError):
        read(str(FIXNUM_MAX + 1))


def test_read_dotted_pair_round_trips():
    v = read("(1 . 2)")
    assert v.car == 1 and v.cdr == 2
    assert print_value(v) == "(1 . 2)"


def test_read_errors_carry_position():
    with pytest.raises(ReadError) as ei:
        read('(1 2')
    assert "line 1" in str(ei.value)
    with pytest.raises(ReadError):
        read('"abc')
    with pytest.raises(ReadError):
        read(")")


def test_print_basics():
    assert print_value(2) == "2"
    assert print_value(intern("foo")) == "foo"
    lst = list_to_value([intern("foo"), 2, Cons(3, NIL)])
    assert print_value(lst) == "(foo 2 (3))"
    assert print_value(NIL) == "nil"
    assert print_value("a\"b\\c") == '"a\\"b\\\\c"'


def test_print_rejects_subr():
    subr = Subr(intern("car"), 1, 1, lambda ctx, v: v)
    with pytest.raises(PrintError):
        print_value(subr)


def test_print_special_floats():
    assert print_value(math.inf) == "1.0e+INF"
    assert print_value(-math.inf) == "-1.0e+INF"
    assert print_value(math.nan) == "0.0e+NaN"
    assert math.isinf(read("1.0e+INF"))
    assert math.isnan(read("0.0e+NaN"))


def _random_value(rng, depth):
    kind = rng.randrange(8 if depth > 0 else 6)
    if kind == 0:
        return rng.randint(FIXNUM_MIN, FIXNUM_MAX)
    if kind == 1:
        return rng.randint(-100, 100)
    if kind == 2:
        return rng.choice([0.0, 1.5, -2.25, 3.141592653589793, 1e17, -1e-9])
    if kind == 3:
        return intern(rng.choice(["foo", "bar", "+", "a-b", "x1?", "*glob*"]))
    if kind == 4:
        return "".join(rng.choice('ab"\\\n xyz') for _ in range(rng.randrange(6)))
    if kind == 5:
        return rng.choice([NIL, T])
    if kind == 6:
        items = [_random_value(rng, depth - 1) for _ in range(rng.randrange(4))]
        return list_to_value(items)
    return Cons(_random_value(rng, depth - 1), _random_value(rng, depth - 1))


def test_read_print_identity_generated():
    rng = random.Random(20240817)
    for _ in range(1200):
        v = _random_value(rng, 3)
        text = print_value(v)
        again = read(text)
        assert structurally_equal(v, again), text
        assert print_value(again) == text


def test_read_all_multiple_forms():
    forms = read_all("(a b) ; comment\n 12 \"s\"")
    assert len(forms) == 3
    assert forms[1] == 12
