import random

import pytest

from minilisp.limple import serialize_unit
from minilisp.mln import (
    KIND_LIMPLE, LiveReferenceError, MlnError, is_native_function, load_unit,
    parse_mln_bytes, unit_to_mln_bytes, unload_unit, write_mln_bytes,
    write_unit,
)
from minilisp.objects import UserError, intern, structurally_equal
from minilisp.pipeline import compile_unit
from minilisp.primitives import ExecState, fresh_env


FOO = "(setq *bar* nil)\n(defun foo () (if *bar* (+ *bar* 2) 'foo))"


def write_foo(tmp_path, speed=2, src=FOO, name="foo.mln"):
    cu = compile_unit(src, speed=speed, path=name)
    path = tmp_path / name
    write_unit(str(path), cu)
    return str(path), cu


def test_load_and_call(tmp_path):
    path, _ = write_foo(tmp_path)
    env = fresh_env()
    ctx = ExecState(env)
    lu = load_unit(path, env, ctx)
    env.values[intern("*bar*")] = 10
    fn = env.lookup_function(intern("foo"))
    assert ctx.call_function(fn, []) == 12
    assert intern("foo") in lu.installed


def test_constants_round_trip(tmp_path):
    src = "(defun k () (cons 'alpha (cons 2.5 \"txt\")))"
    path, cu = write_foo(tmp_path, src=src, name="k.mln")
    env = fresh_env()
    lu = load_unit(path, env)
    assert len(lu.reloc_values) == len(cu.data_relocs)
    for a, b in zip(lu.reloc_values, cu.data_relocs):
        assert structurally_equal(a, b)


def test_hash_mutation_fuzz_always_rejects(tmp_path):
    path, _ = write_foo(tmp_path)
    with open(path, "rb") as fh:
        data = bytearray(fh.read())
    rng = random.Random(424242)
    env = fresh_env()
    baseline = env.snapshot()
    rejected = 0
    for _ in range(100):
        pos = rng.randrange(8, len(data))
        old = data[pos]
        new = rng.randrange(256)
        while new == old:
            new = rng.randrange(256)
        data[pos] = new
        mutated = tmp_path / "mutant.mln"
        mutated.write_bytes(bytes(data))
        with pytest.raises(MlnError):
            load_unit(str(mutated), env)
        assert env.snapshot() == baseline
        rejected += 1
        data[pos] = old
    assert rejected == 100


def test_abi_mismatch_rejected(tmp_path):
    cu = compile_unit(FOO, speed=2)
    payload = serialize_unit(cu)
    stale = write_mln_bytes(KIND_LIMPLE, "0" * 64, cu.constants_text(),
                            payload)
    p = tmp_path / "stale.mln"
    p.write_bytes(stale)
    env = fresh_env()
    with pytest.raises(MlnError):
        load_unit(str(p), env)


def test_transactional_load_on_top_level_error(tmp_path):
    src = '(defun f () 1)\n(error "boom at load")'
    cu = compile_unit(src, speed=2)
    p = tmp_path / "boom.mln"
    p.write_bytes(unit_to_mln_bytes(cu))
    env = fresh_env()
    before = env.snapshot()
    with pytest.raises(UserError):
        load_unit(str(p), env)
    assert env.snapshot() == before
    assert intern("f") not in env.functions


def test_load_never_call_unload_ok(tmp_path):
    path, _ = write_foo(tmp_path)
    env = fresh_env()
    lu = load_unit(path, env)
    unload_unit(lu, env)
    assert intern("foo") not in env.functions
    assert lu.unloaded


def test_redefinition_makes_unload_ok(tmp_path):
    path_a, _ = write_foo(tmp_path, src="(defun f (x) (+ x 1))",
                          name="a.mln")
    path_b, _ = write_foo(tmp_path, src="(defun f (x) (* x 10))",
                          name="b.mln")
    env = fresh_env()
    ctx = ExecState(env)
    lu_a = load_unit(path_a, env, ctx)
    fn_a = env.lookup_function(intern("f"))
    assert ctx.call_function(fn_a, [1]) == 2       # a's f was even called
    lu_b = load_unit(path_b, env, ctx)
    assert ctx.call_function(env.lookup_function(intern("f")), [1]) == 10
    unload_unit(lu_a, env)                          # a's f is not installed
    assert ctx.call_function(env.lookup_function(intern("f")), [2]) == 20


def test_unload_refused_while_definition_live(tmp_path):
    path, _ = write_foo(tmp_path, src="(defun g (x) x)", name="g.mln")
    env = fresh_env()
    ctx = ExecState(env)
    lu = load_unit(path, env, ctx)
    ctx.call_function(env.lookup_function(intern("g")), [5])
    with pytest.raises(LiveReferenceError) as ei:
        unload_unit(lu, env)
    assert "g" in ei.value.names
    assert intern("g") in env.functions


def test_double_load_later_definition_wins(tmp_path):
    path, _ = write_foo(tmp_path)
    env = fresh_env()
    lu1 = load_unit(path, env)
    first = env.functions[intern("foo")]
    lu2 = load_unit(path, env)
    second = env.functions[intern("foo")]
    assert first is not second
    assert lu2.installed[intern("foo")] is second


def test_is_native_function_predicate(tmp_path):
    path, _ = write_foo(tmp_path)
    env = fresh_env()
    load_unit(path, env)
    assert is_native_function(env.functions[intern("foo")])
    assert not is_native_function(env.functions[intern("car")])
    # plain byte-compiled functions are not "native loaded"
    from minilisp.baseline import lap_exec
    from minilisp.bytecomp import compile_text
    unit = compile_text("(defun plain () 1)")
    lap_exec(unit, intern("plain"), [], env)
    assert not is_native_function(env.functions[intern("plain")])


def test_mln_layout_fields(tmp_path):
    path, cu = write_foo(tmp_path)
    with open(path, "rb") as fh:
        data = fh.read()
    assert data[:4] == b"MLN1"
    mln = parse_mln_bytes(data)
    assert mln.kind == KIND_LIMPLE
    assert mln.constants_text == cu.constants_text()
