import os
import re

import pytest

from conftest import needs_cc

from minilisp.mln import load_unit, unload_unit
from minilisp.native import (
    NativeError, ToolchainMissingError, emit_native_source, entry_field,
    function_symbol, native_compile, native_exec, sanitize_c_name,
    write_native_unit,
)
from minilisp.objects import (
    Cons, FixnumOverflowError, NIL, UserError, WrongTypeError, intern,
    print_value,
)
from minilisp.pipeline import SpeedConfig, compile_unit
from minilisp.primitives import REGISTRY_ORDER, ExecState, fresh_env
from minilisp.shim import shim_header_path
from minilisp.vm import vm_exec


FOO = "(setq *bar* nil)\n(defun foo () (if *bar* (+ *bar* 2) 'foo))"


def test_symbol_naming_scheme():
    assert function_symbol("foo") == "F666f6f_foo"
    assert entry_field("symbol-value") == \
        "R73796d626f6c2d76616c7565_symbol_value"
    assert entry_field("+") == "R2b_"
    assert sanitize_c_name("1-") == "1_"


def test_symbol_naming_injective_over_registry():
    names = [entry_field(s.name.name) for s in REGISTRY_ORDER]
    assert len(names) == len(set(names))


def test_shim_header_struct_matches_registry_order():
    header = shim_header_path().read_text()
    struct = header.split("struct mln_freloc_table {", 1)[1].split("};", 1)[0]
    fields = re.findall(r"\b(R[0-9a-f]+_[A-Za-z0-9_]*)", struct)
    assert fields == [entry_field(s.name.name) for s in REGISTRY_ORDER]


def test_emitted_source_matches_unit_shape():
    cu = compile_unit(FOO, speed=3, debug=1, path="foo.mel")
    text = emit_native_source(cu, SpeedConfig.from_speed(3, 1))
    # required unit symbols
    assert "MLValue d_reloc[" in text
    assert "struct mln_freloc_table *freloc_link_table;" in text
    assert "const char *text_data_reloc(void)" in text
    assert "MLValue top_level_run(void)" in text
    assert "MLValue F666f6f_foo(void)" in text
    # three basic blocks in the lowering of foo
    for label in ("bb_0:", "bb_1:", "bb_2:"):
        assert label in text
    # globals are read through the symbol-value entry
    assert "freloc_link_table->R73796d626f6c2d76616c7565_symbol_value" in text
    # the nil branch returns the constant directly
    assert "return d_reloc[2];" in text
    # spread-call arguments live in a dedicated array
    assert "arr_1[0]" in text and "arr_1[1]" in text
    # debug level 1 interleaves annotations
    assert "/* Lisp function: foo */" in text
    assert "/* (byte-varref *bar*) */" in text


def test_emission_deterministic_and_debug_free_of_comments():
    a = emit_native_source(compile_unit(FOO, speed=3, path="foo.mel"),
                           SpeedConfig.from_speed(3))
    b = emit_native_source(compile_unit(FOO, speed=3, path="foo.mel"),
                           SpeedConfig.from_speed(3))
    assert a == b
    assert "/* (byte-" not in a


def test_constant_only_function_has_no_entry_table_references():
    cu = compile_unit("(defun k () 42)", speed=2, path="k.mel")
    text = emit_native_source(cu, SpeedConfig.from_speed(2))
    body = text.split("MLValue F6b_k(void)")[1].split("MLValue top_level")[0]
    assert "freloc_link_table" not in body


@needs_cc
def test_native_compile_failure_surfaces_diagnostics(tmp_path):
    with pytest.raises(NativeError) as ei:
        native_compile("this is not C;", str(tmp_path / "bad.so"),
                       SpeedConfig.from_speed(1))
    assert "error" in str(ei.value).lower()


def test_missing_toolchain_error(monkeypatch, tmp_path):
    monkeypatch.setenv("MLN_CC", "/nonexistent/compiler-xyz")
    monkeypatch.setattr("shutil.which", lambda *_: None)
    import minilisp.native as native_mod
    monkeypatch.setattr(native_mod.shutil, "which", lambda *_: None)
    monkeypatch.delenv("MLN_CC")
    with pytest.raises(ToolchainMissingError):
        native_compile("int x;", str(tmp_path / "x.so"),
                       SpeedConfig.from_speed(0))


@needs_cc
def load_native(tmp_path, src, speed, name="unit"):
    cu = compile_unit(src, speed=speed, path=name + ".mel")
    mln = str(tmp_path / ("%s-%d.mln" % (name, speed)))
    write_native_unit(cu, mln, SpeedConfig.from_speed(speed))
    env = fresh_env()
    ctx = ExecState(env)
    lu = load_unit(mln, env, ctx)
    return lu, env, ctx


@needs_cc
def test_foo_native_both_branches(tmp_path):
    lu, env, ctx = load_native(tmp_path, FOO, 3, "foo")
    assert native_exec(lu, intern("foo"), [], env, ctx) is intern("foo")
    env.values[intern("*bar*")] = 10
    assert native_exec(lu, intern("foo"), [], env, ctx) == 12


@needs_cc
def test_native_error_classes_cross_boundary(tmp_path):
    src = """
    (defun boom () (error "native boom"))
    (defun badcar (x) (car x))
    (defun over (x) (+ x 1))
    """
    lu, env, ctx = load_native(tmp_path, src, 2, "errs")
    with pytest.raises(UserError):
        native_exec(lu, intern("boom"), [], env, ctx)
    with pytest.raises(WrongTypeError):
        native_exec(lu, intern("badcar"), [5], env, ctx)
    from minilisp.objects import FIXNUM_MAX
    with pytest.raises(FixnumOverflowError):
        native_exec(lu, intern("over"), [FIXNUM_MAX], env, ctx)
    # the environment stays usable after signals
    assert native_exec(lu, intern("badcar"), [NIL], env, ctx) is NIL


@needs_cc
def test_calling_unexported_name_fails(tmp_path):
    lu, env, ctx = load_native(tmp_path, "(defun f () 1)", 2, "one")
    from minilisp.objects import UnboundFunctionError
    with pytest.raises(UnboundFunctionError):
        native_exec(lu, intern("nosuch"), [], env, ctx)


@needs_cc
def test_native_trampoline_respects_redefinition(tmp_path):
    src = """
    (defun g (x) (+ x 1))
    (defun callg (x) (g x))
    """
    # below maximum optimization sibling calls stay on the trampoline
    lu, env, ctx = load_native(tmp_path, src, 2, "tramp")
    assert native_exec(lu, intern("callg"), [1], env, ctx) == 2
    cu = compile_unit("(defun g (x) (* x 10))", speed=2)
    vm_exec(cu, intern("g"), [1], env, ctx=ctx)
    assert native_exec(lu, intern("callg"), [1], env, ctx) == 10


@needs_cc
def test_native_intra_unit_calls_bypass_redefinition_at_speed_three(
        tmp_path):
    src = """
    (defun g (x) (+ x 1))
    (defun callg (x) (g x))
    """
    lu, env, ctx = load_native(tmp_path, src, 3, "intra")
    assert native_exec(lu, intern("callg"), [1], env, ctx) == 2
    cu = compile_unit("(defun g (x) (* x 10))", speed=2)
    vm_exec(cu, intern("g"), [1], env, ctx=ctx)
    # the sibling call was compiled as a direct call inside the unit
    assert native_exec(lu, intern("callg"), [1], env, ctx) == 2


@needs_cc
def test_native_unload_lifecycle(tmp_path):
    lu, env, ctx = load_native(tmp_path, "(defun h (x) x)", 2, "un")
    unload_unit(lu, env)
    assert intern("h") not in env.functions


@needs_cc
def test_structure_round_trip_and_mutation_inside_call(tmp_path):
    src = """
    (defun swap-first-two (l)
      (let ((a (car l)) (b (car (cdr l))))
        (setcar l b)
        (setcar (cdr l) a)
        l))
    """
    lu, env, ctx = load_native(tmp_path, src, 3, "swap")
    result = native_exec(lu, intern("swap-first-two"),
                         [Cons(1, Cons(2, Cons(3, NIL)))], env, ctx)
    assert print_value(result) == "(2 1 3)"


def test_abi_round_trip_is_bit_identical():
    from minilisp.native import NativeRuntime
    from minilisp.objects import list_to_value
    rt = NativeRuntime(fresh_env())
    samples = [NIL, intern("t"), 0, -1, 42, -(1 << 59), (1 << 59),
               intern("zig"), 2.5, "text",
               list_to_value([1, intern("a"), Cons(2, 3)])]
    for v in samples:
        w = rt.to_shim(v)
        assert rt.to_shim(rt.from_shim(w)) == w
    # host -> shim -> host returns the identical object for conses
    c = Cons(1, Cons(2, NIL))
    w = rt.to_shim(c)
    assert rt.from_shim(w) is c


def test_freloc_table_is_complete_before_any_unit_runs():
    import ctypes
    from minilisp.native import NativeRuntime
    rt = NativeRuntime(fresh_env())
    for name, _ in rt.freloc._fields_:
        fn = getattr(rt.freloc, name)
        assert ctypes.cast(fn, ctypes.c_void_p).value, name


@needs_cc
def test_native_speed3_not_slower_than_speed0(tmp_path):
    # storage layout and optimization levels must not regress performance
    from minilisp.bench import _Subject, spec_by_name, time_subject
    spec = spec_by_name("fibn")
    iterations = spec.iterations * 20
    slow = _Subject(spec, "native", 0, workdir=str(tmp_path))
    fast = _Subject(spec, "native", 3, workdir=str(tmp_path))
    t0 = min(time_subject(slow, iterations))
    t3 = min(time_subject(fast, iterations))
    assert t3 <= t0 * 1.05


@needs_cc
def test_native_agreement_with_vm_on_generated_programs(tmp_path):
    import random
    from minilisp.objects import read
    from tests_support.proggen import generate_program_text
    from tests_support.treewalk import outcome

    rng = random.Random(777)
    checked = 0
    for i in range(25):
        text, entry, argtexts = generate_program_text(rng)
        speed = rng.choice((0, 1, 2, 3))

        def run_vm():
            cu = compile_unit(text, speed=speed)
            env = fresh_env()
            ctx = ExecState(env, max_depth=4000)
            return vm_exec(cu, intern(entry), [read(a) for a in argtexts],
                           env, ctx=ctx)

        def run_native():
            cu = compile_unit(text, speed=speed, path="gen%d.mel" % i)
            mln = str(tmp_path / ("gen%d.mln" % i))
            write_native_unit(cu, mln, SpeedConfig.from_speed(speed))
            env = fresh_env()
            ctx = ExecState(env, max_depth=4000)
            lu = load_unit(mln, env, ctx)
            return native_exec(lu, intern(entry),
                               [read(a) for a in argtexts], env, ctx)

        want = outcome(run_vm)
        got = outcome(run_native)
        assert got == want, "case %d speed %d:\n%s\nnative=%r vm=%r" % (
            i, speed, text, got, want)
        checked += 1
    assert checked == 25
