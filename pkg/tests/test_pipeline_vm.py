import random

import pytest

from minilisp.baseline import lap_exec
from minilisp.bytecomp import compile_text
from minilisp.limple import CALL_OPS, serialize_unit
from minilisp.objects import NIL, intern, read
from minilisp.pipeline import SpeedConfig, compile_unit
from minilisp.primitives import ExecState, fresh_env
from minilisp.vm import UnitRuntime, inline_primitive_table, vm_exec

from tests_support.proggen import generate_program_text
from tests_support.treewalk import outcome


def test_speed_config_table():
    rows = {s: SpeedConfig.from_speed(s) for s in range(4)}
    assert [rows[s].propagate for s in range(4)] == [False, False, True, True]
    assert [rows[s].call_optim for s in range(4)] == [False, False, True, True]
    assert [rows[s].call_optim_intra_cu for s in range(4)] == \
        [False, False, False, True]
    assert [rows[s].dead_code for s in range(4)] == [False, False, True, True]
    assert [rows[s].tre for s in range(4)] == [False, False, False, True]
    assert [rows[s].advanced_frame_layout for s in range(4)] == \
        [False, True, True, True]
    assert [rows[s].backend_opt_level for s in range(4)] == [0, 1, 2, 3]


def test_invalid_speed_rejected():
    from minilisp.objects import CompileError
    with pytest.raises(CompileError):
        SpeedConfig.from_speed(4)
    with pytest.raises(CompileError):
        SpeedConfig.from_speed(2, debug=5)


FOO = "(defun foo () (if *bar* (+ *bar* 2) 'foo))"


def test_foo_preserved_across_speeds():
    for speed in range(4):
        cu = compile_unit(FOO, speed=speed)
        for bar, want in ((10, 12), (NIL, intern("foo"))):
            env = fresh_env()
            env.values[intern("*bar*")] = bar
            assert vm_exec(cu, intern("foo"), [], env) == want or \
                vm_exec(cu, intern("foo"), [], env) is want


def test_unit_serialization_determinism_across_pipeline_runs():
    for speed in range(4):
        a = serialize_unit(compile_unit(FOO, speed=speed))
        b = serialize_unit(compile_unit(FOO, speed=speed))
        assert a == b


def test_propagation_strips_k_to_setimm_return():
    for speed in (2, 3):
        cu = compile_unit("(defun k () (+ 1 2))", speed=speed)
        k = cu.functions_by_name[intern("k")]
        ops = [i.op for _, i in k.all_insns()]
        assert not any(op in CALL_OPS for op in ops)
        assert set(ops) <= {"setimm", "return", "set", "comment"}
    cu0 = compile_unit("(defun k () (+ 1 2))", speed=0)
    k0 = cu0.functions_by_name[intern("k")]
    assert any(i.op in CALL_OPS for _, i in k0.all_insns())


def test_advanced_vs_basic_layout_same_results():
    src = """
    (defun mix (a b)
      (let ((l (list a b 3)))
        (+ (car l) (length l) (if (> a b) a b))))
    """
    cu = compile_unit(src, speed=1)
    env1, env2 = fresh_env(), fresh_env()
    adv = vm_exec(cu, intern("mix"), [10, 4], env1)
    basic = vm_exec(cu, intern("mix"), [10, 4], env2, force_basic=True)
    assert adv == basic == 10 + 3 + 10


def test_inline_primitive_table_contents():
    table = inline_primitive_table()
    assert set(table) == {"car", "cdr", "setcar", "setcdr", "1+", "1-",
                          "negation"}
    assert table["car"] == "cons"
    assert table["1+"] == "fixnum"


def test_elided_checks_monotone_with_speed():
    src = """
    (defun inc-all (l)
      (let ((res l))
        (while l
          (let ((c (comp-hint-cons l)))
            (setcar c (1+ (car c)))
            (setq l (cdr c))))
        res))
    """
    counts = []
    for speed in range(4):
        cu = compile_unit(src, speed=speed)
        rt = UnitRuntime(cu)
        counts.append(rt.elided_sites())
    assert counts == sorted(counts)
    assert counts[3] > counts[0]


def test_hint_assertions_execute_below_speed_three():
    src = "(defun f (l) (car (comp-hint-cons l)))"
    from minilisp.objects import Cons
    for speed, expect_checks in ((2, True), (3, False)):
        cu = compile_unit(src, speed=speed)
        env = fresh_env()
        ctx = ExecState(env)
        assert vm_exec(cu, intern("f"), [Cons(9, NIL)], env, ctx=ctx) == 9
        assert (ctx.hint_checks > 0) == expect_checks


def test_tre_depth_bounded_vs_budget_exhaustion():
    src = """
    (defun listlen-tc (l n) (if l (listlen-tc (cdr l) (1+ n)) n))
    (defun mk (n)
      (let ((l nil))
        (while (> n 0) (setq l (cons n l)) (setq n (1- n)))
        l))
    """
    cu3 = compile_unit(src, speed=3)
    env = fresh_env()
    ctx = ExecState(env, max_depth=10_000)
    lst = vm_exec(cu3, intern("mk"), [50_000], env, ctx=ctx)
    before = ctx.peak_depth
    assert vm_exec(cu3, intern("listlen-tc"), [lst, 0], env, ctx=ctx) == 50_000
    assert ctx.peak_depth <= max(before, 2)

    from minilisp.objects import DepthExhaustedError
    cu2 = compile_unit(src, speed=2)
    env2 = fresh_env()
    ctx2 = ExecState(env2, max_depth=10_000)
    lst2 = vm_exec(cu2, intern("mk"), [50_000], env2, ctx=ctx2)
    with pytest.raises(DepthExhaustedError):
        vm_exec(cu2, intern("listlen-tc"), [lst2, 0], env2, ctx=ctx2)


def run_lap_outcome(text, entry, argtexts):
    def thunk():
        unit = compile_text(text)
        env = fresh_env()
        ctx = ExecState(env, max_depth=4000)
        return lap_exec(unit, intern(entry),
                        [read(a) for a in argtexts], env, ctx=ctx)
    return outcome(thunk)


def run_vm_outcome(text, entry, argtexts, speed):
    def thunk():
        cu = compile_unit(text, speed=speed)
        env = fresh_env()
        ctx = ExecState(env, max_depth=4000)
        return vm_exec(cu, intern(entry),
                       [read(a) for a in argtexts], env, ctx=ctx)
    return outcome(thunk)


def test_differential_lap_vs_vm_sample():
    # the full 1000-case sweep lives in the acceptance suite; this is the
    # fast regression version
    rng = random.Random(20240818)
    for i in range(120):
        text, entry, argtexts = generate_program_text(rng)
        want = run_lap_outcome(text, entry, argtexts)
        for speed in range(4):
            got = run_vm_outcome(text, entry, argtexts, speed)
            assert got == want, "case %d speed %d:\n%s\nvm=%r lap=%r" % (
                i, speed, text, got, want)
