import pytest

from minilisp.bytecomp import compile_text
from minilisp.limple import (
    CALL, CALL_OPS, DIRECT_CALL, RETURN, SET, SETIMM,
)
from minilisp.limplify import limplify
from minilisp.objects import NIL, intern
from minilisp.optimize import (
    call_optim, dead_code, forward_propagate, rewrite_hints, tre,
)
from minilisp.pipeline import SpeedConfig, compile_unit
from minilisp.primitives import fresh_env
from minilisp.ssa import ssa_convert
from minilisp.vm import vm_exec


def lfunc_for(src, name, speed_prep=()):
    unit = compile_text(src)
    f = ssa_convert(limplify(unit.functions[intern(name)]))
    return f, set(unit.functions.keys())


def ops_of(f):
    return [i.op for _, i in f.all_insns()]


def insns_of(f, op):
    return [i for _, i in f.all_insns() if i.op == op]


def test_fold_constant_addition():
    f, _ = lfunc_for("(defun k () (+ 1 2))", "k")
    forward_propagate(f)
    # the call was replaced by a setimm of the folded value
    assert not any(op in CALL_OPS for op in ops_of(f))
    setimms = insns_of(f, SETIMM)
    assert any(i.imm == 3 for i in setimms)
    ret = insns_of(f, RETURN)[0]
    assert ret.args[0].const_vld and ret.args[0].constant == 3


def test_fold_skips_signalling_evaluations():
    f, _ = lfunc_for("(defun k () (car 5))", "k")
    forward_propagate(f)
    # car of a fixnum signals, so the call must survive to run time
    assert any(op in CALL_OPS for op in ops_of(f))


def test_fold_skips_impure_calls():
    f, _ = lfunc_for("(defun k () (cons 1 2))", "k")
    forward_propagate(f)
    assert any(op in CALL_OPS for op in ops_of(f))
    # but the return type still propagates
    call = [i for _, i in f.all_insns() if i.op in CALL_OPS][0]
    assert call.dst.type == "cons"


def test_phi_agreement_and_disagreement():
    src = """
    (defun g ()
      (let ((x 0))
        (if *p* (setq x 5) (setq x 5))
        x))
    (defun h ()
      (let ((x 0))
        (if *p* (setq x 5) (setq x 7))
        x))
    """
    unit = compile_text(src)
    g = ssa_convert(limplify(unit.functions[intern("g")]))
    forward_propagate(g)
    ret = insns_of(g, RETURN)[0]
    assert ret.args[0].const_vld and ret.args[0].constant == 5
    h = ssa_convert(limplify(unit.functions[intern("h")]))
    forward_propagate(h)
    ret = insns_of(h, RETURN)[0]
    assert not ret.args[0].const_vld


def test_propagation_iteration_bound():
    src = """
    (defun chain (n)
      (let ((a 1))
        (let ((b a)) (let ((c b)) (let ((d c)) (+ d n))))))
    """
    f, _ = lfunc_for(src, "chain")
    forward_propagate(f)      # the convergence assertion lives inside


def test_call_optim_primitive_vs_intra_unit():
    src = """
    (defun callee (x) x)
    (defun caller (l x) (length l) (callee x))
    """
    unit = compile_text(src)
    names = set(unit.functions.keys())

    def build(speed):
        f = ssa_convert(limplify(unit.functions[intern("caller")]))
        forward_propagate(f)
        call_optim(f, names, SpeedConfig.from_speed(speed))
        return f

    f2 = build(2)
    direct = {i.f.name for i in insns_of(f2, DIRECT_CALL)}
    assert "length" in direct
    assert "callee" not in direct
    trampolines = [i for i in insns_of(f2, CALL) if i.f is intern("funcall")]
    assert trampolines, "sibling call must stay on the trampoline at speed 2"

    f3 = build(3)
    direct = {i.f.name for i in insns_of(f3, DIRECT_CALL)}
    assert "length" in direct and "callee" in direct


def test_call_optim_unknown_callee_untouched():
    f, names = lfunc_for("(defun f () (mystery 1))", "f")
    forward_propagate(f)
    call_optim(f, names, SpeedConfig.from_speed(3))
    assert [i for i in insns_of(f, CALL) if i.f is intern("funcall")]


def test_call_optim_self_recursion():
    src = "(defun selfy (n) (if (= n 0) 0 (+ 1 (selfy (1- n)))))"
    f, names = lfunc_for(src, "selfy")
    forward_propagate(f)
    call_optim(f, names, SpeedConfig.from_speed(3))
    assert any(i.f is intern("selfy") for i in insns_of(f, DIRECT_CALL))


def test_dead_code_removes_unused_setimm():
    f, _ = lfunc_for("(defun k (x) (progn 7 x))", "k")
    # hand-plant an unused assignment
    from minilisp.limple import MVar, insn_setimm
    bb = f.blocks[f.entry]
    dead = MVar(slot=2, id=f.new_mvar_id())
    bb.insns.insert(0, insn_setimm(dead, 7))
    dead_code(f)
    assert not any(i.op == SETIMM and i.imm == 7 for _, i in f.all_insns())


def test_dead_code_chain_two_rounds():
    from minilisp.limple import MVar, insn_set, insn_setimm
    f, _ = lfunc_for("(defun k (x) x)", "k")
    bb = f.blocks[f.entry]
    a = MVar(slot=1, id=f.new_mvar_id())
    b = MVar(slot=2, id=f.new_mvar_id())
    bb.insns.insert(0, insn_setimm(a, 1))
    bb.insns.insert(1, insn_set(b, a))
    dead_code(f)
    live_ids = {i.dst.id for _, i in f.all_insns() if i.dst is not None}
    assert a.id not in live_ids and b.id not in live_ids
    assert not any(i.op == SETIMM and i.imm == 1 for _, i in f.all_insns())


def test_dead_code_keeps_calls_drops_destination():
    f, _ = lfunc_for("(defun k (l) (progn (setcar l 1) 9))", "k")
    forward_propagate(f)
    dead_code(f)
    calls = [i for _, i in f.all_insns() if i.op in CALL_OPS]
    assert calls, "call with side effects must survive"
    assert all(i.dst is None for i in calls
               if i.f is intern("setcar") or i.f is intern("funcall"))


def test_tre_rewrites_tail_call_to_jump():
    src = "(defun loop-n (n) (if (= n 0) 'done (loop-n (1- n))))"
    unit = compile_text(src)
    names = set(unit.functions.keys())
    cfg = SpeedConfig.from_speed(3)
    f = ssa_convert(limplify(unit.functions[intern("loop-n")]))
    forward_propagate(f)
    call_optim(f, names, cfg)
    dead_code(f)
    assert tre(f) is True
    ssa_convert(f)
    assert not any(i.f is intern("loop-n") for _, i in f.all_insns()
                   if i.op in CALL_OPS)


def test_tre_leaves_non_tail_recursion():
    src = "(defun fibn-rec (n) (if (< n 2) n (+ (fibn-rec (- n 1)) (fibn-rec (- n 2)))))"
    unit = compile_text(src)
    names = set(unit.functions.keys())
    cfg = SpeedConfig.from_speed(3)
    f = ssa_convert(limplify(unit.functions[intern("fibn-rec")]))
    forward_propagate(f)
    call_optim(f, names, cfg)
    dead_code(f)
    assert tre(f) is False


def test_tre_leaves_non_recursive():
    f, _ = lfunc_for("(defun f (x) (1+ x))", "f")
    assert tre(f) is False


def test_hint_rewrite_produces_assume_then_propagates():
    src = "(defun f (l) (car (comp-hint-cons l)))"
    unit = compile_text(src)
    f = ssa_convert(limplify(unit.functions[intern("f")]))
    rewrite_hints(f)
    from minilisp.limple import ASSUME
    assert any(i.op == ASSUME and i.typ == "cons" for _, i in f.all_insns())
    forward_propagate(f)
    car_calls = [i for _, i in f.all_insns()
                 if i.op in CALL_OPS and i.f is intern("car")]
    assert car_calls and car_calls[0].args[0].type == "cons"
    dead_code(f)
    assert not any(i.op == ASSUME for _, i in f.all_insns())


def test_hints_stay_as_assertions_below_speed_three():
    cu2 = compile_unit("(defun f (x) (1+ (comp-hint-fixnum x)))", speed=2)
    env = fresh_env()
    from minilisp.objects import WrongTypeError, Cons
    with pytest.raises(WrongTypeError):
        vm_exec(cu2, intern("f"), [Cons(1, NIL)], env)
    env2 = fresh_env()
    assert vm_exec(cu2, intern("f"), [4], env2) == 5
