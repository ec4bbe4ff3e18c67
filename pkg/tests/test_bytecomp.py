import pytest

from minilisp.bytecomp import (
    LapInsn, LapProgram, MalformedLapError, OP_CALL, OP_CONSTANT, OP_GOTO,
    OP_GOTO_IF_NIL, OP_RETURN, OP_TAG, byte_compile, compile_text,
    stack_depth_analysis,
)
from minilisp.objects import CompileError, NIL, intern


def _opnames(prog):
    return [i.name for i in prog.insns]


def foo_unit():
    return compile_text("(defun foo () (if *bar* (+ *bar* 2) 'foo))")


def test_foo_lap_sequence_is_exact():
    prog = foo_unit().functions[intern("foo")]
    assert _opnames(prog) == [
        "byte-varref",
        "byte-goto-if-nil",
        "byte-varref",
        "byte-constant",
        "byte-plus",
        "byte-return",
        "TAG",
        "byte-constant",
        "byte-return",
    ]
    consts = prog.constants
    assert consts[prog.insns[0].arg] is intern("*bar*")
    assert consts[prog.insns[3].arg] == 2
    assert consts[prog.insns[7].arg] is intern("foo")
    # the jump lands on the single TAG
    assert prog.insns[1].arg == prog.insns[6].arg
    assert prog.max_depth == 2


def test_foo_depth_map_matches_lowering():
    prog = foo_unit().functions[intern("foo")]
    depths = stack_depth_analysis(prog)
    assert depths[0] == 0          # entry
    assert depths[1] == 1          # after varref
    assert depths[3] == 1          # second varref pushed at depth 0
    assert depths[4] == 2          # after byte-constant 2
    assert depths[5] == 1          # after byte-plus
    assert max(depths.values()) == prog.max_depth == 2


def test_identity_function_shape():
    prog = compile_text("(defun id (x) x)").functions[intern("id")]
    assert _opnames(prog) == ["byte-stack-ref", "byte-return"]
    assert prog.insns[0].arg == 0
    assert prog.max_depth == 1
    assert prog.n_locals == 1


def test_unknown_function_goes_through_byte_call():
    prog = compile_text("(defun f () (g 1 2))").functions[intern("f")]
    assert _opnames(prog) == [
        "byte-constant", "byte-constant", "byte-constant",
        "byte-call", "byte-return",
    ]
    assert prog.constants[prog.insns[0].arg] is intern("g")
    assert prog.insns[3].arg == 2


def test_trampoline_for_primitives_without_opcode():
    prog = compile_text("(defun f (a b) (<= a b))").functions[intern("f")]
    assert "byte-call" in _opnames(prog)
    assert prog.constants[prog.insns[0].arg] is intern("<=")


def test_empty_body_depths():
    prog = compile_text("(defun f () )").functions[intern("f")]
    assert _opnames(prog) == ["byte-constant", "byte-return"]
    depths = stack_depth_analysis(prog)
    assert [depths[i] for i in sorted(depths)] == [0, 1]


def test_duplicate_tag_and_missing_target_rejected():
    with pytest.raises(MalformedLapError):
        LapProgram(intern("dup"), 0, 0, [NIL], [
            LapInsn(OP_TAG, 0), LapInsn(OP_TAG, 0),
            LapInsn(OP_CONSTANT, 0), LapInsn(OP_RETURN),
        ])
    with pytest.raises(MalformedLapError):
        LapProgram(intern("missing"), 0, 0, [NIL], [
            LapInsn(OP_GOTO, 5),
        ])


def test_depth_mismatch_detected():
    # hand-written LAP whose two paths join at unequal depth
    name = intern("bad")
    insns = [
        LapInsn(OP_CONSTANT, 0),
        LapInsn(OP_GOTO_IF_NIL, 0),
        LapInsn(OP_CONSTANT, 0),      # fallthrough pushes an extra value
        LapInsn(OP_TAG, 0),
        LapInsn(OP_CONSTANT, 0),
        LapInsn(OP_RETURN),
    ]
    with pytest.raises(MalformedLapError):
        LapProgram(name, 0, 0, [NIL], insns)


def test_depth_determinism_over_generated_sources():
    # byte_compile output always passes depth analysis
    from tests_support.proggen import generate_program_forms
    import random
    rng = random.Random(7)
    for _ in range(60):
        forms, _ = generate_program_forms(rng)
        unit = byte_compile(forms)
        for prog in unit.functions.values():
            depths = stack_depth_analysis(prog)
            assert max(depths.values()) == prog.max_depth


def test_constant_deduplication():
    prog = compile_text("(defun f () (cons 'foo (cons 'foo 7)))")
    prog = prog.functions[intern("f")]
    names = [c for c in prog.constants]
    assert names.count(intern("foo")) == 1


def test_one_and_one_float_are_distinct_constants():
    prog = compile_text("(defun f () (cons 1 1.0))").functions[intern("f")]
    assert 1 in prog.constants
    assert any(c == 1.0 and type(c) is float for c in prog.constants)


def test_compile_errors():
    with pytest.raises(CompileError):
        compile_text("(defun f () (lambda (x) x))")
    with pytest.raises(CompileError):
        compile_text("(defun f () (car 1 2))")      # known-arity primitive
    with pytest.raises(CompileError):
        compile_text("(defun f (a b c d e f g h i) a)")   # arity cap
    with pytest.raises(CompileError):
        compile_text("(defun f () (setq nil 1))")


def test_and_or_desugar_without_double_eval():
    # (or (g) 5) must call g exactly once; checked later by execution tests
    unit = compile_text("(defun f () (or (g) 5))")
    prog = unit.functions[intern("f")]
    callcount = sum(1 for i in prog.insns if i.code == OP_CALL)
    assert callcount == 1


def test_lap_dump_format():
    prog = foo_unit().functions[intern("foo")]
    dump = prog.dump()
    lines = dump.splitlines()
    assert lines[0] == "(byte-varref *bar*)"
    assert lines[1].startswith("(byte-goto-if-nil TAG ")
    assert lines[4] == "(byte-plus)"
    assert "(byte-constant foo)" in lines
