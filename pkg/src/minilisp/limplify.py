"""Lifting LAP into LIMPLE: stack manipulations become m-var assignments,
labels and jumps split the instruction stream into basic blocks.

Slot numbering: locals (arguments first, then let slots) occupy slots
0..n_locals-1; the operand-stack cell at depth d becomes slot n_locals+d.
Arguments are live in slots 0..arity-1 on entry.
"""

from __future__ import annotations

from .bytecomp import (
    OP_ADD1, OP_CALL, OP_CAR, OP_CDR, OP_CONS, OP_CONSTANT, OP_DISCARD,
    OP_DUP, OP_EQ, OP_EQLSIGN, OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL,
    OP_GTR, OP_LSS, OP_MINUS, OP_MULT, OP_NOT, OP_PLUS, OP_QUO, OP_RETURN,
    OP_SETCAR, OP_SETCDR, OP_STACK_REF, OP_STACK_SET, OP_SUB1, OP_TAG,
    OP_VARREF, OP_VARSET, LapProgram, stack_depth_analysis,
)
from .limple import (
    LFunc, MVar, const_mvar, insn_call, insn_comment, insn_cond_jump,
    insn_jump, insn_return, insn_set, insn_setimm, rebuild_edges,
    verify_or_raise,
)
from .objects import NIL, intern

_SYMBOL_VALUE = intern("symbol-value")
_SET = intern("set")
_FUNCALL = intern("funcall")

# dedicated-opcode primitives and their arity
_OP_TO_PRIM = {
    OP_PLUS: ("+", 2), OP_MINUS: ("-", 2), OP_MULT: ("*", 2),
    OP_QUO: ("/", 2), OP_ADD1: ("1+", 1), OP_SUB1: ("1-", 1),
    OP_CAR: ("car", 1), OP_CDR: ("cdr", 1), OP_CONS: ("cons", 2),
    OP_SETCAR: ("setcar", 2), OP_SETCDR: ("setcdr", 2),
    OP_EQ: ("eq", 2), OP_NOT: ("not", 1), OP_EQLSIGN: ("=", 2),
    OP_LSS: ("<", 2), OP_GTR: (">", 2),
}

_JUMP_OPS = (OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL)


def limplify(prog: LapProgram, comments=False) -> LFunc:
    """Translate one LAP program into a (non-SSA) LIMPLE function."""
    depths = stack_depth_analysis(prog)
    insns = prog.insns
    n_locals = prog.n_locals

    leaders = {0}
    jump_targets = set()
    for i, insn in enumerate(insns):
        if insn.code == OP_TAG:
            leaders.add(i)
        if insn.code in _JUMP_OPS:
            jump_targets.add(prog.label_index[insn.arg])
        if insn.code in _JUMP_OPS or insn.code == OP_RETURN:
            leaders.add(i + 1)
    leaders = sorted(i for i in leaders if i in depths)

    f = LFunc(prog.name, prog.arg_count,
              frame_size=n_locals + prog.max_depth,
              n_locals=n_locals, comments_kept=comments)
    # a branch back to instruction 0 would give the entry block in-edges;
    # interpose a fresh entry that just jumps to the real first block
    if 0 in jump_targets:
        f.new_block()
    block_of = {}
    for idx in leaders:
        block_of[idx] = f.new_block().name
    if 0 in jump_targets:
        f.blocks[f.entry].insns.append(insn_jump(block_of[0]))

    def target_block(label):
        return block_of[prog.label_index[label]]

    next_leader = {}
    for a, b in zip(leaders, leaders[1:]):
        next_leader[a] = b

    def mv(slot):
        return MVar(slot=slot)

    for li, leader in enumerate(leaders):
        bb = f.blocks[block_of[leader]]
        idx = leader
        terminated = False
        while not terminated:
            if idx >= len(insns):
                break
            if idx != leader and idx in block_of:
                bb.insns.append(insn_jump(block_of[idx]))
                terminated = True
                break
            insn = insns[idx]
            code = insn.code
            d = depths[idx]
            top = n_locals + d - 1
            if comments and code != OP_TAG:
                bb.insns.append(insn_comment(_lap_text(prog, insn)))
            if code == OP_CONSTANT:
                bb.insns.append(insn_setimm(mv(n_locals + d),
                                            prog.constants[insn.arg]))
            elif code == OP_VARREF:
                sym = prog.constants[insn.arg]
                bb.insns.append(insn_call(mv(n_locals + d), _SYMBOL_VALUE,
                                          [const_mvar(sym)]))
            elif code == OP_VARSET:
                sym = prog.constants[insn.arg]
                bb.insns.append(insn_call(mv(top), _SET,
                                          [const_mvar(sym), mv(top)]))
            elif code == OP_STACK_REF:
                bb.insns.append(insn_set(mv(n_locals + d), mv(insn.arg)))
            elif code == OP_STACK_SET:
                bb.insns.append(insn_set(mv(insn.arg), mv(top)))
            elif code == OP_DUP:
                bb.insns.append(insn_set(mv(n_locals + d), mv(top)))
            elif code == OP_DISCARD:
                pass
            elif code == OP_TAG:
                pass
            elif code == OP_GOTO:
                bb.insns.append(insn_jump(target_block(insn.arg)))
                terminated = True
            elif code == OP_GOTO_IF_NIL:
                fall = block_of[idx + 1]
                bb.insns.append(insn_cond_jump(mv(top), const_mvar(NIL),
                                               target_block(insn.arg), fall))
                terminated = True
            elif code == OP_GOTO_IF_NOT_NIL:
                fall = block_of[idx + 1]
                bb.insns.append(insn_cond_jump(mv(top), const_mvar(NIL),
                                               fall, target_block(insn.arg)))
                terminated = True
            elif code == OP_RETURN:
                bb.insns.append(insn_return(mv(top)))
                terminated = True
            elif code == OP_CALL:
                n = insn.arg
                base = n_locals + d - n - 1
                args = [mv(base)] + [mv(base + 1 + k) for k in range(n)]
                bb.insns.append(insn_call(mv(base), _FUNCALL, args))
            elif code in _OP_TO_PRIM:
                name, arity = _OP_TO_PRIM[code]
                base = n_locals + d - arity
                args = [mv(base + k) for k in range(arity)]
                bb.insns.append(insn_call(mv(base), intern(name), args))
            else:
                raise AssertionError("cannot limplify opcode %s" % insn.name)
            idx += 1
    rebuild_edges(f)
    verify_or_raise(f, "limplify")
    return f


def _lap_text(prog, insn):
    code = insn.code
    if code == OP_TAG:
        return "(TAG %d)" % insn.arg
    if code in _JUMP_OPS:
        return "(%s TAG %d)" % (insn.name, insn.arg)
    if code in (OP_CONSTANT, OP_VARREF, OP_VARSET):
        from .objects import print_value
        return "(%s %s)" % (insn.name, print_value(prog.constants[insn.arg]))
    if insn.arg is None:
        return "(%s)" % insn.name
    return "(%s %d)" % (insn.name, insn.arg)
