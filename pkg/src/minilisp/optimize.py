"""LIMPLE optimization passes: forward data-flow propagation, trampoline
elimination, dead assignment removal, type-hint handling, and tail
recursion elimination.

All passes expect SSA form except where noted; metadata (known constant,
known type) lives on the shared MVar instances, so one discovery is
visible at every use site.
"""

from __future__ import annotations

from .limple import (
    ASSUME, CALL, CALL_OPS, COMMENT, DIRECT_CALL, PHI, RETURN, SET, SETIMM,
    Insn, LFunc, MVar, insn_assume, insn_jump, insn_set, insn_setimm,
    rebuild_edges, verify_or_raise,
)
from .objects import MiniLispError, Symbol, type_name, values_eq
from .primitives import HINT_TYPES, REGISTRY, Subr, lookup_primitive
from .ssa import strip_ssa

_FUNCALL_NAME = "funcall"


def _def_map(f: LFunc):
    defs = {}
    for _, insn in f.all_insns():
        if insn.op in (COMMENT, ASSUME):
            continue
        if insn.dst is not None and insn.dst.id is not None:
            defs[insn.dst.id] = insn
    return defs


def rewrite_hints(f: LFunc) -> LFunc:
    """At maximum optimization the type-hint calls become a plain copy plus
    an assume carrying the asserted type; at lower levels the calls stay
    and execute as assertions."""
    defs = _def_map(f)
    for bb in f.blocks.values():
        out = []
        for insn in bb.insns:
            if (insn.op == CALL and insn.f is not None
                    and insn.f.name == _FUNCALL_NAME and len(insn.args) == 2
                    and insn.args[0].id is not None):
                def_insn = defs.get(insn.args[0].id)
                if (def_insn is not None and def_insn.op == SETIMM
                        and isinstance(def_insn.imm, Symbol)
                        and def_insn.imm.name in HINT_TYPES):
                    out.append(insn_set(insn.dst, insn.args[1]))
                    out.append(insn_assume(insn.dst,
                                           HINT_TYPES[def_insn.imm.name]))
                    continue
            out.append(insn)
        bb.insns = out
    return f


def forward_propagate(f: LFunc, registry=None) -> LFunc:
    """Fixpoint propagation of known values and types.

    Rules per sweep: phi agreement, known primitive return types, folding
    of pure calls over known arguments, and copy propagation through set.
    The lattice is flat (unknown -> known, never revoked) so the sweep
    count is bounded by the number of m-vars."""
    if registry is None:
        registry = REGISTRY
    n_mvars = 0
    for bb in f.block_order():
        for insn in bb.insns:
            if insn.op == SETIMM and not insn.dst.const_vld:
                insn.dst.set_const(insn.imm)
                insn.dst.type = type_name(insn.imm)
                n_mvars += 1
            elif insn.dst is not None:
                n_mvars += 1
    limit = 3 * n_mvars + 3
    sweeps = 0
    changed = True
    while changed:
        changed = False
        sweeps += 1
        if sweeps > limit:
            raise AssertionError("propagation failed to converge in %s"
                                 % f.name.name)
        for bb in f.block_order():
            insns = bb.insns
            for i, insn in enumerate(insns):
                op = insn.op
                if op == PHI:
                    changed |= _phi_agree(insn)
                elif op in CALL_OPS:
                    changed |= _call_rules(f, bb, i, insn, registry)
                elif op == SET:
                    changed |= _copy_rule(insn)
                elif op == ASSUME:
                    if insn.dst is not None and insn.dst.type != insn.typ:
                        insn.dst.type = insn.typ
                        changed = True
    return f


def _phi_agree(insn):
    changed = False
    dst = insn.dst
    srcs = insn.args
    if not srcs:
        return False
    if not dst.const_vld and all(s.const_vld for s in srcs):
        first = srcs[0].constant
        if all(values_eq(s.constant, first) for s in srcs[1:]):
            dst.set_const(first)
            changed = True
    if dst.type is None and all(s.type is not None for s in srcs):
        first = srcs[0].type
        if all(s.type == first for s in srcs[1:]):
            dst.type = first
            changed = True
    return changed


def _call_rules(f, bb, index, insn, registry):
    changed = False
    dst = insn.dst
    subr = registry.get(insn.f) if isinstance(insn.f, Symbol) else None
    if subr is None:
        return False
    if insn.op == CALL and subr.name.name == _FUNCALL_NAME:
        return False
    if dst is not None and dst.type is None \
            and subr.return_type is not None:
        dst.type = subr.return_type
        changed = True
    if (subr.pure and dst is not None and not dst.const_vld
            and insn.op in (CALL, DIRECT_CALL)
            and all(a.const_vld for a in insn.args)):
        try:
            value = subr.impl(None, *[a.constant for a in insn.args])
        except MiniLispError:
            return changed
        folded = insn_setimm(dst, value)
        bb.insns[index] = folded
        dst.set_const(value)
        dst.type = type_name(value)
        return True
    return changed


def _copy_rule(insn):
    changed = False
    dst, src = insn.dst, insn.args[0]
    if not dst.const_vld and src.const_vld:
        dst.set_const(src.constant)
        changed = True
    if dst.type is None and src.type is not None:
        dst.type = src.type
        changed = True
    return changed


def call_optim(f: LFunc, unit_functions, cfg) -> LFunc:
    """Rewrite trampoline calls whose callee is known into direct calls:
    registered primitives always, functions of the same compilation unit
    only when intra-unit optimization is enabled."""
    intra = cfg.call_optim_intra_cu
    for bb in f.block_order():
        for i, insn in enumerate(bb.insns):
            if insn.op != CALL or not isinstance(insn.f, Symbol):
                continue
            if insn.f.name == _FUNCALL_NAME and insn.args:
                callee = insn.args[0]
                if not callee.const_vld or not isinstance(callee.constant,
                                                          Symbol):
                    continue
                target = callee.constant
                prim = lookup_primitive(target)
                if prim is not None:
                    n = len(insn.args) - 1
                    if n < prim.min_args or (prim.max_args != Subr.MANY
                                             and n > prim.max_args):
                        continue
                    bb.insns[i] = Insn(DIRECT_CALL, dst=insn.dst, f=target,
                                       args=insn.args[1:])
                elif intra and target in unit_functions:
                    bb.insns[i] = Insn(DIRECT_CALL, dst=insn.dst, f=target,
                                       args=insn.args[1:])
            else:
                if lookup_primitive(insn.f) is not None:
                    bb.insns[i] = Insn(DIRECT_CALL, dst=insn.dst, f=insn.f,
                                       args=insn.args)
    return f


def dead_code(f: LFunc) -> LFunc:
    """Iteratively delete assignments whose destination is never read.
    Calls survive (side effects) but lose their unused destination; assume
    markers have served their purpose once propagation ran."""
    for bb in f.blocks.values():
        bb.insns = [i for i in bb.insns if i.op != ASSUME]
    while True:
        uses = {}
        for _, insn in f.all_insns():
            for m in insn.args:
                if isinstance(m, MVar) and m.id is not None:
                    uses[m.id] = uses.get(m.id, 0) + 1
        removed = False
        for bb in f.blocks.values():
            out = []
            for insn in bb.insns:
                if insn.op in (SET, SETIMM, PHI):
                    if insn.dst.id is not None \
                            and uses.get(insn.dst.id, 0) == 0:
                        removed = True
                        continue
                elif insn.op in CALL_OPS:
                    if insn.dst is not None and insn.dst.id is not None \
                            and uses.get(insn.dst.id, 0) == 0:
                        insn.dst = None
                out.append(insn)
            bb.insns = out
        if not removed:
            return f


def _tail_call_sites(f: LFunc):
    """(block, call, return) triples where a self direct-call immediately
    feeds the block's return."""
    sites = []
    for bb in f.block_order():
        body = bb.body_insns()
        if len(body) < 2:
            continue
        call, ret = body[-2], body[-1]
        if (ret.op == RETURN and call.op == DIRECT_CALL
                and call.f is f.name and call.dst is not None
                and ret.args[0] is call.dst):
            sites.append((bb, call, ret))
    return sites


def tre(f: LFunc) -> bool:
    """Tail recursion elimination: rewrite self tail calls into argument
    rebinding plus a jump to a loop header cloned from the entry block.
    Leaves the function out of SSA form when it fires; the pipeline
    re-establishes SSA afterwards.  Returns True if anything changed."""
    if not _tail_call_sites(f):
        return False
    strip_ssa(f)
    entry = f.blocks[f.entry]
    header = f.new_block()
    header.insns = entry.insns
    entry.insns = [insn_jump(header.name)]
    rebuild_edges(f)

    for bb, call, ret in _tail_call_sites(f):
        moves = []
        sources = list(call.args)
        targets = list(range(f.arg_count))
        conflict = any(isinstance(s, MVar) and s.slot is not None
                       and s.slot in targets for s in sources)
        staging = []
        if conflict:
            for src in sources:
                tmp = f.frame_size
                f.frame_size += 1
                moves.append(insn_set(MVar(slot=tmp), src))
                staging.append(MVar(slot=tmp))
        else:
            staging = sources
        for slot, src in zip(targets, staging):
            if isinstance(src, MVar) and src.slot == slot:
                continue
            moves.append(insn_set(MVar(slot=slot), src))
        body = bb.insns
        cut = body.index(call)
        assert body.index(ret) > cut
        bb.insns = body[:cut] + moves + [insn_jump(header.name)]
    rebuild_edges(f)
    verify_or_raise(f, "tre")
    return True
