"""Dominator analysis and minimal-SSA construction over LIMPLE.

Dominators are computed with the iterative RPO intersection algorithm;
phis are placed at iterated dominance frontiers of each slot's definition
sites, then classic stack-based renaming gives every destination a unique
id.  Phis merge only versions of one stack slot, so dropping ids and phis
(strip_ssa) is a valid way back out of SSA form.
"""

from __future__ import annotations

from .limple import (
    ASSUME, COMMENT, LFunc, MVar, NIL, PHI, VerifyError, insn_phi,
    prune_unreachable, reachable_blocks, rebuild_edges, verify_or_raise,
)


class DomInfo:
    """Per-block immediate dominator, dominance frontier, and reverse
    postorder index."""

    def __init__(self, idom, frontier, rpo_index, rpo):
        self.idom = idom
        self.frontier = frontier
        self.rpo_index = rpo_index
        self.rpo = rpo


def reverse_postorder(f: LFunc):
    seen = set()
    order = []

    def visit(name):
        stack = [(name, iter(f.blocks[name].out_edges))]
        seen.add(name)
        while stack:
            cur, succs = stack[-1]
            advanced = False
            for s in succs:
                if s not in seen:
                    seen.add(s)
                    stack.append((s, iter(f.blocks[s].out_edges)))
                    advanced = True
                    break
            if not advanced:
                order.append(cur)
                stack.pop()

    visit(f.entry)
    order.reverse()
    return order


def compute_dominators(f: LFunc) -> DomInfo:
    """Iterative idom computation to fixpoint, then the standard local/up
    frontier rule.  Requires edges to be current and all blocks reachable."""
    rebuild_edges(f)
    live = reachable_blocks(f)
    if len(live) != len(f.blocks):
        dead = sorted(set(f.blocks) - live)
        raise VerifyError("%s: unreachable blocks %s (prune before SSA)"
                          % (f.name.name, dead))
    rpo = reverse_postorder(f)
    rpo_index = {name: i for i, name in enumerate(rpo)}
    idom = {f.entry: None}

    def intersect(a, b):
        while a != b:
            while rpo_index[a] > rpo_index[b]:
                a = idom[a]
            while rpo_index[b] > rpo_index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for name in rpo:
            if name == f.entry:
                continue
            preds = [p for p in f.blocks[name].in_edges if p in idom]
            if not preds:
                continue
            new = preds[0]
            for p in preds[1:]:
                new = intersect(new, p)
            if idom.get(name) != new:
                idom[name] = new
                changed = True

    frontier = {name: set() for name in rpo}
    for name in rpo:
        preds = f.blocks[name].in_edges
        if len(preds) < 2:
            continue
        for p in preds:
            runner = p
            while runner != idom[name]:
                frontier[runner].add(name)
                runner = idom[runner]
    return DomInfo(idom, frontier, rpo_index, rpo)


def iterated_frontier(dom: DomInfo, blocks) -> set:
    """Transitive closure of the dominance frontier over a block set."""
    result = set()
    work = list(blocks)
    while work:
        b = work.pop()
        for fb in dom.frontier.get(b, ()):
            if fb not in result:
                result.add(fb)
                work.append(fb)
    return result


def _slot_definition_sites(f: LFunc):
    sites = {}
    for bb in f.block_order():
        for insn in bb.insns:
            dst = insn.dst
            if insn.op not in (COMMENT, ASSUME) and dst is not None \
                    and dst.slot is not None:
                sites.setdefault(dst.slot, set()).add(bb.name)
    # arguments are defined on entry
    for slot in range(f.arg_count):
        sites.setdefault(slot, set()).add(f.entry)
    return sites


def ssa_convert(f: LFunc) -> LFunc:
    """Bring f into minimal SSA form in place (phi placement at iterated
    dominance frontiers + classic renaming); returns f."""
    pruned = prune_unreachable(f)
    dom = compute_dominators(f)
    for bb in f.blocks.values():
        bb.idom = dom.idom.get(bb.name)
        bb.df = dom.frontier.get(bb.name, set())

    sites = _slot_definition_sites(f)
    phis_for_block: dict[str, list] = {}
    for slot in sorted(sites):
        for bname in sorted(iterated_frontier(dom, sites[slot])):
            phis_for_block.setdefault(bname, []).append(slot)
    for bname, slots in phis_for_block.items():
        bb = f.blocks[bname]
        n_in = len(bb.in_edges)
        new = [insn_phi(MVar(slot=slot), [MVar(slot=slot)
                                          for _ in range(n_in)])
               for slot in sorted(slots)]
        bb.insns[0:0] = new

    # classic renaming over the dominator tree
    children: dict[str, list] = {}
    for name, parent in dom.idom.items():
        if parent is not None:
            children.setdefault(parent, []).append(name)
    for lst in children.values():
        lst.sort(key=lambda n: dom.rpo_index[n])

    f.next_mvar_id = 0
    stacks: dict[int, list] = {}
    undef_versions: dict[int, MVar] = {}

    def fresh_version(slot):
        m = MVar(slot=slot, id=f.new_mvar_id())
        stacks.setdefault(slot, []).append(m)
        return m

    def current_version(slot):
        stack = stacks.get(slot)
        if stack:
            return stack[-1]
        # read of a never-written slot (possible in hand-built IR):
        # one shared undefined version per slot, no definition site
        if slot not in undef_versions:
            undef_versions[slot] = MVar(slot=slot, id=f.new_mvar_id())
        return undef_versions[slot]

    entry_args = []
    for slot in range(f.arg_count):
        entry_args.append(fresh_version(slot))
    f.entry_arg_mvars = entry_args

    def rename_block(name):
        bb = f.blocks[name]
        pushed = []
        for insn in bb.insns:
            op = insn.op
            if op == COMMENT:
                continue
            if op == PHI:
                insn.dst = fresh_version(insn.dst.slot)
                pushed.append(insn.dst.slot)
                continue
            insn.args = [current_version(m.slot)
                         if isinstance(m, MVar) and m.slot is not None
                         and m.id is None else m
                         for m in insn.args]
            if op == ASSUME:
                if insn.dst.slot is not None and insn.dst.id is None:
                    insn.dst = current_version(insn.dst.slot)
                continue
            if insn.dst is not None and insn.dst.slot is not None:
                insn.dst = fresh_version(insn.dst.slot)
                pushed.append(insn.dst.slot)
        for succ in bb.out_edges:
            sbb = f.blocks[succ]
            which = sbb.in_edges.index(name)
            for insn in sbb.insns:
                if insn.op != PHI:
                    if insn.op == COMMENT:
                        continue
                    break
                insn.args[which] = current_version(insn.dst.slot)
        for child in children.get(name, ()):
            rename_block(child)
        for slot in reversed(pushed):
            stacks[slot].pop()

    rename_block(f.entry)
    f.ssa_form = True
    verify_or_raise(f, "ssa_convert")
    return f


def strip_ssa(f: LFunc):
    """Drop ids and phis, returning to slot semantics.  Valid because every
    phi merges versions of a single slot.  Data-flow metadata is cleared;
    a following propagation pass re-derives it."""
    for bb in f.blocks.values():
        bb.insns = [i for i in bb.insns if i.op != PHI]
        for insn in bb.insns:
            for m in list(insn.args) + [insn.dst]:
                if isinstance(m, MVar) and m.slot is not None:
                    m.id = None
                    m.const_vld = False
                    m.constant = NIL
                    m.type = None
                    m.alloc = None
    f.ssa_form = False
    return f
