import random

from minilisp.bytecomp import compile_text
from minilisp.limple import (
    LFunc, MVar, PHI, insn_jump, insn_return, insn_setimm, rebuild_edges,
    verify,
)
from minilisp.limplify import limplify
from minilisp.objects import intern
from minilisp.ssa import (
    compute_dominators, iterated_frontier, ssa_convert, strip_ssa,
)

from tests_support.cfggen import (
    oracle_dominators, oracle_frontier, oracle_idom,
    oracle_iterated_frontier, random_cfg,
)


def chain3():
    f = LFunc(intern("chain"), 0, 2)
    b0, b1, b2 = f.new_block(), f.new_block(), f.new_block()
    b0.insns.append(insn_jump("bb_1"))
    b1.insns.append(insn_jump("bb_2"))
    b2.insns.append(insn_return(MVar(slot=0)))
    rebuild_edges(f)
    return f


def diamond():
    from minilisp.limple import const_mvar, insn_cond_jump
    from minilisp.objects import NIL
    f = LFunc(intern("diamond"), 0, 2)
    b0, b1, b2, b3 = (f.new_block() for _ in range(4))
    b0.insns.append(insn_cond_jump(MVar(slot=0), const_mvar(NIL),
                                   "bb_1", "bb_2"))
    b1.insns.append(insn_setimm(MVar(slot=1), 1))
    b1.insns.append(insn_jump("bb_3"))
    b2.insns.append(insn_setimm(MVar(slot=1), 2))
    b2.insns.append(insn_jump("bb_3"))
    b3.insns.append(insn_return(MVar(slot=1)))
    rebuild_edges(f)
    return f


def test_dominators_linear_chain():
    dom = compute_dominators(chain3())
    assert dom.idom["bb_1"] == "bb_0"
    assert dom.idom["bb_2"] == "bb_1"
    assert all(not fr for fr in dom.frontier.values())


def test_dominators_diamond():
    dom = compute_dominators(diamond())
    assert dom.idom["bb_3"] == "bb_0"
    assert dom.frontier["bb_1"] == {"bb_3"}
    assert dom.frontier["bb_2"] == {"bb_3"}
    assert dom.frontier["bb_0"] == set()


def test_dominators_foo_cfg():
    unit = compile_text("(defun foo () (if *bar* (+ *bar* 2) 'foo))")
    f = limplify(unit.functions[intern("foo")])
    dom = compute_dominators(f)
    assert dom.idom["bb_1"] == "bb_0"
    assert dom.idom["bb_2"] == "bb_0"
    assert all(not fr for fr in dom.frontier.values())


def test_diamond_phi_placement():
    f = diamond()
    ssa_convert(f)
    phis = [i for _, i in f.all_insns() if i.op == PHI]
    assert len(phis) == 1
    assert phis[0].dst.slot == 1
    assert verify(f) == []


def test_foo_has_no_phis_and_unique_ids():
    unit = compile_text("(defun foo () (if *bar* (+ *bar* 2) 'foo))")
    f = ssa_convert(limplify(unit.functions[intern("foo")]))
    assert verify(f) == []
    phis = [i for _, i in f.all_insns() if i.op == PHI]
    assert phis == []
    ids = [i.dst.id for _, i in f.all_insns() if i.dst is not None]
    assert len(ids) == len(set(ids))


def test_while_counter_gets_single_phi_per_slot():
    src = """
    (defun spin (n)
      (while (> n 0) (setq n (1- n)))
      n)
    """
    f = limplify(compile_text(src).functions[intern("spin")])
    dom = compute_dominators(f)
    # oracle prediction: one phi per slot with defs reaching the loop head
    doms = oracle_dominators(f)
    df = oracle_frontier(f, doms)
    sites = {}
    for bb in f.block_order():
        for insn in bb.insns:
            if insn.dst is not None and insn.dst.slot is not None:
                sites.setdefault(insn.dst.slot, set()).add(bb.name)
    sites.setdefault(0, set()).add("bb_0")
    expected = {slot: len(oracle_iterated_frontier(df, blocks))
                for slot, blocks in sites.items()}
    ssa_convert(f)
    got = {}
    for _, insn in f.all_insns():
        if insn.op == PHI:
            got[insn.dst.slot] = got.get(insn.dst.slot, 0) + 1
    for slot, count in got.items():
        assert count == expected.get(slot, 0)
    # the loop variable slot 0 must carry exactly one phi at the header
    assert got.get(0) == 1


def test_straight_line_only_renumbers():
    src = "(defun s () (cons 1 2))"
    f = limplify(compile_text(src).functions[intern("s")])
    before = [i.op for _, i in f.all_insns()]
    ssa_convert(f)
    after = [i.op for _, i in f.all_insns()]
    assert before == after
    assert verify(f) == []


def test_random_cfgs_match_deletion_oracle():
    rng = random.Random(321)
    for trial in range(200):
        f = random_cfg(rng)
        doms = oracle_dominators(f)
        want_idom = oracle_idom(doms, f.entry)
        want_df = oracle_frontier(f, doms)
        dom = compute_dominators(f)
        assert dom.idom[f.entry] is None
        for b in f.blocks:
            if b != f.entry:
                assert dom.idom[b] == want_idom[b], (trial, b)
            assert dom.frontier[b] == want_df[b], (trial, b)

        sites = {}
        for bb in f.block_order():
            for insn in bb.insns:
                if insn.dst is not None and insn.dst.slot is not None \
                        and insn.op != PHI:
                    sites.setdefault(insn.dst.slot, set()).add(bb.name)
        expected_phis = {
            slot: oracle_iterated_frontier(want_df, blocks)
            for slot, blocks in sites.items()
        }
        ssa_convert(f)
        assert verify(f) == [], trial
        placed = {}
        for bb in f.block_order():
            for insn in bb.insns:
                if insn.op == PHI:
                    placed.setdefault(insn.dst.slot, set()).add(bb.name)
        for slot, blocks in expected_phis.items():
            assert placed.get(slot, set()) == blocks, (trial, slot)
        for slot in placed:
            assert slot in expected_phis


def test_strip_then_reconvert_preserves_verification():
    src = """
    (defun f (n)
      (let ((acc 0))
        (while (> n 0) (setq acc (+ acc n)) (setq n (1- n)))
        acc))
    """
    f = ssa_convert(limplify(compile_text(src).functions[intern("f")]))
    strip_ssa(f)
    assert not f.ssa_form
    ssa_convert(f)
    assert verify(f) == []
