"""LIMPLE: the register-oriented SSA IR between LAP and the backends.

A function is a control-flow graph of basic blocks; every instruction
operates on m-vars, which carry the originating stack slot plus whatever
the data-flow passes have learned (SSA id, known constant, known type,
storage class).
"""

from __future__ import annotations

import hashlib
import struct

from .objects import (
    NIL, T, MiniLispError, Symbol, intern, print_value, read, structural_key,
    type_name,
)

VALUE_TYPES = ("fixnum", "float", "number", "cons", "symbol", "string",
               "boolean", "t")


class MVar:
    __slots__ = ("id", "slot", "const_vld", "constant", "type", "alloc")

    def __init__(self, slot=None, id=None, const_vld=False, constant=NIL,
                 type=None):
        self.id = id
        self.slot = slot
        self.const_vld = const_vld
        self.constant = constant
        self.type = type
        self.alloc = None

    def set_const(self, v):
        self.const_vld = True
        self.constant = v

    def __repr__(self):
        return format_mvar(self)


def const_mvar(v, type=None):
    m = MVar(slot=None, const_vld=True, constant=v)
    m.type = type if type is not None else type_name(v)
    return m


def format_mvar(m: MVar) -> str:
    parts = []
    if m.id is not None:
        parts.append(":id %d" % m.id)
    if m.slot is not None:
        parts.append(":slot %d" % m.slot)
    if m.const_vld:
        parts.append(":const %s" % print_value(m.constant))
    if m.type is not None:
        parts.append(":type %s" % m.type)
    return "#s(mvar %s)" % " ".join(parts)


# Instruction opcodes
SET = "set"
SETIMM = "setimm"
JUMP = "jump"
COND_JUMP = "cond-jump"
CALL = "call"
CALLREF = "callref"
DIRECT_CALL = "direct-call"
COMMENT = "comment"
RETURN = "return"
PHI = "phi"
ASSUME = "assume"

TERMINATORS = (JUMP, COND_JUMP, RETURN)
CALL_OPS = (CALL, CALLREF, DIRECT_CALL)


class Insn:
    __slots__ = ("op", "dst", "f", "args", "imm", "reloc", "targets",
                 "text", "typ")

    def __init__(self, op, dst=None, f=None, args=None, imm=None,
                 targets=None, text=None, typ=None, reloc=None):
        self.op = op
        self.dst = dst
        self.f = f
        self.args = args if args is not None else []
        self.imm = imm
        self.reloc = reloc
        self.targets = targets if targets is not None else []
        self.text = text
        self.typ = typ

    def operands(self):
        """MVar operands read by this instruction."""
        return self.args

    def __repr__(self):
        return format_insn(self)


def insn_set(dst, src):
    return Insn(SET, dst=dst, args=[src])


def insn_setimm(dst, imm):
    return Insn(SETIMM, dst=dst, imm=imm)


def insn_jump(bb):
    return Insn(JUMP, targets=[bb])


def insn_cond_jump(a, b, bb_then, bb_else):
    return Insn(COND_JUMP, args=[a, b], targets=[bb_then, bb_else])


def insn_call(dst, f, args):
    return Insn(CALL, dst=dst, f=f, args=list(args))


def insn_direct_call(dst, f, args):
    return Insn(DIRECT_CALL, dst=dst, f=f, args=list(args))


def insn_callref(dst, f, args):
    return Insn(CALLREF, dst=dst, f=f, args=list(args))


def insn_return(a):
    return Insn(RETURN, args=[a])


def insn_phi(dst, srcs):
    return Insn(PHI, dst=dst, args=list(srcs))


def insn_comment(text):
    return Insn(COMMENT, text=text)


def insn_assume(dst, typ):
    return Insn(ASSUME, dst=dst, typ=typ)


def format_insn(insn: Insn) -> str:
    op = insn.op
    if op == SET:
        return "(set %s %s)" % (insn.dst, insn.args[0])
    if op == SETIMM:
        return "(setimm %s %s)" % (insn.dst, print_value(insn.imm))
    if op == JUMP:
        return "(jump %s)" % insn.targets[0]
    if op == COND_JUMP:
        return "(cond-jump %s %s %s %s)" % (insn.args[0], insn.args[1],
                                            insn.targets[0], insn.targets[1])
    if op in CALL_OPS:
        parts = " ".join(str(a) for a in insn.args)
        fname = insn.f.name if isinstance(insn.f, Symbol) else str(insn.f)
        return "(%s %s %s%s)" % (op, insn.dst, fname,
                                 (" " + parts) if parts else "")
    if op == COMMENT:
        return "(comment %r)" % insn.text
    if op == RETURN:
        return "(return %s)" % insn.args[0]
    if op == PHI:
        return "(phi %s %s)" % (insn.dst,
                                " ".join(str(a) for a in insn.args))
    if op == ASSUME:
        return "(assume %s %s)" % (insn.dst, insn.typ)
    raise AssertionError(op)


class BasicBlock:
    __slots__ = ("name", "insns", "in_edges", "out_edges", "idom", "df")

    def __init__(self, name):
        self.name = name
        self.insns = []
        self.in_edges = []
        self.out_edges = []
        self.idom = None
        self.df = set()

    def terminator(self):
        for insn in reversed(self.insns):
            if insn.op == COMMENT:
                continue
            return insn
        return None

    def body_insns(self):
        return [i for i in self.insns if i.op != COMMENT]

    def __repr__(self):
        return "<bb %s>" % self.name


def block_number(name: str) -> int:
    return int(name.rsplit("_", 1)[1])


class LFunc:
    """One function as a CFG of basic blocks; entry is bb_0."""

    def __init__(self, name, arg_count, frame_size, n_locals=0, speed=0,
                 comments_kept=False):
        self.name = name
        self.arg_count = arg_count
        self.frame_size = frame_size
        self.n_locals = n_locals
        self.blocks: dict[str, BasicBlock] = {}
        self.entry = "bb_0"
        self.ssa_form = False
        self.speed = speed
        self.comments_kept = comments_kept
        self.next_mvar_id = 0
        self.frame = None
        self.entry_arg_mvars = []

    def new_block(self, name=None):
        if name is None:
            name = "bb_%d" % len(self.blocks)
        bb = BasicBlock(name)
        self.blocks[name] = bb
        return bb

    def block_order(self):
        """Blocks in stable name order: entry first, then numeric order."""
        return sorted(self.blocks.values(), key=lambda b: block_number(b.name))

    def new_mvar_id(self):
        i = self.next_mvar_id
        self.next_mvar_id += 1
        return i

    def all_insns(self):
        for bb in self.block_order():
            for insn in bb.insns:
                yield bb, insn


def rebuild_edges(f: LFunc):
    for bb in f.blocks.values():
        bb.out_edges = []
        bb.in_edges = []
    for bb in f.blocks.values():
        term = bb.terminator()
        if term is not None and term.op in (JUMP, COND_JUMP):
            for t in term.targets:
                if t not in bb.out_edges:
                    bb.out_edges.append(t)
    for bb in f.blocks.values():
        for succ in bb.out_edges:
            f.blocks[succ].in_edges.append(bb.name)
    for bb in f.blocks.values():
        bb.in_edges.sort(key=block_number)


def reachable_blocks(f: LFunc):
    seen = set()
    work = [f.entry]
    while work:
        name = work.pop()
        if name in seen or name not in f.blocks:
            continue
        seen.add(name)
        bb = f.blocks[name]
        term = bb.terminator()
        if term is not None and term.op in (JUMP, COND_JUMP):
            work.extend(term.targets)
    return seen


def prune_unreachable(f: LFunc):
    """Drop unreachable blocks; returns the removed names."""
    live = reachable_blocks(f)
    dead = [n for n in f.blocks if n not in live]
    for n in dead:
        del f.blocks[n]
    if dead:
        rebuild_edges(f)
    return dead


def verify(f: LFunc):
    """Structural checks; returns a list of violation strings (empty = ok)."""
    violations = []
    if f.entry not in f.blocks:
        return ["missing entry block %s" % f.entry]
    rebuilt_in = {name: [] for name in f.blocks}
    for bb in f.blocks.values():
        body = bb.body_insns()
        if not body:
            violations.append("%s: empty block" % bb.name)
            continue
        for insn in body[:-1]:
            if insn.op in TERMINATORS:
                violations.append("%s: multiple terminators" % bb.name)
                break
        term = body[-1]
        if term.op not in TERMINATORS:
            violations.append("%s: no terminator" % bb.name)
            term = None
        seen_non_phi = False
        for insn in body:
            if insn.op == PHI:
                if seen_non_phi:
                    violations.append("%s: phi not at block head" % bb.name)
                    break
            else:
                seen_non_phi = True
        if term is not None and term.op in (JUMP, COND_JUMP):
            for t in dict.fromkeys(term.targets):
                if t not in f.blocks:
                    violations.append("%s: jump to missing block %s"
                                      % (bb.name, t))
                else:
                    if t not in bb.out_edges:
                        violations.append("%s: out-edges stale" % bb.name)
                    rebuilt_in[t].append(bb.name)
    for bb in f.blocks.values():
        if sorted(bb.in_edges) != sorted(rebuilt_in.get(bb.name, [])):
            violations.append("%s: in-edges inconsistent" % bb.name)
    entry_in = rebuilt_in.get(f.entry, [])
    if entry_in:
        violations.append("entry block has in-edges from %s" % entry_in)
    live = reachable_blocks(f)
    for name in f.blocks:
        if name not in live:
            violations.append("%s: unreachable" % name)
    for bb in f.blocks.values():
        for insn in bb.insns:
            if insn.op == PHI and len(insn.args) != len(bb.in_edges):
                violations.append(
                    "%s: phi arity %d != in-degree %d"
                    % (bb.name, len(insn.args), len(bb.in_edges)))
    if f.ssa_form:
        seen_ids = set()
        for _, insn in f.all_insns():
            if insn.op == ASSUME or insn.op == COMMENT:
                continue
            dst = insn.dst
            if dst is None:
                continue
            if dst.id is None:
                violations.append("ssa: destination without id in %s"
                                  % format_insn(insn))
            elif dst.id in seen_ids:
                violations.append("ssa: id %d assigned twice" % dst.id)
            else:
                seen_ids.add(dst.id)
    return violations


class VerifyError(MiniLispError):
    error_class = "verify-error"


def verify_or_raise(f: LFunc, stage=""):
    violations = verify(f)
    if violations:
        raise VerifyError("%s%s: %s" % (f.name.name,
                                        " after " + stage if stage else "",
                                        "; ".join(violations)))


def print_limple(f: LFunc) -> str:
    """One sexp per instruction under block headers, entry block first."""
    lines = [";; %s  args=%d frame=%d%s" %
             (f.name.name, f.arg_count, f.frame_size,
              " ssa" if f.ssa_form else "")]
    for bb in f.block_order():
        lines.append("%s:" % bb.name)
        for insn in bb.insns:
            if insn.op == COMMENT and not f.comments_kept:
                continue
            lines.append("  " + format_insn(insn))
    return "\n".join(lines)


class CompUnit:
    """A loadable compilation unit: functions, interned constants, and the
    program that installs everything at load time."""

    def __init__(self, name="unit"):
        self.name = name
        self.functions: list[LFunc] = []
        self.functions_by_name: dict[Symbol, LFunc] = {}
        self.data_relocs: list = []
        self._reloc_index: dict = {}
        self.top_level_run: LFunc | None = None
        self.abi_hash = ""
        self.speed = 0
        self.debug = 0

    def add_function(self, f: LFunc):
        self.functions.append(f)
        self.functions_by_name[f.name] = f

    def intern_constant(self, v) -> int:
        key = structural_key(v)
        idx = self._reloc_index.get(key)
        if idx is None:
            idx = len(self.data_relocs)
            self.data_relocs.append(v)
            self._reloc_index[key] = idx
        return idx

    def constants_text(self) -> str:
        from .objects import list_to_value
        return print_value(list_to_value(list(self.data_relocs)))

    def all_funcs(self):
        out = list(self.functions)
        if self.top_level_run is not None:
            out.append(self.top_level_run)
        return out

    def dump(self) -> str:
        parts = [";; unit %s speed=%d" % (self.name, self.speed),
                 ";; data-relocs: %s" % self.constants_text()]
        for f in self.all_funcs():
            parts.append(print_limple(f))
        return "\n".join(parts)


# ---------------------------------------------------------------------------
# Serialization: deterministic custom binary format.

_FORMAT_VERSION = 1


class SerializeError(MiniLispError):
    error_class = "unit-format-error"


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def i64(self, v):
        self.parts.append(struct.pack("<q", v))

    def text(self, s):
        b = s.encode("utf-8")
        self.u64(len(b))
        self.parts.append(b)

    def bytes(self):
        return b"".join(self.parts)


class _ReaderBuf:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise SerializeError("truncated unit payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self):
        return struct.unpack("<q", self.take(8))[0]

    def text(self):
        n = self.u64()
        return self.take(n).decode("utf-8")


_OP_CODES = {SET: 0, SETIMM: 1, JUMP: 2, COND_JUMP: 3, CALL: 4, CALLREF: 5,
             DIRECT_CALL: 6, COMMENT: 7, RETURN: 8, PHI: 9, ASSUME: 10}
_OP_NAMES = {v: k for k, v in _OP_CODES.items()}

_CONST_RELOC, _CONST_NIL, _CONST_T = 0, 2, 3


def _write_const_ref(w, unit, v):
    if v is NIL:
        w.u8(_CONST_NIL)
    elif v is T:
        w.u8(_CONST_T)
    else:
        w.u8(_CONST_RELOC)
        w.u64(unit.intern_constant(v))


def _read_const_ref(r, relocs):
    kind = r.u8()
    if kind == _CONST_NIL:
        return NIL
    if kind == _CONST_T:
        return T
    if kind == _CONST_RELOC:
        idx = r.u64()
        if idx >= len(relocs):
            raise SerializeError("constant index out of range")
        return relocs[idx]
    raise SerializeError("bad constant kind %d" % kind)


def _collect_mvars(f: LFunc):
    """Slot-backed mvars by id, in deterministic first-appearance order."""
    table = {}
    for _, insn in f.all_insns():
        for m in [insn.dst] + list(insn.args):
            if m is None or not isinstance(m, MVar):
                continue
            if m.id is not None and m.id not in table:
                table[m.id] = m
    return table


def _write_operand(w, unit, m: MVar):
    if m is None:
        w.u8(2)
        return
    if m.id is not None:
        w.u8(0)
        w.u64(m.id)
    else:
        w.u8(1)
        _write_const_ref(w, unit, m.constant)
        w.text(m.type or "")


def _write_func(w, unit, f: LFunc):
    w.text(f.name.name)
    w.u64(f.arg_count)
    w.u64(f.n_locals)
    w.u64(f.frame_size)
    w.u8(f.speed)
    w.u8(1 if f.comments_kept else 0)
    w.u8(1 if f.ssa_form else 0)
    mvars = _collect_mvars(f)
    w.u64(len(mvars))
    for mid, m in mvars.items():
        w.u64(mid)
        w.i64(-1 if m.slot is None else m.slot)
        if m.const_vld:
            w.u8(1)
            _write_const_ref(w, unit, m.constant)
        else:
            w.u8(0)
        w.text(m.type or "")
    blocks = f.block_order()
    w.u64(len(blocks))
    for bb in blocks:
        w.text(bb.name)
        insns = [i for i in bb.insns
                 if i.op != COMMENT or f.comments_kept]
        w.u64(len(insns))
        for insn in insns:
            w.u8(_OP_CODES[insn.op])
            op = insn.op
            if op == SET:
                _write_operand(w, unit, insn.dst)
                _write_operand(w, unit, insn.args[0])
            elif op == SETIMM:
                _write_operand(w, unit, insn.dst)
                _write_const_ref(w, unit, insn.imm)
            elif op == JUMP:
                w.text(insn.targets[0])
            elif op == COND_JUMP:
                _write_operand(w, unit, insn.args[0])
                _write_operand(w, unit, insn.args[1])
                w.text(insn.targets[0])
                w.text(insn.targets[1])
            elif op in CALL_OPS:
                _write_operand(w, unit, insn.dst)
                w.text(insn.f.name)
                w.u64(len(insn.args))
                for a in insn.args:
                    _write_operand(w, unit, a)
            elif op == COMMENT:
                w.text(insn.text or "")
            elif op == RETURN:
                _write_operand(w, unit, insn.args[0])
            elif op == PHI:
                _write_operand(w, unit, insn.dst)
                w.u64(len(insn.args))
                for a in insn.args:
                    _write_operand(w, unit, a)
            elif op == ASSUME:
                _write_operand(w, unit, insn.dst)
                w.text(insn.typ or "")


def _intern_unit_constants(u: CompUnit):
    """Make sure every constant an insn references has a reloc index before
    the constants text is rendered."""
    for f in u.all_funcs():
        for mid, m in _collect_mvars(f).items():
            if m.const_vld and m.constant is not NIL and m.constant is not T:
                u.intern_constant(m.constant)
        for _, insn in f.all_insns():
            if insn.op == SETIMM:
                if insn.imm is not NIL and insn.imm is not T:
                    insn.reloc = u.intern_constant(insn.imm)
            for a in insn.args:
                if isinstance(a, MVar) and a.id is None and a.const_vld:
                    if a.constant is not NIL and a.constant is not T:
                        u.intern_constant(a.constant)


def serialize_unit(u: CompUnit) -> bytes:
    """Deterministic byte encoding; equal units serialize identically."""
    _intern_unit_constants(u)
    w = _Writer()
    w.parts.append(b"MLU1")
    w.u32(_FORMAT_VERSION)
    w.text(u.abi_hash)
    w.text(u.name)
    w.u8(u.speed)
    w.u8(u.debug)
    w.text(u.constants_text())
    w.u64(len(u.functions))
    for f in u.functions:
        _write_func(w, u, f)
    if u.top_level_run is None:
        raise SerializeError("unit has no top-level-run")
    _write_func(w, u, u.top_level_run)
    return w.bytes()


def _read_func(r, relocs):
    name = intern(r.text())
    f = LFunc(name, r.u64(), 0)
    f.n_locals = r.u64()
    f.frame_size = r.u64()
    f.speed = r.u8()
    f.comments_kept = bool(r.u8())
    f.ssa_form = bool(r.u8())
    n_mvars = r.u64()
    mvars = {}
    max_id = -1
    for _ in range(n_mvars):
        mid = r.u64()
        slot = r.i64()
        m = MVar(slot=None if slot < 0 else slot, id=mid)
        if r.u8():
            m.set_const(_read_const_ref(r, relocs))
        t = r.text()
        m.type = t or None
        mvars[mid] = m
        max_id = max(max_id, mid)
    f.next_mvar_id = max_id + 1

    def operand():
        kind = r.u8()
        if kind == 0:
            mid = r.u64()
            if mid not in mvars:
                raise SerializeError("operand references unknown mvar %d"
                                     % mid)
            return mvars[mid]
        if kind == 1:
            v = _read_const_ref(r, relocs)
            m = MVar(slot=None, const_vld=True, constant=v)
            t = r.text()
            m.type = t or None
            return m
        if kind == 2:
            return None
        raise SerializeError("bad operand kind %d" % kind)

    n_blocks = r.u64()
    for _ in range(n_blocks):
        bb = f.new_block(r.text())
        n_insns = r.u64()
        for _ in range(n_insns):
            code = r.u8()
            if code not in _OP_NAMES:
                raise SerializeError("bad insn opcode %d" % code)
            op = _OP_NAMES[code]
            if op == SET:
                bb.insns.append(insn_set(operand(), operand()))
            elif op == SETIMM:
                dst = operand()
                imm = _read_const_ref(r, relocs)
                bb.insns.append(insn_setimm(dst, imm))
            elif op == JUMP:
                bb.insns.append(insn_jump(r.text()))
            elif op == COND_JUMP:
                a, b = operand(), operand()
                bb.insns.append(insn_cond_jump(a, b, r.text(), r.text()))
            elif op in CALL_OPS:
                dst = operand()
                fsym = intern(r.text())
                args = [operand() for _ in range(r.u64())]
                bb.insns.append(Insn(op, dst=dst, f=fsym, args=args))
            elif op == COMMENT:
                bb.insns.append(insn_comment(r.text()))
            elif op == RETURN:
                bb.insns.append(insn_return(operand()))
            elif op == PHI:
                dst = operand()
                args = [operand() for _ in range(r.u64())]
                bb.insns.append(insn_phi(dst, args))
            elif op == ASSUME:
                bb.insns.append(insn_assume(operand(), r.text() or None))
    rebuild_edges(f)
    return f


def deserialize_unit(data: bytes) -> CompUnit:
    r = _ReaderBuf(data)
    if r.take(4) != b"MLU1":
        raise SerializeError("bad unit magic")
    version = r.u32()
    if version != _FORMAT_VERSION:
        raise SerializeError("unknown unit format version %d" % version)
    abi_hash = r.text()
    name = r.text()
    u = CompUnit(name)
    u.abi_hash = abi_hash
    u.speed = r.u8()
    u.debug = r.u8()
    constants_text = r.text()
    from .objects import value_to_list
    parsed = read(constants_text) if constants_text != "nil" else NIL
    relocs = value_to_list(parsed) if parsed is not NIL else []
    for v in relocs:
        u.intern_constant(v)
    n_funcs = r.u64()
    for _ in range(n_funcs):
        u.add_function(_read_func(r, u.data_relocs))
    u.top_level_run = _read_func(r, u.data_relocs)
    if r.pos != len(r.data):
        raise SerializeError("trailing bytes after unit payload")
    return u


def unit_fingerprint(u: CompUnit) -> str:
    return hashlib.sha256(serialize_unit(u)).hexdigest()
