"""Native backend: lowers LIMPLE to C source, drives the system C
toolchain to build a shared object per unit, and executes loaded objects
through a ctypes bridge.

Values cross the boundary as single tagged machine words (see the shim
header).  Heap values are handles into host-owned storage: the cons heap
is a flat array both sides index, floats and strings stay host-side and
opaque.  Structure is copied at the boundary, so in-place mutation of a
cons passed from the host is visible inside one native call but does not
alias the host object.
"""

from __future__ import annotations

import ctypes
import hashlib
import json
import os
import shutil
import subprocess

from .limple import (
    ASSUME, CALL, CALLREF, CALL_OPS, COMMENT, COND_JUMP, JUMP, LFunc, MVar,
    PHI, RETURN, SET, SETIMM, CompUnit,
)
from .objects import (
    NIL, T, ArityError, Cons, FIXNUM_MAX, FIXNUM_MIN, MiniLispError, Subr,
    Symbol, WrongTypeError, print_value, read, structural_key,
    value_to_list,
)
from .primitives import (
    REGISTRY_ORDER, ExecState, check_subr_arity, lookup_primitive,
)
from .shim import compute_abi_hash, shim_header_path

_FUNCALL = "funcall"


class NativeError(MiniLispError):
    error_class = "native-error"


class ToolchainMissingError(NativeError):
    error_class = "toolchain-missing"


# ---------------------------------------------------------------------------
# Name mangling

def sanitize_c_name(name: str) -> str:
    out = []
    for ch in name:
        if ch.isalnum():
            out.append(ch)
        elif ch == "-":
            out.append("_")
    return "".join(out)


def c_name(prefix: str, name: str) -> str:
    """Injective C symbol for a Lisp name: hex of the name plus a readable
    sanitized suffix."""
    return "%s%s_%s" % (prefix, name.encode("utf-8").hex(),
                        sanitize_c_name(name))


def function_symbol(name: str) -> str:
    return c_name("F", name)


def entry_field(name: str) -> str:
    return c_name("R", name)


# ---------------------------------------------------------------------------
# Emission

_INLINE_FIXED = {
    "car": ("mln_car", "cons", True),
    "cdr": ("mln_cdr", "cons", True),
    "setcar": ("mln_setcar", "cons", True),
    "setcdr": ("mln_setcdr", "cons", True),
    "1+": ("mln_add1", "fixnum", True),
    "1-": ("mln_sub1", "fixnum", True),
}

_INLINE_ARITH2 = {
    "+": "mln_add2", "-": "mln_sub2", "*": "mln_mul2", "/": "mln_div2",
    "<": "mln_lt2", ">": "mln_gt2", "<=": "mln_le2", ">=": "mln_ge2",
    "=": "mln_numeq2",
}

_INLINE_TOTAL = {
    "eq": "mln_eq2", "not": "mln_not", "null": "mln_not",
    "consp": "mln_consp", "fixnump": "mln_fixnump",
}

_CHECK = "if (*mln_err_pending) return MLN_NIL;"


def _c_string_literal(text: str) -> str:
    out = ['"']
    for b in text.encode("utf-8"):
        ch = chr(b)
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif 32 <= b < 127:
            out.append(ch)
        else:
            out.append("\\%03o" % b)
    out.append('"')
    return "".join(out)


class _FuncEmitter:
    def __init__(self, unit: CompUnit, func: LFunc, exported: str):
        self.unit = unit
        self.f = func
        self.exported = exported
        self.lines = []
        frame = func.frame
        if frame is None:
            raise NativeError("%s has no frame layout" % func.name.name)
        self.frame = frame

    def reloc(self, v) -> str:
        if v is NIL:
            return "MLN_NIL"
        if v is T:
            return "MLN_T"
        idx = self.unit._reloc_index.get(structural_key(v))
        if idx is None:
            raise NativeError("constant not in data relocations: %s"
                              % print_value(v))
        return "d_reloc[%d]" % idx

    def loc(self, m: MVar) -> str:
        if self.frame.kind == "basic":
            return "frame[%d]" % m.slot
        where = self.frame.loc.get(m.id)
        if where is None:
            raise NativeError("m-var id %s has no storage in %s"
                              % (m.id, self.f.name.name))
        if where[0] == "auto":
            return "local%d" % where[1]
        return "arr_%d[%d]" % (where[1], where[2])

    def rvalue(self, m: MVar) -> str:
        if m is None:
            raise NativeError("missing operand")
        if m.id is None:
            return self.reloc(m.constant)
        if m.const_vld:
            return self.reloc(m.constant)
        return self.loc(m)

    def emit(self, line, indent=1):
        self.lines.append("  " * indent + line)

    def build(self) -> str:
        f = self.f
        params = ", ".join("MLValue a%d" % k for k in range(f.arg_count))
        self.lines.append("MLValue %s(%s)" % (self.exported,
                                              params or "void"))
        self.lines.append("{")
        self._declare_storage()
        if f.comments_kept:
            self.emit("/* Lisp function: %s */" % f.name.name)
        for k in range(f.arg_count):
            where = self.frame.loc.get(k) if self.frame.kind != "basic" \
                else ("slot", k)
            if where is None:
                continue
            self.emit("%s = a%d;" % (self._loc_where(where, k), k))
        self.emit("goto bb_0;")
        copies = self._phi_copy_plan()
        for bb in f.block_order():
            self.lines.append("%s:" % bb.name)
            self._emit_block(bb, copies.get(bb.name, []))
        self.lines.append("}")
        return "\n".join(self.lines)

    def _loc_where(self, where, slot):
        if self.frame.kind == "basic":
            return "frame[%d]" % slot
        if where[0] == "auto":
            return "local%d" % where[1]
        return "arr_%d[%d]" % (where[1], where[2])

    def _declare_storage(self):
        frame = self.frame
        if frame.kind == "basic":
            self.emit("MLValue frame[%d];" % max(frame.n_storage, 1))
        else:
            autos = sorted(loc[1] for loc in frame.loc.values()
                           if loc[0] == "auto")
            for mid in autos:
                self.emit("MLValue local%d;" % mid)
            for site in sorted(frame.carray_sizes):
                self.emit("MLValue arr_%d[%d];"
                          % (site, max(frame.carray_sizes[site], 1)))

    def _phi_copy_plan(self):
        """Copies placed at the end of each predecessor realizing the phi
        assignments of its successors."""
        plan: dict[str, list] = {}
        for bb in self.f.block_order():
            phis = [i for i in bb.insns if i.op == PHI]
            if not phis:
                continue
            for which, pred in enumerate(bb.in_edges):
                pairs = []
                for phi in phis:
                    dst = self.loc(phi.dst)
                    src = self.rvalue(phi.args[which])
                    if dst != src:
                        pairs.append((dst, src))
                if pairs:
                    plan.setdefault(pred, []).extend(pairs)
        return plan

    def _emit_phi_copies(self, pairs):
        dsts = {d for d, _ in pairs}
        if any(s in dsts for _, s in pairs):
            self.emit("{")
            for i, (_, s) in enumerate(pairs):
                self.emit("MLValue mt%d = %s;" % (i, s), indent=2)
            for i, (d, _) in enumerate(pairs):
                self.emit("%s = mt%d;" % (d, i), indent=2)
            self.emit("}")
        else:
            for d, s in pairs:
                self.emit("%s = %s;" % (d, s))

    def _emit_block(self, bb, phi_copies):
        comments = self.f.comments_kept
        for insn in bb.insns:
            op = insn.op
            if op == COMMENT:
                if comments:
                    text = (insn.text or "").replace("*/", "* /")
                    self.emit("/* %s */" % text)
                continue
            if op == PHI or op == ASSUME:
                continue
            if op == SETIMM:
                self.emit("%s = %s;" % (self.loc(insn.dst),
                                        self.reloc(insn.imm)))
                continue
            if op == SET:
                self.emit("%s = %s;" % (self.loc(insn.dst),
                                        self.rvalue(insn.args[0])))
                continue
            if op in CALL_OPS:
                self._emit_call(insn)
                continue
            if op == JUMP:
                self._emit_phi_copies(phi_copies)
                self.emit("goto %s;" % insn.targets[0])
                continue
            if op == COND_JUMP:
                self._emit_phi_copies(phi_copies)
                a = self.rvalue(insn.args[0])
                b = self.rvalue(insn.args[1])
                self.emit("if (%s == %s) goto %s; else goto %s;"
                          % (a, b, insn.targets[0], insn.targets[1]))
                continue
            if op == RETURN:
                self.emit("return %s;" % self.rvalue(insn.args[0]))
                continue
            raise NativeError("cannot emit %s" % op)

    def _store(self, insn, expr, check=True):
        if insn.dst is not None and insn.dst.id is not None:
            self.emit("%s = %s;" % (self.loc(insn.dst), expr))
        else:
            self.emit("%s;" % expr)
        if check:
            self.emit(_CHECK)

    def _cert(self, m: MVar, typ: str) -> str:
        return "true" if m.type == typ else "false"

    def _emit_call(self, insn):
        fsym = insn.f
        name = fsym.name if isinstance(fsym, Symbol) else None
        args = insn.args
        comments = self.f.comments_kept

        if name is not None and name != _FUNCALL:
            prim = lookup_primitive(fsym)
            if prim is None:
                # direct call into this compilation unit
                if comments:
                    self.emit("/* direct call: %s */" % name)
                expr = "%s(%s)" % (function_symbol(name),
                                   ", ".join(self.rvalue(a) for a in args))
                self._store(insn, expr)
                return
            if comments:
                self.emit("/* calling subr: %s */" % name)
            spec = _INLINE_FIXED.get(name)
            if spec is not None and len(args) == 1 + (name in
                                                      ("setcar", "setcdr")):
                helper, typ, may_signal = spec
                cert = self._cert(args[0], typ)
                argv = ", ".join(self.rvalue(a) for a in args)
                no_check = cert == "true" and name in ("car", "cdr",
                                                       "setcar", "setcdr")
                self._store(insn, "%s(%s, %s)" % (helper, argv, cert),
                            check=not no_check)
                return
            if name == "-" and len(args) == 1:
                cert = self._cert(args[0], "fixnum")
                self._store(insn, "mln_negate(%s, %s)"
                            % (self.rvalue(args[0]), cert))
                return
            if name in _INLINE_ARITH2 and len(args) == 2:
                cert = ("true" if args[0].type == "fixnum"
                        and args[1].type == "fixnum" else "false")
                self._store(insn, "%s(%s, %s, %s)"
                            % (_INLINE_ARITH2[name], self.rvalue(args[0]),
                               self.rvalue(args[1]), cert))
                return
            if name in _INLINE_TOTAL \
                    and len(args) == (2 if name == "eq" else 1):
                argv = ", ".join(self.rvalue(a) for a in args)
                self._store(insn, "%s(%s)" % (_INLINE_TOTAL[name], argv),
                            check=False)
                return
            if prim.style == "fixed":
                expr = "freloc_link_table->%s(%s)" % (
                    entry_field(name),
                    ", ".join(self.rvalue(a) for a in args))
                self._store(insn, expr)
                return
            # spread-style primitive
            self._emit_spread(insn, entry_field(name))
            return

        # funcall trampoline: first argument is the callee
        if comments:
            self.emit("/* funcall trampoline */")
        self._emit_spread(insn, entry_field(_FUNCALL))

    def _emit_spread(self, insn, field):
        args = insn.args
        n = len(args)
        if insn.op == CALLREF and insn.reloc is not None:
            arr = "arr_%d" % insn.reloc
            for pos, a in enumerate(args):
                target = "%s[%d]" % (arr, pos)
                src = self.rvalue(a)
                if src != target:
                    self.emit("%s = %s;" % (target, src))
            expr = "mln_call_spread(freloc_link_table->%s, %d, %s)" \
                % (field, n, arr)
            self._store(insn, expr)
            return
        self.emit("{")
        self.emit("MLValue spr[%d];" % max(n, 1), indent=2)
        for pos, a in enumerate(args):
            self.emit("spr[%d] = %s;" % (pos, self.rvalue(a)), indent=2)
        if insn.dst is not None and insn.dst.id is not None:
            self.emit("%s = mln_call_spread(freloc_link_table->%s, %d, spr);"
                      % (self.loc(insn.dst), field, n), indent=2)
        else:
            self.emit("mln_call_spread(freloc_link_table->%s, %d, spr);"
                      % (field, n), indent=2)
        self.emit("}")
        self.emit(_CHECK)


def emit_native_source(unit: CompUnit, cfg) -> str:
    """Render a compilation unit as one self-contained C translation unit
    against the shim header.  Byte-identical for byte-identical units."""
    lines = ['#include "mln_shim.h"', ""]
    n_relocs = max(len(unit.data_relocs), 1)
    lines.append("MLValue d_reloc[%d];" % n_relocs)
    lines.append("struct mln_freloc_table *freloc_link_table;")
    lines.append("MLValue *mln_cons_cells;")
    lines.append("int64_t *mln_err_pending;")
    lines.append("")
    lines.append("static const char mln_constants_text[] = %s;"
                 % _c_string_literal(unit.constants_text()))
    lines.append("const char *text_data_reloc(void) "
                 "{ return mln_constants_text; }")
    lines.append("static const char mln_abi_hash_text[] = %s;"
                 % _c_string_literal(unit.abi_hash))
    lines.append("const char *mln_abi_hash(void) "
                 "{ return mln_abi_hash_text; }")
    lines.append("")
    protos = []
    bodies = []
    for f in unit.functions:
        exported = function_symbol(f.name.name)
        params = ", ".join("MLValue a%d" % k for k in range(f.arg_count))
        protos.append("MLValue %s(%s);" % (exported, params or "void"))
        bodies.append(_FuncEmitter(unit, f, exported).build())
    protos.append("MLValue top_level_run(void);")
    bodies.append(_FuncEmitter(unit, unit.top_level_run,
                               "top_level_run").build())
    lines.extend(protos)
    lines.append("")
    lines.append("\n\n".join(bodies))
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Toolchain

def find_compiler():
    cc = os.environ.get("MLN_CC")
    if cc:
        return cc
    for cand in ("cc", "gcc", "clang"):
        path = shutil.which(cand)
        if path:
            return path
    return None


def native_compile(source: str, out_path: str, cfg, keep_source=None):
    """Build a shared object from emitted C at the configured optimization
    level.  Raises ToolchainMissingError when no C compiler is available
    (the register VM backend remains usable)."""
    cc = find_compiler()
    if cc is None:
        raise ToolchainMissingError(
            "no C compiler found (set MLN_CC or install cc/gcc/clang); "
            "the VM backend remains available")
    shim = shim_header_path()
    if shim is None:
        raise ToolchainMissingError(
            "shim header not found (set MLN_SHIM_PATH)")
    c_path = out_path + ".c" if keep_source is None else keep_source
    with open(c_path, "w") as fh:
        fh.write(source)
    cmd = [cc, "-shared", "-fPIC", "-O%d" % cfg.backend_opt_level,
           "-I", str(shim.parent), c_path, "-o", out_path]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise NativeError("C toolchain failed (%s):\n%s"
                          % (" ".join(cmd), proc.stderr.strip()))
    if keep_source is None:
        os.unlink(c_path)
    return out_path


# ---------------------------------------------------------------------------
# Host-side runtime bridge

MASK64 = (1 << 64) - 1
TAG_FIXNUM = 1
TAG_SYMBOL = 2
TAG_CONS = 3
TAG_FLOAT = 4
TAG_STRING = 5
WORD_NIL = 0
WORD_T = 8

_SPREAD_CFUNC = ctypes.CFUNCTYPE(ctypes.c_uint64, ctypes.c_int64,
                                 ctypes.POINTER(ctypes.c_uint64))


def _fixed_cfunc(n):
    return ctypes.CFUNCTYPE(ctypes.c_uint64, *([ctypes.c_uint64] * n))


def _freloc_struct_type():
    fields = []
    for subr in REGISTRY_ORDER:
        fname = entry_field(subr.name.name)
        if subr.style == "spread":
            fields.append((fname, _SPREAD_CFUNC))
        else:
            fields.append((fname, _fixed_cfunc(subr.min_args)))

    class FrelocTable(ctypes.Structure):
        _fields_ = fields

    return FrelocTable


class NativeRuntime:
    """Per-environment bridge state: the cons heap shared with native
    code, handle tables, the entry-point table, and the error channel."""

    INITIAL_CONS_CAPACITY = 1 << 16

    def __init__(self, env):
        self.env = env
        self.cons_capacity = self.INITIAL_CONS_CAPACITY
        self.cons_cells = (ctypes.c_uint64 * (2 * self.cons_capacity))()
        self.cons_top = 1                      # handle 0 stays unused
        self.float_table = []
        self.string_table = []
        self.symbol_table = []
        self.symbol_index = {}
        # identity across the boundary: one handle per host object, one
        # host object per handle, resynchronized at every crossing
        self.obj_memo = {}       # id(obj) -> (obj, word)
        self.handle_memo = {}    # cons word -> host Cons
        self.err_pending = ctypes.c_int64(0)
        self.current_error = None
        self.ctx = None
        self.current_loading = None
        self.libs = []
        self._retired_heaps = []
        self._build_freloc()

    # -- value marshalling -------------------------------------------------

    def _symbol_word(self, sym):
        idx = self.symbol_index.get(sym)
        if idx is None:
            idx = len(self.symbol_table)
            self.symbol_table.append(sym)
            self.symbol_index[sym] = idx
        return (idx << 3) | TAG_SYMBOL

    def alloc_cons_words(self, car_w, cdr_w):
        top = self.cons_top
        if top >= self.cons_capacity:
            self._grow_heap()
        cells = self.cons_cells
        cells[2 * top] = car_w
        cells[2 * top + 1] = cdr_w
        self.cons_top = top + 1
        return (top << 3) | TAG_CONS

    def _grow_heap(self):
        new_cap = self.cons_capacity * 2
        new = (ctypes.c_uint64 * (2 * new_cap))()
        ctypes.memmove(new, self.cons_cells,
                       ctypes.sizeof(ctypes.c_uint64) * 2 * self.cons_top)
        self._retired_heaps.append(self.cons_cells)
        self.cons_cells = new
        self.cons_capacity = new_cap
        for lib in self.libs:
            self._point(lib, "mln_cons_cells", ctypes.addressof(new))

    def to_shim(self, v) -> int:
        t = type(v)
        if v is NIL:
            return WORD_NIL
        if v is T:
            return WORD_T
        if t is int:
            if v > FIXNUM_MAX or v < FIXNUM_MIN:
                raise MiniLispError("fixnum out of range at native boundary")
            return ((v << 3) & MASK64) | TAG_FIXNUM
        if t is Symbol:
            return self._symbol_word(v)
        if t is Cons:
            return self._sync_out(v)
        if t is float:
            got = self.obj_memo.get(id(v))
            if got is not None:
                return got[1]
            idx = len(self.float_table)
            self.float_table.append(v)
            word = (idx << 3) | TAG_FLOAT
            self.obj_memo[id(v)] = (v, word)
            return word
        if t is str:
            got = self.obj_memo.get(id(v))
            if got is not None:
                return got[1]
            idx = len(self.string_table)
            self.string_table.append(v)
            word = (idx << 3) | TAG_STRING
            self.obj_memo[id(v)] = (v, word)
            return word
        raise WrongTypeError(
            "cannot pass %s across the native boundary" % print_value(v))

    def from_shim(self, word: int):
        word &= MASK64
        tag = word & 7
        if tag == 0:
            if word == WORD_NIL:
                return NIL
            if word == WORD_T:
                return T
            raise NativeError("bad special word 0x%x" % word)
        if tag == TAG_FIXNUM:
            n = word >> 3
            if n >= (1 << 60):
                n -= 1 << 61
            return n
        if tag == TAG_SYMBOL:
            return self.symbol_table[word >> 3]
        if tag == TAG_CONS:
            return self._cons_from_heap(word)
        if tag == TAG_FLOAT:
            return self.float_table[word >> 3]
        if tag == TAG_STRING:
            return self.string_table[word >> 3]
        raise NativeError("bad value word 0x%x" % word)

    def _sync_out(self, v: Cons) -> int:
        """Host -> heap: walk the structure reachable from v, allocating a
        cell for any cons seen for the first time, then write every cell
        from the current host fields.  Repeated crossings of one object
        reuse its handle, so identity survives the boundary."""
        memo = self.obj_memo
        seen_ids = set()
        reachable = []
        stack = [v]
        while stack:
            node = stack.pop()
            nid = id(node)
            if nid in seen_ids:
                continue
            seen_ids.add(nid)
            got = memo.get(nid)
            if got is None:
                word = self.alloc_cons_words(WORD_NIL, WORD_NIL)
                memo[nid] = (node, word)
                self.handle_memo[word] = node
            else:
                word = got[1]
            reachable.append((node, word))
            for sub in (node.car, node.cdr):
                if type(sub) is Cons:
                    stack.append(sub)
        for node, word in reachable:
            idx = word >> 3
            car, cdr = node.car, node.cdr
            self.cons_cells[2 * idx] = (self.obj_memo[id(car)][1]
                                        if type(car) is Cons
                                        else self.to_shim(car))
            self.cons_cells[2 * idx + 1] = (self.obj_memo[id(cdr)][1]
                                            if type(cdr) is Cons
                                            else self.to_shim(cdr))
        return self.obj_memo[id(v)][1]

    def _cons_from_heap(self, word):
        """Heap -> host: mirror of _sync_out.  Cells already seen keep
        their host object; every mirrored field is refreshed from the
        current heap contents, so native mutations become visible."""
        seen = set()
        order = []
        stack = [word]
        while stack:
            w = stack.pop()
            if w in seen:
                continue
            seen.add(w)
            if w not in self.handle_memo:
                cell = Cons(NIL, NIL)
                self.handle_memo[w] = cell
                self.obj_memo[id(cell)] = (cell, w)
            order.append(w)
            idx = w >> 3
            for sub in (self.cons_cells[2 * idx],
                        self.cons_cells[2 * idx + 1]):
                if (sub & 7) == TAG_CONS and sub not in seen:
                    stack.append(sub)
        for w in order:
            idx = w >> 3
            cell = self.handle_memo[w]
            car_w = self.cons_cells[2 * idx]
            cdr_w = self.cons_cells[2 * idx + 1]
            cell.car = (self.handle_memo[car_w]
                        if (car_w & 7) == TAG_CONS
                        else self.from_shim(car_w))
            cell.cdr = (self.handle_memo[cdr_w]
                        if (cdr_w & 7) == TAG_CONS
                        else self.from_shim(cdr_w))
        return self.handle_memo[word]

    def refresh_mirrors(self):
        """Pull native mutations into every host object that has crossed
        the boundary; runs when an outermost native call returns."""
        for w in list(self.handle_memo):
            self._cons_from_heap(w)

    # -- callbacks -----------------------------------------------------------

    def _set_error(self, exc):
        self.current_error = exc
        self.err_pending.value = 1
        return 0

    def take_error(self):
        exc = self.current_error
        self.current_error = None
        self.err_pending.value = 0
        if exc is None:
            exc = NativeError("native code flagged an error without payload")
        return exc

    def _call_host(self, subr, args):
        result = subr.impl(self.ctx, *args)
        # write host-side structure mutations back into the heap
        for a in args:
            if type(a) is Cons:
                self._sync_out(a)
        return self.to_shim(result)

    def _wrap_fixed(self, subr):
        def cb(*words):
            try:
                args = [self.from_shim(w) for w in words]
                return self._call_host(subr, args)
            except MiniLispError as e:
                return self._set_error(e)
            except RecursionError:
                from .objects import DepthExhaustedError
                return self._set_error(
                    DepthExhaustedError("host recursion limit reached"))
            except BaseException as e:      # noqa: never unwind through C
                return self._set_error(NativeError(repr(e)))
        return _fixed_cfunc(subr.min_args)(cb)

    def _wrap_spread(self, subr):
        def cb(n, argv):
            try:
                args = [self.from_shim(argv[i]) for i in range(n)]
                check_subr_arity(subr, n)
                return self._call_host(subr, args)
            except MiniLispError as e:
                return self._set_error(e)
            except RecursionError:
                from .objects import DepthExhaustedError
                return self._set_error(
                    DepthExhaustedError("host recursion limit reached"))
            except BaseException as e:
                return self._set_error(NativeError(repr(e)))
        return _SPREAD_CFUNC(cb)

    def _hint_cb(self, want_tag, what):
        def cb(word):
            try:
                if self.ctx is not None:
                    self.ctx.hint_checks += 1
                if (word & 7) == want_tag:
                    return word          # identity, no conversion
                return self._set_error(WrongTypeError(
                    "value is not a %s: %s"
                    % (what, print_value(self.from_shim(word)))))
            except BaseException as e:
                return self._set_error(NativeError(repr(e)))
        return _fixed_cfunc(1)(cb)

    def _cons_cb(self):
        def cb(a, b):
            try:
                return self.alloc_cons_words(a, b)
            except BaseException as e:
                return self._set_error(NativeError(repr(e)))
        return _fixed_cfunc(2)(cb)

    def _list_cb(self):
        def cb(n, argv):
            try:
                out = WORD_NIL
                for i in range(n - 1, -1, -1):
                    out = self.alloc_cons_words(argv[i], out)
                return out
            except BaseException as e:
                return self._set_error(NativeError(repr(e)))
        return _SPREAD_CFUNC(cb)

    def _word_hint(self, word, want_tag, what):
        if self.ctx is not None:
            self.ctx.hint_checks += 1
        if (word & 7) == want_tag:
            return word
        raise WrongTypeError("value is not a %s: %s"
                             % (what, print_value(self.from_shim(word))))

    def _funcall_cb(self):
        """funcall keeps values in word form when the callee shares this
        runtime's representation: native functions are entered directly
        and the word-level primitives skip conversion entirely."""
        def cb(n, argv):
            try:
                if n < 1:
                    raise ArityError("funcall needs a function")
                fword = argv[0]
                if (fword & 7) == TAG_SYMBOL:
                    fn = self.env.lookup_function(
                        self.symbol_table[fword >> 3])
                else:
                    from .primitives import resolve_callee
                    fn = resolve_callee(self.ctx, self.from_shim(fword))
                fn.calls += 1
                if type(fn) is NativeFunction and fn.rt is self:
                    if n - 1 != fn.arity:
                        raise ArityError("%s called with %d arguments"
                                         % (fn.name.name, n - 1))
                    self.ctx.enter_frame()
                    try:
                        return fn.cfn(*[argv[i] for i in range(1, n)])
                    finally:
                        self.ctx.leave_frame()
                if type(fn) is Subr:
                    name = fn.name.name
                    if name == "cons" and n == 3:
                        return self.alloc_cons_words(argv[1], argv[2])
                    if name == "list":
                        out = WORD_NIL
                        for i in range(n - 1, 0, -1):
                            out = self.alloc_cons_words(argv[i], out)
                        return out
                    if name == "comp-hint-fixnum" and n == 2:
                        return self._word_hint(argv[1], TAG_FIXNUM, "fixnum")
                    if name == "comp-hint-cons" and n == 2:
                        return self._word_hint(argv[1], TAG_CONS, "cons")
                    check_subr_arity(fn, n - 1)
                    args = [self.from_shim(argv[i]) for i in range(1, n)]
                    return self._call_host(fn, args)
                args = [self.from_shim(argv[i]) for i in range(1, n)]
                result = fn.invoke(self.ctx, args)
                for a in args:
                    if type(a) is Cons:
                        self._sync_out(a)
                return self.to_shim(result)
            except MiniLispError as e:
                return self._set_error(e)
            except RecursionError:
                from .objects import DepthExhaustedError
                return self._set_error(
                    DepthExhaustedError("host recursion limit reached"))
            except BaseException as e:
                return self._set_error(NativeError(repr(e)))
        return _SPREAD_CFUNC(cb)

    def _build_freloc(self):
        struct_type = _freloc_struct_type()
        self._callbacks = []
        values = []
        for subr in REGISTRY_ORDER:
            name = subr.name.name
            if name == "cons":
                cb = self._cons_cb()
            elif name == "list":
                cb = self._list_cb()
            elif name == "funcall":
                cb = self._funcall_cb()
            elif name == "comp-hint-fixnum":
                cb = self._hint_cb(TAG_FIXNUM, "fixnum")
            elif name == "comp-hint-cons":
                cb = self._hint_cb(TAG_CONS, "cons")
            elif subr.style == "spread":
                cb = self._wrap_spread(subr)
            else:
                cb = self._wrap_fixed(subr)
            self._callbacks.append(cb)
            values.append(cb)
        self.freloc = struct_type(*values)

    # -- library plumbing ------------------------------------------------------

    def _point(self, lib, symbol, address):
        ctypes.c_void_p.in_dll(lib, symbol).value = address

    def attach_library(self, lib):
        self._point(lib, "freloc_link_table", ctypes.addressof(self.freloc))
        self._point(lib, "mln_cons_cells", ctypes.addressof(self.cons_cells))
        self._point(lib, "mln_err_pending",
                    ctypes.addressof(self.err_pending))
        self.libs.append(lib)


def get_native_runtime(env) -> NativeRuntime:
    rt = getattr(env, "_native_runtime", None)
    if rt is None:
        rt = env._native_runtime = NativeRuntime(env)
    return rt


class NativeFunction:
    """A function exported by a loaded native unit."""

    __slots__ = ("rt", "name", "arity", "cfn", "calls", "native_loaded",
                 "home_unit")

    def __init__(self, rt, lib, name, c_symbol, arity):
        self.rt = rt
        self.name = name
        self.arity = arity
        cfn = getattr(lib, c_symbol)
        cfn.restype = ctypes.c_uint64
        cfn.argtypes = [ctypes.c_uint64] * arity
        self.cfn = cfn
        self.calls = 0
        self.native_loaded = True
        self.home_unit = None

    @property
    def arg_count(self):
        return self.arity

    def invoke(self, ctx, args):
        if len(args) != self.arity:
            raise ArityError("%s called with %d arguments"
                             % (self.name.name, len(args)))
        rt = self.rt
        prev = rt.ctx
        rt.ctx = ctx
        ctx.enter_frame()
        try:
            words = [rt.to_shim(a) for a in args]
            r = self.cfn(*words)
            if rt.err_pending.value:
                raise rt.take_error()
            return rt.from_shim(r)
        finally:
            ctx.leave_frame()
            rt.ctx = prev
            if prev is None:
                # outermost crossing: pull native mutations into every
                # host mirror of heap structure
                rt.refresh_mirrors()

    def __repr__(self):
        return "#<native-function %s>" % self.name.name


class NativeLib:
    """One loaded shared object plus its manifest."""

    def __init__(self, rt, lib, manifest):
        self.rt = rt
        self.lib = lib
        self.manifest = manifest
        self.by_name = {fn["name"]: fn for fn in manifest["functions"]}
        self._functions = {}

    def resolve_function(self, sym, ctx):
        entry = self.by_name.get(sym.name)
        if entry is None:
            raise NativeError("unit does not export %s" % sym.name)
        fn = self._functions.get(sym.name)
        if fn is None:
            fn = NativeFunction(self.rt, self.lib, sym,
                                entry["c_symbol"], entry["arity"])
            self._functions[sym.name] = fn
        return fn

    def release(self):
        self._functions.clear()


# ---------------------------------------------------------------------------
# Unit production and loading

def build_manifest(unit: CompUnit, object_name: str,
                   object_sha256: str) -> dict:
    return {
        "object": object_name,
        "object_sha256": object_sha256,
        "abi_hash": unit.abi_hash,
        "unit_name": unit.name,
        "speed": unit.speed,
        "n_relocs": len(unit.data_relocs),
        "functions": [
            {"name": f.name.name,
             "c_symbol": function_symbol(f.name.name),
             "arity": f.arg_count}
            for f in unit.functions
        ],
    }


def write_native_unit(unit: CompUnit, mln_path: str, cfg,
                      keep_source=False) -> str:
    """Emit, build, and wrap a native unit: the .mln references a sibling
    shared object by name and content hash."""
    from .mln import KIND_NATIVE, write_mln_bytes
    source = emit_native_source(unit, cfg)
    so_path = mln_path + ".so"
    native_compile(source, so_path, cfg,
                   keep_source=(mln_path + ".c") if keep_source else None)
    with open(so_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    manifest = build_manifest(unit, os.path.basename(so_path), digest)
    payload = json.dumps(manifest, sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
    data = write_mln_bytes(KIND_NATIVE, unit.abi_hash,
                           unit.constants_text(), payload)
    with open(mln_path, "wb") as fh:
        fh.write(data)
    return mln_path


def load_native_payload(lu, mln, path, env, ctx):
    """Loader steps for a native unit: open the object, bind the entry
    table and heap pointers, read the constants through text_data_reloc,
    fill d_reloc, then run top_level_run."""
    try:
        manifest = json.loads(mln.payload.decode("utf-8"))
    except ValueError as e:
        raise NativeError("bad native manifest: %s" % e) from e
    obj_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                            manifest["object"])
    if not os.path.exists(obj_path):
        raise NativeError("native object missing: %s" % obj_path)
    with open(obj_path, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if digest != manifest["object_sha256"]:
        raise NativeError("native object content hash mismatch")
    rt = get_native_runtime(env)
    try:
        lib = ctypes.CDLL(obj_path)
    except OSError as e:
        raise NativeError("cannot load %s: %s" % (obj_path, e)) from e

    abi_fn = lib.mln_abi_hash
    abi_fn.restype = ctypes.c_char_p
    if abi_fn().decode("ascii") != compute_abi_hash():
        raise NativeError("unit abi hash does not match this runtime")
    rt.attach_library(lib)

    tdr = lib.text_data_reloc
    tdr.restype = ctypes.c_char_p
    constants_text = tdr().decode("utf-8")
    if constants_text != mln.constants_text:
        raise NativeError("constants text mismatch between object and unit")
    parsed = read(constants_text) if constants_text.strip() else NIL
    values = value_to_list(parsed) if parsed is not NIL else []
    if len(values) != manifest["n_relocs"]:
        raise NativeError("relocation count mismatch")
    if values:
        d_reloc = (ctypes.c_uint64 * len(values)).in_dll(lib, "d_reloc")
        for i, v in enumerate(values):
            d_reloc[i] = rt.to_shim(v)
    lu.reloc_values = values
    nlib = NativeLib(rt, lib, manifest)
    lu.native = nlib

    tlr = lib.top_level_run
    tlr.restype = ctypes.c_uint64
    prev_ctx, prev_loading, prev_unit = rt.ctx, rt.current_loading, ctx.unit
    rt.ctx = ctx
    rt.current_loading = nlib
    ctx.unit = nlib
    try:
        rt.err_pending.value = 0
        tlr()
        if rt.err_pending.value:
            raise rt.take_error()
    finally:
        rt.ctx, rt.current_loading, ctx.unit = (prev_ctx, prev_loading,
                                                prev_unit)
        rt.refresh_mirrors()


def native_exec(loaded_unit, fname, args, env, ctx=None):
    """Call a function installed by a loaded native unit."""
    if ctx is None:
        ctx = ExecState(env)
    fn = loaded_unit.installed.get(fname)
    if fn is None:
        fn = env.lookup_function(fname)
    return ctx.call_function(fn, list(args))
