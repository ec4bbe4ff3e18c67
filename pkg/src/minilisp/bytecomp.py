"""Front-end: compiles top-level MiniLisp forms into LAP, the stack-machine
instruction list executed by the baseline interpreter and lifted by the
middle-end.

Each function's frame is a locals array (arguments first, then one fresh
slot per let binding) plus an operand stack whose depth at every program
counter is fixed and checked by stack_depth_analysis.
"""

from __future__ import annotations

from .objects import (
    NIL, T, CompileError, Cons, MiniLispError, Symbol, intern, is_cons,
    print_value, structural_key, value_to_list,
)
from .primitives import Subr, lookup_primitive

# Opcode numbering is internal; the printed names below are the interface.
(OP_VARREF, OP_VARSET, OP_CONSTANT, OP_STACK_REF, OP_STACK_SET, OP_DUP,
 OP_DISCARD, OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL, OP_RETURN,
 OP_PLUS, OP_MINUS, OP_MULT, OP_QUO, OP_ADD1, OP_SUB1, OP_CAR, OP_CDR,
 OP_CONS, OP_SETCAR, OP_SETCDR, OP_EQ, OP_NOT, OP_EQLSIGN, OP_LSS, OP_GTR,
 OP_CALL, OP_TAG) = range(29)

OPCODE_NAMES = {
    OP_VARREF: "byte-varref",
    OP_VARSET: "byte-varset",
    OP_CONSTANT: "byte-constant",
    OP_STACK_REF: "byte-stack-ref",
    OP_STACK_SET: "byte-stack-set",
    OP_DUP: "byte-dup",
    OP_DISCARD: "byte-discard",
    OP_GOTO: "byte-goto",
    OP_GOTO_IF_NIL: "byte-goto-if-nil",
    OP_GOTO_IF_NOT_NIL: "byte-goto-if-not-nil",
    OP_RETURN: "byte-return",
    OP_PLUS: "byte-plus",
    OP_MINUS: "byte-minus",
    OP_MULT: "byte-mult",
    OP_QUO: "byte-quo",
    OP_ADD1: "byte-add1",
    OP_SUB1: "byte-sub1",
    OP_CAR: "byte-car",
    OP_CDR: "byte-cdr",
    OP_CONS: "byte-cons",
    OP_SETCAR: "byte-setcar",
    OP_SETCDR: "byte-setcdr",
    OP_EQ: "byte-eq",
    OP_NOT: "byte-not",
    OP_EQLSIGN: "byte-eqlsign",
    OP_LSS: "byte-lss",
    OP_GTR: "byte-gtr",
    OP_CALL: "byte-call",
    OP_TAG: "TAG",
}

# (pops, pushes) for opcodes with fixed stack effect.
_STACK_EFFECT = {
    OP_VARREF: (0, 1), OP_CONSTANT: (0, 1), OP_STACK_REF: (0, 1),
    OP_VARSET: (1, 0), OP_STACK_SET: (1, 0), OP_DUP: (0, 1),
    OP_DISCARD: (1, 0), OP_GOTO: (0, 0), OP_GOTO_IF_NIL: (1, 0),
    OP_GOTO_IF_NOT_NIL: (1, 0), OP_RETURN: (1, 0),
    OP_PLUS: (2, 1), OP_MINUS: (2, 1), OP_MULT: (2, 1), OP_QUO: (2, 1),
    OP_ADD1: (1, 1), OP_SUB1: (1, 1), OP_CAR: (1, 1), OP_CDR: (1, 1),
    OP_CONS: (2, 1), OP_SETCAR: (2, 1), OP_SETCDR: (2, 1),
    OP_EQ: (2, 1), OP_NOT: (1, 1), OP_EQLSIGN: (2, 1), OP_LSS: (2, 1),
    OP_GTR: (2, 1), OP_TAG: (0, 0),
}

# Primitive name -> (opcode, arity) for calls with a dedicated opcode.
_DEDICATED_OPS = {
    "car": (OP_CAR, 1), "cdr": (OP_CDR, 1), "cons": (OP_CONS, 2),
    "setcar": (OP_SETCAR, 2), "setcdr": (OP_SETCDR, 2),
    "eq": (OP_EQ, 2), "not": (OP_NOT, 1), "null": (OP_NOT, 1),
    "1+": (OP_ADD1, 1), "1-": (OP_SUB1, 1),
    "=": (OP_EQLSIGN, 2), "<": (OP_LSS, 2), ">": (OP_GTR, 2),
}

_NARY_ARITH = {"+": OP_PLUS, "-": OP_MINUS, "*": OP_MULT, "/": OP_QUO}

MAX_USER_ARITY = 8


class LapInsn:
    __slots__ = ("code", "arg")

    def __init__(self, code, arg=None):
        self.code = code
        self.arg = arg

    @property
    def name(self):
        return OPCODE_NAMES[self.code]

    def __repr__(self):
        if self.arg is None:
            return "(%s)" % self.name
        return "(%s %s)" % (self.name, self.arg)


class MalformedLapError(MiniLispError):
    error_class = "malformed-lap"


class LapProgram:
    """One function's LAP: constants vector, instruction list, and the
    operand-stack bound established by depth analysis."""

    def __init__(self, name, arg_count, n_locals, constants, insns):
        self.name = name
        self.arg_count = arg_count
        self.n_locals = n_locals
        self.constants = constants
        self.insns = insns
        self.max_depth = 0
        self.label_index = {}
        for i, insn in enumerate(insns):
            if insn.code == OP_TAG:
                if insn.arg in self.label_index:
                    raise MalformedLapError(
                        "duplicate TAG %s in %s" % (insn.arg, name.name))
                self.label_index[insn.arg] = i
        for insn in insns:
            if insn.code in (OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL):
                if insn.arg not in self.label_index:
                    raise MalformedLapError(
                        "jump to missing TAG %s in %s" % (insn.arg, name.name))
        self.max_depth = max(stack_depth_analysis(self).values(), default=0)

    def dump(self):
        """Textual LAP listing, one printed sexp per line."""
        lines = []
        for insn in self.insns:
            code = insn.code
            if code == OP_TAG:
                lines.append("(TAG %d)" % insn.arg)
            elif code in (OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL):
                lines.append("(%s TAG %d)" % (insn.name, insn.arg))
            elif code in (OP_CONSTANT, OP_VARREF, OP_VARSET):
                lines.append("(%s %s)" %
                             (insn.name, print_value(self.constants[insn.arg])))
            elif insn.arg is None:
                lines.append("(%s)" % insn.name)
            else:
                lines.append("(%s %d)" % (insn.name, insn.arg))
        return "\n".join(lines)


def stack_depth_analysis(prog: LapProgram) -> dict:
    """Entry operand-stack depth for every instruction index.

    Fails if two control paths reach the same index at different depths,
    if the stack would underflow, or if an instruction falls off the end.
    """
    insns = prog.insns
    depths = {}
    work = [(0, 0)]
    while work:
        idx, depth = work.pop()
        while True:
            if idx >= len(insns):
                raise MalformedLapError(
                    "control falls off the end of %s" % prog.name.name)
            seen = depths.get(idx)
            if seen is not None:
                if seen != depth:
                    raise MalformedLapError(
                        "stack depth mismatch at %d in %s: %d vs %d"
                        % (idx, prog.name.name, seen, depth))
                break
            depths[idx] = depth
            insn = insns[idx]
            code = insn.code
            if code == OP_CALL:
                pops, pushes = insn.arg + 1, 1
            else:
                pops, pushes = _STACK_EFFECT[code]
            if depth < pops:
                raise MalformedLapError(
                    "stack underflow at %d in %s" % (idx, prog.name.name))
            after = depth - pops + pushes
            if code == OP_RETURN:
                break
            if code == OP_GOTO:
                idx, depth = prog.label_index[insn.arg], after
                continue
            if code in (OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL):
                work.append((prog.label_index[insn.arg], after))
            idx, depth = idx + 1, after
    return depths


class SourceUnit:
    """A compiled source file: one LapProgram per defun plus a program
    performing the top-level effects (definitions and global sets) in
    order."""

    def __init__(self, path, forms, functions, top_level):
        self.path = path
        self.forms = forms
        self.functions = functions
        self.top_level = top_level

    def resolve_function(self, sym, ctx):
        from .baseline import LapFunction
        prog = self.functions.get(sym)
        if prog is None:
            raise CompileError("unit does not define %s" % sym.name)
        return LapFunction(prog, self)


_DEFUN = intern("defun")
_LET = intern("let")
_LETSTAR = intern("let*")
_IF = intern("if")
_WHILE = intern("while")
_PROGN = intern("progn")
_SETQ = intern("setq")
_QUOTE = intern("quote")
_AND = intern("and")
_OR = intern("or")
_LAMBDA = intern("lambda")
_DEFINE_FUNCTION = intern("internal--define-function")

_SPECIAL_HEADS = {_DEFUN, _LET, _LETSTAR, _IF, _WHILE, _PROGN, _SETQ,
                  _QUOTE, _AND, _OR, _LAMBDA}


class _FnCompiler:
    def __init__(self, name, params, gensym):
        self.name = name
        self.arg_count = len(params)
        self.gensym = gensym
        self.scope = []
        self.n_locals = 0
        for p in params:
            if type(p) is not Symbol:
                raise CompileError("parameter is not a symbol: %s"
                                   % print_value(p))
            self.scope.append((p, self.alloc_slot()))
        self.insns = []
        self.constants = []
        self.const_index = {}
        self.next_label = 0

    def alloc_slot(self):
        slot = self.n_locals
        self.n_locals += 1
        return slot

    def lookup(self, sym):
        for name, slot in reversed(self.scope):
            if name is sym:
                return slot
        return None

    def constant(self, v):
        key = structural_key(v)
        idx = self.const_index.get(key)
        if idx is None:
            idx = len(self.constants)
            self.constants.append(v)
            self.const_index[key] = idx
        return idx

    def emit(self, code, arg=None):
        self.insns.append(LapInsn(code, arg))

    def new_label(self):
        lbl = self.next_label
        self.next_label += 1
        return lbl

    def emit_tag(self, label):
        self.emit(OP_TAG, label)

    # -- expression compilation ------------------------------------------

    def comp_body_tail(self, body):
        if not body:
            self.emit(OP_CONSTANT, self.constant(NIL))
            self.emit(OP_RETURN)
            return
        for stmt in body[:-1]:
            self.comp_stmt(stmt)
        self.comp_tail(body[-1])

    def comp_tail(self, form):
        """Compile form so every control path ends in byte-return."""
        if is_cons(form):
            head = form.car
            if head is _IF:
                cond, branches = self._if_parts(form)
                else_label = self.new_label()
                self.comp_push(cond)
                self.emit(OP_GOTO_IF_NIL, else_label)
                self.comp_tail(branches[0])
                self.emit_tag(else_label)
                self.comp_tail(branches[1])
                return
            if head is _PROGN:
                self.comp_body_tail(value_to_list(form.cdr))
                return
            if head in (_LET, _LETSTAR):
                saved = len(self.scope)
                body = self._bind_let(form)
                self.comp_body_tail(body)
                del self.scope[saved:]
                return
            if head is _AND or head is _OR:
                self.comp_tail(self._desugar_bool(form))
                return
        self.comp_push(form)
        self.emit(OP_RETURN)

    def comp_stmt(self, form):
        """Compile form for effect; leaves the operand stack unchanged."""
        if type(form) is Symbol:
            if self.lookup(form) is None and form is not NIL and form is not T:
                self.emit(OP_VARREF, self.constant(form))
                self.emit(OP_DISCARD)
            return
        if not is_cons(form):
            return
        head = form.car
        if head is _SETQ:
            self._comp_setq(form, want_value=False)
            return
        if head is _IF:
            cond, branches = self._if_parts(form)
            then_form, else_form = branches
            else_label = self.new_label()
            self.comp_push(cond)
            if else_form is NIL:
                self.emit(OP_GOTO_IF_NIL, else_label)
                self.comp_stmt(then_form)
                self.emit_tag(else_label)
                return
            end_label = self.new_label()
            self.emit(OP_GOTO_IF_NIL, else_label)
            self.comp_stmt(then_form)
            self.emit(OP_GOTO, end_label)
            self.emit_tag(else_label)
            self.comp_stmt(else_form)
            self.emit_tag(end_label)
            return
        if head is _PROGN:
            for stmt in value_to_list(form.cdr):
                self.comp_stmt(stmt)
            return
        if head in (_LET, _LETSTAR):
            saved = len(self.scope)
            body = self._bind_let(form)
            for stmt in body:
                self.comp_stmt(stmt)
            del self.scope[saved:]
            return
        if head is _WHILE:
            self._comp_while(form)
            return
        if head is _QUOTE:
            return
        if head is _AND or head is _OR:
            self.comp_stmt(self._desugar_bool(form))
            return
        self.comp_push(form)
        self.emit(OP_DISCARD)

    def comp_push(self, form):
        """Compile form so it pushes exactly one value."""
        t = type(form)
        if t is Symbol:
            if form is NIL or form is T:
                self.emit(OP_CONSTANT, self.constant(form))
                return
            slot = self.lookup(form)
            if slot is not None:
                self.emit(OP_STACK_REF, slot)
            else:
                self.emit(OP_VARREF, self.constant(form))
            return
        if t is not Cons:
            self.emit(OP_CONSTANT, self.constant(form))
            return

        head = form.car
        if type(head) is not Symbol:
            raise CompileError("cannot call %s" % print_value(head))

        if head is _QUOTE:
            self.emit(OP_CONSTANT, self.constant(form.cdr.car))
            return
        if head is _IF:
            cond, branches = self._if_parts(form)
            else_label = self.new_label()
            end_label = self.new_label()
            self.comp_push(cond)
            self.emit(OP_GOTO_IF_NIL, else_label)
            self.comp_push(branches[0])
            self.emit(OP_GOTO, end_label)
            self.emit_tag(else_label)
            self.comp_push(branches[1])
            self.emit_tag(end_label)
            return
        if head is _PROGN:
            body = value_to_list(form.cdr)
            if not body:
                self.emit(OP_CONSTANT, self.constant(NIL))
                return
            for stmt in body[:-1]:
                self.comp_stmt(stmt)
            self.comp_push(body[-1])
            return
        if head in (_LET, _LETSTAR):
            saved = len(self.scope)
            body = self._bind_let(form)
            if not body:
                self.emit(OP_CONSTANT, self.constant(NIL))
            else:
                for stmt in body[:-1]:
                    self.comp_stmt(stmt)
                self.comp_push(body[-1])
            del self.scope[saved:]
            return
        if head is _WHILE:
            self._comp_while(form)
            self.emit(OP_CONSTANT, self.constant(NIL))
            return
        if head is _SETQ:
            self._comp_setq(form, want_value=True)
            return
        if head is _AND or head is _OR:
            self.comp_push(self._desugar_bool(form))
            return
        if head is _LAMBDA:
            raise CompileError("unsupported special form: lambda "
                               "(define functions with defun)")
        if head is _DEFUN:
            raise CompileError("defun is only allowed at top level")
        self._comp_call(head, value_to_list(form.cdr))

    # -- helpers ----------------------------------------------------------

    def _if_parts(self, form):
        rest = value_to_list(form.cdr)
        if len(rest) < 2 or len(rest) > 3:
            raise CompileError("malformed if: %s" % print_value(form))
        cond = rest[0]
        then_form = rest[1]
        else_form = rest[2] if len(rest) == 3 else NIL
        return cond, (then_form, else_form)

    def _bind_let(self, form):
        rest = value_to_list(form.cdr)
        if not rest:
            raise CompileError("malformed let")
        sequential = form.car is _LETSTAR
        bindings = value_to_list(rest[0]) if rest[0] is not NIL else []
        parsed = []
        for b in bindings:
            if type(b) is Symbol:
                parsed.append((b, NIL))
            elif is_cons(b):
                items = value_to_list(b)
                if len(items) == 1:
                    parsed.append((items[0], NIL))
                elif len(items) == 2:
                    parsed.append((items[0], items[1]))
                else:
                    raise CompileError("malformed let binding: %s"
                                       % print_value(b))
            else:
                raise CompileError("malformed let binding: %s"
                                   % print_value(b))
        if sequential:
            for name, init in parsed:
                self.comp_push(init)
                slot = self.alloc_slot()
                self.emit(OP_STACK_SET, slot)
                self.scope.append((name, slot))
        else:
            for _, init in parsed:
                self.comp_push(init)
            slots = [(name, self.alloc_slot()) for name, _ in parsed]
            for _, slot in reversed(slots):
                self.emit(OP_STACK_SET, slot)
            self.scope.extend(slots)
        return rest[1:]

    def _comp_setq(self, form, want_value):
        rest = value_to_list(form.cdr)
        if len(rest) % 2 != 0 or not rest:
            raise CompileError("malformed setq: %s" % print_value(form))
        pairs = [(rest[i], rest[i + 1]) for i in range(0, len(rest), 2)]
        for i, (name, valform) in enumerate(pairs):
            if type(name) is not Symbol or name is NIL or name is T:
                raise CompileError("setq: cannot set %s" % print_value(name))
            last = i == len(pairs) - 1
            self.comp_push(valform)
            if want_value and last:
                self.emit(OP_DUP)
            slot = self.lookup(name)
            if slot is not None:
                self.emit(OP_STACK_SET, slot)
            else:
                self.emit(OP_VARSET, self.constant(name))

    def _comp_while(self, form):
        rest = value_to_list(form.cdr)
        if not rest:
            raise CompileError("malformed while")
        start = self.new_label()
        end = self.new_label()
        self.emit_tag(start)
        self.comp_push(rest[0])
        self.emit(OP_GOTO_IF_NIL, end)
        for stmt in rest[1:]:
            self.comp_stmt(stmt)
        self.emit(OP_GOTO, start)
        self.emit_tag(end)

    def _desugar_bool(self, form):
        head = form.car
        args = value_to_list(form.cdr)
        if head is _AND:
            if not args:
                return T
            if len(args) == 1:
                return args[0]
            rest = Cons(_AND, form.cdr.cdr)
            return _list_form(_IF, args[0], rest, NIL)
        if not args:
            return NIL
        if len(args) == 1:
            return args[0]
        tmp = self.gensym("or")
        rest = Cons(_OR, form.cdr.cdr)
        binding = _list_form(_list_form(tmp, args[0]))
        return _list_form(_LET, binding, _list_form(_IF, tmp, tmp, rest))

    def _comp_call(self, fsym, args):
        name = fsym.name
        dedicated = _DEDICATED_OPS.get(name)
        if dedicated is not None:
            opcode, arity = dedicated
            if len(args) != arity:
                raise CompileError("%s called with %d arguments, needs %d"
                                   % (name, len(args), arity))
            for a in args:
                self.comp_push(a)
            self.emit(opcode)
            return
        if name in _NARY_ARITH and len(args) != 1:
            opcode = _NARY_ARITH[name]
            if not args:
                if name == "/":
                    raise CompileError("/ needs at least one argument")
                unit = {"+": 0, "-": 0, "*": 1}[name]
                self.emit(OP_CONSTANT, self.constant(unit))
                return
            self.comp_push(args[0])
            for a in args[1:]:
                self.comp_push(a)
                self.emit(opcode)
            return
        subr = lookup_primitive(fsym)
        if subr is not None:
            if len(args) < subr.min_args or (subr.max_args != Subr.MANY
                                             and len(args) > subr.max_args):
                raise CompileError("%s called with %d arguments"
                                   % (name, len(args)))
        self.emit(OP_CONSTANT, self.constant(fsym))
        for a in args:
            self.comp_push(a)
        self.emit(OP_CALL, len(args))

    def finish(self):
        self._renumber_labels()
        return LapProgram(self.name, self.arg_count, self.n_locals,
                          self.constants, self.insns)

    def _renumber_labels(self):
        used = set()
        for insn in self.insns:
            if insn.code in (OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL):
                used.add(insn.arg)
        remap = {}
        out = []
        for insn in self.insns:
            if insn.code == OP_TAG:
                if insn.arg not in used:
                    continue
                remap.setdefault(insn.arg, len(remap))
            out.append(insn)
        for insn in out:
            if insn.code == OP_TAG or insn.code in (
                    OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL):
                insn.arg = remap[insn.arg]
        self.insns = out


def _list_form(*items):
    from .objects import list_to_value
    return list_to_value(list(items))


TOP_LEVEL_NAME = intern("top-level-run")


def byte_compile(forms, path="<source>") -> SourceUnit:
    """Compile parsed top-level forms into a SourceUnit."""
    counter = [0]

    def gensym(base):
        counter[0] += 1
        return intern("--%s-%d" % (base, counter[0]))

    functions = {}
    top = _FnCompiler(TOP_LEVEL_NAME, [], gensym)
    for form in forms:
        if is_cons(form) and form.car is _DEFUN:
            rest = value_to_list(form.cdr)
            if len(rest) < 2:
                raise CompileError("malformed defun: %s" % print_value(form))
            name = rest[0]
            if type(name) is not Symbol:
                raise CompileError("defun name is not a symbol")
            params = value_to_list(rest[1]) if rest[1] is not NIL else []
            if len(params) > MAX_USER_ARITY:
                raise CompileError(
                    "%s: functions may take at most %d arguments"
                    % (name.name, MAX_USER_ARITY))
            fc = _FnCompiler(name, params, gensym)
            fc.comp_body_tail(rest[2:])
            functions[name] = fc.finish()
            top.emit(OP_CONSTANT, top.constant(_DEFINE_FUNCTION))
            top.emit(OP_CONSTANT, top.constant(name))
            top.emit(OP_CALL, 1)
            top.emit(OP_DISCARD)
        else:
            top.comp_stmt(form)
    top.emit(OP_CONSTANT, top.constant(NIL))
    top.emit(OP_RETURN)
    return SourceUnit(path, forms, functions, top.finish())


def compile_text(text, path="<string>") -> SourceUnit:
    from .objects import read_all
    return byte_compile(read_all(text), path=path)
