"""Baseline stack-machine interpreter over LAP.

This is the reference executor: a deliberate fetch/decode/dispatch loop,
exactly the per-instruction work that the register VM and the native
backend remove.  Frames live on an explicit Python-level stack so call
depth is bounded only by the ExecState budget.
"""

from __future__ import annotations

from .bytecomp import (
    OP_ADD1, OP_CALL, OP_CAR, OP_CDR, OP_CONS, OP_CONSTANT, OP_DISCARD,
    OP_DUP, OP_EQ, OP_EQLSIGN, OP_GOTO, OP_GOTO_IF_NIL, OP_GOTO_IF_NOT_NIL,
    OP_GTR, OP_LSS, OP_MINUS, OP_MULT, OP_NOT, OP_PLUS, OP_QUO, OP_RETURN,
    OP_SETCAR, OP_SETCDR, OP_STACK_REF, OP_STACK_SET, OP_SUB1, OP_TAG,
    OP_VARREF, OP_VARSET, LapProgram, SourceUnit,
)
from .objects import NIL, T, ArityError, Cons, Subr, Symbol, values_eq
from .primitives import (
    ExecState, check_subr_arity, p_add1, p_car, p_cdr, p_eqlsign, p_gtr,
    p_lss, p_minus, p_plus, p_quo, p_setcar, p_setcdr, p_sub1, p_times,
    resolve_callee,
)


class LapFunction:
    """A byte-compiled function installed in an environment."""

    __slots__ = ("prog", "unit", "calls", "native_loaded", "home_unit")

    def __init__(self, prog: LapProgram, unit: SourceUnit):
        self.prog = prog
        self.unit = unit
        self.calls = 0
        self.native_loaded = False
        self.home_unit = None

    @property
    def name(self):
        return self.prog.name

    @property
    def arg_count(self):
        return self.prog.arg_count

    def invoke(self, ctx, args):
        return _run(self, args, ctx)

    def __repr__(self):
        return "#<byte-function %s>" % self.prog.name.name


class _Frame:
    __slots__ = ("prog", "unit", "locals", "stack", "pc")

    def __init__(self, fn: LapFunction, args):
        prog = fn.prog
        if len(args) != prog.arg_count:
            raise ArityError("%s called with %d arguments"
                             % (prog.name.name, len(args)))
        self.prog = prog
        self.unit = fn.unit
        self.locals = list(args) + [NIL] * (prog.n_locals - prog.arg_count)
        self.stack = []
        self.pc = 0


def install_unit(unit: SourceUnit, env, ctx=None):
    """Run the unit's top-level effects, defining its functions in env."""
    if ctx is None:
        ctx = ExecState(env)
    key = id(unit)
    if key in env._installed_unit_keys:
        return
    env._installed_unit_keys.add(key)
    top = LapFunction(unit.top_level, unit)
    _run(top, [], ctx)


def lap_exec(unit: SourceUnit, fname: Symbol, args, env, ctx=None):
    """Execute fname from unit under the baseline interpreter."""
    if ctx is None:
        ctx = ExecState(env)
    install_unit(unit, env, ctx)
    fn = env.lookup_function(fname)
    return ctx.call_function(fn, list(args))


def _run(fn: LapFunction, args, ctx):
    frames = [_Frame(fn, args)]
    ctx.enter_frame()
    saved_unit = ctx.unit
    result = NIL
    try:
        while frames:
            frame = frames[-1]
            insns = frame.prog.insns
            consts = frame.prog.constants
            labels = frame.prog.label_index
            stack = frame.stack
            slots = frame.locals
            env = ctx.env
            pc = frame.pc
            ctx.unit = frame.unit
            while True:
                insn = insns[pc]
                code = insn.code
                pc += 1
                if code == OP_STACK_REF:
                    stack.append(slots[insn.arg])
                elif code == OP_CONSTANT:
                    stack.append(consts[insn.arg])
                elif code == OP_STACK_SET:
                    slots[insn.arg] = stack.pop()
                elif code == OP_GOTO_IF_NIL:
                    if stack.pop() is NIL:
                        pc = labels[insn.arg]
                elif code == OP_GOTO_IF_NOT_NIL:
                    if stack.pop() is not NIL:
                        pc = labels[insn.arg]
                elif code == OP_GOTO:
                    pc = labels[insn.arg]
                elif code == OP_VARREF:
                    sym = consts[insn.arg]
                    v = env.values.get(sym)
                    if v is None and sym not in env.values:
                        env.lookup_value(sym)
                    stack.append(v)
                elif code == OP_VARSET:
                    env.values[consts[insn.arg]] = stack.pop()
                elif code == OP_CAR:
                    v = stack[-1]
                    stack[-1] = v.car if type(v) is Cons else p_car(ctx, v)
                elif code == OP_CDR:
                    v = stack[-1]
                    stack[-1] = v.cdr if type(v) is Cons else p_cdr(ctx, v)
                elif code == OP_PLUS:
                    b = stack.pop()
                    stack[-1] = p_plus(ctx, stack[-1], b)
                elif code == OP_MINUS:
                    b = stack.pop()
                    stack[-1] = p_minus(ctx, stack[-1], b)
                elif code == OP_MULT:
                    b = stack.pop()
                    stack[-1] = p_times(ctx, stack[-1], b)
                elif code == OP_QUO:
                    b = stack.pop()
                    stack[-1] = p_quo(ctx, stack[-1], b)
                elif code == OP_ADD1:
                    stack[-1] = p_add1(ctx, stack[-1])
                elif code == OP_SUB1:
                    stack[-1] = p_sub1(ctx, stack[-1])
                elif code == OP_LSS:
                    b = stack.pop()
                    stack[-1] = p_lss(ctx, stack[-1], b)
                elif code == OP_GTR:
                    b = stack.pop()
                    stack[-1] = p_gtr(ctx, stack[-1], b)
                elif code == OP_EQLSIGN:
                    b = stack.pop()
                    stack[-1] = p_eqlsign(ctx, stack[-1], b)
                elif code == OP_EQ:
                    b = stack.pop()
                    stack[-1] = T if values_eq(stack[-1], b) else NIL
                elif code == OP_NOT:
                    stack[-1] = T if stack[-1] is NIL else NIL
                elif code == OP_CONS:
                    b = stack.pop()
                    stack[-1] = Cons(stack[-1], b)
                elif code == OP_SETCAR:
                    b = stack.pop()
                    stack[-1] = p_setcar(ctx, stack[-1], b)
                elif code == OP_SETCDR:
                    b = stack.pop()
                    stack[-1] = p_setcdr(ctx, stack[-1], b)
                elif code == OP_DUP:
                    stack.append(stack[-1])
                elif code == OP_DISCARD:
                    stack.pop()
                elif code == OP_CALL:
                    n = insn.arg
                    callargs = stack[len(stack) - n:]
                    del stack[len(stack) - n:]
                    callee = resolve_callee(ctx, stack.pop())
                    if type(callee) is LapFunction:
                        callee.calls += 1
                        frame.pc = pc
                        frames.append(_Frame(callee, callargs))
                        ctx.enter_frame()
                        break
                    if type(callee) is Subr:
                        check_subr_arity(callee, n)
                        callee.calls += 1
                        stack.append(callee.impl(ctx, *callargs))
                    else:
                        callee.calls += 1
                        stack.append(callee.invoke(ctx, callargs))
                elif code == OP_RETURN:
                    result = stack.pop()
                    frames.pop()
                    ctx.leave_frame()
                    if frames:
                        frames[-1].stack.append(result)
                    break
                elif code == OP_TAG:
                    pass
                else:
                    raise AssertionError("unknown opcode %d" % code)
        return result
    finally:
        ctx.unit = saved_unit
        ctx.depth -= len(frames)
