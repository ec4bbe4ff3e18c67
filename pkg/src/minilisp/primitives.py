"""Primitive function registry and the global environment.

Every executor (stack interpreter, register VM, native code) calls the
same host implementations through the same Subr records, so purity and
return-type metadata live here in one place.
"""

from __future__ import annotations

import math

from .objects import (
    NIL, T, Cons, FIXNUM_MAX, FIXNUM_MIN, ArityError, ArithError,
    FixnumOverflowError, MiniLispError, Subr, Symbol, UnboundFunctionError,
    UnboundVariableError, UserError, WrongTypeError, intern, print_value,
    values_eq,
)


class GlobalEnv:
    """Function cells and value cells for dynamic globals.

    Confined to one executor at a time; independent instances may be used
    from different threads.
    """

    def __init__(self):
        self.functions: dict[Symbol, object] = {}
        self.values: dict[Symbol, object] = {}
        self.loaded_units: list = []
        self._installed_unit_keys: set = set()

    def lookup_function(self, sym):
        fn = self.functions.get(sym)
        if fn is None:
            raise UnboundFunctionError("void function: %s" % sym.name, sym)
        return fn

    def lookup_value(self, sym):
        v = self.values.get(sym)
        if v is None and sym not in self.values:
            raise UnboundVariableError("void variable: %s" % sym.name, sym)
        return v

    def set_value(self, sym, v):
        self.values[sym] = v
        return v

    def snapshot(self):
        return (dict(self.functions), dict(self.values),
                list(self.loaded_units), set(self._installed_unit_keys))

    def restore(self, snap):
        self.functions = dict(snap[0])
        self.values = dict(snap[1])
        self.loaded_units = list(snap[2])
        self._installed_unit_keys = set(snap[3])


class ExecState:
    """Per-execution bookkeeping shared by all executors: the environment,
    the frame-depth budget, and optimization counters."""

    def __init__(self, env, max_depth=100_000):
        self.env = env
        self.max_depth = max_depth
        self.depth = 0
        self.peak_depth = 0
        self.unit = None
        self.hint_checks = 0
        self.elided_checks = 0

    def enter_frame(self):
        self.depth += 1
        if self.depth > self.peak_depth:
            self.peak_depth = self.depth
        if self.depth > self.max_depth:
            self.depth -= 1
            from .objects import DepthExhaustedError
            raise DepthExhaustedError(
                "call depth exceeded %d frames" % self.max_depth)

    def leave_frame(self):
        self.depth -= 1

    def call_function(self, fn, args):
        """Invoke any callable function object (subr or compiled)."""
        if type(fn) is Subr:
            check_subr_arity(fn, len(args))
            fn.calls += 1
            return fn.impl(self, *args)
        invoke = getattr(fn, "invoke", None)
        if invoke is None:
            raise WrongTypeError("not a function: %s" % print_value(fn), fn)
        fn.calls += 1
        return invoke(self, args)


def check_subr_arity(subr, n):
    if n < subr.min_args or (subr.max_args != Subr.MANY and n > subr.max_args):
        raise ArityError("%s called with %d arguments" % (subr.name.name, n))


def resolve_callee(ctx, fval):
    """funcall target: a symbol is looked up in the function cells at call
    time (the trampoline); function objects are used directly."""
    if type(fval) is Symbol:
        return ctx.env.lookup_function(fval)
    if type(fval) is Subr or hasattr(fval, "invoke"):
        return fval
    raise WrongTypeError("not a function: %s" % print_value(fval), fval)


# ---------------------------------------------------------------------------
# Implementations.  Each takes the ExecState first; pure subrs ignore it,
# which is what makes compile-time folding safe.

def _num(v, who):
    if type(v) is int or type(v) is float:
        return v
    raise WrongTypeError("%s: not a number: %s" % (who, print_value(v)), v)


def _fix_result(n):
    if n > FIXNUM_MAX or n < FIXNUM_MIN:
        raise FixnumOverflowError("fixnum overflow")
    return n


def p_car(ctx, v):
    if type(v) is Cons:
        return v.car
    if v is NIL:
        return NIL
    raise WrongTypeError("car: not a cons: %s" % print_value(v), v)


def p_cdr(ctx, v):
    if type(v) is Cons:
        return v.cdr
    if v is NIL:
        return NIL
    raise WrongTypeError("cdr: not a cons: %s" % print_value(v), v)


def p_cons(ctx, a, b):
    return Cons(a, b)


def p_setcar(ctx, cell, v):
    if type(cell) is not Cons:
        raise WrongTypeError("setcar: not a cons: %s" % print_value(cell),
                             cell)
    cell.car = v
    return v


def p_setcdr(ctx, cell, v):
    if type(cell) is not Cons:
        raise WrongTypeError("setcdr: not a cons: %s" % print_value(cell),
                             cell)
    cell.cdr = v
    return v


def p_eq(ctx, a, b):
    return T if values_eq(a, b) else NIL


def p_not(ctx, v):
    return T if v is NIL else NIL


def p_consp(ctx, v):
    return T if type(v) is Cons else NIL


def p_fixnump(ctx, v):
    return T if type(v) is int else NIL


def p_plus(ctx, *args):
    acc = 0
    for a in args:
        acc = acc + _num(a, "+")
    if type(acc) is int:
        return _fix_result(acc)
    return acc


def p_minus(ctx, *args):
    if not args:
        return 0
    if len(args) == 1:
        r = -_num(args[0], "-")
        return _fix_result(r) if type(r) is int else r
    acc = _num(args[0], "-")
    for a in args[1:]:
        acc = acc - _num(a, "-")
    if type(acc) is int:
        return _fix_result(acc)
    return acc


def p_times(ctx, *args):
    acc = 1
    for a in args:
        acc = acc * _num(a, "*")
    if type(acc) is int:
        return _fix_result(acc)
    return acc


def _truncdiv(a, b):
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def p_quo(ctx, *args):
    if not args:
        raise ArityError("/ called with 0 arguments")
    acc = _num(args[0], "/")
    for a in args[1:]:
        n = _num(a, "/")
        if type(acc) is int and type(n) is int:
            if n == 0:
                raise ArithError("division by zero")
            acc = _truncdiv(acc, n)
        elif type(n) is int and n == 0:
            raise ArithError("division by zero")
        else:
            fa, fb = float(acc), float(n)
            if fb == 0.0:
                if fa == 0.0 or math.isnan(fa):
                    acc = math.nan
                else:
                    acc = math.copysign(math.inf, fa) * math.copysign(1.0, fb)
            else:
                acc = fa / fb
    if type(acc) is int:
        return _fix_result(acc)
    return acc


def p_add1(ctx, v):
    n = _num(v, "1+")
    r = n + 1
    return _fix_result(r) if type(r) is int else r


def p_sub1(ctx, v):
    n = _num(v, "1-")
    r = n - 1
    return _fix_result(r) if type(r) is int else r


def _cmp(ctx, a, b, who):
    return _num(a, who), _num(b, who)


def p_lss(ctx, a, b):
    a, b = _cmp(ctx, a, b, "<")
    return T if a < b else NIL


def p_gtr(ctx, a, b):
    a, b = _cmp(ctx, a, b, ">")
    return T if a > b else NIL


def p_leq(ctx, a, b):
    a, b = _cmp(ctx, a, b, "<=")
    return T if a <= b else NIL


def p_geq(ctx, a, b):
    a, b = _cmp(ctx, a, b, ">=")
    return T if a >= b else NIL


def p_eqlsign(ctx, a, b):
    a, b = _cmp(ctx, a, b, "=")
    return T if a == b else NIL


def p_list(ctx, *args):
    v = NIL
    for a in reversed(args):
        v = Cons(a, v)
    return v


def p_length(ctx, v):
    if type(v) is str:
        return len(v)
    n = 0
    while v is not NIL:
        if type(v) is not Cons:
            raise WrongTypeError("length: not a proper list", v)
        n += 1
        v = v.cdr
    return n


def p_funcall(ctx, f, *args):
    fn = resolve_callee(ctx, f)
    return ctx.call_function(fn, list(args))


def p_symbol_value(ctx, sym):
    if type(sym) is not Symbol:
        raise WrongTypeError("symbol-value: not a symbol", sym)
    if sym is NIL or sym is T:
        return sym
    return ctx.env.lookup_value(sym)


def p_set(ctx, sym, v):
    if type(sym) is not Symbol or sym is NIL or sym is T:
        raise WrongTypeError("set: not a settable symbol", sym)
    return ctx.env.set_value(sym, v)


def p_error(ctx, fmt, *args):
    if type(fmt) is str:
        msg = fmt
        if args:
            msg += " " + " ".join(print_value(a) for a in args)
    else:
        msg = print_value(fmt)
    raise UserError(msg)


def p_hint_fixnum(ctx, v):
    if ctx is not None:
        ctx.hint_checks += 1
    if type(v) is not int:
        raise WrongTypeError("value is not a fixnum: %s" % print_value(v), v)
    return v


def p_hint_cons(ctx, v):
    if ctx is not None:
        ctx.hint_checks += 1
    if type(v) is not Cons:
        raise WrongTypeError("value is not a cons: %s" % print_value(v), v)
    return v


def p_define_function(ctx, sym):
    """Install a function from the compilation unit being executed or
    loaded.  Emitted by the front-end for every defun."""
    if ctx is None or ctx.unit is None:
        raise MiniLispError("no compilation unit is active")
    fn = ctx.unit.resolve_function(sym, ctx)
    ctx.env.functions[sym] = fn
    return sym


_SIGNAL_CLASSES = {
    1: WrongTypeError,
    2: WrongTypeError,
    3: FixnumOverflowError,
    4: ArithError,
}

_SIGNAL_MESSAGES = {
    1: "not a cons",
    2: "not a number",
    3: "fixnum overflow",
    4: "division by zero",
}


def p_internal_signal(ctx, code, payload):
    cls = _SIGNAL_CLASSES.get(code, MiniLispError)
    raise cls("%s: %s" % (_SIGNAL_MESSAGES.get(code, "error"),
                          print_value(payload)), payload)


MANY = Subr.MANY

# name, min, max, impl, pure, return-type
_PRIMITIVE_TABLE = [
    ("car", 1, 1, p_car, True, None),
    ("cdr", 1, 1, p_cdr, True, None),
    ("cons", 2, 2, p_cons, False, "cons"),
    ("setcar", 2, 2, p_setcar, False, None),
    ("setcdr", 2, 2, p_setcdr, False, None),
    ("eq", 2, 2, p_eq, True, "boolean"),
    ("not", 1, 1, p_not, True, "boolean"),
    ("null", 1, 1, p_not, True, "boolean"),
    ("consp", 1, 1, p_consp, True, "boolean"),
    ("fixnump", 1, 1, p_fixnump, True, "boolean"),
    ("+", 0, MANY, p_plus, True, "number"),
    ("-", 0, MANY, p_minus, True, "number"),
    ("*", 0, MANY, p_times, True, "number"),
    ("/", 1, MANY, p_quo, True, "number"),
    ("1+", 1, 1, p_add1, True, "number"),
    ("1-", 1, 1, p_sub1, True, "number"),
    ("<", 2, 2, p_lss, True, "boolean"),
    (">", 2, 2, p_gtr, True, "boolean"),
    ("<=", 2, 2, p_leq, True, "boolean"),
    (">=", 2, 2, p_geq, True, "boolean"),
    ("=", 2, 2, p_eqlsign, True, "boolean"),
    ("list", 0, MANY, p_list, False, None),
    ("length", 1, 1, p_length, True, "fixnum"),
    ("funcall", 1, MANY, p_funcall, False, None),
    ("symbol-value", 1, 1, p_symbol_value, False, None),
    ("set", 2, 2, p_set, False, None),
    ("error", 1, MANY, p_error, False, None),
    ("comp-hint-fixnum", 1, 1, p_hint_fixnum, True, "fixnum"),
    ("comp-hint-cons", 1, 1, p_hint_cons, True, "cons"),
    ("internal--define-function", 1, 1, p_define_function, False, None),
    ("internal--signal", 2, 2, p_internal_signal, False, None),
]

# Type hint subrs, keyed by symbol, with the type they assert.
HINT_TYPES = {"comp-hint-fixnum": "fixnum", "comp-hint-cons": "cons"}


def build_registry():
    regs = {}
    order = []
    for name, lo, hi, impl, pure, rtype in _PRIMITIVE_TABLE:
        sym = intern(name)
        subr = Subr(sym, lo, hi, impl, pure=pure, return_type=rtype)
        regs[sym] = subr
        order.append(subr)
    return regs, order


REGISTRY, REGISTRY_ORDER = build_registry()


def lookup_primitive(sym):
    return REGISTRY.get(sym)


def registry_signature() -> str:
    """Stable description of the primitive ABI; part of the unit hash."""
    parts = []
    for s in REGISTRY_ORDER:
        parts.append("%s/%s/%s/%s/%s/%s" %
                     (s.name.name, s.min_args, s.max_args, s.style,
                      int(s.pure), s.return_type or "-"))
    return ";".join(parts)


def register_primitives(env: GlobalEnv) -> GlobalEnv:
    """Install every primitive into a fresh environment's function cells."""
    for subr in REGISTRY_ORDER:
        env.functions[subr.name] = subr
    return env


def fresh_env() -> GlobalEnv:
    return register_primitives(GlobalEnv())
