"""Runtime Lisp objects: symbols, conses, the reader and the printer.

Values are represented with native Python types where possible:
fixnums are ints (range-checked at every construction site), floats are
floats, strings are str.  Symbols and conses get dedicated classes.
nil and t are interned symbols; nil doubles as the empty list.
"""

from __future__ import annotations

import math
import threading

FIXNUM_BITS = 61
FIXNUM_MAX = (1 << (FIXNUM_BITS - 1)) - 1
FIXNUM_MIN = -(1 << (FIXNUM_BITS - 1))


class MiniLispError(Exception):
    """Base class for all runtime signals.  error_class matches across
    executors and is what differential tests compare."""

    error_class = "error"

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.message = message
        self.payload = payload


class ReadError(MiniLispError):
    error_class = "read-error"

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = "%s (line %d, column %d)" % (message, line, column)
        super().__init__(message)
        self.line = line
        self.column = column


class PrintError(MiniLispError):
    error_class = "print-error"


class WrongTypeError(MiniLispError):
    error_class = "wrong-type-argument"


class ArityError(MiniLispError):
    error_class = "wrong-number-of-arguments"


class UnboundVariableError(MiniLispError):
    error_class = "void-variable"


class UnboundFunctionError(MiniLispError):
    error_class = "void-function"


class FixnumOverflowError(MiniLispError):
    error_class = "overflow-error"


class ArithError(MiniLispError):
    error_class = "arith-error"


class UserError(MiniLispError):
    error_class = "user-error"


class DepthExhaustedError(MiniLispError):
    error_class = "excessive-depth"


class CompileError(MiniLispError):
    error_class = "compile-error"


class Symbol:
    """An interned name.  Two reads of the same name yield the same object."""

    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name


_intern_lock = threading.Lock()
_obarray: dict[str, Symbol] = {}


def intern(name: str) -> Symbol:
    sym = _obarray.get(name)
    if sym is None:
        with _intern_lock:
            sym = _obarray.get(name)
            if sym is None:
                sym = Symbol(name)
                _obarray[name] = sym
    return sym


NIL = intern("nil")
T = intern("t")


class Cons:
    __slots__ = ("car", "cdr")

    def __init__(self, car, cdr):
        self.car = car
        self.cdr = cdr

    def __repr__(self):
        try:
            return print_value(self)
        except MiniLispError:
            return "#<cons>"


class Subr:
    """A primitive function.

    call-style is "fixed" for a known argument count of at most 8 and
    "spread" otherwise, in which case the callee receives a count and an
    argument vector.
    """

    __slots__ = ("name", "min_args", "max_args", "style", "pure",
                 "return_type", "impl", "shim_impl", "calls")

    MANY = "many"

    def __init__(self, name, min_args, max_args, impl, pure=False,
                 return_type=None, shim_impl=None):
        self.name = name
        self.min_args = min_args
        self.max_args = max_args
        self.style = ("spread"
                      if max_args == Subr.MANY or max_args > 8 else "fixed")
        self.pure = pure
        self.return_type = return_type
        self.impl = impl
        self.shim_impl = shim_impl
        self.calls = 0

    def __repr__(self):
        return "#<subr %s>" % self.name.name


def check_fixnum_range(n: int):
    if n > FIXNUM_MAX or n < FIXNUM_MIN:
        raise FixnumOverflowError("fixnum overflow: %d" % n)
    return n


def make_fixnum(n: int):
    return check_fixnum_range(n)


def is_fixnum(v):
    return type(v) is int


def is_float(v):
    return type(v) is float


def is_string(v):
    return type(v) is str


def is_symbol(v):
    return type(v) is Symbol


def is_cons(v):
    return type(v) is Cons


def values_eq(a, b):
    """Identity comparison: value identity on fixnums, object identity on
    everything else (symbols are interned, so name equality follows)."""
    if a is b:
        return True
    if type(a) is int and type(b) is int:
        return a == b
    return False


def list_to_value(items, tail=NIL):
    v = tail
    for item in reversed(items):
        v = Cons(item, v)
    return v


def value_to_list(v):
    """Proper list to Python list; raises on dotted tails."""
    out = []
    while v is not NIL:
        if type(v) is not Cons:
            raise WrongTypeError("not a proper list", v)
        out.append(v.car)
        v = v.cdr
    return out


def type_name(v):
    if v is NIL or v is T:
        return "boolean"
    t = type(v)
    if t is int:
        return "fixnum"
    if t is float:
        return "float"
    if t is Symbol:
        return "symbol"
    if t is Cons:
        return "cons"
    if t is str:
        return "string"
    if t is Subr:
        return "subr"
    return "t"


# ---------------------------------------------------------------------------
# Reader

_SYMBOL_CHARS = set("abcdefghijklmnopqrstuvwxyz"
                    "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
                    "0123456789"
                    "+-*/<>=!?_.&%$@^~:#")

_QUOTE = intern("quote")


class _Reader:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def error(self, msg):
        raise ReadError(msg, self.line, self.col)

    def peek(self):
        if self.pos >= len(self.text):
            return ""
        return self.text[self.pos]

    def advance(self):
        ch = self.text[self.pos]
        self.pos += 1
        if ch == "\n":
            self.line += 1
            self.col = 1
        else:
            self.col += 1
        return ch

    def skip_ws(self):
        while self.pos < len(self.text):
            ch = self.peek()
            if ch == ";":
                while self.pos < len(self.text) and self.peek() != "\n":
                    self.advance()
            elif ch.isspace():
                self.advance()
            else:
                return

    def read(self):
        self.skip_ws()
        if self.pos >= len(self.text):
            self.error("unexpected end of input")
        ch = self.peek()
        if ch == "(":
            return self.read_list()
        if ch == ")":
            self.error("unbalanced ')'")
        if ch == "'":
            self.advance()
            return Cons(_QUOTE, Cons(self.read(), NIL))
        if ch == '"':
            return self.read_string()
        return self.read_atom()

    def read_list(self):
        open_line, open_col = self.line, self.col
        self.advance()
        items = []
        tail = NIL
        while True:
            self.skip_ws()
            if self.pos >= len(self.text):
                raise ReadError("unterminated list", open_line, open_col)
            if self.peek() == ")":
                self.advance()
                break
            if self.peek() == "." and self._dot_is_separator():
                self.advance()
                tail = self.read()
                self.skip_ws()
                if self.peek() != ")":
                    self.error("malformed dotted list")
                self.advance()
                break
            items.append(self.read())
        if not items and tail is NIL:
            return NIL
        if not items:
            self.error("dotted list with no head")
        return list_to_value(items, tail)

    def _dot_is_separator(self):
        nxt = self.text[self.pos + 1:self.pos + 2]
        return nxt == "" or nxt in " \t\n()\";"

    def read_string(self):
        open_line, open_col = self.line, self.col
        self.advance()
        chars = []
        while True:
            if self.pos >= len(self.text):
                raise ReadError("unterminated string", open_line, open_col)
            ch = self.advance()
            if ch == '"':
                return "".join(chars)
            if ch == "\\":
                if self.pos >= len(self.text):
                    raise ReadError("unterminated string", open_line, open_col)
                esc = self.advance()
                chars.append({"n": "\n", "t": "\t", "\\": "\\",
                              '"': '"'}.get(esc, esc))
            else:
                chars.append(ch)

    def read_atom(self):
        start = self.pos
        while self.pos < len(self.text) and self.peek() in _SYMBOL_CHARS:
            self.advance()
        token = self.text[start:self.pos]
        if not token:
            self.error("stray character %r" % self.peek())
        return self.token_to_value(token)

    def token_to_value(self, token):
        try:
            n = int(token)
            return check_fixnum_range(n)
        except ValueError:
            pass
        if token in ("1.0e+INF", "-1.0e+INF"):
            return math.inf if token[0] != "-" else -math.inf
        if token in ("0.0e+NaN", "-0.0e+NaN"):
            return math.nan
        try:
            if any(c in token for c in ".eE") and token not in (".", "..."):
                f = float(token)
                return f
        except ValueError:
            pass
        return intern(token)


def read(text: str):
    """Parse one datum from text."""
    return _Reader(text).read()


def read_all(text: str):
    """Parse every top-level datum from text."""
    r = _Reader(text)
    forms = []
    while True:
        r.skip_ws()
        if r.pos >= len(r.text):
            return forms
        forms.append(r.read())


# ---------------------------------------------------------------------------
# Printer

_PRINT_NODE_LIMIT = 1_000_000


def _print_float(f):
    if math.isnan(f):
        return "0.0e+NaN"
    if math.isinf(f):
        return "1.0e+INF" if f > 0 else "-1.0e+INF"
    r = repr(f)
    # repr of a whole float is like "2.0"; exponents round-trip as-is
    return r


def _escape_string(s):
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def print_value(v) -> str:
    """Readable rendering: print_value(x) re-reads to an equal value."""
    out = []
    budget = [_PRINT_NODE_LIMIT]
    _print_into(v, out, budget)
    return "".join(out)


def _print_into(v, out, budget):
    budget[0] -= 1
    if budget[0] < 0:
        raise PrintError("structure too large or cyclic to print")
    t = type(v)
    if t is Symbol:
        out.append(v.name)
    elif t is int:
        out.append(str(v))
    elif t is float:
        out.append(_print_float(v))
    elif t is str:
        out.append(_escape_string(v))
    elif t is Cons:
        out.append("(")
        _print_into(v.car, out, budget)
        v = v.cdr
        while type(v) is Cons:
            budget[0] -= 1
            if budget[0] < 0:
                raise PrintError("structure too large or cyclic to print")
            out.append(" ")
            _print_into(v.car, out, budget)
            v = v.cdr
        if v is not NIL:
            out.append(" . ")
            _print_into(v, out, budget)
        out.append(")")
    else:
        raise PrintError("unprintable object: %r" % (v,))


def structurally_equal(a, b):
    if a is b:
        return True
    ta, tb = type(a), type(b)
    if ta is not tb:
        return False
    if ta is int:
        return a == b
    if ta is float:
        return a == b or (math.isnan(a) and math.isnan(b))
    if ta is str:
        return a == b
    if ta is Cons:
        while type(a) is Cons and type(b) is Cons:
            if not structurally_equal(a.car, b.car):
                return False
            a, b = a.cdr, b.cdr
        return structurally_equal(a, b)
    return False


def structural_key(v):
    """Hashable key for constant deduplication; distinguishes 1 from 1.0."""
    t = type(v)
    if t is Cons:
        return ("cons", structural_key(v.car), structural_key(v.cdr))
    if t is float:
        return ("float", _print_float(v))
    if t is Symbol:
        return ("symbol", v.name)
    if t is int:
        return ("fixnum", v)
    return ("string", v)
