"""Backend: storage layout decisions and the register-machine executor.

The VM translates each LIMPLE function once into bound step closures
(no per-instruction decode at run time) and then walks blocks with an
explicit frame stack, so dispatch overhead is gone and call depth is
bounded only by the ExecState budget.
"""

from __future__ import annotations

from .limple import (
    ASSUME, CALL, CALLREF, CALL_OPS, COMMENT, COND_JUMP, DIRECT_CALL, JUMP,
    LFunc, MVar, PHI, RETURN, SET, SETIMM, CompUnit, _collect_mvars,
)
from .objects import (
    NIL, T, ArityError, Cons, MiniLispError, Subr, Symbol, WrongTypeError,
    values_eq,
)
from .primitives import (
    ExecState, check_subr_arity, lookup_primitive, resolve_callee,
)

_FUNCALL = "funcall"

# Primitives final code emission may specialize, each taking a certainty
# flag that elides the type check when data-flow analysis proved it.
_INLINE_PRIMS = ("car", "cdr", "setcar", "setcdr", "1+", "1-", "negation")


def inline_primitive_table():
    """Specializable primitives and the type each certainty flag asserts."""
    return {name: "cons" if name in ("car", "cdr", "setcar", "setcdr")
            else "fixnum" for name in _INLINE_PRIMS}


class Frame:
    """Storage assignment for one function.

    basic: one array of frame-size value slots, addressed by stack slot.
    advanced: one automatic variable per SSA id, except m-vars consumed by
    exactly one spread call, which live in that call's argument array.
    """

    def __init__(self, kind):
        self.kind = kind
        self.loc = {}
        self.carray_sizes = {}
        self.n_storage = 0


def _spread_subr(fsym):
    subr = lookup_primitive(fsym)
    return subr if subr is not None and subr.style == "spread" else None


def frame_layout(f: LFunc, cfg, force_basic=False) -> LFunc:
    """Assign storage.  At non-zero optimization levels spread-style calls
    become callref instructions with a dedicated argument array."""
    advanced = cfg.advanced_frame_layout and not force_basic
    frame = Frame("advanced" if advanced else "basic")
    mvars = dict(_collect_mvars(f))
    for m in f.entry_arg_mvars:
        if m.id is not None:
            mvars.setdefault(m.id, m)

    if not advanced:
        for mid, m in mvars.items():
            frame.loc[mid] = ("slot", m.slot)
        frame.n_storage = f.frame_size
        f.frame = frame
        return f

    for bb in f.block_order():
        for i, insn in enumerate(bb.insns):
            if insn.op == CALL and isinstance(insn.f, Symbol) \
                    and insn.f.name == _FUNCALL:
                insn.op = CALLREF
            elif insn.op in (CALL, DIRECT_CALL) \
                    and _spread_subr(insn.f) is not None:
                insn.op = CALLREF

    uses: dict[int, int] = {}
    for _, insn in f.all_insns():
        for m in insn.args:
            if isinstance(m, MVar) and m.id is not None:
                uses[m.id] = uses.get(m.id, 0) + 1

    site = 0
    for bb in f.block_order():
        for insn in bb.insns:
            if insn.op != CALLREF:
                continue
            site += 1
            frame.carray_sizes[site] = len(insn.args)
            insn.reloc = site          # call-site id for the backends
            for pos, m in enumerate(insn.args):
                if (isinstance(m, MVar) and m.id is not None
                        and uses.get(m.id, 0) == 1
                        and m.id not in frame.loc):
                    frame.loc[m.id] = ("carray", site, pos)
                    m.alloc = frame.loc[m.id]
    for mid, m in sorted(mvars.items()):
        if mid not in frame.loc:
            frame.loc[mid] = ("auto", mid)
            m.alloc = frame.loc[mid]
    f.frame = frame
    return f


# ---------------------------------------------------------------------------
# Prepared execution

class _PreparedBlock:
    __slots__ = ("steps",)

    def __init__(self, steps):
        self.steps = steps


class PreparedFunction:
    def __init__(self, func: LFunc, unit_rt):
        self.func = func
        self.name = func.name
        self.arg_count = func.arg_count
        self.unit_rt = unit_rt
        self.elided_sites = 0
        self.blocks = []
        self.n_storage = 0
        self._build()

    def _build(self):
        f = self.func
        frame = f.frame
        order = f.block_order()
        index_of = {bb.name: i for i, bb in enumerate(order)}
        slot_index = {}
        if frame.kind == "basic":
            self.n_storage = frame.n_storage
            for mid, loc in frame.loc.items():
                slot_index[mid] = loc[1]
        else:
            next_idx = 0
            carray_base = {}
            for mid, loc in sorted(frame.loc.items()):
                if loc[0] == "auto":
                    slot_index[mid] = next_idx
                    next_idx += 1
            for site, size in sorted(frame.carray_sizes.items()):
                carray_base[site] = next_idx
                next_idx += size
            for mid, loc in frame.loc.items():
                if loc[0] == "carray":
                    slot_index[mid] = carray_base[loc[1]] + loc[2]
            self.n_storage = next_idx
            self._carray_base = carray_base
        self.arg_indices = []
        for k in range(f.arg_count):
            self.arg_indices.append(slot_index.get(k))

        for bb in order:
            steps = []
            for insn in bb.insns:
                if insn.op == COMMENT:
                    continue
                steps.append(self._step(insn, bb, slot_index, index_of))
            self.blocks.append(_PreparedBlock(steps))

    # -- operand accessors -------------------------------------------------

    def _src(self, m, slot_index):
        if m.id is not None:
            idx = slot_index[m.id]
            return ("st", idx)
        return ("k", m.constant)

    def _step(self, insn, bb, slot_index, index_of):
        op = insn.op
        if op == SET:
            d = slot_index[insn.dst.id]
            kind, v = self._src(insn.args[0], slot_index)
            if kind == "st":
                def step(st, fr, d=d, s=v):
                    st[d] = st[s]
            else:
                def step(st, fr, d=d, k=v):
                    st[d] = k
            return step
        if op == SETIMM:
            d = slot_index[insn.dst.id]
            imm = insn.imm

            def step(st, fr, d=d, k=imm):
                st[d] = k
            return step
        if op == PHI:
            d = slot_index[insn.dst.id]
            srcs = [self._src(a, slot_index) for a in insn.args]
            resolved = [s[1] if s[0] == "st" else ("k", s[1]) for s in srcs]

            def step(st, fr, d=d, srcs=resolved):
                s = srcs[fr.edge]
                if type(s) is tuple:
                    st[d] = s[1]
                else:
                    st[d] = st[s]
            return step
        if op == JUMP:
            target = insn.targets[0]
            ti = index_of[target]
            edge = self._edge_index(bb.name, target)
            return lambda st, fr, r=("j", ti, edge): r
        if op == COND_JUMP:
            a = self._src(insn.args[0], slot_index)
            b = self._src(insn.args[1], slot_index)
            t1, t2 = insn.targets
            j1 = ("j", index_of[t1], self._edge_index(bb.name, t1))
            j2 = ("j", index_of[t2], self._edge_index(bb.name, t2))
            if b == ("k", NIL) and a[0] == "st":
                def step(st, fr, ai=a[1], j1=j1, j2=j2):
                    return j1 if st[ai] is NIL else j2
                return step
            ga, gb = self._getter(a), self._getter(b)

            def step(st, fr, ga=ga, gb=gb, j1=j1, j2=j2):
                return j1 if values_eq(ga(st), gb(st)) else j2
            return step
        if op == RETURN:
            g = self._getter(self._src(insn.args[0], slot_index))
            return lambda st, fr, g=g: ("r", g(st))
        if op in CALL_OPS:
            return self._call_step(insn, slot_index)
        if op == ASSUME:
            return lambda st, fr: None
        raise AssertionError(op)

    def _getter(self, src):
        if src[0] == "st":
            idx = src[1]
            return lambda st, idx=idx: st[idx]
        k = src[1]
        return lambda st, k=k: k

    def _edge_index(self, from_name, to_name):
        return self.func.blocks[to_name].in_edges.index(from_name)

    # -- calls --------------------------------------------------------------

    def _call_step(self, insn, slot_index):
        dst = None if insn.dst is None or insn.dst.id is None \
            else slot_index[insn.dst.id]
        srcs = [self._src(a, slot_index) for a in insn.args]
        getters = [self._getter(s) for s in srcs]
        fsym = insn.f

        if fsym is not None and fsym.name != _FUNCALL:
            prim = lookup_primitive(fsym)
            if prim is not None:
                fast = self._fast_prim_step(insn, prim, dst, srcs)
                if fast is not None:
                    return fast

                def step(st, fr, impl=prim.impl, getters=getters, dst=dst):
                    v = impl(fr.ctx, *[g(st) for g in getters])
                    if dst is not None:
                        st[dst] = v
                    return None
                return step
            # direct call to a function of the same unit
            cell = [None]

            def step(st, fr, name=fsym, getters=getters, dst=dst, cell=cell):
                target = cell[0]
                if target is None:
                    target = cell[0] = fr.prepared.unit_rt.prepared(name)
                return ("c", target, [g(st) for g in getters], dst)
            return step

        # trampoline: resolve the callee symbol's function cell at call time
        callee_g = getters[0]
        arg_gs = getters[1:]

        def step(st, fr, callee_g=callee_g, arg_gs=arg_gs, dst=dst):
            ctx = fr.ctx
            fval = callee_g(st)
            fn = resolve_callee(ctx, fval)
            args = [g(st) for g in arg_gs]
            if type(fn) is VMFunction:
                fn.calls += 1
                return ("c", fn.prepared_fn(), args, dst)
            if type(fn) is Subr:
                check_subr_arity(fn, len(args))
                fn.calls += 1
                v = fn.impl(ctx, *args)
            else:
                fn.calls += 1
                v = fn.invoke(ctx, args)
            if dst is not None:
                st[dst] = v
            return None
        return step

    def _fast_prim_step(self, insn, prim, dst, srcs):
        """Closed-coded bodies for the small hot primitives; the type check
        disappears when propagation proved the operand type."""
        name = prim.name.name
        args = insn.args
        if name in ("car", "cdr") and len(srcs) == 1 and srcs[0][0] == "st":
            s = srcs[0][1]
            cert = args[0].type == "cons"
            impl = prim.impl
            if cert:
                self.elided_sites += 1
                if dst is None:
                    return lambda st, fr: None   # proven cons, result unused
                if name == "car":
                    def step(st, fr, s=s, d=dst):
                        st[d] = st[s].car
                else:
                    def step(st, fr, s=s, d=dst):
                        st[d] = st[s].cdr
                return step
            if dst is None:
                # result unused, but the type check is still observable
                def step(st, fr, s=s, impl=impl):
                    v = st[s]
                    if type(v) is not Cons:
                        impl(fr.ctx, v)
                return step
            if name == "car":
                def step(st, fr, s=s, d=dst, impl=impl):
                    v = st[s]
                    st[d] = v.car if type(v) is Cons else impl(fr.ctx, v)
            else:
                def step(st, fr, s=s, d=dst, impl=impl):
                    v = st[s]
                    st[d] = v.cdr if type(v) is Cons else impl(fr.ctx, v)
            return step
        if name in ("setcar", "setcdr") and len(srcs) == 2 \
                and srcs[0][0] == "st":
            s = srcs[0][1]
            getters = [self._getter(x) for x in srcs]
            cert = args[0].type == "cons"
            impl = prim.impl
            gv = getters[1]
            if cert:
                self.elided_sites += 1
                if name == "setcar":
                    def step(st, fr, s=s, gv=gv, d=dst):
                        v = gv(st)
                        st[s].car = v
                        if d is not None:
                            st[d] = v
                else:
                    def step(st, fr, s=s, gv=gv, d=dst):
                        v = gv(st)
                        st[s].cdr = v
                        if d is not None:
                            st[d] = v
                return step

            def step(st, fr, s=s, gv=gv, d=dst, impl=impl):
                v = impl(fr.ctx, st[s], gv(st))
                if d is not None:
                    st[d] = v
            return step
        if name in ("1+", "1-") and len(srcs) == 1:
            g = self._getter(srcs[0])
            cert = args[0].type == "fixnum"
            if cert:
                self.elided_sites += 1
            delta = 1 if name == "1+" else -1
            impl = prim.impl
            from .objects import FIXNUM_MAX, FIXNUM_MIN

            def step(st, fr, g=g, d=dst, delta=delta, impl=impl):
                v = g(st)
                if type(v) is int:
                    r = v + delta
                    if FIXNUM_MIN <= r <= FIXNUM_MAX:
                        if d is not None:
                            st[d] = r
                        return None
                v = impl(fr.ctx, v)
                if d is not None:
                    st[d] = v
            return step
        if name in ("+", "-", "*", "<", ">", "<=", ">=", "=") \
                and len(srcs) == 2:
            certs = args[0].type == "fixnum" and args[1].type == "fixnum"
            if certs:
                self.elided_sites += 1
            ga, gb = self._getter(srcs[0]), self._getter(srcs[1])
            impl = prim.impl
            from .objects import FIXNUM_MAX, FIXNUM_MIN
            if name in ("+", "-", "*"):
                pyop = {"+": lambda a, b: a + b, "-": lambda a, b: a - b,
                        "*": lambda a, b: a * b}[name]

                def step(st, fr, ga=ga, gb=gb, d=dst, pyop=pyop, impl=impl):
                    a, b = ga(st), gb(st)
                    if type(a) is int and type(b) is int:
                        r = pyop(a, b)
                        if FIXNUM_MIN <= r <= FIXNUM_MAX:
                            if d is not None:
                                st[d] = r
                            return None
                    v = impl(fr.ctx, a, b)
                    if d is not None:
                        st[d] = v
                return step
            pycmp = {"<": lambda a, b: a < b, ">": lambda a, b: a > b,
                     "<=": lambda a, b: a <= b, ">=": lambda a, b: a >= b,
                     "=": lambda a, b: a == b}[name]

            def step(st, fr, ga=ga, gb=gb, d=dst, pycmp=pycmp, impl=impl):
                a, b = ga(st), gb(st)
                if type(a) is int and type(b) is int:
                    if d is not None:
                        st[d] = T if pycmp(a, b) else NIL
                    return None
                v = impl(fr.ctx, a, b)
                if d is not None:
                    st[d] = v
            return step
        return None


class _VMFrame:
    __slots__ = ("prepared", "store", "block_idx", "insn_idx", "edge",
                 "dst_pending", "ctx")

    def __init__(self, prepared, args, ctx):
        if len(args) != prepared.arg_count:
            raise ArityError("%s called with %d arguments"
                             % (prepared.name.name, len(args)))
        self.prepared = prepared
        st = [NIL] * prepared.n_storage
        for k, idx in enumerate(prepared.arg_indices):
            if idx is not None:
                st[idx] = args[k]
        self.store = st
        self.block_idx = 0
        self.insn_idx = 0
        self.edge = 0
        self.dst_pending = None
        self.ctx = ctx


def _execute(prepared: PreparedFunction, args, ctx: ExecState):
    stack = [_VMFrame(prepared, args, ctx)]
    ctx.enter_frame()
    saved_unit = ctx.unit
    ctx.unit = prepared.unit_rt.handle
    try:
        while True:
            fr = stack[-1]
            blocks = fr.prepared.blocks
            bi, ii = fr.block_idx, fr.insn_idx
            steps = blocks[bi].steps
            st = fr.store
            control = None
            while control is None:
                r = steps[ii](st, fr)
                ii += 1
                if r is None:
                    continue
                kind = r[0]
                if kind == "j":
                    bi = r[1]
                    fr.edge = r[2]
                    steps = blocks[bi].steps
                    ii = 0
                    continue
                control = r
            if control[0] == "r":
                ctx.leave_frame()
                stack.pop()
                if not stack:
                    return control[1]
                parent = stack[-1]
                ctx.unit = parent.prepared.unit_rt.handle
                if parent.dst_pending is not None:
                    parent.store[parent.dst_pending] = control[1]
            else:       # ("c", target, args, dst)
                fr.block_idx = bi
                fr.insn_idx = ii
                fr.dst_pending = control[3]
                stack.append(_VMFrame(control[1], control[2], ctx))
                ctx.unit = control[1].unit_rt.handle
                ctx.enter_frame()
    except (TypeError, AttributeError) as exc:
        raise WrongTypeError(
            "type confusion while running %s (incorrect trusted hint?): %s"
            % (prepared.name.name, exc)) from exc
    finally:
        ctx.unit = saved_unit
        ctx.depth -= len(stack)


class VMFunction:
    """A compiled-unit function executable by the register VM."""

    __slots__ = ("unit_rt", "func", "calls", "native_loaded", "home_unit",
                 "_prepared")

    def __init__(self, unit_rt, func: LFunc):
        self.unit_rt = unit_rt
        self.func = func
        self.calls = 0
        self.native_loaded = False
        self.home_unit = None
        self._prepared = None

    @property
    def name(self):
        return self.func.name

    @property
    def arg_count(self):
        return self.func.arg_count

    def prepared_fn(self):
        if self._prepared is None:
            self._prepared = self.unit_rt.prepared(self.func.name)
        return self._prepared

    def invoke(self, ctx, args):
        return _execute(self.prepared_fn(), args, ctx)

    def __repr__(self):
        return "#<vm-function %s>" % self.func.name.name


class UnitRuntime:
    """Prepared-form cache for one CompUnit plus the glue the installer
    primitive needs."""

    def __init__(self, unit: CompUnit, cfg=None, force_basic=False):
        from .pipeline import SpeedConfig
        self.unit = unit
        self.cfg = cfg or SpeedConfig.from_speed(unit.speed, unit.debug)
        self.force_basic = force_basic
        self._prepared: dict = {}
        self._vmfuncs: dict = {}
        self.handle = _UnitHandle(self)

    def prepared(self, name) -> PreparedFunction:
        p = self._prepared.get(name)
        if p is None:
            func = self.unit.functions_by_name.get(name)
            if func is None and self.unit.top_level_run is not None \
                    and self.unit.top_level_run.name is name:
                func = self.unit.top_level_run
            if func is None:
                raise MiniLispError("unit %s has no function %s"
                                    % (self.unit.name, name.name))
            if func.frame is None:
                frame_layout(func, self.cfg, force_basic=self.force_basic)
            p = PreparedFunction(func, self)
            self._prepared[name] = p
        return p

    def vmfunction(self, name) -> VMFunction:
        fn = self._vmfuncs.get(name)
        if fn is None:
            func = self.unit.functions_by_name.get(name)
            if func is None:
                raise MiniLispError("unit %s has no function %s"
                                    % (self.unit.name, name.name))
            fn = VMFunction(self, func)
            self._vmfuncs[name] = fn
        return fn

    def elided_sites(self):
        for f in self.unit.functions_by_name:
            self.prepared(f)
        return sum(p.elided_sites for p in self._prepared.values())


class _UnitHandle:
    """What ExecState.unit points at while VM code runs; the function
    installer resolves definitions through it."""

    def __init__(self, unit_rt):
        self.unit_rt = unit_rt

    def resolve_function(self, sym, ctx):
        return self.unit_rt.vmfunction(sym)


def install_compunit(unit_rt: UnitRuntime, env, ctx=None):
    if ctx is None:
        ctx = ExecState(env)
    key = ("cu", id(unit_rt.unit), unit_rt.force_basic)
    if key in env._installed_unit_keys:
        return
    env._installed_unit_keys.add(key)
    tlr = unit_rt.unit.top_level_run
    _execute(unit_rt.prepared(tlr.name), [], ctx)


def unit_runtime(unit: CompUnit, cfg=None, force_basic=False) -> UnitRuntime:
    """Prepared-form runtime for a unit, cached on the unit itself."""
    cache = getattr(unit, "_vm_rt_cache", None)
    if cache is None:
        cache = unit._vm_rt_cache = {}
    key = (force_basic, id(cfg) if cfg is not None else None)
    rt = cache.get(key)
    if rt is None:
        rt = cache[key] = UnitRuntime(unit, cfg=cfg, force_basic=force_basic)
    return rt


def vm_exec(unit, fname, args, env, ctx=None, cfg=None, force_basic=False):
    """Execute fname from a compiled unit on the register VM."""
    if isinstance(unit, UnitRuntime):
        unit_rt = unit
    else:
        unit_rt = unit_runtime(unit, cfg=cfg, force_basic=force_basic)
    if ctx is None:
        ctx = ExecState(env)
    install_compunit(unit_rt, env, ctx)
    fn = env.lookup_function(fname)
    return ctx.call_function(fn, list(args))
