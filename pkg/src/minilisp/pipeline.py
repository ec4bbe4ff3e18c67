"""Speed-driven pass manager: sequences the middle-end over every function
of a source unit and assembles the result into a loadable CompUnit."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

from .bytecomp import SourceUnit
from .limple import CompUnit, MVar, NIL, SETIMM, T, verify_or_raise
from .limplify import limplify
from .objects import CompileError, MiniLispError
from .optimize import call_optim, dead_code, forward_propagate, rewrite_hints, tre
from .ssa import ssa_convert
from .vm import frame_layout


@dataclass(frozen=True)
class SpeedConfig:
    """Optimization/safety level 0-3 plus the derived per-pass switches."""

    speed: int
    debug: int
    propagate: bool
    call_optim: bool
    call_optim_intra_cu: bool
    dead_code: bool
    tre: bool
    advanced_frame_layout: bool
    backend_opt_level: int

    @classmethod
    def from_speed(cls, speed: int, debug: int = 0) -> "SpeedConfig":
        if speed not in (0, 1, 2, 3):
            raise CompileError("speed must be 0..3, got %r" % (speed,))
        if debug not in (0, 1, 2):
            raise CompileError("debug must be 0..2, got %r" % (debug,))
        return cls(
            speed=speed,
            debug=debug,
            propagate=speed >= 2,
            call_optim=speed >= 2,
            call_optim_intra_cu=speed == 3,
            dead_code=speed >= 2,
            tre=speed == 3,
            advanced_frame_layout=speed >= 1,
            backend_opt_level=speed,
        )


def unit_name_for_path(path: str) -> str:
    stem = os.path.splitext(os.path.basename(path or "unit"))[0]
    stem = re.sub(r"[^A-Za-z0-9_-]", "", stem)
    return stem or "unit"


def run_pipeline(unit: SourceUnit, cfg: SpeedConfig,
                 stage_hook=None) -> CompUnit:
    """limplify -> ssa -> (propagate, call-optim, dead-code at speed >= 2)
    -> (tre and intra-unit call-optim at 3) -> frame layout, per function;
    then constants are interned unit-wide and the abi hash stamped."""
    cu = CompUnit(unit_name_for_path(unit.path))
    cu.speed = cfg.speed
    cu.debug = cfg.debug
    unit_fn_names = set(unit.functions.keys())

    def hook(stage, f):
        if stage_hook is not None:
            stage_hook(stage, f)
        if cfg.debug >= 1:
            verify_or_raise(f, stage)

    def process(prog):
        try:
            f = limplify(prog, comments=cfg.debug >= 1)
            f.speed = cfg.speed
            hook("limplify", f)
            ssa_convert(f)
            hook("ssa", f)
            if cfg.speed == 3:
                rewrite_hints(f)
                hook("hints", f)
            if cfg.propagate:
                forward_propagate(f)
                hook("propagate", f)
            if cfg.call_optim:
                call_optim(f, unit_fn_names, cfg)
                hook("call-optim", f)
            if cfg.dead_code:
                dead_code(f)
                hook("dead-code", f)
            if cfg.tre and tre(f):
                ssa_convert(f)
                if cfg.propagate:
                    forward_propagate(f)
                if cfg.call_optim:
                    call_optim(f, unit_fn_names, cfg)
                if cfg.dead_code:
                    dead_code(f)
                hook("tre", f)
            frame_layout(f, cfg)
            hook("layout", f)
            verify_or_raise(f, "pipeline")
            return f
        except MiniLispError as e:
            raise CompileError("while compiling %s: %s"
                               % (prog.name.name, e.message)) from e

    for name, prog in unit.functions.items():
        cu.add_function(process(prog))
    cu.top_level_run = process(unit.top_level)
    _assemble_constants(cu)
    from .shim import compute_abi_hash
    cu.abi_hash = compute_abi_hash()
    return cu


def _assemble_constants(cu: CompUnit):
    """Gather every constant into the unit's deduplicated reloc vector, in
    first-encounter order over functions, blocks, and instructions."""
    for f in cu.all_funcs():
        for bb in f.block_order():
            for insn in bb.insns:
                if insn.op == SETIMM:
                    if insn.imm is not NIL and insn.imm is not T:
                        insn.reloc = cu.intern_constant(insn.imm)
                for a in insn.args:
                    if isinstance(a, MVar) and a.id is None and a.const_vld:
                        if a.constant is not NIL and a.constant is not T:
                            cu.intern_constant(a.constant)
                dst = insn.dst
                if dst is not None and dst.const_vld:
                    if dst.constant is not NIL and dst.constant is not T:
                        cu.intern_constant(dst.constant)


def compile_unit(text: str, speed=2, debug=0, path="<string>",
                 stage_hook=None) -> CompUnit:
    """Convenience: read, byte-compile and run the pipeline over text."""
    from .bytecomp import byte_compile
    from .objects import read_all
    cfg = SpeedConfig.from_speed(speed, debug)
    return run_pipeline(byte_compile(read_all(text), path=path), cfg,
                        stage_hook=stage_hook)
