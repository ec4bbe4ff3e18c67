"""Command-line driver: compile, run, bench."""

from __future__ import annotations

import argparse
import os
import sys

from .baseline import lap_exec
from .bytecomp import byte_compile
from .limple import print_limple
from .objects import MiniLispError, intern, print_value, read, read_all
from .pipeline import SpeedConfig, run_pipeline
from .primitives import ExecState, fresh_env
from .vm import vm_exec


def _load_source(path):
    with open(path) as fh:
        text = fh.read()
    return byte_compile(read_all(text), path=path)


def cmd_compile(args):
    source_unit = _load_source(args.file)
    cfg = SpeedConfig.from_speed(args.speed, args.debug)

    if args.emit == "lap":
        for name, prog in source_unit.functions.items():
            sys.stdout.write(";; %s\n%s\n" % (name.name, prog.dump()))
        sys.stdout.write(";; top-level\n%s\n" % source_unit.top_level.dump())
        return 0

    ssa_dumps = []

    def hook(stage, f):
        if stage == "ssa":
            ssa_dumps.append(print_limple(f))

    unit = run_pipeline(source_unit, cfg,
                        stage_hook=hook if args.emit == "ssa" else None)

    if args.emit == "ssa":
        sys.stdout.write("\n".join(ssa_dumps) + "\n")
        return 0
    if args.emit == "limple":
        sys.stdout.write(unit.dump() + "\n")
        return 0
    if args.emit == "c":
        from .native import emit_native_source
        sys.stdout.write(emit_native_source(unit, cfg))
        return 0

    out = args.output
    if out is None:
        out = os.path.splitext(os.path.basename(args.file))[0] + ".mln"
    if args.backend == "native":
        from .native import write_native_unit
        write_native_unit(unit, out, cfg, keep_source=args.debug >= 1)
    else:
        from .mln import write_unit
        write_unit(out, unit)
    sys.stdout.write("wrote %s\n" % out)
    return 0


def _call_args(arg_texts):
    return [read(a) for a in arg_texts]


def cmd_run(args):
    env = fresh_env()
    ctx = ExecState(env)
    fname = intern(args.call[0])
    call_args = _call_args(args.call[1:])
    if args.file.endswith(".mln"):
        from .mln import load_unit
        load_unit(args.file, env, ctx)
        fn = env.lookup_function(fname)
        result = ctx.call_function(fn, call_args)
    else:
        source_unit = _load_source(args.file)
        if args.backend == "native":
            import tempfile
            from .mln import load_unit
            from .native import write_native_unit
            cfg = SpeedConfig.from_speed(args.speed, args.debug)
            unit = run_pipeline(source_unit, cfg)
            with tempfile.TemporaryDirectory(prefix="mln-run-") as d:
                path = os.path.join(d, "unit.mln")
                write_native_unit(unit, path, cfg)
                load_unit(path, env, ctx)
                fn = env.lookup_function(fname)
                result = ctx.call_function(fn, call_args)
        elif args.backend == "lap":
            result = lap_exec(source_unit, fname, call_args, env, ctx=ctx)
        else:
            cfg = SpeedConfig.from_speed(args.speed, args.debug)
            unit = run_pipeline(source_unit, cfg)
            result = vm_exec(unit, fname, call_args, env, ctx=ctx)
    sys.stdout.write(print_value(result) + "\n")
    return 0


def cmd_bench(args):
    from .bench import format_csv, format_table, run_suite
    names = args.filter.split(",") if args.filter else None
    backends = args.backends.split(",")
    speeds = [int(s) for s in args.speeds.split(",")]
    results = run_suite(names=names, backends=backends, speeds=speeds,
                        scale=args.scale, repetitions=args.repetitions)
    if args.csv:
        sys.stdout.write(format_csv(results))
    else:
        sys.stdout.write(format_table(results) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="minilisp",
        description="MiniLisp compiler and runtime")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a .mel source file")
    c.add_argument("file")
    c.add_argument("--speed", type=int, default=2, choices=range(4))
    c.add_argument("--debug", type=int, default=0, choices=range(3))
    c.add_argument("--backend", choices=("vm", "native"), default="vm")
    c.add_argument("--emit", choices=("lap", "limple", "ssa", "c", "unit"),
                   default="unit")
    c.add_argument("--cc", help="C compiler for the native backend")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="run a compiled .mln or a .mel source")
    r.add_argument("file")
    r.add_argument("--call", required=True, nargs="+", metavar="F ARG",
                   help="function to invoke, then arguments as MiniLisp "
                        "literals")
    r.add_argument("--speed", type=int, default=2, choices=range(4))
    r.add_argument("--debug", type=int, default=0, choices=range(3))
    r.add_argument("--backend", choices=("vm", "native", "lap"),
                   default="vm")
    r.add_argument("--cc", help="C compiler for the native backend")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="run the benchmark suite")
    b.add_argument("--filter", help="comma-separated benchmark names")
    b.add_argument("--backends", default="vm",
                   help="comma-separated: lap,vm,native")
    b.add_argument("--speeds", default="3", help="comma-separated levels")
    b.add_argument("--scale", type=float, default=1.0)
    b.add_argument("--repetitions", type=int, default=5)
    b.add_argument("--csv", action="store_true")
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cc", None):
        os.environ["MLN_CC"] = args.cc
    try:
        return args.func(args)
    except MiniLispError as e:
        sys.stderr.write("error (%s): %s\n" % (e.error_class, e.message))
        return 1
    except FileNotFoundError as e:
        sys.stderr.write("error: %s\n" % e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
