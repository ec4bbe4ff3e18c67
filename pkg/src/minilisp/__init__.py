"""MiniLisp: a small lexically scoped Lisp compiled to stack bytecode,
lifted into an SSA IR, optimized, and executed by a register VM or by
natively compiled code loaded from shared objects."""

__version__ = "0.1.0"

from .objects import NIL, T, intern, print_value, read, read_all
from .primitives import ExecState, GlobalEnv, fresh_env, register_primitives
from .bytecomp import byte_compile, compile_text
from .baseline import lap_exec


def _late_imports():
    # pipeline/vm/mln pull in the whole compiler; imported lazily so that
    # `import minilisp` stays cheap for reader/printer use
    from .pipeline import SpeedConfig, compile_unit, run_pipeline
    from .vm import vm_exec
    from .mln import load_unit, unload_unit, write_unit
    return locals()


def __getattr__(name):
    lazy = ("SpeedConfig", "compile_unit", "run_pipeline", "vm_exec",
            "load_unit", "unload_unit", "write_unit")
    if name in lazy:
        value = _late_imports()[name]
        globals()[name] = value
        return value
    raise AttributeError(name)


__all__ = [
    "NIL", "T", "intern", "print_value", "read", "read_all",
    "ExecState", "GlobalEnv", "fresh_env", "register_primitives",
    "byte_compile", "compile_text", "lap_exec", "compile_unit",
    "run_pipeline", "SpeedConfig", "vm_exec", "load_unit", "unload_unit",
    "write_unit", "__version__",
]
