"""Benchmark corpus and timing harness.

Each program lives in benchmarks/ as MiniLisp source with two entry
points: check (small, deterministic, compared across backends) and bench
(iteration-scaled work, self-contained so no structure crosses the native
boundary).  Iteration counts are frozen so that each benchmark runs for
roughly one second under the baseline stack interpreter on a desk-class
machine.  Timings repeat five times after one warm-up run and report the
mean and the speedup against the baseline.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
import time
from dataclasses import dataclass

from .baseline import lap_exec
from .bytecomp import compile_text
from .objects import intern
from .pipeline import SpeedConfig, compile_unit
from .primitives import ExecState, fresh_env
from .vm import vm_exec

BENCH_DIR = os.path.join(os.path.dirname(__file__), "benchmarks")

REPETITIONS = 5
BASELINE_DEPTH_BUDGET = 2_000_000


@dataclass(frozen=True)
class BenchSpec:
    """One corpus program: where it lives, how to check it, how to run it."""

    name: str
    filename: str
    iterations: int
    check_call: tuple = ("check", ())
    # deep self recursion: run on vm/native only where tail recursion
    # elimination applies, the host stack cannot absorb it otherwise
    needs_tre: bool = False

    def source(self) -> str:
        with open(os.path.join(BENCH_DIR, self.filename)) as fh:
            return fh.read()


# iteration counts frozen against the baseline interpreter (~1 s each)
CORPUS = [
    BenchSpec("inclist", "inclist.mel", 214),
    BenchSpec("inclist-type-hints", "inclist-type-hints.mel", 96),
    BenchSpec("listlen-tc", "listlen-tc.mel", 6, needs_tre=True),
    BenchSpec("bubble", "bubble.mel", 15),
    BenchSpec("bubble-no-cons", "bubble-no-cons.mel", 6),
    BenchSpec("fibn", "fibn.mel", 2400),
    BenchSpec("fibn-rec", "fibn-rec.mel", 42),
    BenchSpec("fibn-tc", "fibn-tc.mel", 1500),
]


def benchmark_corpus():
    return list(CORPUS)


def spec_by_name(name: str) -> BenchSpec:
    for spec in CORPUS:
        if spec.name == name:
            return spec
    raise KeyError(name)


@dataclass
class BenchResult:
    name: str
    backend: str
    speed: int
    iterations: int
    times: list
    mean: float
    baseline_mean: float

    @property
    def speedup(self):
        return self.baseline_mean / self.mean if self.mean > 0 else 0.0


class _Subject:
    """A prepared (backend, speed) incarnation of one benchmark."""

    def __init__(self, spec: BenchSpec, backend: str, speed: int,
                 workdir=None):
        self.spec = spec
        self.backend = backend
        self.speed = speed
        src = spec.source()
        self.env = fresh_env()
        self.ctx = ExecState(self.env, max_depth=BASELINE_DEPTH_BUDGET)
        if backend == "lap":
            self.unit = compile_text(src, path=spec.filename)
        elif backend == "vm":
            self.unit = compile_unit(src, speed=speed, path=spec.filename)
        elif backend == "native":
            from .mln import load_unit
            from .native import write_native_unit
            cu = compile_unit(src, speed=speed, path=spec.filename)
            mln_path = os.path.join(workdir, "%s-%d.mln"
                                    % (spec.name, speed))
            write_native_unit(cu, mln_path, SpeedConfig.from_speed(speed))
            load_unit(mln_path, self.env, self.ctx)
            self.unit = None
        else:
            raise ValueError("unknown backend %r" % backend)

    def call(self, fname, args):
        sym = intern(fname)
        if self.backend == "lap":
            return lap_exec(self.unit, sym, args, self.env, ctx=self.ctx)
        if self.backend == "vm":
            return vm_exec(self.unit, sym, args, self.env, ctx=self.ctx)
        fn = self.env.lookup_function(sym)
        return self.ctx.call_function(fn, list(args))

    def run_bench(self, iterations):
        return self.call("bench", [iterations])

    def run_check(self):
        fname, args = self.spec.check_call
        return self.call(fname, list(args))


def time_subject(subject: _Subject, iterations: int,
                 repetitions=REPETITIONS):
    """One warm-up run, then the timed repetitions."""
    subject.run_bench(max(1, iterations // 10))
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        subject.run_bench(iterations)
        times.append(time.perf_counter() - t0)
    return times


def run_benchmark(spec: BenchSpec, backend: str, speed: int, scale=1.0,
                  repetitions=REPETITIONS, workdir=None,
                  baseline_mean=None) -> BenchResult:
    iterations = max(1, int(spec.iterations * scale))
    if baseline_mean is None:
        base = _Subject(spec, "lap", 0)
        base_times = time_subject(base, iterations, repetitions)
        baseline_mean = sum(base_times) / len(base_times)
    subject = _Subject(spec, backend, speed, workdir=workdir)
    times = time_subject(subject, iterations, repetitions)
    return BenchResult(spec.name, backend, speed, iterations, times,
                       sum(times) / len(times), baseline_mean)


def run_suite(names=None, backends=("vm",), speeds=(3,), scale=1.0,
              repetitions=REPETITIONS, out=None):
    """Run the corpus, printing one row per (benchmark, backend, speed)."""
    specs = [spec_by_name(n) for n in names] if names else benchmark_corpus()
    results = []
    with tempfile.TemporaryDirectory(prefix="mln-bench-") as workdir:
        for spec in specs:
            base = _Subject(spec, "lap", 0)
            iterations = max(1, int(spec.iterations * scale))
            base_times = time_subject(base, iterations, repetitions)
            baseline_mean = sum(base_times) / len(base_times)
            for backend in backends:
                for speed in speeds:
                    if backend == "lap":
                        continue
                    if spec.needs_tre and speed < 3 and backend != "lap":
                        continue
                    results.append(run_benchmark(
                        spec, backend, speed, scale=scale,
                        repetitions=repetitions, workdir=workdir,
                        baseline_mean=baseline_mean))
    if out is not None:
        out.write(format_table(results) + "\n")
    return results


def format_table(results) -> str:
    header = ("benchmark", "backend", "speed", "iters",
              "baseline s", "subject s", "speedup")
    rows = [header]
    for r in results:
        rows.append((r.name, r.backend, str(r.speed), str(r.iterations),
                     "%.3f" % r.baseline_mean, "%.3f" % r.mean,
                     "%.1fx" % r.speedup))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i])
                               for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines)


def format_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["benchmark", "backend", "speed", "iterations",
                     "baseline_s", "subject_s", "speedup"])
    for r in results:
        writer.writerow([r.name, r.backend, r.speed, r.iterations,
                         "%.6f" % r.baseline_mean, "%.6f" % r.mean,
                         "%.3f" % r.speedup])
    return buf.getvalue()
