import os

import pytest

from conftest import needs_cc

from minilisp.cli import main

FOO = "(setq *bar* nil)\n(defun foo () (if *bar* (+ *bar* 2) 'foo))\n"


@pytest.fixture
def foo_mel(tmp_path):
    p = tmp_path / "foo.mel"
    p.write_text(FOO)
    return str(p)


def test_compile_emit_lap(foo_mel, capsys):
    assert main(["compile", foo_mel, "--emit", "lap"]) == 0
    out = capsys.readouterr().out
    assert "(byte-varref *bar*)" in out
    assert "(byte-plus)" in out


def test_compile_emit_limple_and_ssa(foo_mel, capsys):
    assert main(["compile", foo_mel, "--speed", "3", "--emit", "limple"]) == 0
    out = capsys.readouterr().out
    assert "bb_0:" in out and "(cond-jump" in out
    assert main(["compile", foo_mel, "--speed", "3", "--emit", "ssa"]) == 0
    out = capsys.readouterr().out
    assert ":id" in out


def test_compile_emit_c(foo_mel, capsys):
    assert main(["compile", foo_mel, "--speed", "3", "--emit", "c"]) == 0
    out = capsys.readouterr().out
    assert '#include "mln_shim.h"' in out
    assert "F666f6f_foo" in out


def test_compile_then_run_mln(foo_mel, tmp_path, capsys):
    out_path = str(tmp_path / "foo.mln")
    assert main(["compile", foo_mel, "--speed", "3", "-o", out_path]) == 0
    capsys.readouterr()
    assert main(["run", out_path, "--call", "foo"]) == 0
    assert capsys.readouterr().out.strip() == "foo"


def test_run_mel_directly(foo_mel, capsys):
    assert main(["run", foo_mel, "--call", "foo"]) == 0
    assert capsys.readouterr().out.strip() == "foo"


def test_run_with_arguments(tmp_path, capsys):
    p = tmp_path / "add.mel"
    p.write_text("(defun add (a b) (+ a b))\n")
    assert main(["run", str(p), "--call", "add", "20", "22"]) == 0
    assert capsys.readouterr().out.strip() == "42"
    assert main(["run", str(p), "--backend", "lap", "--call", "add",
                 "1", "2"]) == 0
    assert capsys.readouterr().out.strip() == "3"


def test_cli_reports_errors(tmp_path, capsys):
    p = tmp_path / "err.mel"
    p.write_text('(defun f () (error "kaput"))\n')
    assert main(["run", str(p), "--call", "f"]) == 1
    assert "user-error" in capsys.readouterr().err


def test_cli_bad_flags(capsys):
    with pytest.raises(SystemExit):
        main(["compile"])
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_bench_single_filter(capsys):
    assert main(["bench", "--filter", "fibn-rec", "--backends", "vm",
                 "--speeds", "3", "--scale", "0.05",
                 "--repetitions", "2"]) == 0
    out = capsys.readouterr().out
    assert "fibn-rec" in out and "speedup" in out


def test_bench_csv(capsys):
    assert main(["bench", "--filter", "fibn", "--backends", "vm",
                 "--speeds", "2", "--scale", "0.02", "--repetitions", "2",
                 "--csv"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("benchmark,backend,speed")


@needs_cc
def test_run_native_backend(foo_mel, capsys):
    assert main(["run", foo_mel, "--call", "foo", "--backend", "native",
                 "--speed", "3"]) == 0
    assert capsys.readouterr().out.strip() == "foo"


@needs_cc
def test_compile_native_unit_and_run(foo_mel, tmp_path, capsys):
    out_path = str(tmp_path / "foo.mln")
    assert main(["compile", foo_mel, "--backend", "native", "--speed", "3",
                 "-o", out_path]) == 0
    capsys.readouterr()
    assert os.path.exists(out_path) and os.path.exists(out_path + ".so")
    assert main(["run", out_path, "--call", "foo"]) == 0
    assert capsys.readouterr().out.strip() == "foo"
