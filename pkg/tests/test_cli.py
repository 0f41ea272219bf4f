"""Command-line runner and metrics."""

import json

import pytest

from inplace_wasm import I32
from inplace_wasm.cli import (
    EXIT_INVALID, EXIT_OK, EXIT_TRAP, EXIT_USAGE, RunConfig, UsageError, main, measure,
    parse_literal,
)
from inplace_wasm.testkit import ModuleBuilder

import wasm_fixtures as fx


@pytest.fixture
def fib_path(tmp_path):
    p = tmp_path / "fib.wasm"
    p.write_bytes(fx.fib_builder()[0].emit())
    return str(p)


@pytest.fixture
def trap_path(tmp_path):
    b = ModuleBuilder()
    b.function([], [I32], export="boom").i32_const(1).i32_const(0).i32_div_s()
    p = tmp_path / "trap.wasm"
    p.write_bytes(b.emit())
    return str(p)


class TestRun:
    def test_fib(self, fib_path, capsys):
        assert main(["run", fib_path, "--invoke", "fib", "--arg", "i32:10"]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "55"

    def test_trap(self, trap_path, capsys):
        assert main(["run", trap_path, "--invoke", "boom"]) == EXIT_TRAP
        assert capsys.readouterr().out.strip() == "trap: integer-divide-by-zero"

    def test_invalid_module(self, tmp_path, capsys):
        p = tmp_path / "bad.wasm"
        p.write_bytes(b"\x00asm\x02\x00\x00\x00")
        assert main(["run", str(p)]) == EXIT_INVALID

    def test_validation_error(self, tmp_path):
        b = ModuleBuilder()
        b.function([], [I32]).i64_const(1)
        p = tmp_path / "bad.wasm"
        p.write_bytes(b.emit())
        assert main(["run", str(p)]) == EXIT_INVALID

    def test_usage_errors(self, fib_path, capsys):
        assert main(["run", fib_path, "--invoke", "fib", "--arg", "f64:x"]) == EXIT_USAGE
        assert main(["run", fib_path, "--invoke", "fib"]) == EXIT_USAGE
        assert main(["run", fib_path, "--bogus"]) == EXIT_USAGE
        assert main(["run", fib_path, "--invoke", "nope"]) == EXIT_USAGE
        assert main(["run", "/nonexistent.wasm"]) == EXIT_USAGE

    def test_metrics_output(self, fib_path, capsys):
        code = main(["run", fib_path, "--invoke", "fib", "--arg", "i32:5", "--metrics",
                     "--json", "--repeat", "3"])
        assert code == EXIT_OK
        err = capsys.readouterr().err.strip().splitlines()
        keys = {line.split("=")[0] for line in err if "=" in line}
        assert {"space_ratio", "validation_time.mean"} <= keys
        record = json.loads(err[-1])
        assert "space_ratio" in record and "validation_time" in record

    def test_dump_and_oracle_check(self, fib_path, capsys):
        assert main(["run", fib_path, "--dump-sidetable", "--oracle-check"]) == EXIT_OK
        assert "Δip" in capsys.readouterr().err

    def test_trace(self, fib_path, capsys):
        assert main(["run", fib_path, "--invoke", "fib", "--arg", "i32:2", "--trace"]) == EXIT_OK
        assert "local.get" in capsys.readouterr().err


class TestLiterals:
    def test_parse(self):
        assert parse_literal("i32:10") == (I32, 10)

    @pytest.mark.parametrize("text", ["10", "i32:", "q32:1", "i32:abc"])
    def test_bad(self, text):
        with pytest.raises(UsageError):
            parse_literal(text)


class TestMeasure:
    def test_branch_free_module(self):
        r = measure(RunConfig(module=fx.straight_line_module(3), repeat=2))
        assert r.sidetable_entries == 0 and r.space_ratio == 0

    def test_byte_accounting(self):
        m = fx.compiled_style_module(4)
        r = measure(RunConfig(module=m, repeat=2))
        assert r.bytecode_bytes == sum(f.body.size for f in m.functions)
        assert r.sidetable_bytes == 16 * r.sidetable_entries
        assert r.space_ratio == pytest.approx(r.sidetable_bytes_compact / r.bytecode_bytes)

    def test_sidetable_time_is_small(self):
        r = measure(RunConfig(module=fx.straight_line_module(1000, 10), repeat=3))
        assert r.sidetable_time.mean < 0.5 * r.validation_time.mean
