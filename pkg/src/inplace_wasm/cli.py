"""Command-line entry point.

    inplace-wasm run fib.wasm --invoke fib --arg i32:10
    inplace-wasm run m.wasm --metrics --json

Results go to stdout one per line.  Metrics, sidetable dumps, traces and
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field

from .binary import (
    F32, F64, FUNCREF, I32, I64, TYPE_NAMES, FuncType, GlobalType, Module, decode_module,
)
from .errors import DecodeError, InstantiationError, Trap, ValidationError, WasmError
from .interpreter import DEFAULT_MAX_FRAMES, DEFAULT_STACK_SLOTS, Interpreter, opcode_name
from .runtime import FunctionInstance, Global, HostFunction, Memory, Table, instantiate
from .validator import validate_module

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_TRAP = 2
EXIT_INVALID = 3
EXIT_USAGE = 64
EXIT_ORACLE = 70

_KINDS = {"i32": I32, "i64": I64, "f32": F32, "f64": F64}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    module: str | bytes
    invoke: str | None = None
    args: list = field(default_factory=list)        # "kind:value" literals
    metrics: bool = False
    json: bool = False
    dump_sidetable: bool = False
    trace: bool = False
    oracle_check: bool = False
    tags: bool = False
    stack_slots: int = DEFAULT_STACK_SLOTS
    max_frames: int = DEFAULT_MAX_FRAMES
    repeat: int = 10
    workers: int | None = None


@dataclass
class Timing:
    """Monotonic durations in seconds over ``samples`` repetitions."""

    mean: float
    p5: float
    p95: float
    samples: int

    @classmethod
    def of(cls, values: list) -> "Timing":
        if len(values) == 1:
            v = values[0]
            return cls(v, v, v, 1)
        cuts = statistics.quantiles(values, n=20, method="inclusive")
        return cls(statistics.fmean(values), cuts[0], cuts[-1], len(values))


@dataclass
class MetricsReport:
    bytecode_bytes: int
    functions: int
    sidetable_entries: int
    sidetable_bytes: int
    sidetable_bytes_compact: int
    space_ratio: float
    validation_time: Timing
    sidetable_time: Timing
    execution_time: Timing | None = None

    @property
    def validation_time_per_byte(self) -> float:
        return self.validation_time.mean / self.bytecode_bytes if self.bytecode_bytes else 0.0

    @property
    def sidetable_time_per_byte(self) -> float:
        return self.sidetable_time.mean / self.bytecode_bytes if self.bytecode_bytes else 0.0

    @property
    def sidetable_bytes_per_byte(self) -> float:
        return self.sidetable_bytes / self.bytecode_bytes if self.bytecode_bytes else 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["validation_time_per_byte"] = self.validation_time_per_byte
        d["sidetable_time_per_byte"] = self.sidetable_time_per_byte
        d["sidetable_bytes_per_byte"] = self.sidetable_bytes_per_byte
        return d

    def lines(self) -> list[str]:
        out = []
        for key, value in self.as_dict().items():
            if isinstance(value, dict):
                for sub in ("mean", "p5", "p95"):
                    out.append(f"{key}.{sub}={value[sub]:.9f}")
            elif value is None:
                continue
            elif isinstance(value, float):
                out.append(f"{key}={value:.6g}")
            else:
                out.append(f"{key}={value}")
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))


def _load(source) -> Module:
    if isinstance(source, Module):
        return source
    if isinstance(source, (bytes, bytearray)):
        return decode_module(bytes(source))
    with open(source, "rb") as fh:
        return decode_module(fh.read())


def measure(config) -> MetricsReport:
    """Space and time metrics for one module.

    ``config`` is a :class:`RunConfig`, a module path, raw bytes or a decoded
    :class:`Module`.  Sidetable time is the paired difference between
    validating with and without sidetable construction.
    """
    if not isinstance(config, RunConfig):
        config = RunConfig(module=config)
    module = _load(config.module)
    validated = validate_module(module, workers=config.workers)
    bytecode = sum(f.body.size for f in module.functions)
    entries = sum(len(v.sidetable) for v in validated)
    compact = sum(v.sidetable.compact_nbytes() for v in validated)

    reps = max(1, config.repeat)
    with_st, without_st, deltas = [], [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        validate_module(module, workers=config.workers, track_sidetable=False)
        t1 = time.perf_counter()
        validate_module(module, workers=config.workers)
        t2 = time.perf_counter()
        without_st.append(t1 - t0)
        with_st.append(t2 - t1)
        deltas.append((t2 - t1) - (t1 - t0))

    execution = None
    if config.invoke:
        inst = instantiate(module, _host_imports(), validated=validated,
                           interpreter=_interpreter(config))
        func, args = _resolve_invocation(inst, config)
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            try:
                inst.interpreter.call(func, args)
            except Trap:
                pass
            samples.append(time.perf_counter() - t0)
        execution = Timing.of(samples)

    return MetricsReport(
        bytecode_bytes=bytecode,
        functions=len(module.functions),
        sidetable_entries=entries,
        sidetable_bytes=16 * entries,
        sidetable_bytes_compact=compact,
        space_ratio=compact / bytecode if bytecode else 0.0,
        validation_time=Timing.of(with_st),
        sidetable_time=Timing.of(deltas),
        execution_time=execution,
    )


# -- host environment --------------------------------------------------------------

def _host_imports(out=None) -> dict:
    """The conventional ``spectest`` printers and objects."""
    out = out or sys.stdout

    def printer(*values):
        print(" ".join(_format(v) for v in values), file=out)

    def fn(name, *params):
        return HostFunction(FuncType(tuple(params), ()), printer, name)

    return {"spectest": {
        "print": fn("print"),
        "print_i32": fn("print_i32", I32),
        "print_i64": fn("print_i64", I64),
        "print_f32": fn("print_f32", F32),
        "print_f64": fn("print_f64", F64),
        "print_i32_f32": fn("print_i32_f32", I32, F32),
        "print_f64_f64": fn("print_f64_f64", F64, F64),
        "global_i32": Global(GlobalType(I32, False), 666),
        "global_i64": Global(GlobalType(I64, False), 666),
        "global_f32": Global(GlobalType(F32, False), 666.6),
        "global_f64": Global(GlobalType(F64, False), 666.6),
        "table": Table(FUNCREF, 10, 20),
        "memory": Memory(1, 2),
    }}


def _format(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, FunctionInstance):
        return f"funcref:{v.index}"
    if v is None:
        return "null"
    return str(v)


def parse_literal(text: str):
    """``i32:10`` -> (I32, 10)."""
    kind, sep, value = text.partition(":")
    if not sep or kind not in _KINDS:
        raise UsageError(f"bad argument literal {text!r}; expected kind:value with kind in "
                         f"{', '.join(_KINDS)}")
    t = _KINDS[kind]
    try:
        if t in (I32, I64):
            v = int(value, 0)
            bits = 32 if t == I32 else 64
            if not -(1 << (bits - 1)) <= v < (1 << bits):
                raise UsageError(f"{text!r} is out of range for {kind}")
            return t, v
        return t, float(value)
    except ValueError:
        raise UsageError(f"bad {kind} literal {value!r}") from None


def _interpreter(config: RunConfig) -> Interpreter:
    return Interpreter(stack_slots=config.stack_slots, max_frames=config.max_frames,
                       tags=config.tags, check=config.oracle_check)


def _resolve_invocation(inst, config: RunConfig):
    try:
        func = inst.exports[config.invoke]
    except KeyError:
        raise UsageError(f"module has no export named {config.invoke!r}") from None
    if not isinstance(func, (FunctionInstance, HostFunction)):
        raise UsageError(f"export {config.invoke!r} is not a function")
    literals = [parse_literal(a) for a in config.args]
    params = func.type.params
    if [t for t, _ in literals] != list(params):
        want = " ".join(TYPE_NAMES[t] for t in params) or "no arguments"
        got = " ".join(TYPE_NAMES[t] for t, _ in literals) or "no arguments"
        raise UsageError(f"{config.invoke} expects ({want}), got ({got})")
    return func, [v for _, v in literals]


def _trace(err):
    def callback(view):
        fn = view.function
        name = opcode_name(fn.instance.module.original_bytes, view.ip)
        print(f"trace func={view.function_index} ip={view.ip} op={name} "
              f"height={view.stack_height}", file=err)
    return callback


def run(config: RunConfig, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        module = _load(config.module)
        validated = validate_module(module, workers=config.workers)
    except OSError as e:
        print(f"error: {e}", file=err)
        return EXIT_USAGE
    except (DecodeError, ValidationError) as e:
        kind = "decode" if isinstance(e, DecodeError) else "validation"
        print(f"{kind} error: {e}", file=err)
        return EXIT_INVALID

    if config.oracle_check:
        from .testkit.oracle import check_module
        problems = check_module(module, validated)
        if problems:
            for p in problems:
                print(f"oracle mismatch: {p}", file=err)
            return EXIT_ORACLE

    if config.dump_sidetable:
        first = module.num_imported_functions
        for i, vf in enumerate(validated):
            print(f"function {first + i}: {len(vf.sidetable)} entries, "
                  f"max stack {vf.max_stack_height}", file=err)
            for line in vf.sidetable.dump():
                print(f"  {line}", file=err)

    status = EXIT_OK
    try:
        inst = instantiate(module, _host_imports(out), validated=validated,
                           interpreter=_interpreter(config))
        if config.invoke:
            func, args = _resolve_invocation(inst, config)
            if config.trace:
                inst.interpreter.probes.set_global(_trace(err))
            try:
                results = inst.interpreter.call(func, args)
            finally:
                inst.interpreter.probes.clear_global()
            for r in results:
                print(_format(r), file=out)
    except UsageError as e:
        print(f"usage error: {e}", file=err)
        return EXIT_USAGE
    except Trap as t:
        print(f"trap: {t.kind}", file=out)
        status = EXIT_TRAP
    except InstantiationError as e:
        print(f"instantiation error: {e}", file=err)
        return EXIT_FAILURE
    except WasmError as e:
        print(f"error: {e}", file=err)
        return EXIT_FAILURE

    if config.metrics:
        try:
            report = measure(RunConfig(**{**config.__dict__, "module": module}))
        except UsageError as e:
            print(f"usage error: {e}", file=err)
            return EXIT_USAGE
        for line in report.lines():
            print(line, file=err)
        if config.json:
            print(report.to_json(), file=err)
    return status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="inplace-wasm", description="Run WebAssembly modules in place.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="validate, instantiate and optionally invoke a module")
    r.add_argument("module", help="path to a .wasm binary")
    r.add_argument("--invoke", metavar="EXPORT", help="exported function to call")
    r.add_argument("--arg", action="append", default=[], metavar="KIND:VALUE",
                   help="typed argument literal, e.g. i32:10 (repeatable)")
    r.add_argument("--metrics", action="store_true", help="report space and time metrics")
    r.add_argument("--json", action="store_true",
                   help="with --metrics, also emit a single-line JSON record")
    r.add_argument("--dump-sidetable", action="store_true", help="print every sidetable")
    r.add_argument("--trace", action="store_true", help="trace every executed instruction")
    r.add_argument("--oracle-check", action="store_true",
                   help="cross-check sidetables and interpreter synchronisation")
    r.add_argument("--tags", action=argparse.BooleanOptionalAction, default=False,
                   help="maintain value type tags on the stack")
    r.add_argument("--stack-slots", type=int, default=DEFAULT_STACK_SLOTS,
                   help="value stack capacity in slots")
    r.add_argument("--max-frames", type=int, default=DEFAULT_MAX_FRAMES,
                   help="call depth limit")
    r.add_argument("--repeat", type=int, default=10, help="timing repetitions for --metrics")
    r.add_argument("--workers", type=int, default=None, help="validation worker threads")
    return parser


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) if e.code not in (None, 0) else 0
    config = RunConfig(
        module=ns.module, invoke=ns.invoke, args=ns.arg, metrics=ns.metrics, json=ns.json,
        dump_sidetable=ns.dump_sidetable, trace=ns.trace, oracle_check=ns.oracle_check,
        tags=ns.tags, stack_slots=ns.stack_slots, max_frames=ns.max_frames,
        repeat=ns.repeat, workers=ns.workers)
    if config.stack_slots <= 0 or config.max_frames <= 0 or config.repeat <= 0:
        print("usage error: --stack-slots, --max-frames and --repeat must be positive",
              file=sys.stderr)
        return EXIT_USAGE
    if config.args and not config.invoke:
        print("usage error: --arg requires --invoke", file=sys.stderr)
        return EXIT_USAGE
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
