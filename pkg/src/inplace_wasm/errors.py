"""Exception hierarchy for decoding, validation, linking and execution."""

from __future__ import annotations


class WasmError(Exception):
    """Base class for every error raised by the engine."""


class DecodeError(WasmError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class ValidationError(WasmError):
    def __init__(self, message: str, offset: int | None = None, func_index: int | None = None):
        self.offset = offset
        self.func_index = func_index
        where = []
        if func_index is not None:
            where.append(f"function {func_index}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class InstantiationError(WasmError):
    """Raised for missing or mismatched imports, bad segments and start traps."""


class InstrumentationError(WasmError):
    """Misuse of the probe API."""


TRAP_KINDS = frozenset({
    "unreachable",
    "memory-out-of-bounds",
    "table-out-of-bounds",
    "indirect-signature-mismatch",
    "indirect-null",
    "integer-divide-by-zero",
    "integer-overflow",
    "invalid-float-conversion",
    "stack-overflow",
    "host-error",
})


class Trap(WasmError):
    """A runtime fault. Unwinds every frame of the current invocation."""

    def __init__(self, kind: str, offset: int | None = None, func_index: int | None = None):
        assert kind in TRAP_KINDS, kind
        self.kind = kind
        self.offset = offset
        self.func_index = func_index
        super().__init__(f"trap: {kind}")


class ProbeHalt(WasmError):
    """A probe callback asked the running invocation to stop."""

    def __init__(self, reason: str = "halted by probe"):
        self.reason = reason
        super().__init__(reason)
