"""A WebAssembly interpreter that executes function bodies in place.

Validation produces a compact sidetable per function; the interpreter uses
it to jump directly to branch targets without rewriting the bytecode.
"""

from .binary import F32, F64, FUNCREF, EXTERNREF, I32, I64, FuncType, Module, decode_module
from .errors import (
    DecodeError, InstantiationError, InstrumentationError, ProbeHalt, Trap,
    ValidationError, WasmError,
)
from .interpreter import Interpreter
from .probes import CONTINUE, ProbeAction, ProbeRegistry
from .runtime import Global, HostFunction, Instance, Memory, Table, instantiate
from .validator import Sidetable, ValidatedFunction, validate_function, validate_module


def load(data: bytes, imports=None, **interpreter_options) -> Instance:
    """Decode, validate and instantiate ``data`` in one step."""
    module = decode_module(data)
    return instantiate(module, imports, interpreter=Interpreter(**interpreter_options))


__all__ = [
    "I32", "I64", "F32", "F64", "FUNCREF", "EXTERNREF", "FuncType", "Module",
    "decode_module", "DecodeError", "InstantiationError", "InstrumentationError",
    "ProbeHalt", "Trap", "ValidationError", "WasmError", "Interpreter", "CONTINUE",
    "ProbeAction", "ProbeRegistry", "Global", "HostFunction", "Instance", "Memory",
    "Table", "instantiate", "Sidetable", "ValidatedFunction", "validate_function",
    "validate_module", "load",
]
