"""Instances and their mutable state: memories, tables, globals, host imports."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

from .binary import (
    EXTERNREF, F32, F64, FUNCREF, I32, I64, KIND_FUNC, KIND_GLOBAL, KIND_MEMORY,
    KIND_TABLE, MAX_PAGES, FuncType, GlobalType, Limits, Module,
)
from .errors import InstantiationError, Trap, WasmError
from .numeric import MASK32, MASK64, f32, s32, s64
from .validator import ValidatedFunction, validate_module

PAGE_SIZE = 65536


class Memory:
    """Linear memory with explicit bounds checks."""

    def __init__(self, min_pages: int, max_pages: int | None = None):
        self.data = bytearray(min_pages * PAGE_SIZE)
        self.max_pages = max_pages

    @property
    def current_pages(self) -> int:
        return len(self.data) // PAGE_SIZE

    @property
    def limits(self) -> Limits:
        return Limits(self.current_pages, self.max_pages)

    def grow(self, delta: int) -> int:
        """Grow by ``delta`` pages; returns the old page count or -1."""
        old = self.current_pages
        new = old + delta
        cap = MAX_PAGES if self.max_pages is None else min(self.max_pages, MAX_PAGES)
        if new > cap:
            return -1
        try:
            self.data.extend(bytes(delta * PAGE_SIZE))
        except MemoryError:
            return -1
        return old

    def read(self, addr: int, n: int) -> bytes:
        memory_access_check(self, addr, 0, n)
        return bytes(self.data[addr:addr + n])

    def write(self, addr: int, payload: bytes) -> None:
        memory_access_check(self, addr, 0, len(payload))
        self.data[addr:addr + len(payload)] = payload


def memory_access_check(mem: Memory, addr: int, offset: int, width: int) -> int:
    """Effective address ``addr + offset``, trapping unless the whole access fits.

    Python integers do not wrap, so the sum cannot overflow.
    """
    ea = addr + offset
    if ea + width > len(mem.data):
        raise Trap("memory-out-of-bounds")
    return ea


class Table:
    def __init__(self, reftype: int, min_size: int, max_size: int | None = None, init=None):
        self.reftype = reftype
        self.elements: list = [init] * min_size
        self.max_size = max_size

    @property
    def limits(self) -> Limits:
        return Limits(len(self.elements), self.max_size)

    def grow(self, delta: int, init=None) -> int:
        old = len(self.elements)
        cap = 0xFFFFFFFF if self.max_size is None else self.max_size
        if old + delta > cap or old + delta > 10_000_000:
            return -1
        self.elements.extend([init] * delta)
        return old

    def get(self, index: int):
        if index >= len(self.elements):
            raise Trap("table-out-of-bounds")
        return self.elements[index]

    def set(self, index: int, value) -> None:
        if index >= len(self.elements):
            raise Trap("table-out-of-bounds")
        self.elements[index] = value


@dataclass
class Global:
    type: GlobalType
    value: object = 0


@dataclass(eq=False)
class HostFunction:
    """A host-provided import. ``callback`` receives Python values (signed
    integers, floats, references) and returns None, a single value, or a
    sequence matching ``type.results``."""

    type: FuncType
    callback: Callable
    name: str = "host"


@dataclass(eq=False)
class FunctionInstance:
    """A module-defined function bound to its instance."""

    index: int
    type: FuncType
    instance: "Instance"
    validated: ValidatedFunction
    code: object                 # byte buffer executed; the module bytes unless probed
    code_start: int
    eip: int                     # offset of the terminal end opcode
    sidetable: object            # flat array of entry fields
    num_params: int
    num_locals: int
    max_stack_height: int
    zeros: list                  # initial values of declared (non-parameter) locals
    tags: bytes                  # type tag per local
    name: str = ""

    def __repr__(self):
        return f"<FunctionInstance {self.index} {self.type}>"


def zero_value(t: int):
    if t in (I32, I64):
        return 0
    if t in (F32, F64):
        return 0.0
    return None


def to_stack_value(t: int, v):
    """Convert a host-side value to the engine's stack representation."""
    if t == I32:
        return int(v) & MASK32
    if t == I64:
        return int(v) & MASK64
    if t == F32:
        return f32(float(v))
    if t == F64:
        return float(v)
    return v


def from_stack_value(t: int, v):
    if t == I32:
        return s32(v)
    if t == I64:
        return s64(v)
    return v


@dataclass(eq=False)
class Instance:
    module: Module
    validated: list = field(default_factory=list)
    functions: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    memories: list = field(default_factory=list)
    globals: list = field(default_factory=list)
    exports: dict = field(default_factory=dict)
    data_segments: list = field(default_factory=list)      # bytes, or None once dropped
    element_segments: list = field(default_factory=list)   # lists, or None once dropped
    interpreter: object = None

    def export(self, name: str):
        try:
            return self.exports[name]
        except KeyError:
            raise WasmError(f"no export named {name!r}") from None

    def invoke(self, name: str, *args):
        """Call an exported function through this instance's interpreter."""
        func = self.export(name)
        if not isinstance(func, (FunctionInstance, HostFunction)):
            raise WasmError(f"export {name!r} is not a function")
        return self.interpreter.call(func, list(args))


def _lookup(imports, module_name: str, name: str):
    if imports is None:
        return None
    if (module_name, name) in imports:
        return imports[(module_name, name)]
    inner = imports.get(module_name)
    if isinstance(inner, dict):
        return inner.get(name)
    return None


def _limits_match(actual: Limits, declared: Limits) -> bool:
    if actual.min < declared.min:
        return False
    if declared.max is not None:
        if actual.max is None or actual.max > declared.max:
            return False
    return True


def eval_const(expr, globals_: list, functions: list):
    """Evaluate a validated constant expression."""
    value = None
    for name, imm in expr.instrs:
        if name == "i32.const":
            value = imm & MASK32
        elif name == "i64.const":
            value = imm & MASK64
        elif name == "f32.const":
            value = struct.unpack("<f", imm)[0]
        elif name == "f64.const":
            value = struct.unpack("<d", imm)[0]
        elif name == "ref.null":
            value = None
        elif name == "ref.func":
            value = functions[imm]
        elif name == "global.get":
            value = globals_[imm].value
    return value


def instantiate(module: Module, imports=None, *, validated: list | None = None,
                interpreter=None) -> Instance:
    """Link ``module`` against ``imports`` and run its start function.

    ``imports`` maps ``(module, name)`` pairs, or nested ``{module: {name: x}}``
    dicts, to :class:`HostFunction`, :class:`FunctionInstance`,
    :class:`Memory`, :class:`Table` or :class:`Global` objects.
    """
    from .interpreter import Interpreter

    if validated is None:
        validated = validate_module(module)
    if len(validated) != len(module.functions):
        raise InstantiationError("every function must be validated before instantiation")

    inst = Instance(module=module, validated=list(validated))
    inst.interpreter = interpreter if interpreter is not None else Interpreter()

    for imp in module.imports:
        ext = _lookup(imports, imp.module, imp.name)
        where = f"{imp.module}.{imp.name}"
        if ext is None:
            raise InstantiationError(f"missing import {where}")
        if imp.kind == KIND_FUNC:
            if not isinstance(ext, (HostFunction, FunctionInstance)):
                raise InstantiationError(f"import {where} is not a function")
            if ext.type != module.types[imp.desc]:
                raise InstantiationError(f"import {where} has signature {ext.type}, "
                                         f"expected {module.types[imp.desc]}")
            inst.functions.append(ext)
        elif imp.kind == KIND_TABLE:
            if not isinstance(ext, Table) or ext.reftype != imp.desc.reftype \
                    or not _limits_match(ext.limits, imp.desc.limits):
                raise InstantiationError(f"incompatible table import {where}")
            inst.tables.append(ext)
        elif imp.kind == KIND_MEMORY:
            if not isinstance(ext, Memory) or not _limits_match(ext.limits, imp.desc.limits):
                raise InstantiationError(f"incompatible memory import {where}")
            inst.memories.append(ext)
        elif imp.kind == KIND_GLOBAL:
            if not isinstance(ext, Global) or ext.type != imp.desc:
                raise InstantiationError(f"incompatible global import {where}")
            inst.globals.append(ext)

    code = module.original_bytes
    first = module.num_imported_functions
    for i, (decl, vf) in enumerate(zip(module.functions, validated)):
        ftype = module.types[decl.type_index]
        np = len(ftype.params)
        inst.functions.append(FunctionInstance(
            index=first + i,
            type=ftype,
            instance=inst,
            validated=vf,
            code=code,
            code_start=decl.body.code_start,
            eip=decl.body.code_end - 1,
            sidetable=vf.sidetable.data,
            num_params=np,
            num_locals=vf.num_locals,
            max_stack_height=vf.max_stack_height,
            zeros=[zero_value(t) for t in vf.local_types[np:]],
            tags=bytes(vf.local_types),
        ))
    for t in module.tables:
        inst.tables.append(Table(t.reftype, t.limits.min, t.limits.max))
    for m in module.memories:
        inst.memories.append(Memory(m.limits.min, m.limits.max))
    for g in module.globals:
        inst.globals.append(Global(g.type, eval_const(g.init, inst.globals, inst.functions)))

    for seg in module.element_segments:
        items = [eval_const(e, inst.globals, inst.functions) for e in seg.items]
        inst.element_segments.append(items if seg.mode == "passive" else None)
    for seg in module.data_segments:
        inst.data_segments.append(seg.data if seg.mode == "passive" else None)

    # Bounds-check every active segment before writing any of them.
    actions = []
    for seg in module.element_segments:
        if seg.mode != "active":
            continue
        table = inst.tables[seg.table_index]
        off = eval_const(seg.offset, inst.globals, inst.functions)
        if off + len(seg.items) > len(table.elements):
            raise InstantiationError("element segment does not fit in table")
        items = [eval_const(e, inst.globals, inst.functions) for e in seg.items]
        actions.append((table.elements, off, items))
    for seg in module.data_segments:
        if seg.mode != "active":
            continue
        mem = inst.memories[seg.memory_index]
        off = eval_const(seg.offset, inst.globals, inst.functions)
        if off + len(seg.data) > len(mem.data):
            raise InstantiationError("data segment does not fit in memory")
        actions.append((mem.data, off, seg.data))
    for target, off, payload in actions:
        target[off:off + len(payload)] = payload

    kinds = {KIND_FUNC: inst.functions, KIND_TABLE: inst.tables,
             KIND_MEMORY: inst.memories, KIND_GLOBAL: inst.globals}
    for e in module.exports:
        inst.exports[e.name] = kinds[e.kind][e.index]
        obj = kinds[e.kind][e.index]
        if isinstance(obj, FunctionInstance) and not obj.name:
            obj.name = e.name

    if module.start is not None:
        try:
            inst.interpreter.call(inst.functions[module.start], [])
        except Trap as t:
            raise InstantiationError(f"start function trapped: {t.kind}") from t
    return inst


__all__ = [
    "PAGE_SIZE", "Memory", "Table", "Global", "HostFunction", "FunctionInstance", "Instance",
    "instantiate", "memory_access_check", "eval_const", "zero_value", "to_stack_value",
    "from_stack_value", "EXTERNREF", "FUNCREF",
]
