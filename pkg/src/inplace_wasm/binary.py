"""Binary-format decoder.

The decoded :class:`Module` keeps the complete input buffer; function bodies
are described by offset ranges into it so the interpreter can run the
original bytes directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import DecodeError, ValidationError

MAGIC = b"\x00asm"
VERSION = 1

I32 = 0x7F
I64 = 0x7E
F32 = 0x7D
F64 = 0x7C
V128 = 0x7B
FUNCREF = 0x70
EXTERNREF = 0x6F

VALUE_TYPES = frozenset({I32, I64, F32, F64, FUNCREF, EXTERNREF})
REF_TYPES = frozenset({FUNCREF, EXTERNREF})
TYPE_NAMES = {I32: "i32", I64: "i64", F32: "f32", F64: "f64",
              FUNCREF: "funcref", EXTERNREF: "externref", V128: "v128"}

# Implementation limits.
MAX_FUNCTIONS = 100_000
MAX_LOCALS = 50_000
MAX_NESTING = 10_000
MAX_PAGES = 65536

SECTION_CUSTOM = 0
SECTION_TYPE = 1
SECTION_IMPORT = 2
SECTION_FUNCTION = 3
SECTION_TABLE = 4
SECTION_MEMORY = 5
SECTION_GLOBAL = 6
SECTION_EXPORT = 7
SECTION_START = 8
SECTION_ELEMENT = 9
SECTION_CODE = 10
SECTION_DATA = 11
SECTION_DATACOUNT = 12

# Position of each known section in the mandatory ordering.
_SECTION_ORDER = {1: 1, 2: 2, 3: 3, 4: 4, 5: 5, 6: 6, 7: 7, 8: 8, 9: 9, 12: 10, 10: 11, 11: 12}

KIND_FUNC = "func"
KIND_TABLE = "table"
KIND_MEMORY = "memory"
KIND_GLOBAL = "global"
_EXTERN_KINDS = {0: KIND_FUNC, 1: KIND_TABLE, 2: KIND_MEMORY, 3: KIND_GLOBAL}


def read_leb_unsigned(data, offset: int, max_bits: int = 32) -> tuple[int, int]:
    """Decode an unsigned LEB128 integer; returns ``(value, length)``."""
    max_len = (max_bits + 6) // 7
    result = 0
    shift = 0
    pos = offset
    for i in range(max_len):
        if pos >= len(data):
            raise DecodeError("truncated LEB128", pos)
        b = data[pos]
        pos += 1
        if i == max_len - 1:
            if b & 0x80:
                raise DecodeError("LEB128 too long", offset)
            used = max_bits - 7 * i
            if b >> used:
                raise DecodeError("LEB128 has non-zero padding bits", offset)
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos - offset
        shift += 7
    raise DecodeError("LEB128 too long", offset)  # pragma: no cover


def read_leb_signed(data, offset: int, max_bits: int = 32) -> tuple[int, int]:
    """Decode a signed LEB128 integer, sign-extending from the final byte."""
    max_len = (max_bits + 6) // 7
    result = 0
    shift = 0
    pos = offset
    for i in range(max_len):
        if pos >= len(data):
            raise DecodeError("truncated LEB128", pos)
        b = data[pos]
        pos += 1
        if i == max_len - 1:
            if b & 0x80:
                raise DecodeError("LEB128 too long", offset)
            used = max_bits - 7 * i
            rest = b >> (used - 1)
            if rest != 0 and rest != (0x7F >> (used - 1)):
                raise DecodeError("LEB128 has invalid sign-extension bits", offset)
        result |= (b & 0x7F) << shift
        shift += 7
        if not b & 0x80:
            if b & 0x40:
                result -= 1 << shift
            return result, pos - offset
    raise DecodeError("LEB128 too long", offset)  # pragma: no cover


@dataclass(frozen=True)
class FuncType:
    params: tuple = ()
    results: tuple = ()

    def __str__(self):
        p = " ".join(TYPE_NAMES.get(t, hex(t)) for t in self.params)
        r = " ".join(TYPE_NAMES.get(t, hex(t)) for t in self.results)
        return f"[{p}] -> [{r}]"


@dataclass(frozen=True)
class Limits:
    min: int
    max: int | None = None


@dataclass(frozen=True)
class MemoryDecl:
    limits: Limits


@dataclass(frozen=True)
class TableDecl:
    reftype: int
    limits: Limits


@dataclass(frozen=True)
class GlobalType:
    valtype: int
    mutable: bool


@dataclass(frozen=True)
class ConstExpr:
    """A constant expression as a tuple of ``(opcode name, immediate)`` pairs
    (terminating ``end`` excluded), plus its byte range."""

    instrs: tuple
    start: int
    end: int


@dataclass(frozen=True)
class GlobalDecl:
    type: GlobalType
    init: ConstExpr


@dataclass(frozen=True)
class ImportDecl:
    module: str
    name: str
    kind: str
    # type index for functions; TableDecl, MemoryDecl or GlobalType otherwise
    desc: object


@dataclass(frozen=True)
class ExportDecl:
    name: str
    kind: str
    index: int


@dataclass(frozen=True)
class FunctionBody:
    locals: tuple          # ((count, valtype), ...)
    code_start: int        # first bytecode
    code_end: int          # one past the terminal end opcode
    body_start: int = 0    # first byte after the size prefix
    size: int = 0          # size prefix value


@dataclass(frozen=True)
class FunctionDecl:
    type_index: int
    body: FunctionBody


@dataclass(frozen=True)
class ElementSegment:
    mode: str              # active | passive | declarative
    reftype: int
    items: tuple           # ConstExpr per element
    table_index: int = 0
    offset: ConstExpr | None = None


@dataclass(frozen=True)
class DataSegment:
    mode: str              # active | passive
    data: bytes
    memory_index: int = 0
    offset: ConstExpr | None = None


@dataclass(frozen=True)
class Section:
    id: int
    offset: int            # first content byte
    size: int


@dataclass
class Module:
    original_bytes: bytes = b""
    types: list = field(default_factory=list)
    imports: list = field(default_factory=list)
    functions: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    memories: list = field(default_factory=list)
    globals: list = field(default_factory=list)
    exports: list = field(default_factory=list)
    start: int | None = None
    element_segments: list = field(default_factory=list)
    data_segments: list = field(default_factory=list)
    data_count: int | None = None
    sections: list = field(default_factory=list)

    # index spaces: imports come first
    def imported(self, kind: str) -> list:
        return [imp for imp in self.imports if imp.kind == kind]

    @property
    def num_imported_functions(self) -> int:
        return sum(1 for imp in self.imports if imp.kind == KIND_FUNC)

    def function_type_indices(self) -> list[int]:
        return [imp.desc for imp in self.imports if imp.kind == KIND_FUNC] + [
            f.type_index for f in self.functions]

    def func_type(self, func_index: int) -> FuncType:
        return self.types[self.function_type_indices()[func_index]]

    def defined_function(self, func_index: int) -> FunctionDecl:
        i = func_index - self.num_imported_functions
        if i < 0:
            raise IndexError(f"function {func_index} is imported")
        return self.functions[i]

    def table_types(self) -> list[TableDecl]:
        return [imp.desc for imp in self.imports if imp.kind == KIND_TABLE] + list(self.tables)

    def memory_types(self) -> list[MemoryDecl]:
        return [imp.desc for imp in self.imports if imp.kind == KIND_MEMORY] + list(self.memories)

    def global_types(self) -> list[GlobalType]:
        return [imp.desc for imp in self.imports if imp.kind == KIND_GLOBAL] + [
            g.type for g in self.globals]

    def export_index(self, name: str, kind: str = KIND_FUNC) -> int:
        for e in self.exports:
            if e.name == name and e.kind == kind:
                return e.index
        raise KeyError(name)


class _Reader:
    def __init__(self, data: bytes, pos: int, end: int):
        self.data = data
        self.pos = pos
        self.end = end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise DecodeError("unexpected end of section", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def u32(self) -> int:
        if self.pos >= self.end:
            raise DecodeError("unexpected end of section", self.pos)
        v, n = read_leb_unsigned(self.data, self.pos, 32)
        self.pos += n
        if self.pos > self.end:
            raise DecodeError("LEB128 crosses section end", self.pos)
        return v

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise DecodeError("unexpected end of section", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def name(self) -> str:
        at = self.pos
        try:
            return self.raw(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("malformed UTF-8 name", at) from None

    def valtype(self) -> int:
        at = self.pos
        t = self.byte()
        if t not in VALUE_TYPES:
            raise DecodeError(f"invalid value type 0x{t:02x}", at)
        return t

    def reftype(self) -> int:
        at = self.pos
        t = self.byte()
        if t not in REF_TYPES:
            raise DecodeError(f"invalid reference type 0x{t:02x}", at)
        return t

    def limits(self, max_allowed: int | None = None) -> Limits:
        at = self.pos
        flag = self.byte()
        if flag == 0:
            lim = Limits(self.u32())
        elif flag == 1:
            lim = Limits(self.u32(), self.u32())
        else:
            raise DecodeError(f"invalid limits flag {flag}", at)
        if max_allowed is not None and (lim.min > max_allowed or (lim.max or 0) > max_allowed):
            raise DecodeError("limits exceed implementation maximum", at)
        if lim.max is not None and lim.max < lim.min:
            raise DecodeError("limits maximum below minimum", at)
        return lim

    def const_expr(self) -> ConstExpr:
        # local import: opcodes depends on this module
        from .opcodes import read_instruction

        start = self.pos
        instrs = []
        while True:
            at = self.pos
            if at >= self.end:
                raise DecodeError("unterminated constant expression", at)
            try:
                info, value, nxt = read_instruction(self.data, at)
            except KeyError:
                raise DecodeError(f"unknown opcode 0x{self.data[at]:02x} in constant expression", at) from None
            except IndexError:
                raise DecodeError("truncated constant expression", at) from None
            if nxt > self.end:
                raise DecodeError("truncated constant expression", at)
            self.pos = nxt
            if info.name == "end":
                return ConstExpr(tuple(instrs), start, nxt)
            instrs.append((info.name, value))


def decode_module(data) -> Module:
    """Decode a complete binary module. Function bodies are not validated."""
    data = bytes(data)
    if len(data) < 8:
        raise DecodeError("module too short", 0)
    if data[:4] != MAGIC:
        raise DecodeError("bad magic number", 0)
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}", 4)

    m = Module(original_bytes=data)
    func_type_indices: list[int] = []
    pos = 8
    last_rank = 0
    while pos < len(data):
        sec_at = pos
        sec_id = data[pos]
        size, n = read_leb_unsigned(data, pos + 1, 32)
        start = pos + 1 + n
        end = start + size
        if end > len(data):
            raise DecodeError("section extends past end of module", sec_at)
        if sec_id != SECTION_CUSTOM:
            rank = _SECTION_ORDER.get(sec_id)
            if rank is None:
                raise DecodeError(f"unknown section id {sec_id}", sec_at)
            if rank <= last_rank:
                raise DecodeError(f"section {sec_id} out of order or duplicated", sec_at)
            last_rank = rank
        m.sections.append(Section(sec_id, start, size))
        r = _Reader(data, start, end)
        if sec_id == SECTION_CUSTOM:
            r.name()
            r.pos = end
        elif sec_id == SECTION_TYPE:
            for _ in range(r.u32()):
                at = r.pos
                if r.byte() != 0x60:
                    raise DecodeError("expected function type", at)
                params = tuple(r.valtype() for _ in range(r.u32()))
                results = tuple(r.valtype() for _ in range(r.u32()))
                m.types.append(FuncType(params, results))
        elif sec_id == SECTION_IMPORT:
            for _ in range(r.u32()):
                mod, name = r.name(), r.name()
                at = r.pos
                kind = _EXTERN_KINDS.get(r.byte())
                if kind == KIND_FUNC:
                    desc = r.u32()
                    _check_index(desc, len(m.types), "type", at)
                elif kind == KIND_TABLE:
                    rt = r.reftype()
                    desc = TableDecl(rt, r.limits())
                elif kind == KIND_MEMORY:
                    desc = MemoryDecl(r.limits(MAX_PAGES))
                elif kind == KIND_GLOBAL:
                    vt = r.valtype()
                    desc = GlobalType(vt, _mutability(r))
                else:
                    raise DecodeError("invalid import kind", at)
                m.imports.append(ImportDecl(mod, name, kind, desc))
        elif sec_id == SECTION_FUNCTION:
            count = r.u32()
            if count + m.num_imported_functions > MAX_FUNCTIONS:
                raise DecodeError("too many functions", start)
            for _ in range(count):
                at = r.pos
                ti = r.u32()
                _check_index(ti, len(m.types), "type", at)
                func_type_indices.append(ti)
        elif sec_id == SECTION_TABLE:
            for _ in range(r.u32()):
                rt = r.reftype()
                m.tables.append(TableDecl(rt, r.limits()))
        elif sec_id == SECTION_MEMORY:
            for _ in range(r.u32()):
                m.memories.append(MemoryDecl(r.limits(MAX_PAGES)))
        elif sec_id == SECTION_GLOBAL:
            for _ in range(r.u32()):
                vt = r.valtype()
                gt = GlobalType(vt, _mutability(r))
                m.globals.append(GlobalDecl(gt, r.const_expr()))
        elif sec_id == SECTION_EXPORT:
            for _ in range(r.u32()):
                name = r.name()
                at = r.pos
                kind = _EXTERN_KINDS.get(r.byte())
                if kind is None:
                    raise DecodeError("invalid export kind", at)
                m.exports.append(ExportDecl(name, kind, r.u32()))
        elif sec_id == SECTION_START:
            m.start = r.u32()
        elif sec_id == SECTION_ELEMENT:
            for _ in range(r.u32()):
                m.element_segments.append(_element_segment(r))
        elif sec_id == SECTION_DATACOUNT:
            m.data_count = r.u32()
        elif sec_id == SECTION_CODE:
            count = r.u32()
            if count != len(func_type_indices):
                raise DecodeError("function and code section counts differ", start)
            for ti in func_type_indices:
                size = r.u32()
                body_start = r.pos
                body_end = body_start + size
                if body_end > end:
                    raise DecodeError("function body extends past code section", body_start)
                br = _Reader(data, body_start, body_end)
                groups = []
                for _ in range(br.u32()):
                    n_locals = br.u32()
                    groups.append((n_locals, br.valtype()))
                if br.pos >= body_end or data[body_end - 1] != 0x0B:
                    raise DecodeError("function body must end with end opcode", body_end - 1)
                body = FunctionBody(tuple(groups), br.pos, body_end, body_start, size)
                m.functions.append(FunctionDecl(ti, body))
                r.pos = body_end
        elif sec_id == SECTION_DATA:
            count = r.u32()
            if m.data_count is not None and count != m.data_count:
                raise DecodeError("data count section disagrees with data section", start)
            for _ in range(count):
                m.data_segments.append(_data_segment(r))
        if r.pos != end:
            raise DecodeError(f"section {sec_id} size mismatch", sec_at)
        pos = end

    if func_type_indices and not m.functions:
        raise DecodeError("function section without code section", len(data))
    if m.data_count is not None and not m.data_segments and m.data_count != 0:
        raise DecodeError("data count section without data section", len(data))
    _check_module_indices(m)
    return m


def _mutability(r: _Reader) -> bool:
    at = r.pos
    b = r.byte()
    if b not in (0, 1):
        raise DecodeError("invalid mutability flag", at)
    return b == 1


def _element_segment(r: _Reader) -> ElementSegment:
    at = r.pos
    flags = r.u32()
    if flags > 7:
        raise DecodeError(f"invalid element segment flags {flags}", at)
    table_index = 0
    offset = None
    if flags & 1:
        mode = "declarative" if flags & 2 else "passive"
    else:
        mode = "active"
        if flags & 2:
            table_index = r.u32()
        offset = r.const_expr()
    uses_exprs = bool(flags & 4)
    reftype = FUNCREF
    if flags & 3:
        if uses_exprs:
            reftype = r.reftype()
        else:
            kind_at = r.pos
            if r.byte() != 0x00:
                raise DecodeError("invalid element kind", kind_at)
    items = []
    for _ in range(r.u32()):
        if uses_exprs:
            items.append(r.const_expr())
        else:
            p = r.pos
            idx = r.u32()
            items.append(ConstExpr((("ref.func", idx),), p, r.pos))
    return ElementSegment(mode, reftype, tuple(items), table_index, offset)


def _data_segment(r: _Reader) -> DataSegment:
    at = r.pos
    flags = r.u32()
    if flags == 0:
        offset = r.const_expr()
        return DataSegment("active", r.raw(r.u32()), 0, offset)
    if flags == 1:
        return DataSegment("passive", r.raw(r.u32()))
    if flags == 2:
        mem = r.u32()
        offset = r.const_expr()
        return DataSegment("active", r.raw(r.u32()), mem, offset)
    raise DecodeError(f"invalid data segment flags {flags}", at)


def _check_index(index: int, bound: int, what: str, offset: int | None) -> None:
    if index >= bound:
        raise DecodeError(f"{what} index {index} out of range", offset)


def _check_module_indices(m: Module) -> None:
    n_funcs = len(m.function_type_indices())
    n_tables = len(m.table_types())
    n_mems = len(m.memory_types())
    n_globals = len(m.global_types())
    bounds = {KIND_FUNC: n_funcs, KIND_TABLE: n_tables, KIND_MEMORY: n_mems, KIND_GLOBAL: n_globals}
    for e in m.exports:
        _check_index(e.index, bounds[e.kind], f"exported {e.kind}", None)
    if m.start is not None:
        _check_index(m.start, n_funcs, "start function", None)
    exprs = [g.init for g in m.globals]
    for seg in m.element_segments:
        if seg.mode == "active":
            _check_index(seg.table_index, n_tables, "table", seg.offset.start)
            exprs.append(seg.offset)
        exprs.extend(seg.items)
    for seg in m.data_segments:
        if seg.mode == "active":
            _check_index(seg.memory_index, n_mems, "memory", seg.offset.start)
            exprs.append(seg.offset)
    for expr in exprs:
        for name, value in expr.instrs:
            if name == "ref.func":
                _check_index(value, n_funcs, "function", expr.start)
            elif name == "global.get":
                _check_index(value, n_globals, "global", expr.start)


def decode_locals(body: FunctionBody, func_type: FuncType, limit: int = MAX_LOCALS) -> list[int]:
    """Full local list: parameters followed by the expanded declared groups."""
    total = len(func_type.params) + sum(count for count, _ in body.locals)
    if total > limit:
        raise ValidationError(f"too many locals ({total} > {limit})", body.body_start)
    out = list(func_type.params)
    for count, vt in body.locals:
        out.extend([vt] * count)
    return out
