"""Programmatic module builder emitting binary modules.

    b = ModuleBuilder()
    f = b.function([I32], [I32], export="double")
    f.local_get(0).local_get(0).i32_add()
    module = b.build()

Instruction methods mirror the opcode table (``i32.add`` -> ``i32_add``);
every emitted instruction's body-relative offset is recorded, and after
:meth:`ModuleBuilder.emit` :meth:`FunctionBuilder.abs` maps it to a module
offset.
"""

from __future__ import annotations

import struct

from .. import opcodes as op
from ..binary import (
    F32, F64, FUNCREF, I32, I64, SECTION_CODE, SECTION_DATA, SECTION_DATACOUNT,
    SECTION_ELEMENT, SECTION_EXPORT, SECTION_FUNCTION, SECTION_GLOBAL,
    SECTION_IMPORT, SECTION_MEMORY, SECTION_START, SECTION_TABLE, SECTION_TYPE,
    FuncType, Module, decode_module,
)

_VALTYPES = {I32, I64, F32, F64, FUNCREF, 0x6F}


def uleb(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def sleb(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        done = (n == 0 and not b & 0x40) or (n == -1 and b & 0x40)
        out.append(b if done else b | 0x80)
        if done:
            return bytes(out)


def _vec(items: list[bytes]) -> bytes:
    return uleb(len(items)) + b"".join(items)


def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    return uleb(len(raw)) + raw


def _limits(lo: int, hi: int | None) -> bytes:
    return b"\x00" + uleb(lo) if hi is None else b"\x01" + uleb(lo) + uleb(hi)


_NATURAL_ALIGN = {1: 0, 2: 1, 4: 2, 8: 3}
_OP_METHODS = {info.name.replace(".", "_"): info for info in op.OPS.values()}


def const_expr(valtype: int, value) -> bytes:
    """Encode a constant initializer: a Python value, or ``("global.get", i)``,
    ``("ref.func", i)``, ``("ref.null", t)``."""
    if isinstance(value, tuple):
        kind, arg = value
        if kind == "global.get":
            return b"\x23" + uleb(arg) + b"\x0b"
        if kind == "ref.func":
            return b"\xd2" + uleb(arg) + b"\x0b"
        if kind == "ref.null":
            return b"\xd0" + bytes([arg]) + b"\x0b"
        raise ValueError(kind)
    if valtype == I32:
        return b"\x41" + sleb(_signed(value, 32)) + b"\x0b"
    if valtype == I64:
        return b"\x42" + sleb(_signed(value, 64)) + b"\x0b"
    if valtype == F32:
        return b"\x43" + struct.pack("<f", value) + b"\x0b"
    if valtype == F64:
        return b"\x44" + struct.pack("<d", value) + b"\x0b"
    if value is None:
        return b"\xd0" + bytes([valtype]) + b"\x0b"
    raise ValueError(f"cannot encode constant {value!r}")


def _signed(v: int, bits: int) -> int:
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


class FunctionBuilder:
    def __init__(self, owner: "ModuleBuilder", index: int, params, results, locals_):
        self.owner = owner
        self.index = index
        self.type = FuncType(tuple(params), tuple(results))
        self.type_index = owner.type(params, results)
        self.locals = list(locals_)
        self.code = bytearray()
        self.offsets: list[tuple[int, str]] = []
        self.code_start: int | None = None
        self.last = -1

    # -- offsets -----------------------------------------------------------

    def here(self) -> int:
        return len(self.code)

    def abs(self, rel: int) -> int:
        """Module offset of a body-relative offset; valid after emit()."""
        if self.code_start is None:
            raise RuntimeError("module not emitted yet")
        return self.code_start + rel

    @property
    def end_offset(self) -> int:
        """Module offset of the terminal end opcode; valid after emit()."""
        return self.abs(len(self.code))

    # -- emission ----------------------------------------------------------

    def raw(self, data: bytes) -> "FunctionBuilder":
        self.code += data
        return self

    def emit_op(self, name: str, *args) -> "FunctionBuilder":
        info = op.BY_NAME[name]
        self.last = len(self.code)
        self.offsets.append((self.last, name))
        if info.code > 0xFF:
            self.code.append(info.code >> 8)
            self.code += uleb(info.code & 0xFF)
        else:
            self.code.append(info.code)
        self.code += self._immediates(info, args)
        return self

    def __getattr__(self, attr):
        info = _OP_METHODS.get(attr)
        if info is None:
            raise AttributeError(attr)
        return lambda *args: self.emit_op(info.name, *args)

    # control helpers with clearer signatures
    def block(self, bt=None):
        return self.emit_op("block", bt)

    def loop(self, bt=None):
        return self.emit_op("loop", bt)

    def if_(self, bt=None):
        return self.emit_op("if", bt)

    def else_(self):
        return self.emit_op("else")

    def br_table(self, targets, default):
        return self.emit_op("br_table", list(targets), default)

    def blocktype(self, bt) -> bytes:
        if bt is None:
            return b"\x40"
        if isinstance(bt, int):
            if bt in _VALTYPES:
                return bytes([bt])
            return sleb(bt)  # explicit type index
        if isinstance(bt, FuncType):
            params, results = bt.params, bt.results
        else:
            params, results = bt
        if not params and len(results) == 1:
            return bytes([results[0]])
        if not params and not results:
            return b"\x40"
        return sleb(self.owner.type(params, results))

    def _immediates(self, info, args) -> bytes:
        k = info.imm
        if k == op.NONE:
            return b""
        if k == op.BLOCKTYPE:
            return self.blocktype(args[0] if args else None)
        if k in (op.LABEL, op.FUNC, op.LOCAL, op.GLOBAL, op.TABLE, op.DATA, op.ELEM):
            return uleb(args[0] if args else 0)
        if k == op.BR_TABLE:
            targets, default = args
            return _vec([uleb(t) for t in targets]) + uleb(default)
        if k == op.CALL_INDIRECT:
            t = args[0]
            if isinstance(t, FuncType):
                t = self.owner.type(t.params, t.results)
            table = args[1] if len(args) > 1 else 0
            return uleb(t) + uleb(table)
        if k == op.MEMARG:
            offset = args[0] if args else 0
            align = args[1] if len(args) > 1 else _NATURAL_ALIGN[info.width]
            return uleb(align) + uleb(offset)
        if k == op.CONST_I32:
            return sleb(_signed(args[0], 32))
        if k == op.CONST_I64:
            return sleb(_signed(args[0], 64))
        if k == op.CONST_F32:
            v = args[0]
            return v if isinstance(v, (bytes, bytearray)) else struct.pack("<f", v)
        if k == op.CONST_F64:
            v = args[0]
            return v if isinstance(v, (bytes, bytearray)) else struct.pack("<d", v)
        if k == op.SELECT_T:
            types = args[0]
            return uleb(len(types)) + bytes(types)
        if k == op.REFTYPE:
            return bytes([args[0] if args else FUNCREF])
        if k == op.MEMIDX:
            return b"\x00"
        if k == op.DATA_MEM:
            return uleb(args[0]) + b"\x00"
        if k == op.MEM_MEM:
            return b"\x00\x00"
        if k in (op.ELEM_TABLE, op.TABLE_TABLE):
            a = args[0] if args else 0
            b = args[1] if len(args) > 1 else 0
            return uleb(a) + uleb(b)
        raise ValueError(k)

    def body(self) -> bytes:
        groups: list[list] = []
        for t in self.locals:
            if groups and groups[-1][1] == t:
                groups[-1][0] += 1
            else:
                groups.append([1, t])
        decl = _vec([uleb(n) + bytes([t]) for n, t in groups])
        return decl + bytes(self.code) + b"\x0b"


class ModuleBuilder:
    def __init__(self):
        self.types: list[FuncType] = []
        self.imports: list[tuple] = []
        self.functions: list[FunctionBuilder] = []
        self.tables: list[tuple] = []
        self.memories: list[tuple] = []
        self.globals: list[tuple] = []
        self.exports: list[tuple] = []
        self.start_index: int | None = None
        self.elements: list[bytes] = []
        self.datas: list[bytes] = []
        self.data_count = False
        self.section_sizes: dict[int, int] = {}
        self._n_imported = {"func": 0, "table": 0, "memory": 0, "global": 0}

    def type(self, params=(), results=()) -> int:
        t = FuncType(tuple(params), tuple(results))
        if t in self.types:
            return self.types.index(t)
        self.types.append(t)
        return len(self.types) - 1

    # -- imports -----------------------------------------------------------

    def _import(self, kind: str, module: str, name: str, desc: bytes) -> int:
        defined = {"func": self.functions, "table": self.tables,
                   "memory": self.memories, "global": self.globals}[kind]
        if defined:
            raise RuntimeError(f"imports of kind {kind} must precede definitions")
        self.imports.append((module, name, desc))
        self._n_imported[kind] += 1
        return self._n_imported[kind] - 1

    def import_function(self, module: str, name: str, params=(), results=()) -> int:
        return self._import("func", module, name, b"\x00" + uleb(self.type(params, results)))

    def import_memory(self, module: str, name: str, min_pages: int, max_pages=None) -> int:
        return self._import("memory", module, name, b"\x02" + _limits(min_pages, max_pages))

    def import_table(self, module: str, name: str, min_size: int, max_size=None, reftype=FUNCREF) -> int:
        return self._import("table", module, name, b"\x01" + bytes([reftype]) + _limits(min_size, max_size))

    def import_global(self, module: str, name: str, valtype: int, mutable=False) -> int:
        return self._import("global", module, name, b"\x03" + bytes([valtype, int(mutable)]))

    # -- definitions -------------------------------------------------------

    def function(self, params=(), results=(), locals=(), export: str | None = None) -> FunctionBuilder:
        index = self._n_imported["func"] + len(self.functions)
        fb = FunctionBuilder(self, index, params, results, locals)
        self.functions.append(fb)
        if export:
            self.export(export, "func", index)
        return fb

    def memory(self, min_pages: int = 1, max_pages=None, export: str | None = None) -> int:
        self.memories.append((min_pages, max_pages))
        index = self._n_imported["memory"] + len(self.memories) - 1
        if export:
            self.export(export, "memory", index)
        return index

    def table(self, min_size: int, max_size=None, reftype=FUNCREF, export: str | None = None) -> int:
        self.tables.append((reftype, min_size, max_size))
        index = self._n_imported["table"] + len(self.tables) - 1
        if export:
            self.export(export, "table", index)
        return index

    def global_(self, valtype: int, init, mutable: bool = False, export: str | None = None) -> int:
        self.globals.append((valtype, mutable, const_expr(valtype, init)))
        index = self._n_imported["global"] + len(self.globals) - 1
        if export:
            self.export(export, "global", index)
        return index

    def export(self, name: str, kind: str, index: int) -> None:
        self.exports.append((name, {"func": 0, "table": 1, "memory": 2, "global": 3}[kind], index))

    def start(self, func_index: int) -> None:
        self.start_index = func_index

    def elem(self, offset, func_indices, table: int = 0) -> None:
        off = const_expr(I32, offset)
        funcs = _vec([uleb(i) for i in func_indices])
        if table == 0:
            self.elements.append(uleb(0) + off + funcs)
        else:
            self.elements.append(uleb(2) + uleb(table) + off + b"\x00" + funcs)

    def passive_elem(self, func_indices) -> int:
        self.elements.append(uleb(1) + b"\x00" + _vec([uleb(i) for i in func_indices]))
        return len(self.elements) - 1

    def declare_elem(self, func_indices) -> int:
        self.elements.append(uleb(3) + b"\x00" + _vec([uleb(i) for i in func_indices]))
        return len(self.elements) - 1

    def data(self, offset, payload: bytes, memory: int = 0) -> int:
        off = const_expr(I32, offset)
        if memory == 0:
            self.datas.append(uleb(0) + off + _vec([bytes([b]) for b in payload]))
        else:
            self.datas.append(uleb(2) + uleb(memory) + off + _vec([bytes([b]) for b in payload]))
        return len(self.datas) - 1

    def passive_data(self, payload: bytes) -> int:
        self.datas.append(uleb(1) + uleb(len(payload)) + bytes(payload))
        self.data_count = True
        return len(self.datas) - 1

    # -- output ------------------------------------------------------------

    def emit(self) -> bytes:
        out = bytearray(b"\x00asm\x01\x00\x00\x00")
        self.section_sizes = {}

        def section(sec_id: int, content: bytes):
            out.append(sec_id)
            out.extend(uleb(len(content)))
            self.section_sizes[sec_id] = len(content)
            start = len(out)
            out.extend(content)
            return start

        if self.types:
            section(SECTION_TYPE, _vec([
                b"\x60" + _vec([bytes([p]) for p in t.params]) + _vec([bytes([r]) for r in t.results])
                for t in self.types]))
        if self.imports:
            section(SECTION_IMPORT, _vec([_name(m) + _name(n) + d for m, n, d in self.imports]))
        if self.functions:
            section(SECTION_FUNCTION, _vec([uleb(f.type_index) for f in self.functions]))
        if self.tables:
            section(SECTION_TABLE, _vec([bytes([rt]) + _limits(lo, hi) for rt, lo, hi in self.tables]))
        if self.memories:
            section(SECTION_MEMORY, _vec([_limits(lo, hi) for lo, hi in self.memories]))
        if self.globals:
            section(SECTION_GLOBAL, _vec([bytes([t, int(mut)]) + init for t, mut, init in self.globals]))
        if self.exports:
            section(SECTION_EXPORT, _vec([_name(n) + bytes([k]) + uleb(i) for n, k, i in self.exports]))
        if self.start_index is not None:
            section(SECTION_START, uleb(self.start_index))
        if self.elements:
            section(SECTION_ELEMENT, _vec(self.elements))
        if self.datas and self.data_count:
            section(SECTION_DATACOUNT, uleb(len(self.datas)))
        if self.functions:
            bodies = [f.body() for f in self.functions]
            content = bytearray(uleb(len(bodies)))
            rel = []
            for f, body in zip(self.functions, bodies):
                content += uleb(len(body))
                decl_len = len(body) - len(f.code) - 1
                rel.append(len(content) + decl_len)
                content += body
            start = section(SECTION_CODE, bytes(content))
            for f, r in zip(self.functions, rel):
                f.code_start = start + r
        if self.datas:
            section(SECTION_DATA, _vec(self.datas))
        return bytes(out)

    def build(self) -> Module:
        return decode_module(self.emit())
