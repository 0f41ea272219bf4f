"""Opcode table for core WebAssembly plus the 0xFC prefix space.

Single-byte opcodes are keyed by their byte.  Prefixed opcodes are keyed by
``(prefix << 8) | sub``, e.g. ``memory.copy`` is ``0xFC0A``.
"""

from __future__ import annotations

from typing import NamedTuple

from .binary import F32, F64, I32, I64, FUNCREF, EXTERNREF, read_leb_signed, read_leb_unsigned

# Immediate kinds
NONE = ""
BLOCKTYPE = "blocktype"
LABEL = "label"
BR_TABLE = "br_table"
FUNC = "func"
CALL_INDIRECT = "call_indirect"
LOCAL = "local"
GLOBAL = "global"
TABLE = "table"
MEMARG = "memarg"
CONST_I32 = "i32"
CONST_I64 = "i64"
CONST_F32 = "f32"
CONST_F64 = "f64"
SELECT_T = "select_t"
REFTYPE = "reftype"
MEMIDX = "memidx"
DATA_MEM = "data_mem"
DATA = "data"
MEM_MEM = "mem_mem"
ELEM_TABLE = "elem_table"
ELEM = "elem"
TABLE_TABLE = "table_table"

PREFIX_FC = 0xFC
PREFIX_FD = 0xFD


class OpInfo(NamedTuple):
    code: int
    name: str
    imm: str
    # Stack signature for ops typed purely by their operands; None for ops
    # the validator handles individually.
    pops: tuple | None = None
    pushes: tuple | None = None
    # natural access width in bytes, loads/stores only
    width: int = 0


OPS: dict[int, OpInfo] = {}


def _op(code, name, imm=NONE, pops=None, pushes=None, width=0):
    OPS[code] = OpInfo(code, name, imm, pops, pushes, width)


# control
_op(0x00, "unreachable")
_op(0x01, "nop", pops=(), pushes=())
_op(0x02, "block", BLOCKTYPE)
_op(0x03, "loop", BLOCKTYPE)
_op(0x04, "if", BLOCKTYPE)
_op(0x05, "else")
_op(0x0B, "end")
_op(0x0C, "br", LABEL)
_op(0x0D, "br_if", LABEL)
_op(0x0E, "br_table", BR_TABLE)
_op(0x0F, "return")
_op(0x10, "call", FUNC)
_op(0x11, "call_indirect", CALL_INDIRECT)

# parametric
_op(0x1A, "drop")
_op(0x1B, "select")
_op(0x1C, "select_t", SELECT_T)

# variables
_op(0x20, "local.get", LOCAL)
_op(0x21, "local.set", LOCAL)
_op(0x22, "local.tee", LOCAL)
_op(0x23, "global.get", GLOBAL)
_op(0x24, "global.set", GLOBAL)
_op(0x25, "table.get", TABLE)
_op(0x26, "table.set", TABLE)

# memory
for _code, _name, _t, _w in [
    (0x28, "i32.load", I32, 4), (0x29, "i64.load", I64, 8),
    (0x2A, "f32.load", F32, 4), (0x2B, "f64.load", F64, 8),
    (0x2C, "i32.load8_s", I32, 1), (0x2D, "i32.load8_u", I32, 1),
    (0x2E, "i32.load16_s", I32, 2), (0x2F, "i32.load16_u", I32, 2),
    (0x30, "i64.load8_s", I64, 1), (0x31, "i64.load8_u", I64, 1),
    (0x32, "i64.load16_s", I64, 2), (0x33, "i64.load16_u", I64, 2),
    (0x34, "i64.load32_s", I64, 4), (0x35, "i64.load32_u", I64, 4),
]:
    _op(_code, _name, MEMARG, (I32,), (_t,), _w)
for _code, _name, _t, _w in [
    (0x36, "i32.store", I32, 4), (0x37, "i64.store", I64, 8),
    (0x38, "f32.store", F32, 4), (0x39, "f64.store", F64, 8),
    (0x3A, "i32.store8", I32, 1), (0x3B, "i32.store16", I32, 2),
    (0x3C, "i64.store8", I64, 1), (0x3D, "i64.store16", I64, 2),
    (0x3E, "i64.store32", I64, 4),
]:
    _op(_code, _name, MEMARG, (I32, _t), (), _w)
_op(0x3F, "memory.size", MEMIDX, (), (I32,))
_op(0x40, "memory.grow", MEMIDX, (I32,), (I32,))

# constants
_op(0x41, "i32.const", CONST_I32, (), (I32,))
_op(0x42, "i64.const", CONST_I64, (), (I64,))
_op(0x43, "f32.const", CONST_F32, (), (F32,))
_op(0x44, "f64.const", CONST_F64, (), (F64,))


def _family(start, prefix, names, pops, pushes):
    for i, n in enumerate(names):
        _op(start + i, f"{prefix}.{n}", NONE, pops, pushes)


_ICMP = ["eq", "ne", "lt_s", "lt_u", "gt_s", "gt_u", "le_s", "le_u", "ge_s", "ge_u"]
_FCMP = ["eq", "ne", "lt", "gt", "le", "ge"]
_IUN = ["clz", "ctz", "popcnt"]
_IBIN = ["add", "sub", "mul", "div_s", "div_u", "rem_s", "rem_u",
         "and", "or", "xor", "shl", "shr_s", "shr_u", "rotl", "rotr"]
_FUN = ["abs", "neg", "ceil", "floor", "trunc", "nearest", "sqrt"]
_FBIN = ["add", "sub", "mul", "div", "min", "max", "copysign"]

_op(0x45, "i32.eqz", NONE, (I32,), (I32,))
_family(0x46, "i32", _ICMP, (I32, I32), (I32,))
_op(0x50, "i64.eqz", NONE, (I64,), (I32,))
_family(0x51, "i64", _ICMP, (I64, I64), (I32,))
_family(0x5B, "f32", _FCMP, (F32, F32), (I32,))
_family(0x61, "f64", _FCMP, (F64, F64), (I32,))
_family(0x67, "i32", _IUN, (I32,), (I32,))
_family(0x6A, "i32", _IBIN, (I32, I32), (I32,))
_family(0x79, "i64", _IUN, (I64,), (I64,))
_family(0x7C, "i64", _IBIN, (I64, I64), (I64,))
_family(0x8B, "f32", _FUN, (F32,), (F32,))
_family(0x92, "f32", _FBIN, (F32, F32), (F32,))
_family(0x99, "f64", _FUN, (F64,), (F64,))
_family(0xA0, "f64", _FBIN, (F64, F64), (F64,))

for _code, _name, _a, _r in [
    (0xA7, "i32.wrap_i64", I64, I32),
    (0xA8, "i32.trunc_f32_s", F32, I32), (0xA9, "i32.trunc_f32_u", F32, I32),
    (0xAA, "i32.trunc_f64_s", F64, I32), (0xAB, "i32.trunc_f64_u", F64, I32),
    (0xAC, "i64.extend_i32_s", I32, I64), (0xAD, "i64.extend_i32_u", I32, I64),
    (0xAE, "i64.trunc_f32_s", F32, I64), (0xAF, "i64.trunc_f32_u", F32, I64),
    (0xB0, "i64.trunc_f64_s", F64, I64), (0xB1, "i64.trunc_f64_u", F64, I64),
    (0xB2, "f32.convert_i32_s", I32, F32), (0xB3, "f32.convert_i32_u", I32, F32),
    (0xB4, "f32.convert_i64_s", I64, F32), (0xB5, "f32.convert_i64_u", I64, F32),
    (0xB6, "f32.demote_f64", F64, F32),
    (0xB7, "f64.convert_i32_s", I32, F64), (0xB8, "f64.convert_i32_u", I32, F64),
    (0xB9, "f64.convert_i64_s", I64, F64), (0xBA, "f64.convert_i64_u", I64, F64),
    (0xBB, "f64.promote_f32", F32, F64),
    (0xBC, "i32.reinterpret_f32", F32, I32), (0xBD, "i64.reinterpret_f64", F64, I64),
    (0xBE, "f32.reinterpret_i32", I32, F32), (0xBF, "f64.reinterpret_i64", I64, F64),
    (0xC0, "i32.extend8_s", I32, I32), (0xC1, "i32.extend16_s", I32, I32),
    (0xC2, "i64.extend8_s", I64, I64), (0xC3, "i64.extend16_s", I64, I64),
    (0xC4, "i64.extend32_s", I64, I64),
]:
    _op(_code, _name, NONE, (_a,), (_r,))

# reference types
_op(0xD0, "ref.null", REFTYPE)
_op(0xD1, "ref.is_null")
_op(0xD2, "ref.func", FUNC)

# 0xFC prefix
_FC = PREFIX_FC << 8
for _sub, _name, _a, _r in [
    (0, "i32.trunc_sat_f32_s", F32, I32), (1, "i32.trunc_sat_f32_u", F32, I32),
    (2, "i32.trunc_sat_f64_s", F64, I32), (3, "i32.trunc_sat_f64_u", F64, I32),
    (4, "i64.trunc_sat_f32_s", F32, I64), (5, "i64.trunc_sat_f32_u", F32, I64),
    (6, "i64.trunc_sat_f64_s", F64, I64), (7, "i64.trunc_sat_f64_u", F64, I64),
]:
    _op(_FC | _sub, _name, NONE, (_a,), (_r,))
_op(_FC | 8, "memory.init", DATA_MEM, (I32, I32, I32), ())
_op(_FC | 9, "data.drop", DATA, (), ())
_op(_FC | 10, "memory.copy", MEM_MEM, (I32, I32, I32), ())
_op(_FC | 11, "memory.fill", MEMIDX, (I32, I32, I32), ())
_op(_FC | 12, "table.init", ELEM_TABLE, (I32, I32, I32), ())
_op(_FC | 13, "elem.drop", ELEM, (), ())
_op(_FC | 14, "table.copy", TABLE_TABLE, (I32, I32, I32), ())
_op(_FC | 15, "table.grow", TABLE)
_op(_FC | 16, "table.size", TABLE, (), (I32,))
_op(_FC | 17, "table.fill", TABLE)

BY_NAME: dict[str, OpInfo] = {info.name: info for info in OPS.values()}

# Reserved byte used to plant local probes.  Any unassigned byte works; it
# must never be accepted by the validator.
PROBE = 0xFF
assert PROBE not in OPS and PROBE not in (PREFIX_FC, PREFIX_FD)

# Opcodes that consume a sidetable entry (br_table consumes 2 + #targets).
BRANCH_FAMILY = frozenset({0x04, 0x05, 0x0C, 0x0D, 0x0E})

END = 0x0B


def _skip_blocktype(code, pos):
    b = code[pos]
    if b == 0x40 or b in (I32, I64, F32, F64, FUNCREF, EXTERNREF, 0x7B):
        return b, pos + 1
    value, n = read_leb_signed(code, pos, 33)
    return value, pos + n


def read_immediates(code, pos: int, imm: str):
    """Decode the immediates of kind ``imm`` starting at ``pos``.

    Returns ``(value, next_pos)``.  Multi-part immediates come back as tuples.
    """
    if imm == NONE:
        return None, pos
    if imm in (LABEL, FUNC, LOCAL, GLOBAL, TABLE, DATA, ELEM):
        v, n = read_leb_unsigned(code, pos, 32)
        return v, pos + n
    if imm == BLOCKTYPE:
        return _skip_blocktype(code, pos)
    if imm == BR_TABLE:
        count, n = read_leb_unsigned(code, pos, 32)
        pos += n
        targets = []
        for _ in range(count + 1):
            t, n = read_leb_unsigned(code, pos, 32)
            targets.append(t)
            pos += n
        return (tuple(targets[:-1]), targets[-1]), pos
    if imm == CALL_INDIRECT:
        t, n = read_leb_unsigned(code, pos, 32)
        pos += n
        tab, n = read_leb_unsigned(code, pos, 32)
        return (t, tab), pos + n
    if imm == MEMARG:
        align, n = read_leb_unsigned(code, pos, 32)
        pos += n
        offset, n = read_leb_unsigned(code, pos, 32)
        return (align, offset), pos + n
    if imm == CONST_I32:
        v, n = read_leb_signed(code, pos, 32)
        return v, pos + n
    if imm == CONST_I64:
        v, n = read_leb_signed(code, pos, 64)
        return v, pos + n
    if imm == CONST_F32:
        return bytes(code[pos:pos + 4]), pos + 4
    if imm == CONST_F64:
        return bytes(code[pos:pos + 8]), pos + 8
    if imm == SELECT_T:
        count, n = read_leb_unsigned(code, pos, 32)
        pos += n
        types = tuple(code[pos:pos + count])
        return types, pos + count
    if imm == REFTYPE:
        return code[pos], pos + 1
    if imm == MEMIDX:
        return code[pos], pos + 1
    if imm == DATA_MEM:
        d, n = read_leb_unsigned(code, pos, 32)
        return (d, code[pos + n]), pos + n + 1
    if imm == MEM_MEM:
        return (code[pos], code[pos + 1]), pos + 2
    if imm in (ELEM_TABLE, TABLE_TABLE):
        a, n = read_leb_unsigned(code, pos, 32)
        pos += n
        b, n = read_leb_unsigned(code, pos, 32)
        return (a, b), pos + n
    raise ValueError(f"unknown immediate kind {imm!r}")


def read_instruction(code, pos: int):
    """Decode one instruction at ``pos``: returns ``(OpInfo, immediates, next_pos)``.

    Raises KeyError for opcodes missing from the table.
    """
    op = code[pos]
    pos += 1
    if op == PREFIX_FC or op == PREFIX_FD:
        sub, n = read_leb_unsigned(code, pos, 32)
        pos += n
        info = OPS[(op << 8) | sub]
    else:
        info = OPS[op]
    value, pos = read_immediates(code, pos, info.imm)
    return info, value, pos


def iter_instructions(code, start: int, end: int):
    """Yield ``(offset, OpInfo, immediates)`` for every instruction in [start, end)."""
    pos = start
    while pos < end:
        info, value, nxt = read_instruction(code, pos)
        yield pos, info, value
        pos = nxt
