"""In-place interpreter.

Executes validated functions directly over the module's original bytes.
Machine registers (``ip``, ``stp``, ``eip``, ``vfp``, ``sp``, ``mem``,
``func``, ``instance``, ``dispatch``) live on the :class:`Interpreter`; every
handler takes ``(machine, ip)`` and returns the next ``ip``.  A negative ``ip``
ends the current run loop.

Branches never scan the bytecode: they read one sidetable entry at ``stp``
and apply its deltas.  Calls alias the callee's first locals with the
caller's outgoing argument slots.
"""

from __future__ import annotations

import math
import struct

from . import numeric as nm
from . import opcodes as op
from .binary import FUNCREF, I32, read_leb_signed, read_leb_unsigned
from .errors import InstrumentationError, Trap, WasmError
from .numeric import MASK32, MASK64
from .runtime import (
    FunctionInstance, HostFunction, Instance, from_stack_value, to_stack_value,
)

DEFAULT_STACK_SLOTS = 4 * 1024 * 1024
DEFAULT_MAX_FRAMES = 10_000

_unpack_f = struct.Struct("<f").unpack
_unpack_d = struct.Struct("<d").unpack
_pack_f = struct.Struct("<f").pack
_pack_d = struct.Struct("<d").pack


class Interpreter:
    """One execution context: a value stack, a frame stack and the registers.

    ``tags`` enables the parallel one-byte type tag array.  ``check`` routes
    dispatch through a table that asserts sidetable synchronisation and
    per-frame stack bounds, and calls ``branch_hook(machine, ip)`` before
    every branch-family instruction.
    """

    def __init__(self, *, stack_slots: int = DEFAULT_STACK_SLOTS,
                 max_frames: int = DEFAULT_MAX_FRAMES, tags: bool = False,
                 check: bool = False, branch_hook=None):
        from .probes import ProbeRegistry

        self.capacity = stack_slots
        self.max_frames = max_frames
        self.stack: list = [0] * min(1024, stack_slots)
        self.tags = bytearray(len(self.stack)) if tags else None
        self.sp = 0
        self.frames: list = []
        # registers
        self.ip = 0
        self.stp = 0
        self.eip = -1
        self.vfp = 0
        self.func = None
        self.code = b""
        self.st = None
        self.instance = None
        self.memory = None
        self.mem = None
        self.globals = None
        self.funcs = None
        self.branch_hook = branch_hook
        checked = check or branch_hook is not None
        if tags:
            self.base_table = TAGGED_CHECK if checked else TAGGED
        else:
            self.base_table = CHECK if checked else MAIN
        self.dispatch = self.base_table
        self.probes = ProbeRegistry(self)
        self.in_probe = None      # active ProbeFrameView while a callback runs
        self.calls = 0            # number of call sequences entered

    # -- public API --------------------------------------------------------

    @property
    def dispatch_mode(self) -> str:
        return "probe" if self.dispatch is PROBE_TABLE else "main"

    def invoke(self, instance: Instance, func_index: int, args) -> list:
        """Run function ``func_index`` of ``instance`` and return its results."""
        return self.call(instance.functions[func_index], args)

    def call(self, func, args) -> list:
        ftype = func.type
        if len(args) != len(ftype.params):
            raise WasmError(f"expected {len(ftype.params)} arguments, got {len(args)}")
        vals = [to_stack_value(t, v) for t, v in zip(ftype.params, args)]
        if isinstance(func, HostFunction):
            return [from_stack_value(t, v) for t, v in zip(ftype.results, _call_host(func, vals))]

        saved = (self.ip, self.stp, self.eip, self.vfp, self.func, self.code, self.st,
                 self.instance)
        base_sp = self.sp
        base_frames = len(self.frames)
        self._ensure(base_sp + len(vals))
        self.stack[base_sp:base_sp + len(vals)] = vals
        self.sp = base_sp + len(vals)
        try:
            ip = self._enter(func, -1)
            self._run(ip)
        except BaseException as exc:
            if isinstance(exc, Trap) and exc.func_index is None and self.func is not None:
                exc.func_index = self.func.index
            del self.frames[base_frames:]
            self.sp = base_sp
            self._restore(saved)
            raise
        n = len(ftype.results)
        out = self.stack[base_sp:base_sp + n]
        self.sp = base_sp
        return [from_stack_value(t, v) for t, v in zip(ftype.results, out)]

    # -- machinery ---------------------------------------------------------

    def _restore(self, saved):
        (self.ip, self.stp, self.eip, self.vfp, self.func, self.code, self.st,
         instance) = saved
        if instance is not None:
            self._switch_instance(instance)
        else:
            self.instance = None

    def _switch_instance(self, instance: Instance):
        self.instance = instance
        self.globals = instance.globals
        self.funcs = instance.functions
        if instance.memories:
            self.memory = instance.memories[0]
            self.mem = self.memory.data
        else:
            self.memory = self.mem = None

    def _ensure(self, top: int):
        if top > self.capacity:
            raise Trap("stack-overflow")
        n = len(self.stack)
        if top > n:
            grow = min(self.capacity, max(top, 2 * n)) - n
            self.stack.extend([0] * grow)
            if self.tags is not None:
                self.tags.extend(bytes(grow))

    def _enter(self, callee: FunctionInstance, ret_ip: int) -> int:
        """Push a frame for ``callee`` whose arguments sit on top of the stack."""
        vfp = self.sp - callee.num_params
        top = vfp + callee.max_stack_height
        if top > len(self.stack):
            self._ensure(top)
        if len(self.frames) >= self.max_frames:
            raise Trap("stack-overflow")
        self.frames.append((ret_ip, self.stp, self.eip, self.vfp, self.func, self.code, self.st))
        self.calls += 1
        nl = callee.num_locals
        if nl != callee.num_params:
            self.stack[self.sp:vfp + nl] = callee.zeros
        if self.tags is not None:
            self.tags[vfp:vfp + nl] = callee.tags
        self.sp = vfp + nl
        self.vfp = vfp
        self.func = callee
        self.code = callee.code
        self.st = callee.sidetable
        self.stp = 0
        self.eip = callee.eip
        if callee.instance is not self.instance:
            self._switch_instance(callee.instance)
        return callee.code_start

    def _run(self, ip: int) -> None:
        try:
            while ip >= 0:
                ip = self.dispatch[self.code[ip]](self, ip)
        except Trap as t:
            if t.offset is None:
                t.offset = ip
                t.func_index = self.func.index if self.func is not None else None
            raise

    def select_handler(self, ip: int):
        """Handler selection for the instruction at ``ip``.

        Returns ``(handler, dispatches)``: one table lookup for plain opcodes,
        two for prefixed ones, three when the prefixed sub-opcode is a
        multi-byte LEB.
        """
        code = self.code
        b = code[ip]
        if b == op.PREFIX_FC or b == op.PREFIX_FD:
            table = FC_TABLE if b == op.PREFIX_FC else FD_TABLE
            sub = code[ip + 1]
            if sub < 0x80:
                return table[sub], 2
            sub, _ = read_leb_unsigned(code, ip + 1, 32)
            return (table[sub] if sub < 256 else _unimplemented_prefixed), 3
        return self.dispatch[b], 1


# -- immediates --------------------------------------------------------------

def _u32(code, pos):
    b = code[pos]
    if b < 0x80:
        return b, pos + 1
    v, n = read_leb_unsigned(code, pos, 32)
    return v, pos + n


def _skip_blocktype(code, pos):
    if code[pos] < 0x80:
        return pos + 1
    return pos + read_leb_signed(code, pos, 33)[1]


# -- control -----------------------------------------------------------------

def move_values(stack: list, sp: int, valcnt: int, popcnt: int, tags=None) -> int:
    """Copy the top ``valcnt`` values down by ``popcnt`` slots; returns the new sp."""
    if popcnt:
        if valcnt:
            dst = sp - popcnt - valcnt
            stack[dst:dst + valcnt] = stack[sp - valcnt:sp]
            if tags is not None:
                tags[dst:dst + valcnt] = tags[sp - valcnt:sp]
        return sp - popcnt
    return sp


def do_control_transfer(m: Interpreter, ip: int, stp: int) -> int:
    """Apply sidetable entry ``stp`` for the branch at ``ip``; returns the new ip."""
    st = m.st
    i = stp << 2
    popcnt = st[i + 3]
    if popcnt:
        m.sp = move_values(m.stack, m.sp, st[i + 2], popcnt, m.tags)
    m.stp = stp + st[i + 1]
    return ip + st[i]


def _unreachable(m, ip):
    raise Trap("unreachable")


def _nop(m, ip):
    return ip + 1


def _block(m, ip):
    return _skip_blocktype(m.code, ip + 1)


def _if(m, ip):
    m.sp -= 1
    if m.stack[m.sp]:
        m.stp += 1
        return _skip_blocktype(m.code, ip + 1)
    return do_control_transfer(m, ip, m.stp)


def _else(m, ip):
    return do_control_transfer(m, ip, m.stp)


def _end(m, ip):
    if ip == m.eip:
        return _return(m, ip)
    return ip + 1


def _br(m, ip):
    return do_control_transfer(m, ip, m.stp)


def _br_if(m, ip):
    sp = m.sp - 1
    m.sp = sp
    if m.stack[sp]:
        return do_control_transfer(m, ip, m.stp)
    m.stp += 1
    code = m.code
    if code[ip + 1] < 0x80:
        return ip + 2
    return ip + 1 + read_leb_unsigned(code, ip + 1, 32)[1]


def _br_table(m, ip):
    sp = m.sp - 1
    m.sp = sp
    key = m.stack[sp]
    stp = m.stp
    maxcase = m.st[(stp << 2) + 2]
    if key > maxcase:
        key = maxcase
    return do_control_transfer(m, ip, stp + 1 + key)


def _return(m, ip):
    f = m.func
    n = len(f.type.results)
    vfp = m.vfp
    sp = m.sp
    if n == 1:
        m.stack[vfp] = m.stack[sp - 1]
    elif n:
        m.stack[vfp:vfp + n] = m.stack[sp - n:sp]
    if n and m.tags is not None:
        m.tags[vfp:vfp + n] = m.tags[sp - n:sp]
    m.sp = vfp + n
    ret_ip, m.stp, m.eip, m.vfp, caller, m.code, m.st = m.frames.pop()
    m.func = caller
    if caller is not None and caller.instance is not m.instance:
        m._switch_instance(caller.instance)
    return ret_ip


def _call_host(func: HostFunction, vals: list) -> list:
    ftype = func.type
    args = [from_stack_value(t, v) for t, v in zip(ftype.params, vals)]
    try:
        r = func.callback(*args)
    except WasmError:
        raise
    except Exception as exc:
        raise Trap("host-error") from exc
    if r is None:
        r = ()
    elif not isinstance(r, (tuple, list)):
        r = (r,)
    if len(r) != len(ftype.results):
        raise Trap("host-error")
    try:
        return [to_stack_value(t, v) for t, v in zip(ftype.results, r)]
    except (TypeError, ValueError) as exc:
        raise Trap("host-error") from exc


def _invoke_callee(m: Interpreter, callee, ret_ip: int) -> int:
    if type(callee) is FunctionInstance:
        return m._enter(callee, ret_ip)
    n = len(callee.type.params)
    sp = m.sp - n
    args = m.stack[sp:m.sp]
    m.sp = sp
    results = _call_host(callee, args)
    m._ensure(sp + len(results))
    m.stack[sp:sp + len(results)] = results
    m.sp = sp + len(results)
    if m.tags is not None:
        m.tags[sp:sp + len(results)] = bytes(callee.type.results)
    return ret_ip


def _call(m, ip):
    idx, pos = _u32(m.code, ip + 1)
    return _invoke_callee(m, m.funcs[idx], pos)


def _call_indirect(m, ip):
    code = m.code
    ti, pos = _u32(code, ip + 1)
    tab, pos = _u32(code, pos)
    m.sp -= 1
    i = m.stack[m.sp]
    elems = m.instance.tables[tab].elements
    if i >= len(elems):
        raise Trap("table-out-of-bounds")
    f = elems[i]
    if f is None:
        raise Trap("indirect-null")
    if f.type != m.instance.module.types[ti]:
        raise Trap("indirect-signature-mismatch")
    return _invoke_callee(m, f, pos)


# -- parametric / variables -------------------------------------------------

def _drop(m, ip):
    m.sp -= 1
    return ip + 1


def _select(m, ip):
    s = m.stack
    sp = m.sp - 3
    if not s[sp + 2]:
        s[sp] = s[sp + 1]
    m.sp = sp + 1
    return ip + 1


def _select_t(m, ip):
    code = m.code
    n, pos = _u32(code, ip + 1)
    _select(m, ip)
    return pos + n


def _local_get(m, ip):
    code = m.code
    i = code[ip + 1]
    if i < 0x80:
        nxt = ip + 2
    else:
        i, nxt = _u32(code, ip + 1)
    s = m.stack
    sp = m.sp
    s[sp] = s[m.vfp + i]
    m.sp = sp + 1
    return nxt


def _local_set(m, ip):
    code = m.code
    i = code[ip + 1]
    if i < 0x80:
        nxt = ip + 2
    else:
        i, nxt = _u32(code, ip + 1)
    sp = m.sp - 1
    m.stack[m.vfp + i] = m.stack[sp]
    m.sp = sp
    return nxt


def _local_tee(m, ip):
    code = m.code
    i = code[ip + 1]
    if i < 0x80:
        nxt = ip + 2
    else:
        i, nxt = _u32(code, ip + 1)
    m.stack[m.vfp + i] = m.stack[m.sp - 1]
    return nxt


def _global_get(m, ip):
    i, nxt = _u32(m.code, ip + 1)
    m.stack[m.sp] = m.globals[i].value
    m.sp += 1
    return nxt


def _global_set(m, ip):
    i, nxt = _u32(m.code, ip + 1)
    m.sp -= 1
    m.globals[i].value = m.stack[m.sp]
    return nxt


def _table_get(m, ip):
    t, nxt = _u32(m.code, ip + 1)
    s = m.stack
    s[m.sp - 1] = m.instance.tables[t].get(s[m.sp - 1])
    return nxt


def _table_set(m, ip):
    t, nxt = _u32(m.code, ip + 1)
    s = m.stack
    m.sp -= 2
    m.instance.tables[t].set(s[m.sp], s[m.sp + 1])
    return nxt


# -- memory -----------------------------------------------------------------

def _memarg(code, pos):
    _, pos = _u32(code, pos)
    b = code[pos]
    if b < 0x80:
        return b, pos + 1
    v, n = read_leb_unsigned(code, pos, 32)
    return v, pos + n


def _make_load(fmt: str, width: int, conv):
    unpack_from = struct.Struct(fmt).unpack_from

    def load(m, ip):
        offset, nxt = _memarg(m.code, ip + 1)
        s = m.stack
        sp = m.sp - 1
        ea = s[sp] + offset
        mem = m.mem
        if ea + width > len(mem):
            raise Trap("memory-out-of-bounds")
        v = unpack_from(mem, ea)[0]
        s[sp] = conv(v) if conv is not None else v
        return nxt
    return load


def _make_store(fmt: str, width: int, conv):
    pack_into = struct.Struct(fmt).pack_into

    def store(m, ip):
        offset, nxt = _memarg(m.code, ip + 1)
        s = m.stack
        sp = m.sp - 2
        m.sp = sp
        ea = s[sp] + offset
        mem = m.mem
        if ea + width > len(mem):
            raise Trap("memory-out-of-bounds")
        v = s[sp + 1]
        pack_into(mem, ea, conv(v) if conv is not None else v)
        return nxt
    return store


def _memory_size(m, ip):
    m.stack[m.sp] = m.memory.current_pages
    m.sp += 1
    return ip + 2


def _memory_grow(m, ip):
    s = m.stack
    r = m.memory.grow(s[m.sp - 1])
    s[m.sp - 1] = r & MASK32
    return ip + 2


# -- constants --------------------------------------------------------------

def _i32_const(m, ip):
    code = m.code
    b = code[ip + 1]
    if b < 0x40:
        v, nxt = b, ip + 2
    else:
        v, n = read_leb_signed(code, ip + 1, 32)
        v &= MASK32
        nxt = ip + 1 + n
    m.stack[m.sp] = v
    m.sp += 1
    return nxt


def _i64_const(m, ip):
    v, n = read_leb_signed(m.code, ip + 1, 64)
    m.stack[m.sp] = v & MASK64
    m.sp += 1
    return ip + 1 + n


def _f32_const(m, ip):
    m.stack[m.sp] = _unpack_f(bytes(m.code[ip + 1:ip + 5]))[0]
    m.sp += 1
    return ip + 5


def _f64_const(m, ip):
    m.stack[m.sp] = _unpack_d(bytes(m.code[ip + 1:ip + 9]))[0]
    m.sp += 1
    return ip + 9


# -- numeric ----------------------------------------------------------------

def _unop(fn):
    def h(m, ip):
        s = m.stack
        s[m.sp - 1] = fn(s[m.sp - 1])
        return ip + 1
    return h


def _binop(fn):
    def h(m, ip):
        s = m.stack
        sp = m.sp - 1
        s[sp - 1] = fn(s[sp - 1], s[sp])
        m.sp = sp
        return ip + 1
    return h


def _i32_add(m, ip):
    s = m.stack
    sp = m.sp - 1
    s[sp - 1] = (s[sp - 1] + s[sp]) & MASK32
    m.sp = sp
    return ip + 1


def _i32_sub(m, ip):
    s = m.stack
    sp = m.sp - 1
    s[sp - 1] = (s[sp - 1] - s[sp]) & MASK32
    m.sp = sp
    return ip + 1


def _i32_eqz(m, ip):
    s = m.stack
    s[m.sp - 1] = 0 if s[m.sp - 1] else 1
    return ip + 1


_s32 = nm.s32
_s64 = nm.s64
_f32 = nm.f32


def _int_ops(bits: int):
    mask = (1 << bits) - 1
    sign = nm.s32 if bits == 32 else nm.s64
    clz = nm.clz32 if bits == 32 else nm.clz64
    ctz = nm.ctz32 if bits == 32 else nm.ctz64
    return {
        "eqz": _unop(lambda a: 0 if a else 1),
        "eq": _binop(lambda a, b: 1 if a == b else 0),
        "ne": _binop(lambda a, b: 1 if a != b else 0),
        "lt_s": _binop(lambda a, b: 1 if sign(a) < sign(b) else 0),
        "lt_u": _binop(lambda a, b: 1 if a < b else 0),
        "gt_s": _binop(lambda a, b: 1 if sign(a) > sign(b) else 0),
        "gt_u": _binop(lambda a, b: 1 if a > b else 0),
        "le_s": _binop(lambda a, b: 1 if sign(a) <= sign(b) else 0),
        "le_u": _binop(lambda a, b: 1 if a <= b else 0),
        "ge_s": _binop(lambda a, b: 1 if sign(a) >= sign(b) else 0),
        "ge_u": _binop(lambda a, b: 1 if a >= b else 0),
        "clz": _unop(clz),
        "ctz": _unop(ctz),
        "popcnt": _unop(nm.popcnt),
        "add": _binop(lambda a, b: (a + b) & mask),
        "sub": _binop(lambda a, b: (a - b) & mask),
        "mul": _binop(lambda a, b: (a * b) & mask),
        "div_s": _binop(lambda a, b: nm.div_s(a, b, bits)),
        "div_u": _binop(nm.div_u),
        "rem_s": _binop(lambda a, b: nm.rem_s(a, b, bits)),
        "rem_u": _binop(nm.rem_u),
        "and": _binop(lambda a, b: a & b),
        "or": _binop(lambda a, b: a | b),
        "xor": _binop(lambda a, b: a ^ b),
        "shl": _binop(lambda a, b: (a << (b % bits)) & mask),
        "shr_s": _binop(lambda a, b: nm.shr_s(a, b, bits)),
        "shr_u": _binop(lambda a, b: a >> (b % bits)),
        "rotl": _binop(lambda a, b: nm.rotl(a, b, bits)),
        "rotr": _binop(lambda a, b: nm.rotr(a, b, bits)),
    }


def _float_ops(single: bool):
    r = nm.f32 if single else (lambda x: x)
    return {
        "eq": _binop(lambda a, b: 1 if a == b else 0),
        "ne": _binop(lambda a, b: 1 if a != b else 0),
        "lt": _binop(lambda a, b: 1 if a < b else 0),
        "gt": _binop(lambda a, b: 1 if a > b else 0),
        "le": _binop(lambda a, b: 1 if a <= b else 0),
        "ge": _binop(lambda a, b: 1 if a >= b else 0),
        "abs": _unop(math.fabs),
        "neg": _unop(lambda a: -a),
        "ceil": _unop(nm.fceil),
        "floor": _unop(nm.ffloor),
        "trunc": _unop(nm.ftrunc),
        "nearest": _unop(nm.fnearest),
        "sqrt": _unop(lambda a: r(nm.fsqrt(a))),
        "add": _binop(lambda a, b: r(a + b)),
        "sub": _binop(lambda a, b: r(a - b)),
        "mul": _binop(lambda a, b: r(a * b)),
        "div": _binop(lambda a, b: r(nm.fdiv(a, b))),
        "min": _binop(nm.fmin),
        "max": _binop(nm.fmax),
        "copysign": _binop(math.copysign),
    }


def _trunc(lo_hi, mask):
    lo, hi = lo_hi
    return _unop(lambda x: nm.trunc_to_int(x, lo, hi) & mask)


def _trunc_sat(lo_hi, mask):
    lo, hi = lo_hi
    return _unop(lambda x: nm.trunc_sat(x, lo, hi) & mask)


_CONVERSIONS = {
    "i32.wrap_i64": _unop(lambda x: x & MASK32),
    "i32.trunc_f32_s": _trunc(nm.I32_RANGE_S, MASK32),
    "i32.trunc_f32_u": _trunc(nm.I32_RANGE_U, MASK32),
    "i32.trunc_f64_s": _trunc(nm.I32_RANGE_S, MASK32),
    "i32.trunc_f64_u": _trunc(nm.I32_RANGE_U, MASK32),
    "i64.extend_i32_s": _unop(lambda x: _s32(x) & MASK64),
    "i64.extend_i32_u": _unop(lambda x: x),
    "i64.trunc_f32_s": _trunc(nm.I64_RANGE_S, MASK64),
    "i64.trunc_f32_u": _trunc(nm.I64_RANGE_U, MASK64),
    "i64.trunc_f64_s": _trunc(nm.I64_RANGE_S, MASK64),
    "i64.trunc_f64_u": _trunc(nm.I64_RANGE_U, MASK64),
    "f32.convert_i32_s": _unop(lambda x: nm.int_to_f32(_s32(x))),
    "f32.convert_i32_u": _unop(nm.int_to_f32),
    "f32.convert_i64_s": _unop(lambda x: nm.int_to_f32(_s64(x))),
    "f32.convert_i64_u": _unop(nm.int_to_f32),
    "f32.demote_f64": _unop(nm.f32),
    "f64.convert_i32_s": _unop(lambda x: float(_s32(x))),
    "f64.convert_i32_u": _unop(float),
    "f64.convert_i64_s": _unop(lambda x: float(_s64(x))),
    "f64.convert_i64_u": _unop(float),
    "f64.promote_f32": _unop(lambda x: x),
    "i32.reinterpret_f32": _unop(nm.f32_bits),
    "i64.reinterpret_f64": _unop(nm.f64_bits),
    "f32.reinterpret_i32": _unop(nm.f32_from_bits),
    "f64.reinterpret_i64": _unop(nm.f64_from_bits),
    "i32.extend8_s": _unop(lambda x: nm.extend_s(x, 8, MASK32)),
    "i32.extend16_s": _unop(lambda x: nm.extend_s(x, 16, MASK32)),
    "i64.extend8_s": _unop(lambda x: nm.extend_s(x, 8, MASK64)),
    "i64.extend16_s": _unop(lambda x: nm.extend_s(x, 16, MASK64)),
    "i64.extend32_s": _unop(lambda x: nm.extend_s(x, 32, MASK64)),
    "i32.trunc_sat_f32_s": _trunc_sat(nm.I32_RANGE_S, MASK32),
    "i32.trunc_sat_f32_u": _trunc_sat(nm.I32_RANGE_U, MASK32),
    "i32.trunc_sat_f64_s": _trunc_sat(nm.I32_RANGE_S, MASK32),
    "i32.trunc_sat_f64_u": _trunc_sat(nm.I32_RANGE_U, MASK32),
    "i64.trunc_sat_f32_s": _trunc_sat(nm.I64_RANGE_S, MASK64),
    "i64.trunc_sat_f32_u": _trunc_sat(nm.I64_RANGE_U, MASK64),
    "i64.trunc_sat_f64_s": _trunc_sat(nm.I64_RANGE_S, MASK64),
    "i64.trunc_sat_f64_u": _trunc_sat(nm.I64_RANGE_U, MASK64),
}


# -- references -------------------------------------------------------------

def _ref_null(m, ip):
    m.stack[m.sp] = None
    m.sp += 1
    return ip + 2


def _ref_is_null(m, ip):
    s = m.stack
    s[m.sp - 1] = 1 if s[m.sp - 1] is None else 0
    return ip + 1


def _ref_func(m, ip):
    i, nxt = _u32(m.code, ip + 1)
    m.stack[m.sp] = m.funcs[i]
    m.sp += 1
    return nxt


# -- 0xFC prefix ------------------------------------------------------------

def _pop3(m):
    s = m.stack
    sp = m.sp - 3
    m.sp = sp
    return s[sp], s[sp + 1], s[sp + 2]


def _memory_init(m, ip, pos):
    d, pos = _u32(m.code, pos)
    dst, src, n = _pop3(m)
    seg = m.instance.data_segments[d] or b""
    if src + n > len(seg) or dst + n > len(m.mem):
        raise Trap("memory-out-of-bounds")
    m.mem[dst:dst + n] = seg[src:src + n]
    return pos + 1


def _data_drop(m, ip, pos):
    d, pos = _u32(m.code, pos)
    m.instance.data_segments[d] = None
    return pos


def _memory_copy(m, ip, pos):
    dst, src, n = _pop3(m)
    mem = m.mem
    if src + n > len(mem) or dst + n > len(mem):
        raise Trap("memory-out-of-bounds")
    mem[dst:dst + n] = mem[src:src + n]
    return pos + 2


def _memory_fill(m, ip, pos):
    dst, val, n = _pop3(m)
    mem = m.mem
    if dst + n > len(mem):
        raise Trap("memory-out-of-bounds")
    mem[dst:dst + n] = bytes((val & 0xFF,)) * n
    return pos + 1


def _table_init(m, ip, pos):
    e, pos = _u32(m.code, pos)
    t, pos = _u32(m.code, pos)
    dst, src, n = _pop3(m)
    seg = m.instance.element_segments[e] or []
    elems = m.instance.tables[t].elements
    if src + n > len(seg) or dst + n > len(elems):
        raise Trap("table-out-of-bounds")
    elems[dst:dst + n] = seg[src:src + n]
    return pos


def _elem_drop(m, ip, pos):
    e, pos = _u32(m.code, pos)
    m.instance.element_segments[e] = None
    return pos


def _table_copy(m, ip, pos):
    t1, pos = _u32(m.code, pos)
    t2, pos = _u32(m.code, pos)
    dst, src, n = _pop3(m)
    a = m.instance.tables[t1].elements
    b = m.instance.tables[t2].elements
    if src + n > len(b) or dst + n > len(a):
        raise Trap("table-out-of-bounds")
    a[dst:dst + n] = b[src:src + n]
    return pos


def _table_grow(m, ip, pos):
    t, pos = _u32(m.code, pos)
    s = m.stack
    sp = m.sp - 2
    r = m.instance.tables[t].grow(s[sp + 1], s[sp])
    s[sp] = r & MASK32
    m.sp = sp + 1
    return pos


def _table_size(m, ip, pos):
    t, pos = _u32(m.code, pos)
    m.stack[m.sp] = len(m.instance.tables[t].elements)
    m.sp += 1
    return pos


def _table_fill(m, ip, pos):
    t, pos = _u32(m.code, pos)
    i, val, n = _pop3(m)
    elems = m.instance.tables[t].elements
    if i + n > len(elems):
        raise Trap("table-out-of-bounds")
    elems[i:i + n] = [val] * n
    return pos


def _prefixed_unop(h):
    def p(m, ip, pos):
        h(m, ip)
        return pos
    return p


def _unimplemented_prefixed(m, ip, pos=None):
    raise WasmError(f"unimplemented prefixed opcode at {ip}")


def _prefix_fc(m, ip):
    code = m.code
    sub = code[ip + 1]
    if sub < 0x80:
        return FC_TABLE[sub](m, ip, ip + 2)
    sub, n = read_leb_unsigned(code, ip + 1, 32)
    h = FC_TABLE[sub] if sub < 256 else _unimplemented_prefixed
    return h(m, ip, ip + 1 + n)


def _prefix_fd(m, ip):
    raise WasmError(f"SIMD opcode at {ip} is not supported")


def _illegal(m, ip):
    raise WasmError(f"illegal opcode 0x{m.code[ip]:02x} at {ip}")


# -- probes -----------------------------------------------------------------

def _local_probe(m, ip):
    orig = m.probes.fire_local(m, ip)
    return m.base_table[orig](m, ip)


def _global_probe(m, ip):
    m.probes.fire_global(m, ip)
    return m.base_table[m.code[ip]](m, ip)


# -- checked dispatch -------------------------------------------------------

def _checked(handler, opcode):
    branchy = opcode in op.BRANCH_FAMILY

    def h(m, ip):
        if branchy:
            origins = m.func.validated.origins
            if m.stp >= len(origins) or origins[m.stp] != ip:
                raise AssertionError(
                    f"stp {m.stp} out of sync with ip {ip} in function {m.func.index}")
            if m.branch_hook is not None:
                m.branch_hook(m, ip)
        nxt = handler(m, ip)
        f = m.func
        if f is not None and m.sp - m.vfp > f.max_stack_height:
            raise AssertionError(
                f"stack height {m.sp - m.vfp} exceeds validated maximum "
                f"{f.max_stack_height} in function {f.index}")
        return nxt
    return h


# -- tagged dispatch --------------------------------------------------------

def _tag_source(opcode):
    """How to find the type tag of the value ``opcode`` leaves on top.

    Returns a type byte, a function ``(m, ip) -> type``, or None when the
    instruction pushes nothing new (values that stay put keep their tags;
    branches and returns move tags along with values).
    """
    info = op.OPS.get(opcode)
    if opcode == 0x20:    # local.get
        return lambda m, ip: m.tags[m.vfp + _u32(m.code, ip + 1)[0]]
    if opcode == 0x23:    # global.get
        return lambda m, ip: m.globals[_u32(m.code, ip + 1)[0]].type.valtype
    if opcode == 0x25:    # table.get
        return lambda m, ip: m.instance.tables[_u32(m.code, ip + 1)[0]].reftype
    if opcode == 0xD0:    # ref.null
        return lambda m, ip: m.code[ip + 1]
    if opcode == 0xD1:
        return I32
    if opcode == 0xD2:
        return FUNCREF
    if opcode == op.PREFIX_FC:
        return _fc_tag
    if info is not None and info.pushes and len(info.pushes) == 1:
        return info.pushes[0]
    return None


def _fc_tag(m, ip):
    sub = read_leb_unsigned(m.code, ip + 1, 32)[0]
    info = op.OPS.get((op.PREFIX_FC << 8) | sub)
    if sub in (15, 16):   # table.grow, table.size
        return I32
    if info is not None and info.pushes and len(info.pushes) == 1:
        return info.pushes[0]
    return None


def _tagged(handler, opcode):
    source = _tag_source(opcode)
    if source is None:
        return handler
    if isinstance(source, int):
        def h(m, ip):
            nxt = handler(m, ip)
            m.tags[m.sp - 1] = source
            return nxt
    else:
        def h(m, ip):
            t = source(m, ip)
            nxt = handler(m, ip)
            if t is not None:
                m.tags[m.sp - 1] = t
            return nxt
    return h


# -- tables -----------------------------------------------------------------

def _build_tables():
    main = [_illegal] * 256
    fc = [_unimplemented_prefixed] * 256
    fd = [_unimplemented_prefixed] * 256
    special = {
        0x00: _unreachable, 0x01: _nop, 0x02: _block, 0x03: _block, 0x04: _if,
        0x05: _else, 0x0B: _end, 0x0C: _br, 0x0D: _br_if, 0x0E: _br_table,
        0x0F: _return, 0x10: _call, 0x11: _call_indirect, 0x1A: _drop,
        0x1B: _select, 0x1C: _select_t, 0x20: _local_get, 0x21: _local_set,
        0x22: _local_tee, 0x23: _global_get, 0x24: _global_set, 0x25: _table_get,
        0x26: _table_set, 0x3F: _memory_size, 0x40: _memory_grow,
        0x41: _i32_const, 0x42: _i64_const, 0x43: _f32_const, 0x44: _f64_const,
        0xD0: _ref_null, 0xD1: _ref_is_null, 0xD2: _ref_func,
        op.PREFIX_FC: _prefix_fc, op.PREFIX_FD: _prefix_fd, op.PROBE: _local_probe,
    }
    for code, h in special.items():
        main[code] = h

    loads = {
        "i32.load": ("<I", None), "i64.load": ("<Q", None), "f32.load": ("<f", None),
        "f64.load": ("<d", None),
        "i32.load8_s": ("<b", lambda v: v & MASK32), "i32.load8_u": ("<B", None),
        "i32.load16_s": ("<h", lambda v: v & MASK32), "i32.load16_u": ("<H", None),
        "i64.load8_s": ("<b", lambda v: v & MASK64), "i64.load8_u": ("<B", None),
        "i64.load16_s": ("<h", lambda v: v & MASK64), "i64.load16_u": ("<H", None),
        "i64.load32_s": ("<i", lambda v: v & MASK64), "i64.load32_u": ("<I", None),
    }
    stores = {
        "i32.store": ("<I", None), "i64.store": ("<Q", None), "f32.store": ("<f", None),
        "f64.store": ("<d", None),
        "i32.store8": ("<B", lambda v: v & 0xFF), "i32.store16": ("<H", lambda v: v & 0xFFFF),
        "i64.store8": ("<B", lambda v: v & 0xFF), "i64.store16": ("<H", lambda v: v & 0xFFFF),
        "i64.store32": ("<I", lambda v: v & MASK32),
    }
    numeric = {}
    for prefix, table in (("i32", _int_ops(32)), ("i64", _int_ops(64)),
                          ("f32", _float_ops(True)), ("f64", _float_ops(False))):
        for k, h in table.items():
            numeric[f"{prefix}.{k}"] = h
    numeric["i32.add"] = _i32_add
    numeric["i32.sub"] = _i32_sub
    numeric["i32.eqz"] = _i32_eqz
    numeric.update(_CONVERSIONS)

    fc_special = {8: _memory_init, 9: _data_drop, 10: _memory_copy, 11: _memory_fill,
                  12: _table_init, 13: _elem_drop, 14: _table_copy, 15: _table_grow,
                  16: _table_size, 17: _table_fill}
    for key, info in op.OPS.items():
        if key > 0xFF:
            sub = key & 0xFF
            if (key >> 8) == op.PREFIX_FC:
                fc[sub] = fc_special.get(sub) or _prefixed_unop(numeric[info.name])
            continue
        if key in special:
            continue
        if info.name in loads:
            fmt, conv = loads[info.name]
            main[key] = _make_load(fmt, info.width, conv)
        elif info.name in stores:
            fmt, conv = stores[info.name]
            main[key] = _make_store(fmt, info.width, conv)
        elif info.name in numeric:
            main[key] = numeric[info.name]
        else:  # pragma: no cover - table completeness guard
            raise RuntimeError(f"no handler for {info.name}")
    return main, fc, fd


MAIN, FC_TABLE, FD_TABLE = _build_tables()
CHECK = [_checked(h, i) for i, h in enumerate(MAIN)]
TAGGED = [_tagged(h, i) for i, h in enumerate(MAIN)]
TAGGED_CHECK = [_checked(h, i) for i, h in enumerate(TAGGED)]
PROBE_TABLE = [_global_probe] * 256


def dispatch(m: Interpreter, ip: int):
    """Select the handler for the instruction at ``ip`` via the active table."""
    return m.select_handler(ip)


def opcode_name(code, ip: int) -> str:
    b = code[ip]
    if b == op.PREFIX_FC:
        sub, _ = read_leb_unsigned(code, ip + 1, 32)
        info = op.OPS.get((b << 8) | sub)
        return info.name if info else f"0xfc {sub}"
    if b == op.PROBE:
        return "<probe>"
    info = op.OPS.get(b)
    return info.name if info else f"0x{b:02x}"


__all__ = [
    "Interpreter", "MAIN", "CHECK", "TAGGED", "TAGGED_CHECK", "PROBE_TABLE", "FC_TABLE", "FD_TABLE",
    "move_values", "do_control_transfer", "dispatch", "opcode_name",
    "DEFAULT_STACK_SLOTS", "DEFAULT_MAX_FRAMES", "InstrumentationError",
]
