"""A deliberately naive reference interpreter.

Every frame owns a fresh Python list for its operands and copies its
arguments into a separate locals list.  Structured control flow is tracked
with a runtime label stack, and the target of every branch is recomputed by
the scan oracle at the moment the branch executes.  Integers are kept as
signed Python ints and f32 rounding goes through ``ctypes``, so none of the
engine's numeric helpers are reused.

The step count is one per executed instruction, the terminal ``end`` of each
function included, which is exactly how often a global probe fires.
"""

from __future__ import annotations

import ctypes
import math
import struct
from dataclasses import dataclass, field

from ..binary import F32, F64, I32, I64, Module
from ..errors import Trap, WasmError
from ..opcodes import read_instruction
from ..runtime import FunctionInstance, HostFunction, Instance, PAGE_SIZE, instantiate
from .oracle import FUNCTION, OracleError, body_scan, scan_branch_target


@dataclass
class ReferenceResult:
    """Outcome of a reference run: ``kind`` is "results", "trap" or "step-limit"."""

    kind: str
    values: list = field(default_factory=list)
    trap: str | None = None
    steps: int = 0


class StepLimit(Exception):
    pass


# -- numeric semantics ------------------------------------------------------------

def _wrap(v: int, bits: int) -> int:
    half = 1 << (bits - 1)
    return ((v + half) % (1 << bits)) - half


def _u(v: int, bits: int) -> int:
    return v % (1 << bits)


def _single(x: float) -> float:
    return ctypes.c_float(x).value


def _int_to_single(n: int) -> float:
    if n == 0:
        return 0.0
    sign = -1.0 if n < 0 else 1.0
    a = abs(n)
    extra = a.bit_length() - 24
    if extra <= 0:
        return sign * float(a)
    q, r = divmod(a, 1 << extra)
    half = 1 << (extra - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return sign * float(q << extra)


def _div_s(a, b, bits):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    if a == -(1 << (bits - 1)) and b == -1:
        raise Trap("integer-overflow")
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _rem_s(a, b):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    r = abs(a) % abs(b)
    return -r if a < 0 else r


def _div_u(a, b, bits):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    return _wrap(_u(a, bits) // _u(b, bits), bits)


def _rem_u(a, b, bits):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    return _wrap(_u(a, bits) % _u(b, bits), bits)


def _rot(a, b, bits, left):
    k = _u(b, bits) % bits
    if not left:
        k = (bits - k) % bits
    u = _u(a, bits)
    return _wrap((u << k) | (u >> (bits - k)), bits)


def _integer_ops(prefix: str, bits: int) -> dict:
    w = lambda v: _wrap(v, bits)  # noqa: E731
    u = lambda v: _u(v, bits)  # noqa: E731
    ops = {
        "eqz": (1, lambda a: int(a == 0)),
        "eq": (2, lambda a, b: int(a == b)),
        "ne": (2, lambda a, b: int(a != b)),
        "lt_s": (2, lambda a, b: int(a < b)),
        "lt_u": (2, lambda a, b: int(u(a) < u(b))),
        "gt_s": (2, lambda a, b: int(a > b)),
        "gt_u": (2, lambda a, b: int(u(a) > u(b))),
        "le_s": (2, lambda a, b: int(a <= b)),
        "le_u": (2, lambda a, b: int(u(a) <= u(b))),
        "ge_s": (2, lambda a, b: int(a >= b)),
        "ge_u": (2, lambda a, b: int(u(a) >= u(b))),
        "clz": (1, lambda a: bits - u(a).bit_length()),
        "ctz": (1, lambda a: bits if a == 0 else (u(a) & -u(a)).bit_length() - 1),
        "popcnt": (1, lambda a: bin(u(a)).count("1")),
        "add": (2, lambda a, b: w(a + b)),
        "sub": (2, lambda a, b: w(a - b)),
        "mul": (2, lambda a, b: w(a * b)),
        "div_s": (2, lambda a, b: _div_s(a, b, bits)),
        "div_u": (2, lambda a, b: _div_u(a, b, bits)),
        "rem_s": (2, _rem_s),
        "rem_u": (2, lambda a, b: _rem_u(a, b, bits)),
        "and": (2, lambda a, b: a & b),
        "or": (2, lambda a, b: a | b),
        "xor": (2, lambda a, b: a ^ b),
        "shl": (2, lambda a, b: w(a << (u(b) % bits))),
        "shr_s": (2, lambda a, b: a >> (u(b) % bits)),
        "shr_u": (2, lambda a, b: w(u(a) >> (u(b) % bits))),
        "rotl": (2, lambda a, b: _rot(a, b, bits, True)),
        "rotr": (2, lambda a, b: _rot(a, b, bits, False)),
        "extend8_s": (1, lambda a: _wrap(a, 8)),
        "extend16_s": (1, lambda a: _wrap(a, 16)),
        "extend32_s": (1, lambda a: _wrap(a, 32)),
    }
    return {f"{prefix}.{k}": v for k, v in ops.items()}


def _fdiv(a, b):
    if b == 0.0:
        if a == 0.0 or a != a:
            return math.nan
        return math.copysign(math.inf, a) * math.copysign(1.0, b)
    return a / b


def _fmin(a, b):
    if a != a or b != b:
        return math.nan
    if a == b == 0.0:
        return -0.0 if math.copysign(1.0, a) < 0 or math.copysign(1.0, b) < 0 else 0.0
    return min(a, b)


def _fmax(a, b):
    if a != a or b != b:
        return math.nan
    if a == b == 0.0:
        return 0.0 if math.copysign(1.0, a) > 0 or math.copysign(1.0, b) > 0 else -0.0
    return max(a, b)


def _round_with(fn):
    def r(a):
        if a != a or a in (math.inf, -math.inf):
            return a
        return math.copysign(float(fn(a)), a)
    return r


def _sqrt(a):
    if a != a or a < 0:
        return math.nan
    return math.sqrt(a)


def _float_ops(prefix: str, rnd) -> dict:
    ops = {
        "eq": (2, lambda a, b: int(a == b)),
        "ne": (2, lambda a, b: int(a != b)),
        "lt": (2, lambda a, b: int(a < b)),
        "gt": (2, lambda a, b: int(a > b)),
        "le": (2, lambda a, b: int(a <= b)),
        "ge": (2, lambda a, b: int(a >= b)),
        "abs": (1, abs),
        "neg": (1, lambda a: -a),
        "ceil": (1, _round_with(math.ceil)),
        "floor": (1, _round_with(math.floor)),
        "trunc": (1, _round_with(math.trunc)),
        "nearest": (1, _round_with(round)),
        "sqrt": (1, lambda a: rnd(_sqrt(a))),
        "add": (2, lambda a, b: rnd(a + b)),
        "sub": (2, lambda a, b: rnd(a - b)),
        "mul": (2, lambda a, b: rnd(a * b)),
        "div": (2, lambda a, b: rnd(_fdiv(a, b))),
        "min": (2, _fmin),
        "max": (2, _fmax),
        "copysign": (2, math.copysign),
    }
    return {f"{prefix}.{k}": v for k, v in ops.items()}


def _truncate(bits: int, signed: bool, saturate: bool):
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)

    def t(a):
        if a != a:
            if saturate:
                return 0
            raise Trap("invalid-float-conversion")
        if a in (math.inf, -math.inf):
            if saturate:
                return _wrap(hi if a > 0 else lo, bits)
            raise Trap("integer-overflow")
        v = math.trunc(a)
        if v < lo or v > hi:
            if saturate:
                v = hi if v > hi else lo
            else:
                raise Trap("integer-overflow")
        return _wrap(v, bits)
    return t


def _bits_of(fmt_float: str, fmt_int: str):
    return lambda a: struct.unpack(fmt_int, struct.pack(fmt_float, a))[0]


_CONVERSIONS = {
    "i32.wrap_i64": lambda a: _wrap(a, 32),
    "i64.extend_i32_s": lambda a: a,
    "i64.extend_i32_u": lambda a: _u(a, 32),
    "f32.convert_i32_s": _int_to_single,
    "f32.convert_i32_u": lambda a: _int_to_single(_u(a, 32)),
    "f32.convert_i64_s": _int_to_single,
    "f32.convert_i64_u": lambda a: _int_to_single(_u(a, 64)),
    "f64.convert_i32_s": float,
    "f64.convert_i32_u": lambda a: float(_u(a, 32)),
    "f64.convert_i64_s": float,
    "f64.convert_i64_u": lambda a: float(_u(a, 64)),
    "f32.demote_f64": _single,
    "f64.promote_f32": lambda a: a,
    "i32.reinterpret_f32": _bits_of("<f", "<i"),
    "i64.reinterpret_f64": _bits_of("<d", "<q"),
    "f32.reinterpret_i32": _bits_of("<i", "<f"),
    "f64.reinterpret_i64": _bits_of("<q", "<d"),
}
for _dst, _bits in (("i32", 32), ("i64", 64)):
    for _src in ("f32", "f64"):
        for _sign in ("s", "u"):
            _CONVERSIONS[f"{_dst}.trunc_{_src}_{_sign}"] = _truncate(_bits, _sign == "s", False)
            _CONVERSIONS[f"{_dst}.trunc_sat_{_src}_{_sign}"] = _truncate(_bits, _sign == "s", True)

PURE_OPS: dict = {}
PURE_OPS.update(_integer_ops("i32", 32))
PURE_OPS.update(_integer_ops("i64", 64))
PURE_OPS.update(_float_ops("f32", _single))
PURE_OPS.update(_float_ops("f64", lambda x: x))
PURE_OPS.update({k: (1, f) for k, f in _CONVERSIONS.items()})
del PURE_OPS["i32.extend32_s"]

# name -> (width, signed, value type)
_LOADS = {
    "i32.load": (4, True, I32), "i64.load": (8, True, I64),
    "f32.load": (4, None, F32), "f64.load": (8, None, F64),
    "i32.load8_s": (1, True, I32), "i32.load8_u": (1, False, I32),
    "i32.load16_s": (2, True, I32), "i32.load16_u": (2, False, I32),
    "i64.load8_s": (1, True, I64), "i64.load8_u": (1, False, I64),
    "i64.load16_s": (2, True, I64), "i64.load16_u": (2, False, I64),
    "i64.load32_s": (4, True, I64), "i64.load32_u": (4, False, I64),
}
_STORES = {
    "i32.store": (4, I32), "i64.store": (8, I64), "f32.store": (4, F32), "f64.store": (8, F64),
    "i32.store8": (1, I32), "i32.store16": (2, I32),
    "i64.store8": (1, I64), "i64.store16": (2, I64), "i64.store32": (4, I64),
}


# -- value conversions between the engine representation and this one -------------

def _to_ref(t: int, v):
    if t in (I32, I64):
        return _wrap(int(v), 32 if t == I32 else 64)
    if t == F32:
        return _single(float(v))
    if t == F64:
        return float(v)
    return v


def _from_ref(t: int, v):
    """Reference value -> engine stack representation (globals)."""
    if t == I32:
        return _u(v, 32)
    if t == I64:
        return _u(v, 64)
    return v


def _zero(t: int):
    if t in (I32, I64):
        return 0
    if t in (F32, F64):
        return 0.0
    return None


# -- the interpreter ---------------------------------------------------------------

class _Label:
    __slots__ = ("opener", "base")

    def __init__(self, opener: int, base: int):
        self.opener = opener   # instruction index, or FUNCTION
        self.base = base


class _Frame:
    __slots__ = ("func", "ip", "locals", "stack", "labels", "scan")

    def __init__(self, func: FunctionInstance, args: list):
        self.func = func
        self.scan = body_scan(func.instance.module, func.index)
        types = func.validated.local_types
        self.locals = list(args) + [_zero(t) for t in types[len(args):]]
        self.stack: list = []
        self.labels = [_Label(FUNCTION, 0)]
        self.ip = func.code_start


class ReferenceInterpreter:
    """Runs functions of one instance. ``check_popcnt`` cross-checks the
    runtime label stack against the oracle's static popcnt at every taken
    branch."""

    def __init__(self, instance: Instance, *, step_limit: int = 1_000_000,
                 max_frames: int = 10_000, check_popcnt: bool = True):
        self.instance = instance
        self.module = instance.module
        self.step_limit = step_limit
        self.max_frames = max_frames
        self.check_popcnt = check_popcnt
        self.steps = 0

    def call(self, func, args: list) -> list:
        if isinstance(func, HostFunction):
            return self._host(func, args)
        frames = [_Frame(func, args)]
        results: list = []
        while frames:
            results = self._step(frames)
        return results

    def _host(self, func: HostFunction, args: list) -> list:
        try:
            r = func.callback(*args)
        except WasmError:
            raise
        except Exception:
            raise Trap("host-error") from None
        if r is None:
            r = ()
        elif not isinstance(r, (tuple, list)):
            r = (r,)
        if len(r) != len(func.type.results):
            raise Trap("host-error")
        return [_to_ref(t, v) for t, v in zip(func.type.results, r)]

    def _branch(self, fr: _Frame, depth: int, ip: int, scan_depth=None) -> None:
        target = scan_branch_target(self.module, fr.func.index, ip, scan_depth)
        label = fr.labels[-1 - depth]
        stack = fr.stack
        arity = target.valcnt
        popcnt = len(stack) - label.base - arity
        if self.check_popcnt and popcnt != target.popcnt:
            raise OracleError(f"runtime popcnt {popcnt} != scanned {target.popcnt} at {ip}")
        carried = stack[len(stack) - arity:] if arity else []
        del stack[label.base:]
        stack.extend(carried)
        is_loop = label.opener != FUNCTION and \
            fr.scan.instrs[label.opener][1].name == "loop"
        # a loop re-pushes its label when its opcode runs again; an end pops it
        del fr.labels[len(fr.labels) - depth - (1 if is_loop else 0):]
        fr.ip = target.target_ip

    def _step(self, frames: list) -> list:
        """Run until the top frame returns; returns its results."""
        fr = frames[-1]
        inst = self.instance
        code = self.module.original_bytes
        while True:
            self.steps += 1
            if self.steps > self.step_limit:
                raise StepLimit()
            ip = fr.ip
            info, imm, nxt = read_instruction(code, ip)
            name = info.name
            stack = fr.stack
            fr.ip = nxt

            if name in PURE_OPS:
                arity, fn = PURE_OPS[name]
                if arity == 1:
                    stack[-1] = fn(stack[-1])
                else:
                    b = stack.pop()
                    stack[-1] = fn(stack[-1], b)
            elif name == "local.get":
                stack.append(fr.locals[imm])
            elif name == "local.set":
                fr.locals[imm] = stack.pop()
            elif name == "local.tee":
                fr.locals[imm] = stack[-1]
            elif name in ("i32.const", "i64.const"):
                stack.append(imm)
            elif name == "f32.const":
                stack.append(struct.unpack("<f", imm)[0])
            elif name == "f64.const":
                stack.append(struct.unpack("<d", imm)[0])
            elif name in ("block", "loop"):
                i = fr.scan.index[ip]
                params, _ = fr.scan.signature(i)
                fr.labels.append(_Label(i, len(stack) - len(params)))
            elif name == "if":
                i = fr.scan.index[ip]
                params, _ = fr.scan.signature(i)
                cond = stack.pop()
                fr.labels.append(_Label(i, len(stack) - len(params)))
                if not cond:
                    fr.ip = scan_branch_target(self.module, fr.func.index, ip).target_ip
            elif name == "else":
                fr.ip = scan_branch_target(self.module, fr.func.index, ip).target_ip
            elif name == "end":
                fr.labels.pop()
                if not fr.labels:
                    return self._return(frames, fr)
            elif name == "br":
                self._branch(fr, imm, ip)
            elif name == "br_if":
                if stack.pop():
                    self._branch(fr, imm, ip)
            elif name == "br_table":
                targets, default = imm
                k = _u(stack.pop(), 32)
                d = targets[k] if k < len(targets) else default
                self._branch(fr, d, ip, d)
            elif name == "return":
                return self._return(frames, fr)
            elif name in ("call", "call_indirect"):
                if name == "call":
                    callee = inst.functions[imm]
                else:
                    ti, tab = imm
                    k = _u(stack.pop(), 32)
                    elems = inst.tables[tab].elements
                    if k >= len(elems):
                        raise Trap("table-out-of-bounds")
                    callee = elems[k]
                    if callee is None:
                        raise Trap("indirect-null")
                    if callee.type != self.module.types[ti]:
                        raise Trap("indirect-signature-mismatch")
                n = len(callee.type.params)
                args = stack[len(stack) - n:] if n else []
                del stack[len(stack) - n:]
                if isinstance(callee, HostFunction):
                    stack.extend(self._host(callee, args))
                else:
                    if callee.instance is not inst:
                        raise WasmError("reference interpreter runs a single instance")
                    if len(frames) >= self.max_frames:
                        raise Trap("stack-overflow")
                    fr = _Frame(callee, args)
                    frames.append(fr)
            elif name == "unreachable":
                raise Trap("unreachable")
            elif name == "nop":
                pass
            elif name == "drop":
                stack.pop()
            elif name in ("select", "select_t"):
                c = stack.pop()
                b = stack.pop()
                if not c:
                    stack[-1] = b
            elif name == "global.get":
                g = inst.globals[imm]
                stack.append(_to_ref(g.type.valtype, g.value))
            elif name == "global.set":
                g = inst.globals[imm]
                g.value = _from_ref(g.type.valtype, stack.pop())
            elif name in _LOADS:
                width, signed, t = _LOADS[name]
                addr = self._address(stack.pop(), imm[1], width)
                raw = bytes(inst.memories[0].data[addr:addr + width])
                if t == F32:
                    stack.append(struct.unpack("<f", raw)[0])
                elif t == F64:
                    stack.append(struct.unpack("<d", raw)[0])
                else:
                    v = int.from_bytes(raw, "little", signed=signed)
                    stack.append(_wrap(v, 32 if t == I32 else 64))
            elif name in _STORES:
                width, t = _STORES[name]
                v = stack.pop()
                addr = self._address(stack.pop(), imm[1], width)
                if t == F32:
                    raw = struct.pack("<f", v)
                elif t == F64:
                    raw = struct.pack("<d", v)
                else:
                    raw = _u(v, 8 * width).to_bytes(width, "little")
                inst.memories[0].data[addr:addr + width] = raw
            elif name == "memory.size":
                stack.append(len(inst.memories[0].data) // PAGE_SIZE)
            elif name == "memory.grow":
                stack[-1] = _wrap(inst.memories[0].grow(_u(stack[-1], 32)), 32)
            elif name == "ref.null":
                stack.append(None)
            elif name == "ref.is_null":
                stack[-1] = int(stack[-1] is None)
            elif name == "ref.func":
                stack.append(inst.functions[imm])
            else:
                self._bulk(name, imm, stack)
            fr = frames[-1]

    def _return(self, frames: list, fr: _Frame) -> list:
        n = len(fr.func.type.results)
        results = fr.stack[len(fr.stack) - n:] if n else []
        frames.pop()
        if frames:
            frames[-1].stack.extend(results)
        return results

    def _address(self, base: int, offset: int, width: int) -> int:
        ea = _u(base, 32) + offset
        if ea + width > len(self.instance.memories[0].data):
            raise Trap("memory-out-of-bounds")
        return ea

    def _bulk(self, name: str, imm, stack: list) -> None:
        inst = self.instance
        if name in ("table.get", "table.set"):
            elems = inst.tables[imm].elements
            if name == "table.get":
                k = _u(stack[-1], 32)
                if k >= len(elems):
                    raise Trap("table-out-of-bounds")
                stack[-1] = elems[k]
            else:
                v = stack.pop()
                k = _u(stack.pop(), 32)
                if k >= len(elems):
                    raise Trap("table-out-of-bounds")
                elems[k] = v
            return
        if name == "table.size":
            stack.append(len(inst.tables[imm].elements))
            return
        if name == "table.grow":
            n = _u(stack.pop(), 32)
            stack[-1] = _wrap(inst.tables[imm].grow(n, stack[-1]), 32)
            return
        if name == "data.drop":
            inst.data_segments[imm] = None
            return
        if name == "elem.drop":
            inst.element_segments[imm] = None
            return
        c = stack.pop()
        b = stack.pop()
        a = stack.pop()
        if name == "memory.fill":
            mem = inst.memories[0].data
            dst, n = _u(a, 32), _u(c, 32)
            if dst + n > len(mem):
                raise Trap("memory-out-of-bounds")
            for k in range(n):
                mem[dst + k] = _u(b, 8)
        elif name in ("memory.copy", "memory.init"):
            mem = inst.memories[0].data
            dst, src, n = _u(a, 32), _u(b, 32), _u(c, 32)
            source = mem if name == "memory.copy" else (inst.data_segments[imm[0]] or b"")
            if src + n > len(source) or dst + n > len(mem):
                raise Trap("memory-out-of-bounds")
            chunk = bytes(source[src:src + n])
            for k in range(n):
                mem[dst + k] = chunk[k]
        elif name in ("table.copy", "table.init"):
            if name == "table.copy":
                dst_t, src_elems = inst.tables[imm[0]].elements, inst.tables[imm[1]].elements
            else:
                dst_t, src_elems = inst.tables[imm[1]].elements, inst.element_segments[imm[0]] or []
            dst, src, n = _u(a, 32), _u(b, 32), _u(c, 32)
            if src + n > len(src_elems) or dst + n > len(dst_t):
                raise Trap("table-out-of-bounds")
            chunk = list(src_elems[src:src + n])
            for k in range(n):
                dst_t[dst + k] = chunk[k]
        elif name == "table.fill":
            elems = inst.tables[imm].elements
            i, n = _u(a, 32), _u(c, 32)
            if i + n > len(elems):
                raise Trap("table-out-of-bounds")
            for k in range(n):
                elems[i + k] = b
        else:
            raise WasmError(f"reference interpreter does not support {name}")


def reference_execute(module: Module, func_index: int, args, step_limit: int = 1_000_000,
                      *, imports=None, instance: Instance | None = None,
                      max_frames: int = 10_000) -> ReferenceResult:
    """Run ``func_index`` with the reference interpreter on a fresh instance.

    Arguments and results are signed integers / floats / references.
    """
    if instance is None:
        instance = instantiate(module, imports)
    ref = ReferenceInterpreter(instance, step_limit=step_limit, max_frames=max_frames)
    func = instance.functions[func_index]
    vals = [_to_ref(t, v) for t, v in zip(func.type.params, args)]
    try:
        out = ref.call(func, vals)
    except Trap as t:
        return ReferenceResult("trap", trap=t.kind, steps=ref.steps)
    except StepLimit:
        return ReferenceResult("step-limit", steps=ref.steps - 1)
    return ReferenceResult("results", values=out, steps=ref.steps)


def values_equal(a, b) -> bool:
    """Compare result values: NaNs match any NaN, zeros compare by sign,
    references by function index."""
    if isinstance(a, float) or isinstance(b, float):
        if not (isinstance(a, float) and isinstance(b, float)):
            return False
        if a != a or b != b:
            return a != a and b != b
        return a == b and math.copysign(1.0, a) == math.copysign(1.0, b)
    if a is None or b is None:
        return a is b
    if isinstance(a, (FunctionInstance, HostFunction)):
        return isinstance(b, (FunctionInstance, HostFunction)) and \
            getattr(a, "index", None) == getattr(b, "index", None)
    return a == b
