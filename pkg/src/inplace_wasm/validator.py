"""Single-pass function validation that emits the branch sidetable.

The validator walks each function body once, typechecking with an abstract
control stack and an abstract value stack.  Every branch-family instruction
(``if``, ``else``, ``br``, ``br_if``, ``br_table``) appends fixed-size entries
``(delta_ip, delta_stp, valcnt, popcnt)`` to the function's sidetable.

Conventions shared with the interpreter:

* ``delta_ip`` is relative to the offset of the branch's own opcode byte.
* Forward branches land on the target construct's ``end`` opcode; backward
  branches land on the ``loop`` opcode.  The ``if`` false path lands on the
  byte after ``else`` or on ``end`` when there is no else arm.
* ``delta_stp`` is relative to the index of the entry itself.
* A ``br_table`` emits a header whose ``valcnt`` field holds the number of
  non-default targets, then one entry per target and the default last.
"""

from __future__ import annotations

from array import array
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

from . import opcodes as op
from .binary import (
    EXTERNREF, F32, F64, FUNCREF, I32, I64, KIND_FUNC, MAX_NESTING, REF_TYPES,
    TYPE_NAMES, VALUE_TYPES, FuncType, Module, decode_locals, read_leb_signed,
    read_leb_unsigned,
)
from .errors import DecodeError, ValidationError

UNKNOWN = 0

BLOCK = "block"
LOOP = "loop"
IF = "if"
ELSE = "else"
FUNCTION = "function"

ENTRY_SIZE = 4          # 32-bit fields per entry
ENTRY_BYTES = 16

_NUMERIC = frozenset({I32, I64, F32, F64})


class SidetableEntry(NamedTuple):
    delta_ip: int
    delta_stp: int
    valcnt: int
    popcnt: int


class Sidetable:
    """Flat array of 32-bit fields, four per entry, in branch-origin order."""

    __slots__ = ("data",)

    def __init__(self, data: array | None = None):
        self.data = data if data is not None else array("i")

    def __len__(self):
        return len(self.data) // ENTRY_SIZE

    def __getitem__(self, index: int) -> SidetableEntry:
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        i = index * ENTRY_SIZE
        d = self.data
        return SidetableEntry(d[i], d[i + 1], d[i + 2], d[i + 3])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def nbytes(self) -> int:
        return ENTRY_BYTES * len(self)

    def compact_nbytes(self) -> int:
        """Size if each field used 2 bytes whenever its value fits in 16 bits."""
        total = 0
        for v in self.data:
            total += 2 if -0x8000 <= v <= 0xFFFF else 4
        return total

    def dump(self) -> list[str]:
        return [f"{i}: Δip={e.delta_ip} Δstp={e.delta_stp} valcnt={e.valcnt} popcnt={e.popcnt}"
                for i, e in enumerate(self)]


@dataclass(slots=True)
class ControlEntry:
    kind: str
    params: tuple
    results: tuple
    height: int                 # abstract height below the construct's params
    start_ip: int
    start_stp: int
    fixups: list = field(default_factory=list)
    unreachable: bool = False
    else_seen: bool = False
    if_entry: int = -1

    @property
    def height_at_entry(self) -> int:
        return self.height + len(self.params)

    @property
    def label_types(self) -> tuple:
        return self.params if self.kind == LOOP else self.results


def branch_target_arity(ctl: ControlEntry) -> int:
    """Number of values a branch to ``ctl`` transfers."""
    return len(ctl.params) if ctl.kind == LOOP else len(ctl.results)


@dataclass
class ValidatedFunction:
    func_index: int
    type: FuncType
    sidetable: Sidetable
    max_stack_height: int
    local_types: list
    origins: array              # branch opcode offset for every entry
    boundaries: frozenset | None = None

    @property
    def num_params(self) -> int:
        return len(self.type.params)

    @property
    def num_locals(self) -> int:
        return len(self.local_types)


class ModuleContext:
    """Index-space views of a module needed while validating bodies."""

    def __init__(self, module: Module):
        self.module = module
        self.types = module.types
        self.funcs = [module.types[i] for i in module.function_type_indices()]
        self.tables = module.table_types()
        self.memories = module.memory_types()
        self.globals = module.global_types()
        self.num_imported_globals = len(module.imported("global"))
        self.elem_types = [seg.reftype for seg in module.element_segments]
        self.data_count = module.data_count
        refs = set()
        for e in module.exports:
            if e.kind == KIND_FUNC:
                refs.add(e.index)
        exprs = [g.init for g in module.globals]
        for seg in module.element_segments:
            exprs.extend(seg.items)
        for expr in exprs:
            for name, value in expr.instrs:
                if name == "ref.func":
                    refs.add(value)
        self.refs = frozenset(refs)


def _module_context(module: Module) -> ModuleContext:
    ctx = getattr(module, "_validation_context", None)
    if ctx is None:
        ctx = ModuleContext(module)
        module._validation_context = ctx
    return ctx


def _tname(t: int) -> str:
    return TYPE_NAMES.get(t, "unknown") if t else "unknown"


def validate_function(module: Module, func_index: int, *, track_sidetable: bool = True,
                      collect_boundaries: bool = False, visit_counter=None,
                      context: ModuleContext | None = None) -> ValidatedFunction:
    """Typecheck one defined function and build its sidetable in a single pass.

    ``func_index`` is in the module's function index space (imports first).
    ``visit_counter``, when given, is a mapping incremented once per visited
    instruction offset.
    """
    ctx = context or _module_context(module)
    try:
        decl = module.defined_function(func_index)
    except IndexError:
        raise ValidationError("cannot validate an imported function", None, func_index) from None
    ftype = module.types[decl.type_index]
    body = decl.body
    try:
        local_types = decode_locals(body, ftype)
    except ValidationError as e:
        raise ValidationError(str(e), body.body_start, func_index) from None
    try:
        return _validate_body(ctx, func_index, ftype, body, local_types, track_sidetable,
                              collect_boundaries, visit_counter)
    except DecodeError as e:
        raise ValidationError(f"malformed immediate: {e}", e.offset, func_index) from None
    except IndexError:
        raise ValidationError("truncated instruction", body.code_end, func_index) from None


def _validate_body(ctx: ModuleContext, func_index, ftype, body, local_types, track,
                   collect_boundaries, visit_counter) -> ValidatedFunction:
    code = ctx.module.original_bytes
    pos = body.code_start
    code_end = body.code_end
    n_locals = len(local_types)

    vals: list[int] = []
    ctrls: list[ControlEntry] = []
    st = array("i")
    origins = array("i")
    boundaries = set() if collect_boundaries else None
    peak = 0
    op_ip = pos

    def fail(msg, at=None):
        raise ValidationError(msg, op_ip if at is None else at, func_index)

    def push_ctrl(kind, params, results, start_ip):
        if len(ctrls) >= MAX_NESTING:
            fail("nesting depth exceeds implementation limit")
        ctl = ControlEntry(kind, params, results, len(vals), start_ip, len(st) // ENTRY_SIZE)
        ctrls.append(ctl)
        vals.extend(params)
        return ctl

    def pop_ctrl():
        ctl = ctrls[-1]
        pop_vals(ctl.results)
        if len(vals) != ctl.height:
            fail("type mismatch: values remaining on stack at end of block")
        ctrls.pop()
        return ctl

    def pop(expect=UNKNOWN):
        ctl = ctrls[-1]
        if len(vals) == ctl.height:
            if ctl.unreachable:
                return expect
            fail("type mismatch: stack underflow")
        actual = vals.pop()
        if expect and actual and actual != expect:
            fail(f"type mismatch: expected {_tname(expect)}, got {_tname(actual)}")
        return actual or expect

    def pop_vals(types):
        out = [0] * len(types)
        for i in range(len(types) - 1, -1, -1):
            out[i] = pop(types[i])
        return out

    def set_unreachable():
        ctl = ctrls[-1]
        del vals[ctl.height:]
        ctl.unreachable = True

    def label(depth):
        if depth >= len(ctrls):
            fail(f"unknown label {depth}")
        return ctrls[-1 - depth]

    def emit_branch(depth, height):
        # valcnt/popcnt for a transfer to the construct `depth` levels out
        tgt = label(depth)
        if not track:
            return
        arity = branch_target_arity(tgt)
        idx = len(st) // ENTRY_SIZE
        popcnt = 0 if ctrls[-1].unreachable else height - tgt.height - arity
        if tgt.kind == LOOP:
            st.extend((tgt.start_ip - op_ip, tgt.start_stp - idx, arity, popcnt))
        else:
            st.extend((0, 0, arity, popcnt))
            tgt.fixups.append(idx)
        origins.append(op_ip)

    def emit_placeholder(valcnt):
        idx = len(st) // ENTRY_SIZE
        st.extend((0, 0, valcnt, 0))
        origins.append(op_ip)
        return idx

    def resolve(idx, target_ip, target_stp):
        i = idx * ENTRY_SIZE
        st[i] = target_ip - origins[idx]
        st[i + 1] = target_stp - idx

    def read_u32():
        nonlocal pos
        v, n = read_leb_unsigned(code, pos, 32)
        pos += n
        return v

    def blocktype():
        nonlocal pos
        b = code[pos]
        if b == 0x40:
            pos += 1
            return (), ()
        if b in VALUE_TYPES:
            pos += 1
            return (), (b,)
        v, n = read_leb_signed(code, pos, 33)
        if v < 0:
            fail(f"invalid block type 0x{b:02x}")
        if v >= len(ctx.types):
            fail(f"unknown type index {v}")
        pos += n
        t = ctx.types[v]
        return t.params, t.results

    def memarg(width):
        if not ctx.memories:
            fail("unknown memory 0")
        align = read_u32()
        read_u32()
        if align >= 32 or (1 << align) > width:
            fail("alignment must not be larger than natural")

    def check_table(t):
        if t >= len(ctx.tables):
            fail(f"unknown table {t}")
        return ctx.tables[t].reftype

    def check_memory():
        if not ctx.memories:
            fail("unknown memory 0")

    def check_zero_byte():
        nonlocal pos
        if code[pos] != 0:
            fail("zero byte expected", pos)
        pos += 1

    push_ctrl(FUNCTION, (), ftype.results, body.code_start)
    ops = op.OPS

    while ctrls:
        if pos >= code_end:
            fail("unexpected end of function body", pos)
        op_ip = pos
        if visit_counter is not None:
            visit_counter[op_ip] += 1
        if boundaries is not None:
            boundaries.add(op_ip)
        opcode = code[pos]
        pos += 1

        if opcode == 0x0B:  # end
            ctl = pop_ctrl()
            if ctl.kind == IF:
                if ctl.params != ctl.results:
                    fail("type mismatch: if without else must not change the stack type")
            if track:
                here = len(st) // ENTRY_SIZE
                if ctl.if_entry >= 0:
                    resolve(ctl.if_entry, op_ip, here)
                for idx in ctl.fixups:
                    resolve(idx, op_ip, here)
            vals.extend(ctl.results)
            if not ctrls and pos != code_end:
                fail("operators remaining after function end", pos)
        elif opcode in (0x02, 0x03):  # block, loop
            params, results = blocktype()
            pop_vals(params)
            push_ctrl(BLOCK if opcode == 0x02 else LOOP, params, results, op_ip)
        elif opcode == 0x04:  # if
            params, results = blocktype()
            pop(I32)
            pop_vals(params)
            ctl = push_ctrl(IF, params, results, op_ip)
            if track:
                ctl.if_entry = emit_placeholder(0)
        elif opcode == 0x05:  # else
            ctl = ctrls[-1]
            if ctl.kind != IF:
                fail("else without matching if")
            pop_ctrl()
            nxt = push_ctrl(ELSE, ctl.params, ctl.results, ctl.start_ip)
            nxt.start_stp = ctl.start_stp
            if track:
                else_idx = emit_placeholder(len(ctl.results))
                resolve(ctl.if_entry, op_ip + 1, else_idx + 1)
                nxt.fixups = ctl.fixups
                nxt.fixups.append(else_idx)
        elif opcode == 0x0C:  # br
            depth = read_u32()
            emit_branch(depth, len(vals))
            pop_vals(label(depth).label_types)
            set_unreachable()
        elif opcode == 0x0D:  # br_if
            depth = read_u32()
            pop(I32)
            emit_branch(depth, len(vals))
            types = label(depth).label_types
            pop_vals(types)
            vals.extend(types)
        elif opcode == 0x0E:  # br_table
            count = read_u32()
            targets = [read_u32() for _ in range(count)]
            default = read_u32()
            pop(I32)
            height = len(vals)
            arity = len(label(default).label_types)
            if track:
                emit_placeholder(count)
            for depth in targets:
                types = label(depth).label_types
                if len(types) != arity:
                    fail("type mismatch: br_table targets have different arities")
                emit_branch(depth, height)
                vals.extend(pop_vals(types))
            emit_branch(default, height)
            pop_vals(label(default).label_types)
            set_unreachable()
        elif opcode == 0x0F:  # return
            pop_vals(ftype.results)
            set_unreachable()
        elif opcode == 0x00:  # unreachable
            set_unreachable()
        elif opcode == 0x01:  # nop
            pass
        elif opcode == 0x10:  # call
            f = read_u32()
            if f >= len(ctx.funcs):
                fail(f"unknown function {f}")
            t = ctx.funcs[f]
            pop_vals(t.params)
            vals.extend(t.results)
        elif opcode == 0x11:  # call_indirect
            ti = read_u32()
            tab = read_u32()
            if check_table(tab) != FUNCREF:
                fail("call_indirect requires a funcref table")
            if ti >= len(ctx.types):
                fail(f"unknown type {ti}")
            t = ctx.types[ti]
            pop(I32)
            pop_vals(t.params)
            vals.extend(t.results)
        elif opcode == 0x1A:  # drop
            pop()
        elif opcode == 0x1B:  # select
            pop(I32)
            t1 = pop()
            t2 = pop(t1)
            if (t1 and t1 not in _NUMERIC) or (t2 and t2 not in _NUMERIC):
                fail("type mismatch: select operands must be numeric")
            vals.append(t1 or t2)
        elif opcode == 0x1C:  # select t*
            count = read_u32()
            if count != 1:
                fail("invalid result arity for typed select")
            t = code[pos]
            if t not in VALUE_TYPES:
                fail(f"invalid value type 0x{t:02x}")
            pos += 1
            pop(I32)
            pop(t)
            pop(t)
            vals.append(t)
        elif opcode in (0x20, 0x21, 0x22):  # local.get/set/tee
            i = read_u32()
            if i >= n_locals:
                fail(f"unknown local {i}")
            t = local_types[i]
            if opcode == 0x20:
                vals.append(t)
            elif opcode == 0x21:
                pop(t)
            else:
                pop(t)
                vals.append(t)
        elif opcode == 0x23:  # global.get
            g = read_u32()
            if g >= len(ctx.globals):
                fail(f"unknown global {g}")
            vals.append(ctx.globals[g].valtype)
        elif opcode == 0x24:  # global.set
            g = read_u32()
            if g >= len(ctx.globals):
                fail(f"unknown global {g}")
            if not ctx.globals[g].mutable:
                fail("global is immutable")
            pop(ctx.globals[g].valtype)
        elif opcode == 0x25:  # table.get
            rt = check_table(read_u32())
            pop(I32)
            vals.append(rt)
        elif opcode == 0x26:  # table.set
            rt = check_table(read_u32())
            pop(rt)
            pop(I32)
        elif 0x28 <= opcode <= 0x3E:  # loads and stores
            info = ops[opcode]
            memarg(info.width)
            for t in reversed(info.pops):
                pop(t)
            vals.extend(info.pushes)
        elif opcode in (0x3F, 0x40):  # memory.size/grow
            check_memory()
            check_zero_byte()
            if opcode == 0x40:
                pop(I32)
            vals.append(I32)
        elif opcode == 0x41:
            _, n = read_leb_signed(code, pos, 32)
            pos += n
            vals.append(I32)
        elif opcode == 0x42:
            _, n = read_leb_signed(code, pos, 64)
            pos += n
            vals.append(I64)
        elif opcode == 0x43:
            pos += 4
            vals.append(F32)
        elif opcode == 0x44:
            pos += 8
            vals.append(F64)
        elif 0x45 <= opcode <= 0xC4:
            info = ops[opcode]
            for t in reversed(info.pops):
                pop(t)
            vals.extend(info.pushes)
        elif opcode == 0xD0:  # ref.null
            t = code[pos]
            pos += 1
            if t not in REF_TYPES:
                fail(f"invalid reference type 0x{t:02x}")
            vals.append(t)
        elif opcode == 0xD1:  # ref.is_null
            t = pop()
            if t and t not in REF_TYPES:
                fail("type mismatch: ref.is_null expects a reference")
            vals.append(I32)
        elif opcode == 0xD2:  # ref.func
            f = read_u32()
            if f >= len(ctx.funcs):
                fail(f"unknown function {f}")
            if f not in ctx.refs:
                fail(f"undeclared function reference {f}")
            vals.append(FUNCREF)
        elif opcode == op.PREFIX_FC:
            sub = read_u32()
            info = ops.get((op.PREFIX_FC << 8) | sub)
            if info is None:
                fail(f"unknown opcode 0xfc {sub}")
            if sub <= 7:
                pass
            elif sub == 8:  # memory.init
                d = read_u32()
                check_memory()
                check_zero_byte()
                if ctx.data_count is None:
                    fail("memory.init requires a data count section")
                if d >= ctx.data_count:
                    fail(f"unknown data segment {d}")
            elif sub == 9:  # data.drop
                d = read_u32()
                if ctx.data_count is None:
                    fail("data.drop requires a data count section")
                if d >= ctx.data_count:
                    fail(f"unknown data segment {d}")
            elif sub == 10:  # memory.copy
                check_memory()
                check_zero_byte()
                check_zero_byte()
            elif sub == 11:  # memory.fill
                check_memory()
                check_zero_byte()
            elif sub == 12:  # table.init
                e = read_u32()
                rt = check_table(read_u32())
                if e >= len(ctx.elem_types):
                    fail(f"unknown element segment {e}")
                if ctx.elem_types[e] != rt:
                    fail("type mismatch: element segment and table types differ")
            elif sub == 13:  # elem.drop
                e = read_u32()
                if e >= len(ctx.elem_types):
                    fail(f"unknown element segment {e}")
            elif sub == 14:  # table.copy
                dst = check_table(read_u32())
                src = check_table(read_u32())
                if dst != src:
                    fail("type mismatch: table.copy between different reference types")
            elif sub == 15:  # table.grow
                rt = check_table(read_u32())
                pop(I32)
                pop(rt)
                vals.append(I32)
            elif sub == 16:  # table.size
                check_table(read_u32())
            elif sub == 17:  # table.fill
                rt = check_table(read_u32())
                pop(I32)
                pop(rt)
                pop(I32)
            if info.pops is not None:
                for t in reversed(info.pops):
                    pop(t)
                vals.extend(info.pushes)
        elif opcode == op.PREFIX_FD:
            fail("unimplemented opcode 0xfd (SIMD)")
        else:
            fail(f"unknown opcode 0x{opcode:02x}")

        if pos > code_end:
            fail("instruction crosses end of function body", op_ip)
        if len(vals) > peak:
            peak = len(vals)

    return ValidatedFunction(
        func_index=func_index,
        type=ftype,
        sidetable=Sidetable(st),
        max_stack_height=n_locals + peak,
        local_types=local_types,
        origins=origins,
        boundaries=frozenset(boundaries) if boundaries is not None else None,
    )


def validate_const_expr(ctx: ModuleContext, expr, expected: int) -> None:
    """Constant expressions: constants, ref.null, ref.func and global.get of
    immutable imported globals, producing exactly one ``expected`` value."""
    stack = []
    for name, value in expr.instrs:
        if name == "i32.const":
            stack.append(I32)
        elif name == "i64.const":
            stack.append(I64)
        elif name == "f32.const":
            stack.append(F32)
        elif name == "f64.const":
            stack.append(F64)
        elif name == "ref.null":
            if value not in REF_TYPES:
                raise ValidationError("invalid reference type in constant expression", expr.start)
            stack.append(value)
        elif name == "ref.func":
            if value >= len(ctx.funcs):
                raise ValidationError(f"unknown function {value}", expr.start)
            stack.append(FUNCREF)
        elif name == "global.get":
            if value >= ctx.num_imported_globals:
                raise ValidationError("constant expression may only read imported globals", expr.start)
            g = ctx.globals[value]
            if g.mutable:
                raise ValidationError("constant expression reads a mutable global", expr.start)
            stack.append(g.valtype)
        else:
            raise ValidationError(f"constant expression required, found {name}", expr.start)
    if stack != [expected]:
        raise ValidationError(
            f"type mismatch in constant expression: expected [{_tname(expected)}]", expr.start)


def validate_module(module: Module, *, workers: int | None = None,
                    track_sidetable: bool = True) -> list[ValidatedFunction]:
    """Validate module-level declarations and every defined function.

    Returns one :class:`ValidatedFunction` per defined function, in order.
    """
    ctx = _module_context(module)
    if len(ctx.memories) > 1:
        raise ValidationError("multiple memories")
    for g in module.globals:
        validate_const_expr(ctx, g.init, g.type.valtype)
    for seg in module.element_segments:
        if seg.mode == "active":
            if ctx.tables[seg.table_index].reftype != seg.reftype:
                raise ValidationError("type mismatch: element segment and table", seg.offset.start)
            validate_const_expr(ctx, seg.offset, I32)
        for item in seg.items:
            validate_const_expr(ctx, item, seg.reftype)
    for seg in module.data_segments:
        if seg.mode == "active":
            validate_const_expr(ctx, seg.offset, I32)
    names = set()
    for e in module.exports:
        if e.name in names:
            raise ValidationError(f"duplicate export name {e.name!r}")
        names.add(e.name)
    if module.start is not None:
        t = ctx.funcs[module.start]
        if t.params or t.results:
            raise ValidationError("start function must have type [] -> []")

    first = module.num_imported_functions
    indices = range(first, first + len(module.functions))

    def one(i):
        return validate_function(module, i, track_sidetable=track_sidetable, context=ctx)

    if workers and workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


__all__ = [
    "SidetableEntry", "Sidetable", "ControlEntry", "ValidatedFunction", "ModuleContext",
    "branch_target_arity", "validate_function", "validate_module", "validate_const_expr",
    "UNKNOWN", "EXTERNREF",
]
