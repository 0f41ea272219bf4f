"""Random structured programs for property and differential tests.

Programs mix nested blocks, loops and ifs (with multi-value block types),
branches of every kind at random depths, values left under a branch's
operands (so branches have to pop), dead code after unconditional
transfers, acyclic direct and indirect calls, memory traffic and a few
operations that can trap.

Every backward branch first decrements a shared fuel global and is only
taken while fuel remains, so each run takes a bounded number of back edges.
Calls only go to lower-numbered functions, so there is no recursion.
"""

from __future__ import annotations

import random

from ..binary import F32, F64, I32, I64, FuncType, Module
from .builder import FunctionBuilder, ModuleBuilder

FUEL = 0     # global index of the loop fuel counter
ACC = 1      # global index of a scratch i64 accumulator
INITIAL_FUEL = 40
MEMORY_BYTES = 65536
TABLE_EXTRA = 2     # trailing null slots in the function table

_INT = (I32, I64)
_ALL = (I32, I64, F32, F64)
_PREFIX = {I32: "i32", I64: "i64", F32: "f32", F64: "f64"}


class _Label:
    __slots__ = ("types", "loop")

    def __init__(self, types: tuple, loop: bool):
        self.types = types
        self.loop = loop


class _FunctionGen:
    def __init__(self, g: "_ModuleGen", fb: FunctionBuilder, index: int, budget: int):
        self.g = g
        self.rng = g.rng
        self.f = fb
        self.index = index
        self.left = budget
        self.labels = [_Label(fb.type.results, False)]
        self.locals: dict[int, list[int]] = {t: [] for t in _ALL}
        for i, t in enumerate(list(fb.type.params) + fb.locals):
            self.locals[t].append(i)
        self.nesting = 0

    # -- emission helpers ----------------------------------------------------

    def op(self, name: str, *args):
        self.left -= 1
        self.f.emit_op(name, *args)

    def chance(self, p: float) -> bool:
        return self.rng.random() < p

    def pick_type(self, types=_ALL, weights=(5, 4, 1, 2)) -> int:
        return self.rng.choices(types, weights[:len(types)])[0]

    def blocktype(self, params: tuple, results: tuple):
        if not params and len(results) <= 1:
            return results[0] if results else None
        return (params, results)

    def random_types(self, lo: int, hi: int) -> tuple:
        return tuple(self.pick_type() for _ in range(self.rng.randint(lo, hi)))

    # -- expressions --------------------------------------------------------------

    def const(self, t: int):
        r = self.rng
        if t == I32:
            self.op("i32.const", r.choice([0, 1, 2, 7, -1, 255, 0x7FFFFFFF, -0x80000000,
                                           r.randint(-1000, 1000), r.getrandbits(32)]))
        elif t == I64:
            self.op("i64.const", r.choice([0, 1, 3, -1, 1 << 40, -(1 << 63),
                                           r.randint(-10**6, 10**6), r.getrandbits(64)]))
        elif t == F32:
            self.op("f32.const", r.choice([0.0, -0.0, 1.5, -2.25, 1e30, 3.0e-39,
                                           float("inf"), r.uniform(-1e4, 1e4)]))
        else:
            self.op("f64.const", r.choice([0.0, -0.0, 0.5, -7.0, 1e300, 5e-324,
                                           float("-inf"), r.uniform(-1e9, 1e9)]))

    def leaf(self, t: int):
        if self.locals[t] and self.chance(0.6):
            self.op("local.get", self.rng.choice(self.locals[t]))
        elif t == I64 and self.chance(0.1):
            self.op("global.get", ACC)
        else:
            self.const(t)

    def expr(self, t: int, depth: int = 0):
        if depth >= 4 or self.left <= 0 or self.chance(0.25 + 0.12 * depth):
            return self.leaf(t)
        if t in _INT:
            return self.int_expr(t, depth)
        return self.float_expr(t, depth)

    def int_expr(self, t: int, depth: int):
        p = _PREFIX[t]
        r = self.rng
        kind = r.choices(
            ["bin", "div", "un", "cmp", "conv", "call", "indirect", "block", "loop", "if",
             "select", "load", "tee", "trunc", "misc"],
            [10, 2, 3, 3, 2, 2, 1, 2, 1, 2, 1, 2, 1, 1, 1])[0]
        if kind == "bin":
            self.expr(t, depth + 1)
            self.expr(t, depth + 1)
            self.op(f"{p}." + r.choice(["add", "sub", "mul", "and", "or", "xor", "shl",
                                        "shr_s", "shr_u", "rotl", "rotr"]))
        elif kind == "div":
            self.expr(t, depth + 1)
            self.expr(t, depth + 1)
            if not self.chance(0.15):      # usually keep the divisor odd
                self.op(f"{p}.const", 1)
                self.op(f"{p}.or")
            self.op(f"{p}." + r.choice(["div_s", "div_u", "rem_s", "rem_u"]))
        elif kind == "un":
            self.expr(t, depth + 1)
            names = ["clz", "ctz", "popcnt", "extend8_s", "extend16_s"]
            if t == I64:
                names.append("extend32_s")
            self.op(f"{p}." + r.choice(names))
        elif kind == "cmp":
            if t == I64:
                self.expr(I32, depth + 1)
                self.op("i64.extend_i32_" + r.choice("su"))
                return
            src = self.pick_type()
            self.expr(src, depth + 1)
            if src in _INT and self.chance(0.3):
                self.op(f"{_PREFIX[src]}.eqz")
                return
            self.expr(src, depth + 1)
            names = (["eq", "ne", "lt_s", "lt_u", "gt_s", "gt_u", "le_s", "le_u", "ge_s", "ge_u"]
                     if src in _INT else ["eq", "ne", "lt", "gt", "le", "ge"])
            self.op(f"{_PREFIX[src]}." + r.choice(names))
        elif kind == "conv":
            if t == I32:
                self.expr(I64, depth + 1)
                self.op("i32.wrap_i64")
            else:
                self.expr(I32, depth + 1)
                self.op("i64.extend_i32_" + r.choice("su"))
        elif kind == "trunc":
            src = r.choice([F32, F64])
            self.expr(src, depth + 1)
            sat = "sat_" if self.chance(0.8) else ""
            self.op(f"{_PREFIX[t]}.trunc_{sat}{_PREFIX[src]}_" + r.choice("su"))
        elif kind == "call":
            self.call((t,), depth)
        elif kind == "indirect":
            self.call_indirect((t,), depth)
        elif kind == "block":
            self.block((t,), depth)
        elif kind == "loop":
            self.loop((t,), depth)
        elif kind == "if":
            self.if_((t,), depth)
        elif kind == "select":
            self.expr(t, depth + 1)
            self.expr(t, depth + 1)
            self.expr(I32, depth + 1)
            if self.chance(0.5):
                self.op("select")
            else:
                self.op("select_t", [t])
        elif kind == "load":
            self.address(depth)
            names = {I32: ["i32.load", "i32.load8_s", "i32.load8_u", "i32.load16_s",
                           "i32.load16_u"],
                     I64: ["i64.load", "i64.load8_s", "i64.load16_u", "i64.load32_s",
                           "i64.load32_u"]}[t]
            self.op(r.choice(names), r.choice([0, 0, 4, 100]))
        elif kind == "tee" and self.locals[t]:
            self.expr(t, depth + 1)
            self.op("local.tee", r.choice(self.locals[t]))
        elif t == I32 and self.chance(0.5):
            self.op("memory.size")
        elif t == I32:
            self.op("global.get", FUEL)
        else:
            self.leaf(t)

    def float_expr(self, t: int, depth: int):
        p = _PREFIX[t]
        r = self.rng
        kind = r.choices(["bin", "un", "conv", "block", "if", "load", "call"],
                         [6, 3, 3, 1, 1, 1, 1])[0]
        if kind == "bin":
            self.expr(t, depth + 1)
            self.expr(t, depth + 1)
            self.op(f"{p}." + r.choice(["add", "sub", "mul", "div", "min", "max", "copysign"]))
        elif kind == "un":
            self.expr(t, depth + 1)
            self.op(f"{p}." + r.choice(["abs", "neg", "ceil", "floor", "trunc", "nearest", "sqrt"]))
        elif kind == "conv":
            if self.chance(0.3):
                other = F64 if t == F32 else F32
                self.expr(other, depth + 1)
                self.op("f32.demote_f64" if t == F32 else "f64.promote_f32")
            else:
                src = r.choice(_INT)
                self.expr(src, depth + 1)
                self.op(f"{p}.convert_{_PREFIX[src]}_" + r.choice("su"))
        elif kind == "block":
            self.block((t,), depth)
        elif kind == "if":
            self.if_((t,), depth)
        elif kind == "load":
            self.address(depth)
            self.op(f"{p}.load", r.choice([0, 8]))
        else:
            self.call((t,), depth)

    def address(self, depth: int):
        self.expr(I32, depth + 1)
        if not self.chance(0.05):     # occasionally leave it unmasked
            self.op("i32.const", 0xFFF0)
            self.op("i32.and")

    # -- calls ------------------------------------------------------------------

    def callees(self, results: tuple | None) -> list[int]:
        return [j for j in range(self.index)
                if results is None or self.g.types[j].results == results]

    def args(self, ftype: FuncType, depth: int):
        for t in ftype.params:
            self.expr(t, depth + 1)

    def call(self, results: tuple, depth: int):
        cands = self.callees(results)
        if not cands:
            for t in results:
                self.leaf(t)
            return
        j = self.rng.choice(cands)
        self.args(self.g.types[j], depth)
        self.op("call", j)

    def call_indirect(self, results: tuple, depth: int):
        cands = self.callees(results)
        if not cands:
            for t in results:
                self.leaf(t)
            return
        j = self.rng.choice(cands)
        ftype = self.g.types[j]
        self.args(ftype, depth)
        roll = self.rng.random()
        if roll < 0.7:
            self.op("i32.const", j)
        elif roll < 0.95:
            # any lower-numbered slot: may trap on a signature mismatch
            self.expr(I32, depth + 1)
            self.op("i32.const", self.index)
            self.op("i32.rem_u")
        else:
            self.op("i32.const", self.g.nfuncs + self.rng.randrange(TABLE_EXTRA + 1))
        self.op("call_indirect", ftype)

    # -- structured control ----------------------------------------------------

    def consume(self, params: tuple):
        """Take a construct's parameters off the stack (top first)."""
        for t in reversed(params):
            if self.locals[t] and self.chance(0.5):
                self.op("local.set", self.rng.choice(self.locals[t]))
            else:
                self.op("drop")

    def produce(self, types: tuple, depth: int):
        for t in types:
            self.expr(t, depth + 1)

    def enter(self, params: tuple, depth: int):
        self.produce(params, depth)

    def body(self, params: tuple, results: tuple, label: _Label, depth: int,
             back_edge: bool = False):
        self.labels.append(label)
        self.nesting += 1
        self.consume(params)
        terminated = self.statements(depth)
        if back_edge and not terminated:
            # the usual loop shape: operands, fuel test, conditional back edge
            self.produce(label.types, depth)
            self.fuel_check()
            self.op("br_if", 0)
            for _ in label.types:
                self.op("drop")
        if not terminated or self.chance(0.5):
            self.produce(results, depth)
        self.nesting -= 1
        self.labels.pop()

    def block(self, results: tuple, depth: int):
        params = self.random_types(0, 2) if self.chance(0.3) else ()
        self.enter(params, depth)
        self.op("block", self.blocktype(params, results))
        self.body(params, results, _Label(results, False), depth)
        self.op("end")

    def loop(self, results: tuple, depth: int):
        params = self.random_types(0, 2) if self.chance(0.3) else ()
        self.enter(params, depth)
        self.op("loop", self.blocktype(params, results))
        self.body(params, results, _Label(params, True), depth, back_edge=self.chance(0.8))
        self.op("end")

    def if_(self, results: tuple, depth: int):
        params = self.random_types(0, 1) if self.chance(0.25) else ()
        self.enter(params, depth)
        self.expr(I32, depth + 1)
        self.op("if", self.blocktype(params, results))
        self.body(params, results, _Label(results, False), depth)
        if params != results or self.chance(0.6):
            self.op("else")
            self.body(params, results, _Label(results, False), depth)
        self.op("end")

    # -- statements ---------------------------------------------------------------

    def function_body(self):
        while self.left > 0:
            if self.statements(0):
                return
        self.produce(self.labels[0].types, 0)

    def statements(self, depth: int) -> bool:
        """Emit a stack-neutral statement list; True if it ends in a transfer."""
        count = self.rng.randint(1, 5 if self.nesting < 6 else 2)
        for _ in range(count):
            if self.left <= 0:
                return False
            if self.statement(depth):
                # dead code after an unconditional transfer
                for _ in range(self.rng.choice([0, 0, 1, 2])):
                    self.simple_statement(depth)
                return True
        return False

    def simple_statement(self, depth: int):
        r = self.rng
        kind = r.choice(["set", "drop", "store", "acc"])
        t = self.pick_type()
        if kind == "set" and self.locals[t]:
            self.expr(t, depth)
            self.op("local.set", r.choice(self.locals[t]))
        elif kind == "store":
            self.address(depth)
            t = self.pick_type()
            self.expr(t, depth)
            name = {I32: ["i32.store", "i32.store8", "i32.store16"],
                    I64: ["i64.store", "i64.store8", "i64.store32"],
                    F32: ["f32.store"], F64: ["f64.store"]}[t]
            self.op(r.choice(name), r.choice([0, 2, 16]))
        elif kind == "acc":
            self.op("global.get", ACC)
            self.expr(I64, depth)
            self.op("i64.add")
            self.op("global.set", ACC)
        else:
            self.expr(t, depth)
            self.op("drop")

    def statement(self, depth: int) -> bool:
        r = self.rng
        nested = self.nesting < 8 and self.left > 10
        weights = {
            "simple": 6, "block": 3 if nested else 0, "loop": 2 if nested else 0,
            "if": 3 if nested else 0, "br_if": 4, "br": 2, "br_table": 2, "return": 1,
            "call": 1, "bulk": 1, "nop": 1,
        }
        kind = r.choices(list(weights), list(weights.values()))[0]
        if kind == "simple":
            self.simple_statement(depth)
        elif kind in ("block", "loop", "if"):
            results = self.random_types(0, 2) if self.chance(0.4) else ()
            getattr(self, kind if kind != "if" else "if_")(results, depth)
            for _ in results:
                self.op("drop")
        elif kind == "br_if":
            self.br_if(depth)
        elif kind == "br":
            return self.br(depth)
        elif kind == "br_table":
            return self.br_table(depth)
        elif kind == "return":
            self.junk()
            self.produce(self.labels[0].types, depth)
            self.op("return")
            return True
        elif kind == "call":
            cands = self.callees(None)
            if cands:
                j = r.choice(cands)
                self.args(self.g.types[j], depth)
                self.op("call", j)
                for _ in self.g.types[j].results:
                    self.op("drop")
        elif kind == "bulk":
            self.address(depth)
            self.expr(I32, depth)
            self.op("i32.const", r.randrange(0, 24))
            self.op(r.choice(["memory.fill", "memory.copy"]))
        else:
            self.op("nop")
        return False

    def junk(self) -> int:
        """Values left under a branch's operands, forcing a non-zero pop count."""
        n = self.rng.choice([0, 0, 1, 2])
        for _ in range(n):
            self.leaf(self.pick_type())
        return n

    def fuel_check(self):
        """Decrement fuel; leaves ``fuel > 0`` on the stack."""
        self.op("global.get", FUEL)
        self.op("i32.const", 1)
        self.op("i32.sub")
        self.op("global.set", FUEL)
        self.op("global.get", FUEL)
        self.op("i32.const", 0)
        self.op("i32.gt_s")

    def br_if(self, depth: int):
        d = self.rng.randrange(len(self.labels))
        label = self.labels[-1 - d]
        junk = self.junk()
        self.produce(label.types, depth)
        if label.loop:
            self.fuel_check()
            if self.chance(0.3):
                self.expr(I32, depth + 1)
                self.op("i32.or")
                self.op("i32.const", 0)
                self.op("i32.ne")
                self.fuel_check()
                self.op("i32.and")
        else:
            self.expr(I32, depth + 1)
        self.op("br_if", d)
        # not taken: the label operands and the junk remain
        for _ in range(len(label.types) + junk):
            self.op("drop")

    def br(self, depth: int) -> bool:
        d = self.rng.randrange(len(self.labels))
        label = self.labels[-1 - d]
        if label.loop:
            # guarded back edge: if (fuel > 0) { operands; br d+1 }
            self.fuel_check()
            self.op("if", None)
            self.labels.append(_Label((), False))
            self.produce(label.types, depth)
            self.op("br", d + 1)
            self.labels.pop()
            self.op("end")
            return False
        self.junk()
        self.produce(label.types, depth)
        self.op("br", d)
        return True

    def br_table(self, depth: int) -> bool:
        d = self.rng.randrange(len(self.labels))
        want = self.labels[-1 - d].types
        same = [k for k, lab in enumerate(reversed(self.labels))
                if lab.types == want and not lab.loop]
        if not same:
            return self.br(depth)
        self.junk()
        self.produce(want, depth)
        self.expr(I32, depth + 1)
        if self.chance(0.7):
            self.op("i32.const", 7)
            self.op("i32.and")
        targets = [self.rng.choice(same) for _ in range(self.rng.randint(0, 6))]
        self.op("br_table", targets, self.rng.choice(same))
        return True


class _ModuleGen:
    def __init__(self, seed: int, budget: int):
        self.rng = random.Random(seed)
        self.budget = max(10, budget)

    def build(self) -> ModuleBuilder:
        r = self.rng
        b = ModuleBuilder()
        self.nfuncs = r.randint(1, 4)
        self.types = []
        for _ in range(self.nfuncs):
            params = tuple(r.choice(_INT) for _ in range(r.randint(0, 3)))
            results = tuple(r.choices(_ALL, (5, 4, 1, 2))[0] for _ in range(r.choice([0, 1, 1, 1, 2])))
            self.types.append(FuncType(params, results))
        b.global_(I32, INITIAL_FUEL, mutable=True)
        b.global_(I64, r.getrandbits(16), mutable=True)
        b.memory(1, 2)
        b.data(r.randrange(0, 1024), bytes(r.getrandbits(8) for _ in range(r.randint(0, 64))))
        b.table(self.nfuncs + TABLE_EXTRA)
        b.elem(0, list(range(self.nfuncs)))
        per_function = self.budget // self.nfuncs + 1
        for i, ftype in enumerate(self.types):
            extra = [r.choice(_ALL) for _ in range(r.randint(0, 4))] + [I32, I64]
            fb = b.function(ftype.params, ftype.results, extra, export=f"f{i}")
            _FunctionGen(self, fb, i, per_function).function_body()
        return b


def generate_random_structured(seed: int, budget: int = 200) -> Module:
    """A valid module of roughly ``budget`` instructions; deterministic per seed.

    Every function is exported as ``f<i>``; the last one is the natural entry
    point since it may call all the others.
    """
    return _ModuleGen(seed, budget).build().build()


def generate_random_bytes(seed: int, budget: int = 200) -> bytes:
    return _ModuleGen(seed, budget).build().emit()


def sample_args(seed: int, ftype: FuncType) -> list:
    """Deterministic argument values for ``ftype``."""
    r = random.Random(seed * 7919 + len(ftype.params))
    out = []
    for t in ftype.params:
        if t == I32:
            out.append(r.choice([0, 1, 5, -3, r.randint(-2**31, 2**31 - 1)]))
        elif t == I64:
            out.append(r.choice([0, 2, -9, r.randint(-2**63, 2**63 - 1)]))
        else:
            out.append(r.uniform(-100, 100))
    return out
