"""Hand-built modules shared across the test files."""

from __future__ import annotations

from inplace_wasm import F32, F64, I32, I64
from inplace_wasm.testkit import ModuleBuilder


def fib_builder():
    b = ModuleBuilder()
    f = b.function([I32], [I32], export="fib")
    f.local_get(0).i32_const(2).i32_lt_s()
    f.if_(I32)
    f.local_get(0)
    f.else_()
    f.local_get(0).i32_const(1).i32_sub().call(0)
    f.local_get(0).i32_const(2).i32_sub().call(0)
    f.i32_add()
    f.end()
    return b, f


def fib_module():
    return fib_builder()[0].build()


def loop_sum_builder():
    """sum(n) = n + (n-1) + ... + 1 with a block/loop pair."""
    b = ModuleBuilder()
    f = b.function([I32], [I32], locals=[I32], export="sum")
    f.block()
    f.loop()
    f.local_get(0).i32_eqz().br_if(1)
    f.local_get(1).local_get(0).i32_add().local_set(1)
    f.local_get(0).i32_const(1).i32_sub().local_set(0)
    f.br(0)
    f.end()
    f.end()
    f.local_get(1)
    return b, f


def loop_sum_module():
    return loop_sum_builder()[0].build()


def trap_module():
    """One export per trap kind the engine can raise from bytecode."""
    b = ModuleBuilder()
    b.memory(1, 1)
    b.table(4)
    sig = b.type([], [I32])

    f = b.function([I32, I32], [I32], export="div_s")
    f.local_get(0).local_get(1).i32_div_s()
    f = b.function([I32, I32], [I32], export="rem_u")
    f.local_get(0).local_get(1).i32_rem_u()
    f = b.function([F32], [I32], export="trunc_f32_s")
    f.local_get(0).i32_trunc_f32_s()
    f = b.function([F64], [I64], export="trunc_f64_u")
    f.local_get(0).i64_trunc_f64_u()
    f = b.function([I32], [I32], export="load")
    f.local_get(0).i32_load()
    f = b.function([I32, I32], [], export="store")
    f.local_get(0).local_get(1).i32_store()
    f = b.function([I32], [I32], export="call_indirect")
    f.local_get(0).call_indirect(sig)
    f = b.function([], [], export="unreachable")
    f.unreachable()
    rec = b.function([], [], export="recurse")
    rec.call(rec.index)
    seven = b.function([], [I32], export="seven")
    seven.i32_const(7)
    wrong = b.function([I32], [I32], export="wrong_sig")
    wrong.local_get(0)
    b.elem(0, [seven.index, wrong.index])
    return b.build()


def multi_value_module():
    """Block parameters, multi-value results and a branch that must pop.

    pick(x) returns (10, 20) when x is non-zero, else (1, 2).
    """
    b = ModuleBuilder()
    f = b.function([I32, I32], [I32, I32], export="swap")
    f.local_get(1).local_get(0)
    g = b.function([I32], [I32, I64], locals=[I32, I64], export="pick")
    g.i32_const(99)                        # stays below the block
    g.i32_const(1).i64_const(2)
    g.block(([I32, I64], [I32, I64]))
    g.local_get(0)
    g.if_()
    g.i32_const(10).i64_const(20).br(1)    # discards the two block params
    g.end()
    g.end()
    g.local_set(2).local_set(1).drop()
    g.local_get(1).local_get(2)
    return b.build()


def counted_loop_builder():
    """A loop running ``n`` times with one probe-friendly body instruction."""
    b = ModuleBuilder()
    f = b.function([I32], [I32], locals=[I32], export="count")
    f.loop()
    f.local_get(1).i32_const(1).i32_add().local_set(1)
    body_marker = f.last                   # offset of local.set in the body
    f.local_get(0).i32_const(1).i32_sub().local_tee(0)
    f.br_if(0)
    f.end()
    f.local_get(1)
    return b, f, body_marker


def straight_line_module(bodies: int = 1, length: int = 20):
    b = ModuleBuilder()
    for i in range(bodies):
        f = b.function([I32], [I32], export=f"f{i}")
        f.local_get(0)
        for k in range(length):
            f.i32_const(k + 1).i32_add()
    return b.build()


def branchy_module(n_branches: int):
    """One function with ``n_branches`` nested forward br_if branches.

    Each branch is taken at most once per call; the loop around them lets
    callers control the dynamic branch count.
    """
    b = ModuleBuilder()
    f = b.function([I32], [I32], locals=[I32], export="run")
    for _ in range(n_branches):
        f.block()
    for _ in range(n_branches):
        f.local_get(0).br_if(0)
        f.end()
    f.local_get(0)
    return b.build()


def compiled_style_module(functions: int = 20, seed: int = 0):
    """Bodies shaped like compiler output: long straight runs of locals and
    arithmetic with a branch roughly every dozen instructions."""
    import random

    r = random.Random(seed)
    b = ModuleBuilder()
    b.memory(1)
    for i in range(functions):
        f = b.function([I32, I32], [I32], locals=[I32, I32, I64], export=f"f{i}")
        for _ in range(r.randint(4, 10)):
            # straight-line segment of ~12 instructions
            f.local_get(0).local_get(1).i32_add().local_set(2)
            f.local_get(2).i32_const(r.randint(1, 1 << 20)).i32_mul().local_set(3)
            f.local_get(3).i32_const(0xFFF).i32_and().i32_load(r.choice([0, 4, 8]))
            f.local_get(2).i32_xor().local_set(2)
            kind = r.random()
            if kind < 0.4:
                f.block()
                f.local_get(2).i32_eqz().br_if(0)
                f.local_get(2).i32_const(1).i32_shr_u().local_set(2)
                f.local_get(3).i64_extend_i32_u().local_set(4)
                f.end()
            elif kind < 0.7:
                f.local_get(2).i32_const(3).i32_and()
                f.if_()
                f.local_get(1).i32_const(1).i32_add().local_set(1)
                f.local_get(0).i32_const(7).i32_rotl().local_set(0)
                f.else_()
                f.local_get(1).i32_const(1).i32_sub().local_set(1)
                f.end()
            else:
                f.local_get(0).i32_const(16).i32_lt_u()
                f.if_()
                f.local_get(0).i32_const(1).i32_add().local_set(0)
                f.local_get(2).local_get(3).i32_or().local_set(3)
                f.end()
        f.local_get(2).local_get(3).i32_add()
    return b.build()


def differential(module, seed: int = 0, step_limit: int = 200_000):
    """Run every exported function on the main interpreter and the reference.

    Each side gets a fresh instance per export.  Returns
    ``(compared, inconclusive, divergences)``.
    """
    from inplace_wasm import Trap, instantiate
    from inplace_wasm.runtime import FunctionInstance
    from inplace_wasm.testkit.generator import sample_args
    from inplace_wasm.testkit.reference import reference_execute, values_equal

    compared = inconclusive = 0
    divergences = []
    for e in module.exports:
        if e.kind != "func":
            continue
        ftype = module.func_type(e.index)
        args = sample_args(seed, ftype)
        ref = reference_execute(module, e.index, args, step_limit)
        if ref.kind == "step-limit":
            inconclusive += 1
            continue
        inst = instantiate(module)
        if not isinstance(inst.functions[e.index], FunctionInstance):
            continue
        try:
            got = ("results", inst.invoke(e.name, *args))
        except Trap as t:
            got = ("trap", t.kind)
        compared += 1
        if ref.kind == "trap":
            ok = got == ("trap", ref.trap)
        else:
            ok = got[0] == "results" and len(got[1]) == len(ref.values) and all(
                values_equal(a, b) for a, b in zip(got[1], ref.values))
        if not ok:
            divergences.append((e.name, args, got, (ref.kind, ref.values or ref.trap)))
    return compared, inconclusive, divergences


def branch_chain_module(n_branches: int, repeats: int):
    """``run(c)`` executes ``repeats`` passes over a chain of ``n_branches``
    nested blocks, each left by a ``br_if`` on ``c``; with ``c`` non-zero every
    branch is taken."""
    b = ModuleBuilder()
    f = b.function([I32], [I32], locals=[I32], export="run")
    f.i32_const(repeats).local_set(1)
    f.loop()
    for _ in range(n_branches):
        f.block()
    for _ in range(n_branches):
        f.local_get(0).br_if(0)
        f.end()
    f.local_get(1).i32_const(1).i32_sub().local_tee(1)
    f.br_if(0)
    f.end()
    f.local_get(1)
    return b.build()


def call_shaped_module(seed: int):
    """A caller that leaves junk on the stack, passes random arguments to a
    callee with random results, and then reads the results back.

    Returns ``(module, caller_builder, callee_builder, after_call_rel, junk,
    args)``.
    """
    import random

    from inplace_wasm.testkit.generator import sample_args

    r = random.Random(seed)
    kinds = [I32, I64, F32, F64]
    params = [r.choice(kinds) for _ in range(r.randint(0, 4))]
    results = [r.choice(kinds) for _ in range(r.randint(0, 3))]
    b = ModuleBuilder()
    callee = b.function(params, results, locals=[r.choice(kinds) for _ in range(r.randint(0, 3))])
    # results are simple functions of the parameters
    for k, t in enumerate(results):
        same = [i for i, p in enumerate(params) if p == t]
        if same:
            callee.local_get(r.choice(same))
        else:
            callee.emit_op({I32: "i32.const", I64: "i64.const",
                            F32: "f32.const", F64: "f64.const"}[t], k + 1)
    caller_locals = [I32] * r.randint(0, 5)
    caller = b.function([], [], locals=caller_locals, export="go")
    junk = r.randint(0, 4)
    for k in range(junk):
        caller.i32_const(100 + k)
    args = sample_args(seed, callee.type)
    for t, v in zip(params, args):
        caller.emit_op({I32: "i32.const", I64: "i64.const",
                        F32: "f32.const", F64: "f64.const"}[t], v)
    caller.call(callee.index)
    caller.nop()
    after = caller.last
    for _ in range(junk + len(results)):
        caller.drop()
    return b.build(), caller, callee, after, junk, args
