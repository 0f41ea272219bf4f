"""Local and global probes."""

import hashlib

import pytest

from inplace_wasm import (
    I32, InstrumentationError, ProbeAction, ProbeHalt, instantiate,
)
from inplace_wasm.probes import probe_frame_view
from inplace_wasm.testkit import ModuleBuilder
from inplace_wasm.testkit.reference import reference_execute

import wasm_fixtures as fx


def fib_calls(n):
    return 1 if n < 2 else 1 + fib_calls(n - 1) + fib_calls(n - 2)


class TestLocalProbes:
    def test_loop_body_probe(self):
        b, f, marker = fx.counted_loop_builder()
        inst = instantiate(b.build())
        assert inst.invoke("count", 100) == [100]
        hits = []
        inst.interpreter.probes.insert_local(inst.functions[0], f.abs(marker),
                                             lambda v: hits.append(v.ip))
        assert inst.invoke("count", 100) == [100]
        assert len(hits) == 100

    def test_fib_entry_probe(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        hits = []
        inst.interpreter.probes.insert_local(inst.functions[0], f.abs(0), hits.append)
        assert inst.invoke("fib", 10) == [55]
        assert len(hits) == fib_calls(10) == 177

    def test_remove(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        hits = []
        func = inst.functions[0]
        inst.interpreter.probes.insert_local(func, f.abs(0), hits.append)
        inst.interpreter.probes.remove_local(func, f.abs(0))
        assert inst.invoke("fib", 10) == [55]
        assert hits == []

    def test_remove_one_of_two_callbacks(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        a, c = [], []
        func = inst.functions[0]
        reg = inst.interpreter.probes
        cb_a, cb_c = a.append, c.append
        reg.insert_local(func, f.abs(0), cb_a)
        reg.insert_local(func, f.abs(0), cb_c)
        reg.remove_local(func, f.abs(0), cb_a)
        inst.invoke("fib", 5)
        assert a == [] and len(c) == fib_calls(5)

    def test_callbacks_run_in_order(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        log = []
        reg = inst.interpreter.probes
        reg.insert_local(inst.functions[0], f.abs(0), lambda v: log.append("a"))
        reg.insert_local(inst.functions[0], f.abs(0), lambda v: log.append("b"))
        inst.invoke("fib", 1)
        assert log == ["a", "b"]

    def test_non_boundary_offset(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        with pytest.raises(InstrumentationError):
            # byte 1 is the immediate of the first local.get
            inst.interpreter.probes.insert_local(inst.functions[0], f.abs(1), print)

    def test_halt(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        inst.interpreter.probes.insert_local(inst.functions[0], f.abs(0),
                                             lambda v: ProbeAction.halt("stop"))
        with pytest.raises(ProbeHalt):
            inst.invoke("fib", 10)
        inst.interpreter.probes.remove_all()
        assert inst.invoke("fib", 10) == [55]
        assert inst.interpreter.frames == []

    def test_original_bytes_untouched(self):
        b, f = fx.fib_builder()
        m = b.build()
        before = hashlib.sha256(m.original_bytes).hexdigest()
        inst = instantiate(m)
        func = inst.functions[0]
        reg = inst.interpreter.probes
        reg.insert_local(func, f.abs(0), lambda v: None)
        assert func.code is not m.original_bytes
        inst.invoke("fib", 8)
        reg.remove_all()
        assert func.code is m.original_bytes
        assert hashlib.sha256(m.original_bytes).hexdigest() == before

    def test_insert_during_run_leaves_active_frames_alone(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        func = inst.functions[0]
        reg = inst.interpreter.probes
        later = []

        def arm(view):
            if not later and view.frame_depth == 5:
                reg.insert_local(func, f.abs(0), later.append)

        reg.insert_local(func, f.abs(0), arm)
        assert inst.invoke("fib", 10) == [55]
        assert later


class TestGlobalProbe:
    @pytest.mark.parametrize("module,name,args", [
        (fx.fib_module, "fib", (10,)),
        (fx.loop_sum_module, "sum", (50,)),
        (fx.multi_value_module, "pick", (1,)),
    ])
    def test_counts_match_reference(self, module, name, args):
        m = module()
        inst = instantiate(m)
        steps = []
        inst.interpreter.probes.set_global(lambda v: steps.append(v.ip))
        inst.invoke(name, *args)
        inst.interpreter.probes.clear_global()
        ref = reference_execute(m, m.export_index(name), list(args))
        assert len(steps) == ref.steps

    def test_trace_one_function(self):
        # sum is called from a wrapper; only sum's instructions are traced.
        b, lf = fx.loop_sum_builder()
        wrapper = b.function([I32], [I32], export="wrap")
        wrapper.i32_const(1).local_get(0).call(lf.index).i32_add()
        m = b.build()
        inst = instantiate(m)
        reg = inst.interpreter.probes
        trace = []
        target = inst.functions[lf.index]

        def tracer(view):
            trace.append((view.function_index, view.ip))
            if view.ip == target.eip and view.function is target:
                reg.clear_global()

        reg.insert_local(target, lf.abs(0), lambda v: reg.set_global(tracer))
        assert inst.invoke("wrap", 10) == [56]
        ref = reference_execute(m, lf.index, [10])
        assert {fi for fi, _ in trace} == {lf.index}
        # The entry instruction is already dispatching when the probe arms
        # the global callback, so tracing starts with the one after it.
        assert trace[0][1] != lf.abs(0)
        assert len(trace) == ref.steps - 1

    def test_clear_without_set(self):
        inst = instantiate(fx.fib_module())
        inst.interpreter.probes.clear_global()
        assert inst.interpreter.dispatch_mode == "main"

    def test_mode_switch(self):
        inst = instantiate(fx.fib_module())
        reg = inst.interpreter.probes
        reg.set_global(lambda v: None)
        assert inst.interpreter.dispatch_mode == "probe"
        reg.clear_global()
        assert inst.interpreter.dispatch_mode == "main"


class TestFrameView:
    def test_operands_and_locals(self):
        b = ModuleBuilder()
        f = b.function([I32, I32], [I32], export="add")
        f.i32_const(3).i32_const(4).i32_add()
        add_rel = f.last
        f.local_get(0).i32_add().local_get(1).i32_add()
        inst = instantiate(b.build())
        seen = {}

        def look(view):
            seen["peek"] = view.peek(2)
            seen["locals"] = view.locals
            seen["ip"] = view.ip
            seen["current"] = probe_frame_view(view.interpreter) is view

        inst.interpreter.probes.insert_local(inst.functions[0], f.abs(add_rel), look)
        assert inst.invoke("add", 7, 8) == [22]
        assert seen == {"peek": [3, 4], "locals": [7, 8], "ip": f.abs(add_rel),
                        "current": True}

    def test_outside_callback(self):
        inst = instantiate(fx.fib_module())
        with pytest.raises(InstrumentationError):
            probe_frame_view(inst.interpreter)

    def test_stale_view(self):
        b, f = fx.fib_builder()
        inst = instantiate(b.build())
        kept = []
        inst.interpreter.probes.insert_local(inst.functions[0], f.abs(0), kept.append)
        inst.invoke("fib", 1)
        with pytest.raises(InstrumentationError):
            kept[0].locals
