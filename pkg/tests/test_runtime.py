"""Instantiation, linking, memory and tables."""

import pytest

from inplace_wasm import (
    FuncType, Global, HostFunction, I32, I64, InstantiationError, Memory, Table, Trap,
    instantiate,
)
from inplace_wasm.binary import FUNCREF, GlobalType
from inplace_wasm.runtime import PAGE_SIZE, memory_access_check
from inplace_wasm.testkit import ModuleBuilder


def doubler():
    return HostFunction(FuncType((I32,), (I32,)), lambda x: 2 * x)


class TestInstantiate:
    def test_data_segment(self):
        b = ModuleBuilder()
        b.memory(1)
        b.data(0, b"hi")
        inst = instantiate(b.build())
        assert bytes(inst.memories[0].data[0:2]) == bytes([0x68, 0x69])

    def test_host_import(self):
        b = ModuleBuilder()
        h = b.import_function("env", "double", [I32], [I32])
        b.function([I32], [I32], export="run").local_get(0).call(h)
        inst = instantiate(b.build(), {("env", "double"): doubler()})
        assert inst.invoke("run", 21) == [42]

    def test_data_segment_past_end(self):
        b = ModuleBuilder()
        b.memory(1)
        b.data(PAGE_SIZE, b"x")
        with pytest.raises(InstantiationError):
            instantiate(b.build())

    def test_missing_import(self):
        b = ModuleBuilder()
        b.import_function("env", "double", [I32], [I32])
        with pytest.raises(InstantiationError):
            instantiate(b.build(), {})

    def test_mismatched_import(self):
        b = ModuleBuilder()
        b.import_function("env", "double", [I64], [I64])
        with pytest.raises(InstantiationError):
            instantiate(b.build(), {"env": {"double": doubler()}})

    def test_segments_apply_all_or_nothing(self):
        b = ModuleBuilder()
        b.import_memory("env", "mem", 1)
        b.data(0, b"first")
        b.data(PAGE_SIZE - 2, b"overflow")
        mem = Memory(1)
        with pytest.raises(InstantiationError):
            instantiate(b.build(), {"env": {"mem": mem}})
        assert bytes(mem.data[:5]) == bytes(5)

    def test_start_trap(self):
        b = ModuleBuilder()
        f = b.function()
        f.unreachable()
        b.start(f.index)
        with pytest.raises(InstantiationError):
            instantiate(b.build())

    def test_start_runs(self):
        b = ModuleBuilder()
        g = b.global_(I32, 0, mutable=True, export="g")
        f = b.function()
        f.i32_const(9).global_set(g)
        b.start(f.index)
        assert instantiate(b.build()).exports["g"].value == 9

    def test_imported_global_initialises_local_global(self):
        b = ModuleBuilder()
        imp = b.import_global("env", "base", I32)
        g = b.global_(I32, ("global.get", imp))
        b.function([], [I32], export="get").global_get(g)
        inst = instantiate(b.build(), {"env": {"base": Global(GlobalType(I32, False), 40)}})
        assert inst.invoke("get") == [40]

    def test_element_segment_fills_table(self):
        b = ModuleBuilder()
        b.table(2)
        f = b.function([], [I32])
        f.i32_const(5)
        b.elem(1, [f.index])
        inst = instantiate(b.build())
        assert inst.tables[0].elements[0] is None
        assert inst.tables[0].elements[1] is inst.functions[f.index]


class TestMemory:
    def test_check_in_bounds(self):
        assert memory_access_check(Memory(1), 0, 0, 4) == 0

    def test_check_straddles_end(self):
        with pytest.raises(Trap) as info:
            memory_access_check(Memory(1), 65533, 0, 4)
        assert info.value.kind == "memory-out-of-bounds"

    def test_check_no_wraparound(self):
        with pytest.raises(Trap):
            memory_access_check(Memory(1), 0xFFFFFFFF, 0xFFFFFFFF, 8)
        # A 32-bit sum would wrap this access to address 1.
        assert (0xFFFFFFFF + 2) & 0xFFFFFFFF == 1
        with pytest.raises(Trap):
            memory_access_check(Memory(1), 0xFFFFFFFF, 2, 4)

    def test_grow(self):
        mem = Memory(1, 3)
        assert mem.grow(1) == 1
        assert mem.current_pages == 2
        assert mem.grow(2) == -1
        assert mem.current_pages == 2

    def test_grow_from_wasm(self):
        b = ModuleBuilder()
        b.memory(1, 2)
        f = b.function([I32], [I32], export="grow")
        f.local_get(0).memory_grow(0)
        g = b.function([], [I32], export="size")
        g.memory_size(0)
        inst = instantiate(b.build())
        assert inst.invoke("grow", 1) == [1]
        assert inst.invoke("size") == [2]
        assert inst.invoke("grow", 1) == [-1]


class TestTable:
    def test_get_out_of_bounds(self):
        with pytest.raises(Trap) as info:
            Table(FUNCREF, 1).get(1)
        assert info.value.kind == "table-out-of-bounds"

    def test_grow(self):
        t = Table(FUNCREF, 1, 2)
        assert t.grow(1) == 1
        assert t.grow(1) == -1
