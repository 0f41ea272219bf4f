"""Validation and sidetable construction."""

from collections import Counter

import pytest

from inplace_wasm import I32, I64, ValidationError, validate_function, validate_module
from inplace_wasm.testkit import ModuleBuilder
from inplace_wasm.testkit.oracle import check_sidetable, scan_branch_target
from inplace_wasm.validator import ControlEntry, branch_target_arity

import wasm_fixtures as fx


def single(params=(), results=(), locals_=()):
    b = ModuleBuilder()
    return b, b.function(params, results, locals=locals_)


def validated(b, index=0):
    m = b.build()
    return m, validate_function(m, index)


class TestTyping:
    def test_type_mismatch(self):
        b, f = single(results=[I32])
        f.i64_const(1)
        with pytest.raises(ValidationError, match="type mismatch"):
            validate_module(b.build())

    def test_underflow(self):
        b, f = single()
        f.i32_add()
        with pytest.raises(ValidationError):
            validate_module(b.build())

    def test_unbound_label(self):
        b, f = single()
        f.block().br(2).end()
        with pytest.raises(ValidationError):
            validate_module(b.build())

    def test_error_carries_offset(self):
        b, f = single(results=[I32])
        f.i64_const(1)
        with pytest.raises(ValidationError) as info:
            validate_module(b.build())
        assert info.value.offset is not None and info.value.func_index == 0

    def test_if_without_else_must_not_produce_values(self):
        b, f = single(params=[I32], results=[I32])
        f.local_get(0).if_(I32).i32_const(1).end()
        with pytest.raises(ValidationError):
            validate_module(b.build())

    def test_if_without_else_passes_params_through(self):
        b, f = single(params=[I32], results=[I32])
        f.local_get(0).local_get(0).if_(([I32], [I32])).end()
        validate_module(b.build())

    def test_probe_byte_rejected(self):
        b, f = single()
        f.raw(bytes([0xFF]))
        with pytest.raises(ValidationError):
            validate_module(b.build())

    def test_simd_prefix_rejected(self):
        b, f = single()
        f.raw(bytes([0xFD, 0x00]))
        with pytest.raises(ValidationError):
            validate_module(b.build())

    def test_nop_accepted(self):
        b, f = single()
        f.nop()
        validate_module(b.build())


class TestSidetable:
    def test_branch_free_body_is_empty(self):
        b, f = single(results=[I32])
        f.i32_const(1)
        _, vf = validated(b)
        assert len(vf.sidetable) == 0

    def test_single_branch(self):
        b, f = single()
        f.block()
        f.br(0)
        br_rel = f.last
        f.end()
        end_rel = f.last
        m, vf = validated(b)
        br_at, end_at = f.abs(br_rel), f.abs(end_rel)
        (e,) = list(vf.sidetable)
        assert br_at + e.delta_ip == end_at
        assert e.delta_stp == 1
        assert scan_branch_target(m, 0, br_at).target_ip == end_at

    def test_forward_delta(self):
        b, f = single()
        f.block().br(0)
        for _ in range(10):
            f.nop()
        f.end()
        _, vf = validated(b)
        assert tuple(vf.sidetable[0]) == (12, 1, 0, 0)

    def test_loop_back_edge(self):
        b, f = single()
        f.loop()
        for _ in range(38):
            f.nop()
        f.br(0)
        f.end()
        m, vf = validated(b)
        e = vf.sidetable[0]
        assert (e.delta_ip, e.delta_stp) == (-40, 0)
        loop_at = f.abs(0)
        assert scan_branch_target(m, 0, loop_at + 40).target_ip == loop_at

    def test_popcnt_discards_below_results(self):
        b, f = single(results=[I32])
        f.i32_const(1).i32_const(2)
        f.block(I32)
        f.i32_const(3).i32_const(4).i32_const(5).br(0)
        f.end()
        f.i32_add().i32_add()
        m, vf = validated(b)
        e = vf.sidetable[0]
        assert (e.valcnt, e.popcnt) == (1, 2)
        assert check_sidetable(m, 0, vf) == []

    def test_exact_height_branch(self):
        b, f = single(results=[I32])
        f.block(I32).i32_const(3).br(0).end()
        _, vf = validated(b)
        assert (vf.sidetable[0].valcnt, vf.sidetable[0].popcnt) == (1, 0)

    def test_unreachable_branch_popcnt_zero(self):
        b, f = single()
        f.block().i32_const(1).i32_const(2).br(0).br(0).end()
        m, vf = validated(b)
        assert vf.sidetable[0].popcnt == 2
        assert vf.sidetable[1].popcnt == 0
        assert check_sidetable(m, 0, vf) == []

    def test_if_without_else(self):
        b, f = single(params=[I32])
        f.local_get(0).if_()
        if_rel = f.last
        f.nop().end()
        end_rel = f.last
        m, vf = validated(b)
        if_at, end_at = f.abs(if_rel), f.abs(end_rel)
        assert if_at + vf.sidetable[0].delta_ip == end_at
        assert scan_branch_target(m, 0, if_at).target_ip == end_at

    def test_if_with_else(self):
        b, f = single(params=[I32], results=[I32])
        f.local_get(0).if_(I32)
        if_rel = f.last
        f.i32_const(1).else_()
        else_rel = f.last
        f.i32_const(2).end()
        end_rel = f.last
        m, vf = validated(b)
        if_at, else_at, end_at = f.abs(if_rel), f.abs(else_rel), f.abs(end_rel)
        false_path, skip_else = vf.sidetable
        assert if_at + false_path.delta_ip == else_at + 1
        assert else_at + skip_else.delta_ip == end_at
        assert skip_else.valcnt == 1
        assert check_sidetable(m, 0, vf) == []

    def test_br_table_layout(self):
        b, f = single(params=[I32])
        f.block().block().local_get(0).br_table([0, 1], 1).end().end()
        _, vf = validated(b)
        assert len(vf.sidetable) == 4
        assert tuple(vf.sidetable[0]) == (0, 0, 2, 0)

    def test_br_table_default_only(self):
        b, f = single(params=[I32])
        f.block().local_get(0).br_table([], 0).end()
        _, vf = validated(b)
        assert len(vf.sidetable) == 2
        assert vf.sidetable[0].valcnt == 0

    def test_br_table_header_holds_max_case(self):
        b, f = single(params=[I32])
        f.block().local_get(0).br_table([0] * 5, 0).end()
        _, vf = validated(b)
        assert vf.sidetable[0].valcnt == 5

    def test_br_table_arity_mismatch(self):
        b, f = single(params=[I32])
        f.block().block(I32).i32_const(0).local_get(0).br_table([0], 1).end().drop().end()
        with pytest.raises(ValidationError):
            validate_module(b.build())

    def test_shared_target(self):
        b, f = single(params=[I32])
        f.block()
        f.local_get(0).br_if(0)
        f.br(0)
        f.end()
        end_rel = f.last
        m, vf = validated(b)
        end_at = f.abs(end_rel)
        a, c = vf.origins
        e0, e1 = vf.sidetable
        assert e0.delta_ip != e1.delta_ip
        assert a + e0.delta_ip == c + e1.delta_ip == end_at

    def test_single_pass(self):
        m = fx.compiled_style_module(functions=3)
        visits = Counter()
        vf = validate_function(m, 1, visit_counter=visits, collect_boundaries=True)
        assert set(visits) == set(vf.boundaries)
        assert set(visits.values()) == {1}

    def test_fixtures_match_oracle(self):
        for m in (fx.fib_module(), fx.loop_sum_module(), fx.trap_module(),
                  fx.multi_value_module(), fx.branchy_module(50), fx.compiled_style_module()):
            vfs = validate_module(m)
            for i, vf in enumerate(vfs):
                assert check_sidetable(m, m.num_imported_functions + i, vf) == []

    def test_tracking_off_gives_empty_tables(self):
        vfs = validate_module(fx.fib_module(), track_sidetable=False)
        assert len(vfs[0].sidetable) == 0

    def test_parallel_validation_is_identical(self):
        m = fx.compiled_style_module(functions=8)
        serial = validate_module(m)
        parallel = validate_module(m, workers=4)
        assert [list(v.sidetable) for v in serial] == [list(v.sidetable) for v in parallel]


class TestArity:
    def test_loop_uses_params(self):
        assert branch_target_arity(ControlEntry("loop", (I32,), (I64,), 0, 0, 0)) == 1

    def test_block_uses_results(self):
        assert branch_target_arity(ControlEntry("block", (), (I32, I32), 0, 0, 0)) == 2

    def test_function_level(self):
        assert branch_target_arity(ControlEntry("function", (), (), 0, 0, 0)) == 0
