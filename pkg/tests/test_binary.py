"""Decoder tests: LEB128, module structure and local expansion."""

import pytest
from hypothesis import given, strategies as st

from inplace_wasm import DecodeError, FuncType, I32, I64, ValidationError, decode_module
from inplace_wasm.binary import FunctionBody, decode_locals, read_leb_signed, read_leb_unsigned
from inplace_wasm.testkit import ModuleBuilder, sleb, uleb

import wasm_fixtures as fx

EMPTY = bytes([0x00, 0x61, 0x73, 0x6D, 0x01, 0x00, 0x00, 0x00])


class TestLeb:
    def test_single_byte(self):
        assert read_leb_unsigned(bytes([0x05]), 0) == (5, 1)

    def test_multi_byte(self):
        assert read_leb_unsigned(bytes([0xE5, 0x8E, 0x26]), 0) == (624485, 3)

    def test_too_long_for_32_bits(self):
        with pytest.raises(DecodeError):
            read_leb_unsigned(bytes([0x80, 0x80, 0x80, 0x80, 0x80, 0x00]), 0, 32)

    def test_padding_bits_rejected(self):
        with pytest.raises(DecodeError):
            read_leb_unsigned(bytes([0xFF, 0xFF, 0xFF, 0xFF, 0x7F]), 0, 32)

    def test_truncated(self):
        with pytest.raises(DecodeError):
            read_leb_unsigned(bytes([0x80, 0x80]), 0)

    @pytest.mark.parametrize("data,expected", [
        ([0x7F], (-1, 1)), ([0x3F], (63, 1)), ([0x40], (-64, 1)),
    ])
    def test_signed(self, data, expected):
        assert read_leb_signed(bytes(data), 0) == expected

    def test_offset_is_honoured(self):
        assert read_leb_unsigned(bytes([0xAA, 0xE5, 0x8E, 0x26]), 1) == (624485, 3)

    @given(st.integers(0, 2**32 - 1))
    def test_unsigned_round_trip(self, n):
        enc = uleb(n)
        assert read_leb_unsigned(enc, 0, 32) == (n, len(enc))

    @given(st.integers(-2**63, 2**63 - 1))
    def test_signed_round_trip(self, n):
        enc = sleb(n)
        assert read_leb_signed(enc, 0, 64) == (n, len(enc))

    @given(st.binary(max_size=12))
    def test_total_on_arbitrary_bytes(self, data):
        # Every input either decodes within bounds or raises a decode error.
        for reader in (read_leb_unsigned, read_leb_signed):
            try:
                value, n = reader(data, 0, 32)
            except DecodeError:
                continue
            assert 1 <= n <= 5 and n <= len(data)


class TestModule:
    def test_empty_module(self):
        m = decode_module(EMPTY)
        assert m.types == [] and m.functions == [] and m.exports == []

    def test_single_constant_function(self):
        b = ModuleBuilder()
        b.function([], [I32]).i32_const(42)
        data = b.emit()
        m = decode_module(data)
        assert m.types == [FuncType((), (I32,))]
        assert len(m.functions) == 1
        body = m.functions[0].body
        # i32.const 42 (2 bytes) + end, plus the empty locals vector byte
        assert body.size == 4
        assert data[body.code_start:body.code_end] == bytes([0x41, 42, 0x0B])

    def test_bad_version(self):
        with pytest.raises(DecodeError):
            decode_module(EMPTY[:4] + bytes([2, 0, 0, 0]))

    def test_bad_magic(self):
        with pytest.raises(DecodeError):
            decode_module(b"\x00asn" + EMPTY[4:])

    def test_unknown_section(self):
        with pytest.raises(DecodeError):
            decode_module(EMPTY + bytes([0x20, 0x00]))

    def test_section_length_mismatch(self):
        with pytest.raises(DecodeError):
            decode_module(EMPTY + bytes([0x01, 0x05, 0x00]))

    def test_error_names_offset(self):
        with pytest.raises(DecodeError) as info:
            decode_module(EMPTY + bytes([0x01, 0x05, 0x00]))
        assert info.value.offset is not None

    def test_section_sizes_match_builder(self):
        b, _ = fx.fib_builder()
        data = b.emit()
        m = decode_module(data)
        decoded = {s.id: s.size for s in m.sections}
        assert decoded == b.section_sizes

    def test_offsets_point_into_original_bytes(self):
        b, f = fx.fib_builder()
        data = b.emit()
        m = decode_module(data)
        assert m.original_bytes == data
        assert m.functions[0].body.code_start == f.code_start
        assert data[m.functions[0].body.code_end - 1] == 0x0B

    def test_reencode_is_stable(self):
        assert fx.fib_builder()[0].emit() == fx.fib_builder()[0].emit()


class TestLocals:
    def test_groups_expand(self):
        body = FunctionBody(locals=((2, I64),), code_start=0, code_end=0)
        assert decode_locals(body, FuncType((I32,), ())) == [I32, I64, I64]

    def test_empty(self):
        body = FunctionBody(locals=(), code_start=0, code_end=0)
        assert decode_locals(body, FuncType((), ())) == []

    def test_limit(self):
        body = FunctionBody(locals=((60000, I32),), code_start=0, code_end=0)
        with pytest.raises(ValidationError):
            decode_locals(body, FuncType((), ()))
