"""Bit-exact numeric helpers shared by the interpreter handlers.

Integers live on the value stack as unsigned Python ints (masked to 32 or 64
bits).  f32 values are Python floats that are always exactly representable
in single precision.
"""

from __future__ import annotations

import math
import struct

from .errors import Trap

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF
SIGN32 = 0x80000000
SIGN64 = 0x8000000000000000

_F = struct.Struct("<f")
_D = struct.Struct("<d")
_I = struct.Struct("<I")
_Q = struct.Struct("<Q")

INF = math.inf
NAN = math.nan


def s32(x: int) -> int:
    x &= MASK32
    return x - 0x100000000 if x & SIGN32 else x


def s64(x: int) -> int:
    x &= MASK64
    return x - 0x10000000000000000 if x & SIGN64 else x


def f32(x: float) -> float:
    """Round a double to the nearest single-precision value."""
    try:
        return _F.unpack(_F.pack(x))[0]
    except OverflowError:
        return math.copysign(INF, x)


def f32_bits(x: float) -> int:
    return _I.unpack(_F.pack(x))[0]


def f32_from_bits(b: int) -> float:
    return _F.unpack(_I.pack(b & MASK32))[0]


def f64_bits(x: float) -> int:
    return _Q.unpack(_D.pack(x))[0]


def f64_from_bits(b: int) -> float:
    return _D.unpack(_Q.pack(b & MASK64))[0]


def int_to_f32(n: int) -> float:
    """Correctly rounded integer to f32 (no double rounding through f64)."""
    if -(1 << 53) <= n <= (1 << 53):
        return f32(float(n))
    sign = -1 if n < 0 else 1
    n = abs(n)
    shift = n.bit_length() - 24
    q, r = divmod(n, 1 << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return f32(sign * math.ldexp(float(q), shift))


# -- integer ops ---------------------------------------------------------

def clz32(x):
    return 32 - x.bit_length()


def ctz32(x):
    return 32 if x == 0 else (x & -x).bit_length() - 1


def clz64(x):
    return 64 - x.bit_length()


def ctz64(x):
    return 64 if x == 0 else (x & -x).bit_length() - 1


def popcnt(x):
    return bin(x).count("1")


def div_s(a, b, bits):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    sa = a - (1 << bits) if a >> (bits - 1) else a
    sb = b - (1 << bits) if b >> (bits - 1) else b
    if sa == -(1 << (bits - 1)) and sb == -1:
        raise Trap("integer-overflow")
    q = abs(sa) // abs(sb)
    if (sa < 0) != (sb < 0):
        q = -q
    return q & ((1 << bits) - 1)


def rem_s(a, b, bits):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    sa = a - (1 << bits) if a >> (bits - 1) else a
    sb = b - (1 << bits) if b >> (bits - 1) else b
    r = abs(sa) % abs(sb)
    if sa < 0:
        r = -r
    return r & ((1 << bits) - 1)


def div_u(a, b):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    return a // b


def rem_u(a, b):
    if b == 0:
        raise Trap("integer-divide-by-zero")
    return a % b


def rotl(x, k, bits):
    k %= bits
    mask = (1 << bits) - 1
    return ((x << k) | (x >> (bits - k))) & mask


def rotr(x, k, bits):
    k %= bits
    mask = (1 << bits) - 1
    return ((x >> k) | (x << (bits - k))) & mask


def shr_s(x, k, bits):
    k %= bits
    sx = x - (1 << bits) if x >> (bits - 1) else x
    return (sx >> k) & ((1 << bits) - 1)


def extend_s(x, from_bits, to_mask):
    x &= (1 << from_bits) - 1
    if x >> (from_bits - 1):
        x -= 1 << from_bits
    return x & to_mask


# -- float ops -----------------------------------------------------------

def fdiv(a, b):
    if b == 0.0:
        if a == 0.0 or a != a:
            return NAN
        neg = (math.copysign(1.0, a) < 0) != (math.copysign(1.0, b) < 0)
        return -INF if neg else INF
    return a / b


def fmin(a, b):
    if a != a or b != b:
        return NAN
    if a == b == 0.0:
        return a if math.copysign(1.0, a) < 0 else b
    return a if a < b else b


def fmax(a, b):
    if a != a or b != b:
        return NAN
    if a == b == 0.0:
        return b if math.copysign(1.0, a) < 0 else a
    return a if a > b else b


def _rounding(fn):
    def op(x):
        if x != x or x in (INF, -INF) or x == 0.0:
            return x
        r = float(fn(x))
        return math.copysign(0.0, x) if r == 0.0 else r
    return op


fceil = _rounding(math.ceil)
ffloor = _rounding(math.floor)
ftrunc = _rounding(math.trunc)
fnearest = _rounding(round)     # round-half-to-even


def fsqrt(x):
    if x != x or x < 0.0:
        return NAN
    return math.sqrt(x)


def trunc_to_int(x: float, lo: int, hi: int) -> int:
    """Truncate toward zero, trapping on NaN or when outside [lo, hi]."""
    if x != x:
        raise Trap("invalid-float-conversion")
    if x in (INF, -INF):
        raise Trap("integer-overflow")
    t = math.trunc(x)
    if t < lo or t > hi:
        raise Trap("integer-overflow")
    return t


def trunc_sat(x: float, lo: int, hi: int) -> int:
    if x != x:
        return 0
    if x == INF:
        return hi
    if x == -INF:
        return lo
    return max(lo, min(hi, math.trunc(x)))


I32_RANGE_S = (-(1 << 31), (1 << 31) - 1)
I32_RANGE_U = (0, (1 << 32) - 1)
I64_RANGE_S = (-(1 << 63), (1 << 63) - 1)
I64_RANGE_U = (0, (1 << 64) - 1)
