"""Bit-exact bfloat16 arithmetic built from small-integer operations.

Every kernel here works on raw 16-bit patterns (``s | eeeeeeee | mmmmmmm``) and
only uses integer adds, shifts and 8x8 multiplies, in the same order the PE
pipeline evaluates them. Inputs may be Python ints or numpy integer arrays;
outputs are ``numpy.uint16`` scalars or arrays, so every function is
lane-parallel for free and the simulator's SIMD path calls them directly.

Conventions:
  * mantissa results are truncated (round toward zero);
  * exponent 0 is zero (subnormal inputs flush, underflow produces signed zero);
  * overflow saturates to the largest finite magnitude (e=254, m=0x7F);
  * exponent 255 on input is just a large exponent, never Inf/NaN.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArithDomainError

BIAS = 127
MAGIC = 0x5F37
SIGN_BIT = 0x8000
MAX_FINITE = 0x7F7F
HIDDEN_ONE = 0x80
GUARD_BITS = 15

# shift_lut[k] is 2^-k in Q15; alignment distances above 15 contribute nothing
SHIFT_LUT = tuple(1 << (GUARD_BITS - k) for k in range(16))

# 2^f mantissas for the optional exp refinement, indexed by the top 3 fraction bits
EXP_MANTISSA_LUT = tuple(round((2 ** ((i + 0.5) / 8) - 1) * 128) for i in range(8))


@dataclass(frozen=True)
class ArithConfig:
    """Static parameters of the bfloat16 datapath."""

    magic: int = MAGIC
    newton_iters: int = 1
    shift_lut: tuple[int, ...] = SHIFT_LUT
    exp_lut: bool = False  # mantissa refinement for approx_exp

    def __post_init__(self):
        if self.magic != MAGIC:
            raise ValueError(f"magic must be 0x{MAGIC:04X}, got 0x{self.magic:04X}")
        if self.newton_iters < 1:
            raise ValueError("newton_iters must be >= 1")
        if tuple(self.shift_lut) != SHIFT_LUT:
            raise ValueError("shift_lut must hold 2^-k in Q15 for k in 0..15")


DEFAULT_ARITH = ArithConfig()


def _bits(x) -> np.ndarray:
    return np.asarray(x).astype(np.int64) & 0xFFFF


def _result(v):
    out = (np.asarray(v, dtype=np.int64) & 0xFFFF).astype(np.uint16)
    return out[()] if out.ndim == 0 else out


def _fields(x: np.ndarray):
    return (x >> 15) & 1, (x >> 7) & 0xFF, x & 0x7F


def decode(bits):
    """Split a pattern into (sign, biased exponent, stored mantissa)."""
    x = _bits(bits)
    s, e, m = _fields(x)
    if x.ndim == 0:
        return int(s), int(e), int(m)
    return s, e, m


def encode(s, e, m):
    """Pack (sign, biased exponent, stored mantissa) into a 16-bit pattern."""
    s, e, m = (np.asarray(v).astype(np.int64) for v in (s, e, m))
    if np.any((s < 0) | (s > 1)) or np.any((e < 0) | (e > 255)) or np.any((m < 0) | (m > 0x7F)):
        raise ValueError("bfloat16 field out of range")
    return _result((s << 15) | (e << 7) | m)


def to_float(bits):
    """Exact real value of a pattern (flushes subnormals like the datapath does)."""
    x = _bits(bits)
    s, e, m = _fields(x)
    mag = np.where(e == 0, 0.0, np.ldexp(1.0 + m / 128.0, (e - BIAS).astype(np.int32)))
    v = np.where(s == 1, -mag, mag)
    return float(v) if v.ndim == 0 else v


def _saturate(bits32: np.ndarray) -> np.ndarray:
    bits = bits32 & 0xFFFF
    sign = bits & SIGN_BIT
    e = (bits >> 7) & 0xFF
    bits = np.where(e == 255, sign | MAX_FINITE, bits)
    return np.where(e == 0, sign, bits)


def from_float(x):
    """Round a real to the nearest bfloat16 (ties to even), flushing and saturating."""
    f = np.asarray(x, dtype=np.float32)
    u = f.view(np.uint32).astype(np.int64)
    rounding = ((u >> 16) & 1) + 0x7FFF
    return _result(_saturate((u + rounding) >> 16))


def truncate_float(x):
    """Convert a real to bfloat16 by dropping the low mantissa bits."""
    f = np.asarray(x, dtype=np.float32)
    u = f.view(np.uint32).astype(np.int64)
    return _result(_saturate(u >> 16))


ONE = int(from_float(1.0))
NEG_ONE = int(from_float(-1.0))
HALF = int(from_float(0.5))
NEG_HALF = int(from_float(-0.5))
THREE_HALVES = int(from_float(1.5))
INV_LN2 = int(from_float(1.0 / math.log(2.0)))
PADE_27 = int(from_float(27.0))
PADE_9 = int(from_float(9.0))
GELU_CUBIC = int(from_float(0.044715))
SQRT_2_OVER_PI = int(from_float(math.sqrt(2.0 / math.pi)))


def neg(a):
    """Flip the sign bit."""
    return _result(_bits(a) ^ SIGN_BIT)


def fpmul(a, b):
    """Multiply: XOR signs, add exponents, 8x8 integer multiply of the mantissas."""
    a, b = _bits(a), _bits(b)
    sa, ea, ma = _fields(a)
    sb, eb, mb = _fields(b)
    sign = (sa ^ sb) << 15

    prod = (ma | HIDDEN_ONE) * (mb | HIDDEN_ONE)  # Q14, in [1.0, 4.0)
    carry = prod >> 15
    mant = (prod >> (7 + carry)) & 0x7F
    exp = ea + eb - BIAS + carry

    out = np.where(exp >= 255, sign | MAX_FINITE, sign | (np.clip(exp, 0, 255) << 7) | mant)
    out = np.where((exp <= 0) | (ea == 0) | (eb == 0), sign, out)
    return _result(out)


def _bit_length(v: np.ndarray) -> np.ndarray:
    """Leading-one detector: position of the highest set bit, 0 for zero."""
    v = np.asarray(v, dtype=np.int64)
    length = np.zeros_like(v)
    for step in (16, 8, 4, 2, 1):
        high = (v >> step) != 0
        v = np.where(high, v >> step, v)
        length += np.where(high, step, 0)
    return length + (v != 0)


def _twos_mantissa(s, e, m):
    mag = np.where(e == 0, 0, m | HIDDEN_ONE)
    return np.where(s == 1, -mag, mag)


def fpadd(a, b, cfg: ArithConfig = DEFAULT_ARITH):
    """Add: align the smaller operand through the shift LUT, add as integers, renormalize."""
    a, b = _bits(a), _bits(b)
    sa, ea, ma = _fields(a)
    sb, eb, mb = _fields(b)

    va = _twos_mantissa(sa, ea, ma)
    vb = _twos_mantissa(sb, eb, mb)
    a_larger = ea >= eb
    ez = np.maximum(ea, eb)
    lut = np.array(cfg.shift_lut + (0,), dtype=np.int64)
    factor = lut[np.minimum(np.abs(ea - eb), 16)]

    total = np.where(a_larger, va << GUARD_BITS, va * factor) + np.where(a_larger, vb * factor, vb << GUARD_BITS)

    sign = (total < 0).astype(np.int64)
    mag = np.abs(total)
    length = _bit_length(mag)
    shift = length - 8
    mant = np.where(shift >= 0, mag >> np.maximum(shift, 0), mag << np.maximum(-shift, 0)) & 0x7F
    exp = ez + length - (GUARD_BITS + 8)

    out = np.where(exp >= 255, (sign << 15) | MAX_FINITE, (sign << 15) | (np.clip(exp, 0, 255) << 7) | mant)
    out = np.where(exp <= 0, sign << 15, out)
    both_neg_zero = (ea == 0) & (eb == 0) & (sa == 1) & (sb == 1)
    out = np.where(mag == 0, np.where(both_neg_zero, SIGN_BIT, 0), out)
    return _result(out)


def fpapp(y, raw: bool = False, cfg: ArithConfig = DEFAULT_ARITH):
    """Inverse-sqrt seed t = magic - (y >> 1) on the int16 view; t^2 unless ``raw``."""
    y = _bits(y)
    y_int = np.where(y & SIGN_BIT, y - 0x10000, y)
    t = (cfg.magic - (y_int >> 1)) & 0xFFFF
    if raw:
        return _result(t)
    return fpmul(t, t)


def _isqrt(x, cfg: ArithConfig):
    t = fpapp(x, raw=True, cfg=cfg)
    t2 = fpapp(x, raw=False, cfg=cfg)
    nhx = fpmul(x, NEG_HALF)
    for i in range(cfg.newton_iters):
        if i:
            t2 = fpmul(t, t)
        t3 = fpmul(t, t2)
        p = fpmul(nhx, t3)
        q = fpmul(t, THREE_HALVES)
        t = fpadd(q, p, cfg)
    return t


def _is_positive(x: np.ndarray) -> np.ndarray:
    return ((x & SIGN_BIT) == 0) & (((x >> 7) & 0xFF) != 0)


def fast_isqrt(x, cfg: ArithConfig = DEFAULT_ARITH):
    """1/sqrt(x) as 1.5t - 0.5*x*t^3 with t from fpapp, refined ``newton_iters`` times."""
    bits = _bits(x)
    if not np.all(_is_positive(bits)):
        raise ArithDomainError("fast_isqrt needs x > 0")
    return _isqrt(bits, cfg)


def fpdiv(x, y, cfg: ArithConfig = DEFAULT_ARITH):
    """x / y as x * r * r with r = 1/sqrt(|y|); negative y flips the sign afterwards."""
    x, y = _bits(x), _bits(y)
    if np.any(((y >> 7) & 0xFF) == 0):
        raise ArithDomainError("fpdiv by zero")
    r = _isqrt(y & 0x7FFF, cfg)
    q = _bits(fpmul(fpmul(x, r), r))
    return _result(np.where(y & SIGN_BIT, q ^ SIGN_BIT, q))


def exp2_floor(z, cfg: ArithConfig = DEFAULT_ARITH):
    """2^floor(z) by an integer floor and a direct exponent-field write (the pow2 output LUT)."""
    z = _bits(z)
    s, e, m = _fields(z)
    mant = m | HIDDEN_ONE
    # z * 128 == mant * 2^(e - 127); floor it with shifts only
    shift = np.clip(e - BIAS, -40, 16)
    left = np.maximum(shift, 0)
    right = np.maximum(-shift, 0)
    floor_mag = np.where(shift >= 0, mant << left, mant >> right)
    ceil_mag = np.where(shift >= 0, mant << left, (mant + (1 << right) - 1) >> right)
    q = np.where(e == 0, 0, np.where(s == 1, -ceil_mag, floor_mag))

    k = q >> 7
    if cfg.exp_lut:
        lut = np.array(EXP_MANTISSA_LUT, dtype=np.int64)
        frac_mant = lut[(q & 0x7F) >> 4]
    else:
        frac_mant = np.zeros_like(q)
    exp = np.minimum(BIAS + k, 254)
    out = np.where(exp <= 0, 0, (exp << 7) | frac_mant)
    return _result(out)


def approx_exp(x, cfg: ArithConfig = DEFAULT_ARITH):
    """e^x as 2^floor(x / ln 2)."""
    return exp2_floor(fpmul(x, INV_LN2), cfg)


def clamp_unit(v):
    """Saturate to [-1, 1] on the sign-magnitude pattern."""
    v = _bits(v)
    return _result(np.where((v & 0x7FFF) > ONE, (v & SIGN_BIT) | ONE, v))


def relu(v):
    """Zero every negative pattern (including -0)."""
    v = _bits(v)
    return _result(np.where(v & SIGN_BIT, 0, v))


def pade_tanh(x, cfg: ArithConfig = DEFAULT_ARITH):
    """clamp((27x + x^3) / (27 + 9x^2), -1, 1) from fpmul/fpadd and the isqrt division."""
    x2 = fpmul(x, x)
    x3 = fpmul(x2, x)
    n1 = fpmul(x, PADE_27)
    num = fpadd(n1, x3, cfg)
    d1 = fpmul(x2, PADE_9)
    den = fpadd(d1, PADE_27, cfg)
    r = _isqrt(den, cfg)  # den >= 27, always in domain
    return clamp_unit(fpmul(fpmul(num, r), r))


def gelu(x, cfg: ArithConfig = DEFAULT_ARITH):
    """Tanh-form GELU: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    h = fpmul(x, HALF)
    x2 = fpmul(x, x)
    x3 = fpmul(x2, x)
    a = fpmul(x3, GELU_CUBIC)
    b = fpadd(a, x, cfg)
    u = fpmul(b, SQRT_2_OVER_PI)
    th = pade_tanh(u, cfg)
    s = fpadd(th, ONE, cfg)
    return fpmul(h, s)


def sigmoid(x, cfg: ArithConfig = DEFAULT_ARITH):
    """0.5 + 0.5 tanh(x/2)."""
    h = fpmul(x, HALF)
    th = pade_tanh(h, cfg)
    s = fpmul(th, HALF)
    return fpadd(s, HALF, cfg)


def silu(x, cfg: ArithConfig = DEFAULT_ARITH):
    return fpmul(x, sigmoid(x, cfg))


def swiglu(a, z, cfg: ArithConfig = DEFAULT_ARITH):
    """Gated SiLU: (a * sigmoid(a)) * (a * sigmoid(z))."""
    return fpmul(silu(a, cfg), fpmul(a, sigmoid(z, cfg)))
