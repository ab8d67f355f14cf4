import math

import numpy as np
import pytest

from tataa import bfarith
from tataa.bfarith import ArithConfig
from tataa.errors import ArithDomainError

from .conftest import bf16, ordered


def _random_patterns(rng, n, lo=120, hi=134):
    s = rng.integers(0, 2, n)
    e = rng.integers(lo, hi + 1, n)
    m = rng.integers(0, 128, n)
    return ((s << 15) | (e << 7) | m).astype(np.uint16)


def test_constants_round_trip():
    assert bfarith.ONE == 0x3F80
    assert bfarith.to_float(bfarith.ONE) == 1.0
    assert bfarith.to_float(bfarith.NEG_HALF) == -0.5
    assert bfarith.decode(0xBF80) == (1, 127, 0)
    assert int(bfarith.encode(0, 128, 0)) == int(bf16(2.0))


def test_from_float_saturates_and_flushes():
    assert int(bfarith.from_float(1e39)) == bfarith.MAX_FINITE
    assert int(bfarith.from_float(-1e39)) == 0x8000 | bfarith.MAX_FINITE
    assert int(bfarith.from_float(1e-40)) == 0
    assert bfarith.to_float(0x0001) == 0.0  # subnormal flushes


def test_encode_rejects_out_of_range_fields():
    with pytest.raises(ValueError):
        bfarith.encode(0, 256, 0)
    with pytest.raises(ValueError):
        bfarith.encode(0, 1, 128)


def test_fpmul_exact_cases():
    assert bfarith.to_float(bfarith.fpmul(bf16(2.0), bf16(3.0))) == 6.0
    assert bfarith.to_float(bfarith.fpmul(bf16(-1.5), bf16(0.5))) == -0.75
    assert int(bfarith.fpmul(bf16(0.0), bf16(5.0))) == 0
    assert int(bfarith.fpmul(bf16(1e30), bf16(1e30))) == bfarith.MAX_FINITE


def test_fpadd_exact_cases():
    assert bfarith.to_float(bfarith.fpadd(bf16(1.0), bf16(1.0))) == 2.0
    assert bfarith.to_float(bfarith.fpadd(bf16(3.0), bf16(-1.0))) == 2.0
    assert int(bfarith.fpadd(bf16(1.0), bf16(-1.0))) == 0
    assert int(bfarith.fpadd(0x8000, 0x8000)) == 0x8000
    # alignment distance beyond the shift LUT drops the small operand
    assert int(bfarith.fpadd(bf16(1.0), bf16(2.0**-20))) == bfarith.ONE


def test_fpmul_within_one_ulp_of_round_to_nearest(rng):
    a = _random_patterns(rng, 20_000)
    b = _random_patterns(rng, 20_000)
    got = bfarith.fpmul(a, b)
    want = bf16(bfarith.to_float(a) * bfarith.to_float(b))
    assert np.max(np.abs(ordered(got) - ordered(want))) <= 1


def test_fpadd_within_one_ulp_of_round_to_nearest(rng):
    a = _random_patterns(rng, 20_000)
    b = _random_patterns(rng, 20_000)
    got = bfarith.fpadd(a, b)
    want = bf16(bfarith.to_float(a) + bfarith.to_float(b))
    assert np.max(np.abs(ordered(got) - ordered(want))) <= 1


def test_fpapp_matches_integer_oracle_on_every_pattern():
    y = np.arange(1 << 16, dtype=np.int64)
    signed = np.where(y >= 0x8000, y - 0x10000, y)
    want = ((bfarith.MAGIC - (signed >> 1)) & 0xFFFF).astype(np.uint16)
    np.testing.assert_array_equal(bfarith.fpapp(y, raw=True), want)
    np.testing.assert_array_equal(bfarith.fpapp(y), bfarith.fpmul(want, want))


def test_fast_isqrt_accuracy_and_domain():
    x = bf16([1.0, 4.0, 16.0, 0.25])
    got = bfarith.to_float(bfarith.fast_isqrt(x))
    np.testing.assert_allclose(got, [1.0, 0.5, 0.25, 2.0], rtol=2e-2)
    with pytest.raises(ArithDomainError):
        bfarith.fast_isqrt(bf16([1.0, 0.0]))
    with pytest.raises(ArithDomainError):
        bfarith.fast_isqrt(bf16(-4.0))


def test_fpdiv():
    assert bfarith.to_float(bfarith.fpdiv(bf16(6.0), bf16(3.0))) == pytest.approx(2.0, rel=3e-2)
    assert bfarith.to_float(bfarith.fpdiv(bf16(1.0), bf16(-4.0))) == pytest.approx(-0.25, rel=3e-2)
    x = bf16([0.3, -7.0, 100.0])
    np.testing.assert_allclose(bfarith.to_float(bfarith.fpdiv(x, bf16(1.0))), bfarith.to_float(x), rtol=3e-2)
    with pytest.raises(ArithDomainError):
        bfarith.fpdiv(bf16(1.0), bf16(0.0))


def test_approx_exp_is_power_of_two_floor():
    assert bfarith.to_float(bfarith.approx_exp(bf16(0.0))) == 1.0
    assert bfarith.to_float(bfarith.approx_exp(bf16(0.75))) == 2.0
    assert bfarith.to_float(bfarith.approx_exp(bf16(-0.1))) == 0.5
    assert bfarith.to_float(bfarith.approx_exp(bf16(-32768.0))) == 0.0


def test_exp_lut_refines_mantissa():
    x = bf16(np.linspace(-4.0, 4.0, 101))
    ref = np.exp(bfarith.to_float(x))
    plain = np.abs(bfarith.to_float(bfarith.approx_exp(x)) / ref - 1).mean()
    refined = np.abs(bfarith.to_float(bfarith.approx_exp(x, ArithConfig(exp_lut=True))) / ref - 1).mean()
    assert refined < plain


def test_pade_tanh_saturates():
    assert int(bfarith.pade_tanh(bf16(0.0))) == 0
    assert bfarith.to_float(bfarith.pade_tanh(bf16(10.0))) == 1.0
    assert bfarith.to_float(bfarith.pade_tanh(bf16(-10.0))) == -1.0
    assert bfarith.to_float(bfarith.pade_tanh(bf16(0.5))) == pytest.approx(math.tanh(0.5), abs=2e-2)


def test_gelu_sigmoid_silu_close_to_float():
    x = np.linspace(-3.0, 3.0, 61)
    bits = bf16(x)
    xf = bfarith.to_float(bits)
    sig = 1.0 / (1.0 + np.exp(-xf))
    np.testing.assert_allclose(bfarith.to_float(bfarith.sigmoid(bits)), sig, atol=3e-2)
    np.testing.assert_allclose(bfarith.to_float(bfarith.silu(bits)), xf * sig, atol=6e-2)
    gelu = 0.5 * xf * (1 + np.tanh(np.sqrt(2 / np.pi) * (xf + 0.044715 * xf**3)))
    np.testing.assert_allclose(bfarith.to_float(bfarith.gelu(bits)), gelu, atol=6e-2)


def test_relu_and_clamp():
    np.testing.assert_array_equal(bfarith.relu(bf16([-2.0, 0.0, 3.0])), bf16([0.0, 0.0, 3.0]))
    assert int(bfarith.relu(0x8000)) == 0
    np.testing.assert_array_equal(bfarith.clamp_unit(bf16([-3.0, 0.5, 7.0])), bf16([-1.0, 0.5, 1.0]))


def test_arith_config_rejects_other_magic():
    with pytest.raises(ValueError):
        ArithConfig(magic=0x5F36)
    with pytest.raises(ValueError):
        ArithConfig(newton_iters=0)


def test_scalar_in_scalar_out():
    out = bfarith.fpmul(bfarith.ONE, bfarith.ONE)
    assert isinstance(out, np.uint16)


ALL_PATTERNS = np.arange(1 << 16, dtype=np.uint16)
EXPONENTS = (ALL_PATTERNS >> 7) & 0xFF
NORMAL = ALL_PATTERNS[(EXPONENTS >= 1) & (EXPONENTS <= 254)]


def test_encode_decode_round_trip_on_every_pattern():
    np.testing.assert_array_equal(bfarith.encode(*bfarith.decode(ALL_PATTERNS)), ALL_PATTERNS)


def test_bit_length_matches_python():
    v = np.concatenate([np.arange(0, 1 << 12), 1 << np.arange(30), (1 << np.arange(1, 30)) - 1])
    want = [int(x).bit_length() for x in v]
    np.testing.assert_array_equal(bfarith._bit_length(v), want)


def test_fpmul_and_fpadd_commute(rng):
    a = rng.integers(0, 1 << 16, 200_000).astype(np.uint16)
    b = rng.integers(0, 1 << 16, 200_000).astype(np.uint16)
    np.testing.assert_array_equal(bfarith.fpmul(a, b), bfarith.fpmul(b, a))
    np.testing.assert_array_equal(bfarith.fpadd(a, b), bfarith.fpadd(b, a))


def test_identities_on_every_finite_pattern():
    x = np.concatenate([NORMAL, np.array([0x0000, 0x8000], dtype=np.uint16)])
    np.testing.assert_array_equal(bfarith.fpmul(bfarith.ONE, x), x)
    np.testing.assert_array_equal(bfarith.fpmul(x, bfarith.ONE), x)
    nonneg_zero = x[x != 0x8000]
    np.testing.assert_array_equal(bfarith.fpadd(nonneg_zero, 0x0000), nonneg_zero)


def test_fpmul_fpadd_one_ulp_over_a_million_pairs(rng):
    a = _random_patterns(rng, 1_000_000)
    b = _random_patterns(rng, 1_000_000)
    af, bf = bfarith.to_float(a), bfarith.to_float(b)
    assert np.max(np.abs(ordered(bfarith.fpmul(a, b)) - ordered(bf16(af * bf)))) <= 1
    assert np.max(np.abs(ordered(bfarith.fpadd(a, b)) - ordered(bf16(af + bf)))) <= 1


@pytest.mark.slow
def test_fpmul_fpadd_one_ulp_on_every_pair_in_exponent_window():
    window = ALL_PATTERNS[(EXPONENTS >= 120) & (EXPONENTS <= 134)]
    bf = bfarith.to_float(window)
    for start in range(0, window.size, 256):
        a = window[start : start + 256, None]
        af = bfarith.to_float(a)
        mul = bfarith.fpmul(a, window[None, :])
        add = bfarith.fpadd(a, window[None, :])
        assert np.max(np.abs(ordered(mul) - ordered(bf16(af * bf)))) <= 1
        assert np.max(np.abs(ordered(add) - ordered(bf16(af + bf)))) <= 1


def test_fast_isqrt_relative_error_bound():
    values = bfarith.to_float(NORMAL)
    x = NORMAL[(values >= 2.0**-10) & (values <= 2.0**10)]
    xf = bfarith.to_float(x)
    rel = np.abs(bfarith.to_float(bfarith.fast_isqrt(x)) * np.sqrt(xf) - 1.0)
    assert rel.max() <= 3.5e-2


def test_pade_tanh_is_odd_and_bounded():
    positive = ALL_PATTERNS[(ALL_PATTERNS < 0x8000) & (EXPONENTS != 255)]
    pos = bfarith.pade_tanh(positive)
    neg = bfarith.pade_tanh(positive | 0x8000)
    np.testing.assert_array_equal(neg, pos ^ 0x8000)
    assert np.all(np.abs(bfarith.to_float(pos)) <= 1.0)
    assert np.all(np.abs(bfarith.to_float(neg)) <= 1.0)


def test_approx_exp_is_monotone():
    x = np.concatenate([NORMAL, np.array([0x0000], dtype=np.uint16)])
    x = x[np.argsort(bfarith.to_float(x), kind="stable")]
    out = bfarith.to_float(bfarith.approx_exp(x))
    assert np.all(np.diff(out) >= 0)
