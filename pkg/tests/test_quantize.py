import numpy as np
import pytest

from tataa.errors import QuantError
from tataa.isa import bits_float32, float32_bits
from tataa.quantize import (
    Calibrator,
    QTensor,
    QuantParams,
    bf16_passthrough,
    bf16_to_int8,
    calibrate_scale,
    dequantize_to_bf16,
    quantize_tensor,
    requantize,
)

from .conftest import bf16


def test_quantize_floors_and_clamps():
    q = quantize_tensor([0.99, -0.01, 1000.0, -1000.0], scale=1.0)
    np.testing.assert_array_equal(q.data, [0, -1, 127, -127])
    assert q.data.dtype == np.int8


def test_calibrate_scale_uses_max_abs():
    assert calibrate_scale([np.array([1.0, -2.54]), np.array([0.5])]) == pytest.approx(2.54 / 127)
    with pytest.raises(QuantError):
        calibrate_scale([])
    with pytest.raises(QuantError):
        calibrate_scale([np.array([])])


def test_calibrators_merge():
    a, b = Calibrator(), Calibrator()
    a.observe([1.0])
    b.observe([-3.0, 2.0])
    merged = a.merge(b)
    assert merged.count == 2
    assert merged.scale() == pytest.approx(3.0 / 127)


def test_all_zero_calibration_uses_epsilon():
    assert calibrate_scale([np.zeros(4)]) > 0


def test_quant_params_reject_bad_scales():
    with pytest.raises(QuantError):
        QuantParams(0.0, 1.0)
    with pytest.raises(QuantError):
        QuantParams(1.0, float("nan"))
    assert QuantParams(0.5, 0.25, 2.0).multiplier == pytest.approx(0.0625)


def test_requantize_matches_float_floor_oracle(rng):
    acc = rng.integers(-(1 << 20), 1 << 20, 100_000)
    params = QuantParams(0.013, 0.0071, 0.05)
    want = np.clip(np.floor(acc.astype(np.float64) * (0.013 * 0.0071 / 0.05)), -127, 127)
    np.testing.assert_array_equal(requantize(acc, params), want)


def test_requantize_never_produces_minus_128():
    out = requantize(np.array([-(1 << 30)]), QuantParams(1.0, 1.0))
    assert out.min() == -127


def test_dequantize_to_bf16_truncates():
    out = dequantize_to_bf16(np.array([3, -5]), 0.5, 0.5)
    np.testing.assert_array_equal(out, bf16([0.75, -1.25]))


def test_bf16_to_int8_and_passthrough():
    v = bf16([1.0, -1.0, 300.0])
    np.testing.assert_array_equal(bf16_to_int8(v, 0.5), [2, -2, 127])
    np.testing.assert_array_equal(bf16_passthrough(v), v)
    with pytest.raises(QuantError):
        bf16_to_int8(v, -1.0)


def test_qtensor_dequantize_and_validation():
    q = QTensor(np.array([[1, -2]], dtype=np.int8), 0.5)
    np.testing.assert_array_equal(q.dequantize(), [[0.5, -1.0]])
    assert q.shape == (1, 2)
    with pytest.raises(QuantError):
        QTensor(np.array([-128], dtype=np.int8), 1.0)


def test_params_survive_config_payload():
    p = QuantParams(0.1, 0.2, 0.3)
    back = QuantParams(*(bits_float32(float32_bits(v)) for v in (p.s_x, p.s_y, p.s_z)))
    assert back.s_x == pytest.approx(0.1, rel=1e-7)
    assert back.multiplier == pytest.approx(p.multiplier, rel=1e-6)
