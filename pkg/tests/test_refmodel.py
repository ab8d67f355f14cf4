import numpy as np
import pytest

from tataa import bfarith
from tataa.errors import GraphError
from tataa.models import TinyModelConfig, make_block_weights, make_input
from tataa.refmodel import (
    RefTensor,
    compare,
    gelu_exact,
    gelu_tanh,
    layernorm,
    ref_block,
    rmsnorm,
    softmax,
)

from .conftest import bf16


def test_compare_identical():
    x = np.linspace(-2, 2, 50)
    report = compare(x, x)
    assert report.rmse == 0 and report.max_abs == 0
    assert report.cosine == pytest.approx(1.0)
    assert report.count == 50
    assert report.ulp_histogram == {}


def test_compare_bf16_ulp_histogram():
    a = bf16([1.0, 2.0, -1.0, 0.0])
    b = a.copy()
    b[1] += 1
    b[2] += 3
    report = compare(a, b)
    assert report.ulp_histogram == {0: 2, 1: 1, 3: 1}


def test_signed_zeros_are_zero_ulps_apart():
    report = compare(np.array([0x0000], dtype=np.uint16), np.array([0x8000], dtype=np.uint16))
    assert report.ulp_histogram == {0: 1}


def test_compare_mixed_and_degenerate():
    bits = bf16([0.5, 1.5])
    report = compare(bits, np.array([0.5, 1.5]))
    assert report.rmse == 0
    assert compare(np.zeros(3), np.ones(3)).cosine == 0.0
    assert compare(np.zeros(0), np.zeros(0)).count == 0
    with pytest.raises(ValueError):
        compare(np.zeros(3), np.zeros(4))


def test_relative_rmse():
    ref = np.array([3.0, 4.0])
    report = compare(ref + 0.1, ref)
    assert report.relative_rmse(ref) == pytest.approx(0.1 / np.sqrt(12.5))
    assert compare(np.zeros(2), np.zeros(2)).relative_rmse(np.zeros(2)) == 0.0


def test_report_to_dict():
    d = compare(bf16([1.0]), bf16([1.0])).to_dict()
    assert d["ulp_histogram"] == {"0": 1}
    assert set(d) == {"rmse", "max_abs", "cosine", "count", "ulp_histogram"}


def test_ref_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        RefTensor(np.array([1.0, np.nan]))
    assert RefTensor([[1, 2]]).shape == (1, 2)


def test_activation_references():
    assert gelu_exact(0.0) == 0.0
    x = np.linspace(-4, 4, 101)
    np.testing.assert_allclose(gelu_tanh(x), gelu_exact(x), atol=1e-3)


def test_softmax_reference(rng):
    x = rng.normal(0, 1, (6, 6))
    np.testing.assert_allclose(softmax(x).sum(axis=-1), 1.0)
    p = softmax(x, causal=True)
    assert np.all(p[np.triu_indices(6, k=1)] == 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)


def test_norm_references(rng):
    x = rng.normal(3, 2, (5, 32))
    y = layernorm(x, np.ones(32), np.zeros(32))
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-9)
    np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-3)
    r = rmsnorm(x, np.ones(32))
    np.testing.assert_allclose(np.sqrt(np.mean(r * r, axis=-1)), 1, atol=1e-3)


@pytest.mark.parametrize("variant", ["encoder", "decoder", "swiglu"])
def test_ref_block_captures_every_stage(variant):
    cfg = TinyModelConfig(variant=variant)
    weights = make_block_weights(cfg, seed=3)
    x = make_input(cfg, seed=3)
    cap = {}
    out = ref_block(x, weights, variant, capture=cap)
    assert out.shape == (cfg.seq, cfg.hidden)
    for tag in ("ln1", "q0", "k1", "s0", "p1", "o0", "proj1", "x1", "ln2", "ffn1", "act", "ffn2", "out"):
        assert tag in cap
    assert ("gate" in cap) == (variant == "swiglu")
    np.testing.assert_allclose(cap["out"], out.data)
    np.testing.assert_allclose(cap["out"], cap["x1"] + cap["ffn2"])
    if variant != "encoder":
        assert np.all(cap["p0"][np.triu_indices(cfg.seq, k=1)] == 0)


def test_ref_block_errors():
    cfg = TinyModelConfig()
    weights = make_block_weights(cfg)
    with pytest.raises(ValueError):
        ref_block(make_input(cfg), weights, "mixer")
    with pytest.raises(GraphError):
        ref_block(np.zeros((4, cfg.hidden + 1)), weights)


def test_bf16_inputs_roundtrip_through_reference(rng):
    x = bf16(rng.normal(0, 1, 8))
    assert compare(x, bfarith.to_float(x)).max_abs == 0
