import numpy as np
import pytest

from tataa import bfarith
from tataa.chains import (
    MASK_VALUE,
    ChainBuilder,
    Const,
    TreeSum,
    build_chain,
    causal_mask,
)
from tataa.isa import AppFunc
from tataa.refmodel import golden_chain, layernorm, rmsnorm

from .conftest import bf16


def test_softmax_loads_and_constants():
    sm = build_chain("softmax", 8)
    assert sm.loads_of("x") == 8
    assert sm.count("store") == 8
    assert sum(1 for s in sm.steps if s.kind == "app" and s.func == AppFunc.POW2) == 8
    assert bfarith.INV_LN2 in sm.constants()


def test_causal_softmax_adds_mask():
    chain = build_chain("softmax", 6, {"causal": True})
    assert chain.loads_of("mask") == 6


@pytest.mark.parametrize("op", ["layernorm", "rmsnorm"])
def test_norm_loads_x_once_when_row_fits_registers(op):
    assert build_chain(op, 8).loads_of("x") == 8
    assert build_chain(op, 16).loads_of("x") == 32
    assert build_chain(op, 16, resident=16).loads_of("x") == 16


def test_layernorm_broadcasts_parameters():
    chain = build_chain("layernorm", 5)
    assert sum(1 for s in chain.steps if s.kind == "bcast" and s.role == "gamma") == 5
    assert sum(1 for s in chain.steps if s.kind == "bcast" and s.role == "beta") == 5
    assert build_chain("rmsnorm", 5).count("bcast") == 5


def test_unknown_op():
    with pytest.raises(ValueError):
        build_chain("matmul", 4)


def test_tree_sum_uses_n_minus_one_adds():
    for n in (1, 2, 3, 7, 8, 13):
        b = ChainBuilder("softmax", n)
        tree = TreeSum(b)
        for c in range(n):
            tree.push(b.load("x", c))
        tree.result()
        assert b.chain.count("add") == n - 1


def test_constants_are_first_use_ordered():
    b = ChainBuilder("gelu", 1)
    x = b.load("x", 0)
    b.mul(b.add(x, Const(7)), Const(3))
    b.mul(x, Const(7))
    assert b.build().constants() == [7, 3]


@pytest.mark.parametrize(
    "op, reference",
    [
        ("gelu", bfarith.gelu),
        ("silu", bfarith.silu),
        ("relu", bfarith.relu),
    ],
)
def test_elementwise_chain_replays_scalar_kernels(op, reference, rng):
    x = bf16(rng.uniform(-4, 4, (50, 5)))
    out = golden_chain(build_chain(op, 5), {"x": x})
    np.testing.assert_array_equal(out, reference(x))


def test_two_input_chains(rng):
    a = bf16(rng.uniform(-3, 3, (20, 3)))
    z = bf16(rng.uniform(-3, 3, (20, 3)))
    np.testing.assert_array_equal(golden_chain(build_chain("swiglu", 3), {"x": a, "y": z}), bfarith.swiglu(a, z))
    np.testing.assert_array_equal(golden_chain(build_chain("add", 3), {"x": a, "y": z}), bfarith.fpadd(a, z))


def test_softmax_rows_sum_to_one(rng):
    x = bf16(rng.normal(0, 1, (30, 16)))
    out = bfarith.to_float(golden_chain(build_chain("softmax", 16), {"x": x}))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=0.1)
    assert np.all(out >= 0)


def test_causal_softmax_zeroes_future(rng):
    x = bf16(rng.normal(0, 1, (8, 8)))
    chain = build_chain("softmax", 8, {"causal": True})
    out = bfarith.to_float(golden_chain(chain, {"x": x, "mask": causal_mask(8, 8)}))
    assert np.all(out[np.triu_indices(8, k=1)] == 0)
    assert out[0, 0] == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("columns", [8, 64])
def test_norms_close_to_float(columns, rng):
    x = rng.normal(0.5, 2.0, (40, columns))
    gamma, beta = rng.uniform(0.5, 1.5, columns), rng.normal(0, 0.2, columns)
    xb, gb, bb = bf16(x), bf16(gamma), bf16(beta)
    xf, gf, bf = (bfarith.to_float(v) for v in (xb, gb, bb))
    ln = golden_chain(build_chain("layernorm", columns), {"x": xb, "gamma": gb, "beta": bb})
    np.testing.assert_allclose(bfarith.to_float(ln), layernorm(xf, gf, bf), atol=0.1)
    rms = golden_chain(build_chain("rmsnorm", columns), {"x": xb, "gamma": gb})
    np.testing.assert_allclose(bfarith.to_float(rms), rmsnorm(xf, gf), atol=0.1)


def test_causal_mask():
    mask = causal_mask(3, 4)
    assert mask.dtype == np.uint16
    assert mask[0, 0] == 0 and mask[2, 2] == 0
    assert bfarith.to_float(mask[0, 1]) == MASK_VALUE
    assert bfarith.to_float(mask[2, 3]) == MASK_VALUE


def test_long_softmax_rows_recompute_exp():
    chain = build_chain("softmax", 16)
    assert chain.loads_of("x") == 32
    assert sum(1 for s in chain.steps if s.kind == "app" and s.func == AppFunc.POW2) == 32
    assert build_chain("softmax", 16, resident=16).loads_of("x") == 16
    causal = build_chain("softmax", 12, {"causal": True})
    assert causal.loads_of("mask") == 24


@pytest.mark.parametrize("causal", [False, True])
def test_softmax_passes_agree_bit_for_bit(causal, rng):
    x = bf16(rng.normal(0, 2, (24, 16)))
    inputs = {"x": x, "mask": causal_mask(24, 16)} if causal else {"x": x}
    attrs = {"causal": causal}
    two_pass = golden_chain(build_chain("softmax", 16, attrs), inputs)
    one_pass = golden_chain(build_chain("softmax", 16, attrs, resident=16), inputs)
    np.testing.assert_array_equal(two_pass, one_pass)


def test_norm_prefetches_parameters_with_x():
    chain = build_chain("layernorm", 16)
    second = [s for s in chain.steps if s.kind in ("load", "bcast")][16:]
    first_compute = next(i for i, s in enumerate(chain.steps) if s.kind == "store")
    roles = [(s.role, s.col) for s in second[:6]]
    assert roles == [("x", 0), ("gamma", 0), ("beta", 0), ("x", 1), ("gamma", 1), ("beta", 1)]
    # the next group is in flight before the first column is stored
    assert chain.steps.index(second[6]) < first_compute


def test_elementwise_tile_columns_are_interleaved():
    chain = build_chain("relu", 4)
    assert [(s.kind, s.col if s.kind in ("load", "store") else None) for s in chain.steps] == [
        ("load", 0), ("load", 1), ("load", 2), ("load", 3),
        ("app", None), ("app", None), ("store", 0), ("store", 1),
        ("app", None), ("app", None), ("store", 2), ("store", 3),
    ]


def test_interleave_keeps_each_body_in_order():
    b = ChainBuilder("gelu", 2)
    x0, x1 = b.load("x", 0), b.load("x", 1)
    b.interleave([lambda: b.store(b.mul(x0, x0), 0), lambda: b.store(b.add(b.mul(x1, x1), x1), 1)])
    kinds = [s.kind for s in b.chain.steps[2:]]
    assert kinds == ["mul", "mul", "store", "add", "store"]


def test_peak_live_counts_overlapping_values():
    b = ChainBuilder("add", 1)
    x, y = b.load("x", 0), b.load("y", 0)
    s = b.add(x, y)
    b.store(s, 0)
    assert b.chain.peak_live() == 2
    assert build_chain("relu", 4).peak_live() == 4
    assert 0 < build_chain("gelu", 64).peak_live() < 40
