"""Desk-scale model definitions: the tiny test block and the benchmark shapes."""

from dataclasses import dataclass

import numpy as np

from . import bfarith
from .quantize import calibrate_scale, quantize_tensor
from .refmodel import VARIANTS, ref_block

WEIGHT_GAIN = 0.5  # std of a weight is WEIGHT_GAIN / sqrt(fan_in)


@dataclass(frozen=True)
class TinyModelConfig:
    hidden: int = 64
    heads: int = 2
    seq: int = 16
    mlp: int = 256
    variant: str = "encoder"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")

    @property
    def d_head(self) -> int:
        return self.hidden // self.heads


def make_block_weights(cfg: TinyModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Random float64 weights in the layout :func:`tataa.refmodel.ref_block` expects."""
    rng = np.random.default_rng(seed)
    h, dh, m = cfg.hidden, cfg.d_head, cfg.mlp

    def dense(*shape):
        return rng.standard_normal(shape) * (WEIGHT_GAIN / np.sqrt(shape[-2]))

    w = {
        "wq": dense(cfg.heads, h, dh),
        "wk": dense(cfg.heads, h, dh),
        "wv": dense(cfg.heads, h, dh),
        "wo": dense(cfg.heads, dh, h),
        "w1": dense(h, m),
        "w2": dense(m, h),
        "g1": 1.0 + 0.1 * rng.standard_normal(h),
        "b1": 0.1 * rng.standard_normal(h),
        "g2": 1.0 + 0.1 * rng.standard_normal(h),
        "b2": 0.1 * rng.standard_normal(h),
    }
    if cfg.variant == "swiglu":
        w["wg"] = dense(h, m)
    return w


def make_input(cfg: TinyModelConfig, seed: int = 0, batch: int | None = None) -> np.ndarray:
    rng = np.random.default_rng(seed + 10_000)
    shape = (cfg.seq, cfg.hidden) if batch is None else (batch, cfg.seq, cfg.hidden)
    return rng.standard_normal(shape)


def _scale(*arrays) -> float:
    return max(calibrate_scale(a) for a in arrays)


class _GraphBuilder:
    def __init__(self, name: str, batch: int):
        self.doc = {"name": name, "batch": batch, "tensors": {}, "quant": {}, "nodes": [], "outputs": []}
        self.data: dict[str, np.ndarray] = {}

    def tensor(self, name, shape, fmt, kind, data=None, scale=None):
        self.doc["tensors"][name] = {"shape": list(shape), "format": fmt, "kind": kind}
        if scale is not None:
            self.doc["quant"][name] = scale
        if data is not None:
            self.data[name] = data
        return name

    def weight(self, name, w):
        scale = calibrate_scale(w)
        return self.tensor(name, w.shape, "int8", "weight", quantize_tensor(w, scale).data, scale)

    def bf16_param(self, name, v):
        return self.tensor(name, v.shape, "bf16", "weight", bfarith.from_float(v))

    def node(self, node_id, op, inputs, **attrs):
        entry = {"id": node_id, "op": op, "inputs": list(inputs)}
        if attrs:
            entry["attrs"] = attrs
        self.doc["nodes"].append(entry)
        return node_id

    def quantize(self, node_id, source, scale):
        self.doc["quant"][node_id] = scale
        return self.node(node_id, "quantize", [source])


def build_block_graph(
    cfg: TinyModelConfig,
    weights: dict[str, np.ndarray],
    calibration,
    *,
    batch: int = 1,
) -> tuple[dict, dict[str, np.ndarray]]:
    """Graph document and weight data for one pre-norm block.

    Activation scales are calibrated from a 64-bit run of ``calibration`` (one
    ``[seq, hidden]`` input or a stack of them). Heads are expressed one by one
    and their projections summed with ``add``.
    """
    samples = np.asarray(calibration, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    caps = []
    for s in samples:
        cap: dict = {}
        ref_block(s, weights, cfg.variant, capture=cap)
        caps.append(cap)

    def act_scale(tag):
        return _scale(*(c[tag] for c in caps))

    g = _GraphBuilder(f"block-{cfg.variant}", batch)
    t, h, dh = cfg.seq, cfg.hidden, cfg.d_head
    causal = cfg.variant != "encoder"
    x = g.tensor("x", (t, h), "bf16", "input")

    def norm(node_id, source, gk, bk):
        gamma = g.bf16_param(gk, weights[gk])
        if cfg.variant == "encoder":
            beta = g.bf16_param(bk, weights[bk])
            return g.node(node_id, "layernorm", [source, gamma, beta])
        return g.node(node_id, "rmsnorm", [source, gamma])

    ln1 = norm("ln1", x, "g1", "b1")
    ln1_q = g.quantize("ln1_q", ln1, act_scale("ln1"))
    partial = None
    for i in range(cfg.heads):
        q = g.node(f"q{i}", "matmul", [ln1_q, g.weight(f"wq{i}", weights["wq"][i])])
        k = g.node(f"k{i}", "matmul", [ln1_q, g.weight(f"wk{i}", weights["wk"][i])])
        v = g.node(f"v{i}", "matmul", [ln1_q, g.weight(f"wv{i}", weights["wv"][i])])
        q_q = g.quantize(f"q{i}_q", q, act_scale(f"q{i}"))
        k_q = g.quantize(f"k{i}_q", k, act_scale(f"k{i}"))
        v_q = g.quantize(f"v{i}_q", v, act_scale(f"v{i}"))
        k_t = g.node(f"k{i}_t", "transpose", [k_q])
        s = g.node(f"s{i}", "matmul", [q_q, k_t], alpha=1.0 / np.sqrt(dh))
        s_bf = g.node(f"s{i}_bf", "dequantize", [s])
        p = g.node(f"p{i}", "softmax", [s_bf], causal=causal)
        p_q = g.quantize(f"p{i}_q", p, act_scale(f"p{i}"))
        o = g.node(f"o{i}", "matmul", [p_q, v_q])
        o_q = g.quantize(f"o{i}_q", o, act_scale(f"o{i}"))
        proj = g.node(f"proj{i}", "matmul", [o_q, g.weight(f"wo{i}", weights["wo"][i])])
        proj_bf = g.node(f"proj{i}_bf", "dequantize", [proj])
        partial = proj_bf if partial is None else g.node(f"attn{i}", "add", [partial, proj_bf])
    x1 = g.node("x1", "add", [partial, x])

    ln2 = norm("ln2", x1, "g2", "b2")
    ln2_q = g.quantize("ln2_q", ln2, act_scale("ln2"))
    ffn1 = g.node("ffn1", "matmul", [ln2_q, g.weight("w1", weights["w1"])])
    ffn1_bf = g.node("ffn1_bf", "dequantize", [ffn1])
    if cfg.variant == "encoder":
        act = g.node("act", "gelu", [ffn1_bf])
    elif cfg.variant == "decoder":
        act = g.node("act", "silu", [ffn1_bf])
    else:
        gate = g.node("gate", "matmul", [ln2_q, g.weight("wg", weights["wg"])])
        gate_bf = g.node("gate_bf", "dequantize", [gate])
        act = g.node("act", "swiglu", [ffn1_bf, gate_bf])
    act_q = g.quantize("act_q", act, act_scale("act"))
    ffn2 = g.node("ffn2", "matmul", [act_q, g.weight("w2", weights["w2"])])
    ffn2_bf = g.node("ffn2_bf", "dequantize", [ffn2])
    g.node("out", "add", [x1, ffn2_bf])
    g.doc["outputs"] = ["out"]
    return g.doc, g.data


# Benchmark shapes


@dataclass(frozen=True)
class BenchModel:
    name: str
    hidden: int
    heads: int
    seq: int
    mlp: int
    batch: int = 1

    @property
    def d_head(self) -> int:
        return self.hidden // self.heads


BENCH_MODELS = {
    "bert-base": BenchModel("bert-base", 768, 12, 128, 3072, batch=16),
    "tiny": BenchModel("tiny", 64, 2, 16, 256),
    "empty": BenchModel("empty", 0, 1, 0, 0),
}


def _matmul_layer(name, m, k, n, count=1) -> dict:
    g = _GraphBuilder(name, 1)
    for i in range(count):
        a = g.tensor(f"a{i}", (m, k), "int8", "input", scale=1.0)
        b = g.tensor(f"w{i}", (k, n), "int8", "weight", scale=1.0)
        y = g.node(f"y{i}", "matmul", [a, b])
        g.doc["outputs"].append(g.quantize(f"y{i}_q", y, 1.0))
    return g.doc


def _vector_layer(name, op, rows, cols, count=1) -> dict:
    g = _GraphBuilder(name, 1)
    for i in range(count):
        x = g.tensor(f"x{i}", (rows, cols), "bf16", "input")
        inputs = [x]
        if op == "layernorm":
            inputs += [g.tensor(f"g{i}", (cols,), "bf16", "weight"), g.tensor(f"b{i}", (cols,), "bf16", "weight")]
        g.doc["outputs"].append(g.node(f"{op}{i}", op, inputs))
    return g.doc


def bench_layers(model: BenchModel) -> list[tuple[str, str, dict, int]]:
    """(layer, kind, single-layer graph, element count) for one batch item of ``model``.

    ``kind`` is ``"matmul"`` or the non-linear op; element counts are MACs for
    matmuls and processed values for non-linear layers.
    """
    if model.hidden == 0 or model.seq == 0:
        return []
    t, h, dh, m, heads = model.seq, model.hidden, model.d_head, model.mlp, model.heads
    return [
        ("QKV-GEN", "matmul", _matmul_layer("qkv", t, h, 3 * h), t * h * 3 * h),
        ("QK-MUL", "matmul", _matmul_layer("qk", t, dh, t, heads), heads * t * dh * t),
        ("SoftMax", "softmax", _vector_layer("softmax", "softmax", t, t, heads), heads * t * t),
        ("SV-MUL", "matmul", _matmul_layer("sv", t, t, dh, heads), heads * t * t * dh),
        ("ATT-PROJ", "matmul", _matmul_layer("proj", t, h, h), t * h * h),
        ("LayerNorm", "layernorm", _vector_layer("layernorm", "layernorm", t, h), t * h),
        ("FFN1", "matmul", _matmul_layer("ffn1", t, h, m), t * h * m),
        ("GELU", "gelu", _vector_layer("gelu", "gelu", t, m), t * m),
        ("FFN2", "matmul", _matmul_layer("ffn2", t, m, h), t * m * h),
    ]

