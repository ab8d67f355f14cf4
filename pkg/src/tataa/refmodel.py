"""Golden references: 64-bit transformer block, bit-exact chain replay, error metrics."""

from dataclasses import dataclass, field
from math import erf

import numpy as np

from . import bfarith
from .bfarith import ArithConfig, DEFAULT_ARITH
from .chains import Chain, Const
from .errors import GraphError
from .isa import AppFunc

VARIANTS = ("encoder", "decoder", "swiglu")


@dataclass
class RefTensor:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("reference tensor has non-finite elements")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class ErrorReport:
    rmse: float
    max_abs: float
    cosine: float
    count: int
    ulp_histogram: dict[int, int] = field(default_factory=dict)

    def relative_rmse(self, reference) -> float:
        rms = float(np.sqrt(np.mean(np.square(np.asarray(reference, dtype=np.float64)))))
        if rms == 0:
            return float("inf") if self.rmse else 0.0
        return self.rmse / rms

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "max_abs": self.max_abs,
            "cosine": self.cosine,
            "count": self.count,
            "ulp_histogram": {str(k): v for k, v in sorted(self.ulp_histogram.items())},
        }


def _ordered(bits: np.ndarray) -> np.ndarray:
    """Map bf16 patterns onto a monotonic integer line (-0 and +0 coincide)."""
    b = bits.astype(np.int64)
    return np.where(b & 0x8000, -(b & 0x7FFF), b)


def compare(a, b) -> ErrorReport:
    """Error metrics of ``a`` against ``b``.

    uint16 inputs are taken as bf16 bit patterns; when both are, a histogram of
    ULP distances is included.
    """
    a_arr, b_arr = np.asarray(a), np.asarray(b)
    both_bf16 = a_arr.dtype == np.uint16 and b_arr.dtype == np.uint16
    av = bfarith.to_float(a_arr) if a_arr.dtype == np.uint16 else a_arr.astype(np.float64)
    bv = bfarith.to_float(b_arr) if b_arr.dtype == np.uint16 else b_arr.astype(np.float64)
    av = np.asarray(av, dtype=np.float64).reshape(-1)
    bv = np.asarray(bv, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch {a_arr.shape} vs {b_arr.shape}")
    if av.size == 0:
        return ErrorReport(0.0, 0.0, 1.0, 0)
    diff = av - bv
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0 and nb == 0:
        cosine = 1.0
    elif na == 0 or nb == 0:
        cosine = 0.0
    else:
        cosine = float(np.clip(np.dot(av, bv) / (na * nb), -1.0, 1.0))
    hist = {}
    if both_bf16:
        ulps = np.abs(_ordered(a_arr.reshape(-1)) - _ordered(b_arr.reshape(-1)))
        values, counts = np.unique(ulps, return_counts=True)
        hist = {int(v): int(c) for v, c in zip(values, counts)}
    return ErrorReport(
        rmse=float(np.sqrt(np.mean(diff * diff))),
        max_abs=float(np.max(np.abs(diff))),
        cosine=cosine,
        count=int(av.size),
        ulp_histogram=hist,
    )


# Bit-exact replay of compiled chains


def golden_chain(chain: Chain, inputs: dict, arith: ArithConfig = DEFAULT_ARITH) -> np.ndarray:
    """Apply a chain's steps with bfarith in program order.

    ``inputs`` maps roles to bf16 patterns: ``[rows, columns]`` for loaded roles
    (x, y, mask) and ``[columns]`` for broadcast ones (gamma, beta). Returns the
    ``[rows, columns]`` output.
    """
    x = np.asarray(inputs["x"], dtype=np.uint16)
    rows = x.shape[0]
    out = np.zeros((rows, chain.columns), dtype=np.uint16)
    values: dict[int, np.ndarray] = {}

    def operand(b):
        if isinstance(b, Const):
            return np.full(rows, b.bits, dtype=np.uint16)
        return values[b]

    for step in chain.steps:
        if step.kind == "load":
            values[step.out] = np.asarray(inputs[step.role], dtype=np.uint16)[:, step.col]
        elif step.kind == "bcast":
            value = np.asarray(inputs[step.role], dtype=np.uint16)[step.col]
            values[step.out] = np.full(rows, value, dtype=np.uint16)
        elif step.kind == "mul":
            values[step.out] = np.atleast_1d(bfarith.fpmul(values[step.a], operand(step.b)))
        elif step.kind == "add":
            values[step.out] = np.atleast_1d(bfarith.fpadd(values[step.a], operand(step.b), arith))
        elif step.kind == "app":
            a = values[step.a]
            if step.func == AppFunc.ISQRT:
                r = bfarith.fpapp(a, raw=step.raw, cfg=arith)
            elif step.func == AppFunc.POW2:
                r = bfarith.exp2_floor(a, arith)
            elif step.func == AppFunc.CLAMP:
                r = bfarith.clamp_unit(a)
            else:
                r = bfarith.relu(a)
            values[step.out] = np.atleast_1d(r)
        elif step.kind == "store":
            out[:, step.col] = values[step.a]
    return out


# 64-bit reference block


def gelu_exact(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.vectorize(erf)(x / np.sqrt(2.0)))


def gelu_tanh(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def swiglu(a, z):
    """(a * sigmoid(a)) * (a * sigmoid(z)) with z from the gate projection."""
    return silu(a) * (np.asarray(a, dtype=np.float64) * sigmoid(z))


def softmax(x, causal: bool = False):
    x = np.asarray(x, dtype=np.float64)
    if causal:
        rows, cols = x.shape[-2:]
        x = np.where(np.triu(np.ones((rows, cols), dtype=bool), k=1), -np.inf, x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layernorm(x, gamma, beta, eps: float = 1e-5):
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def rmsnorm(x, gamma, eps: float = 1e-6):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gamma


def ref_block(x, weights: dict, variant: str = "encoder", capture: dict | None = None) -> RefTensor:
    """Pre-norm attention block plus MLP, both with residuals, in 64-bit reals.

    ``weights`` holds ``wq``/``wk``/``wv`` as ``[heads, hidden, d_head]``, ``wo`` as
    ``[heads, d_head, hidden]``, ``w1``/``w2`` (and ``wg`` for swiglu) and the norm
    parameters ``g1``/``b1``/``g2``/``b2``. When ``capture`` is a dict every
    intermediate lands in it under the tensor names the block graph uses.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    x = np.asarray(x, dtype=np.float64)
    wq, wk, wv, wo = (np.asarray(weights[k], dtype=np.float64) for k in ("wq", "wk", "wv", "wo"))
    heads, hidden, dh = wq.shape
    if x.ndim != 2 or x.shape[1] != hidden:
        raise GraphError(f"input shape {x.shape} does not match hidden size {hidden}")
    cap = capture if capture is not None else {}
    causal = variant != "encoder"

    def norm(v, g, b, tag):
        if variant == "encoder":
            out = layernorm(v, weights[g], weights[b])
        else:
            out = rmsnorm(v, weights[g])
        cap[tag] = out
        return out

    h = norm(x, "g1", "b1", "ln1")
    attn = np.zeros_like(x)
    for i in range(heads):
        q, k, v = h @ wq[i], h @ wk[i], h @ wv[i]
        s = q @ k.T / np.sqrt(dh)
        p = softmax(s, causal)
        o = p @ v
        proj = o @ wo[i]
        cap.update({f"q{i}": q, f"k{i}": k, f"v{i}": v, f"s{i}": s, f"p{i}": p, f"o{i}": o, f"proj{i}": proj})
        attn = attn + proj
    x1 = x + attn
    cap["x1"] = x1

    h2 = norm(x1, "g2", "b2", "ln2")
    a = h2 @ np.asarray(weights["w1"], dtype=np.float64)
    cap["ffn1"] = a
    if variant == "encoder":
        act = gelu_exact(a)
    elif variant == "decoder":
        act = silu(a)
    else:
        z = h2 @ np.asarray(weights["wg"], dtype=np.float64)
        cap["gate"] = z
        act = swiglu(a, z)
    cap["act"] = act
    y = act @ np.asarray(weights["w2"], dtype=np.float64)
    cap["ffn2"] = y
    out = x1 + y
    cap["out"] = out
    return RefTensor(out)
