import numpy as np
import pytest

from tataa import bfarith
from tataa.chains import causal_mask
from tataa.compiler import LoweredProgram, compile_graph, partition_cores, validate_program
from tataa.config import MachineConfig
from tataa.errors import CompileError, GraphError
from tataa.graph import parse_and_infer
from tataa.isa import SLOT_SEG, Instruction, Opcode, config as config_ins, decode, vx
from tataa.machine import run
from tataa.quantize import QuantParams, bf16_to_int8, dequantize_to_bf16, requantize
from tataa.refmodel import golden_chain

from .conftest import bf16


def _structure(words):
    """Instruction stream with addresses and segment switches dropped."""
    out = []
    for ins in map(decode, words):
        if ins.op == Opcode.CONFIG and ins.dst == SLOT_SEG:
            continue
        out.append((ins.op, ins.dst, ins.src_a, ins.src_b, ins.length, ins.flags))
    return out


def _vector_graph(op, rows, cols, attrs=None, batch=1):
    tensors = {"x": {"shape": [rows, cols], "format": "bf16", "kind": "input"}}
    inputs = ["x"]
    if op in ("add", "swiglu"):
        tensors["y"] = {"shape": [rows, cols], "format": "bf16", "kind": "input"}
        inputs.append("y")
    elif op in ("layernorm", "rmsnorm"):
        tensors["gamma"] = {"shape": [cols], "format": "bf16", "kind": "weight"}
        inputs.append("gamma")
        if op == "layernorm":
            tensors["beta"] = {"shape": [cols], "format": "bf16", "kind": "weight"}
            inputs.append("beta")
    node = {"id": "out", "op": op, "inputs": inputs}
    if attrs:
        node["attrs"] = attrs
    return {"name": op, "batch": batch, "tensors": tensors, "nodes": [node]}


def _vector_data(op, rows, cols, rng):
    data = {"x": bf16(rng.normal(0, 1.5, (rows, cols)))}
    if op in ("add", "swiglu"):
        data["y"] = bf16(rng.normal(0, 1.5, (rows, cols)))
    if op in ("layernorm", "rmsnorm"):
        data["gamma"] = bf16(rng.uniform(0.5, 1.5, cols))
        data["beta"] = bf16(rng.normal(0, 0.2, cols))
    return data


def _golden(doc, data, config, node="out"):
    chain = parse_and_infer(doc, config.arith(), config.vregs).node(node).chain
    inputs = dict(data)
    if doc["nodes"][0].get("attrs", {}).get("causal"):
        rows, cols = doc["tensors"]["x"]["shape"]
        inputs["mask"] = causal_mask(rows, cols)
    return golden_chain(chain, inputs, config.arith())


def _compile_and_run(doc, config, data):
    lowered = compile_graph(doc, config, data)
    result = run(lowered.programs, lowered.memory, config)
    return lowered, result


@pytest.mark.parametrize(
    "op, rows, cols, attrs",
    [
        ("softmax", 100, 33, None),
        ("softmax", 40, 40, {"causal": True}),
        ("layernorm", 130, 64, None),
        ("layernorm", 20, 6, None),
        ("rmsnorm", 64, 48, None),
        ("gelu", 150, 5, None),
        ("silu", 32, 32, None),
        ("relu", 16, 7, None),
        ("add", 100, 9, None),
        ("swiglu", 60, 17, None),
    ],
)
def test_vector_ops_match_golden_chain(op, rows, cols, attrs, config, rng):
    doc = _vector_graph(op, rows, cols, attrs)
    data = _vector_data(op, rows, cols, rng)
    lowered, result = _compile_and_run(doc, config, data)
    got = lowered.read_output(result.memory, "out")
    assert got.shape == (rows, cols)
    np.testing.assert_array_equal(got, _golden(doc, data, config))


def test_exp_lut_config_flows_to_device_and_golden(rng):
    config = MachineConfig(cores=1, exp_lut=True)
    doc = _vector_graph("softmax", 24, 12)
    data = _vector_data("softmax", 24, 12, rng)
    lowered, result = _compile_and_run(doc, config, data)
    np.testing.assert_array_equal(lowered.read_output(result.memory, "out"), _golden(doc, data, config))


def _matmul_doc(m, k, n, b_kind="input", out="dequantize", transpose=False):
    b_shape = [n, k] if transpose else [k, n]
    nodes = []
    b = "b"
    if transpose:
        nodes.append({"id": "b_t", "op": "transpose", "inputs": ["b"]})
        b = "b_t"
    nodes.append({"id": "y", "op": "matmul", "inputs": ["a", b]})
    nodes.append({"id": "y_out", "op": out, "inputs": ["y"]})
    quant = {"a": 0.5, "b": 0.25}
    if out == "quantize":
        quant["y_out"] = 4.0
    return {
        "tensors": {
            "a": {"shape": [m, k], "format": "int8", "kind": "input"},
            "b": {"shape": b_shape, "format": "int8", "kind": b_kind},
        },
        "quant": quant,
        "nodes": nodes,
    }


def _int8(rng, shape):
    return rng.integers(-127, 128, shape).astype(np.int8)


@pytest.mark.parametrize("b_kind", ["input", "weight"])
@pytest.mark.parametrize("m, k, n", [(40, 70, 50), (32, 32, 32), (5, 100, 64)])
def test_matmul_dequantized_output(m, k, n, b_kind, rng):
    config = MachineConfig(cores=1, acc_bits=32)
    a, b = _int8(rng, (m, k)), _int8(rng, (k, n))
    lowered, result = _compile_and_run(_matmul_doc(m, k, n, b_kind), config, {"a": a, "b": b})
    acc = a.astype(np.int64) @ b.astype(np.int64)
    np.testing.assert_array_equal(lowered.read_output(result.memory, "y_out"), dequantize_to_bf16(acc, 0.5, 0.25))


@pytest.mark.parametrize("b_kind", ["input", "weight"])
def test_matmul_requantized_output(b_kind, rng):
    config = MachineConfig(cores=1, acc_bits=32)
    a, b = _int8(rng, (48, 64)), _int8(rng, (64, 40))
    lowered, result = _compile_and_run(_matmul_doc(48, 64, 40, b_kind, out="quantize"), config, {"a": a, "b": b})
    acc = a.astype(np.int64) @ b.astype(np.int64)
    want = requantize(acc, QuantParams(0.5, 0.25, 4.0))
    np.testing.assert_array_equal(lowered.read_output(result.memory, "y_out"), want)


def test_matmul_with_transposed_operand(rng):
    config = MachineConfig(cores=1, acc_bits=32)
    q, k = _int8(rng, (40, 32)), _int8(rng, (24, 32))
    lowered, result = _compile_and_run(_matmul_doc(40, 32, 24, transpose=True), config, {"a": q, "b": k})
    acc = q.astype(np.int64) @ k.astype(np.int64).T
    np.testing.assert_array_equal(lowered.read_output(result.memory, "y_out"), dequantize_to_bf16(acc, 0.5, 0.25))


def test_long_k_accumulates_across_chunks(rng):
    config = MachineConfig(cores=1, acc_bits=32, d_mat=64, d_fpv=32)
    a, b = _int8(rng, (32, 200)), _int8(rng, (200, 32))
    lowered, result = _compile_and_run(_matmul_doc(32, 200, 32), config, {"a": a, "b": b})
    assert lowered.stats["matmul_steps"] == 4
    acc = a.astype(np.int64) @ b.astype(np.int64)
    np.testing.assert_array_equal(lowered.read_output(result.memory, "y_out"), dequantize_to_bf16(acc, 0.5, 0.25))


def test_vector_op_with_int8_output(config, rng):
    doc = {
        "tensors": {"x": {"shape": [150, 40], "format": "bf16", "kind": "input"}},
        "quant": {"g_q": 0.02},
        "nodes": [
            {"id": "g", "op": "gelu", "inputs": ["x"]},
            {"id": "g_q", "op": "quantize", "inputs": ["g"]},
        ],
    }
    x = bf16(rng.normal(0, 1, (150, 40)))
    lowered, result = _compile_and_run(doc, config, {"x": x})
    got = lowered.read_output(result.memory, "g_q")
    assert got.dtype == np.int8
    np.testing.assert_array_equal(got, bf16_to_int8(bfarith.gelu(x), 0.02))


def test_elementwise_consumer_reuses_producer_storage(rng):
    config = MachineConfig(cores=1, acc_bits=32)
    doc = {
        "tensors": {
            "a": {"shape": [32, 64], "format": "int8", "kind": "input"},
            "w": {"shape": [64, 48], "format": "int8", "kind": "weight"},
        },
        "quant": {"a": 0.5, "w": 0.0625},
        "nodes": [
            {"id": "y", "op": "matmul", "inputs": ["a", "w"]},
            {"id": "y_bf", "op": "dequantize", "inputs": ["y"]},
            {"id": "g", "op": "gelu", "inputs": ["y_bf"]},
        ],
    }
    a, w = _int8(rng, (32, 64)), _int8(rng, (64, 48))
    lowered, result = _compile_and_run(doc, config, {"a": a, "w": w})
    tensors = lowered.manifest.tensors
    assert tensors["g:vblk#0"].offset == tensors["y:vblk#0"].offset
    y_bf = dequantize_to_bf16(a.astype(np.int64) @ w.astype(np.int64), 0.5, 0.0625)
    np.testing.assert_array_equal(lowered.read_output(result.memory, "g"), bfarith.gelu(y_bf))


def test_batch_items_spread_over_cores(rng):
    config = MachineConfig(cores=2)
    doc = _vector_graph("gelu", 20, 6, batch=3)
    x = bf16(rng.normal(0, 1, (3, 20, 6)))
    lowered, result = _compile_and_run(doc, config, {"x": x})
    assert len(lowered.programs) == 2
    for item in range(3):
        np.testing.assert_array_equal(lowered.read_output(result.memory, "out", item), bfarith.gelu(x[item]))
    assert _structure(lowered.programs[0]) != _structure(lowered.programs[1])


def test_idle_cores_only_halt(rng):
    config = MachineConfig(cores=3)
    lowered = compile_graph(_vector_graph("relu", 8, 2), config)
    for words in lowered.programs[1:]:
        assert [decode(w).op for w in words] == [Opcode.HALT]


def test_partition_cores():
    assert partition_cores(5, 2) == [[0, 2, 4], [1, 3]]
    assert partition_cores(1, 3) == [[0], [], []]
    with pytest.raises(CompileError):
        partition_cores(0, 2)


def test_compilation_is_deterministic(config, rng):
    doc = _vector_graph("layernorm", 40, 64)
    data = _vector_data("layernorm", 40, 64, rng)
    first, second = compile_graph(doc, config, data), compile_graph(doc, config, data)
    assert first.programs == second.programs
    assert first.memory == second.memory
    assert first.stats == second.stats


def test_save_and_load(tmp_path, config, rng):
    doc = _vector_graph("silu", 16, 4)
    data = _vector_data("silu", 16, 4, rng)
    lowered = compile_graph(doc, config, data)
    lowered.save(tmp_path / "out")
    for name in ("program_core0.bin", "manifest.json", "memory.bin", "config.json", "stats.json"):
        assert (tmp_path / "out" / name).exists()
    loaded = LoweredProgram.load(tmp_path / "out")
    assert loaded.programs == lowered.programs
    assert loaded.memory == lowered.memory
    assert loaded.config == lowered.config
    result = run(loaded.programs, loaded.memory, loaded.config)
    np.testing.assert_array_equal(loaded.read_output(result.memory, "out"), bfarith.silu(data["x"]))


def test_write_input_rejects_wrong_shape(config):
    lowered = compile_graph(_matmul_doc(8, 8, 8), config)
    with pytest.raises(CompileError):
        lowered.write_input(lowered.memory, "a", np.zeros((4, 4), dtype=np.int8))


def test_float_inputs_are_quantized_on_write(config):
    lowered = compile_graph(_matmul_doc(8, 8, 8), config)
    lowered.write_input(lowered.memory, "a", np.full((8, 8), 1.2))
    stored = lowered.manifest.read_tensor(lowered.memory, "a:rowblk#0")
    assert np.all(stored == 2)


def test_validate_program():
    validate_program([config_ins(0, 0x3F80), Instruction(Opcode.HALT)])
    with pytest.raises(CompileError, match="before it is written"):
        validate_program([Instruction(Opcode.MUL_V, vx(1), vx(0), vx(0), 8), Instruction(Opcode.HALT)])
    with pytest.raises(CompileError, match="HALT"):
        validate_program([Instruction(Opcode.LOAD_V, vx(0), length=8)])
    with pytest.raises(CompileError, match="HALT before"):
        validate_program([Instruction(Opcode.HALT), Instruction(Opcode.HALT)])


def test_too_many_constants():
    config = MachineConfig(cores=1, const_regs=2)
    with pytest.raises(CompileError, match="constant"):
        compile_graph(_vector_graph("gelu", 8, 2), config)


def test_graph_larger_than_memory():
    config = MachineConfig(cores=1, mem_words=64)
    with pytest.raises(CompileError, match="memory"):
        compile_graph(_vector_graph("relu", 256, 16), config)


def test_unfusable_graph_is_a_graph_error(config):
    doc = {
        "tensors": {
            "x": {"shape": [8, 8], "format": "bf16", "kind": "input"},
            "w": {"shape": [8, 8], "format": "int8", "kind": "weight"},
        },
        "quant": {"x_q": 0.1, "w": 0.1},
        "nodes": [
            {"id": "x_q", "op": "quantize", "inputs": ["x"]},
            {"id": "y", "op": "matmul", "inputs": ["x_q", "w"]},
            {"id": "y_bf", "op": "dequantize", "inputs": ["y"]},
        ],
    }
    with pytest.raises(GraphError):
        compile_graph(doc, config)
