"""Computation-graph IR: JSON parsing, shape inference and conversion fusion.

A graph file looks like::

    {
      "name": "block",
      "batch": 1,
      "tensors": {"x": {"shape": [16, 64], "format": "bf16", "kind": "input"},
                  "w": {"shape": [64, 64], "format": "int8", "kind": "weight", "data_ref": "w.npy"}},
      "quant": {"x_q": 0.02, "w": 0.004},
      "nodes": [{"id": "x_q", "op": "quantize", "inputs": ["x"]},
                {"id": "y", "op": "matmul", "inputs": ["x_q", "w"]}],
      "outputs": ["y_bf"]
    }

Logical activations are ``[tokens, features]``. A node's output tensor is
named after the node. ``int8`` tensors carry a scale from ``quant``; matmul
outputs are ``acc`` (the wide accumulator) until a quantize or dequantize
node converts them.
"""

import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

from .bfarith import ArithConfig, DEFAULT_ARITH
from .chains import ELEMENTWISE_OPS, NONLINEAR_OPS, SINGLE_PASS_COLUMNS, Chain, build_chain
from .errors import GraphError
from .logging_config import get_logger
from .memory import Layout

logger = get_logger("graph")

CONVERSION_OPS = ("quantize", "dequantize", "transpose")
OPS = ("matmul",) + NONLINEAR_OPS + CONVERSION_OPS
FORMATS = ("int8", "bf16", "acc")
KINDS = ("input", "weight", "const", "activation")

_ARITY = {"layernorm": 3, "rmsnorm": 2, "add": 2, "swiglu": 2, "matmul": 2}


@dataclass
class TensorSpec:
    name: str
    shape: list[int]
    format: str
    kind: str = "activation"
    scale: float | None = None
    data: np.ndarray | None = None


@dataclass
class Node:
    id: str
    op: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    shape: list[int] = field(default_factory=list)
    format: str = "bf16"
    chain: Chain | None = None
    stores: list["View"] = field(default_factory=list)


@dataclass
class Graph:
    name: str
    tensors: dict[str, TensorSpec]
    nodes: list[Node]
    outputs: list[str]
    batch: int = 1

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer(self, tensor: str) -> Node | None:
        return next((n for n in self.nodes if n.id == tensor), None)

    def consumers(self, tensor: str) -> list[Node]:
        return [n for n in self.nodes if tensor in n.inputs]


def _load_data(spec: dict, base_dir: Path | None) -> np.ndarray | None:
    if "data" in spec:
        return np.asarray(spec["data"])
    if "data_ref" in spec:
        path = Path(spec["data_ref"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return np.load(path)
    return None


def load_graph_source(source) -> tuple[dict, Path | None]:
    """Accept a path, JSON text or an already-decoded dict."""
    if isinstance(source, dict):
        return source, None
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        path = Path(source)
        try:
            return json.loads(path.read_text()), path.parent
        except json.JSONDecodeError as e:
            raise GraphError(f"{path}: invalid JSON ({e})") from e
    try:
        return json.loads(source), None
    except json.JSONDecodeError as e:
        raise GraphError(f"invalid graph JSON ({e})") from e


def _require(cond: bool, message: str, node_id: str | None = None) -> None:
    if not cond:
        raise GraphError(message, node_id)


def _infer(node: Node, tensors: dict[str, TensorSpec], quant: dict[str, float]) -> None:
    ins = [tensors[name] for name in node.inputs]
    arity = _ARITY.get(node.op, 1)
    _require(len(ins) == arity, f"{node.op} takes {arity} input(s), got {len(ins)}", node.id)

    if node.op == "matmul":
        a, b = ins
        _require(len(a.shape) == 2 and len(b.shape) == 2, "matmul operands must be 2-D", node.id)
        _require(a.shape[1] == b.shape[0], f"shape mismatch {a.shape} x {b.shape}", node.id)
        _require(a.format == "int8" and b.format == "int8", "matmul operands must be int8", node.id)
        node.shape, node.format = [a.shape[0], b.shape[1]], "acc"
    elif node.op == "transpose":
        (a,) = ins
        _require(len(a.shape) == 2, "transpose needs a 2-D tensor", node.id)
        node.shape, node.format = [a.shape[1], a.shape[0]], a.format
    elif node.op == "quantize":
        (a,) = ins
        _require(a.format in ("acc", "bf16"), f"cannot quantize a {a.format} tensor", node.id)
        _require(node.id in quant, "quantize output has no scale in 'quant'", node.id)
        node.shape, node.format = list(a.shape), "int8"
    elif node.op == "dequantize":
        (a,) = ins
        _require(a.format == "acc", f"dequantize expects an accumulator, got {a.format}", node.id)
        node.shape, node.format = list(a.shape), "bf16"
    else:
        x = ins[0]
        _require(len(x.shape) == 2, f"{node.op} needs a [tokens, features] input", node.id)
        if node.op in ("layernorm", "rmsnorm"):
            for p in ins[1:]:
                _require(p.shape == [x.shape[1]], f"{p.name} must have shape [{x.shape[1]}]", node.id)
        elif arity == 2:
            _require(ins[1].shape == x.shape, f"shape mismatch {x.shape} vs {ins[1].shape}", node.id)
        for t in ins:
            _require(t.format == "bf16", f"{node.op} input {t.name} must be bf16, got {t.format}", node.id)
        node.shape, node.format = list(x.shape), "bf16"


def parse_and_infer(
    source,
    arith: ArithConfig = DEFAULT_ARITH,
    resident: int = SINGLE_PASS_COLUMNS,
) -> Graph:
    """Parse a graph, infer every shape and expand non-linear nodes into chains."""
    data, base_dir = load_graph_source(source)
    try:
        tensor_specs = data.get("tensors", {})
        quant = {k: float(v) for k, v in data.get("quant", {}).items()}
        raw_nodes = data.get("nodes", [])
    except AttributeError as e:
        raise GraphError(f"malformed graph ({e})") from e

    tensors: dict[str, TensorSpec] = {}
    for name, spec in tensor_specs.items():
        fmt = spec.get("format", "bf16")
        kind = spec.get("kind", "input")
        _require(fmt in ("int8", "bf16"), f"tensor {name!r}: unknown format {fmt!r}")
        _require(kind in KINDS, f"tensor {name!r}: unknown kind {kind!r}")
        shape = [int(d) for d in spec.get("shape", [])]
        _require(all(d >= 0 for d in shape), f"tensor {name!r}: negative dimension")
        scale = quant.get(name, spec.get("scale"))
        if fmt == "int8":
            _require(scale is not None and scale > 0, f"int8 tensor {name!r} has no positive scale")
        tensors[name] = TensorSpec(name, shape, fmt, kind, scale, _load_data(spec, base_dir))

    nodes: dict[str, Node] = {}
    for raw in raw_nodes:
        node_id = str(raw.get("id", ""))
        _require(bool(node_id), "node without id")
        _require(node_id not in nodes and node_id not in tensors, f"duplicate name {node_id!r}", node_id)
        op = raw.get("op")
        _require(op in OPS, f"unknown op {op!r}", node_id)
        nodes[node_id] = Node(node_id, op, [str(i) for i in raw.get("inputs", [])], dict(raw.get("attrs", {})))

    deps = {}
    for node in nodes.values():
        for name in node.inputs:
            _require(name in tensors or name in nodes, f"unknown input {name!r}", node.id)
        deps[node.id] = [i for i in node.inputs if i in nodes]
    try:
        order = list(TopologicalSorter(deps).static_order())
    except CycleError as e:
        raise GraphError(f"graph has a cycle through {e.args[1]}") from e

    ordered = []
    for node_id in order:
        node = nodes[node_id]
        _infer(node, tensors, quant)
        tensors[node.id] = TensorSpec(node.id, node.shape, node.format, "activation", quant.get(node.id))
        if node.op in NONLINEAR_OPS:
            node.chain = build_chain(node.op, node.shape[1], node.attrs, arith, resident)
        ordered.append(node)

    consumed = {i for n in ordered for i in n.inputs}
    outputs = [str(o) for o in data.get("outputs", [])] or [n.id for n in ordered if n.id not in consumed]
    for name in outputs:
        _require(name in tensors, f"unknown graph output {name!r}")
    batch = int(data.get("batch", 1))
    _require(batch >= 1, "batch must be >= 1")
    logger.debug("Parsed graph %r: %d tensors, %d nodes", data.get("name", ""), len(tensors), len(ordered))
    return Graph(str(data.get("name", "graph")), tensors, ordered, outputs, batch)


# Fusion


@dataclass(frozen=True)
class View:
    """A physical copy of a tensor in memory."""

    tensor: str
    layout: Layout
    dtype: str  # "int8" or "bf16"
    scale: float | None = None

    @property
    def key(self) -> str:
        return f"{self.tensor}:{self.layout.value}"


@dataclass(frozen=True)
class Alias:
    """A logical tensor expressed through the storage of ``base``."""

    base: str
    transposed: bool
    dtype: str
    scale: float | None


@dataclass
class FusedGraph:
    graph: Graph
    nodes: list[Node]  # compute nodes only
    aliases: dict[str, Alias]
    views: dict[str, list[View]]  # base tensor -> physical copies

    def view(self, tensor: str, layout: Layout) -> View:
        base = self.aliases[tensor].base
        for v in self.views.get(base, []):
            if v.layout == layout:
                return v
        raise KeyError(f"{base}:{layout.value}")

    def operand_view(self, tensor: str, layout: Layout) -> View:
        """The stored copy that reads as ``tensor`` in ``layout``."""
        alias = self.aliases[tensor]
        return self.view(tensor, _flip(layout) if alias.transposed else layout)


def _flip(layout: Layout) -> Layout:
    return {Layout.ROW: Layout.COL, Layout.COL: Layout.ROW}.get(layout, layout)


def _resolve(g: Graph, name: str, cache: dict[str, Alias]) -> Alias:
    if name in cache:
        return cache[name]
    node = g.producer(name)
    spec = g.tensors[name]
    if node is None or node.op not in CONVERSION_OPS:
        alias = Alias(name, False, spec.format, spec.scale)
    else:
        inner = _resolve(g, node.inputs[0], cache)
        if node.op == "transpose":
            alias = Alias(inner.base, not inner.transposed, inner.dtype, inner.scale)
        else:
            if g.producer(inner.base) is None:
                raise GraphError(f"{node.op} of graph tensor {inner.base!r} is unfusable: no producing node", node.id)
            dtype = "int8" if node.op == "quantize" else "bf16"
            alias = Alias(inner.base, inner.transposed, dtype, spec.scale if dtype == "int8" else None)
    cache[name] = alias
    return alias


def fuse(g: Graph) -> FusedGraph:
    """Absorb quantize/dequantize/transpose into the stores of their producers.

    Every consumer then reads a physical *view* of a producing node's (or graph
    input's) storage: int8 ``rowblk``/``colblk`` for matmul operands, bf16
    ``vblk`` for vector chains and ``bcast`` for norm parameters.
    """
    aliases: dict[str, Alias] = {}
    for name in g.tensors:
        _resolve(g, name, aliases)
    views: dict[str, dict[Layout, View]] = {}

    def need(tensor: str, layout: Layout, node_id: str | None) -> None:
        alias = aliases[tensor]
        if layout in (Layout.VEC, Layout.BCAST) and alias.transposed:
            raise GraphError(f"transposed bf16 tensor {tensor!r} cannot feed a vector op", node_id)
        physical = _flip(layout) if alias.transposed else layout
        dtype = "int8" if physical in (Layout.ROW, Layout.COL) else "bf16"
        if alias.dtype == "acc":
            raise GraphError(f"accumulator {tensor!r} must be quantized or dequantized first", node_id)
        if dtype != alias.dtype:
            raise GraphError(f"{tensor!r} is {alias.dtype} but a {dtype} view is needed", node_id)
        existing = views.setdefault(alias.base, {}).get(physical)
        if existing is not None and existing.scale != alias.scale:
            raise GraphError(f"{alias.base!r} is stored as {physical.value} with two different scales", node_id)
        views[alias.base][physical] = View(alias.base, physical, dtype, alias.scale)

    compute = [n for n in g.nodes if n.op not in CONVERSION_OPS]
    for node in compute:
        if node.op == "matmul":
            need(node.inputs[0], Layout.ROW, node.id)
            need(node.inputs[1], Layout.COL, node.id)
        elif node.op in ("layernorm", "rmsnorm"):
            need(node.inputs[0], Layout.VEC, node.id)
            for p in node.inputs[1:]:
                need(p, Layout.BCAST, node.id)
        else:
            for t in node.inputs:
                need(t, Layout.VEC, node.id)
    for name in g.outputs:
        alias = aliases[name]
        need(name, Layout.VEC if alias.dtype == "bf16" else Layout.ROW, None)

    result = {base: list(by_layout.values()) for base, by_layout in views.items()}
    for node in compute:
        node.stores = result.get(node.id, [])
        for v in node.stores:
            if node.op in NONLINEAR_OPS and v.layout == Layout.COL:
                raise GraphError("a vector producer cannot write a colblk view; transpose the consumer instead", node.id)
            if node.op == "matmul" and v.layout == Layout.BCAST:
                raise GraphError("matmul results cannot feed norm parameters", node.id)
        if not node.stores:
            logger.warning("Node %r has no consumers and is not an output", node.id)
    logger.debug("Fused %d conversion node(s) into %d compute node(s)", len(g.nodes) - len(compute), len(compute))
    return FusedGraph(g, compute, aliases, result)


def is_elementwise(node: Node) -> bool:
    return node.op in ELEMENTWISE_OPS
