"""Compile pipeline: graph -> fused graph -> per-item schedules -> per-core binaries.

Memory is split into a shared region (weights, norm parameters, masks) and one
equally sized region per batch item (inputs, intermediates, spill scratch).
Every core runs the same per-item program shifted by the item's base address.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bfarith
from .chains import causal_mask
from .config import MachineConfig
from .errors import CompileError
from .graph import FusedGraph, Graph, Node, View, fuse, is_elementwise, parse_and_infer
from .isa import (
    DMB,
    MAX_CONSTS,
    QUANT_SETS,
    SEGMENT_WORDS,
    SLOT_CONST_LAST,
    SLOT_QSET,
    SLOT_SCALE_BASE,
    SLOT_SEG,
    SLOT_STRIDE,
    Instruction,
    Opcode,
    QuantMode,
    config as config_ins,
    creg,
    encode,
    float32_bits,
    read_program,
    reg_name,
    scale_slot,
    write_program,
)
from .logging_config import get_logger
from .memory import (
    BLOCK,
    Allocator,
    Layout,
    Manifest,
    MemoryImage,
    TensorPlacement,
    item_key,
    layout_words,
    pack,
    pad_to,
    vector_words,
)
from .quantize import quantize_tensor
from .schedule import (
    MatmulJob,
    MatmulStats,
    Operand,
    Placed,
    StoreView,
    VectorJob,
    VectorStats,
    VectorStore,
    lower_nonlinear,
    schedule_matmul,
)

logger = get_logger("compiler")

ADDRESS_SPACE_WORDS = 1 << 24


@dataclass
class LoweredProgram:
    programs: list[list[int]]
    manifest: Manifest
    config: MachineConfig
    memory: MemoryImage
    stats: dict = field(default_factory=dict)
    constant_tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def write_input(self, image: MemoryImage, name: str, array, item: int = 0) -> None:
        """Write every physical view of graph tensor ``name`` for one batch item."""
        for p in self._placements_of(name, item):
            image.write(p.offset, _packed(p, array, self.manifest.lanes))

    def read_output(self, image: MemoryImage, name: str, item: int = 0) -> np.ndarray:
        p = self.manifest.placement(name, item)
        return self.manifest.read_tensor(image, p.name)

    def _placements_of(self, name: str, item: int) -> list[TensorPlacement]:
        prefix = f"{name}:"
        found = [
            p for key, p in self.manifest.tensors.items()
            if key.startswith(prefix) and (key.endswith(f"#{item}") or "#" not in key)
        ]
        if not found:
            raise KeyError(name)
        return found

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, words in enumerate(self.programs):
            write_program(out_dir / f"program_core{i}.bin", words)
        self.manifest.save(out_dir / "manifest.json")
        self.memory.save(out_dir / "memory.bin")
        self.config.save(out_dir / "config.json")
        (out_dir / "stats.json").write_text(json.dumps(self.stats, indent=2, sort_keys=True))
        logger.info("Wrote %d program(s), manifest and memory image to %s", len(self.programs), out_dir)

    @classmethod
    def load(cls, out_dir: Path, config: MachineConfig | None = None) -> "LoweredProgram":
        out_dir = Path(out_dir)
        manifest = Manifest.load(out_dir / "manifest.json")
        if config is None:
            config = MachineConfig.load(out_dir / "config.json")
        programs = [read_program(out_dir / f"program_core{i}.bin") for i in range(manifest.cores)]
        memory = MemoryImage.load(out_dir / "memory.bin", manifest.memory_words)
        stats_path = out_dir / "stats.json"
        stats = json.loads(stats_path.read_text()) if stats_path.exists() else {}
        return cls(programs, manifest, config, memory, stats)


def _packed(p: TensorPlacement, array, lanes: int) -> np.ndarray:
    a = np.asarray(array)
    if p.dtype == "bf16" and a.dtype.kind == "f":
        a = bfarith.from_float(a)
    elif p.dtype == "int8" and a.dtype.kind == "f":
        a = quantize_tensor(a, p.scale).data
    if p.dtype == "int8" and p.layout in (Layout.ROW.value, Layout.COL.value) and list(a.shape) != p.shape:
        raise CompileError(f"{p.name}: expected shape {p.shape}, got {list(a.shape)}")
    return pack(Layout(p.layout), a, lanes)


def partition_cores(batch: int, cores: int) -> list[list[int]]:
    """Batch items per core, round robin; cores beyond the batch get nothing."""
    if batch < 1:
        raise CompileError(f"batch must be >= 1, got {batch}")
    return [list(range(c, batch, cores)) for c in range(cores)]


class _QuantSets:
    """Round-robin allocation of the machine's quant-set slots."""

    def __init__(self):
        self.next = 0

    def take(self) -> int:
        q = self.next % QUANT_SETS
        self.next += 1
        return q


@dataclass
class _Layout:
    """Relative addresses of views: shared region, then per-item region."""

    shared: dict[str, int] = field(default_factory=dict)
    item: dict[str, int] = field(default_factory=dict)
    item_base: int = 0
    item_words: int = 0
    scratch: int = 0

    def address(self, key: str, item: int) -> int:
        if key in self.shared:
            return self.shared[key]
        return self.item_base + item * self.item_words + self.item[key]

    def scratch_base(self, item: int) -> int:
        return self.item_base + item * self.item_words + self.scratch


class _Compiler:
    def __init__(self, fg: FusedGraph, config: MachineConfig, double_buffer: bool):
        self.fg = fg
        self.g: Graph = fg.graph
        self.config = config
        self.double_buffer = double_buffer
        self.lanes = config.lanes
        self.masks: dict[str, np.ndarray] = {}
        self.constants: dict[int, int] = {}
        self.mm_stats = MatmulStats()
        self.vec_stats = VectorStats()
        self.layout = _Layout()
        # A lane block never holds more spilled values than its chain has live at once.
        self.scratch_slots = max((n.chain.peak_live() for n in fg.nodes if n.chain is not None), default=0)

    # Constants and memory map

    def _collect_constants(self) -> None:
        for node in self.fg.nodes:
            if node.chain is None:
                continue
            for bits in node.chain.constants():
                if bits not in self.constants:
                    self.constants[bits] = creg(len(self.constants))
        limit = min(self.config.const_regs, MAX_CONSTS)
        if len(self.constants) > limit:
            raise CompileError(f"{len(self.constants)} distinct constants exceed {limit} constant registers")

    def _is_shared(self, base: str) -> bool:
        spec = self.g.tensors[base]
        return self.g.producer(base) is None and spec.kind in ("weight", "const")

    def _view_words(self, view: View) -> int:
        shape = self.g.tensors[view.tensor].shape
        return layout_words(view.layout, shape, self.lanes)

    def _in_place_source(self, node: Node) -> str | None:
        """VEC key of an elementwise input that the node may overwrite."""
        if not is_elementwise(node) or [v.layout for v in node.stores] != [Layout.VEC]:
            return None
        alias = self.fg.aliases[node.inputs[0]]
        base = alias.base
        if alias.transposed or self.g.producer(base) is None:
            return None
        if any(self.fg.aliases[o].base == base for o in self.g.outputs):
            return None
        readers = [n for n in self.fg.nodes if any(self.fg.aliases[i].base == base for i in n.inputs)]
        if len(readers) != 1 or [v.layout for v in self.fg.views.get(base, [])] != [Layout.VEC]:
            return None
        return f"{base}:{Layout.VEC.value}"

    def _assign_addresses(self) -> None:
        shared, item = Allocator(0), Allocator(0)
        lay = self.layout
        for base, views in self.fg.views.items():
            for view in views:
                if self._is_shared(base):
                    lay.shared[view.key] = shared.take(self._view_words(view))
        for node in self.fg.nodes:
            if node.op == "softmax" and node.attrs.get("causal"):
                rows, cols = node.shape
                mask = causal_mask(rows, cols)
                key = f"{node.id}.mask:{Layout.VEC.value}"
                self.masks[key] = mask
                lay.shared[key] = shared.take(layout_words(Layout.VEC, mask.shape, self.lanes))
        for base, views in self.fg.views.items():
            if self._is_shared(base):
                continue
            producer = self.g.producer(base)
            for view in views:
                source = self._in_place_source(producer) if producer is not None else None
                if source is not None and source in lay.item:
                    lay.item[view.key] = lay.item[source]
                    logger.debug("%s overwrites %s in place", view.key, source)
                else:
                    lay.item[view.key] = item.take(self._view_words(view))
        lay.scratch = item.take(self.scratch_slots * vector_words(self.lanes))
        lay.item_base = pad_to(shared.next, SEGMENT_WORDS) if shared.next else 0
        lay.item_words = item.next
        total = lay.item_base + self.g.batch * lay.item_words
        if total > min(self.config.mem_words, ADDRESS_SPACE_WORDS):
            raise CompileError(f"graph needs {total} words, memory holds {self.config.mem_words}")
        self.total_words = total

    # Lowering

    def _matmul(self, node: Node, item: int, qsets: _QuantSets) -> list[Placed]:
        a, b = node.inputs
        a_view = self.fg.operand_view(a, Layout.ROW)
        b_view = self.fg.operand_view(b, Layout.COL)
        m, k = self.g.tensors[a].shape
        n = self.g.tensors[b].shape[1]
        alpha = float(node.attrs.get("alpha", 1.0))
        s_x = self.fg.aliases[a].scale * alpha
        s_y = self.fg.aliases[b].scale
        b_base = self.fg.aliases[b].base
        weight = self.g.producer(b_base) is None and self.g.tensors[b_base].kind == "weight"

        out: list[Placed] = []
        stores = []
        for view in node.stores:
            q = qsets.take()
            s_z = view.scale if view.dtype == "int8" else 1.0
            for which, value in enumerate((s_x, s_y, s_z)):
                out.append(Placed(config_ins(scale_slot(q, which), float32_bits(value))))
            mode = QuantMode.I8_I8 if view.dtype == "int8" else QuantMode.I8_BF16
            stores.append(StoreView(view.layout, self.layout.address(view.key, item), mode, q))
        job = MatmulJob(m, k, n, self.layout.address(a_view.key, item), self.layout.address(b_view.key, item),
                        weight, stores)
        stats = self.mm_stats if item == 0 else None
        out.extend(schedule_matmul(job, self.config, double_buffer=self.double_buffer, stats=stats, node_id=node.id))
        return out

    def _nonlinear(self, node: Node, item: int, qsets: _QuantSets) -> list[Placed]:
        rows, cols = node.shape
        addr = self.layout.address
        x = node.inputs[0]
        operands = {"x": Operand(addr(self.fg.operand_view(x, Layout.VEC).key, item), cols)}
        if node.op in ("add", "swiglu"):
            operands["y"] = Operand(addr(self.fg.operand_view(node.inputs[1], Layout.VEC).key, item), cols)
        elif node.op in ("layernorm", "rmsnorm"):
            for role, name in zip(("gamma", "beta"), node.inputs[1:]):
                operands[role] = Operand(addr(self.fg.operand_view(name, Layout.BCAST).key, item), bcast=True)
        elif node.op == "softmax" and node.attrs.get("causal"):
            operands["mask"] = Operand(addr(f"{node.id}.mask:{Layout.VEC.value}", item), cols)

        out: list[Placed] = []
        stores = []
        for view in node.stores:
            if view.layout == Layout.VEC:
                stores.append(VectorStore(Layout.VEC, addr(view.key, item), cols))
                continue
            q = qsets.take()
            out.append(Placed(config_ins(scale_slot(q, 2), float32_bits(view.scale))))
            out.append(Placed(config_ins(SLOT_QSET, q)))
            out.append(Placed(config_ins(SLOT_STRIDE, pad_to(cols, BLOCK))))
            stores.append(VectorStore(Layout.ROW, addr(view.key, item), cols, q))
        job = VectorJob(rows, operands, stores, self.constants, self.layout.scratch_base(item),
                        self.scratch_slots)
        stats = self.vec_stats if item == 0 else VectorStats()
        out.extend(lower_nonlinear(node.chain, job, self.config, stats=stats))
        return out

    def lower_item(self, item: int) -> list[Placed]:
        qsets = _QuantSets()
        out: list[Placed] = []
        for node in self.fg.nodes:
            if not node.stores:
                continue
            if node.op == "matmul":
                out.extend(self._matmul(node, item, qsets))
            else:
                out.extend(self._nonlinear(node, item, qsets))
        return out

    def prologue(self) -> list[Placed]:
        return [Placed(config_ins(reg - creg(0), bits)) for bits, reg in self.constants.items()]


def emit(per_core: list[list[Placed]], config: MachineConfig) -> list[list[int]]:
    """Resolve absolute addresses into CONFIG SEG + offset, append HALT, encode and validate."""
    programs = []
    for core, placed in enumerate(per_core):
        seg = 0
        instructions: list[Instruction] = []
        for p in placed:
            ins = p.ins
            if p.address is not None:
                s, offset = divmod(p.address, SEGMENT_WORDS)
                if s != seg:
                    instructions.append(config_ins(SLOT_SEG, s))
                    seg = s
                ins = replace(ins, addr=offset)
            instructions.append(ins)
        instructions.append(Instruction(Opcode.HALT))
        validate_program(instructions, core)
        programs.append([encode(i) for i in instructions])
    return programs


def validate_program(instructions: list[Instruction], core: int = 0) -> None:
    """Check register def-before-use, configured scales and the final HALT."""
    defined: set[int] = set()
    scales: set[tuple[int, int]] = set()
    qset = 0

    def fail(pc: int, what: str):
        raise CompileError(f"core {core} pc {pc}: {what}")

    def need(pc: int, reg: int, ins: Instruction):
        if reg not in defined:
            fail(pc, f"{ins.op.mnemonic} reads {reg_name(reg)} before it is written")

    for pc, ins in enumerate(instructions):
        op = ins.op
        if op == Opcode.CONFIG:
            if ins.dst <= SLOT_CONST_LAST:
                defined.add(creg(ins.dst))
            elif SLOT_SCALE_BASE <= ins.dst < scale_slot(QUANT_SETS, 0):
                scales.add(divmod(ins.dst - SLOT_SCALE_BASE, 3))
            elif ins.dst == SLOT_QSET:
                qset = ins.payload
        elif op in (Opcode.LOAD_M, Opcode.LOAD_V):
            defined.add(ins.dst)
        elif op == Opcode.MATMUL:
            need(pc, ins.src_a, ins)
            need(pc, ins.src_b, ins)
            if ins.flags:
                need(pc, DMB, ins)
            defined.add(DMB)
        elif op in (Opcode.MUL_V, Opcode.ADD_V, Opcode.APP_V):
            need(pc, ins.src_a, ins)
            if op != Opcode.APP_V:
                need(pc, ins.src_b, ins)
            defined.add(ins.dst)
        elif op == Opcode.STORE_M:
            need(pc, DMB, ins)
            wanted = (0, 1, 2) if ins.mode == QuantMode.I8_I8 else (0, 1)
            if any((ins.src_b, w) not in scales for w in wanted):
                fail(pc, f"STORE.M uses unconfigured quant set {ins.src_b}")
        elif op == Opcode.STORE_V:
            need(pc, ins.src_a, ins)
            if ins.mode == QuantMode.BF16_I8 and (qset, 2) not in scales:
                fail(pc, f"STORE.V uses unconfigured quant set {qset}")
        elif op == Opcode.HALT and pc != len(instructions) - 1:
            fail(pc, "HALT before the end of the program")
    if not instructions or instructions[-1].op != Opcode.HALT:
        fail(len(instructions), "program does not end with HALT")


def compile_graph(
    graph,
    config: MachineConfig | None = None,
    data: dict | None = None,
    *,
    double_buffer: bool = True,
) -> LoweredProgram:
    """Full pipeline: parse_and_infer -> fuse -> lower -> partition_cores -> emit.

    ``graph`` is a :class:`Graph`, a path, JSON text or a dict. ``data`` maps
    graph tensor names to arrays (weights, and inputs either shared by every
    batch item or with a leading batch axis); tensors without data stay zero.
    """
    config = config or MachineConfig()
    if not isinstance(graph, Graph):
        graph = parse_and_infer(graph, config.arith(), config.vregs)
    fg = fuse(graph)
    c = _Compiler(fg, config, double_buffer)
    c._collect_constants()
    c._assign_addresses()

    items = [c.lower_item(i) for i in range(graph.batch)]
    partition = partition_cores(graph.batch, config.cores)
    per_core = []
    for core_items in partition:
        placed = c.prologue() if core_items else []
        for i in core_items:
            placed.extend(items[i])
        per_core.append(placed)
    idle = sum(1 for p in partition if not p)
    if idle and graph.nodes:
        logger.warning("%d of %d cores have no batch item and only HALT", idle, config.cores)
    programs = emit(per_core, config)

    manifest = _manifest(c, graph, config)
    memory = MemoryImage(max(c.total_words, 1))
    for key, mask in c.masks.items():
        manifest.write_tensor(memory, key, mask)
    lowered = LoweredProgram(programs, manifest, config, memory, constant_tensors=dict(c.masks))
    _write_data(lowered, graph, data or {})

    lowered.stats = {
        "tiles": c.mm_stats.tiles,
        "matmul_steps": c.mm_stats.steps,
        "array_cycles": c.mm_stats.array_cycles,
        "vector_blocks": c.vec_stats.blocks,
        "vector_ops": c.vec_stats.vector_ops,
        "spills": c.vec_stats.spills,
        "reloads": c.vec_stats.reloads,
        "constants": len(c.constants),
        "instructions": [len(p) for p in programs],
        "memory_words": c.total_words,
    }
    if c.vec_stats.spills:
        logger.warning("Register pressure: %d spill(s) per batch item", c.vec_stats.spills)
    logger.info(
        "Compiled %r: %d node(s), batch %d on %d core(s), %d instruction(s) on the busiest core",
        graph.name, len(fg.nodes), graph.batch, config.cores, max(lowered.stats["instructions"]),
    )
    return lowered


def _manifest(c: _Compiler, graph: Graph, config: MachineConfig) -> Manifest:
    manifest = Manifest(
        outputs=list(graph.outputs),
        batch=graph.batch,
        cores=config.cores,
        lanes=config.lanes,
        memory_words=c.total_words,
        config_fingerprint=config.fingerprint(),
        constants={f"C{reg - creg(0)}": bits for bits, reg in c.constants.items()},
    )
    for base, views in c.fg.views.items():
        shape = list(graph.tensors[base].shape)
        for view in views:
            p = TensorPlacement(view.key, 0, shape, view.dtype, view.layout.value, view.scale)
            if view.key in c.layout.shared:
                manifest.add(replace(p, offset=c.layout.shared[view.key]))
            else:
                for item in range(graph.batch):
                    manifest.add(replace(p, name=item_key(view.key, item), offset=c.layout.address(view.key, item)))
            if view.scale is not None:
                manifest.scales[view.key] = view.scale
    for key, mask in c.masks.items():
        manifest.add(TensorPlacement(key, c.layout.shared[key], list(mask.shape), "bf16", Layout.VEC.value))
    for name in graph.outputs:
        alias = c.fg.aliases[name]
        layout = Layout.VEC if alias.dtype == "bf16" else (Layout.COL if alias.transposed else Layout.ROW)
        manifest.bindings[name] = f"{alias.base}:{layout.value}"
    return manifest


def _write_data(lowered: LoweredProgram, graph: Graph, data: dict) -> None:
    for name, spec in graph.tensors.items():
        if graph.producer(name) is not None or spec.kind == "activation":
            continue
        array = data.get(name, spec.data)
        if array is None:
            logger.debug("No data for %r; its memory stays zero", name)
            continue
        array = np.asarray(array)
        try:
            if spec.kind == "input" and graph.batch > 1 and array.ndim == len(spec.shape) + 1:
                for item in range(graph.batch):
                    lowered.write_input(lowered.memory, name, array[item], item)
            else:
                for item in range(graph.batch if spec.kind == "input" else 1):
                    lowered.write_input(lowered.memory, name, array, item)
        except KeyError:
            logger.debug("Tensor %r has no physical view; skipped", name)
