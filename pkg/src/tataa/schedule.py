"""Instruction scheduling: tiled matmuls and register-allocated vector chains.

Schedulers produce :class:`Placed` instructions whose memory operands still carry
absolute word addresses; :func:`tataa.compiler.emit` splits them into CONFIG SEG
plus the 12-bit in-segment offset.
"""

from collections import deque
from dataclasses import dataclass, field

from .chains import Chain, Const
from .config import MachineConfig
from .errors import CompileError
from .isa import (
    DMB,
    FLAG_ACC,
    RMX,
    RMY,
    Instruction,
    Opcode,
    QuantMode,
    flags_of,
    vx,
    vy,
)
from .logging_config import get_logger
from .memory import BLOCK, Layout, pad_to, vector_words

logger = get_logger("schedule")


@dataclass(frozen=True)
class Placed:
    ins: Instruction
    address: int | None = None  # absolute word address of a memory operand


@dataclass(frozen=True)
class StoreView:
    """One physical copy of a node's result."""

    layout: Layout
    base: int
    mode: QuantMode
    qset: int = 0


@dataclass
class MatmulJob:
    m: int
    k: int
    n: int
    a_base: int  # rowblk(A)
    b_base: int  # colblk(B)
    weight_operand: bool  # B is a weight: X streams W^T and DMB holds the transposed tile
    stores: list[StoreView] = field(default_factory=list)


@dataclass
class MatmulStats:
    tiles: int = 0
    steps: int = 0
    array_cycles: int = 0


def _check_tile(config: MachineConfig, node_id: str | None = None) -> None:
    if config.tile_rows != BLOCK or config.tile_cols != BLOCK:
        raise CompileError(
            f"compiler needs {BLOCK}x{BLOCK} tiles, config gives {config.tile_rows}x{config.tile_cols}", node_id
        )
    if config.d_mat < BLOCK:
        raise CompileError(f"D_mat={config.d_mat} holds less than one {BLOCK}-slice tile", node_id)


def _tile_store(job: MatmulJob, view: StoreView, mi: int, ni: int, lanes: int) -> Placed:
    mp, np_ = pad_to(job.m, BLOCK), pad_to(job.n, BLOCK)
    m0, n0 = mi * BLOCK, ni * BLOCK
    transposed = job.weight_operand
    if view.layout == Layout.ROW:
        addr, t, length = view.base + mi * np_ + n0, not transposed, BLOCK
    elif view.layout == Layout.COL:
        addr, t, length = view.base + ni * mp + m0, transposed, BLOCK
    elif view.layout == Layout.VEC:
        vw = vector_words(lanes)
        addr = view.base + ((m0 // lanes) * job.n + n0) * vw + (m0 % lanes) * 2 // 32
        t, length = not transposed, min(BLOCK, job.n - n0)
    else:
        raise CompileError(f"matmul cannot produce a {view.layout.value} view")
    ins = Instruction(Opcode.STORE_M, src_a=DMB, src_b=view.qset, length=length, flags=flags_of(t, view.mode))
    return Placed(ins, addr)


def schedule_matmul(
    job: MatmulJob,
    config: MachineConfig,
    *,
    double_buffer: bool = True,
    stats: MatmulStats | None = None,
    node_id: str | None = None,
) -> list[Placed]:
    """LOAD.M / MATMUL / STORE.M sequence over 32x32 output tiles.

    K is cut into chunks of at most D_mat slices chained with the accumulate
    flag. With ``double_buffer`` the loads of step t+1 go to the other bank and
    are issued right after MATMUL t; otherwise every step uses bank 0.
    """
    if job.m == 0 or job.n == 0 or job.k == 0:
        return []
    _check_tile(config, node_id)
    kp = pad_to(job.k, BLOCK)
    chunk = min(config.d_mat, kp)
    steps = [
        (mi, ni, k0, min(chunk, kp - k0))
        for mi in range(pad_to(job.m, BLOCK) // BLOCK)
        for ni in range(pad_to(job.n, BLOCK) // BLOCK)
        for k0 in range(0, kp, chunk)
    ]

    def loads(t: int) -> list[Placed]:
        mi, ni, k0, klen = steps[t]
        bank = t % 2 if double_buffer else 0
        a_addr = job.a_base + mi * kp + k0
        b_addr = job.b_base + ni * kp + k0
        x_addr, y_addr = (b_addr, a_addr) if job.weight_operand else (a_addr, b_addr)
        return [
            Placed(Instruction(Opcode.LOAD_M, RMX[bank], length=klen), x_addr),
            Placed(Instruction(Opcode.LOAD_M, RMY[bank], length=klen), y_addr),
        ]

    out = loads(0)
    for t, (mi, ni, k0, klen) in enumerate(steps):
        bank = t % 2 if double_buffer else 0
        flags = FLAG_ACC if k0 else 0
        out.append(Placed(Instruction(Opcode.MATMUL, DMB, RMX[bank], RMY[bank], klen, flags=flags)))
        has_next = t + 1 < len(steps)
        if double_buffer and has_next:
            out.extend(loads(t + 1))
        if k0 + klen >= kp:
            out.extend(_tile_store(job, view, mi, ni, config.lanes) for view in job.stores)
            if stats is not None:
                stats.tiles += 1
        if not double_buffer and has_next:
            out.extend(loads(t + 1))
        if stats is not None:
            stats.steps += 1
            stats.array_cycles += klen + config.tile_rows + config.tile_cols - 2
    logger.debug("Scheduled %dx%dx%d matmul in %d steps", job.m, job.k, job.n, len(steps))
    return out


# Vector chains


@dataclass(frozen=True)
class Operand:
    """Where a chain role lives in memory: ``columns`` vblk columns, or a bcast table."""

    base: int
    columns: int = 0
    bcast: bool = False


@dataclass(frozen=True)
class VectorStore:
    layout: Layout  # VEC (bf16) or ROW (int8 through the quantization unit)
    base: int
    columns: int  # logical feature count of the stored tensor
    qset: int = 0


@dataclass
class VectorJob:
    rows: int
    operands: dict[str, Operand]
    stores: list[VectorStore]
    constants: dict[int, int]  # bf16 pattern -> constant register
    scratch_base: int
    scratch_slots: int


@dataclass
class VectorStats:
    blocks: int = 0
    spills: int = 0
    reloads: int = 0
    vector_ops: int = 0


class RegisterAllocator:
    """Two groups of vector registers split evenly across X and Y.

    Group 1 (registers 0..R/2-1 of each side) receives loaded values, group 2
    the computed ones; either falls back to the other group when empty. Free
    registers are reused least-recently-released first so that consecutive
    writes alternate between X and Y.
    """

    def __init__(self, vregs: int):
        half = vregs // 2
        self.groups = (
            deque(r for i in range(half) for r in (vx(i), vy(i))),
            deque(r for i in range(half, vregs) for r in (vx(i), vy(i))),
        )
        self.group_of = {r: g for g, regs in enumerate(self.groups) for r in regs}

    def take(self, preferred: int) -> int | None:
        for g in (preferred, 1 - preferred):
            if self.groups[g]:
                return self.groups[g].popleft()
        return None

    def release(self, reg: int) -> None:
        self.groups[self.group_of[reg]].append(reg)


class _BlockLowering:
    """Lowers one lane block of a chain, spilling to scratch when registers run out."""

    def __init__(self, chain: Chain, job: VectorJob, config: MachineConfig, block: int, stats: VectorStats):
        self.chain = chain
        self.job = job
        self.config = config
        self.block = block
        self.lanes = config.lanes
        self.length = min(self.lanes, job.rows - block * self.lanes)
        self.vw = vector_words(self.lanes)
        self.stats = stats
        self.alloc = RegisterAllocator(config.vregs)
        self.reg: dict[int, int] = {}
        self.spilled: dict[int, int] = {}
        self.free_slots = list(range(job.scratch_slots - 1, -1, -1))
        self.out: list[Placed] = []

        self.uses: dict[int, list[int]] = {}
        for i, step in enumerate(chain.steps):
            for v in step.reads():
                self.uses.setdefault(v, []).append(i)

    def _next_use(self, v: int, i: int) -> int:
        return next((u for u in self.uses.get(v, []) if u > i), 1 << 30)

    def _last_use(self, v: int) -> int:
        return self.uses.get(v, [-1])[-1]

    def _spill_one(self, pinned: set[int], i: int) -> None:
        candidates = [v for v in self.reg if v not in pinned]
        if not candidates:
            raise CompileError(f"{self.chain.op}: every vector register is pinned by one step")
        victim = max(candidates, key=lambda v: (self._next_use(v, i), v))
        if not self.free_slots:
            raise CompileError(f"{self.chain.op}: {self.job.scratch_slots} scratch slots exhausted")
        slot = self.free_slots.pop()
        reg = self.reg.pop(victim)
        addr = self.job.scratch_base + slot * self.vw
        self.out.append(Placed(Instruction(Opcode.STORE_V, src_a=reg, length=self.length,
                                           flags=flags_of(mode=QuantMode.BF16_BF16)), addr))
        self.alloc.release(reg)
        self.spilled[victim] = slot
        self.stats.spills += 1

    def _take(self, group: int, pinned: set[int], i: int) -> int:
        reg = self.alloc.take(group)
        while reg is None:
            self._spill_one(pinned, i)
            reg = self.alloc.take(group)
        return reg

    def _ensure(self, v: int, pinned: set[int], i: int) -> int:
        if v in self.reg:
            return self.reg[v]
        slot = self.spilled.pop(v)
        reg = self._take(0, pinned, i)
        addr = self.job.scratch_base + slot * self.vw
        self.out.append(Placed(Instruction(Opcode.LOAD_V, reg, length=self.length), addr))
        self.free_slots.append(slot)
        self.reg[v] = reg
        self.stats.reloads += 1
        return reg

    def _operand_address(self, role: str, col: int) -> Placed:
        op = self.job.operands.get(role)
        if op is None:
            raise CompileError(f"{self.chain.op}: no memory operand bound to role {role!r}")
        if op.bcast:
            ins = Instruction(Opcode.LOAD_V, length=self.length, flags=flags_of(t=True))
            return Placed(ins, op.base + col)
        addr = op.base + (self.block * op.columns + col) * self.vw
        return Placed(Instruction(Opcode.LOAD_V, length=self.length), addr)

    def _stores(self, reg: int, col: int) -> None:
        for view in self.job.stores:
            if view.layout == Layout.VEC:
                addr = view.base + (self.block * view.columns + col) * self.vw
                mode = QuantMode.BF16_BF16
            else:
                chunks = self.lanes // BLOCK
                addr = view.base + chunks * self.block * pad_to(view.columns, BLOCK) + col
                mode = QuantMode.BF16_I8
            ins = Instruction(Opcode.STORE_V, src_a=reg, length=self.length, flags=flags_of(mode=mode))
            self.out.append(Placed(ins, addr))

    def lower(self) -> list[Placed]:
        for i, step in enumerate(self.chain.steps):
            reads = step.reads()
            pinned = set(reads)
            regs = [self._ensure(v, pinned, i) for v in reads]

            if step.kind == "store":
                self._stores(regs[0], step.col)
            for v in dict.fromkeys(reads):
                if self._last_use(v) <= i:
                    self.alloc.release(self.reg.pop(v))
            if step.kind == "store":
                continue

            group = 0 if step.kind in ("load", "bcast") else 1
            dst = self._take(group, pinned, i)
            self.reg[step.out] = dst
            if step.kind in ("load", "bcast"):
                placed = self._operand_address(step.role, step.col)
                self.out.append(Placed(Instruction(Opcode.LOAD_V, dst, length=placed.ins.length,
                                                   flags=placed.ins.flags), placed.address))
            else:
                self.out.append(Placed(self._compute(step, dst, regs)))
                self.stats.vector_ops += 1
            if step.out not in self.uses:
                self.alloc.release(self.reg.pop(step.out))
        return self.out

    def _compute(self, step, dst: int, regs: list[int]) -> Instruction:
        if step.kind == "app":
            return Instruction(Opcode.APP_V, dst, regs[0], length=self.length,
                               flags=flags_of(mode=step.func, raw=step.raw))
        if isinstance(step.b, Const):
            src_b = self.job.constants.get(step.b.bits)
            if src_b is None:
                raise CompileError(f"{self.chain.op}: constant 0x{step.b.bits:04X} has no register")
        else:
            src_b = regs[1] if len(regs) > 1 else regs[0]
        op = Opcode.MUL_V if step.kind == "mul" else Opcode.ADD_V
        return Instruction(op, dst, regs[0], src_b, length=self.length)


def lower_nonlinear(
    chain: Chain,
    job: VectorJob,
    config: MachineConfig,
    *,
    stats: VectorStats | None = None,
) -> list[Placed]:
    """Register-allocated instructions for every lane block of ``job.rows`` rows."""
    stats = stats if stats is not None else VectorStats()
    if job.rows == 0 or chain.columns == 0:
        return []
    out: list[Placed] = []
    blocks = -(-job.rows // config.lanes)
    for b in range(blocks):
        out.extend(_BlockLowering(chain, job, config, b, stats).lower())
    stats.blocks += blocks
    if stats.spills:
        logger.debug("%s: %d spills over %d block(s)", chain.op, stats.spills, blocks)
    return out
