"""Functional and cycle-approximate simulator of TATAA cores.

Each instruction executes functionally at issue, in program order. A separate
scoreboard decides *when* it issues and completes, so turning timing off never
changes a value. One core is stepped single-threaded; cores share the external
memory image but no other state.
"""

import csv
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import bfarith
from .config import MachineConfig
from .errors import (
    BankNotLoadedError,
    EncodingError,
    MachineError,
    MissingScaleError,
    TileShapeError,
    VectorLengthError,
    WatchdogError,
)
from .isa import (
    DMB,
    FLAG_ACC,
    QUANT_SETS,
    RMX,
    RMY,
    SLOT_CONST_LAST,
    SLOT_QSET,
    SLOT_SCALE_BASE,
    SLOT_SEG,
    SLOT_STRIDE,
    SEGMENT_WORDS,
    AppFunc,
    Instruction,
    Opcode,
    QuantMode,
    RegisterMap,
    bits_float32,
    creg,
    decode,
    is_creg,
    reg_name,
)
from .logging_config import get_logger
from .memory import MemoryImage, vector_words, words_for
from .quantize import QuantParams, bf16_passthrough, bf16_to_int8, dequantize_to_bf16, requantize

logger = get_logger("machine")

INT8_CHUNK = 32  # lanes per int8 word written by STORE.V


class Mode(Enum):
    INT8_MATMUL = "int8"
    BF16_SIMD = "bf16"


_MODE_OF = {
    Opcode.MATMUL: Mode.INT8_MATMUL,
    Opcode.MUL_V: Mode.BF16_SIMD,
    Opcode.ADD_V: Mode.BF16_SIMD,
    Opcode.APP_V: Mode.BF16_SIMD,
}


@dataclass
class TraceRow:
    cycle: int
    core: int
    pc: int
    opcode: str
    dst: str
    srcA: str
    srcB: str
    addr: int
    len: int
    stall_cycles: int


def _name(reg: int) -> str:
    return reg_name(reg) if reg else ""


def write_trace(path: Path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([fl.name for fl in fields(TraceRow)])
        for row in rows:
            writer.writerow([getattr(row, fl.name) for fl in fields(TraceRow)])


@dataclass
class CycleReport:
    config: MachineConfig
    total_cycles: int = 0
    per_core_cycles: list[int] = field(default_factory=list)
    instruction_counts: Counter = field(default_factory=Counter)
    instruction_cycles: Counter = field(default_factory=Counter)
    overlap_cycles_saved: int = 0
    stall_cycles: int = 0
    mode_switches: int = 0
    macs: int = 0
    flops: int = 0
    saturations: int = 0

    @property
    def seconds(self) -> float:
        return self.total_cycles / (self.config.freq_mhz * 1e6) if self.total_cycles else 0.0

    @property
    def achieved_gops(self) -> float:
        """int8 throughput, two ops per MAC."""
        return 2 * self.macs / self.seconds / 1e9 if self.seconds else 0.0

    @property
    def achieved_gflops(self) -> float:
        return self.flops / self.seconds / 1e9 if self.seconds else 0.0

    @property
    def theoretical_gflops(self) -> float:
        return self.config.theoretical_gflops

    @classmethod
    def merge(cls, reports: list["CycleReport"]) -> "CycleReport":
        """Combine per-core reports; cores run concurrently so the total is the slowest core."""
        merged = cls(reports[0].config)
        for r in reports:
            merged.per_core_cycles.extend(r.per_core_cycles)
            merged.instruction_counts.update(r.instruction_counts)
            merged.instruction_cycles.update(r.instruction_cycles)
            merged.overlap_cycles_saved += r.overlap_cycles_saved
            merged.stall_cycles += r.stall_cycles
            merged.mode_switches += r.mode_switches
            merged.macs += r.macs
            merged.flops += r.flops
            merged.saturations += r.saturations
        merged.total_cycles = max(merged.per_core_cycles, default=0)
        return merged

    def summary(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "per_core_cycles": list(self.per_core_cycles),
            "instruction_counts": dict(sorted(self.instruction_counts.items())),
            "instruction_cycles": dict(sorted(self.instruction_cycles.items())),
            "overlap_cycles_saved": self.overlap_cycles_saved,
            "stall_cycles": self.stall_cycles,
            "mode_switches": self.mode_switches,
            "macs": self.macs,
            "flops": self.flops,
            "saturations": self.saturations,
            "achieved_gops": round(self.achieved_gops, 3),
            "achieved_gflops": round(self.achieved_gflops, 3),
            "theoretical_gflops": round(self.theoretical_gflops, 3),
        }


class _Scoreboard:
    """Issue/completion bookkeeping for one core."""

    def __init__(self, config: MachineConfig):
        self.config = config
        self.next_issue = 0
        self.ready: dict[int, int] = {}
        self.last_read: dict[int, int] = {}
        self.ports = [0] * config.ports_per_core
        self.array_free = 0
        self.busy_until = {Mode.INT8_MATMUL: 0, Mode.BF16_SIMD: 0}
        self.mode: Mode | None = None
        self.pending_stores: list[tuple[int, int, int]] = []
        self.last_completion = 0

    def ready_at(self, reg: int) -> int:
        return self.ready.get(reg, 0)

    def read(self, reg: int, until: int) -> None:
        self.last_read[reg] = max(self.last_read.get(reg, 0), until)

    def complete(self, cycle: int) -> None:
        self.last_completion = max(self.last_completion, cycle)

    def enter_mode(self, mode: Mode) -> tuple[int, bool]:
        """Earliest issue for an instruction of ``mode`` and whether this is a switch."""
        if self.mode is None or self.mode == mode:
            return 0, False
        other = Mode.BF16_SIMD if mode == Mode.INT8_MATMUL else Mode.INT8_MATMUL
        return self.busy_until[other], True

    def store_hazard(self, lo: int, hi: int) -> int:
        return max((done for s_lo, s_hi, done in self.pending_stores if s_lo < hi and lo < s_hi), default=0)

    def port(self, earliest: int) -> tuple[int, int]:
        p = min(range(len(self.ports)), key=lambda i: (self.ports[i], i))
        return p, max(earliest, self.ports[p])


@dataclass
class _CoreResult:
    report: CycleReport
    trace: list[TraceRow]


class Core:
    """One TATAA core: register files, dual-mode buffer and quantization unit."""

    def __init__(self, index: int, program, memory: MemoryImage, config: MachineConfig, trace: bool = False):
        self.index = index
        self.config = config
        self.memory = memory
        self.arith = config.arith()
        self.regmap = RegisterMap.from_config(config)
        self.program = [self._checked(decode(w), pc) for pc, w in enumerate(program)]
        self.trace_enabled = trace

        self.rmx: dict[int, np.ndarray] = {}
        self.rmy: dict[int, np.ndarray] = {}
        self.vregs: dict[int, np.ndarray] = {}
        self.consts: dict[int, int] = {}
        self.dmb: tuple[str, np.ndarray] | None = None
        self.scales: dict[tuple[int, int], float] = {}
        self.seg = 0
        self.stride = 1
        self.qset = 0

        self.report = CycleReport(config, per_core_cycles=[0])
        self.rows: list[TraceRow] = []
        self.sb = _Scoreboard(config)

    def _checked(self, ins: Instruction, pc: int) -> Instruction:
        if ins.op != Opcode.CONFIG:
            for reg in (ins.dst, ins.src_a, ins.src_b if ins.op != Opcode.STORE_M else 0):
                if reg and not self.regmap.valid(reg):
                    raise EncodingError(f"core {self.index} pc {pc}: register {reg_name(reg)} not present")
        return ins

    # Functional helpers

    def _ea(self, ins: Instruction) -> int:
        return (self.seg << 12) | ins.addr

    def _vector(self, reg: int) -> np.ndarray:
        if is_creg(reg):
            if reg not in self.consts:
                raise BankNotLoadedError(f"constant register {reg_name(reg)} read before CONFIG")
            return np.full(self.config.lanes, self.consts[reg], dtype=np.uint16)
        if reg not in self.vregs:
            raise BankNotLoadedError(f"vector register {reg_name(reg)} read before it was written")
        return self.vregs[reg]

    def _write_vector(self, reg: int, values: np.ndarray, length: int) -> None:
        out = np.zeros(self.config.lanes, dtype=np.uint16)
        out[:length] = values[:length]
        if reg == DMB:
            self.dmb = ("vec", out)
        else:
            self.vregs[reg] = out

    def _check_len(self, ins: Instruction) -> None:
        if ins.length > self.config.lanes:
            raise VectorLengthError(f"{ins.op.mnemonic} len {ins.length} exceeds {self.config.lanes} lanes")

    def _scale(self, q: int, which: int) -> float:
        try:
            return self.scales[(q, which)]
        except KeyError:
            label = ("S_x", "S_y", "S_z")[which]
            raise MissingScaleError(f"core {self.index}: {label} of quant set {q} was never configured") from None

    # Execution

    def _exec_config(self, ins: Instruction) -> None:
        slot, payload = ins.dst, ins.payload
        if slot <= SLOT_CONST_LAST:
            self.consts[creg(slot)] = payload & 0xFFFF
        elif SLOT_SCALE_BASE <= slot < SLOT_SCALE_BASE + 3 * QUANT_SETS:
            value = bits_float32(payload)
            if not math.isfinite(value) or value <= 0:
                raise MachineError(f"core {self.index}: CONFIG slot 0x{slot:02X} carries non-positive scale {value}")
            q, which = divmod(slot - SLOT_SCALE_BASE, 3)
            self.scales[(q, which)] = value
        elif slot == SLOT_SEG:
            if payload >= SEGMENT_WORDS:
                raise MachineError(f"segment base 0x{payload:X} exceeds the 24-bit address space")
            self.seg = payload
        elif slot == SLOT_STRIDE:
            self.stride = payload
        elif slot == SLOT_QSET:
            if payload >= QUANT_SETS:
                raise MachineError(f"quant set {payload} out of range")
            self.qset = payload

    def _exec_load_m(self, ins: Instruction) -> int:
        if ins.length > self.config.d_mat:
            raise TileShapeError(f"LOAD.M of {ins.length} slices exceeds D_mat={self.config.d_mat}")
        width = self.config.tile_rows if ins.dst in RMX else self.config.tile_cols
        nbytes = ins.length * width
        data = self.memory.read(self._ea(ins), nbytes).view(np.int8).reshape(ins.length, width)
        (self.rmx if ins.dst in RMX else self.rmy)[ins.dst] = data
        return nbytes

    def _exec_load_v(self, ins: Instruction) -> int:
        self._check_len(ins)
        if ins.transpose:
            value = self.memory.read(self._ea(ins), 2).view("<u2")[0]
            self._write_vector(ins.dst, np.full(self.config.lanes, value, dtype=np.uint16), ins.length)
            return 2
        nbytes = 2 * ins.length
        data = self.memory.read(self._ea(ins), nbytes).view("<u2").astype(np.uint16)
        self._write_vector(ins.dst, data, ins.length)
        return nbytes

    def _exec_matmul(self, ins: Instruction) -> None:
        if ins.src_a not in self.rmx:
            raise BankNotLoadedError(f"{reg_name(ins.src_a)} read before LOAD.M")
        if ins.src_b not in self.rmy:
            raise BankNotLoadedError(f"{reg_name(ins.src_b)} read before LOAD.M")
        xs, ys = self.rmx[ins.src_a], self.rmy[ins.src_b]
        n = ins.length
        if n > xs.shape[0] or n > ys.shape[0]:
            raise TileShapeError(
                f"MATMUL len {n} but banks hold {xs.shape[0]} and {ys.shape[0]} slices"
            )
        x = xs[:n].astype(np.int64)
        y = ys[:n].astype(np.int64)
        start = None
        if ins.flags & FLAG_ACC:
            if self.dmb is None or self.dmb[0] != "tile":
                raise BankNotLoadedError("accumulating MATMUL with no tile in DMB")
            start = self.dmb[1]
        self.dmb = ("tile", self._accumulate(x, y, start))
        self.report.macs += n * self.config.tile_rows * self.config.tile_cols

    def _accumulate(self, x: np.ndarray, y: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
        """Output-stationary accumulation, saturating at acc_bits after every step."""
        hi = (1 << (self.config.acc_bits - 1)) - 1
        lo = -hi - 1
        init = np.zeros((x.shape[1], y.shape[1]), dtype=np.int64) if start is None else start.copy()
        if x.shape[0] == 0:
            return init
        partial = init + np.cumsum(x[:, :, None] * y[:, None, :], axis=0)
        if partial.min() >= lo and partial.max() <= hi:
            return partial[-1]
        acc = init
        for k in range(x.shape[0]):
            step = acc + np.outer(x[k], y[k])
            self.report.saturations += int(np.count_nonzero((step < lo) | (step > hi)))
            acc = np.clip(step, lo, hi)
        return acc

    def _exec_vector(self, ins: Instruction) -> None:
        self._check_len(ins)
        n = ins.length
        a = self._vector(ins.src_a)[:n]
        if ins.op == Opcode.MUL_V:
            out = bfarith.fpmul(a, self._vector(ins.src_b)[:n])
        elif ins.op == Opcode.ADD_V:
            out = bfarith.fpadd(a, self._vector(ins.src_b)[:n], self.arith)
        else:
            func = AppFunc(ins.mode)
            if func == AppFunc.ISQRT:
                out = bfarith.fpapp(a, raw=ins.raw, cfg=self.arith)
            elif func == AppFunc.POW2:
                out = bfarith.exp2_floor(a, self.arith)
            elif func == AppFunc.CLAMP:
                out = bfarith.clamp_unit(a)
            else:
                out = bfarith.relu(a)
        self._write_vector(ins.dst, np.atleast_1d(out), n)
        self.report.flops += n

    def _exec_store_m(self, ins: Instruction) -> tuple[int, list[tuple[int, int]]]:
        if self.dmb is None or self.dmb[0] != "tile":
            raise BankNotLoadedError("STORE.M with no MATMUL result in DMB")
        mode = QuantMode(ins.mode)
        if mode not in (QuantMode.I8_I8, QuantMode.I8_BF16):
            raise MachineError(f"STORE.M mode {mode.name} needs a bfloat16 source; use STORE.V")
        tile = self.dmb[1].T if ins.transpose else self.dmb[1]
        if ins.length > tile.shape[0]:
            raise TileShapeError(f"STORE.M len {ins.length} exceeds tile extent {tile.shape[0]}")
        rows = tile[: ins.length]
        q = ins.src_b
        base = self._ea(ins)
        if mode == QuantMode.I8_I8:
            params = QuantParams(self._scale(q, 0), self._scale(q, 1), self._scale(q, 2))
            payload = np.ascontiguousarray(requantize(rows, params)).view(np.uint8)
            self.memory.write(base, payload)
            return payload.size, [(base, base + words_for(payload.size))]
        values = np.asarray(dequantize_to_bf16(rows, self._scale(q, 0), self._scale(q, 1)), dtype="<u2")
        stride = vector_words(self.config.lanes)
        spans = []
        for r in range(values.shape[0]):
            addr = base + r * stride
            chunk = values[r].view(np.uint8)
            self.memory.write(addr, chunk)
            spans.append((addr, addr + words_for(chunk.size)))
        return values.size * 2, spans

    def _exec_store_v(self, ins: Instruction) -> tuple[int, list[tuple[int, int]]]:
        self._check_len(ins)
        if ins.src_a == DMB:
            if self.dmb is None or self.dmb[0] != "vec":
                raise BankNotLoadedError("STORE.V from DMB with no vector result in it")
            vec = self.dmb[1]
        else:
            vec = self._vector(ins.src_a)
        vec = vec[: ins.length]
        mode = QuantMode(ins.mode)
        base = self._ea(ins)
        if mode == QuantMode.BF16_BF16:
            payload = bf16_passthrough(vec).astype("<u2").view(np.uint8)
            self.memory.write(base, payload)
            return payload.size, [(base, base + words_for(payload.size))]
        if mode != QuantMode.BF16_I8:
            raise MachineError(f"STORE.V mode {mode.name} needs an integer source; use STORE.M")
        q8 = np.atleast_1d(bf16_to_int8(vec, self._scale(self.qset, 2))).view(np.uint8)
        spans = []
        for i in range(0, q8.size, INT8_CHUNK):
            addr = base + (i // INT8_CHUNK) * self.stride
            self.memory.write(addr, q8[i : i + INT8_CHUNK])
            spans.append((addr, addr + 1))
        return q8.size, spans

    # Timing

    def _transfer(self, nbytes: int) -> int:
        return -(-nbytes // self.config.mem_bytes_per_cycle_per_port)

    def _issue(self, earliest: int) -> tuple[int, int]:
        issue = max(self.sb.next_issue, earliest)
        stall = issue - self.sb.next_issue
        if issue > self.config.watchdog_cycles:
            raise WatchdogError(self.index, issue, self.config.watchdog_cycles)
        self.sb.next_issue = issue + 1
        return issue, stall

    def _step(self, pc: int, ins: Instruction) -> int:
        """Execute one instruction; returns the issue cycle."""
        sb, cfg = self.sb, self.config
        op = ins.op
        earliest = 0
        switched = False
        mode = _MODE_OF.get(op)
        if mode is not None:
            earliest, switched = sb.enter_mode(mode)

        if op == Opcode.CONFIG:
            self._exec_config(ins)
            issue, stall = self._issue(0)
            completion = issue + 1
            if ins.dst <= SLOT_CONST_LAST:
                sb.ready[creg(ins.dst)] = completion

        elif op in (Opcode.LOAD_M, Opcode.LOAD_V):
            nbytes_est = ins.length * (cfg.tile_rows if ins.dst in RMX else cfg.tile_cols) if op == Opcode.LOAD_M else (
                2 if ins.transpose else 2 * ins.length
            )
            lo = self._ea(ins)
            hi = lo + max(words_for(nbytes_est), 1)
            earliest = max(earliest, sb.last_read.get(ins.dst, 0), sb.ready_at(ins.dst), sb.store_hazard(lo, hi))
            p, start = sb.port(earliest)
            issue, stall = self._issue(start)
            nbytes = self._exec_load_m(ins) if op == Opcode.LOAD_M else self._exec_load_v(ins)
            transfer = self._transfer(nbytes)
            sb.ports[p] = issue + transfer
            completion = issue + cfg.mem_latency_cycles + transfer
            sb.ready[ins.dst] = completion

        elif op == Opcode.MATMUL:
            earliest = max(
                earliest,
                sb.ready_at(ins.src_a),
                sb.ready_at(ins.src_b),
                sb.array_free,
                sb.last_read.get(DMB, 0),
            )
            issue, stall = self._issue(earliest)
            self._exec_matmul(ins)
            completion = issue + ins.length + cfg.tile_rows + cfg.tile_cols - 2
            sb.array_free = completion
            sb.ready[DMB] = completion
            sb.read(ins.src_a, completion)
            sb.read(ins.src_b, completion)
            sb.busy_until[Mode.INT8_MATMUL] = max(sb.busy_until[Mode.INT8_MATMUL], completion)

        elif op in (Opcode.MUL_V, Opcode.ADD_V, Opcode.APP_V):
            srcs = [ins.src_a] + ([ins.src_b] if op != Opcode.APP_V else [])
            earliest = max(
                [earliest, sb.last_read.get(ins.dst, 0), sb.ready_at(ins.dst) - cfg.vector_stages]
                + [sb.ready_at(s) for s in srcs]
            )
            issue, stall = self._issue(earliest)
            self._exec_vector(ins)
            completion = issue + cfg.vector_stages
            sb.ready[ins.dst] = completion
            for s in srcs:
                sb.read(s, issue)
            sb.busy_until[Mode.BF16_SIMD] = max(sb.busy_until[Mode.BF16_SIMD], completion)

        elif op in (Opcode.STORE_M, Opcode.STORE_V):
            src = DMB if op == Opcode.STORE_M else ins.src_a
            p, start = sb.port(max(earliest, sb.ready_at(src)))
            issue, stall = self._issue(start)
            nbytes, spans = self._exec_store_m(ins) if op == Opcode.STORE_M else self._exec_store_v(ins)
            transfer = self._transfer(nbytes)
            sb.ports[p] = issue + transfer
            completion = issue + cfg.mem_latency_cycles + transfer
            sb.read(src, issue)
            sb.pending_stores = [s for s in sb.pending_stores if s[2] > issue]
            sb.pending_stores.extend((lo, hi, completion) for lo, hi in spans)

        else:  # HALT
            issue, stall = self._issue(sb.last_completion)
            completion = issue + 1

        if switched:
            self.report.mode_switches += 1
        if mode is not None:
            sb.mode = mode
        sb.complete(completion)
        self.report.instruction_counts[op.mnemonic] += 1
        self.report.instruction_cycles[op.mnemonic] += completion - issue
        self.report.stall_cycles += stall
        if self.trace_enabled:
            self.rows.append(
                TraceRow(
                    issue, self.index, pc, op.mnemonic, _name(ins.dst), _name(ins.src_a),
                    _name(ins.src_b) if op != Opcode.STORE_M else str(ins.src_b),
                    self._ea(ins), ins.length, stall,
                )
            )
        return issue

    def run(self) -> _CoreResult:
        halted = False
        for pc, ins in enumerate(self.program):
            if not self.config.timing:
                self._run_untimed(pc, ins)
            else:
                self._step(pc, ins)
            if ins.op == Opcode.HALT:
                halted = True
                break
        if not halted:
            raise MachineError(f"core {self.index}: program ran past its end without HALT")

        if self.config.timing:
            total = self.sb.next_issue
        else:
            total = sum(self.report.instruction_counts.values())
        self.report.total_cycles = total
        self.report.per_core_cycles = [total]
        busy = sum(self.report.instruction_cycles.values())
        self.report.overlap_cycles_saved = max(0, busy - total)
        logger.debug("Core %d halted after %d cycles", self.index, total)
        return _CoreResult(self.report, self.rows)

    def _run_untimed(self, pc: int, ins: Instruction) -> None:
        if pc >= self.config.watchdog_cycles:
            raise WatchdogError(self.index, pc, self.config.watchdog_cycles)
        op = ins.op
        if op == Opcode.CONFIG:
            self._exec_config(ins)
        elif op == Opcode.LOAD_M:
            self._exec_load_m(ins)
        elif op == Opcode.LOAD_V:
            self._exec_load_v(ins)
        elif op == Opcode.MATMUL:
            self._exec_matmul(ins)
        elif op in (Opcode.MUL_V, Opcode.ADD_V, Opcode.APP_V):
            self._exec_vector(ins)
        elif op == Opcode.STORE_M:
            self._exec_store_m(ins)
        elif op == Opcode.STORE_V:
            self._exec_store_v(ins)
        self.report.instruction_counts[op.mnemonic] += 1
        self.report.instruction_cycles[op.mnemonic] += 1
        if self.trace_enabled:
            self.rows.append(
                TraceRow(pc, self.index, pc, op.mnemonic, _name(ins.dst), _name(ins.src_a), _name(ins.src_b),
                         self._ea(ins), ins.length, 0)
            )


@dataclass
class RunResult:
    memory: MemoryImage
    report: CycleReport
    trace: list[TraceRow]


def _as_programs(programs) -> list[list[int]]:
    programs = list(programs)
    if programs and isinstance(programs[0], (int, np.integer)):
        return [programs]
    return [list(p) for p in programs] or [[]]


def run(
    programs,
    memory: MemoryImage | None = None,
    config: MachineConfig | None = None,
    *,
    trace: bool = False,
    threads: bool = False,
) -> RunResult:
    """Execute one program per core to HALT against a shared memory image.

    ``programs`` is either a single word list or one word list per core. The
    memory image is updated in place and returned.
    """
    config = config or MachineConfig()
    memory = memory if memory is not None else MemoryImage(config.mem_words)
    per_core = _as_programs(programs)
    cores = [Core(i, words, memory, config, trace) for i, words in enumerate(per_core)]

    if threads and len(cores) > 1:
        with ThreadPoolExecutor(max_workers=len(cores)) as pool:
            results = list(pool.map(Core.run, cores))
    else:
        results = [core.run() for core in cores]

    report = CycleReport.merge([r.report for r in results])
    rows = sorted((row for r in results for row in r.trace), key=lambda row: (row.cycle, row.core, row.pc))
    logger.info("Run finished: %d core(s), %d cycles", len(cores), report.total_cycles)
    if report.saturations:
        logger.warning("%d accumulator steps saturated at %d bits", report.saturations, config.acc_bits)
    return RunResult(memory, report, rows)
