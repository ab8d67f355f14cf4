"""Measurements behind the CLI reports: approximation RMSE, layer benchmarks, peak stream."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bfarith
from .bfarith import ArithConfig, DEFAULT_ARITH
from .config import MachineConfig
from .isa import Instruction, Opcode, config as config_ins, creg, encode, vx, vy
from .logging_config import get_logger
from .machine import CycleReport, run
from .memory import MemoryImage, vector_words
from .models import BenchModel, bench_layers
from .refmodel import gelu_exact

logger = get_logger("report")

# Published figures, printed next to every measurement
PUBLISHED_RMSE = {"isqrt": 1.90e-3, "tanh": 1.52e-2, "gelu": 1.97e-3}
RMSE_BOUNDS = {"isqrt": 5e-3, "tanh": 2e-2, "gelu": 5e-3}
DEFAULT_RANGES = {"isqrt": (0.1, 10.0), "tanh": (-4.0, 4.0), "gelu": (-4.0, 4.0)}
PUBLISHED_CYCLES_PER_ELEMENT = {"SoftMax": 0.50, "LayerNorm": 0.51, "GELU": 0.39}
PEAK_STREAM_OPS = 4096


@dataclass
class ApproxRow:
    function: str
    lo: float
    hi: float
    samples: int
    rmse: float
    published_rmse: float
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.rmse <= self.bound


def parse_range(text: str) -> tuple[float, float]:
    """``"LO:HI"`` -> (lo, hi); a zero-width or inverted range is an error."""
    try:
        lo_s, hi_s = text.split(":")
        lo, hi = float(lo_s), float(hi_s)
    except ValueError:
        raise ValueError(f"range {text!r} is not LO:HI") from None
    if not hi > lo:
        raise ValueError(f"range {text!r} has zero or negative width")
    return lo, hi


def _samples(function: str, lo: float, hi: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if function == "isqrt":
        if lo <= 0:
            raise ValueError("isqrt range must be positive")
        return np.exp(rng.uniform(math.log(lo), math.log(hi), n))
    return rng.uniform(lo, hi, n)


def approx_rmse(function: str, lo: float, hi: float, samples: int = 10_000, seed: int = 0,
                arith: ArithConfig = DEFAULT_ARITH) -> float:
    """RMSE of the bfloat16 approximation against the real function on bf16-rounded inputs."""
    if not hi > lo:
        raise ValueError(f"range [{lo}, {hi}] has zero width")
    rng = np.random.default_rng(seed)
    bits = bfarith.from_float(_samples(function, lo, hi, samples, rng))
    x = bfarith.to_float(bits)
    if function == "isqrt":
        got, want = bfarith.fast_isqrt(bits, arith), 1.0 / np.sqrt(x)
    elif function == "tanh":
        got, want = bfarith.pade_tanh(bits, arith), np.tanh(x)
    elif function == "gelu":
        got, want = bfarith.gelu(bits, arith), gelu_exact(x)
    else:
        raise ValueError(f"unknown function {function!r}")
    err = bfarith.to_float(got) - want
    return float(np.sqrt(np.mean(err * err)))


def approx_report(ranges: dict | None = None, samples: int = 10_000, seed: int = 0,
                  arith: ArithConfig = DEFAULT_ARITH) -> list[ApproxRow]:
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    rows = []
    for name in ("isqrt", "tanh", "gelu"):
        lo, hi = ranges[name]
        rmse = approx_rmse(name, lo, hi, samples, seed, arith)
        rows.append(ApproxRow(name, lo, hi, samples, rmse, PUBLISHED_RMSE[name], RMSE_BOUNDS[name]))
    return rows


def write_approx_csv(path: Path, rows: list[ApproxRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["function", "lo", "hi", "samples", "rmse", "published_rmse", "bound"])
        for r in rows:
            writer.writerow([r.function, r.lo, r.hi, r.samples, f"{r.rmse:.6e}", r.published_rmse, r.bound])


def read_approx_csv(path: Path) -> list[ApproxRow]:
    with open(path, newline="") as f:
        return [
            ApproxRow(r["function"], float(r["lo"]), float(r["hi"]), int(r["samples"]), float(r["rmse"]),
                      float(r["published_rmse"]), float(r["bound"]))
            for r in csv.DictReader(f)
        ]


# Benchmarks


@dataclass
class LayerResult:
    layer: str
    kind: str
    cycles: int
    elements: int
    report: CycleReport

    @property
    def gops(self) -> float:
        return self.report.achieved_gops if self.kind == "matmul" else 0.0

    @property
    def cycles_per_element(self) -> float | None:
        if self.kind == "matmul" or not self.elements:
            return None
        return self.cycles / self.elements


@dataclass
class BenchResult:
    model: BenchModel
    config: MachineConfig
    layers: list[LayerResult] = field(default_factory=list)

    @property
    def cycles_per_item(self) -> int:
        return sum(layer.cycles for layer in self.layers)

    @property
    def model_cycles(self) -> int:
        """Cycles for the whole batch with items spread over the cores."""
        return self.cycles_per_item * -(-self.model.batch // self.config.cores)

    def cycles_per_element(self) -> dict[str, float]:
        return {r.layer: r.cycles_per_element for r in self.layers if r.cycles_per_element is not None}


def run_bench(model: BenchModel, config: MachineConfig) -> BenchResult:
    """Compile and simulate each layer of one batch item on a single core."""
    from .compiler import compile_graph

    single = config.with_overrides(cores=1)
    result = BenchResult(model, config)
    for layer, kind, graph, elements in bench_layers(model):
        lowered = compile_graph(graph, single)
        outcome = run(lowered.programs, lowered.memory.copy(), single)
        result.layers.append(LayerResult(layer, kind, outcome.report.total_cycles, elements, outcome.report))
        logger.info("%-10s %10d cycles", layer, outcome.report.total_cycles)
    return result


def peak_stream_program(config: MachineConfig, ops: int = PEAK_STREAM_OPS) -> list[int]:
    """Dependency-free MUL.V stream: one loaded source, destinations rotating over the register file."""
    lanes = config.lanes
    dests = [vx(i) for i in range(1, config.vregs)] + [vy(i) for i in range(config.vregs)]
    words = [
        encode(config_ins(0, bfarith.ONE)),
        encode(Instruction(Opcode.LOAD_V, vx(0), length=lanes)),
    ]
    for i in range(ops):
        words.append(encode(Instruction(Opcode.MUL_V, dests[i % len(dests)], vx(0), creg(0), lanes)))
    words.append(encode(Instruction(Opcode.HALT)))
    return words


def run_peak_stream(config: MachineConfig, ops: int = PEAK_STREAM_OPS) -> CycleReport:
    program = peak_stream_program(config, ops)
    memory = MemoryImage(vector_words(config.lanes))
    return run([program] * config.cores, memory, config).report


# Text tables


def format_table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}" if abs(value) < 1e-2 or abs(value) >= 1e5 else f"{value:.4f}"
    return str(value)


def approx_table(rows: list[ApproxRow]) -> str:
    return format_table(
        ["function", "range", "samples", "rmse", "published", "bound", "ok"],
        [[r.function, f"[{r.lo:g}, {r.hi:g}]", r.samples, r.rmse, r.published_rmse, r.bound,
          "yes" if r.within_bound else "NO"] for r in rows],
    )


def bench_table(result: BenchResult) -> str:
    rows = []
    for r in result.layers:
        cpe = r.cycles_per_element
        published = PUBLISHED_CYCLES_PER_ELEMENT.get(r.layer)
        rows.append([
            r.layer, r.cycles, r.elements,
            round(r.gops, 2) if r.kind == "matmul" else None,
            cpe, published, (cpe / published) if cpe is not None and published else None,
        ])
    return format_table(["layer", "cycles", "elements", "GOPS", "cycles/elem", "published", "ratio"], rows)
