"""Main entry point for the TATAA toolchain."""

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AsmError, CompileError, EncodingError, GraphError, MachineError, QuantError

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_COMPILE = 3
EXIT_RUN = 4
EXIT_VERIFY = 5


class VerificationFailed(Exception):
    """A report value fell outside its acceptance bound."""


def _banner(title: str, config=None):
    print("=" * 60)
    print(title)
    print("=" * 60)
    if config is not None:
        for line in config.header_lines():
            print(line)
    print("")


def _load_config(args):
    from .config import MachineConfig
    config = MachineConfig.load(getattr(args, "config", None))
    return config.with_overrides(
        cores=getattr(args, "cores", None),
        watchdog_cycles=getattr(args, "watchdog", None),
        acc_bits=getattr(args, "acc_bits", None),
    )


def compile_cmd(args) -> int:
    """Compile a graph JSON file into per-core programs, manifest and memory image."""
    from .compiler import compile_graph
    config = _load_config(args)
    lowered = compile_graph(Path(args.graph), config)
    out_dir = Path(args.out_dir or Path(args.graph).with_suffix(""))
    lowered.save(out_dir)

    _banner("Compile", config)
    for key, value in lowered.stats.items():
        print(f"  {key:<14} {value}")
    print("")
    print(f"Artifacts: {out_dir}")
    return EXIT_OK


def run_cmd(args) -> int:
    """Run a compiled program directory, or a single program file, on the simulator."""
    import numpy as np
    from . import bfarith
    from .compiler import LoweredProgram
    from .isa import read_program
    from .machine import run, write_trace
    from .memory import MemoryImage

    config = _load_config(args)
    target = Path(args.program)
    lowered = None
    if target.is_dir():
        if args.config is None:
            from .config import MachineConfig
            saved = MachineConfig.load(target / "config.json")
            config = saved.with_overrides(watchdog_cycles=args.watchdog, acc_bits=args.acc_bits)
        lowered = LoweredProgram.load(target, config)
        programs, memory = lowered.programs, lowered.memory.copy()
    else:
        programs, memory = [read_program(target)], MemoryImage(config.mem_words)

    result = run(programs, memory, config, trace=args.trace)
    summary = result.report.summary()

    _banner("Run", config)
    print(f"  total cycles   {result.report.total_cycles}")
    print(f"  per core       {result.report.per_core_cycles}")
    print(f"  GOPS (int8)    {summary['achieved_gops']}")
    print(f"  GFLOPS (bf16)  {summary['achieved_gflops']} of {summary['theoretical_gflops']}")
    if result.report.saturations:
        print(f"  saturations    {result.report.saturations}")

    out_dir = Path(args.out_dir) if args.out_dir else (target if target.is_dir() else target.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"config_fingerprint": config.fingerprint(), "config": config.to_dict(), "cycles": summary}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.trace:
        write_trace(out_dir / "trace.csv", result.trace)
    if lowered is not None:
        result.memory.save(out_dir / "memory_out.bin")
        for name in lowered.manifest.outputs:
            for item in range(lowered.manifest.batch):
                data = lowered.read_output(result.memory, name, item)
                if data.dtype == np.uint16:
                    data = bfarith.to_float(data)
                np.save(out_dir / f"{name}_{item}.npy", data)
    print("")
    print(f"Report: {out_dir / 'report.json'}")
    return EXIT_OK


def approx_report_cmd(args) -> int:
    """Print RMSE of the isqrt, tanh and GELU approximations against their published values."""
    from .config import MachineConfig
    from .report import approx_report, approx_table, parse_range, write_approx_csv
    config = MachineConfig.load(args.config)
    ranges = {name: parse_range(text) for name, text in (("isqrt", args.isqrt), ("tanh", args.tanh),
                                                          ("gelu", args.gelu)) if text}
    rows = approx_report(ranges, samples=args.samples, seed=args.seed, arith=config.arith())

    _banner("Approximation RMSE", config)
    print(approx_table(rows))
    if args.csv:
        write_approx_csv(Path(args.csv), rows)
        print("")
        print(f"CSV: {args.csv}")
    failed = [r.function for r in rows if not r.within_bound]
    if failed:
        raise VerificationFailed(f"RMSE above bound for {', '.join(failed)}")
    return EXIT_OK


def bench_cmd(args) -> int:
    """Per-layer cycles for one batch item plus the peak MUL.V stream."""
    from .models import BENCH_MODELS
    from .report import PUBLISHED_CYCLES_PER_ELEMENT, bench_table, run_bench, run_peak_stream
    config = _load_config(args)
    model = BENCH_MODELS[args.model]
    result = run_bench(model, config)
    peak = run_peak_stream(config)

    _banner(f"Bench: {model.name}", config)
    print(bench_table(result))
    print("")
    cpe = result.cycles_per_element()
    for layer, published in PUBLISHED_CYCLES_PER_ELEMENT.items():
        if layer in cpe:
            print(f"  {layer:<10} {cpe[layer]:.3f} cycles/element (published {published:.2f})")
    if result.layers:
        print(f"  model cycles   {result.model_cycles} for batch {model.batch} on {config.cores} core(s)")
    print(f"  peak MUL.V     {peak.achieved_gflops:.2f} GFLOPS of {config.theoretical_gflops:.2f} theoretical")
    return EXIT_OK


def asm_cmd(args) -> int:
    """Assemble a text program into a binary program file."""
    from .isa import assemble, write_program
    words = assemble(Path(args.src).read_text())
    write_program(Path(args.out), words)
    print(f"Assembled {len(words)} instruction(s) to {args.out}")
    return EXIT_OK


def disasm_cmd(args) -> int:
    """Print the assembly text of a binary program file."""
    from .isa import disassemble, read_program
    sys.stdout.write(disassemble(read_program(Path(args.program))))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tataa", description="Dual-mode transformer accelerator toolchain")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug output on the console")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a graph JSON file")
    p.add_argument("graph")
    p.add_argument("--config")
    p.add_argument("--cores", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=compile_cmd)

    p = sub.add_parser("run", help="simulate a compiled program directory or program file")
    p.add_argument("program")
    p.add_argument("--config")
    p.add_argument("--trace", action="store_true", help="write trace.csv")
    p.add_argument("--watchdog", type=int, help="cycle cap")
    p.add_argument("--acc-bits", type=int, choices=(16, 32))
    p.add_argument("--out-dir")
    p.set_defaults(func=run_cmd)

    p = sub.add_parser("approx-report", help="RMSE of the non-linear approximations")
    p.add_argument("--isqrt", metavar="LO:HI")
    p.add_argument("--tanh", metavar="LO:HI")
    p.add_argument("--gelu", metavar="LO:HI")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--config")
    p.set_defaults(func=approx_report_cmd)

    p = sub.add_parser("bench", help="layer-wise cycles of a benchmark model")
    p.add_argument("--model", choices=("bert-base", "tiny", "empty"), default="bert-base")
    p.add_argument("--config")
    p.add_argument("--cores", type=int)
    p.set_defaults(func=bench_cmd)

    p = sub.add_parser("asm", help="assemble a text program")
    p.add_argument("src")
    p.add_argument("out")
    p.set_defaults(func=asm_cmd)

    p = sub.add_parser("disasm", help="disassemble a program file")
    p.add_argument("program")
    p.set_defaults(func=disasm_cmd)
    return parser


def main(argv: list[str] | None = None) -> int:
    """Entry point."""
    args = build_parser().parse_args(argv)

    from .logging_config import get_logger, setup_logging
    out_dir = getattr(args, "out_dir", None)
    setup_logging(
        console_level=logging.DEBUG if args.verbose else logging.WARNING,
        log_file=Path(out_dir) / "tataa.log" if out_dir else None,
    )
    logger = get_logger("main")

    try:
        return args.func(args)
    except (AsmError, EncodingError, QuantError, json.JSONDecodeError, OSError, ValueError) as e:
        code = EXIT_PARSE
        message = str(e)
    except CompileError as e:
        code, message = EXIT_COMPILE, str(e)
    except GraphError as e:
        code, message = EXIT_PARSE, str(e)
    except MachineError as e:
        code, message = EXIT_RUN, str(e)
    except VerificationFailed as e:
        code, message = EXIT_VERIFY, str(e)
    logger.error("%s failed: %s", args.command, message)
    return code


if __name__ == "__main__":
    sys.exit(main())
