"""Machine configuration."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .bfarith import ArithConfig
from .logging_config import get_logger

logger = get_logger("config")

ROWS_PER_DMPU = 4


@dataclass(frozen=True)
class MachineConfig:
    """Parameters of a TATAA machine. Defaults are the published U280 build."""

    cores: int = 8  # K
    dmpus: int = 8  # N per core
    pe_cols: int = 16  # W per DMPU
    pack: int = 2  # int8 MACs per multiplier
    freq_mhz: float = 225.0
    d_mat: int = 1024  # rows per matrix bank
    d_fpv: int = 64  # rows per vector bank
    mem_latency_cycles: int = 100
    mem_bytes_per_cycle_per_port: int = 32
    ports_per_core: int = 2
    acc_bits: int = 16

    vregs: int = 8  # vector registers per side
    const_regs: int = 32
    vector_stages: int = 4
    mem_words: int = 1 << 20  # 32-byte words of external memory
    watchdog_cycles: int = 50_000_000
    exp_lut: bool = False
    newton_iters: int = 1
    timing: bool = True

    def __post_init__(self):
        for name in ("cores", "dmpus", "pe_cols", "pack", "d_mat", "d_fpv", "ports_per_core",
                     "vregs", "vector_stages", "mem_words", "watchdog_cycles", "newton_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mem_latency_cycles < 0:
            raise ValueError("mem_latency_cycles must be >= 0")
        if self.mem_bytes_per_cycle_per_port < 1:
            raise ValueError("mem_bytes_per_cycle_per_port must be >= 1")
        if self.acc_bits not in (16, 32):
            raise ValueError(f"acc_bits must be 16 or 32, got {self.acc_bits}")
        if self.vregs % 2 or self.vregs > 16:
            raise ValueError("vregs must be even and at most 16")
        if not 1 <= self.const_regs <= 32:
            raise ValueError("const_regs must be in 1..32")
        if self.d_fpv >= self.d_mat:
            raise ValueError("d_fpv must be smaller than d_mat")
        if self.freq_mhz <= 0:
            raise ValueError("freq_mhz must be positive")

    # Derived geometry

    @property
    def tile_rows(self) -> int:
        """X-direction rows of the effective systolic array."""
        return self.pack * self.pe_cols

    @property
    def tile_cols(self) -> int:
        return ROWS_PER_DMPU * self.dmpus

    @property
    def lanes(self) -> int:
        """SIMD lanes per core."""
        return self.pe_cols * self.dmpus

    @property
    def theoretical_gflops(self) -> float:
        return self.cores * self.dmpus * self.pe_cols * self.freq_mhz / 1000.0

    @property
    def peak_gops(self) -> float:
        """int8 peak: two ops per MAC over the effective array."""
        return 2.0 * self.cores * self.tile_rows * self.tile_cols * self.freq_mhz / 1000.0

    def arith(self) -> ArithConfig:
        return ArithConfig(newton_iters=self.newton_iters, exp_lut=self.exp_lut)

    def with_overrides(self, **overrides) -> "MachineConfig":
        """Copy with the non-None overrides applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    # Serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def header_lines(self) -> list[str]:
        """Report header: full configuration plus fingerprint."""
        lines = [f"# config fingerprint {self.fingerprint()}"]
        lines += [f"# {key} = {value}" for key, value in self.to_dict().items()]
        return lines

    @classmethod
    def from_dict(cls, data: dict) -> "MachineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            logger.warning("Ignoring unknown config keys: %s", ", ".join(unknown))
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def load(cls, path: Path | None = None) -> "MachineConfig":
        """Load configuration from a JSON file, or return defaults."""
        if path is None:
            return cls()
        path = Path(path)
        if path.exists():
            try:
                with open(path) as f:
                    data = json.load(f)
                logger.debug("Loaded config from %s", path)
                return cls.from_dict(data)
            except (json.JSONDecodeError, TypeError, ValueError) as e:
                logger.warning("Error loading config %s: %s, using defaults", path, e)
        else:
            logger.warning("Config file %s not found, using defaults", path)
        return cls()

    def save(self, path: Path):
        """Save configuration to a JSON file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.debug("Saved config to %s", path)
