"""Exception hierarchy shared by every toolchain stage."""


class TataaError(Exception):
    """Base class for all toolchain errors."""


class ArithDomainError(TataaError, ValueError):
    """An arithmetic kernel was called outside its domain."""


class QuantError(TataaError, ValueError):
    """Invalid quantization input (empty calibration set, bad scale)."""


class EncodingError(TataaError, ValueError):
    """An instruction field does not fit its encoding, or a word does not decode."""


class AsmError(TataaError):
    """Assembly text could not be parsed."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class GraphError(TataaError):
    """Malformed graph or failed shape inference."""

    def __init__(self, message: str, node_id: str | None = None):
        prefix = f"node {node_id!r}: " if node_id else ""
        super().__init__(prefix + message)
        self.node_id = node_id


class CompileError(GraphError):
    """Lowering failed for a node, or the lowered program breaks an invariant."""


class MachineError(TataaError):
    """Base class for simulator faults."""


class TileShapeError(MachineError):
    """MATMUL operands do not form a valid tile."""


class BankNotLoadedError(MachineError):
    """An operand register was read before anything was loaded into it."""


class VectorLengthError(MachineError):
    """A vector instruction exceeds the lane count."""


class AddressError(MachineError):
    """A memory access falls outside external memory."""


class MissingScaleError(MachineError):
    """A store needs scale factors that no CONFIG instruction provided."""


class WatchdogError(MachineError):
    """The run exceeded its cycle cap."""

    def __init__(self, core: int, cycles: int, cap: int):
        super().__init__(f"core {core}: watchdog tripped at cycle {cycles} (cap {cap})")
        self.core = core
        self.cycles = cycles
        self.cap = cap
