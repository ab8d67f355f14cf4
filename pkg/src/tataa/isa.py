"""The TATAA instruction set: fields, 64-bit encoding, assembly text and program files.

Word layout (bit 63 first)::

    [63:56] opcode  [55:48] dst  [47:40] srcA  [39:32] srcB
    [31:16] len     [15:4]  addr [3:0]   flags

``addr`` is a 32-byte word offset inside the segment selected by ``CONFIG SEG``.
CONFIG reuses srcA/srcB/len as a 32-bit payload and dst as the slot id.
"""

import re
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import AsmError, EncodingError
from .logging_config import get_logger

logger = get_logger("isa")

WORD_BYTES = 32  # one memory beat
ADDR_BITS = 12
SEGMENT_WORDS = 1 << ADDR_BITS
MAX_LEN = 0xFFFF

PROGRAM_MAGIC = b"TATA"
PROGRAM_VERSION = 1


class Opcode(IntEnum):
    CONFIG = 0x01
    LOAD_M = 0x02
    LOAD_V = 0x03
    MATMUL = 0x10
    MUL_V = 0x20
    ADD_V = 0x21
    APP_V = 0x22
    STORE_M = 0x30
    STORE_V = 0x31
    HALT = 0xFF

    @property
    def mnemonic(self) -> str:
        return self.name.replace("_", ".")

    @classmethod
    def from_mnemonic(cls, text: str) -> "Opcode":
        return cls[text.strip().upper().replace(".", "_")]


class QuantMode(IntEnum):
    """Quantization-unit conversion applied by a store."""

    I8_I8 = 0
    I8_BF16 = 1
    BF16_I8 = 2
    BF16_BF16 = 3


class AppFunc(IntEnum):
    """Output-LUT function of APP.V."""

    ISQRT = 0  # magic-constant seed, squared unless raw
    POW2 = 1  # 2^floor(x)
    CLAMP = 2  # saturate to [-1, 1]
    RELU = 3


FLAG_T = 0x1  # transpose (STORE.M), broadcast (LOAD.V), accumulate (MATMUL)
FLAG_RAW = 0x8
FLAG_ACC = FLAG_T


def flags_of(t: bool = False, mode: int = 0, raw: bool = False) -> int:
    return (FLAG_T if t else 0) | ((int(mode) & 0x3) << 1) | (FLAG_RAW if raw else 0)


def flag_mode(flags: int) -> int:
    return (flags >> 1) & 0x3


# Register address map

NONE = 0x00
RMX0, RMX1, RMY0, RMY1, DMB = 0x01, 0x02, 0x03, 0x04, 0x05
VX_BASE = 0x10
VY_BASE = 0x20
C_BASE = 0x40
MAX_VREGS = 16
MAX_CONSTS = 32

RMX = (RMX0, RMX1)
RMY = (RMY0, RMY1)


def vx(i: int) -> int:
    return VX_BASE + i


def vy(i: int) -> int:
    return VY_BASE + i


def creg(i: int) -> int:
    return C_BASE + i


def is_vreg(reg: int) -> bool:
    return VX_BASE <= reg < VX_BASE + MAX_VREGS or VY_BASE <= reg < VY_BASE + MAX_VREGS


def is_creg(reg: int) -> bool:
    return C_BASE <= reg < C_BASE + MAX_CONSTS


def reg_name(reg: int) -> str:
    fixed = {RMX0: "RMX0", RMX1: "RMX1", RMY0: "RMY0", RMY1: "RMY1", DMB: "DMB"}
    if reg in fixed:
        return fixed[reg]
    if VX_BASE <= reg < VX_BASE + MAX_VREGS:
        return f"VX{reg - VX_BASE}"
    if VY_BASE <= reg < VY_BASE + MAX_VREGS:
        return f"VY{reg - VY_BASE}"
    if is_creg(reg):
        return f"C{reg - C_BASE}"
    raise EncodingError(f"register id 0x{reg:02X} is not mapped")


_REG_RE = re.compile(r"^(RMX[01]|RMY[01]|DMB|VX\d+|VY\d+|C\d+)$")


def parse_reg(name: str) -> int:
    name = name.strip().upper()
    if not _REG_RE.match(name):
        raise KeyError(name)
    fixed = {"RMX0": RMX0, "RMX1": RMX1, "RMY0": RMY0, "RMY1": RMY1, "DMB": DMB}
    if name in fixed:
        return fixed[name]
    index = int(name[2:] if name[0] == "V" else name[1:])
    limit = MAX_CONSTS if name[0] == "C" else MAX_VREGS
    if index >= limit:
        raise KeyError(name)
    if name.startswith("VX"):
        return vx(index)
    if name.startswith("VY"):
        return vy(index)
    return creg(index)


@dataclass(frozen=True)
class RegisterMap:
    """Architectural register files of one core."""

    d_mat: int
    d_fpv: int
    vregs: int
    const_regs: int = MAX_CONSTS

    def vector_regs(self) -> list[int]:
        return [vx(i) for i in range(self.vregs)] + [vy(i) for i in range(self.vregs)]

    def valid(self, reg: int) -> bool:
        if reg in (RMX0, RMX1, RMY0, RMY1, DMB):
            return True
        if is_vreg(reg):
            return (reg & 0x0F) < self.vregs
        return is_creg(reg) and reg - C_BASE < self.const_regs

    @classmethod
    def from_config(cls, config) -> "RegisterMap":
        return cls(config.d_mat, config.d_fpv, config.vregs, config.const_regs)


# CONFIG slots

SLOT_CONST_LAST = 0x1F
SLOT_SCALE_BASE = 0x40
QUANT_SETS = 21
SLOT_SEG = 0x80
SLOT_STRIDE = 0x81
SLOT_QSET = 0x82


def scale_slot(qset: int, which: int) -> int:
    """Slot of S_x (0), S_y (1) or S_z (2) for quant set ``qset``."""
    return SLOT_SCALE_BASE + 3 * qset + which


def _valid_slot(slot: int) -> bool:
    return slot <= SLOT_CONST_LAST or SLOT_SCALE_BASE <= slot < scale_slot(QUANT_SETS, 0) or slot in (
        SLOT_SEG,
        SLOT_STRIDE,
        SLOT_QSET,
    )


def float32_bits(value: float) -> int:
    return int(np.asarray(value, dtype=np.float32).view(np.uint32))


def bits_float32(payload: int) -> float:
    return float(np.asarray(payload & 0xFFFFFFFF, dtype=np.uint32).view(np.float32))


@dataclass(frozen=True)
class Instruction:
    op: Opcode
    dst: int = NONE
    src_a: int = NONE
    src_b: int = NONE
    length: int = 0
    addr: int = 0
    flags: int = 0

    @property
    def payload(self) -> int:
        """32-bit CONFIG payload."""
        return (self.src_a << 24) | (self.src_b << 16) | self.length

    @property
    def mode(self) -> int:
        return flag_mode(self.flags)

    @property
    def transpose(self) -> bool:
        return bool(self.flags & FLAG_T)

    @property
    def raw(self) -> bool:
        return bool(self.flags & FLAG_RAW)

    def validate(self) -> None:
        for name, value, bits in (
            ("dst", self.dst, 8),
            ("srcA", self.src_a, 8),
            ("srcB", self.src_b, 8),
            ("len", self.length, 16),
            ("addr", self.addr, ADDR_BITS),
            ("flags", self.flags, 4),
        ):
            if not 0 <= value < (1 << bits):
                raise EncodingError(f"{self.op.mnemonic}: {name}={value} does not fit {bits} bits")
        _CHECKS[self.op](self)

    def text(self) -> str:
        return disassemble_one(self)


def config(slot: int, payload: int) -> Instruction:
    if not 0 <= payload <= 0xFFFFFFFF:
        raise EncodingError(f"CONFIG payload 0x{payload:X} does not fit 32 bits")
    return Instruction(Opcode.CONFIG, slot, (payload >> 24) & 0xFF, (payload >> 16) & 0xFF, payload & 0xFFFF)


def _require(cond: bool, ins: Instruction, what: str) -> None:
    if not cond:
        raise EncodingError(f"{ins.op.mnemonic}: {what}")


def _check_config(i):
    _require(_valid_slot(i.dst), i, f"unknown CONFIG slot 0x{i.dst:02X}")
    _require(i.addr == 0 and i.flags == 0, i, "CONFIG takes no addr or flags")


def _check_load_m(i):
    _require(i.dst in RMX + RMY, i, "destination must be RMX0/1 or RMY0/1")
    _require(i.src_a == NONE and i.src_b == NONE and i.flags == 0, i, "unused fields must be zero")


def _check_load_v(i):
    _require(is_vreg(i.dst), i, "destination must be a vector register")
    _require(i.src_a == NONE and i.src_b == NONE and i.flags & ~FLAG_T == 0, i, "unused fields must be zero")


def _check_matmul(i):
    _require(i.dst == DMB and i.src_a in RMX and i.src_b in RMY, i, "operands must be DMB, RMX bank, RMY bank")
    _require(i.addr == 0 and i.flags & ~FLAG_ACC == 0, i, "only the accumulate flag is valid")


def _check_binary(i):
    _require(is_vreg(i.dst) or i.dst == DMB, i, "destination must be a vector register or DMB")
    _require(is_vreg(i.src_a), i, "srcA must be a vector register")
    _require(is_vreg(i.src_b) or is_creg(i.src_b), i, "srcB must be a vector or constant register")
    _require(i.addr == 0 and i.flags == 0, i, "unused fields must be zero")


def _check_app(i):
    _require(is_vreg(i.dst) or i.dst == DMB, i, "destination must be a vector register or DMB")
    _require(is_vreg(i.src_a) and i.src_b == NONE, i, "APP.V reads srcA only")
    _require(i.addr == 0 and i.flags & FLAG_T == 0, i, "unused fields must be zero")


def _check_store_m(i):
    _require(i.dst == NONE and i.src_a == DMB, i, "STORE.M stores DMB")
    _require(i.src_b < QUANT_SETS, i, f"quant set {i.src_b} out of range")
    _require(i.flags & FLAG_RAW == 0, i, "raw flag is not valid on stores")


def _check_store_v(i):
    _require(i.dst == NONE and (is_vreg(i.src_a) or i.src_a == DMB), i, "source must be a vector register or DMB")
    _require(i.src_b == NONE and i.flags & (FLAG_T | FLAG_RAW) == 0, i, "unused fields must be zero")


def _check_halt(i):
    _require((i.dst, i.src_a, i.src_b, i.length, i.addr, i.flags) == (0, 0, 0, 0, 0, 0), i, "HALT has no operands")


_CHECKS = {
    Opcode.CONFIG: _check_config,
    Opcode.LOAD_M: _check_load_m,
    Opcode.LOAD_V: _check_load_v,
    Opcode.MATMUL: _check_matmul,
    Opcode.MUL_V: _check_binary,
    Opcode.ADD_V: _check_binary,
    Opcode.APP_V: _check_app,
    Opcode.STORE_M: _check_store_m,
    Opcode.STORE_V: _check_store_v,
    Opcode.HALT: _check_halt,
}


# Binary encoding


def encode(ins: Instruction) -> int:
    ins.validate()
    return (
        (int(ins.op) << 56)
        | (ins.dst << 48)
        | (ins.src_a << 40)
        | (ins.src_b << 32)
        | (ins.length << 16)
        | (ins.addr << 4)
        | ins.flags
    )


def decode(word: int) -> Instruction:
    word = int(word)
    if not 0 <= word < (1 << 64):
        raise EncodingError(f"0x{word:X} is not a 64-bit word")
    try:
        op = Opcode(word >> 56)
    except ValueError:
        raise EncodingError(f"unknown opcode 0x{word >> 56:02X}") from None
    ins = Instruction(
        op,
        (word >> 48) & 0xFF,
        (word >> 40) & 0xFF,
        (word >> 32) & 0xFF,
        (word >> 16) & 0xFFFF,
        (word >> 4) & 0xFFF,
        word & 0xF,
    )
    ins.validate()
    return ins


# Assembly text

# operand roles per opcode, in text order
_SYNTAX = {
    Opcode.CONFIG: ("slot", "payload"),
    Opcode.LOAD_M: ("dst", "addr", "len"),
    Opcode.LOAD_V: ("dst", "addr", "len"),
    Opcode.MATMUL: ("srcA", "srcB", "len"),
    Opcode.MUL_V: ("dst", "srcA", "srcB", "len"),
    Opcode.ADD_V: ("dst", "srcA", "srcB", "len"),
    Opcode.APP_V: ("dst", "srcA", "len"),
    Opcode.STORE_M: ("addr", "len", "qset"),
    Opcode.STORE_V: ("srcA", "addr", "len"),
    Opcode.HALT: (),
}

_FLAG_RE = re.compile(r"^(T|B|A|R|Q[0-3]|F[0-3])$")
_LINE_RE = re.compile(r"\s*([^\s,]+)[\s,]*(.*)$")


def parse_number(token: str) -> int:
    """Decimal, ``0x`` hex or assembler-style ``0100H`` hex."""
    t = token.strip().upper()
    if t.startswith("0X"):
        return int(t[2:], 16)
    if t.endswith("H") and len(t) > 1:
        return int(t[:-1], 16)
    return int(t, 10)


def _assemble_line(text: str, lineno: int) -> Instruction | None:
    code = text.split(";", 1)[0]
    if not code.strip():
        return None
    match = _LINE_RE.match(code)
    if match is None:
        raise AsmError("missing mnemonic", lineno, len(code) - len(code.lstrip()) + 1)
    head, head_col = match.group(1), match.start(1) + 1
    tokens = [(head, head_col)]
    pos = match.start(2)
    if match.group(2).strip():
        for part in code[pos:].split(","):
            column = pos + (len(part) - len(part.lstrip())) + 1
            tokens.append((part.strip(), column))
            pos += len(part) + 1

    try:
        op = Opcode.from_mnemonic(head)
    except KeyError:
        raise AsmError(f"unknown mnemonic {head!r}", lineno, head_col) from None

    roles = _SYNTAX[op]
    operands, extra = tokens[1 : 1 + len(roles)], tokens[1 + len(roles) :]
    if len(operands) < len(roles):
        raise AsmError(f"{op.mnemonic} expects {len(roles)} operands, got {len(operands)}", lineno, head_col)

    fields = {"dst": NONE, "srcA": NONE, "srcB": NONE, "len": 0, "addr": 0}
    payload = None
    for role, (token, col) in zip(roles, operands):
        try:
            if role in ("dst", "srcA", "srcB"):
                fields[role] = parse_reg(token)
            elif role == "payload":
                payload = parse_number(token)
            elif role == "slot":
                fields["dst"] = parse_number(token)
            elif role == "qset":
                fields["srcB"] = parse_number(token)
            else:
                fields[role] = parse_number(token)
        except KeyError:
            raise AsmError(f"undefined register {token!r}", lineno, col) from None
        except ValueError:
            raise AsmError(f"bad number {token!r}", lineno, col) from None

    if op == Opcode.MATMUL:
        fields["dst"] = DMB
    if op == Opcode.STORE_M:
        fields["srcA"] = DMB

    flags = 0
    for token, col in extra:
        t = token.upper()
        if not _FLAG_RE.match(t):
            raise AsmError(f"unexpected operand {token!r}", lineno, col)
        if t in ("T", "B", "A"):
            flags |= FLAG_T
        elif t == "R":
            flags |= FLAG_RAW
        else:
            flags |= int(t[1]) << 1

    try:
        if op == Opcode.CONFIG:
            ins = config(fields["dst"], payload)
        else:
            ins = Instruction(op, fields["dst"], fields["srcA"], fields["srcB"], fields["len"], fields["addr"], flags)
        ins.validate()
    except EncodingError as e:
        raise AsmError(str(e), lineno, head_col) from None
    return ins


def assemble(text: str) -> list[int]:
    """Assemble program text into 64-bit words."""
    words = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        ins = _assemble_line(line, lineno)
        if ins is not None:
            words.append(encode(ins))
    logger.debug("Assembled %d instructions", len(words))
    return words


def _flag_tokens(ins: Instruction) -> list[str]:
    out = []
    if ins.op in (Opcode.STORE_M, Opcode.STORE_V):
        if ins.transpose:
            out.append("T")
        out.append(f"Q{ins.mode}")
    elif ins.op == Opcode.LOAD_V and ins.transpose:
        out.append("B")
    elif ins.op == Opcode.MATMUL and ins.flags & FLAG_ACC:
        out.append("A")
    elif ins.op == Opcode.APP_V:
        out.append(f"F{ins.mode}")
        if ins.raw:
            out.append("R")
    return out


def disassemble_one(ins: Instruction) -> str:
    parts = []
    for role in _SYNTAX[ins.op]:
        if role == "slot":
            parts.append(f"0x{ins.dst:02X}")
        elif role == "payload":
            parts.append(f"0x{ins.payload:08X}")
        elif role in ("dst", "srcA", "srcB"):
            parts.append(reg_name({"dst": ins.dst, "srcA": ins.src_a, "srcB": ins.src_b}[role]))
        elif role == "addr":
            parts.append(f"{ins.addr:04X}H")
        elif role == "qset":
            parts.append(str(ins.src_b))
        else:
            parts.append(str(ins.length))
    operands = ",".join(parts + _flag_tokens(ins))
    return f"{ins.op.mnemonic} {operands}" if operands else ins.op.mnemonic


def disassemble(words) -> str:
    return "".join(disassemble_one(decode(w)) + "\n" for w in words)


# Program files


def write_program(path: Path, words) -> None:
    arr = np.asarray(list(words), dtype="<u8")
    with open(path, "wb") as f:
        f.write(PROGRAM_MAGIC + struct.pack("<BI", PROGRAM_VERSION, len(arr)))
        f.write(arr.tobytes())


def read_program(path: Path) -> list[int]:
    data = Path(path).read_bytes()
    header = len(PROGRAM_MAGIC) + 5
    if data[:4] != PROGRAM_MAGIC or len(data) < header:
        raise EncodingError(f"{path}: not a TATAA program file")
    version, count = struct.unpack("<BI", data[4:header])
    if version != PROGRAM_VERSION:
        raise EncodingError(f"{path}: unsupported program version {version}")
    if len(data) != header + 8 * count:
        raise EncodingError(f"{path}: expected {count} words, file is truncated or padded")
    return [int(w) for w in np.frombuffer(data, dtype="<u8", offset=header, count=count)]
