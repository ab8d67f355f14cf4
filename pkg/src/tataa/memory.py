"""External memory image, tensor layouts and the placement manifest.

Memory is a flat byte array addressed in 32-byte words. Tensors live in one of
four physical layouts:

``rowblk``
    int8, blocks of 32 rows; inside a block each column is one 32-byte slice.
    This is what LOAD.M streams into an RMX bank.
``colblk``
    int8, blocks of 32 columns; inside a block each row is one slice (RMY banks).
    ``rowblk(A) == colblk(A.T)``.
``vblk``
    bfloat16, blocks of ``lanes`` rows; each column of a block is one vector
    (lanes = rows), so per-row reductions become lane-parallel vector adds.
``bcast``
    bfloat16 scalars, one per word, for broadcast loads.
"""

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import AddressError
from .logging_config import get_logger

logger = get_logger("memory")

WORD = 32
BLOCK = 32


def pad_to(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


def words_for(nbytes: int) -> int:
    return -(-nbytes // WORD)


class Layout(str, Enum):
    ROW = "rowblk"
    COL = "colblk"
    VEC = "vblk"
    BCAST = "bcast"


def vector_words(lanes: int) -> int:
    """Words per vblk column."""
    return words_for(2 * lanes)


def layout_words(layout: Layout, shape, lanes: int) -> int:
    if layout in (Layout.ROW, Layout.COL):
        rows, cols = shape
        return pad_to(rows, BLOCK) * pad_to(cols, BLOCK) // WORD
    if layout == Layout.VEC:
        rows, cols = shape
        return -(-rows // lanes) * cols * vector_words(lanes)
    return int(np.prod(shape))


def pack(layout: Layout, array, lanes: int = 128) -> np.ndarray:
    """Serialize a logical 2-D tensor (or 1-D for bcast) into bytes."""
    a = np.asarray(array)
    if layout == Layout.BCAST:
        out = np.zeros((a.size, WORD // 2), dtype="<u2")
        out[:, 0] = a.reshape(-1)
        return out.view(np.uint8).reshape(-1)
    rows, cols = a.shape
    if layout in (Layout.ROW, Layout.COL):
        padded = np.zeros((pad_to(rows, BLOCK), pad_to(cols, BLOCK)), dtype=np.int8)
        padded[:rows, :cols] = a
        pr, pc = padded.shape
        if layout == Layout.ROW:
            blocks = padded.reshape(pr // BLOCK, BLOCK, pc).transpose(0, 2, 1)
        else:
            blocks = padded.reshape(pr, pc // BLOCK, BLOCK).transpose(1, 0, 2)
        return np.ascontiguousarray(blocks).view(np.uint8).reshape(-1)
    nblk = -(-rows // lanes)
    padded = np.zeros((nblk * lanes, cols), dtype="<u2")
    padded[:rows] = a
    cols_major = np.ascontiguousarray(padded.reshape(nblk, lanes, cols).transpose(0, 2, 1))
    per_col = np.zeros((nblk, cols, vector_words(lanes) * WORD // 2), dtype="<u2")
    per_col[:, :, :lanes] = cols_major
    return per_col.view(np.uint8).reshape(-1)


def unpack(layout: Layout, data: np.ndarray, shape, lanes: int = 128) -> np.ndarray:
    """Inverse of :func:`pack` (padding dropped)."""
    data = np.asarray(data, dtype=np.uint8)
    if layout == Layout.BCAST:
        n = int(np.prod(shape))
        return data[: n * WORD].view("<u2").reshape(n, WORD // 2)[:, 0].astype(np.uint16).reshape(shape)
    rows, cols = shape
    if layout in (Layout.ROW, Layout.COL):
        pr, pc = pad_to(rows, BLOCK), pad_to(cols, BLOCK)
        raw = data[: pr * pc].view(np.int8)
        if layout == Layout.ROW:
            full = raw.reshape(pr // BLOCK, pc, BLOCK).transpose(0, 2, 1).reshape(pr, pc)
        else:
            full = raw.reshape(pc // BLOCK, pr, BLOCK).transpose(1, 0, 2).reshape(pr, pc)
        return np.array(full[:rows, :cols])
    nblk = -(-rows // lanes)
    per_col = vector_words(lanes) * WORD // 2
    raw = data[: nblk * cols * per_col * 2].view("<u2").reshape(nblk, cols, per_col)[:, :, :lanes]
    full = raw.transpose(0, 2, 1).reshape(nblk * lanes, cols)
    return full[:rows].astype(np.uint16)


class MemoryImage:
    """Flat external memory shared by every core."""

    def __init__(self, words: int):
        self.data = np.zeros(words * WORD, dtype=np.uint8)

    @property
    def words(self) -> int:
        return self.data.size // WORD

    def _span(self, word_addr: int, nbytes: int) -> slice:
        start = word_addr * WORD
        if word_addr < 0 or start + nbytes > self.data.size:
            raise AddressError(
                f"access of {nbytes} bytes at word 0x{word_addr:06X} exceeds {self.words} words of memory"
            )
        return slice(start, start + nbytes)

    def read(self, word_addr: int, nbytes: int) -> np.ndarray:
        return self.data[self._span(word_addr, nbytes)].copy()

    def write(self, word_addr: int, payload) -> None:
        payload = np.asarray(payload, dtype=np.uint8).reshape(-1)
        self.data[self._span(word_addr, payload.size)] = payload

    def copy(self) -> "MemoryImage":
        img = MemoryImage(0)
        img.data = self.data.copy()
        return img

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.data.tobytes())

    @classmethod
    def load(cls, path: Path, words: int | None = None) -> "MemoryImage":
        raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
        img = cls(max(words or 0, words_for(raw.size)))
        img.data[: raw.size] = raw
        return img

    def __eq__(self, other) -> bool:
        return isinstance(other, MemoryImage) and np.array_equal(self.data, other.data)


@dataclass
class TensorPlacement:
    name: str
    offset: int  # word address
    shape: list[int]
    dtype: str  # "int8" or "bf16"
    layout: str
    scale: float | None = None

    def size_words(self, lanes: int) -> int:
        return layout_words(Layout(self.layout), self.shape, lanes)


@dataclass
class Manifest:
    """Where every named tensor lives, plus the scale and constant tables."""

    tensors: dict[str, TensorPlacement] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)
    constants: dict[str, int] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    bindings: dict[str, str] = field(default_factory=dict)  # logical tensor -> view key
    batch: int = 1
    cores: int = 1
    lanes: int = 128
    memory_words: int = 0
    config_fingerprint: str = ""

    def add(self, placement: TensorPlacement) -> TensorPlacement:
        self.tensors[placement.name] = placement
        return placement

    def write_tensor(self, image: MemoryImage, name: str, array) -> None:
        p = self.tensors[name]
        image.write(p.offset, pack(Layout(p.layout), array, self.lanes))

    def placement(self, tensor: str, item: int = 0) -> TensorPlacement:
        """Placement of a logical tensor (graph name) for one batch item."""
        key = self.bindings.get(tensor, tensor)
        if key in self.tensors:
            return self.tensors[key]
        return self.tensors[item_key(key, item)]

    def read_tensor(self, image: MemoryImage, name: str) -> np.ndarray:
        p = self.tensors[name]
        nbytes = p.size_words(self.lanes) * WORD
        return unpack(Layout(p.layout), image.read(p.offset, nbytes), p.shape, self.lanes)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["tensors"] = {k: asdict(v) for k, v in self.tensors.items()}
        return data

    def save(self, path: Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        logger.debug("Saved manifest with %d tensors to %s", len(self.tensors), path)

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        with open(path) as f:
            data = json.load(f)
        data["tensors"] = {k: TensorPlacement(**v) for k, v in data.get("tensors", {}).items()}
        return cls(**data)


def item_key(key: str, item: int) -> str:
    return f"{key}#{item}"


class Allocator:
    """Bump allocator over word addresses."""

    def __init__(self, base: int = 0):
        self.next = base

    def take(self, words: int) -> int:
        addr = self.next
        self.next += words
        return addr
