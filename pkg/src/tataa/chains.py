"""Decomposition of non-linear layers into SSA chains of vector primitives.

A chain describes the work for one block of lanes (rows of a bf16 tensor) over
all of its feature columns. Every value is a lane vector; every step maps to a
single ISA instruction (LOAD.V, MUL.V, ADD.V, APP.V, STORE.V) once registers are
assigned. The same chain replays on the host with :mod:`tataa.bfarith` as the
bit-exact oracle, so step order here *is* the arithmetic order on the device.
"""

from dataclasses import dataclass, field
from functools import partial
from itertools import zip_longest

import numpy as np

from . import bfarith
from .bfarith import ArithConfig, DEFAULT_ARITH
from .isa import AppFunc

ELEMENTWISE_OPS = ("gelu", "silu", "relu", "add", "swiglu")
ROWWISE_OPS = ("softmax", "layernorm", "rmsnorm")
NONLINEAR_OPS = ELEMENTWISE_OPS + ROWWISE_OPS

TILE_COLUMNS = 2  # feature vectors per elementwise tile
LOAD_GROUP = 4  # loads per batch in row-wise chains
SINGLE_PASS_COLUMNS = 8  # rows of at most this many columns keep x in registers
BCAST_ROLES = ("gamma", "beta")

MASK_VALUE = -32768.0  # additive causal mask, underflows exp to zero


@dataclass(frozen=True)
class Const:
    """A bfloat16 immediate held in a constant register."""

    bits: int


@dataclass(frozen=True)
class Step:
    kind: str  # load | bcast | mul | add | app | store
    out: int = -1
    a: int = -1
    b: "int | Const" = -1
    func: AppFunc = AppFunc.ISQRT
    raw: bool = False
    role: str = ""
    col: int = 0

    def reads(self) -> list[int]:
        if self.kind in ("load", "bcast"):
            return []
        if self.kind in ("store", "app") or isinstance(self.b, Const) or self.b == self.a:
            return [self.a]
        return [self.a, self.b]


@dataclass
class Chain:
    op: str
    columns: int
    steps: list[Step] = field(default_factory=list)
    values: int = 0

    def constants(self) -> list[int]:
        """Distinct constant patterns, in first-use order."""
        seen: dict[int, None] = {}
        for s in self.steps:
            if isinstance(s.b, Const):
                seen.setdefault(s.b.bits)
        return list(seen)

    def count(self, kind: str) -> int:
        return sum(1 for s in self.steps if s.kind == kind)

    def loads_of(self, role: str) -> int:
        return sum(1 for s in self.steps if s.kind == "load" and s.role == role)

    def peak_live(self) -> int:
        """Most values alive at one step; a lane block never spills more than this.

        Operands read for the last time are released before the step's result is placed.
        """
        last: dict[int, int] = {}
        for i, s in enumerate(self.steps):
            for v in s.reads():
                last[v] = i
        ending = [0] * len(self.steps)
        for i in last.values():
            ending[i] += 1
        live = peak = 0
        for i, s in enumerate(self.steps):
            live -= ending[i]
            if s.kind != "store":
                peak = max(peak, live + 1)
                live += s.out in last
        return peak


class ChainBuilder:
    """Appends SSA steps; composite helpers expand into primitive ops in device order."""

    def __init__(self, op: str, columns: int, arith: ArithConfig = DEFAULT_ARITH):
        self.chain = Chain(op, columns)
        self.arith = arith

    def _new(self) -> int:
        v = self.chain.values
        self.chain.values += 1
        return v

    def _emit(self, kind: str, **kw) -> int:
        out = self._new()
        self.chain.steps.append(Step(kind, out=out, **kw))
        return out

    def load(self, role: str, col: int) -> int:
        return self._emit("load", role=role, col=col)

    def bcast(self, role: str, col: int) -> int:
        return self._emit("bcast", role=role, col=col)

    def mul(self, a: int, b: "int | Const") -> int:
        return self._emit("mul", a=a, b=b)

    def add(self, a: int, b: "int | Const") -> int:
        return self._emit("add", a=a, b=b)

    def app(self, a: int, func: AppFunc, raw: bool = False) -> int:
        return self._emit("app", a=a, func=func, raw=raw)

    def store(self, v: int, col: int, role: str = "out") -> None:
        self.chain.steps.append(Step("store", a=v, role=role, col=col))

    def interleave(self, bodies) -> None:
        """Emit each independent body into its own list, then merge the lists round robin."""
        main = self.chain.steps
        lanes = []
        for body in bodies:
            self.chain.steps = []
            body()
            lanes.append(self.chain.steps)
        self.chain.steps = main
        for row in zip_longest(*lanes):
            main.extend(s for s in row if s is not None)

    # Composites

    def isqrt(self, v: int) -> int:
        t = self.app(v, AppFunc.ISQRT, raw=True)
        t2 = self.app(v, AppFunc.ISQRT)
        nhx = self.mul(v, Const(bfarith.NEG_HALF))
        for i in range(self.arith.newton_iters):
            if i:
                t2 = self.mul(t, t)
            t3 = self.mul(t, t2)
            p = self.mul(nhx, t3)
            q = self.mul(t, Const(bfarith.THREE_HALVES))
            t = self.add(q, p)
        return t

    def div_by(self, num: int, r: int) -> int:
        """num / den given r = isqrt(den)."""
        return self.mul(self.mul(num, r), r)

    def tanh(self, x: int) -> int:
        x2 = self.mul(x, x)
        x3 = self.mul(x2, x)
        n1 = self.mul(x, Const(bfarith.PADE_27))
        num = self.add(n1, x3)
        d1 = self.mul(x2, Const(bfarith.PADE_9))
        den = self.add(d1, Const(bfarith.PADE_27))
        r = self.isqrt(den)
        return self.app(self.div_by(num, r), AppFunc.CLAMP)

    def gelu(self, x: int) -> int:
        h = self.mul(x, Const(bfarith.HALF))
        x2 = self.mul(x, x)
        x3 = self.mul(x2, x)
        a = self.mul(x3, Const(bfarith.GELU_CUBIC))
        b = self.add(a, x)
        u = self.mul(b, Const(bfarith.SQRT_2_OVER_PI))
        th = self.tanh(u)
        s = self.add(th, Const(bfarith.ONE))
        return self.mul(h, s)

    def sigmoid(self, x: int) -> int:
        h = self.mul(x, Const(bfarith.HALF))
        th = self.tanh(h)
        s = self.mul(th, Const(bfarith.HALF))
        return self.add(s, Const(bfarith.HALF))

    def silu(self, x: int) -> int:
        return self.mul(x, self.sigmoid(x))

    def swiglu(self, a: int, z: int) -> int:
        return self.mul(self.silu(a), self.mul(a, self.sigmoid(z)))

    def exp(self, x: int) -> int:
        return self.app(self.mul(x, Const(bfarith.INV_LN2)), AppFunc.POW2)

    def build(self) -> Chain:
        return self.chain


class TreeSum:
    """Pairwise reduction fed one value at a time.

    Partial sums are combined as soon as two of equal depth exist, which gives the
    balanced two-by-two tree of a zero-padded power-of-two input.
    """

    def __init__(self, builder: ChainBuilder):
        self.b = builder
        self.stack: list[tuple[int, int]] = []

    def push(self, v: int) -> None:
        level = 0
        while self.stack and self.stack[-1][0] == level:
            _, prev = self.stack.pop()
            v = self.b.add(prev, v)
            level += 1
        self.stack.append((level, v))

    def result(self) -> int:
        _, acc = self.stack.pop()
        while self.stack:
            _, v = self.stack.pop()
            acc = self.b.add(v, acc)
        return acc


def _reciprocal(d: int) -> Const:
    return Const(int(bfarith.from_float(1.0 / d)))


def _activation(b: ChainBuilder, op: str, col: int, x: int, y: int | None) -> None:
    if op == "gelu":
        out = b.gelu(x)
    elif op == "silu":
        out = b.silu(x)
    elif op == "relu":
        out = b.app(x, AppFunc.RELU)
    elif op == "add":
        out = b.add(x, y)
    else:
        out = b.swiglu(x, y)
    b.store(out, col)


def _elementwise(b: ChainBuilder, op: str, columns: int) -> None:
    """Tiles of TILE_COLUMNS vectors; the next tile's loads precede this tile's compute.

    Columns of a tile are interleaved step by step so their chains overlap in the pipeline.
    """
    two_inputs = op in ("add", "swiglu")
    tiles = [list(range(c, min(c + TILE_COLUMNS, columns))) for c in range(0, columns, TILE_COLUMNS)]

    def load_tile(cols):
        return [(b.load("x", c), b.load("y", c) if two_inputs else None) for c in cols]

    pending = load_tile(tiles[0]) if tiles else []
    for t, cols in enumerate(tiles):
        current = pending
        pending = load_tile(tiles[t + 1]) if t + 1 < len(tiles) else []
        b.interleave([partial(_activation, b, op, c, x, y) for c, (x, y) in zip(cols, current)])


def _grouped_loads(b: ChainBuilder, columns: int, roles: tuple[str, ...] = ("x",), group: int = LOAD_GROUP):
    """Yield (col, values) with each group's loads issued one group ahead of its use.

    ``values`` follows ``roles``; gamma and beta arrive as broadcast loads.
    """

    def issue(cols):
        return [(c, [b.bcast(r, c) if r in BCAST_ROLES else b.load(r, c) for r in roles]) for c in cols]

    groups = [range(c, min(c + group, columns)) for c in range(0, columns, group)]
    pending = issue(groups[0]) if groups else []
    for g in range(len(groups)):
        current = pending
        pending = issue(groups[g + 1]) if g + 1 < len(groups) else []
        yield from current


def _softmax(b: ChainBuilder, columns: int, causal: bool, resident: int) -> None:
    """Rows longer than ``resident`` reload x and recompute exp rather than spill it."""
    roles = ("x", "mask") if causal else ("x",)
    group = LOAD_GROUP // len(roles)
    single_pass = columns <= resident

    def exp_of(values):
        x = values[0]
        if causal:
            x = b.add(x, values[1])
        return b.exp(x)

    total = TreeSum(b)
    kept = {}
    for c, values in _grouped_loads(b, columns, roles, group):
        e = exp_of(values)
        if single_pass:
            kept[c] = e
        total.push(e)
    r = b.isqrt(total.result())
    if single_pass:
        for c in range(columns):
            b.store(b.div_by(kept[c], r), c)
    else:
        for c, values in _grouped_loads(b, columns, roles, group):
            b.store(b.div_by(exp_of(values), r), c)


def _norm(b: ChainBuilder, op: str, columns: int, eps: float, resident: int) -> None:
    """E[x] and E[x^2] trees fed from one stream of x."""
    centered = op == "layernorm"
    single_pass = columns <= resident
    s_tree = TreeSum(b) if centered else None
    q_tree = TreeSum(b)
    kept = {}
    for c, (x,) in _grouped_loads(b, columns):
        if single_pass:
            kept[c] = x
        if s_tree is not None:
            s_tree.push(x)
        q_tree.push(b.mul(x, x))

    inv_d = _reciprocal(columns)
    ex2 = b.mul(q_tree.result(), inv_d)
    eps_c = Const(int(bfarith.from_float(eps)))
    if centered:
        mean = b.mul(s_tree.result(), inv_d)
        m2 = b.mul(mean, mean)
        var = b.app(b.add(ex2, b.mul(m2, Const(bfarith.NEG_ONE))), AppFunc.RELU)
        nmean = b.mul(mean, Const(bfarith.NEG_ONE))
        r = b.isqrt(b.add(var, eps_c))
    else:
        r = b.isqrt(b.add(ex2, eps_c))

    params = BCAST_ROLES if centered else BCAST_ROLES[:1]
    group = LOAD_GROUP // 2
    if single_pass:
        stream = ((c, [kept[c], *p]) for c, p in _grouped_loads(b, columns, params, group))
    else:
        stream = _grouped_loads(b, columns, ("x", *params), group)
    for c, values in stream:
        x = values[0]
        if centered:
            x = b.add(x, nmean)
        y = b.mul(b.mul(x, r), values[1])
        if centered:
            y = b.add(y, values[2])
        b.store(y, c)


def build_chain(
    op: str,
    columns: int,
    attrs: dict | None = None,
    arith: ArithConfig = DEFAULT_ARITH,
    resident: int = SINGLE_PASS_COLUMNS,
) -> Chain:
    """SSA chain of ``op`` over a lane block with ``columns`` feature vectors.

    Row-wise chains over at most ``resident`` columns keep x (norms) or exp(x)
    (softmax) in registers between passes; longer rows load x twice.
    """
    attrs = attrs or {}
    if op not in NONLINEAR_OPS:
        raise ValueError(f"{op!r} is not a non-linear op")
    b = ChainBuilder(op, columns, arith)
    if op in ELEMENTWISE_OPS:
        _elementwise(b, op, columns)
    elif op == "softmax":
        _softmax(b, columns, bool(attrs.get("causal", False)), resident)
    else:
        default_eps = 1e-5 if op == "layernorm" else 1e-6
        _norm(b, op, columns, float(attrs.get("eps", default_eps)), resident)
    return b.build()


def causal_mask(rows: int, cols: int):
    """bf16 additive mask: 0 where key <= query, a large negative value elsewhere."""
    q = np.arange(rows)[:, None]
    k = np.arange(cols)[None, :]
    return np.where(k > q, bfarith.from_float(MASK_VALUE), np.uint16(0)).astype(np.uint16)
