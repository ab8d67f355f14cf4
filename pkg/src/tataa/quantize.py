"""Static post-training quantization and the on-chip requantization modes.

Scales are symmetric and per-tensor. Every conversion uses floor (toward
negative infinity) and clamps to [-127, 127]; -128 is never produced.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import bfarith
from .errors import QuantError
from .logging_config import get_logger

logger = get_logger("quantize")

QMIN = -127
QMAX = 127
SCALE_EPSILON = 1e-8


def _check_scale(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise QuantError(f"{name} must be a positive finite scale, got {value!r}")
    return value


@dataclass(frozen=True)
class QuantParams:
    """Scale factors of one quantized product Z = X.Y."""

    s_x: float
    s_y: float
    s_z: float = 1.0

    def __post_init__(self):
        for name in ("s_x", "s_y", "s_z"):
            object.__setattr__(self, name, _check_scale(name, getattr(self, name)))

    @property
    def multiplier(self) -> float:
        """Combined requantization factor, formed once at CONFIG time."""
        return (self.s_x * self.s_y) / self.s_z


@dataclass
class QTensor:
    """An int8 tensor with its per-tensor scale."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        self.scale = _check_scale("scale", self.scale)
        if self.data.size and int(self.data.min()) < QMIN:
            raise QuantError("QTensor elements must lie in [-127, 127]")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.scale


@dataclass
class Calibrator:
    """Running max-abs observer; partial calibrators merge for parallel reduction."""

    max_abs: float = 0.0
    count: int = field(default=0)

    def observe(self, sample) -> None:
        arr = np.asarray(sample, dtype=np.float64)
        if arr.size == 0:
            raise QuantError("calibration sample is empty")
        self.max_abs = max(self.max_abs, float(np.max(np.abs(arr))))
        self.count += 1

    def merge(self, other: "Calibrator") -> "Calibrator":
        return Calibrator(max(self.max_abs, other.max_abs), self.count + other.count)

    def scale(self) -> float:
        if self.count == 0:
            raise QuantError("no calibration samples observed")
        return max(self.max_abs / QMAX, SCALE_EPSILON)


def calibrate_scale(samples: Iterable) -> float:
    """S = max|x| / 127 over every sample, floored at a tiny epsilon."""
    calib = Calibrator()
    for sample in samples:
        calib.observe(sample)
    scale = calib.scale()
    logger.debug("Calibrated scale %.6g from %d samples (max |x| %.6g)", scale, calib.count, calib.max_abs)
    return scale


def _clamp_floor(values) -> np.ndarray:
    return np.clip(np.floor(values), QMIN, QMAX).astype(np.int8)


def quantize_tensor(x, scale: float) -> QTensor:
    """q = clamp(floor(x / S), -127, 127)."""
    scale = _check_scale("scale", scale)
    return QTensor(_clamp_floor(np.asarray(x, dtype=np.float64) / scale), scale)


def requantize(acc, params: QuantParams):
    """int accumulator -> int8 through floor(acc * S_x * S_y / S_z)."""
    out = _clamp_floor(np.asarray(acc, dtype=np.float64) * params.multiplier)
    return out[()] if out.ndim == 0 else out


def dequantize_to_bf16(acc, s_x: float, s_y: float):
    """int accumulator -> bfloat16 pattern of acc * S_x * S_y (truncating)."""
    value = np.asarray(acc, dtype=np.float64) * (float(s_x) * float(s_y))
    return bfarith.truncate_float(value)


def bf16_to_int8(v, s_z: float):
    """bfloat16 pattern -> int8 through clamp(floor(value / S_z))."""
    s_z = _check_scale("s_z", s_z)
    out = _clamp_floor(np.asarray(bfarith.to_float(v), dtype=np.float64) / s_z)
    return out[()] if out.ndim == 0 else out


def bf16_passthrough(v):
    """The bf16 -> bf16 store mode: bit patterns pass unchanged."""
    return np.asarray(v, dtype=np.uint16)
