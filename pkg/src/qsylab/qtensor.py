"""Fixed-point tensors: quantization math and bit manipulation.

A quantized tensor is integer data plus :class:`QuantParams`. Activations use
the unsigned symmetric profile (zero_point 0, range [0, 2^b - 1]); weights use
the signed symmetric profile (zero_point 0, range +/-(2^(b-1) - 1)). Values are
stored in 32-bit signed containers regardless of the logical width b; the
logical range is enforced by validation, not storage width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .errors import ConfigError, InputError, RangeError

# Guards the floor against float division landing epsilon-under an integer;
# far below one code step for every representable scale at b <= 16.
_FLOOR_EPS = 1e-9

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor quantization metadata: x ~ (q - zero_point) * scale."""

    scale: float
    zero_point: int
    bits: int
    q_min: int
    q_max: int

    def __post_init__(self) -> None:
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be in [2, 16], got {self.bits}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ConfigError(f"scale must be finite and positive, got {self.scale}")
        unsigned = (0, 2**self.bits - 1)
        signed = (-(2 ** (self.bits - 1) - 1), 2 ** (self.bits - 1) - 1)
        if (self.q_min, self.q_max) not in (unsigned, signed):
            raise ConfigError(
                f"(q_min, q_max) = ({self.q_min}, {self.q_max}) matches neither "
                f"the unsigned {unsigned} nor the signed {signed} profile at b={self.bits}"
            )
        if not self.q_min <= self.zero_point <= self.q_max:
            raise ConfigError(
                f"zero_point {self.zero_point} outside [{self.q_min}, {self.q_max}]"
            )

    @classmethod
    def unsigned(cls, bits: int, scale: float, zero_point: int = 0) -> "QuantParams":
        return cls(scale=scale, zero_point=zero_point, bits=bits, q_min=0, q_max=2**bits - 1)

    @classmethod
    def signed(cls, bits: int, scale: float) -> "QuantParams":
        m = 2 ** (bits - 1) - 1
        return cls(scale=scale, zero_point=0, bits=bits, q_min=-m, q_max=m)

    @property
    def is_signed(self) -> bool:
        return self.q_min < 0


@dataclass(frozen=True)
class QTensor:
    """Integer tensor with row-major shape and quantization params."""

    shape: tuple[int, ...]
    data: np.ndarray
    params: QuantParams

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.int32)
        n = int(np.prod(self.shape)) if self.shape else 1
        if arr.size != n:
            raise InputError(f"data has {arr.size} elements, shape {self.shape} needs {n}")
        arr = arr.reshape(self.shape)
        if arr.size and (arr.min() < self.params.q_min or arr.max() > self.params.q_max):
            raise InputError(
                f"element outside [{self.params.q_min}, {self.params.q_max}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def size(self) -> int:
        return int(self.data.size)


def compute_scale(x_min: float, x_max: float, bits: int) -> float:
    """Scale for a b-bit grid spanning [x_min, x_max]: (x_max - x_min) / (2^b - 1)."""
    if not 2 <= bits <= 16:
        raise ConfigError(f"bits must be in [2, 16], got {bits}")
    if not (math.isfinite(x_min) and math.isfinite(x_max)):
        raise RangeError("range endpoints must be finite")
    if x_max <= x_min:
        raise RangeError(f"degenerate range: x_max ({x_max}) <= x_min ({x_min})")
    return (x_max - x_min) / (2**bits - 1)


def quantize(x: ArrayLike, p: QuantParams) -> Union[int, np.ndarray]:
    """clamp(floor(x / scale) + zero_point, q_min, q_max), floor toward -inf.

    Accepts scalars or arrays; arrays come back as int32.
    """
    if np.isscalar(x) or isinstance(x, (float, int)):
        if not math.isfinite(x):
            raise InputError(f"cannot quantize non-finite value {x}")
        q = math.floor(x / p.scale + _FLOOR_EPS) + p.zero_point
        return min(max(q, p.q_min), p.q_max)
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError("cannot quantize non-finite values")
    q = np.floor(arr / p.scale + _FLOOR_EPS).astype(np.int64) + p.zero_point
    return np.clip(q, p.q_min, p.q_max).astype(np.int32)


def dequantize(q: ArrayLike, p: QuantParams) -> Union[float, np.ndarray]:
    """(q - zero_point) * scale."""
    if np.isscalar(q) or isinstance(q, int):
        if not p.q_min <= q <= p.q_max:
            raise InputError(f"{q} outside representable range [{p.q_min}, {p.q_max}]")
        return (q - p.zero_point) * p.scale
    arr = np.asarray(q)
    if arr.size and (arr.min() < p.q_min or arr.max() > p.q_max):
        raise InputError(f"value outside representable range [{p.q_min}, {p.q_max}]")
    return (arr.astype(np.float64) - p.zero_point) * p.scale


def flip_bits(q: int, bit_positions: Iterable[int], bits: int) -> int:
    """XOR the given bit positions of an unsigned b-bit word."""
    positions = list(bit_positions)
    if len(set(positions)) != len(positions):
        raise ConfigError("bit positions must be distinct")
    if not positions:
        raise ConfigError("at least one bit position required")
    mask = 0
    for pos in positions:
        if not 0 <= pos < bits:
            raise ConfigError(f"bit position {pos} outside word of {bits} bits")
        mask |= 1 << pos
    if not 0 <= q < 2**bits:
        raise InputError(f"{q} is not a {bits}-bit unsigned word")
    return q ^ mask


def flip_mask(bit_positions: Iterable[int], bits: int) -> int:
    """Validated XOR mask for a set of bit positions (vectorized callers)."""
    mask = 0
    for pos in set(bit_positions):
        if not 0 <= pos < bits:
            raise ConfigError(f"bit position {pos} outside word of {bits} bits")
        mask |= 1 << pos
    return mask
