"""Weight-stationary systolic-array execution model with cycle accounting.

Conv layers are lowered via im2col onto an R x C array of MAC processing
elements: the lowered weight matrix (K = kh*kw*cin rows, N = cout columns) is
tiled into R x C blocks that stay pinned while the lowered activation rows
stream through. Pooling/ReLU/flatten run in C-wide vector units outside the
array. All arithmetic is exact integer math; partial sums are accumulated in
64-bit regardless of tiling, so results never depend on the array size.

Per-tile cycle model: stream_rows + R + C - 2 for pipeline fill/drain, plus a
fixed R-cycle weight preload. No bus or DRAM contention is modeled.

The batch engine at the bottom is the vectorized twin of run_layer used by
range extraction and fault campaigns; it must (and is tested to) agree with
the single-input path element-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np

from .errors import ConfigError, InputError
from .netgraph import Layer, Network, Prediction, QTensor, dequantize, requantize

if TYPE_CHECKING:  # pragma: no cover
    from .guard import GuardSpec

ActivationHook = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ArrayConfig:
    rows: int
    cols: int
    clock_hz: float = 100e6

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"array extents must be >= 1, got {self.rows}x{self.cols}")
        if not self.clock_hz > 0:
            raise ConfigError("clock_hz must be positive")


@dataclass(frozen=True)
class Tile:
    """One weight block pinned on the array: rows [k0,k1) x cols [n0,n1)."""

    k0: int
    k1: int
    n0: int
    n1: int


@dataclass(frozen=True)
class TileSchedule:
    tiles: tuple[Tile, ...]
    k: int  # lowered weight rows
    n: int  # lowered weight cols
    stream_rows: int  # lowered activation rows per tile pass
    out_shape: tuple[int, ...]


@dataclass(frozen=True)
class CycleReport:
    mac_ops: int
    cycles: int
    clock_hz: float

    @property
    def giops_estimate(self) -> float:
        if self.cycles == 0:
            return 0.0
        return 2 * self.mac_ops / (self.cycles / self.clock_hz) / 1e9

    def __add__(self, other: "CycleReport") -> "CycleReport":
        if other.clock_hz != self.clock_hz:
            raise ConfigError("cannot combine cycle reports at different clocks")
        return CycleReport(self.mac_ops + other.mac_ops, self.cycles + other.cycles,
                           self.clock_hz)


def _conv_out_hw(geometry, h: int, w: int) -> tuple[int, int]:
    oh = (h + 2 * geometry.padding - geometry.kernel_h) // geometry.stride + 1
    ow = (w + 2 * geometry.padding - geometry.kernel_w) // geometry.stride + 1
    return oh, ow


def _im2col_indices(geometry, h: int, w: int) -> np.ndarray:
    """(S, K) gather indices into the flat padded HWC buffer.

    K-order is kh-major, kw, then cin — matching the [kh][kw][cin][cout]
    weight layout so the lowered weight matrix is a plain reshape.
    """
    g = geometry
    oh, ow = _conv_out_hw(g, h, w)
    wp = w + 2 * g.padding
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    base_y = (oy * g.stride).reshape(-1)  # (S,)
    base_x = (ox * g.stride).reshape(-1)
    ky, kx, ic = np.meshgrid(np.arange(g.kernel_h), np.arange(g.kernel_w),
                             np.arange(g.in_channels), indexing="ij")
    ky, kx, ic = ky.reshape(-1), kx.reshape(-1), ic.reshape(-1)  # (K,)
    rows = base_y[:, None] + ky[None, :]
    cols_ = base_x[:, None] + kx[None, :]
    return ((rows * wp + cols_) * g.in_channels + ic[None, :]).astype(np.int32)


def lower_layer(layer: Layer, cfg: ArrayConfig, in_shape: Optional[tuple] = None) -> TileSchedule:
    """Tile a MAC layer's lowered weight matrix onto the array.

    Conv lowering needs the input extents, so in_shape is required for conv2d;
    dense layers carry their geometry outright.
    """
    if layer.kind == "dense":
        g = layer.geometry
        k, n, s = g.in_features, g.out_features, 1
        out_shape: tuple = (g.out_features,)
    elif layer.kind == "conv2d":
        if in_shape is None or len(in_shape) != 3:
            raise ConfigError("conv2d lowering needs the (h, w, c) input shape")
        g = layer.geometry
        oh, ow = _conv_out_hw(g, in_shape[0], in_shape[1])
        k, n, s = g.kernel_h * g.kernel_w * g.in_channels, g.out_channels, oh * ow
        out_shape = (oh, ow, g.out_channels)
    else:
        raise ConfigError(f"{layer.kind} does not lower onto the array")
    tiles = tuple(
        Tile(k0, min(k0 + cfg.rows, k), n0, min(n0 + cfg.cols, n))
        for k0 in range(0, k, cfg.rows)
        for n0 in range(0, n, cfg.cols)
    )
    return TileSchedule(tiles=tiles, k=k, n=n, stream_rows=s, out_shape=out_shape)


def _tile_cycles(schedule: TileSchedule, cfg: ArrayConfig) -> int:
    per_tile = schedule.stream_rows + cfg.rows + cfg.cols - 2 + cfg.rows
    return per_tile * len(schedule.tiles)


def run_layer(
    layer: Layer,
    input: QTensor,
    cfg: ArrayConfig,
    hook: Optional[ActivationHook] = None,
) -> tuple[QTensor, CycleReport]:
    """Execute one layer; the hook transforms the stored input words as they
    are read (identity when absent). MAC layers run tile by tile on the array;
    the rest run in the vector units."""
    stored = input.flat
    if hook is not None:
        stored = np.asarray(hook(stored), dtype=np.int32)
        if stored.shape != input.flat.shape:
            raise InputError("activation hook must preserve the buffer length")

    if layer.kind in ("conv2d", "dense"):
        m = (input.params.scale * layer.weights.params.scale) / layer.out_params.scale
        if layer.kind == "conv2d":
            if len(input.shape) != 3 or input.shape[2] != layer.geometry.in_channels:
                raise InputError(
                    f"layer {layer.name}: input shape {input.shape} does not fit conv"
                )
            h, w, c = input.shape
            g = layer.geometry
            schedule = lower_layer(layer, cfg, input.shape)
            buf = stored.reshape(h, w, c)
            if g.padding:
                buf = np.pad(buf, ((g.padding, g.padding), (g.padding, g.padding), (0, 0)))
            gathered = buf.reshape(-1)[_im2col_indices(g, h, w)].astype(np.int64)  # (S, K)
            wmat = layer.weights.data.reshape(schedule.k, schedule.n).astype(np.int64)
        else:
            if input.shape != (layer.geometry.in_features,):
                raise InputError(
                    f"layer {layer.name}: input shape {input.shape} does not fit dense"
                )
            schedule = lower_layer(layer, cfg)
            gathered = stored.astype(np.int64).reshape(1, schedule.k)
            wmat = layer.weights.data.astype(np.int64)
        acc = np.tile(layer.biases, (schedule.stream_rows, 1))  # (S, N) int64
        for tile in schedule.tiles:
            acc[:, tile.n0 : tile.n1] += (
                gathered[:, tile.k0 : tile.k1] @ wmat[tile.k0 : tile.k1, tile.n0 : tile.n1]
            )
        out = requantize(acc, m, layer.out_params.q_max).reshape(schedule.out_shape)
        report = CycleReport(
            mac_ops=schedule.stream_rows * schedule.n * schedule.k,
            cycles=_tile_cycles(schedule, cfg),
            clock_hz=cfg.clock_hz,
        )
        return QTensor(schedule.out_shape, out, layer.out_params), report

    # vector-unit layers
    if layer.kind == "maxpool2x2":
        h, w, c = input.shape
        oh, ow = h // 2, w // 2
        x = stored.reshape(h, w, c)[: oh * 2, : ow * 2, :]
        out = x.reshape(oh, 2, ow, 2, c).max(axis=(1, 3))
        out_shape: tuple = (oh, ow, c)
    elif layer.kind == "relu":
        out = np.maximum(stored, layer.out_params.zero_point).reshape(input.shape)
        out_shape = input.shape
    elif layer.kind == "flatten":
        out = stored
        out_shape = (stored.size,)
    else:
        raise ConfigError(f"unknown layer kind {layer.kind}")
    report = CycleReport(
        mac_ops=0,
        cycles=math.ceil(out.size / cfg.cols),
        clock_hz=cfg.clock_hz,
    )
    return QTensor(out_shape, out, layer.out_params), report


def validate_fault(net: Network, fault) -> None:
    """Check a (layer, activation_index, bit_positions) site against a network."""
    if not 0 <= fault.layer < len(net.layers):
        raise ConfigError(f"fault layer {fault.layer} outside [0, {len(net.layers)})")
    count = net.layer_input_counts()[fault.layer]
    if not 0 <= fault.activation_index < count:
        raise ConfigError(
            f"fault activation index {fault.activation_index} outside layer "
            f"{fault.layer}'s input buffer of {count} words"
        )
    bits = net.in_params(fault.layer).bits
    if not fault.bit_positions:
        raise ConfigError("fault needs at least one bit position")
    for pos in fault.bit_positions:
        if not 0 <= pos < bits:
            raise ConfigError(f"fault bit {pos} outside the {bits}-bit activation word")


def _fault_hook(index: int, mask: int) -> ActivationHook:
    def hook(stored: np.ndarray) -> np.ndarray:
        out = stored.copy()
        out[index] = int(out[index]) ^ mask
        return out

    return hook


def run_network(
    net: Network,
    input: QTensor,
    cfg: ArrayConfig,
    fault=None,
    guard: Optional["GuardSpec"] = None,
) -> tuple[Prediction, CycleReport]:
    """Full-network systolic execution with optional persistent activation fault
    and optional range-check guard on every stored layer output."""
    if input.shape != net.input_shape:
        raise InputError(f"input shape {input.shape} != network input {net.input_shape}")
    mask = 0
    if fault is not None:
        validate_fault(net, fault)
        for pos in fault.bit_positions:
            mask |= 1 << pos
    total = CycleReport(0, 0, cfg.clock_hz)
    x = input
    for i, layer in enumerate(net.layers):
        hook = None
        if fault is not None and fault.layer == i:
            hook = _fault_hook(fault.activation_index, mask)
        x, report = run_layer(layer, x, cfg, hook)
        total = total + report
        if guard is not None and guard.method != "none":
            clamped = guard.clamp_array(i, x.flat)
            x = QTensor(x.shape, clamped.reshape(x.shape), x.params)
    logits = dequantize(x.data.astype(np.int64), net.layers[-1].out_params)
    return Prediction.from_logits(logits), total


# ---------------------------------------------------------------------------
# batched engine (vectorized twin of run_layer; campaigns and range extraction)


class _LayerPlan:
    __slots__ = ("kind", "idx", "pad", "in_hw", "out_shape", "wmat", "bias", "m",
                 "qmax", "zero", "gemm_dtype", "in_count", "out_count")


def _gemm_dtype(k: int, a_max: int, w_max: int, bias_max: int):
    bound = k * a_max * w_max + bias_max
    if bound < 2**24:
        return np.float32
    if bound < 2**53:
        return np.float64
    return None  # exact int64 path


class BatchEngine:
    """Runs many inputs through the network at once, layer by layer.

    GEMMs run in float32/float64 chosen so every partial sum is an exactly
    representable integer (falls back to int64 otherwise); outputs are
    bit-identical to the tiled single-input path no matter the BLAS.
    """

    def __init__(self, net: Network, guard: Optional["GuardSpec"] = None):
        self.net = net
        self.guard = guard if (guard is not None and guard.method != "none") else None
        self.plans: list[_LayerPlan] = []
        counts = net.layer_input_counts()
        shape = net.input_shape
        for i, layer in enumerate(net.layers):
            p = _LayerPlan()
            p.kind = layer.kind
            p.in_count = counts[i]
            in_params = net.in_params(i)
            if layer.kind == "conv2d":
                g = layer.geometry
                h, w, _ = shape
                p.idx = _im2col_indices(g, h, w)
                p.pad = g.padding
                p.in_hw = (h, w, g.in_channels)
                oh, ow = _conv_out_hw(g, h, w)
                p.out_shape = (oh, ow, g.out_channels)
                k = g.kernel_h * g.kernel_w * g.in_channels
                p.wmat = layer.weights.data.reshape(k, g.out_channels)
                p.bias = layer.biases
                p.m = net.requant_multiplier(i)
                p.qmax = layer.out_params.q_max
                p.gemm_dtype = _gemm_dtype(k, in_params.q_max,
                                           layer.weights.params.q_max,
                                           int(np.abs(layer.biases).max(initial=0)))
                if p.gemm_dtype is not None:
                    p.wmat = p.wmat.astype(p.gemm_dtype)
                shape = p.out_shape
            elif layer.kind == "dense":
                g = layer.geometry
                p.wmat = layer.weights.data
                p.bias = layer.biases
                p.m = net.requant_multiplier(i)
                p.qmax = layer.out_params.q_max
                p.out_shape = (g.out_features,)
                p.gemm_dtype = _gemm_dtype(g.in_features, in_params.q_max,
                                           layer.weights.params.q_max,
                                           int(np.abs(layer.biases).max(initial=0)))
                if p.gemm_dtype is not None:
                    p.wmat = p.wmat.astype(p.gemm_dtype)
                shape = p.out_shape
            elif layer.kind == "maxpool2x2":
                h, w, c = shape
                p.in_hw = (h, w, c)
                p.out_shape = (h // 2, w // 2, c)
                shape = p.out_shape
            elif layer.kind == "relu":
                p.zero = layer.out_params.zero_point
                p.out_shape = shape
            else:  # flatten
                p.out_shape = (int(np.prod(shape)),)
                shape = p.out_shape
            p.out_count = int(np.prod(p.out_shape))
            self.plans.append(p)
        self.out_params = net.layers[-1].out_params

    def _layer(self, i: int, x: np.ndarray) -> np.ndarray:
        """x: (B, in_count) int32 -> (B, out_count) int32."""
        p = self.plans[i]
        b = x.shape[0]
        if p.kind in ("conv2d", "dense"):
            if p.kind == "conv2d":
                h, w, c = p.in_hw
                buf = x.reshape(b, h, w, c)
                if p.pad:
                    buf = np.pad(buf, ((0, 0), (p.pad, p.pad), (p.pad, p.pad), (0, 0)))
                a = buf.reshape(b, -1)[:, p.idx]  # (B, S, K)
            else:
                a = x
            if p.gemm_dtype is None:
                acc = a.astype(np.int64) @ p.wmat.astype(np.int64) + p.bias
            else:
                prod = a.astype(p.gemm_dtype) @ p.wmat
                acc = prod.astype(np.int64) + p.bias
            out = requantize(acc, p.m, p.qmax)
            out = out.reshape(b, -1)
        elif p.kind == "maxpool2x2":
            h, w, c = p.in_hw
            oh, ow = h // 2, w // 2
            out = (x.reshape(b, h, w, c)[:, : oh * 2, : ow * 2, :]
                   .reshape(b, oh, 2, ow, 2, c).max(axis=(2, 4)).reshape(b, -1))
        elif p.kind == "relu":
            out = np.maximum(x, p.zero)
        else:  # flatten
            out = x
        if self.guard is not None:
            out = self.guard.clamp_array(i, out)
        return out

    def forward(self, pixels: np.ndarray, from_layer: int = 0,
                keep_buffers: bool = False, collect_stats: bool = False):
        """Returns (logits, buffers, stats, final).

        buffers: per-layer input buffers (B, n_i), present when keep_buffers.
        stats: per-layer output (min, max) over the whole batch, when requested.
        final: the terminal layer's integer outputs (B, class_count).
        """
        x = np.ascontiguousarray(pixels, dtype=np.int32)
        buffers = [None] * len(self.plans) if keep_buffers else None
        stats = [None] * len(self.plans) if collect_stats else None
        for i in range(from_layer, len(self.plans)):
            if keep_buffers:
                buffers[i] = x
            x = self._layer(i, x)
            if collect_stats:
                stats[i] = (int(x.min()), int(x.max()))
        logits = (x.astype(np.float64) - self.out_params.zero_point) * self.out_params.scale
        return logits, buffers, stats, x
