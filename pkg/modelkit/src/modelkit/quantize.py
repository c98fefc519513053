"""Post-training quantization and the export-side integer engine.

Scales follow the uniform affine rule S = (x_max - x_min) / (2^b - 1).
Activations are unsigned with zero point 0; x_min is pinned at 0 because every
stored activation is post-clamp (the terminal logits lose their negative part,
which cannot change the argmax while the winning logit is positive). Weights
are signed symmetric. Activation x_max comes from a calibration slice with a
multiplicative headroom margin, the standard clipping-headroom lever of PTQ:
without it the slice maximum would land exactly on the top code at every
width and profiled range checks would degenerate into plain saturation.

The integer engine here re-implements the interchange arithmetic (int64
accumulation, requantize as clamp(round-half-away(acc * M), 0, q_max)) with no
dependency on the inference package; it exists so the exporter can check its
own output before shipping it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ExportError
from .lenet import forward

DEFAULT_MARGIN = 1.12


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


@dataclass(frozen=True)
class QParams:
    bits: int
    scale: float
    zero_point: int = 0
    signed: bool = False

    def __post_init__(self) -> None:
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be in [2, 16], got {self.bits}")
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise ConfigError(f"scale must be positive and finite, got {self.scale}")
        if self.signed and self.zero_point != 0:
            raise ConfigError("signed tensors use zero point 0")

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    @property
    def q_min(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.signed else 0


def input_qparams(bits: int = 8) -> QParams:
    # pixels live in [0, 1]
    return QParams(bits=bits, scale=1.0 / (2**bits - 1))


def activation_qparams(x_max: float, bits: int, margin: float) -> QParams:
    if margin < 1.0:
        raise ConfigError(f"calibration margin must be >= 1, got {margin}")
    x_max = max(float(x_max), 1e-6)
    return QParams(bits=bits, scale=margin * x_max / (2**bits - 1))


def weight_qparams(w: np.ndarray, bits: int) -> QParams:
    top = max(float(np.abs(w).max()), 1e-12)
    return QParams(bits=bits, scale=top / (2 ** (bits - 1) - 1), signed=True)


def quantize_array(x: np.ndarray, p: QParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point
    return np.clip(q, p.q_min, p.q_max).astype(np.int32)


def quantize_bias(b: np.ndarray, s_in: float, s_w: float) -> np.ndarray:
    q = round_half_away(np.asarray(b, dtype=np.float64) / (s_in * s_w)).astype(np.int64)
    if np.abs(q).max(initial=0) >= 2**31:
        raise ExportError("scaled bias exceeds the int32 container")
    return q


@dataclass(frozen=True)
class QLayer:
    name: str
    kind: str
    spec: dict
    out_params: QParams
    weight_params: Optional[QParams] = None
    weights: Optional[np.ndarray] = None  # int32, interchange layout
    biases: Optional[np.ndarray] = None  # int64, accumulator domain


@dataclass(frozen=True)
class QuantizedModel:
    name: str
    input_shape: tuple
    class_count: int
    input_params: QParams
    layers: tuple
    float_ranges: dict  # layer -> (observed min, observed max) before clamping
    margin: float


def calibrate_ranges(arch: dict, params: dict, cal_x: np.ndarray) -> dict:
    """Observed float (min, max) of each layer output over the calibration slice."""
    _, acts = forward(arch, params, cal_x, keep=True)
    return {name: (float(a.min()), float(a.max())) for name, a in acts.items()}


def quantize_model(
    arch: dict,
    params: dict,
    cal_x: np.ndarray,
    *,
    name: str,
    bits: int = 8,
    margin: float = DEFAULT_MARGIN,
) -> QuantizedModel:
    ranges = calibrate_ranges(arch, params, cal_x)
    in_p = input_qparams(bits)
    prev = in_p
    layers = []
    for lname, kind, spec in arch["layers"]:
        if kind in ("conv2d", "dense"):
            w = params[lname]["w"]
            wp = weight_qparams(w, bits)
            # terminal logits keep only their positive part; scale covers it
            out_p = activation_qparams(max(ranges[lname][1], 0.0), bits, margin)
            layers.append(
                QLayer(
                    name=lname,
                    kind=kind,
                    spec=dict(spec),
                    out_params=out_p,
                    weight_params=wp,
                    weights=quantize_array(w, wp),
                    biases=quantize_bias(params[lname]["b"], prev.scale, wp.scale),
                )
            )
            prev = out_p
        else:
            layers.append(QLayer(name=lname, kind=kind, spec=dict(spec), out_params=prev))
    return QuantizedModel(
        name=name,
        input_shape=tuple(arch["input_shape"]),
        class_count=arch["class_count"],
        input_params=in_p,
        layers=tuple(layers),
        float_ranges=ranges,
        margin=margin,
    )


# ---------------------------------------------------------------------------
# integer self-check engine


def _requantize(acc: np.ndarray, multiplier: float, q_max: int) -> np.ndarray:
    r = round_half_away(acc.astype(np.float64) * multiplier)
    return np.clip(r, 0, q_max).astype(np.int64)


def int_forward(qm: QuantizedModel, pixels: np.ndarray) -> np.ndarray:
    """Quantized batch (N, H, W, C) int -> dequantized logits (N, classes)."""
    x = np.asarray(pixels, dtype=np.int64)
    if x.ndim != 4 or x.shape[1:] != qm.input_shape:
        raise ConfigError(f"input shape {x.shape} != (N,) + {qm.input_shape}")
    s_in = qm.input_params.scale
    for layer in qm.layers:
        if layer.kind == "conv2d":
            k, pad = layer.spec["kernel"], layer.spec["padding"]
            if pad:
                x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
            win = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
            n, oh, ow = win.shape[:3]
            wmat = layer.weights.reshape(-1, layer.spec["out_channels"]).astype(np.int64)
            acc = win.reshape(n, oh, ow, -1) @ wmat + layer.biases
        elif layer.kind == "dense":
            acc = x @ layer.weights.astype(np.int64) + layer.biases
        elif layer.kind == "maxpool2x2":
            n, h, w, c = x.shape
            oh, ow = h // 2, w // 2
            x = x[:, : oh * 2, : ow * 2, :].reshape(n, oh, 2, ow, 2, c).max(axis=(2, 4))
            continue
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
            continue
        else:
            raise ConfigError(f"unsupported layer kind {layer.kind!r}")
        mult = (s_in * layer.weight_params.scale) / layer.out_params.scale
        x = _requantize(acc, mult, layer.out_params.q_max)
        s_in = layer.out_params.scale
    return x.astype(np.float64) * qm.layers[-1].out_params.scale


def int_accuracy(qm: QuantizedModel, pixels: np.ndarray, labels: np.ndarray) -> float:
    logits = int_forward(qm, pixels)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
