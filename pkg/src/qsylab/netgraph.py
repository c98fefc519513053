"""Network description, interchange I/O, and the direct reference inference path.

The reference path executes layers with plain integer numpy arithmetic
(shift-accumulate convolution, no lowering) and serves as the correctness
anchor for the systolic execution model. Activation layouts are row-major HWC;
conv weights are [kh][kw][cin][cout]; dense weights are [in][out].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .qtensor import QTensor, QuantParams, dequantize, quantize

FORMAT_VERSION = 1
QDS_MAGIC = b"QDS1"

Shape = tuple[int, ...]


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels) < 1:
            raise ConfigError("conv geometry extents must be >= 1")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("conv stride must be >= 1 and padding >= 0")


@dataclass(frozen=True)
class DenseGeometry:
    in_features: int
    out_features: int

    def __post_init__(self) -> None:
        if min(self.in_features, self.out_features) < 1:
            raise ConfigError("dense geometry extents must be >= 1")


LAYER_KINDS = ("conv2d", "dense", "maxpool2x2", "relu", "flatten")


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    out_params: QuantParams
    geometry: Union[ConvGeometry, DenseGeometry, None] = None
    weights: Optional[QTensor] = None
    biases: Optional[np.ndarray] = None  # accumulator domain, int64

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            g = self.geometry
            if not isinstance(g, ConvGeometry):
                raise ConfigError(f"layer {self.name}: conv2d needs ConvGeometry")
            want = (g.kernel_h, g.kernel_w, g.in_channels, g.out_channels)
            if self.weights is None or self.weights.shape != want:
                raise ConfigError(
                    f"layer {self.name}: weight shape "
                    f"{None if self.weights is None else self.weights.shape} != {want}"
                )
            self._check_bias(g.out_channels)
        elif self.kind == "dense":
            g = self.geometry
            if not isinstance(g, DenseGeometry):
                raise ConfigError(f"layer {self.name}: dense needs DenseGeometry")
            want = (g.in_features, g.out_features)
            if self.weights is None or self.weights.shape != want:
                raise ConfigError(
                    f"layer {self.name}: weight shape "
                    f"{None if self.weights is None else self.weights.shape} != {want}"
                )
            self._check_bias(g.out_features)
        else:
            if self.weights is not None or self.biases is not None:
                raise ConfigError(f"layer {self.name}: {self.kind} carries no parameters")
        if self.biases is not None:
            b = np.ascontiguousarray(self.biases, dtype=np.int64)
            b.setflags(write=False)
            object.__setattr__(self, "biases", b)

    def _check_bias(self, n: int) -> None:
        if self.biases is None or len(self.biases) != n:
            raise ConfigError(
                f"layer {self.name}: bias length "
                f"{None if self.biases is None else len(self.biases)} != {n}"
            )

    @property
    def is_mac(self) -> bool:
        return self.kind in ("conv2d", "dense")


def _out_shape(layer: Layer, in_shape: Shape) -> Shape:
    kind = layer.kind
    if kind == "conv2d":
        g = layer.geometry
        if len(in_shape) != 3 or in_shape[2] != g.in_channels:
            raise ConfigError(
                f"layer {layer.name}: input shape {in_shape} incompatible with conv "
                f"of {g.in_channels} input channels"
            )
        h, w, _ = in_shape
        oh = (h + 2 * g.padding - g.kernel_h) // g.stride + 1
        ow = (w + 2 * g.padding - g.kernel_w) // g.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(f"layer {layer.name}: kernel larger than padded input")
        return (oh, ow, g.out_channels)
    if kind == "dense":
        g = layer.geometry
        if in_shape != (g.in_features,):
            raise ConfigError(
                f"layer {layer.name}: input shape {in_shape} != ({g.in_features},)"
            )
        return (g.out_features,)
    if kind == "maxpool2x2":
        if len(in_shape) != 3:
            raise ConfigError(f"layer {layer.name}: maxpool needs an HWC input")
        h, w, c = in_shape
        if h < 2 or w < 2:
            raise ConfigError(f"layer {layer.name}: input {in_shape} too small to pool")
        return (h // 2, w // 2, c)
    if kind == "relu":
        return in_shape
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    raise ConfigError(kind)


def _params_equal(a: QuantParams, b: QuantParams) -> bool:
    return (
        a.scale == b.scale
        and a.zero_point == b.zero_point
        and a.bits == b.bits
        and a.q_min == b.q_min
        and a.q_max == b.q_max
    )


@dataclass(frozen=True)
class Network:
    name: str
    layers: tuple[Layer, ...]
    input_shape: Shape
    input_params: QuantParams
    class_count: int
    # derived, filled in __post_init__
    input_shapes: tuple[Shape, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("network has no layers")
        shapes = []
        shape = tuple(self.input_shape)
        params = self.input_params
        for layer in self.layers:
            shapes.append(shape)
            shape = _out_shape(layer, shape)
            if not layer.is_mac and not _params_equal(layer.out_params, params):
                raise ConfigError(
                    f"layer {layer.name}: {layer.kind} must keep its input "
                    "quantization parameters"
                )
            params = layer.out_params
        last = self.layers[-1]
        if last.kind != "dense" or shape != (self.class_count,):
            raise ConfigError(
                f"terminal layer must be dense with {self.class_count} outputs, "
                f"got {last.kind} -> {shape}"
            )
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "input_shapes", tuple(shapes))

    def in_params(self, i: int) -> QuantParams:
        return self.input_params if i == 0 else self.layers[i - 1].out_params

    def requant_multiplier(self, i: int) -> float:
        layer = self.layers[i]
        if not layer.is_mac:
            raise ConfigError(f"layer {layer.name} has no requantization step")
        return (self.in_params(i).scale * layer.weights.params.scale) / layer.out_params.scale

    def layer_input_counts(self) -> list[int]:
        return [int(np.prod(s)) for s in self.input_shapes]

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ConfigError(f"no layer named {name!r}")


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray  # float64, dequantized terminal outputs
    confidences: np.ndarray  # softmax(logits)

    @property
    def top1(self) -> int:
        return int(np.argmax(self.confidences))  # argmax takes lowest index on ties

    def topk(self, k: int) -> list[int]:
        order = sorted(range(len(self.confidences)), key=lambda i: (-self.confidences[i], i))
        return order[:k]

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "Prediction":
        logits = np.asarray(logits, dtype=np.float64)
        m = logits.max()
        e = np.exp(logits - m)
        conf = e / e.sum()
        return cls(logits=logits, confidences=conf)


def softmax_batch(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def requantize(acc: np.ndarray, multiplier: float, q_max: int) -> np.ndarray:
    """Accumulator -> unsigned activation: clamp(round-half-away(acc*M), 0, q_max)."""
    x = acc.astype(np.float64) * multiplier
    r = np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))
    return np.clip(r, 0, q_max).astype(np.int32)


# ---------------------------------------------------------------------------
# reference execution


def _ref_conv2d(x: np.ndarray, layer: Layer, m: float) -> np.ndarray:
    g = layer.geometry
    if g.padding:
        x = np.pad(x, ((g.padding, g.padding), (g.padding, g.padding), (0, 0)))
    h, w, _ = x.shape
    oh = (h - g.kernel_h) // g.stride + 1
    ow = (w - g.kernel_w) // g.stride + 1
    wk = layer.weights.data.astype(np.int64)
    acc = np.broadcast_to(layer.biases, (oh, ow, g.out_channels)).copy()
    xs = x.astype(np.int64)
    for ky in range(g.kernel_h):
        for kx in range(g.kernel_w):
            window = xs[ky : ky + oh * g.stride : g.stride, kx : kx + ow * g.stride : g.stride, :]
            acc += window @ wk[ky, kx]
    return requantize(acc, m, layer.out_params.q_max)


def _ref_dense(x: np.ndarray, layer: Layer, m: float) -> np.ndarray:
    acc = x.astype(np.int64) @ layer.weights.data.astype(np.int64) + layer.biases
    return requantize(acc, m, layer.out_params.q_max)


def reference_layer(net: Network, i: int, x: np.ndarray) -> np.ndarray:
    """One layer of the reference path on a shaped int array; returns the shaped output."""
    layer = net.layers[i]
    if layer.kind == "conv2d":
        return _ref_conv2d(x, layer, net.requant_multiplier(i))
    if layer.kind == "dense":
        return _ref_dense(x, layer, net.requant_multiplier(i))
    if layer.kind == "maxpool2x2":
        h, w, c = x.shape
        return x[: h // 2 * 2, : w // 2 * 2, :].reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))
    if layer.kind == "relu":
        return np.maximum(x, layer.out_params.zero_point)
    if layer.kind == "flatten":
        return x.reshape(-1)
    raise ConfigError(layer.kind)


def reference_infer(net: Network, input: QTensor) -> Prediction:
    """Golden direct-path inference; the systolic model must match it exactly."""
    if input.shape != net.input_shape:
        raise InputError(f"input shape {input.shape} != network input {net.input_shape}")
    x = input.data
    for i in range(len(net.layers)):
        x = reference_layer(net, i, x)
    logits = dequantize(x.astype(np.int64), net.layers[-1].out_params)
    return Prediction.from_logits(logits)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """Labeled samples with pixels already in the input quantized domain."""

    pixels: np.ndarray  # (count, sample_size) int32
    labels: np.ndarray  # (count,) uint8

    def __post_init__(self) -> None:
        px = np.ascontiguousarray(self.pixels, dtype=np.int32)
        lb = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if px.ndim != 2 or lb.ndim != 1 or px.shape[0] != lb.shape[0]:
            raise InputError("dataset pixels/labels shape mismatch")
        px.setflags(write=False)
        lb.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "labels", lb)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def head(self, n: int) -> "Dataset":
        if n < 1:
            raise InputError("slice must keep at least one sample")
        return Dataset(self.pixels[:n].copy(), self.labels[:n].copy())


def evaluate(net: Network, dataset: Dataset) -> float:
    """Top-1 accuracy of the golden reference path, in [0, 1]."""
    if len(dataset) == 0:
        raise InputError("empty dataset")
    if int(dataset.labels.max()) >= net.class_count:
        raise InputError("label index outside class_count")
    n_px = int(np.prod(net.input_shape))
    if dataset.pixels.shape[1] != n_px:
        raise InputError(
            f"dataset sample size {dataset.pixels.shape[1]} != input size {n_px}"
        )
    correct = 0
    for row, label in zip(dataset.pixels, dataset.labels):
        qt = QTensor(net.input_shape, row.reshape(net.input_shape), net.input_params)
        if reference_infer(net, qt).top1 == int(label):
            correct += 1
    return correct / len(dataset)


def load_dataset(path: Union[str, Path]) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != QDS_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {QDS_MAGIC!r}")
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if count == 0:
        raise FormatError(f"{path}: empty dataset")
    body = len(raw) - 8
    if body % count:
        raise FormatError(f"{path}: body of {body} bytes not divisible into {count} samples")
    per = body // count
    if (per - 1) % 4:
        raise FormatError(f"{path}: sample stride {per} is not 1 + 4*pixels")
    n_px = (per - 1) // 4
    labels = np.empty(count, dtype=np.uint8)
    pixels = np.empty((count, n_px), dtype=np.int32)
    off = 8
    for i in range(count):
        labels[i] = raw[off]
        pixels[i] = np.frombuffer(raw, dtype="<i4", count=n_px, offset=off + 1)
        off += per
    return Dataset(pixels, labels)


def save_dataset(path: Union[str, Path], dataset: Dataset) -> None:
    out = bytearray()
    out += QDS_MAGIC
    out += np.array([len(dataset)], dtype="<u4").tobytes()
    for i in range(len(dataset)):
        out.append(int(dataset.labels[i]))
        out += dataset.pixels[i].astype("<i4").tobytes()
    Path(path).write_bytes(bytes(out))


# ---------------------------------------------------------------------------
# model interchange


def _read_tensor(path: Path, count: int, what: str) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) != 4 * count:
        raise FormatError(
            f"{path}: {what} holds {len(raw)} bytes, expected {4 * count} "
            f"({count} little-endian int32 words)"
        )
    return np.frombuffer(raw, dtype="<i4").astype(np.int32)


def _quant_from_json(obj: dict, signed: bool, ctx: str) -> QuantParams:
    try:
        bits, scale, zp = int(obj["bits"]), float(obj["scale"]), int(obj["zero_point"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{ctx}: malformed quant block ({exc})") from exc
    try:
        if signed:
            if zp != 0:
                raise ConfigError("signed tensors use zero_point 0")
            return QuantParams.signed(bits, scale)
        return QuantParams.unsigned(bits, scale, zp)
    except ConfigError as exc:
        raise FormatError(f"{ctx}: {exc}") from exc


def _geometry_from_json(kind: str, obj: dict, ctx: str) -> Union[ConvGeometry, DenseGeometry, None]:
    try:
        if kind == "conv2d":
            return ConvGeometry(
                kernel_h=int(obj["kernel"][0]),
                kernel_w=int(obj["kernel"][1]),
                in_channels=int(obj["in_channels"]),
                out_channels=int(obj["out_channels"]),
                stride=int(obj.get("stride", 1)),
                padding=int(obj.get("padding", 0)),
            )
        if kind == "dense":
            return DenseGeometry(int(obj["in_features"]), int(obj["out_features"]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"{ctx}: malformed geometry ({exc})") from exc
    return None


def load_model(manifest_path: Union[str, Path]) -> Network:
    """Read a manifest and its tensor files into a fully validated Network."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: unsupported format_version {version!r}, "
            f"this reader understands {FORMAT_VERSION}"
        )
    base = manifest_path.parent
    try:
        name = str(manifest["name"])
        input_shape = tuple(int(e) for e in manifest["input_shape"])
        class_count = int(manifest["class_count"])
        layer_objs = manifest["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: missing or malformed field ({exc})") from exc
    input_params = _quant_from_json(
        manifest.get("input_params", {}), signed=False, ctx=f"{manifest_path}: input_params"
    )
    layers = []
    for obj in layer_objs:
        ctx = f"{manifest_path}: layer {obj.get('name', '?')!r}"
        kind = obj.get("kind")
        if kind not in LAYER_KINDS:
            raise FormatError(f"{ctx}: unknown layer kind {kind!r}")
        out_params = _quant_from_json(obj.get("quant", {}), signed=False, ctx=ctx)
        geometry = _geometry_from_json(kind, obj.get("geometry", {}), ctx)
        weights = biases = None
        if kind in ("conv2d", "dense"):
            w_params = _quant_from_json(obj.get("weight_quant", {}), signed=True, ctx=ctx)
            if kind == "conv2d":
                shape = (geometry.kernel_h, geometry.kernel_w,
                         geometry.in_channels, geometry.out_channels)
                n_bias = geometry.out_channels
            else:
                shape = (geometry.in_features, geometry.out_features)
                n_bias = geometry.out_features
            w_data = _read_tensor(base / obj["weight_file"], int(np.prod(shape)), "weight file")
            b_data = _read_tensor(base / obj["bias_file"], n_bias, "bias file")
            try:
                weights = QTensor(shape, w_data, w_params)
            except InputError as exc:
                raise FormatError(f"{ctx}: weight tensor invalid ({exc})") from exc
            biases = b_data.astype(np.int64)
        try:
            layers.append(
                Layer(name=str(obj.get("name", kind)), kind=kind, out_params=out_params,
                      geometry=geometry, weights=weights, biases=biases)
            )
        except ConfigError as exc:
            raise FormatError(f"{ctx}: {exc}") from exc
    try:
        return Network(name=name, layers=tuple(layers), input_shape=input_shape,
                       input_params=input_params, class_count=class_count)
    except ConfigError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc


def _quant_to_json(p: QuantParams) -> dict:
    return {"bits": p.bits, "scale": p.scale, "zero_point": p.zero_point}


def save_model(net: Network, out_dir: Union[str, Path]) -> Path:
    """Write manifest + tensor files; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer_objs = []
    for layer in net.layers:
        obj: dict = {"name": layer.name, "kind": layer.kind,
                     "quant": _quant_to_json(layer.out_params)}
        if layer.kind == "conv2d":
            g = layer.geometry
            obj["geometry"] = {"kernel": [g.kernel_h, g.kernel_w],
                               "in_channels": g.in_channels, "out_channels": g.out_channels,
                               "stride": g.stride, "padding": g.padding}
        elif layer.kind == "dense":
            g = layer.geometry
            obj["geometry"] = {"in_features": g.in_features, "out_features": g.out_features}
        else:
            obj["geometry"] = {}
        if layer.is_mac:
            if np.abs(layer.biases).max(initial=0) >= 2**31:
                raise ConfigError(f"layer {layer.name}: bias exceeds the int32 container")
            w_file, b_file = f"{layer.name}_weights.bin", f"{layer.name}_bias.bin"
            (out_dir / w_file).write_bytes(layer.weights.flat.astype("<i4").tobytes())
            (out_dir / b_file).write_bytes(layer.biases.astype("<i4").tobytes())
            obj["weight_quant"] = _quant_to_json(layer.weights.params)
            obj["weight_file"] = w_file
            obj["bias_file"] = b_file
        layer_objs.append(obj)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": net.name,
        "input_shape": list(net.input_shape),
        "input_params": _quant_to_json(net.input_params),
        "class_count": net.class_count,
        "layers": layer_objs,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# requantization to another width


def _rescaled(p: QuantParams, bits: int) -> QuantParams:
    # same float range, re-gridded at the new width
    if p.is_signed:
        scale = p.scale * (2 ** (p.bits - 1) - 1) / (2 ** (bits - 1) - 1)
        return QuantParams.signed(bits, scale)
    scale = p.scale * (2**p.bits - 1) / (2**bits - 1)
    return QuantParams.unsigned(bits, scale, p.zero_point)


def _regrid(q: np.ndarray, old: QuantParams, new: QuantParams) -> np.ndarray:
    # nearest code on the new grid; the floor rule would shift every word by
    # -0.5 codes, which at 4-bit weights (7 codes) wrecks the model
    x = dequantize(q, old) / new.scale + new.zero_point
    r = np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))
    return np.clip(r, new.q_min, new.q_max).astype(np.int32)


def requantize_network(net: Network, bits: int) -> Network:
    """Re-grid every tensor of the model at a new bit width.

    Each tensor's float range is recovered from its native scale and re-divided
    into 2^bits - 1 steps; weights map to the nearest code on the new grid and
    biases are re-scaled into the new accumulator domain. Requantizing to the
    native width reproduces the tensor payloads exactly.
    """
    if not 2 <= bits <= 16:
        raise ConfigError(f"bits must be in [2, 16], got {bits}")
    new_input = _rescaled(net.input_params, bits)
    layers = []
    in_params = net.input_params
    new_in = new_input
    for i, layer in enumerate(net.layers):
        new_out = _rescaled(layer.out_params, bits)
        if layer.is_mac:
            w_params = _rescaled(layer.weights.params, bits)
            w_data = _regrid(layer.weights.data, layer.weights.params, w_params)
            weights = QTensor(layer.weights.shape, w_data, w_params)
            bias_float = layer.biases.astype(np.float64) * (
                in_params.scale * layer.weights.params.scale
            )
            acc_scale = new_in.scale * w_params.scale
            x = bias_float / acc_scale
            biases = np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5)).astype(np.int64)
            layers.append(Layer(name=layer.name, kind=layer.kind, out_params=new_out,
                                geometry=layer.geometry, weights=weights, biases=biases))
        else:
            layers.append(Layer(name=layer.name, kind=layer.kind, out_params=new_out,
                                geometry=layer.geometry))
        in_params = layer.out_params
        new_in = new_out
    return Network(name=net.name, layers=tuple(layers), input_shape=net.input_shape,
                   input_params=new_input, class_count=net.class_count)


def requantize_dataset(dataset: Dataset, native: QuantParams, bits: int) -> Dataset:
    """Map a dataset's pixels from the native input grid onto the width-bits grid."""
    target = _rescaled(native, bits)
    pixels = _regrid(dataset.pixels, native, target)
    return Dataset(pixels, dataset.labels.copy())
