"""Builders shared by the test modules: random small networks, oracle adapters."""

import numpy as np

from qsylab.netgraph import (
    ConvGeometry,
    DenseGeometry,
    Layer,
    Network,
    QTensor,
    QuantParams,
)
from qsylab.qtensor import quantize


def _signed_weights(rng, shape, bits):
    w_float = rng.uniform(-1.0, 1.0, size=shape)
    w_scale = 1.0 / (2 ** (bits - 1) - 1)  # signed symmetric over [-1, 1]
    params = QuantParams.signed(bits, w_scale)
    return QTensor(shape, quantize(w_float, params), params)


def _mac_layer(rng, name, kind, geometry, k, bits, in_scale):
    if kind == "conv2d":
        shape = (geometry.kernel_h, geometry.kernel_w, geometry.in_channels, geometry.out_channels)
        n_out = geometry.out_channels
    else:
        shape = (geometry.in_features, geometry.out_features)
        n_out = geometry.out_features
    weights = _signed_weights(rng, shape, bits)
    # out scale sized so typical accumulators land mid-range instead of saturating
    out_scale = in_scale * weights.params.scale * max(k, 1) * 0.35
    out_params = QuantParams.unsigned(bits, out_scale)
    bias_span = max(2, k)
    biases = rng.integers(-bias_span, bias_span + 1, size=n_out).astype(np.int64)
    return Layer(name=name, kind=kind, out_params=out_params, geometry=geometry,
                 weights=weights, biases=biases), out_params


def make_random_net(seed, bits=8, class_count=None, max_convs=2):
    """Random conv/relu/pool/flatten/dense stack with chained shapes."""
    rng = np.random.default_rng(seed)
    h = int(rng.integers(5, 13))
    w = int(rng.integers(5, 13))
    c = int(rng.integers(1, 4))
    in_params = QuantParams.unsigned(bits, 1.0 / (2**bits - 1))
    layers = []
    shape = (h, w, c)
    params = in_params
    for ci in range(int(rng.integers(0, max_convs + 1))):
        kh = int(rng.integers(1, min(4, shape[0]) + 1))
        kw = int(rng.integers(1, min(4, shape[1]) + 1))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        cout = int(rng.integers(1, 7))
        geom = ConvGeometry(kh, kw, shape[2], cout, stride, pad)
        oh = (shape[0] + 2 * pad - kh) // stride + 1
        ow = (shape[1] + 2 * pad - kw) // stride + 1
        if oh < 1 or ow < 1:
            continue
        layer, params = _mac_layer(rng, f"conv{ci + 1}", "conv2d", geom,
                                   kh * kw * shape[2], bits, params.scale)
        layers.append(layer)
        shape = (oh, ow, cout)
        if rng.random() < 0.4:
            layers.append(Layer(name=f"relu{ci + 1}", kind="relu", out_params=params))
        if shape[0] >= 2 and shape[1] >= 2 and rng.random() < 0.5:
            layers.append(Layer(name=f"pool{ci + 1}", kind="maxpool2x2", out_params=params))
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
    layers.append(Layer(name="flatten", kind="flatten", out_params=params))
    n = int(np.prod(shape))
    if class_count is None:
        class_count = int(rng.integers(3, 11))
    if rng.random() < 0.5:
        mid = int(rng.integers(4, 17))
        layer, params = _mac_layer(rng, "fc_hidden", "dense", DenseGeometry(n, mid),
                                   n, bits, params.scale)
        layers.append(layer)
        n = mid
    layer, params = _mac_layer(rng, "fc_out", "dense", DenseGeometry(n, class_count),
                               n, bits, params.scale)
    layers.append(layer)
    return Network(name=f"rand{seed}", layers=tuple(layers), input_shape=(h, w, c),
                   input_params=in_params, class_count=class_count)


def random_input(rng, net):
    data = rng.integers(net.input_params.q_min, net.input_params.q_max + 1,
                        size=net.input_shape, dtype=np.int64)
    return QTensor(net.input_shape, data, net.input_params)


def oracle_desc(net):
    """Translate a Network into the plain-dict schema the scalar oracle consumes."""
    layers = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv2d":
            g = layer.geometry
            layers.append({
                "kind": "conv2d", "kh": g.kernel_h, "kw": g.kernel_w,
                "cin": g.in_channels, "cout": g.out_channels,
                "stride": g.stride, "pad": g.padding,
                "w": layer.weights.data.tolist(), "bias": layer.biases.tolist(),
                "m": net.requant_multiplier(i), "qmax": layer.out_params.q_max,
            })
        elif layer.kind == "dense":
            g = layer.geometry
            layers.append({
                "kind": "dense", "n_in": g.in_features, "n_out": g.out_features,
                "w": layer.weights.data.tolist(), "bias": layer.biases.tolist(),
                "m": net.requant_multiplier(i), "qmax": layer.out_params.q_max,
            })
        else:
            layers.append({"kind": layer.kind})
    return layers
