"""Float training for small HWC convnets.

Layouts match the interchange format exactly — activations are row-major HWC,
conv kernels are [kh][kw][cin][cout], dense weights are [in][out] — so export
is a straight quantization with no axis shuffling. ReLU follows every MAC
layer except the terminal classifier; the exported integer graph realizes the
same nonlinearity through its unsigned requantization clamp, so no explicit
activation layers ship in the manifest.

Pure numpy, SGD with momentum. Titled after its main customer; the layer walk
is generic over the architecture registry.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# (name, kind, spec); kernel/pool stride is fixed at 1/2 respectively
LENET5 = (
    ("conv1", "conv2d", {"kernel": 5, "in_channels": 1, "out_channels": 6, "padding": 0}),
    ("pool1", "maxpool2x2", {}),
    ("conv2", "conv2d", {"kernel": 5, "in_channels": 6, "out_channels": 16, "padding": 0}),
    ("pool2", "maxpool2x2", {}),
    ("flat", "flatten", {}),
    ("fc1", "dense", {"in_features": 256, "out_features": 120}),
    ("fc2", "dense", {"in_features": 120, "out_features": 10}),
)

# CIFAR-scale config: present for completeness, not trained by the fixture flow
ALEXNET_CIFAR10 = (
    ("conv1", "conv2d", {"kernel": 5, "in_channels": 3, "out_channels": 32, "padding": 2}),
    ("pool1", "maxpool2x2", {}),
    ("conv2", "conv2d", {"kernel": 5, "in_channels": 32, "out_channels": 32, "padding": 2}),
    ("pool2", "maxpool2x2", {}),
    ("conv3", "conv2d", {"kernel": 5, "in_channels": 32, "out_channels": 64, "padding": 2}),
    ("pool3", "maxpool2x2", {}),
    ("flat", "flatten", {}),
    ("fc1", "dense", {"in_features": 1024, "out_features": 64}),
    ("fc2", "dense", {"in_features": 64, "out_features": 10}),
)

ARCHITECTURES = {
    "lenet5": {"layers": LENET5, "input_shape": (28, 28, 1), "class_count": 10},
    "alexnet-cifar10": {"layers": ALEXNET_CIFAR10, "input_shape": (32, 32, 3), "class_count": 10},
}


def architecture(name: str) -> dict:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise ConfigError(
            f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}"
        ) from None


def init_params(arch: dict, rng: np.random.Generator) -> dict:
    """He-initialized weights keyed by layer name."""
    params = {}
    for name, kind, spec in arch["layers"]:
        if kind == "conv2d":
            k, cin, cout = spec["kernel"], spec["in_channels"], spec["out_channels"]
            fan_in = k * k * cin
            params[name] = {
                "w": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k, k, cin, cout)),
                "b": np.zeros(cout),
            }
        elif kind == "dense":
            fan_in = spec["in_features"]
            params[name] = {
                "w": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, spec["out_features"])),
                "b": np.zeros(spec["out_features"]),
            }
    return params


def _patches(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    # (N, H, W, C) -> (N, oh, ow, k*k*C), windows flattened in (kh, kw, cin) order
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win.transpose(0, 1, 2, 4, 5, 3)  # (N, oh, ow, kh, kw, cin)
    n, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win).reshape(n, oh, ow, -1)


def _terminal(arch: dict) -> str:
    return arch["layers"][-1][0]


def forward(arch: dict, params: dict, x: np.ndarray, keep: bool = False):
    """Run a batch; returns (logits, cache-or-activations).

    With ``keep`` the second element maps layer name -> its output after the
    nonlinearity (raw logits for the terminal layer), which is what scale
    calibration consumes. Without it the cache holds what backward needs.
    """
    last = _terminal(arch)
    cache: dict = {"inputs": {}}
    acts: dict = {}
    for name, kind, spec in arch["layers"]:
        cache["inputs"][name] = x
        if kind == "conv2d":
            pt = _patches(x, spec["kernel"], spec["padding"])
            wmat = params[name]["w"].reshape(-1, spec["out_channels"])
            z = pt @ wmat + params[name]["b"]
            cache[name] = {"patches": pt, "z": z}
            x = z if name == last else np.maximum(z, 0.0)
        elif kind == "dense":
            z = x @ params[name]["w"] + params[name]["b"]
            cache[name] = {"z": z}
            x = z if name == last else np.maximum(z, 0.0)
        elif kind == "maxpool2x2":
            n, h, w, c = x.shape
            oh, ow = h // 2, w // 2
            xr = (
                x[:, : oh * 2, : ow * 2, :]
                .reshape(n, oh, 2, ow, 2, c)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, oh, ow, c, 4)
            )
            idx = xr.argmax(axis=-1)
            cache[name] = {"idx": idx, "in_shape": x.shape}
            x = np.take_along_axis(xr, idx[..., np.newaxis], axis=-1)[..., 0]
        elif kind == "flatten":
            cache[name] = {"in_shape": x.shape}
            x = x.reshape(x.shape[0], -1)
        else:
            raise ConfigError(f"unsupported layer kind {kind!r}")
        if keep:
            acts[name] = x
    return x, (acts if keep else cache)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(arch: dict, params: dict, x: np.ndarray, labels: np.ndarray):
    """(mean cross-entropy, grads keyed like params)."""
    logits, cache = forward(arch, params, x)
    n = len(labels)
    p = _softmax(logits)
    loss = -np.log(np.clip(p[np.arange(n), labels], 1e-12, None)).mean()
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n

    last = _terminal(arch)
    grads = {}
    for name, kind, spec in reversed(arch["layers"]):
        if kind == "conv2d":
            if name != last:
                d = d * (cache[name]["z"] > 0.0)
            pt = cache[name]["patches"]
            cout = spec["out_channels"]
            dmat = d.reshape(-1, cout)
            grads[name] = {
                "w": (pt.reshape(-1, pt.shape[-1]).T @ dmat).reshape(params[name]["w"].shape),
                "b": dmat.sum(axis=0),
            }
            dp = d @ params[name]["w"].reshape(-1, cout).T  # (N, oh, ow, k*k*cin)
            d = _scatter_patches(dp, cache["inputs"][name].shape, spec)
        elif kind == "dense":
            if name != last:
                d = d * (cache[name]["z"] > 0.0)
            xin = cache["inputs"][name]
            grads[name] = {"w": xin.T @ d, "b": d.sum(axis=0)}
            d = d @ params[name]["w"].T
        elif kind == "maxpool2x2":
            idx, in_shape = cache[name]["idx"], cache[name]["in_shape"]
            n_, h, w, c = in_shape
            oh, ow = h // 2, w // 2
            dout = np.zeros((n_, oh, ow, c, 4))
            np.put_along_axis(dout, idx[..., np.newaxis], d[..., np.newaxis], axis=-1)
            d = (
                dout.reshape(n_, oh, ow, c, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n_, oh * 2, ow * 2, c)
            )
            if (oh * 2, ow * 2) != (h, w):  # odd tail rows/cols never pooled
                full = np.zeros(in_shape)
                full[:, : oh * 2, : ow * 2, :] = d
                d = full
        elif kind == "flatten":
            d = d.reshape(cache[name]["in_shape"])
    return loss, grads


def _scatter_patches(dp: np.ndarray, in_shape, spec) -> np.ndarray:
    k, pad = spec["kernel"], spec["padding"]
    n, h, w, c = in_shape
    oh, ow = dp.shape[1], dp.shape[2]
    dpr = dp.reshape(n, oh, ow, k, k, c)
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            dx[:, i : i + oh, j : j + ow, :] += dpr[:, :, :, i, j, :]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad, :]
    return dx


def accuracy(arch: dict, params: dict, x: np.ndarray, labels: np.ndarray) -> float:
    logits, _ = forward(arch, params, x)
    return float((logits.argmax(axis=1) == labels).mean())


def train(
    arch: dict,
    params: dict,
    x: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    rng: np.random.Generator,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 64,
    log=None,
) -> dict:
    """SGD with momentum, in place on ``params``; returns the same dict."""
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    vel = {
        name: {k: np.zeros_like(v) for k, v in p.items()} for name, p in params.items()
    }
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        running = 0.0
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            loss, grads = loss_and_grads(arch, params, x[sel], labels[sel])
            running += loss * len(sel)
            for name, g in grads.items():
                for key in g:
                    vel[name][key] = momentum * vel[name][key] - lr * g[key]
                    params[name][key] += vel[name][key]
        if log is not None:
            log(f"epoch {epoch + 1}/{epochs}: mean loss {running / len(order):.4f}")
    return params
