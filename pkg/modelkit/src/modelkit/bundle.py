"""Bundle assembly: manifest + tensors + dataset slices + provenance.

Everything here writes the interchange formats directly (JSON manifest,
little-endian int32 tensor files, "QDS1" datasets) so the exporter stays a
pure producer of the on-disk contract — it never imports the inference
package it feeds. All outputs are deterministic functions of the seed: files
are assembled fully in memory and only written once every check has passed,
so a refused export leaves no partial bundle behind.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import POOLS, SyntheticCorpus, load_idx_images, load_idx_labels
from .errors import ConfigError, ExportError
from .lenet import accuracy, architecture, init_params, train
from .quantize import (
    DEFAULT_MARGIN,
    QParams,
    QuantizedModel,
    input_qparams,
    int_accuracy,
    quantize_array,
    quantize_model,
)

FORMAT_VERSION = 1
QDS_MAGIC = b"QDS1"
TOOL_VERSION = "0.1.0"
ACCURACY_FLOOR = 97.0  # float top-1, percent
SELF_CHECK_POINTS = 0.1  # max |float - integer| accuracy gap at export


# ---------------------------------------------------------------------------
# QDS1 dataset files


def qds_bytes(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.ndim != 2 or len(pixels) != len(labels) or len(labels) == 0:
        raise ConfigError("dataset needs matching, nonempty pixel/label rows")
    out = bytearray(QDS_MAGIC)
    out += np.array([len(labels)], dtype="<u4").tobytes()
    for row, label in zip(pixels, labels):
        out.append(int(label))
        out += row.astype("<i4").tobytes()
    return bytes(out)


def read_qds(path) -> tuple[np.ndarray, np.ndarray]:
    """Independent reader used for self-checks; returns (pixels, labels)."""
    raw = Path(path).read_bytes()
    if raw[:4] != QDS_MAGIC:
        raise ConfigError(f"{path}: bad magic {raw[:4]!r}")
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if count == 0 or (len(raw) - 8) % count:
        raise ConfigError(f"{path}: body does not divide into {count} samples")
    stride = (len(raw) - 8) // count
    n_px = (stride - 1) // 4
    labels = np.empty(count, dtype=np.uint8)
    pixels = np.empty((count, n_px), dtype=np.int32)
    for i in range(count):
        off = 8 + i * stride
        labels[i] = raw[off]
        pixels[i] = np.frombuffer(raw, dtype="<i4", count=n_px, offset=off + 1)
    return pixels, labels


# ---------------------------------------------------------------------------
# manifest


def _quant_obj(p: QParams) -> dict:
    return {"bits": p.bits, "scale": p.scale, "zero_point": p.zero_point}


def manifest_obj(qm: QuantizedModel) -> dict:
    layers = []
    for layer in qm.layers:
        obj: dict = {
            "name": layer.name,
            "kind": layer.kind,
            "quant": _quant_obj(layer.out_params),
        }
        if layer.kind == "conv2d":
            k = layer.spec["kernel"]
            obj["geometry"] = {
                "kernel": [k, k],
                "in_channels": layer.spec["in_channels"],
                "out_channels": layer.spec["out_channels"],
                "stride": 1,
                "padding": layer.spec["padding"],
            }
            obj["weight_quant"] = _quant_obj(layer.weight_params)
            obj["weight_file"] = f"{layer.name}_weights.bin"
            obj["bias_file"] = f"{layer.name}_bias.bin"
        elif layer.kind == "dense":
            obj["geometry"] = {
                "in_features": layer.spec["in_features"],
                "out_features": layer.spec["out_features"],
            }
            obj["weight_quant"] = _quant_obj(layer.weight_params)
            obj["weight_file"] = f"{layer.name}_weights.bin"
            obj["bias_file"] = f"{layer.name}_bias.bin"
        else:
            obj["geometry"] = {}
        layers.append(obj)
    return {
        "format_version": FORMAT_VERSION,
        "name": qm.name,
        "input_shape": list(qm.input_shape),
        "input_params": _quant_obj(qm.input_params),
        "class_count": qm.class_count,
        "layers": layers,
    }


def _json_bytes(obj: dict) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# data sourcing


def _pools(seed: int, data_dir) -> tuple[dict, dict]:
    """(pool arrays, description). Pools: train/calibration/holdout."""
    sizes = {name: len(rng) for name, rng in POOLS.items()}
    if data_dir is None:
        corpus = SyntheticCorpus(seed)
        pools = {name: corpus.batch(idx) for name, idx in POOLS.items()}
        desc = {"kind": "synthetic-dotmatrix", "seed": seed,
                "size": corpus_mod.CORPUS_SIZE, "pools": sizes}
        return pools, desc
    base = Path(data_dir)
    x = load_idx_images(base / "train-images-idx3-ubyte")
    y = load_idx_labels(base / "train-labels-idx1-ubyte")
    if len(x) != len(y):
        raise ConfigError(f"{base}: image/label counts differ ({len(x)} vs {len(y)})")
    need = sum(sizes.values())
    if len(x) < need:
        raise ConfigError(f"{base}: {len(x)} samples, need {need}")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A])).permutation(len(x))
    pools, desc_pools, start = {}, {}, 0
    for name, size in sizes.items():
        sel = order[start : start + size]
        pools[name] = (x[sel][..., np.newaxis], y[sel])
        desc_pools[name] = size
        start += size
    desc = {"kind": "idx-files", "seed": seed, "size": len(x), "pools": desc_pools}
    return pools, desc


def _split_holdout(n_val: int, n_test: int, rng: np.random.Generator, pool_size: int):
    if n_val < 1 or n_test < 1:
        raise ConfigError("subset sizes must be >= 1")
    if n_val + n_test > pool_size:
        raise ConfigError(
            f"requested {n_val}+{n_test} samples from a holdout pool of {pool_size}; "
            "disjoint sampling is impossible"
        )
    order = rng.permutation(pool_size)
    return order[:n_val], order[n_val : n_val + n_test]


# ---------------------------------------------------------------------------
# export operations


@dataclass(frozen=True)
class ExportBundle:
    manifest: Path
    tensor_files: tuple
    val_data: Path
    test_data: Path
    provenance: Path
    summary: dict


def _quantize_pixels(x: np.ndarray, p: QParams) -> np.ndarray:
    return quantize_array(x.reshape(len(x), -1), p)


def train_and_export(
    epochs: int,
    seed: int,
    out_dir,
    *,
    arch_name: str = "lenet5",
    margin: float = DEFAULT_MARGIN,
    n_val: int = 1000,
    n_test: int = 1000,
    lr: float = 0.01,
    data_dir=None,
    log=None,
) -> ExportBundle:
    """Train the float model, quantize it, and write the full bundle.

    Refuses (without writing anything) when float top-1 on the exported
    validation slice is below the accuracy floor, or when the integer
    re-evaluation disagrees with the recorded float accuracy by more than
    the self-check tolerance.
    """
    arch = architecture(arch_name)
    say = log or (lambda _msg: None)
    init_ss, shuffle_ss, subset_ss = np.random.SeedSequence(seed).spawn(3)

    say("building data pools")
    pools, corpus_desc = _pools(seed, data_dir)
    train_x, train_y = pools["train"]
    cal_x, _ = pools["calibration"]
    hold_x, hold_y = pools["holdout"]

    say(f"training {arch_name} for {epochs} epoch(s)")
    params = init_params(arch, np.random.default_rng(init_ss))
    train(arch, params, train_x, train_y, epochs=epochs,
          rng=np.random.default_rng(shuffle_ss), lr=lr, log=say)

    val_idx, test_idx = _split_holdout(
        n_val, n_test, np.random.default_rng(subset_ss), len(hold_y)
    )
    val_x, val_y = hold_x[val_idx], hold_y[val_idx]
    test_x, test_y = hold_x[test_idx], hold_y[test_idx]

    float_val = 100.0 * accuracy(arch, params, val_x, val_y)
    float_test = 100.0 * accuracy(arch, params, test_x, test_y)
    say(f"float top-1: val {float_val:.2f}%, test {float_test:.2f}%")
    if float_val < ACCURACY_FLOOR:
        raise ExportError(
            f"float validation accuracy {float_val:.2f}% is below the "
            f"{ACCURACY_FLOOR:.0f}% floor; export refused"
        )

    say("calibrating scales and quantizing")
    qm = quantize_model(arch, params, cal_x, name=arch_name, margin=margin)
    q_val = _quantize_pixels(val_x, qm.input_params)
    q_test = _quantize_pixels(test_x, qm.input_params)
    int_val = 100.0 * int_accuracy(
        qm, q_val.reshape((len(q_val),) + qm.input_shape), val_y
    )
    say(f"integer self-check top-1: val {int_val:.2f}%")
    if abs(float_val - int_val) > SELF_CHECK_POINTS + 1e-12:
        raise ExportError(
            f"integer re-evaluation {int_val:.2f}% deviates from recorded float "
            f"accuracy {float_val:.2f}% by more than {SELF_CHECK_POINTS} points"
        )

    provenance = {
        "tool": "modelkit",
        "version": TOOL_VERSION,
        "architecture": arch_name,
        "seed": seed,
        "epochs": epochs,
        "learning_rate": lr,
        "corpus": corpus_desc,
        "calibration_margin": margin,
        "weight_bits": 8,
        "activation_bits": 8,
        "float_val_accuracy": float_val,
        "float_test_accuracy": float_test,
        "integer_val_accuracy": int_val,
        "float_ranges": {k: list(v) for k, v in qm.float_ranges.items()},
        "subsets": {
            "val": {"count": n_val, "pool": "holdout", "indices": [int(i) for i in val_idx]},
            "test": {"count": n_test, "pool": "holdout", "indices": [int(i) for i in test_idx]},
        },
    }

    # everything validated — now touch the filesystem
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensor_files = []
    for layer in qm.layers:
        if layer.weights is None:
            continue
        w_path = out / f"{layer.name}_weights.bin"
        b_path = out / f"{layer.name}_bias.bin"
        w_path.write_bytes(layer.weights.flatten().astype("<i4").tobytes())
        b_path.write_bytes(layer.biases.astype("<i4").tobytes())
        tensor_files += [w_path, b_path]
    manifest_path = out / "manifest.json"
    manifest_path.write_bytes(_json_bytes(manifest_obj(qm)))
    val_path = out / "val.qds"
    test_path = out / "test.qds"
    val_path.write_bytes(qds_bytes(q_val, val_y))
    test_path.write_bytes(qds_bytes(q_test, test_y))
    prov_path = out / "provenance.json"
    prov_path.write_bytes(_json_bytes(provenance))
    say(f"bundle written to {out}")

    summary = {
        "out_dir": str(out),
        "architecture": arch_name,
        "float_val_accuracy": float_val,
        "float_test_accuracy": float_test,
        "integer_val_accuracy": int_val,
        "files": [p.name for p in [manifest_path, *tensor_files, val_path, test_path, prov_path]],
    }
    return ExportBundle(
        manifest=manifest_path,
        tensor_files=tuple(tensor_files),
        val_data=val_path,
        test_data=test_path,
        provenance=prov_path,
        summary=summary,
    )


def export_subset(
    n_val: int,
    n_test: int,
    seed: int,
    out_dir,
    *,
    data_dir=None,
    log=None,
) -> tuple[Path, Path]:
    """Write just the two dataset slices (val.qds, test.qds), disjointly sampled."""
    say = log or (lambda _msg: None)
    _, _, subset_ss = np.random.SeedSequence(seed).spawn(3)
    pools, corpus_desc = _pools(seed, data_dir)
    hold_x, hold_y = pools["holdout"]
    val_idx, test_idx = _split_holdout(
        n_val, n_test, np.random.default_rng(subset_ss), len(hold_y)
    )
    in_p = input_qparams()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    val_path, test_path = out / "val.qds", out / "test.qds"
    val_path.write_bytes(qds_bytes(_quantize_pixels(hold_x[val_idx], in_p), hold_y[val_idx]))
    test_path.write_bytes(qds_bytes(_quantize_pixels(hold_x[test_idx], in_p), hold_y[test_idx]))
    sidecar = {
        "corpus": corpus_desc,
        "seed": seed,
        "subsets": {
            "val": {"count": n_val, "pool": "holdout", "indices": [int(i) for i in val_idx]},
            "test": {"count": n_test, "pool": "holdout", "indices": [int(i) for i in test_idx]},
        },
    }
    (out / "subsets.json").write_bytes(_json_bytes(sidecar))
    say(f"wrote {val_path} and {test_path}")
    return val_path, test_path
