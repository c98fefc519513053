"""Command-line surface: quantize, ranges, infer, campaign, sweep, report.

Exit codes: 0 ok, 2 validation/config/format, 3 I/O, 4 internal. Standard
output carries exactly one machine-readable JSON object per invocation;
progress goes to standard error. Every file artifact embeds a RunManifest
(flag echo + input digests, no timestamps, no thread budget) so a rerun with
the embedded flags reproduces the artifact byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Optional

import click

from . import __version__
from .errors import ConfigError, FormatError, QsylabError
from .faultlab import (CampaignConfig, FaultSite, SamplingPlan, population_size,
                       result_to_obj, run_campaign)
from .guard import GuardSpec, bounds_from_obj, bounds_to_obj, extract_ranges
from .netgraph import (Dataset, Network, evaluate, load_dataset, load_model,
                       requantize_dataset, requantize_network, save_model)
from .qtensor import QTensor
from .report import (PlanParams, SweepSettings, aggregate, aggregate_per_layer,
                     render, sweep, write_atomic)
from .systolic import ArrayConfig, run_network

# flags that change wall time or side outputs but never artifact content
_MANIFEST_EXCLUDED = {"threads", "figures", "no_figures"}

_METHOD_ALIASES = {
    "none": "none",
    "m1": "method1", "method1": "method1",
    "m2": "method2", "method2": "method2",
    "m3": "method3", "method3": "method3",
}


@dataclass(frozen=True)
class RunManifest:
    tool: str
    version: str
    command: str
    args: dict
    inputs: dict

    def to_obj(self) -> dict:
        return {"tool": self.tool, "version": self.version, "command": self.command,
                "args": self.args, "inputs": self.inputs}


def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_model(manifest_path: Path) -> str:
    """Digest over the manifest plus every referenced tensor file, in order."""
    h = hashlib.sha256()
    h.update(manifest_path.read_bytes())
    try:
        obj = json.loads(manifest_path.read_text(encoding="utf-8"))
        for layer in obj.get("layers", []):
            for key in ("weight_file", "bias_file"):
                if key in layer:
                    h.update(_digest_file(manifest_path.parent / layer[key]).encode())
    except (json.JSONDecodeError, OSError):
        pass  # load_model reports the real error with context
    return h.hexdigest()


def _manifest(command: str, params: dict, inputs: dict) -> RunManifest:
    args = {k: v for k, v in sorted(params.items())
            if k not in _MANIFEST_EXCLUDED and v is not None}
    return RunManifest(tool="qsylab", version=__version__, command=command,
                       args=args, inputs=inputs)


def _emit_with_manifest(obj, format: str, path: str, manifest: RunManifest) -> None:
    if format == "json":
        payload = render({"run": manifest.to_obj(), **obj}, "json")
    else:
        comment = "# manifest: " + json.dumps(manifest.to_obj(), sort_keys=True,
                                              separators=(",", ":"))
        payload = comment + "\n" + render(obj, "csv")
    write_atomic(path, payload)


def _stdout(obj: dict) -> None:
    click.echo(json.dumps(obj, sort_keys=True))


def _progress(msg: str) -> None:
    click.echo(msg, err=True)


def _fail(exc: BaseException) -> "SystemExit":
    click.echo(f"qsylab: error: {exc}", err=True)
    if isinstance(exc, QsylabError):
        return SystemExit(exc.exit_code)
    if isinstance(exc, OSError):
        return SystemExit(3)
    return SystemExit(4)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (QsylabError, OSError) as exc:
            raise _fail(exc) from exc
        except (click.ClickException, click.Abort, SystemExit):
            raise
        except Exception as exc:  # internal fault: exit 4, message on stderr
            raise _fail(exc) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _threads_default() -> int:
    raw = os.environ.get("QSYLAB_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"QSYLAB_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"QSYLAB_THREADS must be >= 1, got {value}")
    return value


def _confidence_t(level: float) -> float:
    # the conventional two-sided 95% quantile is used exactly, matching the
    # sizing formula's worked examples; other levels fall back to the normal CDF
    if not 0 < level < 1:
        raise ConfigError(f"confidence level must be in (0, 1), got {level}")
    if abs(level - 0.95) < 1e-12:
        return 1.96
    return NormalDist().inv_cdf((1 + level) / 2)


def _parse_fault_flags(specs: tuple[str, ...]) -> Optional[FaultSite]:
    """Grammar L:I:B(,B)*; repeated flags on the same (layer, index) word
    merge by symmetric difference (flipping a bit twice restores it)."""
    merged: dict[tuple[int, int], set[int]] = {}
    for spec in specs:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"--fault {spec!r}: expected LAYER:INDEX:BIT[,BIT...]")
        try:
            layer, index = int(parts[0]), int(parts[1])
            bits = [int(b) for b in parts[2].split(",") if b != ""]
        except ValueError:
            raise ConfigError(f"--fault {spec!r}: fields must be integers")
        if not bits:
            raise ConfigError(f"--fault {spec!r}: needs at least one bit")
        if layer < 0 or index < 0 or any(b < 0 for b in bits):
            raise ConfigError(f"--fault {spec!r}: fields must be non-negative")
        key = (layer, index)
        acc = merged.setdefault(key, set())
        for b in bits:
            acc.symmetric_difference_update({b})
    merged = {k: v for k, v in merged.items() if v}
    if not merged:
        return None
    if len(merged) > 1:
        raise ConfigError("faults at multiple words are out of scope; "
                          "merge flags onto one LAYER:INDEX")
    (layer, index), bits = next(iter(merged.items()))
    return FaultSite(layer=layer, activation_index=index,
                     bit_positions=frozenset(bits))


def _load_bounds(path: str, net: Network) -> tuple:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})")
    if isinstance(obj, dict) and "bits" in obj:
        if int(obj["bits"]) != net.input_params.bits:
            raise ConfigError(
                f"{path}: bounds were extracted at {obj['bits']} bits, "
                f"model runs at {net.input_params.bits}")
    bounds = bounds_from_obj(obj)
    return tuple(bounds)


def _array_config(rows: int, cols: int, clock_hz: float) -> ArrayConfig:
    return ArrayConfig(rows=rows, cols=cols, clock_hz=clock_hz)


def _maybe_requantized(net: Network, dataset: Optional[Dataset], bits: Optional[int]):
    if bits is None or bits == net.input_params.bits:
        return net, dataset
    native = net.input_params
    net_b = requantize_network(net, bits)
    ds_b = requantize_dataset(dataset, native, bits) if dataset is not None else None
    return net_b, ds_b


def _check_width(bits: int) -> None:
    if not 4 <= bits <= 16:
        raise ConfigError(f"bit width {bits} outside the supported 4..16 range")


_array_options = [
    click.option("--rows", type=int, default=8, show_default=True,
                 help="systolic array rows"),
    click.option("--cols", type=int, default=8, show_default=True,
                 help="systolic array columns"),
    click.option("--clock-hz", type=float, default=100e6, show_default=True,
                 help="array clock for throughput estimates"),
]


def _with(options):
    def deco(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return deco


@click.group(name="qsylab")
@click.version_option(version=__version__, prog_name="qsylab")
def main() -> None:
    """Reliability lab for quantized DNN accelerators: fixed-point inference
    on a systolic-array model, bit-flip fault campaigns, range-check
    mitigation, and design-space sweeps."""


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bits", type=int, required=True, help="target width, 4..16")
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False),
              help="optional dataset; prints accuracy at the new width")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_guarded
def quantize(model_path: str, bits: int, data_path: Optional[str], out_dir: str) -> None:
    """Re-grid a model (and report accuracy) at another bit width."""
    _check_width(bits)
    net = load_model(model_path)
    inputs = {"model": _digest_model(Path(model_path))}
    dataset = load_dataset(data_path) if data_path else None
    if data_path:
        inputs["data"] = _digest_file(Path(data_path))
    native = net.input_params
    net_b = requantize_network(net, bits)
    manifest_path = save_model(net_b, out_dir)
    run = _manifest("quantize", {"model": model_path, "bits": bits,
                                 "data": data_path, "out": out_dir}, inputs)
    obj = json.loads(manifest_path.read_text(encoding="utf-8"))
    write_atomic(str(manifest_path),
                 json.dumps({"run": run.to_obj(), **obj}, indent=2) + "\n")
    accuracy = None
    if dataset is not None:
        ds_b = requantize_dataset(dataset, native, bits)
        accuracy = evaluate(net_b, ds_b)
        _progress(f"quantize: accuracy at {bits} bits = {accuracy:.4f}")
    _stdout({"out": str(manifest_path), "bits": bits, "accuracy": accuracy})


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--limit", type=int, help="use only the first N samples")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def ranges(model_path: str, data_path: str, limit: Optional[int], out_path: str) -> None:
    """Extract per-layer activation bounds from a golden pass."""
    net = load_model(model_path)
    dataset = load_dataset(data_path)
    if limit is not None:
        dataset = dataset.head(limit)
    bounds = extract_ranges(net, dataset)
    run = _manifest("ranges", {"model": model_path, "data": data_path,
                               "limit": limit, "out": out_path},
                    {"model": _digest_model(Path(model_path)),
                     "data": _digest_file(Path(data_path))})
    obj = {"run": run.to_obj(), "bits": net.input_params.bits,
           "bounds": bounds_to_obj(bounds)}
    write_atomic(out_path, json.dumps(obj, indent=2, sort_keys=True) + "\n")
    _stdout({"out": out_path, "layers": len(bounds)})


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="QDS1 dataset file supplying the input image")
@click.option("--index", type=int, default=0, show_default=True,
              help="sample index within --input")
@_with(_array_options)
@click.option("--fault", "fault_specs", multiple=True,
              help="LAYER:INDEX:BIT[,BIT...]; repeatable, same-word flags merge")
@click.option("--guard", "guard_method", default="none", show_default=True,
              type=click.Choice(sorted(set(_METHOD_ALIASES))),
              help="range-check method")
@click.option("--bounds", "bounds_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              help="also write the result JSON here")
@_guarded
def infer(model_path: str, input_path: str, index: int, rows: int, cols: int,
          clock_hz: float, fault_specs: tuple, guard_method: str,
          bounds_path: Optional[str], out_path: Optional[str]) -> None:
    """Run one input through the systolic model, optionally faulted/guarded."""
    net = load_model(model_path)
    dataset = load_dataset(input_path)
    if not 0 <= index < len(dataset):
        raise ConfigError(f"--index {index} outside dataset of {len(dataset)} samples")
    method = _METHOD_ALIASES[guard_method]
    guard_spec = None
    if method != "none":
        if bounds_path is None:
            raise ConfigError("--guard needs --bounds")
        guard_spec = GuardSpec(method=method, bounds=_load_bounds(bounds_path, net))
        guard_spec.validate_against(net)
    fault = _parse_fault_flags(fault_specs)
    x = QTensor(net.input_shape, dataset.pixels[index].reshape(net.input_shape),
                net.input_params)
    pred, cycles = run_network(net, x, _array_config(rows, cols, clock_hz),
                               fault=fault, guard=guard_spec)
    inputs = {"model": _digest_model(Path(model_path)),
              "input": _digest_file(Path(input_path))}
    if bounds_path:
        inputs["bounds"] = _digest_file(Path(bounds_path))
    run = _manifest("infer", {"model": model_path, "input": input_path,
                              "index": index, "rows": rows, "cols": cols,
                              "clock_hz": clock_hz, "fault": sorted(fault_specs),
                              "guard": method, "bounds": bounds_path,
                              "out": out_path}, inputs)
    result = {
        "top1": pred.top1,
        "label": int(dataset.labels[index]),
        "logits": [float(v) for v in pred.logits],
        "confidences": [float(v) for v in pred.confidences],
        "fault": fault.to_obj() if fault else None,
        "guard": method,
        "mac_ops": cycles.mac_ops,
        "cycles": cycles.cycles,
        "giops_estimate": cycles.giops_estimate,
    }
    if out_path:
        _emit_with_manifest(result, "json", out_path, run)
    _stdout(result)


def _campaign_common(model_path, data_path, bits, guard_method, bounds_path,
                     limit, rows, cols, clock_hz, seed, k_bits, threads):
    net = load_model(model_path)
    dataset = load_dataset(data_path)
    if limit is not None:
        dataset = dataset.head(limit)
    if bits is not None:
        _check_width(bits)
    net_b, ds_b = _maybe_requantized(net, dataset, bits)
    width = net_b.input_params.bits
    method = _METHOD_ALIASES[guard_method]
    bounds = None
    if method != "none":
        if bounds_path is None:
            raise ConfigError("--guard needs --bounds")
        bounds = _load_bounds(bounds_path, net_b)
    cfg = CampaignConfig(bits=width, dataset=ds_b,
                         array=_array_config(rows, cols, clock_hz), seed=seed,
                         guard_method=method, k_bits=k_bits, threads=threads)
    return net_b, cfg, bounds


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bits", type=int, help="requantize model+data to this width first")
@click.option("--guard", "guard_method", default="none", show_default=True,
              type=click.Choice(sorted(set(_METHOD_ALIASES))))
@click.option("--bounds", "bounds_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--limit", type=int, help="use only the first N samples")
@_with(_array_options)
@click.option("--confidence", type=float, default=0.95, show_default=True,
              help="two-sided confidence level for the sample-size formula")
@click.option("--error", "error_margin", type=float, default=0.01, show_default=True)
@click.option("--p", type=float, default=0.5, show_default=True,
              help="assumed outcome proportion in the sizing formula")
@click.option("--repetitions", type=int,
              help="override the computed repetition count")
@click.option("--k-bits", type=int, default=1, show_default=True,
              help="simultaneous bit flips per fault word")
@click.option("--seed", type=int, required=True)
@click.option("--threads", type=int, default=None,
              help="worker threads (default: QSYLAB_THREADS or 1)")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def campaign(model_path: str, data_path: str, bits: Optional[int], guard_method: str,
             bounds_path: Optional[str], limit: Optional[int], rows: int, cols: int,
             clock_hz: float, confidence: float, error_margin: float, p: float,
             repetitions: Optional[int], k_bits: int, seed: int,
             threads: Optional[int], out_path: str) -> None:
    """Statistically sized fault-injection campaign; writes a result JSON."""
    threads = _threads_default() if threads is None else threads
    net_b, cfg, bounds = _campaign_common(model_path, data_path, bits, guard_method,
                                          bounds_path, limit, rows, cols, clock_hz,
                                          seed, k_bits, threads)
    plan = SamplingPlan(population=population_size(net_b, cfg.bits),
                        confidence_t=_confidence_t(confidence),
                        error_margin=error_margin, p=p, n=repetitions)
    _progress(f"campaign: population={plan.population} repetitions={plan.n} "
              f"inputs={len(cfg.dataset)}")
    result = run_campaign(net_b, cfg, plan, bounds=bounds)
    overall = aggregate(result)
    per_layer = [{"layer": g.layer, **g.metrics.to_obj()}
                 for g in aggregate_per_layer(result)]
    aggregates = {"overall": overall.to_obj(), "per_layer": per_layer}
    inputs = {"model": _digest_model(Path(model_path)),
              "data": _digest_file(Path(data_path))}
    if bounds_path:
        inputs["bounds"] = _digest_file(Path(bounds_path))
    run = _manifest("campaign", {"model": model_path, "data": data_path,
                                 "bits": bits, "guard": cfg.guard_method,
                                 "bounds": bounds_path, "limit": limit,
                                 "rows": rows, "cols": cols, "clock_hz": clock_hz,
                                 "confidence": confidence, "error": error_margin,
                                 "p": p, "repetitions": repetitions,
                                 "k_bits": k_bits, "seed": seed,
                                 "out": out_path}, inputs)
    _emit_with_manifest(result_to_obj(result, aggregates=aggregates), "json",
                        out_path, run)
    _progress(f"campaign: wrote {out_path}")
    _stdout({"out": out_path, "golden_accuracy": result.golden_accuracy,
             "repetitions": plan.n, "aggregates": overall.to_obj()})


@main.command(name="sweep")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="evaluation slice")
@click.option("--val-data", "val_path", type=click.Path(exists=True, dir_okay=False),
              help="range-extraction slice (default: the evaluation slice)")
@click.option("--bits", "bits_csv", default="8,7,6,5,4", show_default=True,
              help="comma-separated widths")
@click.option("--methods", "methods_csv", default="none,m1,m2,m3", show_default=True)
@click.option("--baseline", "baseline_alias",
              help="method the improvement column is measured against")
@click.option("--limit", type=int)
@_with(_array_options)
@click.option("--confidence", type=float, default=0.95, show_default=True)
@click.option("--error", "error_margin", type=float, default=0.01, show_default=True)
@click.option("--p", type=float, default=0.5, show_default=True)
@click.option("--repetitions", type=int)
@click.option("--k-bits", type=int, default=1, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--threads", type=int, default=None)
@click.option("--format", "format_", type=click.Choice(["csv", "json"]), default="csv",
              show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="render the sweep chart next to the table")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def sweep_cmd(model_path: str, data_path: str, val_path: Optional[str], bits_csv: str,
              methods_csv: str, baseline_alias: Optional[str], limit: Optional[int],
              rows: int, cols: int, clock_hz: float, confidence: float,
              error_margin: float, p: float, repetitions: Optional[int], k_bits: int,
              seed: int, threads: Optional[int], format_: str, figures: bool,
              out_path: str) -> None:
    """Design-space sweep over bit widths and guard methods."""
    threads = _threads_default() if threads is None else threads
    try:
        widths = [int(b) for b in bits_csv.split(",") if b != ""]
    except ValueError:
        raise ConfigError(f"--bits {bits_csv!r}: expected comma-separated integers")
    if not widths:
        raise ConfigError("--bits needs at least one width")
    for b in widths:
        _check_width(b)
    methods = []
    for alias in (m.strip() for m in methods_csv.split(",") if m.strip()):
        if alias not in _METHOD_ALIASES:
            raise ConfigError(f"unknown guard method {alias!r}")
        methods.append(_METHOD_ALIASES[alias])
    baseline = None
    if baseline_alias is not None:
        if baseline_alias not in _METHOD_ALIASES:
            raise ConfigError(f"unknown baseline method {baseline_alias!r}")
        baseline = _METHOD_ALIASES[baseline_alias]
    net = load_model(model_path)
    dataset = load_dataset(data_path)
    calibration = load_dataset(val_path) if val_path else dataset
    if limit is not None:
        dataset = dataset.head(limit)
    settings = SweepSettings(dataset=dataset, calibration=calibration,
                             array=_array_config(rows, cols, clock_hz), seed=seed,
                             k_bits=k_bits, threads=threads, baseline=baseline)
    plan_params = PlanParams(error_margin=error_margin,
                             confidence_t=_confidence_t(confidence), p=p,
                             n=repetitions)
    _progress(f"sweep: {len(widths)} widths x {len(methods)} methods")
    table = sweep(net, widths, methods, settings, plan_params)
    inputs = {"model": _digest_model(Path(model_path)),
              "data": _digest_file(Path(data_path))}
    if val_path:
        inputs["val_data"] = _digest_file(Path(val_path))
    run = _manifest("sweep", {"model": model_path, "data": data_path,
                              "val_data": val_path, "bits": bits_csv,
                              "methods": methods_csv, "baseline": baseline,
                              "limit": limit, "rows": rows, "cols": cols,
                              "clock_hz": clock_hz, "confidence": confidence,
                              "error": error_margin, "p": p,
                              "repetitions": repetitions, "k_bits": k_bits,
                              "seed": seed, "format": format_,
                              "out": out_path}, inputs)
    _emit_with_manifest(table.to_obj() if format_ == "json" else table,
                        format_, out_path, run)
    figure_path = None
    if figures and any(r.error is None for r in table.rows):
        from .figures import render_sweep

        figure_path = str(Path(out_path).with_suffix(".png"))
        render_sweep(table, figure_path)
        _progress(f"sweep: wrote {figure_path}")
    for row in table.rows:
        if row.error is not None:
            _progress(f"sweep: cell ({row.bits}, {row.method}) failed: {row.error}")
    _progress(f"sweep: wrote {out_path}")
    _stdout({"out": out_path, "rows": len(table.rows), "figure": figure_path})


@main.command(name="report")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="campaign result JSON")
@click.option("--format", "format_", type=click.Choice(["csv", "json"]), default="csv",
              show_default=True)
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="render the per-layer chart next to the output")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_guarded
def report_cmd(in_path: str, format_: str, figures: bool, out_path: str) -> None:
    """Re-aggregate a campaign result file into metrics (CSV or JSON)."""
    from .faultlab import result_from_obj

    try:
        obj = json.loads(Path(in_path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{in_path}: not valid JSON ({exc})")
    result = result_from_obj(obj)
    overall = aggregate(result)
    groups = aggregate_per_layer(result)
    run = _manifest("report", {"in": in_path, "format": format_, "out": out_path},
                    {"in": _digest_file(Path(in_path))})
    if format_ == "json":
        payload = {"overall": overall.to_obj(),
                   "per_layer": [{"layer": g.layer, **g.metrics.to_obj()}
                                 for g in groups]}
        _emit_with_manifest(payload, "json", out_path, run)
    else:
        _emit_with_manifest(overall, "csv", out_path, run)
    figure_path = None
    if figures and groups:
        from .figures import render_layer_breakdown

        figure_path = str(Path(out_path).with_suffix(".png"))
        render_layer_breakdown(groups, figure_path)
        _progress(f"report: wrote {figure_path}")
    _stdout({"out": out_path, "format": format_, "figure": figure_path,
             "golden_accuracy": overall.golden_accuracy})


if __name__ == "__main__":
    main()
