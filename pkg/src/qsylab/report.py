"""Outcome classification, metric aggregation, DSE sweep tables, emitters.

Aggregation is done in exact rational arithmetic (fractions.Fraction) and
converted to float once at the end, so results are independent of repetition
order and identical across runs. Emitters produce bit-stable artifacts: fixed
column order, 4-decimal fixed-point percentages, LF endings, UTF-8, written
atomically (temp file + rename).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

from .errors import AggregationError, ConfigError
from .faultlab import (CampaignConfig, CampaignResult, SamplingPlan,
                       population_size, run_campaign)
from .guard import CostSummary, extract_ranges, guard_cost
from .netgraph import (Dataset, Network, Prediction, requantize_dataset,
                       requantize_network)
from .qtensor import QTensor
from .systolic import ArrayConfig, run_network


@dataclass(frozen=True)
class OutcomeFlags:
    sdc1: bool
    sdc5: bool
    sdc10: bool
    sdc5_k: int = 5  # < 5 when the network has fewer classes


def classify_outcome(golden: Prediction, faulty: Prediction) -> OutcomeFlags:
    """SDC flags for one (golden, faulty) prediction pair."""
    if len(golden.logits) != len(faulty.logits):
        raise ConfigError("predictions disagree on class count")
    g = golden.top1
    k = min(5, len(golden.logits))
    sdc1 = faulty.top1 != g
    sdc5 = g not in faulty.topk(k)
    cg = golden.confidences[g]
    cf = faulty.confidences[g]
    sdc10 = abs(cf - cg) > 0.10 * cg
    return OutcomeFlags(sdc1=sdc1, sdc5=sdc5, sdc10=sdc10, sdc5_k=k)


@dataclass(frozen=True)
class Metrics:
    """Campaign-level reliability metrics. All fields are percentages."""

    golden_accuracy: float
    mean_faulty_accuracy: float
    accuracy_loss: float          # golden − mean faulty
    relative_accuracy: float      # 100 · mean faulty / golden
    criticality: float            # % of repetitions strictly below golden
    sdc1_rate: float              # % over all (repetition, input) pairs
    sdc5_rate: float
    sdc10_rate: float
    repetitions_used: int
    repetitions_errored: int
    sdc5_k: int

    def to_obj(self) -> dict:
        return {
            "golden_accuracy": self.golden_accuracy,
            "mean_faulty_accuracy": self.mean_faulty_accuracy,
            "accuracy_loss": self.accuracy_loss,
            "relative_accuracy": self.relative_accuracy,
            "criticality": self.criticality,
            "sdc1_rate": self.sdc1_rate,
            "sdc5_rate": self.sdc5_rate,
            "sdc10_rate": self.sdc10_rate,
            "repetitions_used": self.repetitions_used,
            "repetitions_errored": self.repetitions_errored,
            "sdc5_k": self.sdc5_k,
        }


METRIC_COLUMNS = ("golden_accuracy", "mean_faulty_accuracy", "accuracy_loss",
                  "relative_accuracy", "criticality", "sdc1_rate", "sdc5_rate",
                  "sdc10_rate", "repetitions_used", "repetitions_errored", "sdc5_k")


def _reduce(golden_correct: int, inputs: int, reps, class_count: int,
            errored: int) -> Metrics:
    golden = Fraction(100 * golden_correct, inputs)
    if not reps:
        return Metrics(
            golden_accuracy=float(golden), mean_faulty_accuracy=float(golden),
            accuracy_loss=0.0, relative_accuracy=100.0, criticality=0.0,
            sdc1_rate=0.0, sdc5_rate=0.0, sdc10_rate=0.0,
            repetitions_used=0, repetitions_errored=errored,
            sdc5_k=min(5, class_count),
        )
    mean = Fraction(sum(Fraction(r.correct, r.inputs) for r in reps), len(reps)) * 100
    loss = golden - mean
    if golden > 0:
        relative = mean / golden * 100
    else:
        relative = Fraction(100) if mean == 0 else Fraction(-1)  # sentinel → nan
    g_frac = Fraction(golden_correct, inputs)
    critical = sum(1 for r in reps if Fraction(r.correct, r.inputs) < g_frac)
    pairs = sum(r.inputs for r in reps)
    return Metrics(
        golden_accuracy=float(golden),
        mean_faulty_accuracy=float(mean),
        accuracy_loss=float(loss),
        relative_accuracy=float(relative) if relative >= 0 else math.nan,
        criticality=float(Fraction(100 * critical, len(reps))),
        sdc1_rate=float(Fraction(100 * sum(r.sdc1 for r in reps), pairs)),
        sdc5_rate=float(Fraction(100 * sum(r.sdc5 for r in reps), pairs)),
        sdc10_rate=float(Fraction(100 * sum(r.sdc10 for r in reps), pairs)),
        repetitions_used=len(reps),
        repetitions_errored=errored,
        sdc5_k=min(5, class_count),
    )


def aggregate(result: CampaignResult) -> Metrics:
    """Reduce a campaign to Metrics. A null campaign (no repetitions planned)
    reduces to the fault-free row; a campaign whose every repetition errored
    cannot be aggregated."""
    if result.inputs < 1:
        raise AggregationError("campaign evaluated zero inputs")
    ok = [r for r in result.repetitions if r.error is None]
    errored = len(result.repetitions) - len(ok)
    if result.repetitions and not ok:
        raise AggregationError(
            f"all {len(result.repetitions)} repetitions errored; nothing to aggregate"
        )
    return _reduce(result.golden_correct, result.inputs, ok, result.class_count, errored)


@dataclass(frozen=True)
class LayerMetrics:
    layer: int
    metrics: Metrics


def aggregate_per_layer(result: CampaignResult) -> tuple[LayerMetrics, ...]:
    """Metrics restricted to repetitions whose fault hit each layer's input."""
    groups: dict[int, list] = {}
    for r in result.repetitions:
        if r.error is None and r.site is not None:
            groups.setdefault(r.site.layer, []).append(r)
    out = []
    for layer in sorted(groups):
        out.append(LayerMetrics(
            layer=layer,
            metrics=_reduce(result.golden_correct, result.inputs, groups[layer],
                            result.class_count, 0),
        ))
    return tuple(out)


def improvement(old_value: float, new_value: float) -> Optional[float]:
    """((new − old) / old) · 100; undefined (None) when old = 0."""
    if old_value == 0:
        return None
    return (new_value - old_value) / old_value * 100.0


# ---------------------------------------------------------------------------
# DSE sweep


@dataclass(frozen=True)
class SweepSettings:
    dataset: Dataset       # evaluation slice, native width
    calibration: Dataset   # range-extraction slice, native width
    array: ArrayConfig
    seed: int
    k_bits: int = 1
    threads: int = 1
    baseline: Optional[str] = None  # method the improvement column compares against


@dataclass(frozen=True)
class PlanParams:
    error_margin: float = 0.01
    confidence_t: float = 1.96
    p: float = 0.5
    n: Optional[int] = None


@dataclass(frozen=True)
class DSERow:
    bits: int
    method: str
    accuracy: float                 # golden accuracy at this width (guarded path)
    mean_faulty_accuracy: float
    relative_accuracy: float
    criticality: float
    sdc1_rate: float
    sdc5_rate: float
    sdc10_rate: float
    guard_cost_bits: int
    guard_overhead_percent: float
    cycles: int
    giops_estimate: float
    improvement_vs_baseline: Optional[float] = None
    error: Optional[str] = None


TABLE_COLUMNS = ("bits", "method", "accuracy", "mean_faulty_accuracy",
                 "relative_accuracy", "criticality", "sdc1_rate", "sdc5_rate",
                 "sdc10_rate", "guard_cost_bits", "guard_overhead_percent",
                 "cycles", "giops_estimate", "improvement_vs_baseline", "error")

_PERCENT_COLUMNS = frozenset({
    "accuracy", "mean_faulty_accuracy", "relative_accuracy", "criticality",
    "sdc1_rate", "sdc5_rate", "sdc10_rate", "guard_overhead_percent",
    "improvement_vs_baseline", "golden_accuracy", "accuracy_loss",
})


@dataclass(frozen=True)
class DSETable:
    rows: tuple[DSERow, ...] = field(default=())

    def to_obj(self) -> dict:
        return {"columns": list(TABLE_COLUMNS),
                "rows": [{c: getattr(r, c) for c in TABLE_COLUMNS} for r in self.rows]}


def _error_row(bits: int, method: str, exc: Exception) -> DSERow:
    return DSERow(bits=bits, method=method, accuracy=math.nan,
                  mean_faulty_accuracy=math.nan, relative_accuracy=math.nan,
                  criticality=math.nan, sdc1_rate=math.nan, sdc5_rate=math.nan,
                  sdc10_rate=math.nan, guard_cost_bits=0,
                  guard_overhead_percent=math.nan, cycles=0, giops_estimate=math.nan,
                  error=f"{type(exc).__name__}: {exc}")


def sweep(net: Network, bit_widths: Sequence[int], methods: Sequence[str],
          settings: SweepSettings, plan_params: PlanParams = PlanParams()) -> DSETable:
    """One campaign per (bit width, guard method) cell; cell failures are
    recorded in the row, never abort the table."""
    if not bit_widths:
        raise ConfigError("sweep needs at least one bit width")
    if not methods:
        raise ConfigError("sweep needs at least one guard method")
    if settings.baseline is not None and settings.baseline not in methods:
        raise ConfigError(f"baseline {settings.baseline!r} not among methods")
    native_bits = net.input_params.bits
    rows: list[DSERow] = []
    for bits in bit_widths:
        try:
            net_b = requantize_network(net, bits)
            ds_b = requantize_dataset(settings.dataset, net.input_params, bits)
            cal_b = requantize_dataset(settings.calibration, net.input_params, bits)
            bounds_b = extract_ranges(net_b, cal_b)
            x0 = QTensor(net_b.input_shape,
                         ds_b.pixels[0].reshape(net_b.input_shape),
                         net_b.input_params)
            _, cycle = run_network(net_b, x0, settings.array)
            plan = SamplingPlan(population=population_size(net_b, bits),
                                confidence_t=plan_params.confidence_t,
                                error_margin=plan_params.error_margin,
                                p=plan_params.p, n=plan_params.n)
        except Exception as exc:
            rows.extend(_error_row(bits, m, exc) for m in methods)
            continue
        width_rows: dict[str, tuple[DSERow, Metrics]] = {}
        for method in methods:
            try:
                cfg = CampaignConfig(bits=bits, dataset=ds_b, array=settings.array,
                                     seed=settings.seed, guard_method=method,
                                     k_bits=settings.k_bits, threads=settings.threads)
                result = run_campaign(net_b, cfg, plan,
                                      bounds=None if method == "none" else bounds_b)
                m = aggregate(result)
                if method == "none":
                    cost_bits, overhead = 0, 0.0
                else:
                    cost: CostSummary = guard_cost(net_b, method,
                                                   reference_bits=native_bits)
                    cost_bits = cost.total_bits
                    overhead = cost.relative_overhead_percent
                row = DSERow(bits=bits, method=method, accuracy=m.golden_accuracy,
                             mean_faulty_accuracy=m.mean_faulty_accuracy,
                             relative_accuracy=m.relative_accuracy,
                             criticality=m.criticality, sdc1_rate=m.sdc1_rate,
                             sdc5_rate=m.sdc5_rate, sdc10_rate=m.sdc10_rate,
                             guard_cost_bits=cost_bits,
                             guard_overhead_percent=overhead,
                             cycles=cycle.cycles, giops_estimate=cycle.giops_estimate)
                width_rows[method] = (row, m)
            except Exception as exc:
                width_rows[method] = (_error_row(bits, method, exc), None)
        base = settings.baseline
        for method in methods:
            row, m = width_rows[method]
            if (base is not None and method != base and m is not None
                    and width_rows[base][1] is not None):
                old = width_rows[base][1].mean_faulty_accuracy
                imp = improvement(old, m.mean_faulty_accuracy)
                row = replace(row, improvement_vs_baseline=imp)
            rows.append(row)
    return DSETable(rows=tuple(rows))


# ---------------------------------------------------------------------------
# emitters


def _fmt_cell(column: str, value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float) and math.isnan(value):
        return "undefined"
    if column in _PERCENT_COLUMNS or column == "giops_estimate":
        v = float(value)
        if abs(v) < 5e-5:
            v = 0.0
        return f"{v:.4f}"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _csv_lines(obj) -> list[str]:
    if isinstance(obj, DSETable):
        lines = [",".join(TABLE_COLUMNS)]
        for r in obj.rows:
            cells = []
            for c in TABLE_COLUMNS:
                v = getattr(r, c)
                if c == "error":
                    cells.append("" if v is None else str(v).replace(",", ";"))
                else:
                    cells.append(_fmt_cell(c, v))
            lines.append(",".join(cells))
        return lines
    if isinstance(obj, Metrics):
        header = ",".join(METRIC_COLUMNS)
        row = ",".join(_fmt_cell(c, getattr(obj, c)) for c in METRIC_COLUMNS)
        return [header, row]
    raise ConfigError(f"cannot render {type(obj).__name__} as CSV")


def render(obj, format: str) -> str:
    """Serialize a Metrics, DSETable, or plain JSON-ready object to text."""
    if format == "csv":
        return "\n".join(_csv_lines(obj)) + "\n"
    if format == "json":
        if isinstance(obj, (Metrics, DSETable)):
            obj = obj.to_obj()
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"
    raise ConfigError(f"unknown output format {format!r}")


def emit(obj, format: str, path: str) -> None:
    """Write a Metrics, DSETable, or plain JSON-ready dict to path."""
    write_atomic(path, render(obj, format))


def write_atomic(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".qsylab-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
                f.write(payload)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
