"""Fault model, statistical campaign sizing, and the campaign runner.

A fault is a persistent bit flip in one stored activation word: the XOR is
applied to the designated layer's input buffer, so every read of that word
during the repetition sees the corrupted value. A campaign runs one golden
evaluation and n statistically sized repetitions; each repetition derives an
independent random stream from (seed, index), samples one fault site uniformly
over the (activation word, bit) population, evaluates the whole configured
dataset slice with the fault, and records accuracy plus SDC counts. Results
are reduced in repetition-index order, so a campaign is bit-identical for a
given (seed, config) no matter the thread budget.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .guard import GuardSpec, LayerBounds
from .netgraph import Dataset, Network, softmax_batch
from .systolic import ArrayConfig, BatchEngine, validate_fault


@dataclass(frozen=True)
class FaultSite:
    layer: int
    activation_index: int
    bit_positions: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bit_positions", frozenset(self.bit_positions))
        if not self.bit_positions:
            raise ConfigError("a fault site needs at least one bit position")

    @property
    def mask(self) -> int:
        m = 0
        for p in self.bit_positions:
            m |= 1 << p
        return m

    def to_obj(self) -> dict:
        return {
            "layer": self.layer,
            "activation_index": self.activation_index,
            "bit_positions": sorted(self.bit_positions),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "FaultSite":
        try:
            return cls(layer=int(obj["layer"]),
                       activation_index=int(obj["activation_index"]),
                       bit_positions=frozenset(int(b) for b in obj["bit_positions"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed fault site {obj!r} ({exc})") from exc


def _formula_n(population: int, e: float, t: float, p: float) -> int:
    return math.ceil(population / (1 + e * e * (population - 1) / (t * t * p * (1 - p))))


@dataclass(frozen=True)
class SamplingPlan:
    """Statistical sizing: n repetitions drawn from a population of N
    injectable (word, bit) pairs at confidence quantile t and error margin e.

    n = 0 is the faults-disabled mode (golden evaluation only).
    """

    population: int
    confidence_t: float = 1.96
    error_margin: float = 0.01
    p: float = 0.5
    n: Optional[int] = None

    def __post_init__(self) -> None:
        if self.population < 1:
            raise ConfigError(f"population must be >= 1, got {self.population}")
        if not 0 < self.error_margin < 1:
            raise ConfigError(f"error margin must be in (0, 1), got {self.error_margin}")
        if not 0 < self.p < 1:
            raise ConfigError(f"p must be in (0, 1), got {self.p}")
        if not self.confidence_t > 0:
            raise ConfigError(f"confidence quantile must be positive, got {self.confidence_t}")
        if self.n is None:
            object.__setattr__(
                self, "n",
                _formula_n(self.population, self.error_margin, self.confidence_t, self.p),
            )
        if self.n < 0 or self.n > self.population:
            raise ConfigError(f"n = {self.n} outside [0, population = {self.population}]")

    def to_obj(self) -> dict:
        return {"population": self.population, "confidence_t": self.confidence_t,
                "error_margin": self.error_margin, "p": self.p, "n": self.n}

    @classmethod
    def from_obj(cls, obj: dict) -> "SamplingPlan":
        try:
            return cls(population=int(obj["population"]),
                       confidence_t=float(obj["confidence_t"]),
                       error_margin=float(obj["error_margin"]),
                       p=float(obj["p"]), n=int(obj["n"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed sampling plan {obj!r} ({exc})") from exc


def population_size(net: Network, bits: int, include_kinds: Optional[set] = None) -> int:
    """Total injectable bits: stored words feeding each layer, times width.

    include_kinds restricts eligibility to the inputs of layers of those kinds
    (default: every layer's input buffer, network input included).
    """
    counts = net.layer_input_counts()
    total = 0
    for layer, count in zip(net.layers, counts):
        if include_kinds is None or layer.kind in include_kinds:
            total += count
    return total * bits


def sample_size(plan: SamplingPlan) -> int:
    """n = ceil(N / (1 + e^2 (N-1) / (t^2 p (1-p))))."""
    return _formula_n(plan.population, plan.error_margin, plan.confidence_t, plan.p)


def sample_fault(rng: np.random.Generator, net: Network, bits: int, k: int = 1,
                 include_kinds: Optional[set] = None) -> FaultSite:
    """One site uniform over the (word, bit) population: layers weighted by
    their activation counts, k distinct bits within the chosen word."""
    if k < 1 or k > bits:
        raise ConfigError(f"k = {k} outside [1, {bits}]")
    counts = np.array([
        c if (include_kinds is None or l.kind in include_kinds) else 0
        for l, c in zip(net.layers, net.layer_input_counts())
    ], dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ConfigError("no eligible activation words to inject into")
    u = int(rng.integers(0, total))
    cum = np.cumsum(counts)
    layer = int(np.searchsorted(cum, u, side="right"))
    offset = u - (int(cum[layer - 1]) if layer else 0)
    positions = frozenset(int(b) for b in rng.choice(bits, size=k, replace=False))
    return FaultSite(layer=layer, activation_index=offset, bit_positions=positions)


@dataclass(frozen=True)
class CampaignConfig:
    bits: int
    dataset: Dataset
    array: ArrayConfig
    seed: int
    guard_method: str = "none"
    k_bits: int = 1
    threads: int = 1
    per_image: bool = False

    def __post_init__(self) -> None:
        if len(self.dataset) == 0:
            raise ConfigError("campaign dataset slice is empty")
        if self.threads < 1:
            raise ConfigError("thread budget must be >= 1")

    def echo(self) -> dict:
        """Config echo for result files. Excludes the thread budget: threads
        affect wall time only and results must be byte-identical across them."""
        return {
            "bits": self.bits,
            "guard_method": self.guard_method,
            "seed": self.seed,
            "k_bits": self.k_bits,
            "rows": self.array.rows,
            "cols": self.array.cols,
            "clock_hz": self.array.clock_hz,
            "dataset_size": len(self.dataset),
            "per_image": self.per_image,
        }


@dataclass(frozen=True)
class RepetitionOutcome:
    index: int
    site: Optional[FaultSite]
    correct: int
    inputs: int
    sdc1: int
    sdc5: int
    sdc10: int
    error: Optional[str] = None

    @property
    def faulty_accuracy(self) -> float:
        return self.correct / self.inputs if self.inputs else 0.0


@dataclass(frozen=True)
class CampaignResult:
    config: dict
    plan: SamplingPlan
    golden_correct: int
    inputs: int
    class_count: int
    repetitions: tuple[RepetitionOutcome, ...] = field(default=())

    @property
    def golden_accuracy(self) -> float:
        return self.golden_correct / self.inputs

    @property
    def sdc5_k(self) -> int:
        return min(5, self.class_count)


class _Golden:
    """Per-campaign golden caches shared (read-only) by all repetitions."""

    __slots__ = ("buffers", "top1", "conf_top1", "correct", "labels")


def _check_widths(net: Network, bits: int) -> None:
    widths = {net.input_params.bits} | {l.out_params.bits for l in net.layers}
    if widths != {bits}:
        raise ConfigError(
            f"campaign at {bits} bits, but network activations use widths {sorted(widths)}"
        )


def _eval_rep(engine: BatchEngine, golden: _Golden, site: FaultSite, index: int,
              sdc5_k: int) -> RepetitionOutcome:
    try:
        corrupted = golden.buffers[site.layer].copy()
        corrupted[:, site.activation_index] ^= site.mask
        logits, _, _, _ = engine.forward(corrupted, from_layer=site.layer)
        return _outcome_from_logits(logits, golden, site, index, sdc5_k)
    except Exception as exc:  # recorded, not dropped
        return RepetitionOutcome(index=index, site=site, correct=0, inputs=0,
                                 sdc1=0, sdc5=0, sdc10=0,
                                 error=f"{type(exc).__name__}: {exc}")


def _outcome_from_logits(logits: np.ndarray, golden: _Golden, site: Optional[FaultSite],
                         index: int, sdc5_k: int) -> RepetitionOutcome:
    top1 = np.argmax(logits, axis=1)
    correct = int((top1 == golden.labels).sum())
    sdc1 = int((top1 != golden.top1).sum())
    rows = np.arange(logits.shape[0])
    lg = logits[rows, golden.top1]
    better = (logits > lg[:, None]) | (
        (logits == lg[:, None]) & (np.arange(logits.shape[1])[None, :] < golden.top1[:, None])
    )
    rank = better.sum(axis=1)
    sdc5 = int((rank >= sdc5_k).sum())
    conf = softmax_batch(logits)[rows, golden.top1]
    sdc10 = int((np.abs(conf - golden.conf_top1) > 0.10 * golden.conf_top1).sum())
    return RepetitionOutcome(index=index, site=site, correct=correct,
                             inputs=logits.shape[0], sdc1=sdc1, sdc5=sdc5, sdc10=sdc10)


def _eval_rep_per_image(engine: BatchEngine, golden: _Golden, sites: Sequence[FaultSite],
                        index: int, sdc5_k: int) -> RepetitionOutcome:
    try:
        x = golden.buffers[0].copy()
        for i in range(len(engine.plans)):
            for row, site in enumerate(sites):
                if site.layer == i:
                    x[row, site.activation_index] ^= site.mask
            x = engine._layer(i, x)
        logits = (x.astype(np.float64) - engine.out_params.zero_point) * engine.out_params.scale
        return _outcome_from_logits(logits, golden, sites[0], index, sdc5_k)
    except Exception as exc:
        return RepetitionOutcome(index=index, site=sites[0], correct=0, inputs=0,
                                 sdc1=0, sdc5=0, sdc10=0,
                                 error=f"{type(exc).__name__}: {exc}")


def run_campaign(net: Network, cfg: CampaignConfig, plan: SamplingPlan,
                 bounds: Optional[Sequence[LayerBounds]] = None) -> CampaignResult:
    """Golden evaluation plus plan.n fault repetitions over cfg.dataset."""
    _check_widths(net, cfg.bits)
    if not 1 <= cfg.k_bits <= cfg.bits:
        raise ConfigError(f"k_bits = {cfg.k_bits} outside [1, {cfg.bits}]")
    if int(cfg.dataset.labels.max()) >= net.class_count:
        raise InputError("label index outside class_count")
    n_px = int(np.prod(net.input_shape))
    if cfg.dataset.pixels.shape[1] != n_px:
        raise InputError(
            f"dataset sample size {cfg.dataset.pixels.shape[1]} != input size {n_px}"
        )
    guard_spec = None
    if cfg.guard_method != "none":
        if bounds is None:
            raise ConfigError("guard method requested but no bounds supplied")
        guard_spec = GuardSpec(method=cfg.guard_method, bounds=tuple(bounds))
        guard_spec.validate_against(net)

    engine = BatchEngine(net, guard=guard_spec)
    logits, buffers, _, _ = engine.forward(cfg.dataset.pixels, keep_buffers=True)
    golden = _Golden()
    golden.buffers = buffers
    golden.labels = cfg.dataset.labels.astype(np.int64)
    golden.top1 = np.argmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    golden.conf_top1 = softmax_batch(logits)[rows, golden.top1]
    golden.correct = int((golden.top1 == golden.labels).sum())

    sdc5_k = min(5, net.class_count)
    base = CampaignResult(config=cfg.echo(), plan=plan, golden_correct=golden.correct,
                          inputs=len(cfg.dataset), class_count=net.class_count)
    if plan.n == 0:
        return base

    children = np.random.SeedSequence(cfg.seed).spawn(plan.n)

    def one(i: int) -> RepetitionOutcome:
        rng = np.random.default_rng(children[i])
        if cfg.per_image:
            sites = [sample_fault(rng, net, cfg.bits, cfg.k_bits)
                     for _ in range(len(cfg.dataset))]
            return _eval_rep_per_image(engine, golden, sites, i, sdc5_k)
        site = sample_fault(rng, net, cfg.bits, cfg.k_bits)
        validate_fault(net, site)
        return _eval_rep(engine, golden, site, i, sdc5_k)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outcomes = list(pool.map(one, range(plan.n)))  # ordered reduction
    else:
        outcomes = [one(i) for i in range(plan.n)]
    return CampaignResult(config=cfg.echo(), plan=plan, golden_correct=golden.correct,
                          inputs=len(cfg.dataset), class_count=net.class_count,
                          repetitions=tuple(outcomes))


# ---------------------------------------------------------------------------
# result file schema


def result_to_obj(result: CampaignResult, aggregates: Optional[dict] = None) -> dict:
    reps = []
    for r in result.repetitions:
        reps.append({
            "fault_site": r.site.to_obj() if r.site else None,
            "faulty_accuracy": r.faulty_accuracy,
            "correct_count": r.correct,
            "sdc1_count": r.sdc1,
            "sdc5_count": r.sdc5,
            "sdc10_count": r.sdc10,
            "inputs_evaluated": r.inputs,
            "error": r.error,
        })
    return {
        "config": result.config,
        "plan": result.plan.to_obj(),
        "golden_accuracy": result.golden_accuracy,
        "golden_correct": result.golden_correct,
        "inputs": result.inputs,
        "class_count": result.class_count,
        "repetitions": reps,
        "aggregates": aggregates if aggregates is not None else {},
    }


def result_from_obj(obj: dict) -> CampaignResult:
    try:
        reps = []

        for i, r in enumerate(obj["repetitions"]):
            site = FaultSite.from_obj(r["fault_site"]) if r.get("fault_site") else None
            reps.append(RepetitionOutcome(
                index=i, site=site, correct=int(r["correct_count"]),
                inputs=int(r["inputs_evaluated"]), sdc1=int(r["sdc1_count"]),
                sdc5=int(r["sdc5_count"]), sdc10=int(r["sdc10_count"]),
                error=r.get("error"),
            ))
        return CampaignResult(
            config=dict(obj["config"]),
            plan=SamplingPlan.from_obj(obj["plan"]),
            golden_correct=int(obj["golden_correct"]),
            inputs=int(obj["inputs"]),
            class_count=int(obj["class_count"]),
            repetitions=tuple(reps),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed campaign result ({exc})") from exc
