"""Fault sampling, statistical sizing, and campaign runner tests.

The campaign runner is cross-checked against a manual replay oracle: every
repetition is re-derived from the seed tree and re-evaluated image-by-image
through the single-input engine path, with SDC flags recomputed from scalar
softmax/ranking helpers.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsylab.errors import ConfigError, FormatError, InputError
from qsylab.faultlab import (CampaignConfig, FaultSite, SamplingPlan, _eval_rep,
                             population_size, result_from_obj, result_to_obj,
                             run_campaign, sample_fault, sample_size)
from qsylab.guard import extract_ranges
from qsylab.netgraph import Dataset, evaluate
from qsylab.qtensor import QTensor
from qsylab.systolic import ArrayConfig, run_network

from helpers import make_random_net, random_input
from oracles import sample_size_mp, softmax_scalar, population_count

CFG = ArrayConfig(rows=4, cols=4)


def small_dataset(net, seed, n=6):
    rng = np.random.default_rng(seed)
    px = np.prod(net.input_shape)
    pixels = rng.integers(0, net.input_params.q_max + 1, size=(n, px), dtype=np.int32)
    labels = rng.integers(0, net.class_count, size=n).astype(np.uint8)
    return Dataset(pixels=pixels, labels=labels)


# ---------------------------------------------------------------------------
# sizing


def test_sample_size_contract_example():
    plan = SamplingPlan(population=10**6, confidence_t=1.96, error_margin=0.01, p=0.5)
    assert sample_size(plan) == 9513
    assert plan.n == 9513


@pytest.mark.parametrize("pop,e,t,p", [
    (10**6, 0.01, 1.96, 0.5),
    (54080, 0.01, 1.96, 0.5),
    (54080, 0.03, 1.96, 0.5),
    (1000, 0.05, 2.58, 0.5),
    (12345, 0.02, 1.645, 0.3),
    (7, 0.2, 1.96, 0.5),
])
def test_sample_size_matches_mpmath(pop, e, t, p):
    got = sample_size(SamplingPlan(population=pop, confidence_t=t, error_margin=e, p=p))
    assert got == sample_size_mp(pop, e, t, p)


def test_sample_size_tiny_error_saturates_to_population():
    plan = SamplingPlan(population=100, error_margin=1e-9)
    assert plan.n == 100


def test_sample_size_population_one():
    assert SamplingPlan(population=1).n == 1


@given(pop=st.integers(1, 10**7), e=st.floats(1e-6, 0.5),
       t=st.floats(0.1, 5.0), p=st.floats(0.01, 0.99))
@settings(max_examples=300, deadline=None)
def test_sample_size_bounds(pop, e, t, p):
    n = sample_size(SamplingPlan(population=pop, confidence_t=t, error_margin=e, p=p))
    assert 1 <= n <= pop


@given(pop=st.integers(1, 10**6), e1=st.floats(1e-4, 0.5), e2=st.floats(1e-4, 0.5))
@settings(max_examples=200, deadline=None)
def test_sample_size_monotone_in_error(pop, e1, e2):
    lo, hi = sorted((e1, e2))
    n_hi_err = sample_size(SamplingPlan(population=pop, error_margin=hi))
    n_lo_err = sample_size(SamplingPlan(population=pop, error_margin=lo))
    assert n_lo_err >= n_hi_err


@pytest.mark.parametrize("kwargs", [
    dict(population=0),
    dict(population=100, error_margin=0.0),
    dict(population=100, error_margin=1.0),
    dict(population=100, p=0.0),
    dict(population=100, p=1.0),
    dict(population=100, confidence_t=0.0),
    dict(population=100, n=101),
    dict(population=100, n=-1),
])
def test_sampling_plan_rejects(kwargs):
    with pytest.raises(ConfigError):
        SamplingPlan(**kwargs)


def test_sampling_plan_explicit_n_and_zero():
    assert SamplingPlan(population=100, n=0).n == 0
    assert SamplingPlan(population=100, n=17).n == 17


def test_sampling_plan_roundtrip():
    plan = SamplingPlan(population=54080, error_margin=0.03)
    assert SamplingPlan.from_obj(plan.to_obj()) == plan
    with pytest.raises(FormatError):
        SamplingPlan.from_obj({"population": 5})


# ---------------------------------------------------------------------------
# population


def test_population_hand_example():
    net = make_random_net(3, bits=8)
    # oracle: every layer's input element count, walked over derived shapes
    words = sum(int(np.prod(s)) for s in net.input_shapes)
    assert population_size(net, 8) == words * 8
    assert population_size(net, 4) == words * 4


@pytest.mark.parametrize("seed", range(6))
def test_population_matches_shape_walk_oracle(seed):
    net = make_random_net(seed)
    assert population_size(net, 8) == population_count(
        [int(np.prod(s)) for s in net.input_shapes], 8)


def test_population_kind_filter():
    net = make_random_net(4)
    total = population_size(net, 8)
    mac = population_size(net, 8, include_kinds={"conv2d", "dense"})
    rest = population_size(net, 8, include_kinds={"maxpool2x2", "relu", "flatten"})
    assert mac + rest == total
    assert 0 < mac < total


# ---------------------------------------------------------------------------
# fault sampling


def test_sample_fault_site_is_valid():
    net = make_random_net(1)
    counts = [int(np.prod(s)) for s in net.input_shapes]
    rng = np.random.default_rng(7)
    for _ in range(200):
        site = sample_fault(rng, net, 8, k=1)
        assert 0 <= site.layer < len(net.layers)
        assert 0 <= site.activation_index < counts[site.layer]
        (b,) = site.bit_positions
        assert 0 <= b < 8


def test_sample_fault_k_distinct_bits():
    net = make_random_net(1)
    rng = np.random.default_rng(7)
    site = sample_fault(rng, net, 8, k=3)
    assert len(site.bit_positions) == 3
    assert all(0 <= b < 8 for b in site.bit_positions)
    with pytest.raises(ConfigError):
        sample_fault(rng, net, 8, k=9)
    with pytest.raises(ConfigError):
        sample_fault(rng, net, 8, k=0)


def test_sample_fault_layer_weighting_chi_square():
    # layer hit frequencies should follow input-word counts
    from scipy.stats import chi2

    net = make_random_net(2)
    counts = np.array([int(np.prod(s)) for s in net.input_shapes], dtype=float)
    probs = counts / counts.sum()
    rng = np.random.default_rng(123)
    draws = 100_000
    observed = np.zeros(len(counts))
    for _ in range(draws):
        observed[sample_fault(rng, net, 8).layer] += 1
    expected = probs * draws
    stat = float(((observed - expected) ** 2 / expected).sum())
    assert stat < chi2.ppf(0.999, df=len(counts) - 1)


def test_sample_fault_bit_uniformity_chi_square():
    from scipy.stats import chi2

    net = make_random_net(2)
    rng = np.random.default_rng(5)
    draws = 40_000
    observed = np.zeros(8)
    for _ in range(draws):
        (b,) = sample_fault(rng, net, 8).bit_positions
        observed[b] += 1
    expected = np.full(8, draws / 8)
    stat = float(((observed - expected) ** 2 / expected).sum())
    assert stat < chi2.ppf(0.999, df=7)


def test_fault_site_validation_and_roundtrip():
    with pytest.raises(ConfigError):
        FaultSite(layer=0, activation_index=0, bit_positions=frozenset())
    s = FaultSite(layer=2, activation_index=14, bit_positions=frozenset({0, 7}))
    assert s.mask == 0b10000001
    assert FaultSite.from_obj(s.to_obj()) == s
    with pytest.raises(FormatError):
        FaultSite.from_obj({"layer": 1})


# ---------------------------------------------------------------------------
# campaigns


def test_null_campaign_matches_evaluate():
    net = make_random_net(11)
    ds = small_dataset(net, 0, n=10)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=42)
    plan = SamplingPlan(population=population_size(net, 8), n=0)
    res = run_campaign(net, cfg, plan)
    assert res.repetitions == ()
    assert res.golden_accuracy == evaluate(net, ds)
    assert res.inputs == 10


def test_campaign_deterministic_and_thread_invariant():
    net = make_random_net(12)
    ds = small_dataset(net, 1, n=5)
    plan = SamplingPlan(population=population_size(net, 8), n=8)
    outs = []
    for threads in (1, 1, 4):
        cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=99, threads=threads)
        outs.append(result_to_obj(run_campaign(net, cfg, plan)))
    assert outs[0] == outs[1] == outs[2]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_campaign_manual_replay_oracle(seed):
    """Each repetition must equal a per-image replay through run_network."""
    net = make_random_net(20 + seed)
    ds = small_dataset(net, seed, n=4)
    plan = SamplingPlan(population=population_size(net, 8), n=3)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=777 + seed)
    res = run_campaign(net, cfg, plan)
    assert len(res.repetitions) == 3

    children = np.random.SeedSequence(cfg.seed).spawn(plan.n)
    k = res.sdc5_k
    for rep in res.repetitions:
        rng = np.random.default_rng(children[rep.index])
        site = sample_fault(rng, net, 8)
        assert site == rep.site
        correct = sdc1 = sdc5 = sdc10 = 0
        for i in range(len(ds)):
            x = QTensor(net.input_shape, ds.pixels[i].reshape(net.input_shape),
                        net.input_params)
            golden, _ = run_network(net, x, CFG)
            faulty, _ = run_network(net, x, CFG, fault=site)
            correct += int(faulty.top1 == int(ds.labels[i]))
            sdc1 += int(faulty.top1 != golden.top1)
            g = golden.top1
            lg = faulty.logits[g]
            rank = sum((faulty.logits[j] > lg) or (faulty.logits[j] == lg and j < g)
                       for j in range(len(faulty.logits)))
            sdc5 += int(rank >= k)
            cg = softmax_scalar(list(golden.logits))[g]
            cf = softmax_scalar(list(faulty.logits))[g]
            sdc10 += int(abs(cf - cg) > 0.10 * cg)
        assert rep.correct == correct
        assert rep.sdc1 == sdc1
        assert rep.sdc5 == sdc5
        assert rep.sdc10 == sdc10
        assert rep.inputs == len(ds)
        assert rep.error is None


def test_guard_in_range_flip_is_neutral():
    # A fault whose flipped word stays within the profiled ranges must make
    # guarded and unguarded repetitions agree. Constructed so the invariant is
    # airtight: the dataset contains the pre-flipped image as its own sample,
    # so every activation of the faulty run already appears in the extraction
    # set and no bound can clip it.
    net = make_random_net(30)
    rng = np.random.default_rng(8)
    x0 = random_input(rng, net).flat.copy()
    site = FaultSite(layer=0, activation_index=3, bit_positions=frozenset({1}))
    x1 = x0.copy()
    x1[site.activation_index] ^= site.mask
    labels = np.zeros(2, dtype=np.uint8)
    ds = Dataset(pixels=np.stack([x0, x1]), labels=labels)
    bounds = extract_ranges(net, ds)

    rep_u = _eval_rep_for(net, ds, site, guard=None, bounds=None)
    for method in ("method1", "method2", "method3"):
        rep_g = _eval_rep_for(net, ds, site, guard=method, bounds=bounds)
        assert rep_g == rep_u


def _eval_rep_for(net, ds, site, guard, bounds):
    from qsylab.guard import GuardSpec
    from qsylab.systolic import BatchEngine

    spec = GuardSpec(method=guard, bounds=tuple(bounds)) if guard else None
    engine = BatchEngine(net, guard=spec)
    logits, buffers, _, _ = engine.forward(ds.pixels, keep_buffers=True)
    from qsylab.faultlab import _Golden, _outcome_from_logits
    golden = _Golden()
    golden.buffers = buffers
    golden.labels = ds.labels.astype(np.int64)
    golden.top1 = np.argmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    from qsylab.netgraph import softmax_batch
    golden.conf_top1 = softmax_batch(logits)[rows, golden.top1]
    golden.correct = int((golden.top1 == golden.labels).sum())
    return _eval_rep(engine, golden, site, 0, min(5, net.class_count))


def test_campaign_guard_requires_bounds():
    net = make_random_net(13)
    ds = small_dataset(net, 2, n=3)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=1, guard_method="method3")
    plan = SamplingPlan(population=population_size(net, 8), n=1)
    with pytest.raises(ConfigError):
        run_campaign(net, cfg, plan)


def test_campaign_guarded_runs():
    net = make_random_net(13)
    ds = small_dataset(net, 2, n=4)
    bounds = extract_ranges(net, ds)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=1, guard_method="method3")
    plan = SamplingPlan(population=population_size(net, 8), n=4)
    res = run_campaign(net, cfg, plan, bounds=bounds)
    assert len(res.repetitions) == 4
    assert all(r.error is None for r in res.repetitions)


def test_campaign_width_mismatch_rejected():
    net = make_random_net(13, bits=8)
    ds = small_dataset(net, 2, n=3)
    cfg = CampaignConfig(bits=4, dataset=ds, array=CFG, seed=1)
    plan = SamplingPlan(population=population_size(net, 4), n=1)
    with pytest.raises(ConfigError):
        run_campaign(net, cfg, plan)


def test_campaign_k_bits_out_of_range():
    net = make_random_net(13)
    ds = small_dataset(net, 2, n=3)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=1, k_bits=9)
    plan = SamplingPlan(population=population_size(net, 8), n=1)
    with pytest.raises(ConfigError):
        run_campaign(net, cfg, plan)


def test_campaign_label_out_of_range():
    net = make_random_net(13)
    ds = small_dataset(net, 2, n=3)
    bad = Dataset(pixels=ds.pixels, labels=np.full(3, 250, dtype=np.uint8))
    cfg = CampaignConfig(bits=8, dataset=bad, array=CFG, seed=1)
    plan = SamplingPlan(population=population_size(net, 8), n=0)
    with pytest.raises(InputError):
        run_campaign(net, cfg, plan)


def test_empty_dataset_rejected():
    net = make_random_net(13)
    empty = Dataset(pixels=np.zeros((0, int(np.prod(net.input_shape))), dtype=np.int32),
                    labels=np.zeros(0, dtype=np.uint8))
    with pytest.raises(ConfigError):
        CampaignConfig(bits=8, dataset=empty, array=CFG, seed=1)


def test_repetition_error_recorded_not_raised():
    net = make_random_net(14)
    ds = small_dataset(net, 3, n=3)
    from qsylab.systolic import BatchEngine
    from qsylab.faultlab import _Golden
    from qsylab.netgraph import softmax_batch

    engine = BatchEngine(net)
    logits, buffers, _, _ = engine.forward(ds.pixels, keep_buffers=True)
    golden = _Golden()
    golden.buffers = buffers
    golden.labels = ds.labels.astype(np.int64)
    golden.top1 = np.argmax(logits, axis=1)
    golden.conf_top1 = softmax_batch(logits)[np.arange(3), golden.top1]
    golden.correct = 0
    bad_site = FaultSite(layer=0, activation_index=10**9, bit_positions=frozenset({0}))
    out = _eval_rep(engine, golden, bad_site, 5, 5)
    assert out.error is not None and "IndexError" in out.error
    assert out.inputs == 0 and out.correct == 0


def test_per_image_mode_runs_and_is_deterministic():
    net = make_random_net(15)
    ds = small_dataset(net, 4, n=4)
    plan = SamplingPlan(population=population_size(net, 8), n=3)
    outs = []
    for _ in range(2):
        cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=5, per_image=True)
        outs.append(result_to_obj(run_campaign(net, cfg, plan)))
    assert outs[0] == outs[1]
    assert all(r["inputs_evaluated"] == 4 for r in outs[0]["repetitions"])


def test_result_file_roundtrip():
    net = make_random_net(16)
    ds = small_dataset(net, 5, n=4)
    plan = SamplingPlan(population=population_size(net, 8), n=2)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=31)
    res = run_campaign(net, cfg, plan)
    obj = json.loads(json.dumps(result_to_obj(res)))
    back = result_from_obj(obj)
    assert back.plan == res.plan
    assert back.golden_correct == res.golden_correct
    assert back.repetitions == res.repetitions
    assert result_to_obj(back) == result_to_obj(res)
    with pytest.raises(FormatError):
        result_from_obj({"config": {}})


def test_config_echo_excludes_threads():
    net = make_random_net(16)
    ds = small_dataset(net, 5, n=2)
    cfg = CampaignConfig(bits=8, dataset=ds, array=CFG, seed=31, threads=8)
    assert "threads" not in cfg.echo()
    assert cfg.echo()["dataset_size"] == 2
