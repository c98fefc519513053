import math
from types import SimpleNamespace

import numpy as np
import pytest

from qsylab.errors import ConfigError, InputError
from qsylab.guard import GuardSpec, LayerBounds, extract_ranges
from qsylab.netgraph import (
    ConvGeometry,
    Dataset,
    DenseGeometry,
    Layer,
    QTensor,
    QuantParams,
    reference_infer,
)
from qsylab.systolic import (
    ArrayConfig,
    BatchEngine,
    CycleReport,
    lower_layer,
    run_layer,
    run_network,
    validate_fault,
)

from helpers import make_random_net, oracle_desc, random_input
from oracles import cycles_one_tile_microsim, forward_scalar

CONFIGS = [ArrayConfig(r, c) for r in (1, 2, 4, 8) for c in (1, 2, 4, 8)]


def _dense_layer(n_in, n_out, bits=8):
    rng = np.random.default_rng(n_in * 31 + n_out)
    w = rng.integers(-20, 21, size=(n_in, n_out))
    return Layer(
        name="d", kind="dense", out_params=QuantParams.unsigned(bits, 1.0),
        geometry=DenseGeometry(n_in, n_out),
        weights=QTensor((n_in, n_out), w, QuantParams.signed(bits, 1.0 / 127)),
        biases=rng.integers(-5, 6, size=n_out).astype(np.int64),
    )


def test_lower_dense_tile_counts():
    cfg = ArrayConfig(4, 4)
    assert len(lower_layer(_dense_layer(4, 4), cfg).tiles) == 1
    assert len(lower_layer(_dense_layer(8, 8), cfg).tiles) == 4


def test_lower_conv_example():
    conv = Layer(
        name="c", kind="conv2d", out_params=QuantParams.unsigned(8, 1.0),
        geometry=ConvGeometry(3, 3, 1, 2),
        weights=QTensor((3, 3, 1, 2), np.zeros((3, 3, 1, 2)), QuantParams.signed(8, 1.0)),
        biases=np.zeros(2, dtype=np.int64),
    )
    sched = lower_layer(conv, ArrayConfig(4, 4), in_shape=(6, 6, 1))
    assert (sched.k, sched.n) == (9, 2)
    assert sched.stream_rows == 16
    assert len(sched.tiles) == math.ceil(9 / 4) * math.ceil(2 / 4)
    # union of tiles covers the weight matrix exactly once
    cover = np.zeros((9, 2), dtype=int)
    for t in sched.tiles:
        cover[t.k0 : t.k1, t.n0 : t.n1] += 1
    assert (cover == 1).all()


def test_lower_rejects_non_mac():
    pool = Layer(name="p", kind="maxpool2x2", out_params=QuantParams.unsigned(8, 1.0))
    with pytest.raises(ConfigError):
        lower_layer(pool, ArrayConfig(2, 2))


@pytest.mark.parametrize("rows,cols,stream", [(4, 4, 10), (1, 1, 1), (2, 5, 7), (8, 3, 20)])
def test_cycle_model_matches_microsim(rows, cols, stream):
    # closed form per tile: stream + R + C - 2 plus R preload
    closed = stream + rows + cols - 2 + rows
    assert closed == cycles_one_tile_microsim(rows, cols, stream)


def test_single_tile_cycle_example():
    layer = _dense_layer(4, 4)
    sched = lower_layer(layer, ArrayConfig(4, 4))
    assert len(sched.tiles) == 1
    # 1 stream row: 1 + 4 + 4 - 2 + 4
    _, report = run_layer(layer, QTensor((4,), np.ones(4), QuantParams.unsigned(8, 1.0)),
                          ArrayConfig(4, 4))
    assert report.cycles == 1 + 4 + 4 - 2 + 4


def test_ten_stream_rows_example():
    conv = Layer(
        name="c", kind="conv2d", out_params=QuantParams.unsigned(8, 1.0),
        geometry=ConvGeometry(2, 2, 1, 1),
        weights=QTensor((2, 2, 1, 1), np.ones((2, 2, 1, 1)), QuantParams.signed(8, 1.0)),
        biases=np.zeros(1, dtype=np.int64),
    )
    # 2x5 output grid -> 10 stream rows, K=4 <= R, N=1 <= C: one tile
    x = QTensor((3, 6, 1), np.ones((3, 6, 1)), QuantParams.unsigned(8, 1.0))
    _, report = run_layer(conv, x, ArrayConfig(4, 4))
    assert report.cycles == 10 + 4 + 4 - 2 + 4 == 20


@pytest.mark.parametrize("seed", range(25))
def test_identity_hook_matches_reference(seed):
    net = make_random_net(seed)
    rng = np.random.default_rng(7000 + seed)
    x = random_input(rng, net)
    want = reference_infer(net, x)
    for cfg in (ArrayConfig(1, 1), ArrayConfig(4, 4), ArrayConfig(8, 2)):
        got, _ = run_network(net, x, cfg)
        np.testing.assert_allclose(got.logits, want.logits, rtol=0, atol=0)


@pytest.mark.parametrize("seed", range(10))
def test_run_layer_matches_scalar_oracle(seed):
    net = make_random_net(seed, max_convs=1)
    rng = np.random.default_rng(8000 + seed)
    x = random_input(rng, net)
    desc = oracle_desc(net)
    vals, shape = x.flat.tolist(), net.input_shape
    cur = x
    for i, layer in enumerate(net.layers):
        out, _ = run_layer(layer, cur, ArrayConfig(3, 2))
        vals, shape = forward_scalar([desc[i]], vals, shape)
        assert out.flat.tolist() == vals
        cur = out


def test_hook_equals_preflipped_input():
    net = make_random_net(11)
    rng = np.random.default_rng(4)
    x = random_input(rng, net)
    idx, bit = 3, 6
    hooked, _ = run_layer(net.layers[0], x, ArrayConfig(4, 4),
                          hook=lambda v: np.where(np.arange(v.size) == idx, v ^ (1 << bit), v))
    pre = x.flat.copy()
    pre[idx] ^= 1 << bit
    plain, _ = run_layer(net.layers[0], QTensor(x.shape, pre.reshape(x.shape), x.params),
                         ArrayConfig(4, 4))
    np.testing.assert_array_equal(hooked.data, plain.data)


def test_mac_ops_analytic_and_lower_bound():
    net = make_random_net(13)
    rng = np.random.default_rng(5)
    x = random_input(rng, net)
    for cfg in CONFIGS:
        _, report = run_network(net, x, cfg)
        assert report.cycles >= math.ceil(report.mac_ops / (cfg.rows * cfg.cols))
    base = [run_network(net, x, cfg)[1].mac_ops for cfg in CONFIGS]
    assert len(set(base)) == 1  # conservation of work across tilings


def test_array_size_invariance_with_fault_and_guard():
    net = make_random_net(17)
    rng = np.random.default_rng(6)
    x = random_input(rng, net)
    fault = SimpleNamespace(layer=1, activation_index=0, bit_positions=frozenset({5}))
    ds = Dataset(x.flat.reshape(1, -1), np.zeros(1, dtype=np.uint8))
    spec = GuardSpec(method="method3", bounds=tuple(extract_ranges(net, ds)))
    preds = []
    cycles = set()
    for cfg in CONFIGS:
        p, rep = run_network(net, x, cfg, fault=fault, guard=spec)
        preds.append(p.logits)
        cycles.add(rep.cycles)
    for logits in preds[1:]:
        np.testing.assert_allclose(logits, preds[0], rtol=0, atol=0)
    assert len(cycles) > 1  # the cycle model does depend on the array


def test_validate_fault_errors():
    net = make_random_net(19)
    ok = SimpleNamespace(layer=0, activation_index=0, bit_positions=frozenset({0}))
    validate_fault(net, ok)
    for bad in (
        SimpleNamespace(layer=len(net.layers), activation_index=0, bit_positions=frozenset({0})),
        SimpleNamespace(layer=0, activation_index=10**9, bit_positions=frozenset({0})),
        SimpleNamespace(layer=0, activation_index=0, bit_positions=frozenset({8})),
        SimpleNamespace(layer=0, activation_index=0, bit_positions=frozenset()),
    ):
        with pytest.raises(ConfigError):
            validate_fault(net, bad)


def test_giops_positive_and_report_addition():
    a = CycleReport(mac_ops=100, cycles=10, clock_hz=1e8)
    b = CycleReport(mac_ops=50, cycles=5, clock_hz=1e8)
    c = a + b
    assert (c.mac_ops, c.cycles) == (150, 15)
    assert a.giops_estimate > 0
    with pytest.raises(ConfigError):
        a + CycleReport(1, 1, 2e8)


def test_bad_array_config():
    with pytest.raises(ConfigError):
        ArrayConfig(0, 4)
    with pytest.raises(ConfigError):
        ArrayConfig(4, 4, clock_hz=0)


def test_run_layer_shape_mismatch():
    layer = _dense_layer(4, 4)
    with pytest.raises(InputError):
        run_layer(layer, QTensor((3,), np.zeros(3), QuantParams.unsigned(8, 1.0)),
                  ArrayConfig(2, 2))


@pytest.mark.parametrize("seed", range(12))
def test_batch_engine_matches_single_path(seed):
    net = make_random_net(seed)
    rng = np.random.default_rng(100 + seed)
    batch = np.stack([random_input(rng, net).flat for _ in range(6)])
    logits, buffers, _, final = BatchEngine(net).forward(batch, keep_buffers=True)
    for j in range(batch.shape[0]):
        qt = QTensor(net.input_shape, batch[j].reshape(net.input_shape), net.input_params)
        pred, _ = run_network(net, qt, ArrayConfig(4, 4))
        np.testing.assert_allclose(logits[j], pred.logits, rtol=0, atol=0)
    assert final.shape == (6, net.class_count)
    np.testing.assert_array_equal(buffers[0], batch)


def test_batch_engine_guarded_matches_single_path():
    net = make_random_net(23)
    rng = np.random.default_rng(9)
    batch = np.stack([random_input(rng, net).flat for _ in range(4)])
    ds = Dataset(batch[:2], np.zeros(2, dtype=np.uint8))
    spec = GuardSpec(method="method1", bounds=tuple(extract_ranges(net, ds)))
    logits, _, _, _ = BatchEngine(net, guard=spec).forward(batch)
    for j in range(batch.shape[0]):
        qt = QTensor(net.input_shape, batch[j].reshape(net.input_shape), net.input_params)
        pred, _ = run_network(net, qt, ArrayConfig(2, 2), guard=spec)
        np.testing.assert_allclose(logits[j], pred.logits, rtol=0, atol=0)
