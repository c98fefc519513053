import numpy as np
import pytest

from modelkit.errors import ConfigError
from modelkit.lenet import (
    ARCHITECTURES,
    accuracy,
    architecture,
    forward,
    init_params,
    loss_and_grads,
    train,
)

ARCH = architecture("lenet5")


@pytest.fixture(scope="module")
def tiny_net(small_corpus):
    params = init_params(ARCH, np.random.default_rng(0))
    x, y = small_corpus.batch(range(8))
    return params, x, y


def test_unknown_architecture():
    with pytest.raises(ConfigError):
        architecture("resnet50")


def test_registry_entries_are_complete():
    for arch in ARCHITECTURES.values():
        assert set(arch) == {"layers", "input_shape", "class_count"}
        assert arch["layers"][-1][1] == "dense"


def test_forward_logit_shape(tiny_net):
    params, x, _ = tiny_net
    logits, _ = forward(ARCH, params, x)
    assert logits.shape == (8, 10)
    assert np.isfinite(logits).all()


def test_forward_keep_activation_shapes(tiny_net):
    """Per-layer activations drive calibration; shapes must match the graph."""
    params, x, _ = tiny_net
    _, acts = forward(ARCH, params, x, keep=True)
    expected = {
        "conv1": (8, 24, 24, 6),
        "pool1": (8, 12, 12, 6),
        "conv2": (8, 8, 8, 16),
        "pool2": (8, 4, 4, 16),
        "flat": (8, 256),
        "fc1": (8, 120),
        "fc2": (8, 10),
    }
    assert {k: v.shape for k, v in acts.items()} == expected
    # every non-terminal activation is post-ReLU, hence non-negative
    for name, a in acts.items():
        if name != "fc2":
            assert a.min() >= 0.0


def test_gradients_match_numerical(tiny_net):
    """Central-difference check on a handful of coordinates per tensor."""
    params, x, y = tiny_net
    x, y = x[:3], y[:3]
    _, grads = loss_and_grads(ARCH, params, x, y)
    probe_rng = np.random.default_rng(5)
    eps = 1e-6
    for lname in ("conv1", "conv2", "fc1", "fc2"):
        for field in ("w", "b"):
            arr = params[lname][field]
            flat = arr.reshape(-1)
            for idx in probe_rng.choice(flat.size, size=4, replace=False):
                orig = flat[idx]
                flat[idx] = orig + eps
                lp, _ = loss_and_grads(ARCH, params, x, y)
                flat[idx] = orig - eps
                lm, _ = loss_and_grads(ARCH, params, x, y)
                flat[idx] = orig
                num = (lp - lm) / (2 * eps)
                ana = grads[lname][field].reshape(-1)[idx]
                assert ana == pytest.approx(num, abs=1e-4, rel=1e-4), (lname, field, idx)


def test_train_overfits_a_small_batch(small_corpus):
    params = init_params(ARCH, np.random.default_rng(1))
    x, y = small_corpus.batch(range(32))
    train(ARCH, params, x, y, epochs=15, rng=np.random.default_rng(2),
          lr=0.05, batch_size=16)
    assert accuracy(ARCH, params, x, y) == 1.0


def test_train_logs_progress(small_corpus):
    params = init_params(ARCH, np.random.default_rng(1))
    x, y = small_corpus.batch(range(16))
    lines = []
    train(ARCH, params, x, y, epochs=1, rng=np.random.default_rng(2), log=lines.append)
    assert lines  # at least one epoch report
