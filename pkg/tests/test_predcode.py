import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memarena.datagen import records_to_arrays, synthetic_records
from memarena.predcode import (
    DivergenceError,
    PredictiveHead,
    TrainConfig,
    gradient_check,
    loss_pre,
    separability,
    train,
)


def loss_pre_oracle(zh, z):
    """Straight-line per-sample expression, averaged over the batch."""
    total = 0.0
    for a, b in zip(np.atleast_2d(zh), np.atleast_2d(z)):
        mse = sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)
        na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(y * y for y in b))
        cos = 0.0 if na < 1e-12 or nb < 1e-12 else sum(x * y for x, y in zip(a, b)) / (na * nb)
        total += mse + 1 - cos
    return total / len(np.atleast_2d(zh))


@pytest.fixture(scope="module")
def data(suite):
    return records_to_arrays(synthetic_records(suite, tasks=(5, 20), seeds=(0,)))


@pytest.fixture(scope="module")
def small(data):
    idx = np.random.default_rng(0).choice(len(data["z"]), 64, replace=False)
    return {k: v[idx] for k, v in data.items()}


def test_loss_pre_analytic_cases():
    z = np.array([0.3, -1.0, 2.0])
    assert loss_pre(z, z) == 0.0
    assert abs(loss_pre([-1.0, 0, 0], [1.0, 0, 0]) - 10 / 3) <= 1e-12
    # a zero-norm prediction is treated as orthogonal
    assert loss_pre([0.0, 0, 0], [1.0, 0, 0]) == pytest.approx(1 / 3 + 1, abs=1e-15)
    with pytest.raises(ValueError):
        loss_pre([1.0, 2.0], [1.0, 2.0, 3.0])


def test_loss_pre_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        zh, z = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
        want = loss_pre_oracle(zh, z)
        assert abs(loss_pre(zh, z) - want) <= 1e-12 * max(1.0, abs(want))


FINITE = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=FINITE), arrays(np.float64, 6, elements=FINITE), st.floats(0.01, 100))
def test_loss_pre_properties(zh, z, alpha):
    assert loss_pre(zh, z) >= -1e-12
    mse = lambda a: float(np.mean((a - z) ** 2))  # noqa: E731
    if np.linalg.norm(zh) > 1e-6 and np.linalg.norm(z) > 1e-6:
        cos_term = loss_pre(zh, z) - mse(zh)
        scaled = loss_pre(alpha * zh, z) - mse(alpha * zh)
        assert abs(cos_term - scaled) <= 1e-6 * max(1.0, mse(zh), mse(alpha * zh))


def test_lambda_zero_is_classification_only(small):
    h = PredictiveHead.init(32, 64, seed=1)
    losses, _ = h.loss_and_grad(small, 0.0)
    assert losses["total"] == losses["cls"]
    assert losses["pre"] > 0


def test_gradients_match_finite_differences(small):
    worst = 0.0
    for s in range(5):
        h = PredictiveHead.init(32, 64, seed=s)
        idx = np.random.default_rng(100 + s).choice(h.n_params, 20, replace=False)
        for lam in (0.0, 0.7):
            worst = max(worst, gradient_check(h, small, lam, idx))
    assert worst < 1e-4


def test_label_validation(small):
    h = PredictiveHead.init(32, 64)
    bad = dict(small, primitive=small["primitive"] + 10)
    with pytest.raises(ValueError):
        h.loss_and_grad(bad, 0.1)
    with pytest.raises(ValueError):
        h.loss_and_grad(dict(small, keyframe=small["keyframe"] * 3), 0.1)


def test_parameter_inventory():
    h = PredictiveHead.init(32, 64)
    assert h.predictor_params == 32 * 64 + 64 + 64 * 32 + 32
    inv = h.inventory()
    assert sum(int(np.prod(inv[k])) for k in ("W1", "b1", "W2", "b2")) == h.predictor_params
    # nothing on the teacher path is trainable: every parameter belongs to the head
    assert set(inv) == {"We", "be", "W1", "b1", "W2", "b2", "Wc", "bc", "wk", "bk"}


def test_training_decreases_loss_and_is_deterministic(data):
    cfg = TrainConfig(pre_weight=0.1, epochs=50, seed=3)
    h1, c1 = train(data, cfg)
    h2, c2 = train(data, cfg)
    assert c1.total[49] < c1.total[0]
    assert np.array_equal(h1.flat(), h2.flat())
    _, c0 = train(data, TrainConfig(pre_weight=0.0, epochs=3))
    assert all(p > 0 for p in c0.pre)
    assert c1.to_csv().splitlines()[0] == "epoch,l_cls,l_pre,total"


def test_divergence_aborts(data):
    bad = dict(data, z=data["z"].copy())
    bad["z"][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(bad, TrainConfig(epochs=2))
    with pytest.raises(ValueError):
        TrainConfig(pre_weight=-1)


def test_head_file_roundtrip(tmp_path):
    h = PredictiveHead.init(32, 16, seed=9)
    h.save(tmp_path / "head.txt", 0.5, 9)
    first = (tmp_path / "head.txt").read_text().splitlines()[0]
    assert "D=32" in first and "H=16" in first and "lambda=0.5" in first and "seed=9" in first
    back, meta = PredictiveHead.load(tmp_path / "head.txt")
    assert np.array_equal(back.flat(), h.flat()) and meta == {"lambda": 0.5, "seed": 9}


def test_separability_limits():
    rng = np.random.default_rng(0)
    a = rng.normal(scale=0.01, size=(20, 3))
    b = rng.normal(scale=0.01, size=(20, 3)) + 100
    y = [0] * 20 + [1] * 20
    assert separability(np.vstack([a, b]), y) < 1e-3
    x = rng.normal(size=(60, 4))
    labels = np.repeat([0, 1, 2], 20)
    ratios = [separability(x, rng.permutation(labels)) for _ in range(100)]
    assert abs(np.mean(ratios) - 1) < 0.1
    with pytest.raises(ValueError):
        separability(x, [0] * 60)
    with pytest.raises(ValueError):
        separability(x[:3], [0, 1, 1])
