import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_depth.backbone import Backbone, BackboneConfig, cross_entropy
from adaptive_depth.errors import InputError, ParameterError
from adaptive_depth.predictor import (PredictorConfig, depth_from_raw, huber, huber_grad, objective,
                                      oracle_from_exit_logits, oracle_l_opt, predict_depth, train_h3_teacher,
                                      train_predictor)


def brute_force_oracle(exit_logits, label, slack):
    L = exit_logits.shape[0]
    full = cross_entropy(exit_logits[-1:], [label])[0]
    for l in range(L):
        ok = np.argmax(exit_logits[l]) == label
        if ok and cross_entropy(exit_logits[l:l + 1], [label])[0] <= (1 + slack) * full:
            return l + 1
    return L


def test_oracle_examples():
    L = 12
    right, wrong = np.array([5.0, 0.0, 0.0]), np.array([0.0, 5.0, 0.0])
    easy = np.stack([right] * L)[:, None]
    assert oracle_from_exit_logits(easy, np.array([0]))[0] == 1
    never = np.stack([wrong] * L)[:, None]
    assert oracle_from_exit_logits(never, np.array([0]))[0] == L
    late = np.stack([wrong] * 8 + [right] * 4)[:, None]
    assert oracle_from_exit_logits(late, np.array([0]))[0] == 9
    assert brute_force_oracle(late[:, 0], 0, 0.1) == 9


def test_oracle_slack_rule():
    # exit 1 is correct but far less confident than the full model
    logits = np.array([[[0.2, 0.0]], [[9.0, 0.0]]])
    assert oracle_from_exit_logits(logits, np.array([0]), slack=0.1)[0] == 2
    assert oracle_from_exit_logits(logits, np.array([0]), slack=1e4)[0] == 1


@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_oracle_matches_brute_force(seed, slack):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=2.0, size=(6, 20, 3))
    labels = rng.integers(0, 3, size=20)
    got = oracle_from_exit_logits(logits, labels, slack)
    ref = [brute_force_oracle(logits[:, b], labels[b], slack) for b in range(20)]
    assert got.tolist() == ref
    assert got.min() >= 1 and got.max() <= 6


def test_oracle_single_sample_matches_vectorized():
    cfg = BackboneConfig(num_layers=4, d_model=8, num_heads=2, vocab_size=10, max_len=5)
    bb = Backbone.create(cfg, np.random.default_rng(0))
    toks = np.random.default_rng(1).integers(0, 10, size=(8, 5))
    labels = np.random.default_rng(2).integers(0, 4, size=8)
    exits = np.stack(bb.forward(toks, 4)[0])
    vec = oracle_from_exit_logits(exits, labels)
    assert [oracle_l_opt(toks[i], int(labels[i]), bb) for i in range(8)] == vec.tolist()


def test_huber_values():
    assert huber(0.0) == 0.0
    assert huber(1.0, 1.0) == 0.5
    assert huber(2.0, 1.0) == 1.5
    assert huber(-2.0, 1.0) == 1.5
    assert huber_grad(np.array([-3.0, 0.5, 4.0]), 1.0).tolist() == [-1.0, 0.5, 1.0]


def test_constant_labels_predict_constant():
    x = np.random.default_rng(0).normal(size=(50, 4))
    y = np.full(50, 7.0)
    m = train_predictor(x, y, y, PredictorConfig(lam=0.0))
    assert np.allclose(m.raw_predict(np.random.default_rng(1).normal(size=(10, 4))), 7.0)


def test_separable_set_low_mae():
    rng = np.random.default_rng(0)
    easy = rng.uniform(0, 1, size=(100, 3))
    hard = rng.uniform(2, 3, size=(100, 3))
    x = np.vstack([easy, hard])
    y = np.array([2] * 100 + [10] * 100)
    m = train_predictor(x, y, y.astype(float))
    x_test = np.vstack([rng.uniform(0, 1, size=(50, 3)), rng.uniform(2, 3, size=(50, 3))])
    y_test = np.array([2] * 50 + [10] * 50)
    l_pred, conf = predict_depth(m, x_test, 12)
    assert np.mean(np.abs(l_pred - y_test)) <= 0.5
    assert np.all((conf > 0) & (conf <= 1))


@given(st.integers(0, 10_000))
def test_boosting_never_increases_loss(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, 3))
    y = rng.integers(1, 13, size=60).astype(float)
    t = y + rng.normal(size=60)
    m = train_predictor(x, y, t, PredictorConfig(n_trees=20))
    assert all(b <= a + 1e-12 for a, b in zip(m.train_loss, m.train_loss[1:]))
    assert m.train_loss[-1] == pytest.approx(objective(m.raw_predict(x), y, t, 1.0, 0.5))
    assert all(tree.depth <= 3 for tree in m.trees)


def test_degenerate_features_flagged():
    x = np.ones((30, 2))
    y = np.arange(30) % 5 + 1.0
    m = train_predictor(x, y, y)
    assert m.degenerate and not m.trees
    assert np.allclose(m.raw_predict(x), y.mean())


def _stump_ls_boost(x, y, n_trees, lr, min_leaf):
    """Plain least-squares boosting with exhaustive stumps."""
    pred = np.full(y.size, y.mean())
    for _ in range(n_trees):
        r = y - pred
        best = None
        for j in range(x.shape[1]):
            vals = np.sort(x[:, j])
            for i in range(min_leaf - 1, y.size - min_leaf):
                thr = 0.5 * (vals[i] + vals[i + 1])
                left = x[:, j] <= thr
                sse = ((r[left] - r[left].mean()) ** 2).sum() + ((r[~left] - r[~left].mean()) ** 2).sum()
                if best is None or sse < best[0] - 1e-12:
                    best = (sse, j, thr)
        _, j, thr = best
        left = x[:, j] <= thr
        step = np.where(left, r[left].mean(), r[~left].mean())
        pred = pred + lr * step
    return pred


def test_reduces_to_least_squares_boosting():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 3))
    y = rng.normal(size=40) * 3
    cfg = PredictorConfig(n_trees=8, max_depth=1, learning_rate=0.3, delta=1e9, lam=0.0, min_samples_leaf=2)
    m = train_predictor(x, y, np.zeros(40), cfg)
    ref = _stump_ls_boost(x, y, 8, 0.3, 2)
    assert np.max(np.abs(m.raw_predict(x) - ref)) < 1e-9


def test_depth_rounding_and_clamp():
    l, c = depth_from_raw([5.4, -3.0, 99.0, 5.5], 12)
    assert l.tolist() == [5, 1, 12, 6]
    assert c[0] == pytest.approx(1 / 1.4)


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20), st.integers(1, 64))
def test_depth_always_in_range(raw, L):
    l, _ = depth_from_raw(raw, L)
    assert l.min() >= 1 and l.max() <= L


def test_feature_length_mismatch():
    x = np.random.default_rng(0).normal(size=(20, 3))
    m = train_predictor(x, np.arange(20.0), np.arange(20.0))
    with pytest.raises(InputError):
        predict_depth(m, np.zeros((2, 4)), 12)


def test_train_predictor_input_errors():
    with pytest.raises(InputError):
        train_predictor(np.zeros((5, 2)), np.zeros(5), np.zeros(5))
    with pytest.raises(InputError):
        train_predictor(np.zeros((12, 2)), np.zeros(11), np.zeros(12))


def test_model_array_round_trip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 4))
    m = train_predictor(x, rng.integers(1, 10, 50), rng.normal(size=50))
    from adaptive_depth.predictor import GbtModel
    back = GbtModel.from_arrays(m.to_arrays())
    assert np.array_equal(back.raw_predict(x), m.raw_predict(x))


def test_ridge_teacher():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 5))
    t = train_h3_teacher(x, np.full(30, 4.0))
    assert np.allclose(t.predict(x), 4.0, atol=0.01)
    f = rng.normal(size=(50, 1))
    t = train_h3_teacher(f, 2.0 * f[:, 0])
    assert t.weights[0] == pytest.approx(2.0, abs=1e-3)
    y = rng.integers(1, 12, 20).astype(float)
    t = train_h3_teacher(np.zeros((20, 3)), y)
    assert np.allclose(t.predict(np.zeros((4, 3))), y.mean())
    with pytest.raises(InputError):
        train_h3_teacher(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(ParameterError):
        train_h3_teacher(x, np.zeros(30), ridge=0.0)
