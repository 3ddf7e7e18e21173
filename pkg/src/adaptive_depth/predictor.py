"""Complexity predictor: boosted regression trees that guess the depth a sample needs.

Targets come from :func:`oracle_l_opt`. Boosting minimizes
``huber_delta(pred - l_opt) + lam * (pred - teacher)**2`` where the teacher
is a ridge regressor on deep (h3) features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, cross_entropy
from .errors import InputError, ParameterError


@dataclass(frozen=True)
class PredictorConfig:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    delta: float = 1.0
    lam: float = 0.5
    min_samples_leaf: int = 5
    oracle_slack: float = 0.1


# -- depth labels -------------------------------------------------------------

def oracle_from_exit_logits(exit_logits: np.ndarray, labels: np.ndarray, slack: float = 0.1) -> np.ndarray:
    """Vectorized oracle over ``exit_logits`` of shape (L, B, C).

    The label is the smallest depth whose exit is correct and whose loss is
    within ``(1 + slack)`` of the full-depth loss; ``L`` when none qualifies.
    """
    L, B, _ = exit_logits.shape
    losses = np.stack([cross_entropy(exit_logits[i], labels) for i in range(L)])
    correct = np.argmax(exit_logits, axis=2) == labels[None, :]
    ok = correct & (losses <= (1.0 + slack) * losses[-1][None, :])
    depth = np.full(B, L, dtype=np.int64)
    any_ok = ok.any(axis=0)
    depth[any_ok] = np.argmax(ok[:, any_ok], axis=0) + 1
    return depth


def oracle_l_opt(tokens, label: int, backbone: Backbone, slack: float = 0.1) -> int:
    """Depth label for one sample."""
    L = backbone.config.num_layers
    logits, _, _ = backbone.forward(tokens, L)
    stacked = np.stack([lg for lg in logits])
    return int(oracle_from_exit_logits(stacked, np.array([label]), slack)[0])


# -- losses -------------------------------------------------------------------

def huber(residual, delta: float = 1.0):
    r = np.abs(residual)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def huber_grad(residual, delta: float = 1.0):
    return np.clip(residual, -delta, delta)


def objective(pred, labels, teacher, delta, lam) -> float:
    return float(np.mean(huber(pred - labels, delta) + lam * (pred - teacher) ** 2))


# -- trees --------------------------------------------------------------------

@dataclass
class RegressionTree:
    """Array-encoded binary tree. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return self.value[node]
            idx = np.nonzero(inner)[0]
            go_left = x[idx, feat[idx]] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    @property
    def n_splits(self) -> int:
        return int(np.sum(self.feature >= 0))


def _best_split(x, g, min_leaf):
    """Best variance-reduction split of gradients ``g`` over all features."""
    n, f = x.shape
    if n < 2 * min_leaf:
        return None
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    gs = g[order]
    csum = np.cumsum(gs, axis=0)
    total = csum[-1]
    counts = np.arange(1, n + 1)[:, None].astype(np.float64)
    # split after position i (left has i+1 samples)
    gain = csum ** 2 / counts + (total - csum) ** 2 / np.maximum(n - counts, 1) - total ** 2 / n
    valid = np.zeros_like(gain, dtype=bool)
    valid[min_leaf - 1:n - min_leaf] = True
    # no threshold between tied values
    valid[:-1] &= xs[1:] > xs[:-1]
    valid[-1] = False
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    i, j = divmod(flat, f)
    if not np.isfinite(gain[i, j]) or gain[i, j] <= 1e-12:
        return None
    thr = 0.5 * (xs[i, j] + xs[i + 1, j])
    return j, thr, float(gain[i, j])


def fit_tree(x, grad, hess_per_sample, max_depth, min_leaf) -> RegressionTree:
    """Second-order tree: leaf value ``-sum(g) / (n * h)``."""
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(idx, depth):
        node = new_node()
        g = grad[idx]
        value[node] = -g.sum() / (len(idx) * hess_per_sample)
        if depth >= max_depth:
            return node
        split = _best_split(x[idx], g, min_leaf)
        if split is None:
            return node
        j, thr, _ = split
        mask = x[idx, j] <= thr
        feature[node] = j
        threshold[node] = thr
        left[node] = build(idx[mask], depth + 1)
        right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(x.shape[0]), 0)
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(value))


@dataclass
class GbtModel:
    base: float
    learning_rate: float
    n_features: int
    trees: list[RegressionTree] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_mae: float = float("nan")
    degenerate: bool = False

    def raw_predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise InputError(f"expected {self.n_features} features, got {x.shape[1]}")
        out = np.full(x.shape[0], self.base)
        for t in self.trees:
            out += self.learning_rate * t.predict(x)
        return out

    # flat-array round trip for checkpoints
    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"meta": np.array([self.base, self.learning_rate, self.n_features, len(self.trees),
                                 float(self.degenerate), self.train_mae])}
        for i, t in enumerate(self.trees):
            out[f"tree{i}"] = np.stack([t.feature.astype(np.float64), t.threshold, t.left.astype(np.float64),
                                        t.right.astype(np.float64), t.value])
        return out

    @classmethod
    def from_arrays(cls, arrs: dict[str, np.ndarray]) -> "GbtModel":
        base, lr, nf, nt, degenerate, mae = arrs["meta"]
        trees = []
        for i in range(int(nt)):
            a = arrs[f"tree{i}"]
            trees.append(RegressionTree(a[0].astype(np.int64), a[1].copy(), a[2].astype(np.int64),
                                        a[3].astype(np.int64), a[4].copy()))
        return cls(float(base), float(lr), int(nf), trees, [], float(mae), bool(degenerate))


def train_predictor(features, labels, teacher_targets, cfg: PredictorConfig = PredictorConfig()) -> GbtModel:
    """Boost regression trees on the Huber + teacher-MSE objective.

    Leaf values use the curvature bound ``1 + 2*lam`` of the objective, so
    with ``learning_rate <= 1`` no added tree increases the training loss.
    Stops early when no tree finds a split (constant features); such models
    predict the label mean and carry ``degenerate=True``.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    t = np.asarray(teacher_targets, dtype=np.float64)
    if not (x.shape[0] == y.size == t.size):
        raise InputError("features, labels and teacher targets differ in length")
    if y.size < 10:
        raise InputError(f"need at least 10 samples, got {y.size}")
    model = GbtModel(float(y.mean()), cfg.learning_rate, x.shape[1])
    pred = np.full(y.size, model.base)
    hess = 1.0 + 2.0 * cfg.lam
    model.train_loss.append(objective(pred, y, t, cfg.delta, cfg.lam))
    for _ in range(cfg.n_trees):
        g = huber_grad(pred - y, cfg.delta) + 2.0 * cfg.lam * (pred - t)
        tree = fit_tree(x, g, hess, cfg.max_depth, cfg.min_samples_leaf)
        if tree.n_splits == 0:
            model.degenerate = not model.trees
            break
        pred = pred + cfg.learning_rate * tree.predict(x)
        model.trees.append(tree)
        model.train_loss.append(objective(pred, y, t, cfg.delta, cfg.lam))
    model.train_mae = float(np.mean(np.abs(pred - y)))
    return model


def predict_depth(model: GbtModel, pooled_h1, num_layers: int) -> tuple[np.ndarray, np.ndarray]:
    """Rounded, clamped depth guesses with confidence ``1 / (1 + |raw - l_pred|)``."""
    raw = model.raw_predict(pooled_h1)
    return depth_from_raw(raw, num_layers)


def depth_from_raw(raw, num_layers: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw, dtype=np.float64)
    # round half up, so 5.5 -> 6 rather than banker's rounding
    l_pred = np.clip(np.floor(raw + 0.5), 1, num_layers).astype(np.int64)
    confidence = 1.0 / (1.0 + np.abs(raw - l_pred))
    return l_pred, confidence


# -- teacher ------------------------------------------------------------------

RIDGE_LAMBDA = 1e-3


@dataclass
class RidgeTeacher:
    weights: np.ndarray
    intercept: float
    mean: np.ndarray

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (x - self.mean) @ self.weights + self.intercept


def train_h3_teacher(h3_pooled, labels, ridge: float = RIDGE_LAMBDA) -> RidgeTeacher:
    """Closed-form ridge regression with an unpenalized intercept."""
    x = np.atleast_2d(np.asarray(h3_pooled, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 10:
        raise InputError(f"need at least 10 samples, got {y.size}")
    if ridge <= 0:
        raise ParameterError("ridge penalty must be positive")
    mean = x.mean(axis=0)
    xc = x - mean
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(gram, xc.T @ (y - y.mean()))
    return RidgeTeacher(w, float(y.mean()), mean)
