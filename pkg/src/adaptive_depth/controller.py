"""Recurrent continue/exit policy trained with PPO.

At step ``t`` (1-based, one step per encoder layer) the LSTM cell reads
``[pooled_h2, t / L, l_pred / L]`` and emits two logits, action 0 meaning
*continue* and 1 meaning *exit after layer t*, plus a value estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .optim import Adam
from .tensor_math import log_softmax_t

CONTINUE, EXIT = 0, 1
HIDDEN = 128


@dataclass(frozen=True)
class RewardConfig:
    a: float = 1.0
    b: float = 0.5
    c: float = 0.1


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 1e-3
    max_grad_norm: float | None = 1.0
    normalize_advantages: bool = True


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Policy:
    """LSTM-cell policy/value network over per-layer steps.

    ``params`` holds ``lstm.w`` ((in + H) x 4H, gate order i, f, g, o),
    ``lstm.b``, ``pi.w``/``pi.b`` (H x 2) and ``v.w``/``v.b`` (H x 1).
    ``feat_mean``/``feat_std`` standardize the h2 summary and are not trained.
    """

    def __init__(self, params: dict[str, np.ndarray], num_layers: int, feat_mean=None, feat_std=None):
        self.params = params
        self.num_layers = num_layers
        n_feat = params["lstm.w"].shape[0] - HIDDEN - 2
        self.feat_mean = np.zeros(n_feat) if feat_mean is None else np.asarray(feat_mean, dtype=np.float64)
        self.feat_std = np.ones(n_feat) if feat_std is None else np.asarray(feat_std, dtype=np.float64)

    @classmethod
    def create(cls, feat_dim: int, num_layers: int, rng: np.random.Generator) -> "Policy":
        n_in = feat_dim + 2
        s = 1.0 / np.sqrt(HIDDEN)
        b = np.zeros(4 * HIDDEN)
        b[HIDDEN:2 * HIDDEN] = 1.0
        params = {
            "lstm.w": rng.uniform(-s, s, (n_in + HIDDEN, 4 * HIDDEN)),
            "lstm.b": b,
            "pi.w": rng.uniform(-0.01, 0.01, (HIDDEN, 2)),
            # start near a 1/L per-step exit rate so untrained rollouts run deep
            "pi.b": np.array([0.0, -np.log(max(num_layers - 1, 1))]),
            "v.w": rng.uniform(-0.01, 0.01, (HIDDEN, 1)),
            "v.b": np.zeros(1),
        }
        return cls(params, num_layers)

    def copy(self) -> "Policy":
        return Policy({k: v.copy() for k, v in self.params.items()}, self.num_layers,
                      self.feat_mean.copy(), self.feat_std.copy())

    @property
    def feat_dim(self) -> int:
        return self.feat_mean.size

    def step_inputs(self, feats, l_pred, t):
        feats = (np.atleast_2d(feats) - self.feat_mean) / self.feat_std
        B = feats.shape[0]
        ctx = np.column_stack([np.full(B, t / self.num_layers), np.asarray(l_pred, dtype=np.float64) / self.num_layers])
        return np.hstack([feats, ctx])

    def cell(self, x, h, c):
        p = self.params
        z = np.hstack([x, h]) @ p["lstm.w"] + p["lstm.b"]
        H = HIDDEN
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        return h_new, c_new, (x, h, c, i, f, g, o, tc)

    def heads(self, h):
        p = self.params
        return h @ p["pi.w"] + p["pi.b"], (h @ p["v.w"] + p["v.b"])[:, 0]


@dataclass
class Trajectory:
    features: np.ndarray
    l_pred: int
    actions: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    explored: list[bool] = field(default_factory=list)
    chosen_depth: int = 0
    rewards: list[float] = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def total_logprob(self) -> float:
        return float(np.sum(self.logprobs))

    def __len__(self):
        return len(self.actions)


def rollout(policy: Policy, feats, l_pred, epsilon: float, rng: np.random.Generator,
            greedy: bool = False) -> list[Trajectory]:
    """Batched rollouts, one trajectory per row of ``feats``.

    With probability ``epsilon`` a step's action is uniform-random (flagged
    in ``explored``); otherwise it is sampled from the policy, or its argmax
    when ``greedy``. Log-probabilities always come from the policy.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError(f"epsilon must be in [0, 1], got {epsilon}")
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    l_pred = np.atleast_1d(np.asarray(l_pred, dtype=np.int64))
    B = feats.shape[0]
    L = policy.num_layers
    trajs = [Trajectory(feats[k], int(l_pred[k])) for k in range(B)]
    h = np.zeros((B, HIDDEN))
    c = np.zeros((B, HIDDEN))
    active = np.ones(B, dtype=bool)
    for t in range(1, L + 1):
        x = policy.step_inputs(feats, l_pred, t)
        h, c, _ = policy.cell(x, h, c)
        logits, values = policy.heads(h)
        logp = log_softmax_t(logits, 1.0)
        u_explore = rng.random(B)
        u_random = rng.integers(0, 2, B)
        u_policy = rng.random(B)
        explore = u_explore < epsilon
        if greedy:
            act_policy = np.argmax(logits, axis=1)
        else:
            act_policy = (u_policy < np.exp(logp[:, EXIT])).astype(np.int64)
        actions = np.where(explore, u_random, act_policy)
        for k in np.nonzero(active)[0]:
            tr = trajs[k]
            a = int(actions[k])
            tr.actions.append(a)
            tr.logprobs.append(float(logp[k, a]))
            tr.values.append(float(values[k]))
            tr.explored.append(bool(explore[k]))
            if a == EXIT or t == L:
                tr.chosen_depth = t
                active[k] = False
        if not active.any():
            break
    return trajs


def select_depth(policy: Policy, pooled_h2, l_pred: int, epsilon: float, rng: np.random.Generator,
                 greedy: bool = False) -> Trajectory:
    return rollout(policy, np.atleast_2d(pooled_h2), [l_pred], epsilon, rng, greedy)[0]


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy_term: float
    compute_term: float
    smoothness_term: float

    @property
    def total(self) -> float:
        return self.accuracy_term + self.compute_term + self.smoothness_term


def hierarchical_reward(trajectory: Trajectory, correct: bool, flops_ratio: float,
                        cfg: RewardConfig = RewardConfig(), num_layers: int | None = None):
    """Terminal reward split into per-step shaped rewards.

    ``flops_ratio`` is FLOPs(chosen depth) / FLOPs(L). Every continue step
    is charged ``-b / L``; the final step receives the remainder so the
    per-step rewards sum to the total. Returns ``(breakdown, step_rewards)``.
    """
    L = num_layers if num_layers is not None else max(len(trajectory), trajectory.chosen_depth)
    depth = trajectory.chosen_depth
    if not 1 <= depth <= L:
        raise ParameterError(f"chosen depth {depth} outside [1, {L}]")
    smooth = cfg.c if abs(depth - trajectory.l_pred) <= 1 else 0.0
    br = RewardBreakdown(cfg.a if correct else -cfg.a, -cfg.b * flops_ratio, smooth)
    n = len(trajectory) if len(trajectory) else depth
    steps = [-cfg.b / L] * (n - 1)
    steps.append(br.total - sum(steps))
    return br, steps


def gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns for one episode that terminates after its last step."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = rewards.size
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        next_v = values[t + 1] if t + 1 < T else 0.0
        delta = rewards[t] + gamma * next_v - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values


def _unroll(policy: Policy, trajs: list[Trajectory]):
    """Re-run the policy over stored trajectories, keeping caches for BPTT."""
    B = len(trajs)
    T = max(len(tr) for tr in trajs)
    feats = np.stack([tr.features for tr in trajs])
    l_pred = np.array([tr.l_pred for tr in trajs])
    h = np.zeros((B, HIDDEN))
    c = np.zeros((B, HIDDEN))
    caches, hs, logits_all, values_all = [], [], [], []
    for t in range(1, T + 1):
        x = policy.step_inputs(feats, l_pred, t)
        h, c, cache = policy.cell(x, h, c)
        logits, values = policy.heads(h)
        caches.append(cache)
        hs.append(h)
        logits_all.append(logits)
        values_all.append(values)
    return caches, np.stack(hs, axis=1), np.stack(logits_all, axis=1), np.stack(values_all, axis=1)


def _flatten(trajs):
    B = len(trajs)
    T = max(len(tr) for tr in trajs)
    mask = np.zeros((B, T), dtype=bool)
    actions = np.zeros((B, T), dtype=np.int64)
    old_logp = np.zeros((B, T))
    adv = np.zeros((B, T))
    ret = np.zeros((B, T))
    for k, tr in enumerate(trajs):
        n = len(tr)
        mask[k, :n] = True
        actions[k, :n] = tr.actions
        old_logp[k, :n] = tr.logprobs
        adv[k, :n] = tr.advantages
        ret[k, :n] = tr.returns
    return mask, actions, old_logp, adv, ret


def ppo_loss_and_grads(policy: Policy, trajs: list[Trajectory], cfg: PPOConfig, adv=None):
    """Clipped-surrogate loss (to minimize) and its gradient w.r.t. policy params."""
    mask, actions, old_logp, adv_raw, ret = _flatten(trajs)
    adv = adv_raw if adv is None else adv
    caches, hs, logits, values = _unroll(policy, trajs)
    B, T = mask.shape
    n = mask.sum()
    m = mask.astype(np.float64)
    logp_all = log_softmax_t(logits, 1.0)
    probs = np.exp(logp_all)
    logp = np.take_along_axis(logp_all, actions[..., None], axis=2)[..., 0]
    ratio = np.exp(np.where(mask, logp - old_logp, 0.0))
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr1 = ratio * adv
    surr2 = clipped * adv
    surr = np.minimum(surr1, surr2)
    entropy = -(probs * logp_all).sum(axis=2)
    policy_loss = -(surr * m).sum() / n
    value_loss = (((values - ret) ** 2) * m).sum() / n
    ent = (entropy * m).sum() / n
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent

    # d loss / d logp (chosen action)
    d_surr = np.where(surr1 <= surr2, ratio * adv, 0.0)
    d_logp = -d_surr * m / n
    onehot = np.eye(2)[actions]
    d_logits = d_logp[..., None] * (onehot - probs)
    # entropy: dH/dz_k = -p_k (log p_k + H)
    d_ent = -probs * (logp_all + entropy[..., None])
    d_logits += (-cfg.entropy_coef * m / n)[..., None] * d_ent
    d_values = cfg.value_coef * 2.0 * (values - ret) * m / n

    p = policy.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    hs2 = hs.reshape(B * T, HIDDEN)
    grads["pi.w"] = hs2.T @ d_logits.reshape(B * T, 2)
    grads["pi.b"] = d_logits.reshape(B * T, 2).sum(axis=0)
    grads["v.w"] = hs2.T @ d_values.reshape(B * T, 1)
    grads["v.b"] = np.array([d_values.sum()])
    dh_out = d_logits @ p["pi.w"].T + d_values[..., None] @ p["v.w"].T
    H = HIDDEN
    n_in = p["lstm.w"].shape[0] - H
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(T)):
        x, h_prev, c_prev, i, f, g, o, tc = caches[t]
        dh = dh_out[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.hstack([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)])
        xin = np.hstack([x, h_prev])
        grads["lstm.w"] += xin.T @ dz
        grads["lstm.b"] += dz.sum(axis=0)
        dxin = dz @ p["lstm.w"].T
        dh_next = dxin[:, n_in:]
        dc_next = dc * f
    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(ent),
        "mean_ratio": float((ratio * m).sum() / n),
        "clip_fraction": float(((np.abs(ratio - 1.0) > cfg.clip) * m).sum() / n),
        "surrogate": float((surr * m).sum() / n),
    }
    return float(loss), grads, stats


def prepare_batch(trajs: list[Trajectory], cfg: PPOConfig) -> None:
    for tr in trajs:
        tr.advantages, tr.returns = gae(tr.rewards, tr.values, cfg.gamma, cfg.gae_lambda)


def normalized_advantages(trajs: list[Trajectory]) -> np.ndarray | None:
    """Batch-standardized advantages, or ``None`` when their variance is zero."""
    mask, _, _, adv, _ = _flatten(trajs)
    vals = adv[mask]
    std = vals.std()
    if std < 1e-12:
        return None
    out = np.zeros_like(adv)
    out[mask] = (vals - vals.mean()) / std
    return out


def ppo_update(policy: Policy, trajs: list[Trajectory], cfg: PPOConfig = PPOConfig(),
               optimizer: Adam | None = None) -> dict:
    """Run ``cfg.epochs`` full-batch clipped-surrogate steps on ``trajs``.

    Trajectories must carry per-step ``rewards``; advantages come from GAE.
    Returns the statistics of the first epoch plus ``final_loss``.
    """
    if not trajs:
        raise ParameterError("empty trajectory batch")
    prepare_batch(trajs, cfg)
    adv = normalized_advantages(trajs) if cfg.normalize_advantages else None
    if optimizer is None:
        optimizer = Adam(policy.params, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    first = None
    for _ in range(cfg.epochs):
        loss, grads, stats = ppo_loss_and_grads(policy, trajs, cfg, adv)
        if first is None:
            first = dict(stats, loss=loss, advantage_normalized=adv is not None)
        optimizer.step(grads)
    first["final_loss"] = ppo_loss_and_grads(policy, trajs, cfg, adv)[0]
    return first
