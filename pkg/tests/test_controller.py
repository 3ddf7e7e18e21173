import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from adaptive_depth.controller import (CONTINUE, EXIT, PPOConfig, Policy, RewardConfig, Trajectory, gae,
                                       hierarchical_reward, ppo_loss_and_grads, ppo_update, prepare_batch,
                                       rollout, select_depth)
from adaptive_depth.errors import ParameterError
from adaptive_depth.optim import Adam
from adaptive_depth.tensor_math import grad_check, log_softmax_t

FEAT = 6


def make_policy(L=12, seed=0):
    return Policy.create(FEAT, L, np.random.default_rng(seed))


def forced(policy, action):
    p = policy.copy()
    p.params["pi.w"][:] = 0.0
    p.params["pi.b"][:] = [-50.0, 50.0] if action == EXIT else [50.0, -50.0]
    return p


def test_forced_exit_chooses_depth_one():
    p = forced(make_policy(), EXIT)
    for seed in range(5):
        tr = select_depth(p, np.ones(FEAT), 6, 0.0, np.random.default_rng(seed))
        assert tr.chosen_depth == 1 and tr.actions == [EXIT]


def test_forced_continue_runs_to_full_depth():
    p = forced(make_policy(L=5), CONTINUE)
    tr = select_depth(p, np.ones(FEAT), 3, 0.0, np.random.default_rng(0))
    assert tr.chosen_depth == 5 and tr.actions == [CONTINUE] * 5


def test_uniform_exploration_law():
    L, n = 12, 10_000
    p = make_policy(L)
    trajs = rollout(p, np.zeros((n, FEAT)), np.full(n, 6), 1.0, np.random.default_rng(0))
    depths = np.array([t.chosen_depth for t in trajs])
    probs = np.array([0.5 ** l for l in range(1, L)] + [0.5 ** (L - 1)])
    observed = np.bincount(depths, minlength=L + 1)[1:]
    expected = probs * n
    # merge the sparse tail so every expected count is at least 5
    k = int(np.argmax(expected < 5))
    obs = np.append(observed[:k], observed[k:].sum())
    exp = np.append(expected[:k], expected[k:].sum())
    assert stats.chisquare(obs, exp).pvalue > 0.01
    assert all(all(t.explored) for t in trajs)


def test_rollout_deterministic_and_well_formed():
    p = make_policy()
    feats = np.random.default_rng(1).normal(size=(20, FEAT))
    a = rollout(p, feats, np.arange(20) % 12 + 1, 0.0, np.random.default_rng(5))
    b = rollout(p, feats, np.arange(20) % 12 + 1, 0.0, np.random.default_rng(5))
    for x, y in zip(a, b):
        assert x.actions == y.actions and x.logprobs == y.logprobs
    for tr in a:
        assert len(tr) == tr.chosen_depth
        assert all(act == CONTINUE for act in tr.actions[:-1])
        assert tr.actions[-1] == EXIT or tr.chosen_depth == 12
        assert all(np.isfinite(lp) and lp <= 0 for lp in tr.logprobs)
        assert tr.total_logprob == pytest.approx(sum(tr.logprobs))


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_step_probabilities_sum_to_one(seed, eps):
    p = make_policy(L=6, seed=seed % 7)
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(3, FEAT))
    trajs = rollout(p, feats, [1, 3, 6], eps, rng)
    x = p.step_inputs(feats, [1, 3, 6], 1)
    h, c, _ = p.cell(x, np.zeros((3, 128)), np.zeros((3, 128)))
    logp = log_softmax_t(p.heads(h)[0])
    assert np.allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)
    for k, tr in enumerate(trajs):
        assert tr.logprobs[0] == pytest.approx(logp[k, tr.actions[0]], abs=1e-12)
        assert 1 <= tr.chosen_depth <= 6


def test_epsilon_validation():
    with pytest.raises(ParameterError):
        rollout(make_policy(), np.zeros((1, FEAT)), [1], 1.5, np.random.default_rng(0))


def _traj(depth, l_pred, L=12):
    return Trajectory(np.zeros(FEAT), l_pred, actions=[CONTINUE] * (depth - 1) + ([EXIT] if depth < L else [CONTINUE]),
                      chosen_depth=depth)


def test_reward_examples():
    br, steps = hierarchical_reward(_traj(12, 12), True, 1.0, RewardConfig(), 12)
    assert br.total == pytest.approx(0.6)
    assert sum(steps) == pytest.approx(br.total)
    br, steps = hierarchical_reward(_traj(6, 1), False, 0.5, RewardConfig(), 12)
    assert br.total == pytest.approx(-1.25)
    assert steps[:-1] == [-0.5 / 12] * 5
    assert sum(steps) == pytest.approx(-1.25)
    r4 = hierarchical_reward(_traj(4, 4), True, 4 / 12, num_layers=12)[0].total
    r8 = hierarchical_reward(_traj(8, 8), True, 8 / 12, num_layers=12)[0].total
    assert r4 > r8
    with pytest.raises(ParameterError):
        hierarchical_reward(_traj(3, 3), True, 0.2, num_layers=2)


@given(st.integers(1, 12), st.integers(1, 12), st.booleans())
def test_reward_decreases_with_depth(d, l_pred, correct):
    if d == 12:
        return
    # same smoothness on both sides so only the compute term moves
    a = hierarchical_reward(_traj(d, d), correct, d / 12, num_layers=12)[0]
    b = hierarchical_reward(_traj(d + 1, d + 1), correct, (d + 1) / 12, num_layers=12)[0]
    assert b.total < a.total


def test_gae_lambda_one_is_monte_carlo():
    rewards = [0.3, -0.2, 1.1]
    values = [0.5, 0.1, -0.4]
    adv, ret = gae(rewards, values, 1.0, 1.0)
    mc = [sum(rewards[t:]) - values[t] for t in range(3)]
    assert np.allclose(adv, mc, atol=1e-12)
    assert np.allclose(ret, [sum(rewards[t:]) for t in range(3)], atol=1e-12)


def test_gae_hand_values():
    adv, _ = gae([1.0, 2.0], [0.5, 0.25], 0.9, 0.5)
    d1 = 2.0 - 0.25
    d0 = 1.0 + 0.9 * 0.25 - 0.5
    assert np.allclose(adv, [d0 + 0.45 * d1, d1])


def _batch(policy, n=4, seed=0, eps=0.0):
    rng = np.random.default_rng(seed)
    trajs = rollout(policy, rng.normal(size=(n, FEAT)), rng.integers(1, 13, n), eps, rng)
    for tr in trajs:
        tr.rewards = hierarchical_reward(tr, bool(rng.integers(2)), tr.chosen_depth / 12, num_layers=12)[1]
    return trajs


def test_first_epoch_ratio_identity():
    p = make_policy()
    trajs = _batch(p, 6)
    prepare_batch(trajs, PPOConfig())
    _, _, st_ = ppo_loss_and_grads(p, trajs, PPOConfig())
    assert st_["mean_ratio"] == pytest.approx(1.0, abs=1e-12)
    assert st_["clip_fraction"] == 0.0
    mean_adv = np.mean(np.concatenate([t.advantages for t in trajs]))
    assert st_["surrogate"] == pytest.approx(mean_adv, abs=1e-12)


def test_clipped_contribution():
    p = make_policy()
    trajs = _batch(p, 1)
    tr = trajs[0]
    tr.actions, tr.values, tr.rewards = tr.actions[:1], tr.values[:1], [0.0]
    tr.logprobs = [tr.logprobs[0] - math.log(1.5)]
    tr.advantages, tr.returns = np.array([1.0]), np.array([0.0])
    _, _, st_ = ppo_loss_and_grads(p, [tr], PPOConfig(clip=0.2))
    assert st_["mean_ratio"] == pytest.approx(1.5)
    assert st_["surrogate"] == pytest.approx(1.2)
    assert st_["clip_fraction"] == 1.0


def test_zero_advantage_has_no_policy_gradient():
    p = make_policy()
    trajs = _batch(p, 3)
    prepare_batch(trajs, PPOConfig())
    for tr in trajs:
        tr.advantages = np.zeros(len(tr))
    cfg = PPOConfig(value_coef=0.0, entropy_coef=0.0)
    _, grads, _ = ppo_loss_and_grads(p, trajs, cfg)
    assert all(not g.any() for g in grads.values())


def test_ppo_gradient_check():
    p = make_policy(L=4, seed=2)
    trajs = _batch(p, 1, seed=3, eps=0.5)
    cfg = PPOConfig()
    prepare_batch(trajs, cfg)
    # move the policy a little so some ratios differ from 1 (unclipped region)
    rng = np.random.default_rng(0)
    for k in p.params:
        p.params[k] = p.params[k] + rng.normal(scale=0.01, size=p.params[k].shape)
    worst = 0.0
    for name in ("pi.w", "pi.b", "v.w", "v.b", "lstm.w", "lstm.b"):
        base = p.params[name]

        def f(flat, name=name, base=base):
            p.params[name] = flat.reshape(base.shape)
            loss, grads, _ = ppo_loss_and_grads(p, trajs, cfg)
            p.params[name] = base
            return loss, grads[name].reshape(-1)

        idx = rng.choice(base.size, size=min(20, base.size), replace=False)
        worst = max(worst, grad_check(f, base.reshape(-1).copy(), indices=idx))
    assert worst < 1e-4


def test_identical_advantages_skip_normalization():
    p = make_policy(L=1)
    trajs = rollout(p, np.zeros((4, FEAT)), [1] * 4, 0.0, np.random.default_rng(0))
    for tr in trajs:
        tr.rewards = [0.5]
        tr.values = [0.0]
    out = ppo_update(p, trajs, PPOConfig(epochs=1))
    assert out["advantage_normalized"] is False
    with pytest.raises(ParameterError):
        ppo_update(p, [])


def test_sampling_model_hit_rate():
    # stub predictor with exact accuracy alpha, controller follows it unless exploring
    L, n, alpha, eps = 12, 100_000, 0.8, 0.2
    rng = np.random.default_rng(0)
    l_opt = rng.integers(1, L + 1, n)
    right = rng.random(n) < alpha
    l_pred = np.where(right, l_opt, (l_opt + rng.integers(1, L, n) - 1) % L + 1)
    explore = rng.random(n) < eps
    chosen = np.where(explore, rng.integers(1, L + 1, n), l_pred)
    hit = chosen == l_opt
    p_explore = 1.0 / L
    target = alpha * (1 - eps) + eps * p_explore
    assert abs(hit.mean() - target) <= 3 * hit.std(ddof=1) / math.sqrt(n)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ppo_learns_to_exit_early(seed):
    # every sample is already solved at depth 1
    L = 12
    rng = np.random.default_rng(seed)
    p = Policy.create(FEAT, L, rng)
    opt = Adam(p.params, lr=1e-3, max_grad_norm=1.0)
    cfg = PPOConfig()
    feats = rng.normal(size=(32, FEAT))
    for _ in range(200):
        trajs = rollout(p, feats, np.ones(32, dtype=int), 0.0, rng)
        for tr in trajs:
            tr.rewards = hierarchical_reward(tr, True, tr.chosen_depth / L, num_layers=L)[1]
        ppo_update(p, trajs, cfg, opt)
    final = rollout(p, feats, np.ones(32, dtype=int), 0.0, rng)
    assert np.mean([t.chosen_depth for t in final]) < 0.5 * L
