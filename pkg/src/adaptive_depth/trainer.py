"""Two-stage collaborative training loop.

Every epoch first refreshes oracle depth labels on a random quarter of the
training set and refits the predictor with the controller frozen. The second
stage then either runs PPO on the controller (``epoch % 3 == 0``) or trains
the backbone with cross-entropy plus distillation from a snapshot of its own
full-depth exit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, cross_entropy, fold_layers, task_loss
from .controller import Policy, PPOConfig, RewardConfig, hierarchical_reward, ppo_update, rollout
from .data import Dataset
from .errors import InputError, ParameterError, TrainingError
from .features import ExtractorParams
from .optim import Adam
from .predictor import GbtModel, PredictorConfig, oracle_from_exit_logits, train_h3_teacher, train_predictor
from .system import AdaptiveSystem, FeatureSet, all_exit_logits, compute_features

PREDICTOR, PPO, BACKBONE = "predictor", "ppo", "backbone"


@dataclass(frozen=True)
class EpochPlan:
    epoch: int
    phases: tuple[str, str]

    @property
    def second(self) -> str:
        return self.phases[1]


def schedule(epoch: int) -> EpochPlan:
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    return EpochPlan(epoch, (PREDICTOR, PPO if epoch % 3 == 0 else BACKBONE))


def lr_at(epoch: int, base: float = 1e-4, period: int = 10) -> float:
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    return base * 0.5 ** (epoch // period)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 32
    base_lr: float = 3e-3
    lr_period: int = 10
    patience: int = 5
    min_delta: float = 1e-4
    kd_temperature: float = 2.0
    kd_weight: float = 0.5
    oracle_fraction: float = 0.25
    val_fraction: float = 0.2
    epsilon: float = 0.1
    epsilon_decay: float = 0.95
    epsilon_floor: float = 0.01
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "base_lr", "lr_period", "patience", "kd_temperature"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0 < self.oracle_fraction <= 1 or not 0 < self.val_fraction < 1:
            raise ParameterError("oracle_fraction and val_fraction must be fractions")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sub = {"backbone": BackboneConfig, "ppo": PPOConfig, "reward": RewardConfig, "predictor": PredictorConfig}
        for key, kind in sub.items():
            if key in d:
                d[key] = kind(**d[key])
        return cls(**d)


def epsilon_at(cfg: TrainConfig, epoch: int) -> float:
    return max(cfg.epsilon_floor, cfg.epsilon * cfg.epsilon_decay ** epoch)


def param_hash(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("split", "init", "batches", "oracle", "rollout", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def _check_finite(value: float, phase: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} in phase {phase!r} at step {step}")


@dataclass
class TrainResult:
    system: AdaptiveSystem
    report: list[dict]
    best_epoch: int
    stopped_early: bool
    train: Dataset
    val: Dataset


class _Stopper:
    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, loss: float, epoch: int) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``."""
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


def backbone_epoch(backbone: Backbone, opt: Adam, tokens, labels, rng, cfg: TrainConfig,
                   exits: str = "all", teacher_logits=None, phase: str = BACKBONE) -> float:
    """One pass over the data; ``exits`` is ``"all"`` or ``"last"``."""
    L = backbone.config.num_layers
    order = rng.permutation(tokens.shape[0])
    total = 0.0
    steps = 0
    bs = cfg.batch_size
    for s in range(0, order.size - bs + 1, bs):
        idx = order[s:s + bs]
        logits, _, cache = backbone.forward(tokens[idx], L, keep=True)
        teach = None if teacher_logits is None else teacher_logits[idx]
        kd = cfg.kd_weight if teach is not None else 0.0
        dlogits = []
        batch_loss = 0.0
        if exits == "all":
            for lg in logits:
                loss, g = task_loss(lg, labels[idx], teach, kd, cfg.kd_temperature)
                batch_loss += loss / L
                dlogits.append(g / L)
        else:
            loss, g = task_loss(logits[-1], labels[idx], teach, kd, cfg.kd_temperature)
            batch_loss = loss
            dlogits = [None] * (L - 1) + [g]
        _check_finite(batch_loss, phase, steps)
        opt.step(backbone.backward(cache, dlogits))
        total += batch_loss
        steps += 1
    return total / max(steps, 1)


def _ppo_epoch(system: AdaptiveSystem, feats: FeatureSet, correct_table: np.ndarray, l_pred: np.ndarray,
               epsilon: float, rng, cfg: TrainConfig, opt: Adam) -> dict:
    """Rollouts over the training set in batches of ``batch_size``, one update each."""
    L = system.config.num_layers
    table = system.depth_flops()
    order = rng.permutation(l_pred.size)
    rewards, clip, depths = [], [], []
    bs = cfg.batch_size
    for step, s in enumerate(range(0, order.size - bs + 1, bs)):
        idx = order[s:s + bs]
        trajs = rollout(system.policy, feats.pooled2[idx], l_pred[idx], epsilon, rng)
        for k, tr in zip(idx, trajs):
            d = tr.chosen_depth
            br, steps = hierarchical_reward(tr, bool(correct_table[d - 1, k]), table[d - 1] / table[-1],
                                            cfg.reward, L)
            tr.rewards = steps
            rewards.append(br.total)
            depths.append(d)
        stats = ppo_update(system.policy, trajs, cfg.ppo, opt)
        _check_finite(stats["final_loss"], PPO, step)
        clip.append(stats["clip_fraction"])
    return {"reward_mean": float(np.mean(rewards)), "reward_std": float(np.std(rewards)),
            "clip_fraction": float(np.mean(clip)), "rollout_mean_depth": float(np.mean(depths))}


def run(dataset: Dataset, cfg: TrainConfig = TrainConfig(), split=None, hooks=None,
        ignore_early_stop: bool = False) -> TrainResult:
    """Collaborative training; returns the best-validation-loss system and a report.

    ``split`` may supply a precomputed ``(train, val)`` pair. ``hooks`` is an
    optional callable ``hooks(epoch, phase, system)`` invoked after each stage.
    """
    if len(dataset) == 0:
        raise InputError("empty dataset")
    streams = _streams(cfg.seed)
    train, val = dataset.split(cfg.val_fraction, streams["split"]) if split is None else split
    if len(train) < cfg.batch_size:
        raise ParameterError(f"batch size {cfg.batch_size} exceeds training set size {len(train)}")
    bcfg = cfg.backbone
    init = streams["init"]
    backbone = Backbone.create(bcfg, init)
    extractor = ExtractorParams.random(bcfg.vocab_size, init)
    tok_tr, lab_tr = train.tokens, train.labels
    tok_va = val.tokens
    f_tr = compute_features(extractor, tok_tr)
    f_va = compute_features(extractor, tok_va)
    policy = Policy.create(f_tr.pooled2.shape[1], bcfg.num_layers, init)
    policy.feat_mean = f_tr.pooled2.mean(axis=0)
    policy.feat_std = f_tr.pooled2.std(axis=0) + 1e-6
    predictor = GbtModel(float(bcfg.num_layers), cfg.predictor.learning_rate, f_tr.pooled1.shape[1])
    system = AdaptiveSystem(backbone, extractor, predictor, policy, cfg.epsilon)
    opt_b = Adam(backbone.params, lr=cfg.base_lr)
    opt_p = Adam(policy.params, lr=cfg.ppo.lr, max_grad_norm=cfg.ppo.max_grad_norm)
    stopper = _Stopper(cfg.patience, cfg.min_delta)
    report: list[dict] = []
    best = None
    stopped = False
    labels_known = np.zeros(len(train), dtype=np.int64)
    for epoch in range(cfg.epochs):
        plan = schedule(epoch)
        lr = lr_at(epoch, cfg.base_lr, cfg.lr_period)
        eps = epsilon_at(cfg, epoch)
        system.epsilon = eps
        rec: dict = {"epoch": epoch, "phase": plan.second, "lr": lr, "epsilon": eps}

        # stage 1: refresh oracle labels on a subsample and refit the predictor
        frozen = (param_hash(policy.params), param_hash(backbone.params))
        n_sub = max(10, int(round(cfg.oracle_fraction * len(train))))
        sub = np.sort(streams["oracle"].choice(len(train), size=min(n_sub, len(train)), replace=False))
        exit_sub = all_exit_logits(backbone, tok_tr[sub])
        l_opt = oracle_from_exit_logits(exit_sub, lab_tr[sub], cfg.predictor.oracle_slack)
        labels_known[sub] = l_opt
        teacher = train_h3_teacher(f_tr.pooled3[sub], l_opt)
        system.predictor = train_predictor(f_tr.pooled1[sub], l_opt, teacher.predict(f_tr.pooled3[sub]),
                                           cfg.predictor)
        if (param_hash(policy.params), param_hash(backbone.params)) != frozen:
            raise TrainingError("predictor stage modified controller or backbone parameters")
        rec["predictor_mae"] = system.predictor.train_mae
        rec["predictor_degenerate"] = system.predictor.degenerate
        rec["oracle_mean_depth"] = float(l_opt.mean())
        if hooks:
            hooks(epoch, PREDICTOR, system)

        # stage 2
        if plan.second == PPO:
            frozen = (param_hash(backbone.params), param_hash(system.predictor.to_arrays()))
            exit_tr = all_exit_logits(backbone, tok_tr)
            correct = np.argmax(exit_tr, axis=2) == lab_tr[None, :]
            l_pred_tr = system.predict(f_tr)
            rec.update(_ppo_epoch(system, f_tr, correct, l_pred_tr, eps, streams["rollout"], cfg, opt_p))
            if (param_hash(backbone.params), param_hash(system.predictor.to_arrays())) != frozen:
                raise TrainingError("ppo stage modified backbone or predictor parameters")
        else:
            frozen = (param_hash(policy.params), param_hash(system.predictor.to_arrays()))
            opt_b.lr = lr
            teacher_logits = all_exit_logits(backbone, tok_tr)[-1]
            rec["train_loss"] = backbone_epoch(backbone, opt_b, tok_tr, lab_tr, streams["batches"], cfg,
                                               "all", teacher_logits)
            if (param_hash(policy.params), param_hash(system.predictor.to_arrays())) != frozen:
                raise TrainingError("backbone stage modified controller or predictor parameters")
        if hooks:
            hooks(epoch, plan.second, system)

        ev = system.evaluate(val, np.random.default_rng(0), 0.0, True, feats=f_va)
        _check_finite(ev.val_loss, "validation", epoch)
        rec.update({f"val_{k}" if not k.startswith("val") else k: v for k, v in ev.summary().items()})
        improved, stop = stopper.update(ev.val_loss, epoch)
        rec["improved"] = improved
        report.append(rec)
        if improved:
            best = _snapshot(system)
        if stop and not ignore_early_stop:
            stopped = True
            break
    final = _restore(best) if best is not None else system
    return TrainResult(final, report, stopper.best_epoch, stopped, train, val)


def _snapshot(system: AdaptiveSystem) -> AdaptiveSystem:
    return AdaptiveSystem(system.backbone.copy(), system.extractor,
                          GbtModel.from_arrays(system.predictor.to_arrays()),
                          system.policy.copy(), system.epsilon)


def _restore(snap: AdaptiveSystem) -> AdaptiveSystem:
    return _snapshot(snap)


def run_baseline(dataset: Dataset, cfg: TrainConfig = TrainConfig(), split=None) -> tuple[Backbone, list[dict]]:
    """Always-full-depth reference: cross-entropy at exit L only.

    Trains on exactly the epochs the collaborative schedule gives to the
    backbone, with the same learning rates, batch size and seed streams.
    """
    streams = _streams(cfg.seed)
    train, val = dataset.split(cfg.val_fraction, streams["split"]) if split is None else split
    backbone = Backbone.create(cfg.backbone, streams["init"])
    opt = Adam(backbone.params, lr=cfg.base_lr)
    tok_tr, lab_tr = train.tokens, train.labels
    tok_va, lab_va = val.tokens, val.labels
    stopper = _Stopper(cfg.patience, cfg.min_delta)
    best = backbone.copy()
    report = []
    for epoch in range(cfg.epochs):
        if schedule(epoch).second != BACKBONE:
            continue
        opt.lr = lr_at(epoch, cfg.base_lr, cfg.lr_period)
        loss = backbone_epoch(backbone, opt, tok_tr, lab_tr, streams["batches"], cfg, "last", None, "baseline")
        logits = all_exit_logits(backbone, tok_va)[-1]
        val_loss = float(cross_entropy(logits, lab_va).mean())
        acc = float(np.mean(np.argmax(logits, axis=1) == lab_va))
        improved, stop = stopper.update(val_loss, epoch)
        if improved:
            best = backbone.copy()
        report.append({"epoch": epoch, "train_loss": loss, "val_loss": val_loss, "val_accuracy": acc})
        if stop:
            break
    return best, report


@dataclass
class FoldResult:
    system: AdaptiveSystem
    factors: dict
    params_before: int
    params_after: int
    losses: list[float]

    @property
    def reduction(self) -> float:
        return 1.0 - self.params_after / self.params_before


def fold_and_finetune(system: AdaptiveSystem, train: Dataset, cfg: TrainConfig = TrainConfig(),
                      energy_ratio: float = 0.9, epochs: int = 2, lr: float | None = None) -> FoldResult:
    """Fold every attention/FFN weight, then train the factors on all exits.

    Predictor and controller are carried over unchanged. The default rate is
    the schedule's rate at the last configured epoch.
    """
    folded, factors = fold_layers(system.backbone, energy_ratio)
    # fine-tuning updates in place; keep the returned factors at their folded values
    folded = Backbone(folded.config, {k: v.copy() for k, v in folded.params.items()})
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = Adam(folded.params, lr=lr_at(cfg.epochs - 1, cfg.base_lr, cfg.lr_period) if lr is None else lr)
    teacher = all_exit_logits(system.backbone, train.tokens)[-1]
    losses = [backbone_epoch(folded, opt, train.tokens, train.labels, rng, cfg, "all", teacher, "fold")
              for _ in range(epochs)]
    out = AdaptiveSystem(folded, system.extractor, GbtModel.from_arrays(system.predictor.to_arrays()),
                         system.policy.copy(), system.epsilon)
    return FoldResult(out, factors, system.backbone.num_params(), folded.num_params(), losses)


def baseline_accuracy(backbone: Backbone, ds: Dataset) -> float:
    logits = all_exit_logits(backbone, ds.tokens)[-1]
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def report_lines(report: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in report)
