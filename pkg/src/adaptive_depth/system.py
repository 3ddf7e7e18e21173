"""The assembled adaptive-depth model: extractor, predictor, controller, backbone.

:class:`AdaptiveSystem` answers "how deep for this input?" and evaluates a
dataset at the chosen depths. It also owns checkpoint (de)serialization.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint
from .backbone import Backbone, BackboneConfig, cross_entropy, flops_of_depth, folded_ranks
from .controller import Policy, rollout
from .data import Dataset
from .features import ExtractorParams, extract
from .predictor import GbtModel, depth_from_raw, oracle_from_exit_logits


@dataclass
class FeatureSet:
    pooled1: np.ndarray
    pooled2: np.ndarray
    pooled3: np.ndarray


def compute_features(extractor: ExtractorParams, tokens: np.ndarray, chunk: int = 512) -> FeatureSet:
    parts = []
    for s in range(0, tokens.shape[0], chunk):
        f = extract(tokens[s:s + chunk], extractor)
        parts.append((f.pooled1, f.pooled2, f.pooled3))
    return FeatureSet(*(np.concatenate(p) for p in zip(*parts)))


def all_exit_logits(backbone: Backbone, tokens: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Logits of every exit, shape (L, B, C)."""
    L = backbone.config.num_layers
    out = []
    for s in range(0, tokens.shape[0], chunk):
        logits, _, _ = backbone.forward(tokens[s:s + chunk], L)
        out.append(np.stack(logits))
    return np.concatenate(out, axis=1)


@dataclass
class EvalResult:
    accuracy: float
    mean_depth: float
    mean_flops: float
    flops_ratio: float
    val_loss: float
    chosen_depth: np.ndarray
    correct: np.ndarray
    l_pred: np.ndarray
    l_opt: np.ndarray
    explored: np.ndarray
    flops: np.ndarray

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "mean_depth": self.mean_depth, "mean_flops": self.mean_flops,
                "flops_ratio": self.flops_ratio, "val_loss": self.val_loss,
                "alpha": float(np.mean(self.l_pred == self.l_opt))}


@dataclass
class AdaptiveSystem:
    backbone: Backbone
    extractor: ExtractorParams
    predictor: GbtModel
    policy: Policy
    epsilon: float = 0.0

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def depth_flops(self) -> np.ndarray:
        """FLOPs of depths ``1..L`` (index 0 is depth 1)."""
        ranks = folded_ranks(self.backbone)
        L = self.config.num_layers
        return np.array([flops_of_depth(self.config, l, ranks=ranks) for l in range(1, L + 1)], dtype=np.int64)

    def predict(self, feats: FeatureSet) -> np.ndarray:
        return depth_from_raw(self.predictor.raw_predict(feats.pooled1), self.config.num_layers)[0]

    def decide(self, feats: FeatureSet, rng: np.random.Generator, epsilon: float = 0.0, greedy: bool = True):
        l_pred = self.predict(feats)
        trajs = rollout(self.policy, feats.pooled2, l_pred, epsilon, rng, greedy=greedy)
        return l_pred, trajs

    def evaluate(self, ds: Dataset, rng: np.random.Generator | None = None, epsilon: float = 0.0,
                 greedy: bool = True, feats: FeatureSet | None = None, exit_logits=None,
                 slack: float = 0.1) -> EvalResult:
        """Accuracy and cost with depths chosen by predictor + controller.

        All exits are computed once and the chosen one is read off; exit ``l``
        does not depend on later layers, so this equals running ``l`` layers.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        tokens, labels = ds.tokens, ds.labels
        feats = compute_features(self.extractor, tokens) if feats is None else feats
        exit_logits = all_exit_logits(self.backbone, tokens) if exit_logits is None else exit_logits
        l_pred, trajs = self.decide(feats, rng, epsilon, greedy)
        depth = np.array([t.chosen_depth for t in trajs])
        explored = np.array([any(t.explored) for t in trajs])
        chosen = exit_logits[depth - 1, np.arange(len(depth))]
        correct = np.argmax(chosen, axis=1) == labels
        table = self.depth_flops()
        flops = table[depth - 1]
        l_opt = oracle_from_exit_logits(exit_logits, labels, slack)
        return EvalResult(
            accuracy=float(correct.mean()),
            mean_depth=float(depth.mean()),
            mean_flops=float(flops.mean()),
            flops_ratio=float(flops.mean() / table[-1]),
            val_loss=float(cross_entropy(chosen, labels).mean()),
            chosen_depth=depth, correct=correct, l_pred=l_pred, l_opt=l_opt,
            explored=explored, flops=flops,
        )

    def with_oracle_depths(self, ds: Dataset, slack: float = 0.1, exit_logits=None) -> Dataset:
        """Copy of ``ds`` with ``oracle_depth`` filled from this backbone's exits."""
        exit_logits = all_exit_logits(self.backbone, ds.tokens) if exit_logits is None else exit_logits
        l_opt = oracle_from_exit_logits(exit_logits, ds.labels, slack)
        records = [replace(r, oracle_depth=int(o)) for r, o in zip(ds.records, l_opt)]
        return Dataset(records, dict(ds.header))

    # -- persistence ------------------------------------------------------------

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.params.items()}
        out.update({f"extractor.{k}": v for k, v in self.extractor.tensors().items()})
        out.update({f"predictor.{k}": v for k, v in self.predictor.to_arrays().items()})
        out.update({f"policy.{k}": v for k, v in self.policy.params.items()})
        out["policy.feat_mean"] = self.policy.feat_mean
        out["policy.feat_std"] = self.policy.feat_std
        return out

    def save(self, directory, extra_config: dict | None = None):
        cfg = {"backbone": self.config.to_dict(), "epsilon": self.epsilon,
               "extractor_max_len": self.extractor.max_len}
        if extra_config:
            cfg.update(extra_config)
        return checkpoint.save(directory, cfg, self.tensors())

    @classmethod
    def load(cls, directory) -> tuple["AdaptiveSystem", dict]:
        cfg, tensors = checkpoint.load(directory)
        groups: dict[str, dict[str, np.ndarray]] = {}
        for name, value in tensors.items():
            group, _, key = name.partition(".")
            groups.setdefault(group, {})[key] = value
        bcfg = BackboneConfig(**cfg["backbone"])
        backbone = Backbone(bcfg, groups["backbone"])
        extractor = ExtractorParams.from_tensors(groups["extractor"], cfg.get("extractor_max_len", 256))
        predictor = GbtModel.from_arrays(groups["predictor"])
        pol = groups["policy"]
        mean, std = pol.pop("feat_mean"), pol.pop("feat_std")
        policy = Policy(pol, bcfg.num_layers, mean, std)
        return cls(backbone, extractor, predictor, policy, float(cfg.get("epsilon", 0.0))), cfg
