"""Expected-FLOPs bounds for adaptive depth selection and their checks.

The sampling model: a sample gets its optimal depth with probability
``alpha * (1 - epsilon) + epsilon * p_explore`` and the full depth otherwise
(the worst case). Two closed-form upper bounds on the mean cost are provided
along with a Monte Carlo estimator, a live-system measurement and the
exponential error-propagation model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, ParameterError


@dataclass(frozen=True)
class BoundParams:
    alpha: float
    epsilon: float
    p_explore: float = 0.0
    flops_lopt: float = 6.0
    flops_full: float = 12.0
    C: float = 1.0
    l_opt: int = 6
    L: int = 12

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ParameterError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.p_explore <= 1.0:
            raise ParameterError(f"p_explore must be in [0, 1], got {self.p_explore}")
        if min(self.flops_lopt, self.flops_full, self.C) < 0:
            raise ParameterError("FLOP counts must be non-negative")
        if self.flops_lopt > self.flops_full:
            raise ParameterError(f"flops_lopt {self.flops_lopt} exceeds flops_full {self.flops_full}")

    @classmethod
    def from_depths(cls, alpha, epsilon, l_opt, L, C=1.0, p_explore=0.0) -> "BoundParams":
        return cls(alpha, epsilon, p_explore, C * l_opt, C * L, C, l_opt, L)

    @property
    def p_opt(self) -> float:
        return self.alpha * (1.0 - self.epsilon) + self.epsilon * self.p_explore


def bound_tight(p: BoundParams) -> float:
    """``a(1-e) F_opt + (1 - a(1-e)) F_full``."""
    q = p.alpha * (1.0 - p.epsilon)
    return q * p.flops_lopt + (1.0 - q) * p.flops_full


def bound_loose(p: BoundParams) -> float:
    """``(a F_opt + (1-a) F_full) / (1-e)``; undefined at ``epsilon == 1``."""
    if p.epsilon >= 1.0:
        raise ParameterError("bound_loose is undefined for epsilon = 1")
    return (p.alpha * p.flops_lopt + (1.0 - p.alpha) * p.flops_full) / (1.0 - p.epsilon)


def loose_minus_tight(p: BoundParams) -> float:
    """Closed form of ``bound_loose - bound_tight``.

    Equals ``e [F_f - a (2 - e)(F_f - F_o)] / (1 - e)``, so the loose bound
    dominates iff ``F_f >= a (2 - e)(F_f - F_o)``. That always holds when
    ``F_o >= F_f / 2`` but can fail for cheap optimal depths.
    """
    if p.epsilon >= 1.0:
        raise ParameterError("bound_loose is undefined for epsilon = 1")
    e, a, fo, ff = p.epsilon, p.alpha, p.flops_lopt, p.flops_full
    return e * (ff - a * (2.0 - e) * (ff - fo)) / (1.0 - e)


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    sem: float
    trials: int


def simulate_expected_flops(p: BoundParams, trials: int, rng: np.random.Generator,
                            mode: str = "worst") -> MonteCarloResult:
    """Monte Carlo mean of per-sample cost under the sampling model.

    ``mode="worst"`` sends every non-optimal choice to depth ``L``;
    ``mode="uniform"`` draws it uniformly from ``1..L`` instead.
    """
    if trials < 1000:
        raise ParameterError(f"trials must be >= 1000, got {trials}")
    hit = rng.random(trials) < p.p_opt
    if mode == "worst":
        miss_cost = np.full(trials, p.flops_full)
    elif mode == "uniform":
        miss_cost = p.C * rng.integers(1, p.L + 1, size=trials)
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    cost = np.where(hit, p.flops_lopt, miss_cost)
    mean = float(cost.mean())
    sem = float(cost.std(ddof=1) / math.sqrt(trials))
    return MonteCarloResult(mean, sem, trials)


def simulate_sharded(p: BoundParams, trials: int, seed: int, shards: int = 4) -> MonteCarloResult:
    """Same estimate split across independent substreams, merged by counts."""
    children = np.random.SeedSequence(seed).spawn(shards)
    sizes = [trials // shards + (i < trials % shards) for i in range(shards)]
    results = [simulate_expected_flops(p, n, np.random.default_rng(s)) for n, s in zip(sizes, children)]
    total = sum(r.trials for r in results)
    mean = sum(r.mean * r.trials for r in results) / total
    # pooled variance from per-shard means and variances
    ss = sum((r.trials - 1) * (r.sem * math.sqrt(r.trials)) ** 2 + r.trials * (r.mean - mean) ** 2
             for r in results)
    sem = math.sqrt(ss / (total - 1)) / math.sqrt(total)
    return MonteCarloResult(mean, sem, total)


@dataclass(frozen=True)
class BoundReport:
    alpha: float
    epsilon: float
    p_explore: float
    mean: float
    sem: float
    bound_tight: float
    bound_loose: float
    satisfied: bool

    def to_record(self) -> dict:
        return asdict(self)


def bound_report(p: BoundParams, result: MonteCarloResult) -> BoundReport:
    loose = bound_loose(p)
    return BoundReport(p.alpha, p.epsilon, p.p_explore, result.mean, result.sem,
                       bound_tight(p), loose, result.mean <= loose)


@dataclass(frozen=True)
class LiveBoundReport:
    empirical_mean: float
    alpha: float
    epsilon: float
    p_explore: float
    flops_opt: float
    flops_full: float
    bound_tight: float
    bound_loose: float
    satisfied: bool

    def to_record(self) -> dict:
        return asdict(self)


def live_bound_from_measurements(chosen_flops, l_pred, l_opt, explored, chosen_depth,
                                 oracle_flops, flops_full: float) -> LiveBoundReport:
    """Plug measured rates into the bounds.

    ``alpha`` is the fraction with ``l_pred == l_opt``; ``epsilon`` the
    fraction of samples whose decision involved an exploratory step;
    ``p_explore`` the fraction of explored samples that still landed on
    ``l_opt``. ``F_opt`` is the mean oracle cost.
    """
    chosen_flops = np.asarray(chosen_flops, dtype=np.float64)
    if chosen_flops.size == 0:
        raise InputError("empty evaluation set")
    l_pred = np.asarray(l_pred)
    l_opt = np.asarray(l_opt)
    explored = np.asarray(explored, dtype=bool)
    alpha = float(np.mean(l_pred == l_opt))
    epsilon = float(np.mean(explored))
    landed = np.asarray(chosen_depth) == l_opt
    p_explore = float(np.mean(landed[explored])) if explored.any() else 0.0
    f_opt = float(np.mean(oracle_flops))
    params = BoundParams(alpha, min(epsilon, 1.0 - 1e-12), p_explore, f_opt, float(flops_full))
    tight = bound_tight(params)
    loose = bound_loose(params)
    mean = float(chosen_flops.mean())
    return LiveBoundReport(mean, alpha, epsilon, p_explore, f_opt, float(flops_full), tight, loose, mean <= loose)


def measure_live_bound(system, ds, trials: int = 1, rng: np.random.Generator | None = None,
                       epsilon: float | None = None) -> LiveBoundReport:
    """Check the loose bound against a trained system's own decisions.

    Every record of ``ds`` must carry ``oracle_depth``. The controller runs
    ``trials`` times over the set with exploration rate ``epsilon`` (the
    system's own rate by default) and all rollouts are pooled. ``system``
    needs ``epsilon``, ``depth_flops()`` and ``evaluate(ds, rng, epsilon)``.
    """
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    if len(ds) == 0:
        raise InputError("empty evaluation set")
    if any(r.oracle_depth is None for r in ds.records):
        raise InputError("evaluation set lacks oracle depth labels")
    rng = np.random.default_rng(0) if rng is None else rng
    eps = system.epsilon if epsilon is None else float(epsilon)
    l_opt = np.array([r.oracle_depth for r in ds.records], dtype=np.int64)
    table = np.asarray(system.depth_flops(), dtype=np.float64)
    runs = [system.evaluate(ds, rng, eps) for _ in range(trials)]

    def cat(name):
        return np.concatenate([getattr(r, name) for r in runs])

    return live_bound_from_measurements(cat("flops"), cat("l_pred"), np.tile(l_opt, trials), cat("explored"),
                                        cat("chosen_depth"), np.tile(table[l_opt - 1], trials), float(table[-1]))


@dataclass(frozen=True)
class PropagationParams:
    gamma: float
    l_delta: int
    h_norm: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if self.l_delta < 0:
            raise ParameterError(f"l_delta must be >= 0, got {self.l_delta}")
        if self.h_norm < 0:
            raise ParameterError(f"h_norm must be >= 0, got {self.h_norm}")


def propagation_bound(p: PropagationParams) -> float:
    return p.gamma ** p.l_delta * p.h_norm


def estimate_gamma(backbone, tokens: np.ndarray, rng: np.random.Generator,
                   pairs: int = 1000, scale: float = 1e-3) -> float:
    """Largest observed per-layer ratio ``|f(h + d) - f(h)| / |d|``.

    Pairs are a hidden state at a random layer input and a small random
    perturbation of it, so this is an empirical Lipschitz estimate of one
    encoder layer, not a certificate.
    """
    cfg = backbone.config
    tokens = np.asarray(tokens)
    idx = rng.integers(0, tokens.shape[0], size=pairs)
    layers = rng.integers(0, cfg.num_layers, size=pairs)
    # hidden state entering every layer, for all sampled sequences at once
    uniq = np.unique(idx)
    pos = {int(s): k for k, s in enumerate(uniq)}
    x = backbone.embed(tokens[uniq])
    inputs = []
    for i in range(cfg.num_layers):
        inputs.append(x)
        x = backbone.layer_forward(i, x, np.ones(x.shape[:2], dtype=bool), False)[0]
    noise = rng.standard_normal((pairs,) + inputs[0].shape[1:])
    worst = 0.0
    for layer in range(cfg.num_layers):
        sel = np.nonzero(layers == layer)[0]
        if sel.size == 0:
            continue
        h = inputs[layer][[pos[int(s)] for s in idx[sel]]]
        d = noise[sel] * scale * np.linalg.norm(h.reshape(sel.size, -1), axis=1)[:, None, None] \
            / np.linalg.norm(noise[sel].reshape(sel.size, -1), axis=1)[:, None, None]
        mask = np.ones(h.shape[:2], dtype=bool)
        fa = backbone.layer_forward(layer, h, mask, False)[0]
        fb = backbone.layer_forward(layer, h + d, mask, False)[0]
        ratio = np.linalg.norm((fb - fa).reshape(sel.size, -1), axis=1) / np.linalg.norm(d.reshape(sel.size, -1), axis=1)
        worst = max(worst, float(ratio.max()))
    return worst
