"""Precompiled per-depth execution plans and a probability-driven buffer pool.

A plan is a flat tuple of op descriptors whose shapes, weights and buffer
slots are resolved at compile time; :func:`execute` walks it in a tight
loop. Sequences are padded to the plan's ``max_len`` and masked, so buffer
sizes are static. Buffers live in a slab checked out of a
:class:`BufferPool`; slab counts per depth follow an EMA over observed depths.
"""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import LN_EPS, Backbone, flops_of_depth, folded_ranks, gelu
from .errors import ConfigurationError, InputError, ParameterError

FLOAT_BYTES = 8
DEFAULT_CAPACITY = 16 * 1024 * 1024

# op kinds
EMBED = "embed"
LN_QKV = "ln_qkv"            # fused layernorm + three projections
LN = "ln"
QKV = "qkv"
ATTENTION = "attention"
PROJ_RESIDUAL = "proj_residual"
LN_FFN_IN = "ln_ffn_in"      # fused layernorm + W1 + bias + GELU
FFN_IN = "ffn_in"
FFN_OUT_RESIDUAL = "ffn_out_residual"
EXIT = "exit"


@dataclass(frozen=True)
class OpDesc:
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    weights: tuple = ()
    layer: int = -1


@dataclass(frozen=True)
class ExecutionPlan:
    depth: int
    ops: tuple[OpDesc, ...]
    buffers: tuple[tuple[str, tuple[int, ...]], ...]
    flops: int
    max_len: int
    num_heads: int
    num_classes: int

    @property
    def op_count(self) -> int:
        return len(self.ops)

    @property
    def buffer_offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        out = {}
        offset = 0
        for name, shape in self.buffers:
            out[name] = (offset, shape)
            offset += int(np.prod(shape))
        return out

    @property
    def total_bytes(self) -> int:
        return FLOAT_BYTES * sum(int(np.prod(s)) for _, s in self.buffers)


def _weights(params, name):
    w = params.get(name)
    if w is not None:
        return (w,)
    return (params[name + "@left"], params[name + "@right"])


def compile_plan(backbone: Backbone, depth: int, fuse: bool = True) -> ExecutionPlan:
    cfg = backbone.config
    if not 1 <= depth <= cfg.num_layers:
        raise ParameterError(f"depth must be in [1, {cfg.num_layers}], got {depth}")
    p = backbone.params
    n, d, f = cfg.max_len, cfg.d_model, cfg.ffn_dim
    buffers = (
        ("x", (n, d)), ("x_mid", (n, d)), ("a", (n, d)),
        ("q", (n, d)), ("k", (n, d)), ("v", (n, d)), ("ctx", (n, d)),
        ("scores", (cfg.num_heads, n, n)), ("act", (n, f)),
        ("logits", (depth, cfg.num_classes)),
    )
    ops = [OpDesc(EMBED, (), ("x",), (p["tok_emb"], p["pos_emb"]))]
    for i in range(depth):
        pre = f"layer{i}."
        ln1 = (p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = (_weights(p, pre + "wq"), _weights(p, pre + "wk"), _weights(p, pre + "wv"))
        if fuse:
            ops.append(OpDesc(LN_QKV, ("x",), ("q", "k", "v"), ln1 + qkv, i))
        else:
            ops.append(OpDesc(LN, ("x",), ("a",), ln1, i))
            ops.append(OpDesc(QKV, ("a",), ("q", "k", "v"), qkv, i))
        ops.append(OpDesc(ATTENTION, ("q", "k", "v"), ("ctx", "scores"), (), i))
        ops.append(OpDesc(PROJ_RESIDUAL, ("x", "ctx"), ("x_mid",), (_weights(p, pre + "wo"),), i))
        ln2 = (p[pre + "ln2.g"], p[pre + "ln2.b"])
        ffn_in = (_weights(p, pre + "w1"), p[pre + "b1"])
        if fuse:
            ops.append(OpDesc(LN_FFN_IN, ("x_mid",), ("act",), ln2 + ffn_in, i))
        else:
            ops.append(OpDesc(LN, ("x_mid",), ("a",), ln2, i))
            ops.append(OpDesc(FFN_IN, ("a",), ("act",), ffn_in, i))
        ops.append(OpDesc(FFN_OUT_RESIDUAL, ("x_mid", "act"), ("x",), (_weights(p, pre + "w2"), p[pre + "b2"]), i))
        ex = f"exit{i}."
        ops.append(OpDesc(EXIT, ("x",), ("logits",), (p[ex + "ln.g"], p[ex + "ln.b"], p[ex + "w"], p[ex + "b"]), i))
    flops = flops_of_depth(cfg, depth, seq_len=n, ranks=folded_ranks(backbone))
    return ExecutionPlan(depth, tuple(ops), buffers, flops, n, cfg.num_heads, cfg.num_classes)


def compile_plans(backbone: Backbone, fuse: bool = True) -> list[ExecutionPlan]:
    """One plan per depth ``1..L``."""
    return [compile_plan(backbone, l, fuse) for l in range(1, backbone.config.num_layers + 1)]


# -- interpreter ---------------------------------------------------------------

def _ln(x, g, b, out):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    np.multiply(xc * (1.0 / np.sqrt(var + LN_EPS)), g, out=out)
    out += b
    return out


def _mm(x, w, out):
    if len(w) == 1:
        return np.matmul(x, w[0], out=out)
    return np.matmul(x @ w[0], w[1], out=out)


def _bind(plan: ExecutionPlan, arena: np.ndarray) -> dict[str, np.ndarray]:
    views = {}
    for name, (offset, shape) in plan.buffer_offsets.items():
        size = int(np.prod(shape))
        views[name] = arena[offset:offset + size].reshape(shape)
    return views


def run_plan(plan: ExecutionPlan, tokens, arena: np.ndarray) -> np.ndarray:
    """Interpret ``plan`` on one token sequence using ``arena`` for every buffer."""
    tokens = np.asarray(tokens)
    n_tok = tokens.shape[0]
    if n_tok == 0:
        raise InputError("empty token sequence")
    if n_tok > plan.max_len:
        raise InputError(f"sequence length {n_tok} exceeds plan max_len {plan.max_len}")
    n = plan.max_len
    padded = np.zeros(n, dtype=np.int64)
    padded[:n_tok] = tokens
    valid = np.arange(n) < n_tok
    key_bias = np.where(valid, 0.0, -1e30)
    buf = _bind(plan, arena)
    h = plan.num_heads
    for op in plan.ops:
        kind = op.kind
        if kind == EMBED:
            tok, pos = op.weights
            if tokens.min() < 0 or tokens.max() >= tok.shape[0]:
                raise InputError(f"token id outside [0, {tok.shape[0]})")
            np.add(tok[padded], pos[:n], out=buf["x"])
        elif kind == LN_QKV:
            g, b, wq, wk, wv = op.weights
            a = _ln(buf["x"], g, b, buf["a"])
            _mm(a, wq, buf["q"])
            _mm(a, wk, buf["k"])
            _mm(a, wv, buf["v"])
        elif kind == LN:
            g, b = op.weights
            _ln(buf[op.inputs[0]], g, b, buf[op.outputs[0]])
        elif kind == QKV:
            wq, wk, wv = op.weights
            a = buf["a"]
            _mm(a, wq, buf["q"])
            _mm(a, wk, buf["k"])
            _mm(a, wv, buf["v"])
        elif kind == ATTENTION:
            d = buf["q"].shape[1]
            dh = d // h
            q = buf["q"].reshape(n, h, dh).transpose(1, 0, 2)
            k = buf["k"].reshape(n, h, dh).transpose(1, 0, 2)
            v = buf["v"].reshape(n, h, dh).transpose(1, 0, 2)
            s = buf["scores"]
            np.matmul(q, k.transpose(0, 2, 1), out=s)
            s /= math.sqrt(dh)
            s += key_bias
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            buf["ctx"].reshape(n, h, dh)[...] = (s @ v).transpose(1, 0, 2)
        elif kind == PROJ_RESIDUAL:
            (wo,) = op.weights
            _mm(buf["ctx"], wo, buf["x_mid"])
            buf["x_mid"] += buf["x"]
        elif kind in (LN_FFN_IN, FFN_IN):
            if kind == LN_FFN_IN:
                g, b, w1, b1 = op.weights
                a = _ln(buf["x_mid"], g, b, buf["a"])
            else:
                w1, b1 = op.weights
                a = buf["a"]
            act = buf["act"]
            _mm(a, w1, act)
            act += b1
            act[...] = gelu(act)
        elif kind == FFN_OUT_RESIDUAL:
            w2, b2 = op.weights
            x = buf["x"]
            _mm(buf["act"], w2, x)
            x += b2
            x += buf["x_mid"]
        elif kind == EXIT:
            g, b, w, bias = op.weights
            pooled = buf["x"][valid].mean(axis=0)
            mu = pooled.mean()
            pc = pooled - mu
            z = pc / np.sqrt((pc * pc).mean() + LN_EPS) * g + b
            buf["logits"][op.layer] = z @ w + bias
        else:  # pragma: no cover - descriptors are produced by compile_plan only
            raise ConfigurationError(f"unknown op kind {kind}")
    return buf["logits"].copy()


# -- depth statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class DepthDistribution:
    probs: np.ndarray
    ema_weight: float = 0.9
    updates: int = 0

    @classmethod
    def uniform(cls, num_layers: int, ema_weight: float = 0.9) -> "DepthDistribution":
        return cls(np.full(num_layers, 1.0 / num_layers), ema_weight)

    @classmethod
    def onehot(cls, num_layers: int, depth: int, ema_weight: float = 0.9) -> "DepthDistribution":
        p = np.zeros(num_layers)
        p[depth - 1] = 1.0
        return cls(p, ema_weight)

    @property
    def num_layers(self) -> int:
        return self.probs.size


def update_distribution(dist: DepthDistribution, observed_depth: int) -> DepthDistribution:
    """``probs <- w * probs + (1 - w) * onehot(observed_depth)``."""
    L = dist.num_layers
    if not 1 <= observed_depth <= L:
        raise ParameterError(f"observed depth {observed_depth} outside [1, {L}]")
    w = dist.ema_weight
    probs = w * dist.probs
    probs[observed_depth - 1] += 1.0 - w
    return DepthDistribution(probs, w, dist.updates + 1)


# -- pool --------------------------------------------------------------------------

@dataclass
class BufferPool:
    """Arena of pre-allocated slabs, each big enough for one plan's buffers.

    A request at depth ``l`` takes the smallest free slab of depth ``>= l``
    (deeper plans hold a superset of buffers). Otherwise it is a miss and
    gets a fresh, unpooled allocation. ``concurrency`` is the number of
    executions expected in flight, used when reserving slabs.
    """

    capacity_bytes: int
    plan_bytes: tuple[int, ...]
    concurrency: int = 1
    free: dict[int, list[np.ndarray]] = field(default_factory=dict)
    reserved: dict[int, int] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def for_plans(cls, plans: list[ExecutionPlan], capacity_bytes: int = DEFAULT_CAPACITY,
                  concurrency: int = 1) -> "BufferPool":
        return cls(int(capacity_bytes), tuple(p.total_bytes for p in plans), concurrency)

    @property
    def reserved_bytes(self) -> int:
        return sum(self.plan_bytes[l - 1] * n for l, n in self.reserved.items())

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else float("nan")

    def checkout(self, depth: int) -> tuple[np.ndarray, bool]:
        with self._lock:
            for l in range(depth, len(self.plan_bytes) + 1):
                slabs = self.free.get(l)
                if slabs:
                    self.hits += 1
                    return slabs.pop(), True
            self.misses += 1
        return np.empty(self.plan_bytes[depth - 1] // FLOAT_BYTES), False

    def release(self, arena: np.ndarray, pooled: bool) -> None:
        if not pooled:
            return
        slab_depth = self._depth_of_size(arena.size * FLOAT_BYTES)
        with self._lock:
            self.free.setdefault(slab_depth, []).append(arena)

    def _depth_of_size(self, nbytes: int) -> int:
        for l, b in enumerate(self.plan_bytes, start=1):
            if b == nbytes:
                return l
        raise ConfigurationError(f"slab of {nbytes} bytes does not match any plan")


def _binomial_quantile(n: int, p: float, q: float) -> int:
    """Smallest ``k`` with ``P(Binomial(n, p) <= k) >= q``."""
    cdf = 0.0
    for k in range(n + 1):
        cdf += math.comb(n, k) * p ** k * (1.0 - p) ** (n - k)
        if cdf >= q - 1e-12:
            return k
    return n


COVERAGE_LEVELS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999, 0.9999, 1.0)


def slab_counts(plan_bytes, probs, capacity_bytes: int, concurrency: int = 1) -> dict[int, int]:
    """Number of slabs per depth for ``concurrency`` overlapping executions.

    A slab of depth ``l`` serves any request at depth ``<= l``, so what
    matters is tail coverage: for each ``l`` the slabs at depth ``>= l``
    should outnumber the in-flight requests needing depth ``>= l``, a
    Binomial(concurrency, P(D >= l)) count. The highest coverage level whose
    layout fits in capacity is used, at least one slab of depth ``L`` is
    always kept, and leftover bytes buy further depth-``L`` slabs.
    """
    L = len(plan_bytes)
    if capacity_bytes < max(plan_bytes):
        raise ConfigurationError(
            f"pool capacity {capacity_bytes} B is below the largest plan ({max(plan_bytes)} B)")
    if concurrency < 1:
        raise ParameterError(f"concurrency must be >= 1, got {concurrency}")
    probs = np.asarray(probs, dtype=np.float64)
    tail = np.cumsum(probs[::-1])[::-1]
    best = {L: 1}
    for level in COVERAGE_LEVELS:
        need = [_binomial_quantile(concurrency, min(float(t), 1.0), level) for t in tail] + [0]
        need[L - 1] = max(need[L - 1], 1)
        for l in range(L - 2, -1, -1):
            need[l] = max(need[l], need[l + 1])
        counts = {l + 1: need[l] - need[l + 1] for l in range(L) if need[l] > need[l + 1]}
        if sum(plan_bytes[l - 1] * n for l, n in counts.items()) <= capacity_bytes:
            best = counts
    spare = capacity_bytes - sum(plan_bytes[l - 1] * n for l, n in best.items())
    best[L] = best.get(L, 0) + spare // plan_bytes[L - 1]
    return best


def rebalance_pool(pool: BufferPool, dist: DepthDistribution) -> BufferPool:
    """Fresh pool with slabs re-reserved from ``dist``; counters carry over."""
    counts = slab_counts(pool.plan_bytes, dist.probs, pool.capacity_bytes, pool.concurrency)
    out = BufferPool(pool.capacity_bytes, pool.plan_bytes, pool.concurrency, hits=pool.hits, misses=pool.misses)
    for l, k in counts.items():
        out.reserved[l] = k
        out.free[l] = [np.zeros(pool.plan_bytes[l - 1] // FLOAT_BYTES) for _ in range(k)]
    return out


def expected_working_set(plans: list[ExecutionPlan], dist: DepthDistribution, concurrency: int = 1) -> float:
    return concurrency * float(np.dot(dist.probs, [p.total_bytes for p in plans]))


# -- execution ----------------------------------------------------------------------

@dataclass(frozen=True)
class ExecutionMetrics:
    depth: int
    flops: int
    peak_bytes: int
    pool_hit: bool
    wall_time_ns: int

    def to_record(self) -> dict:
        return {"depth": self.depth, "flops": self.flops, "peak_bytes": self.peak_bytes,
                "pool_hit": self.pool_hit, "wall_time_ns": self.wall_time_ns}


@dataclass(frozen=True)
class ExecutionResult:
    logits: np.ndarray          # (depth, num_classes), one row per exit
    metrics: ExecutionMetrics

    @property
    def final_logits(self) -> np.ndarray:
        return self.logits[-1]


def execute(plan: ExecutionPlan, tokens, pool: BufferPool | None = None, hold: bool = False):
    """Run ``plan`` on ``tokens`` with buffers from ``pool``.

    With ``hold=True`` the slab is not returned; the caller gets
    ``(result, release)`` and must call ``release()`` later. This models
    executions that overlap in time.
    """
    start = time.perf_counter_ns()
    if pool is None:
        arena, pooled = np.empty(plan.total_bytes // FLOAT_BYTES), False
    else:
        arena, pooled = pool.checkout(plan.depth)
    logits = run_plan(plan, tokens, arena)
    elapsed = time.perf_counter_ns() - start
    metrics = ExecutionMetrics(plan.depth, plan.flops, plan.total_bytes, pool is not None and pooled, elapsed)
    result = ExecutionResult(logits, metrics)

    def release():
        if pool is not None:
            pool.release(arena, pooled)

    if hold:
        return result, release
    release()
    return result


def simulate_pool(plans: list[ExecutionPlan], pool: BufferPool, depths, tokens, concurrency: int = 4) -> float:
    """Hit rate when ``concurrency`` executions are in flight at once.

    Each execution keeps its slab until ``concurrency`` later executions
    have started.
    """
    inflight = []
    h0, m0 = pool.hits, pool.misses
    for depth in depths:
        _, release = execute(plans[depth - 1], tokens, pool, hold=True)
        inflight.append(release)
        if len(inflight) >= concurrency:
            inflight.pop(0)()
    for release in inflight:
        release()
    hits = pool.hits - h0
    return hits / max(1, hits + pool.misses - m0)


def switch_overhead_ratio(plans: list[ExecutionPlan], depths, tokens, repeats: int = 5, block: int = 50) -> float:
    """Wall time of a random-depth order over the same depths sorted.

    Both orders are cut into blocks of ``block`` executions and the blocks
    are run alternately, so drift in machine speed hits both orders alike.
    Returns the ratio of summed times over ``repeats`` passes.
    """
    depths = list(depths)
    ordered = sorted(depths)
    totals = {"random": 0.0, "sorted": 0.0}
    arena = np.empty(plans[-1].total_bytes // FLOAT_BYTES)
    for r in range(repeats):
        for s in range(0, len(depths), block):
            # alternate which order goes first in each pass
            pair = (("random", depths), ("sorted", ordered))
            for name, seq in (pair if r % 2 == 0 else pair[::-1]):
                t0 = time.perf_counter()
                for d in seq[s:s + block]:
                    run_plan(plans[d - 1], tokens, arena[: plans[d - 1].total_bytes // FLOAT_BYTES])
                totals[name] += time.perf_counter() - t0
    return totals["random"] / totals["sorted"]
