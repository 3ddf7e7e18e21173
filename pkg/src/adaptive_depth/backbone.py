"""Pre-LN transformer encoder with a classifier exit after every layer.

Forward and backward passes are written out by hand on batched numpy
arrays. A weight may be stored dense (``name``) or folded into two thin
factors (``name@left``, ``name@right``); every matmul goes through
:meth:`Backbone.linear` so both layouts share one code path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, ParameterError
from .tensor_math import LowRankFactors, log_softmax_t, softmax_t, truncated_svd

LN_EPS = 1e-5
GELU_K = math.sqrt(2.0 / math.pi)
FOLDABLE = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 12
    d_model: int = 64
    num_heads: int = 4
    ffn_mult: int = 4
    num_classes: int = 4
    vocab_size: int = 32
    max_len: int = 32

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ParameterError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if not 1 <= self.num_layers <= 64:
            raise ParameterError(f"num_layers must be in [1, 64], got {self.num_layers}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(config: BackboneConfig, rng: np.random.Generator, std: float = 0.02,
                emb_std: float = 1.0) -> dict[str, np.ndarray]:
    """Small-normal weights; unit-scale embeddings so positional attention is learnable early."""
    d, f = config.d_model, config.ffn_dim
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, emb_std, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, emb_std, (config.max_len, d)),
    }
    for i in range(config.num_layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = rng.normal(0.0, std, (d, d))
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "w1"] = rng.normal(0.0, std, (d, f))
        p[pre + "b1"] = np.zeros(f)
        p[pre + "w2"] = rng.normal(0.0, std, (f, d))
        p[pre + "b2"] = np.zeros(d)
        ex = f"exit{i}."
        p[ex + "ln.g"] = np.ones(d)
        p[ex + "ln.b"] = np.zeros(d)
        p[ex + "w"] = rng.normal(0.0, std, (d, config.num_classes))
        p[ex + "b"] = np.zeros(config.num_classes)
    return p


# -- primitive ops shared with the execution engine ---------------------------

def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu(u):
    u2 = u * u
    return 0.5 * u * (1.0 + np.tanh(GELU_K * u * (1.0 + 0.044715 * u2)))


def gelu_grad(u):
    u2 = u * u
    t = np.tanh(GELU_K * u * (1.0 + 0.044715 * u2))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3 * 0.044715 * u2)


def masked_mean(x, mask):
    """Mean over positions of ``x`` (B, n, d) where ``mask`` (B, n) is True."""
    w = mask.astype(np.float64)
    counts = w.sum(axis=1, keepdims=True)
    return np.einsum("bn,bnd->bd", w, x) / counts


class Backbone:
    """Transformer weights plus forward/backward passes.

    Parameters
    ----------
    config : BackboneConfig
    params : dict of name -> ndarray
        As produced by :func:`init_params` (optionally folded).
    """

    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: BackboneConfig, rng: np.random.Generator) -> "Backbone":
        return cls(config, init_params(config, rng))

    def copy(self) -> "Backbone":
        return Backbone(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def folded(self) -> bool:
        return any(k.endswith("@left") for k in self.params)

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def rank_of(self, layer: int, name: str) -> int | None:
        left = self.params.get(f"layer{layer}.{name}@left")
        return None if left is None else left.shape[1]

    # -- forward --------------------------------------------------------------

    def _check_tokens(self, tokens, mask):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] == 0:
            raise InputError("empty token sequence")
        if tokens.shape[1] > self.config.max_len:
            raise InputError(f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(f"token id outside [0, {self.config.vocab_size})")
        if mask is None:
            mask = np.ones(tokens.shape, dtype=bool)
        return tokens, np.asarray(mask, dtype=bool)

    def linear(self, x, name):
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])
        w = self.params.get(name)
        if w is not None:
            y = x2 @ w
        else:
            y = (x2 @ self.params[name + "@left"]) @ self.params[name + "@right"]
        return y.reshape(*lead, y.shape[-1])

    def _linear_backward(self, x, dy, name, grads):
        d = x.shape[-1]
        x2 = x.reshape(-1, d)
        dy2 = dy.reshape(-1, dy.shape[-1])
        w = self.params.get(name)
        if w is not None:
            grads[name] = grads.get(name, 0.0) + x2.T @ dy2
            return (dy2 @ w.T).reshape(x.shape)
        left = self.params[name + "@left"]
        right = self.params[name + "@right"]
        mid = x2 @ left
        grads[name + "@right"] = grads.get(name + "@right", 0.0) + mid.T @ dy2
        dmid = dy2 @ right.T
        grads[name + "@left"] = grads.get(name + "@left", 0.0) + x2.T @ dmid
        return (dmid @ left.T).reshape(x.shape)

    def embed(self, tokens):
        n = tokens.shape[1]
        return self.params["tok_emb"][tokens] + self.params["pos_emb"][:n]

    def layer_forward(self, i, x, mask, keep=False):
        cfg = self.config
        p = self.params
        pre = f"layer{i}."
        B, n, d = x.shape
        h, dh = cfg.num_heads, cfg.head_dim
        a, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = self.linear(a, pre + "wq").reshape(B, n, h, dh).transpose(0, 2, 1, 3)
        k = self.linear(a, pre + "wk").reshape(B, n, h, dh).transpose(0, 2, 1, 3)
        v = self.linear(a, pre + "wv").reshape(B, n, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
        scores = np.where(mask[:, None, None, :], scores, -1e30)
        probs = softmax_t(scores, 1.0)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        x_mid = x + self.linear(ctx, pre + "wo")
        f, ln2 = layer_norm(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = self.linear(f, pre + "w1") + p[pre + "b1"]
        act = gelu(u)
        out = x_mid + self.linear(act, pre + "w2") + p[pre + "b2"]
        if not keep:
            return out, None
        return out, (a, ln1, q, k, v, probs, ctx, f, ln2, u, act)

    def exit_forward(self, i, x, mask):
        p = self.params
        pooled = masked_mean(x, mask)
        z, ln = layer_norm(pooled, p[f"exit{i}.ln.g"], p[f"exit{i}.ln.b"])
        return z @ p[f"exit{i}.w"] + p[f"exit{i}.b"], (z, ln)

    def forward(self, tokens, depth: int, mask=None, keep: bool = False):
        """Run ``depth`` layers and return ``(logits_per_exit, hidden, cache)``.

        ``logits_per_exit[i]`` has shape (B, num_classes) and comes from the
        exit head attached to layer ``i + 1``.
        """
        if not 1 <= depth <= self.config.num_layers:
            raise ParameterError(f"depth must be in [1, {self.config.num_layers}], got {depth}")
        tokens, mask = self._check_tokens(tokens, mask)
        x = self.embed(tokens)
        logits = []
        layer_caches = []
        for i in range(depth):
            x_in = x
            x, lc = self.layer_forward(i, x, mask, keep=keep)
            lg, ec = self.exit_forward(i, x, mask)
            logits.append(lg)
            if keep:
                layer_caches.append((x_in, lc, ec))
        cache = (tokens, mask, layer_caches) if keep else None
        return logits, x, cache

    # -- backward -------------------------------------------------------------

    def backward(self, cache, dlogits) -> dict[str, np.ndarray]:
        """Gradients of a loss given its gradient w.r.t. each exit's logits.

        ``dlogits`` may contain ``None`` for exits that do not enter the loss.
        """
        cfg = self.config
        p = self.params
        tokens, mask, layer_caches = cache
        grads: dict[str, np.ndarray] = {}
        B, n = tokens.shape
        d, h, dh = cfg.d_model, cfg.num_heads, cfg.head_dim
        w = mask.astype(np.float64)
        counts = w.sum(axis=1, keepdims=True)
        dx = np.zeros((B, n, d))
        for i in reversed(range(len(layer_caches))):
            x_in, lc, ec = layer_caches[i]
            pre = f"layer{i}."
            if i < len(dlogits) and dlogits[i] is not None:
                dl = dlogits[i]
                z, ln = ec
                ex = f"exit{i}."
                grads[ex + "w"] = z.T @ dl
                grads[ex + "b"] = dl.sum(axis=0)
                dz = dl @ p[ex + "w"].T
                dpooled, dg, db = layer_norm_backward(dz, ln)
                grads[ex + "ln.g"] = dg
                grads[ex + "ln.b"] = db
                dx = dx + (w / counts)[:, :, None] * dpooled[:, None, :]
            a, ln1, q, k, v, probs, ctx, f, ln2, u, act = lc
            # FFN block
            grads[pre + "b2"] = dx.reshape(-1, d).sum(axis=0)
            dact = self._linear_backward(act, dx, pre + "w2", grads)
            du = dact * gelu_grad(u)
            grads[pre + "b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
            df = self._linear_backward(f, du, pre + "w1", grads)
            dxm, dg, db = layer_norm_backward(df, ln2)
            grads[pre + "ln2.g"] = dg
            grads[pre + "ln2.b"] = db
            dx_mid = dx + dxm
            # attention block
            dctx = self._linear_backward(ctx, dx_mid, pre + "wo", grads)
            dctx = dctx.reshape(B, n, h, dh).transpose(0, 2, 1, 3)
            dprobs = dctx @ v.transpose(0, 1, 3, 2)
            dv = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dscores /= math.sqrt(dh)
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            da = self._linear_backward(a, dq.transpose(0, 2, 1, 3).reshape(B, n, d), pre + "wq", grads)
            da = da + self._linear_backward(a, dk.transpose(0, 2, 1, 3).reshape(B, n, d), pre + "wk", grads)
            da = da + self._linear_backward(a, dv.transpose(0, 2, 1, 3).reshape(B, n, d), pre + "wv", grads)
            dxa, dg, db = layer_norm_backward(da, ln1)
            grads[pre + "ln1.g"] = dg
            grads[pre + "ln1.b"] = db
            dx = dx_mid + dxa
        demb = np.zeros_like(p["tok_emb"])
        np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, d))
        grads["tok_emb"] = demb
        dpos = np.zeros_like(p["pos_emb"])
        dpos[:n] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
        return grads


def forward_to_depth(tokens, backbone: Backbone, depth: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Exit logits for exits ``1..depth`` of a single sequence, plus the final hidden state."""
    logits, hidden, _ = backbone.forward(tokens, depth)
    return [lg[0] for lg in logits], hidden[0]


def task_loss(logits, labels, teacher_logits=None, kd_weight: float = 0.5, temperature: float = 2.0):
    """Cross-entropy blended with temperature-scaled distillation.

    ``loss = (1 - w) * CE + w * T**2 * KL(teacher_T || student_T)``, averaged
    over the batch. Returns ``(loss, dloss/dlogits)``.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if not 0.0 <= kd_weight <= 1.0:
        raise ParameterError(f"kd_weight must be in [0, 1], got {kd_weight}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    B, C = logits.shape
    if labels.min() < 0 or labels.max() >= C:
        raise InputError(f"label outside [0, {C})")
    logp = log_softmax_t(logits, 1.0)
    ce = -logp[np.arange(B), labels]
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    loss = (1.0 - kd_weight) * ce
    grad *= 1.0 - kd_weight
    if teacher_logits is not None and kd_weight > 0:
        teacher_logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
        log_pt = log_softmax_t(teacher_logits, temperature)
        log_ps = log_softmax_t(logits, temperature)
        pt = np.exp(log_pt)
        kl = (pt * (log_pt - log_ps)).sum(axis=1)
        loss = loss + kd_weight * temperature ** 2 * kl
        grad = grad + kd_weight * temperature * (np.exp(log_ps) - pt)
    return float(loss.mean()), grad / B


def cross_entropy(logits, labels) -> np.ndarray:
    """Per-sample cross-entropy."""
    logits = np.atleast_2d(logits)
    logp = log_softmax_t(logits, 1.0)
    return -logp[np.arange(logits.shape[0]), np.asarray(labels)]


def fold_layers(backbone: Backbone, energy_ratio: float = 0.9) -> tuple[Backbone, dict[str, LowRankFactors]]:
    """Replace every attention/FFN weight by truncated-SVD factors.

    Factors are kept even when they do not save parameters; such entries
    report ``compressive == False`` in the returned mapping.
    """
    if backbone.folded:
        raise ParameterError("backbone is already folded")
    params = {}
    factors: dict[str, LowRankFactors] = {}
    for name, value in backbone.params.items():
        short = name.split(".", 1)[-1]
        if name.startswith("layer") and short in FOLDABLE:
            fac = truncated_svd(value, energy_ratio)
            factors[name] = fac
            params[name + "@left"] = fac.left
            params[name + "@right"] = fac.right
        else:
            params[name] = value.copy()
    return Backbone(backbone.config, params), factors


def layer_flops(config: BackboneConfig, seq_len: int, ranks: dict[str, int] | None = None) -> int:
    """Multiply-add count (x2) of one encoder layer on ``seq_len`` tokens.

    Dense: attention ``8 n d^2 + 4 n^2 d``, FFN ``16 n d^2``. A folded
    ``m x k`` weight of rank ``r`` costs ``2 n r (m + k)`` instead of ``2 n m k``.
    """
    d, f, n = config.d_model, config.ffn_dim, seq_len
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, f), "w2": (f, d)}
    total = 4 * n * n * d
    for name, (m, k) in shapes.items():
        r = None if ranks is None else ranks.get(name)
        total += 2 * n * (m * k if r is None else r * (m + k))
    return total


def exit_head_flops(config: BackboneConfig) -> int:
    return 2 * config.d_model * config.num_classes


def flops_of_depth(config: BackboneConfig, depth: int, seq_len: int | None = None,
                   ranks: list[dict[str, int]] | None = None) -> int:
    """FLOPs of running ``depth`` layers plus one exit head.

    ``ranks[i]`` gives folded ranks for layer ``i``; dense layers are
    identical so the count is ``C * depth + exit_head``.
    """
    if not 1 <= depth <= config.num_layers:
        raise ParameterError(f"depth must be in [1, {config.num_layers}], got {depth}")
    n = config.max_len if seq_len is None else seq_len
    if ranks is None:
        return layer_flops(config, n) * depth + exit_head_flops(config)
    return sum(layer_flops(config, n, ranks[i]) for i in range(depth)) + exit_head_flops(config)


def folded_ranks(backbone: Backbone) -> list[dict[str, int]] | None:
    if not backbone.folded:
        return None
    out = []
    for i in range(backbone.config.num_layers):
        out.append({name: r for name in FOLDABLE if (r := backbone.rank_of(i, name)) is not None})
    return out
