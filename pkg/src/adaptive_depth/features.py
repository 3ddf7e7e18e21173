"""Multi-scale text features: embedding, then three conv stages.

Each stage is a kernel-3 same-padded 1-D convolution followed by ReLU; the
second and third stages first halve the length with a stride-2 mean pool
(ceil division, so a trailing odd position is averaged alone). Channel
widths are 64, 128 and 256 on a 128-dim embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

EMBED_DIM = 128
CHANNELS = (64, 128, 256)
KERNEL = 3


@dataclass(frozen=True)
class ExtractorParams:
    embedding: np.ndarray
    conv_w: tuple[np.ndarray, np.ndarray, np.ndarray]  # each (KERNEL, c_in, c_out)
    conv_b: tuple[np.ndarray, np.ndarray, np.ndarray]
    max_len: int = 256

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @classmethod
    def random(cls, vocab_size: int, rng: np.random.Generator, max_len: int = 256) -> "ExtractorParams":
        emb = rng.normal(0.0, 1.0, (vocab_size, EMBED_DIM))
        ws, bs = [], []
        c_in = EMBED_DIM
        for c_out in CHANNELS:
            ws.append(rng.normal(0.0, np.sqrt(2.0 / (KERNEL * c_in)), (KERNEL, c_in, c_out)))
            bs.append(np.zeros(c_out))
            c_in = c_out
        return cls(emb, tuple(ws), tuple(bs), max_len)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}.w"] = w
            out[f"conv{i}.b"] = b
        return out

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray], max_len: int = 256) -> "ExtractorParams":
        return cls(t["embedding"], tuple(t[f"conv{i}.w"] for i in range(3)),
                   tuple(t[f"conv{i}.b"] for i in range(3)), max_len)


@dataclass(frozen=True)
class MultiScaleFeatures:
    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray

    @staticmethod
    def _pool(h):
        return np.concatenate([h.mean(axis=-2), h.max(axis=-2)], axis=-1)

    @property
    def pooled1(self) -> np.ndarray:
        return self._pool(self.h1)

    @property
    def pooled2(self) -> np.ndarray:
        return self._pool(self.h2)

    @property
    def pooled3(self) -> np.ndarray:
        return self._pool(self.h3)


def conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel-3 stride-1 convolution with one zero of padding per side.

    ``x`` is (..., n, c_in); returns (..., n, c_out).
    """
    n = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (0, 0)]
    xp = np.pad(x, pad)
    out = b + xp[..., 0:n, :] @ w[0]
    out = out + xp[..., 1:n + 1, :] @ w[1]
    out = out + xp[..., 2:n + 2, :] @ w[2]
    return out


def mean_pool2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-2]
    if n % 2:
        tail = x[..., -1:, :]
        body = x[..., :-1, :]
    else:
        tail = None
        body = x
    shp = body.shape[:-2] + (body.shape[-2] // 2, 2, body.shape[-1])
    out = body.reshape(shp).mean(axis=-2)
    if tail is not None:
        out = np.concatenate([out, tail], axis=-2)
    return out


def extract_from_embeddings(e: np.ndarray, params: ExtractorParams) -> MultiScaleFeatures:
    h1 = np.maximum(conv_same(e, params.conv_w[0], params.conv_b[0]), 0.0)
    h2 = np.maximum(conv_same(mean_pool2(h1), params.conv_w[1], params.conv_b[1]), 0.0)
    h3 = np.maximum(conv_same(mean_pool2(h2), params.conv_w[2], params.conv_b[2]), 0.0)
    return MultiScaleFeatures(h1, h2, h3)


def extract(tokens, params: ExtractorParams) -> MultiScaleFeatures:
    """Features for one sequence (1-D) or an equal-length batch (2-D)."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 0 or tokens.shape[-1] == 0:
        raise InputError("empty token sequence")
    if tokens.shape[-1] > params.max_len:
        raise InputError(f"sequence length {tokens.shape[-1]} exceeds max {params.max_len}")
    if tokens.min() < 0 or tokens.max() >= params.vocab_size:
        raise InputError(f"token id outside [0, {params.vocab_size})")
    return extract_from_embeddings(params.embedding[tokens], params)


def stage_operator_norms(params: ExtractorParams) -> list[float]:
    """Upper bounds on the 2-norm gain of each conv stage (sum of tap spectral norms)."""
    return [float(sum(np.linalg.norm(w[k], 2) for k in range(KERNEL))) for w in params.conv_w]
