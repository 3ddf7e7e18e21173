"""Synthetic mixed-difficulty classification data and its file format.

Token layout (vocab >= 8): ids ``0..C-1`` carry class values, ``C`` and
``C+1`` are pointer markers, the remaining ids are filler.

* easy: the label is the class token that occurs most often (bag-of-words).
* medium: the label is the class token right after the first marker; every
  class token appears exactly once so counts carry no signal.
* hard: both markers occur; the label is the class token after the second
  marker while the first marker is followed by a decoy class. Every class
  token appears exactly once, so counts carry no signal and the model must
  tell the two markers apart.

Files are UTF-8 JSON lines: one header object, then one object per record.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParameterError

FORMAT_NAME = "adaptive-depth-dataset"
FORMAT_VERSION = 1
DIFFICULTIES = ("easy", "medium", "hard")


@dataclass
class DatasetRecord:
    tokens: list[int]
    label: int
    difficulty: str
    oracle_depth: int | None = None

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "label": self.label, "difficulty": self.difficulty,
                "oracle_depth": self.oracle_depth}


@dataclass
class Dataset:
    records: list[DatasetRecord]
    header: dict

    def __len__(self):
        return len(self.records)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([r.tokens for r in self.records], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def difficulties(self) -> np.ndarray:
        return np.array([r.difficulty for r in self.records])

    def subset(self, idx) -> "Dataset":
        return Dataset([self.records[i] for i in idx], dict(self.header))

    def split(self, val_fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        order = rng.permutation(len(self.records))
        n_val = int(round(val_fraction * len(order)))
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))


def _place_pair(rng, seq, marker, value, free):
    """Put ``marker, value`` in two adjacent free slots."""
    starts = [i for i in sorted(free) if i + 1 in free]
    i = int(rng.choice(starts))
    seq[i], seq[i + 1] = marker, value
    free.discard(i)
    free.discard(i + 1)


def _fill(rng, seq, tokens, free):
    slots = rng.permutation(sorted(free))[: len(tokens)]
    for s, t in zip(slots, tokens):
        seq[int(s)] = t
        free.discard(int(s))


def make_sample(rng: np.random.Generator, difficulty: str, length: int, vocab: int, classes: int):
    filler_lo = classes + 2
    if vocab <= filler_lo:
        raise ParameterError(f"vocab {vocab} too small for {classes} classes")
    m1, m2 = classes, classes + 1
    seq = [-1] * length
    free = set(range(length))
    if difficulty == "easy":
        label = int(rng.integers(classes))
        others = [c for c in range(classes) if c != label]
        n_distract = int(rng.integers(0, min(2, classes - 1) + 1))
        distract = [int(c) for c in rng.permutation(others)[:n_distract]]
        _fill(rng, seq, [label] * 3 + distract, free)
    elif difficulty == "medium":
        label = int(rng.integers(classes))
        _place_pair(rng, seq, m1, label, free)
        _fill(rng, seq, [c for c in range(classes) if c != label], free)
    elif difficulty == "hard":
        # the second marker points at the label; the first points at a decoy
        label = int(rng.integers(classes))
        decoy = int(rng.choice([c for c in range(classes) if c != label]))
        _place_pair(rng, seq, m2, label, free)
        _place_pair(rng, seq, m1, decoy, free)
        _fill(rng, seq, [c for c in range(classes) if c not in (label, decoy)], free)
    else:
        raise ParameterError(f"unknown difficulty {difficulty!r}")
    for i in sorted(free):
        seq[i] = int(rng.integers(filler_lo, vocab))
    return seq, label


def bag_of_words(tokens: np.ndarray, vocab: int) -> np.ndarray:
    out = np.zeros((tokens.shape[0], vocab))
    for j in range(tokens.shape[1]):
        out[np.arange(tokens.shape[0]), tokens[:, j]] += 1.0
    return out


def probe_accuracy(tokens: np.ndarray, labels: np.ndarray, vocab: int, classes: int,
                   steps: int = 500, lr: float = 20.0) -> float:
    """Held-out accuracy of a softmax-regression probe on token counts.

    Trains on the first half, scores the second half.
    """
    x = bag_of_words(tokens, vocab)
    x = np.hstack([x / tokens.shape[1], np.ones((x.shape[0], 1))])
    half = x.shape[0] // 2
    xtr, ytr, xte, yte = x[:half], labels[:half], x[half:], labels[half:]
    w = np.zeros((x.shape[1], classes))
    onehot = np.eye(classes)[ytr]
    for _ in range(steps):
        z = xtr @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * xtr.T @ (p - onehot) / max(half, 1)
    return float(np.mean(np.argmax(xte @ w, axis=1) == yte))


def generate(n: int, seed: int, vocab: int = 32, classes: int = 4, easy: float = 0.6,
             medium: float | None = None, length: int = 12) -> Dataset:
    """Seed-deterministic dataset with exactly ``round(easy * n)`` easy records.

    The remainder is split evenly between medium and hard unless ``medium``
    is given.
    """
    if n < 100:
        raise ParameterError(f"n must be at least 100, got {n}")
    if medium is None:
        medium = (1.0 - easy) / 2.0
    if easy < 0 or medium < 0 or easy + medium > 1.0 + 1e-12:
        raise ParameterError(f"invalid difficulty fractions easy={easy} medium={medium}")
    if length < 6:
        raise ParameterError("length must be at least 6")
    rng = np.random.default_rng(seed)
    n_easy = int(round(easy * n))
    n_medium = int(round(medium * n))
    n_medium = min(n_medium, n - n_easy)
    kinds = ["easy"] * n_easy + ["medium"] * n_medium + ["hard"] * (n - n_easy - n_medium)
    kinds = [kinds[i] for i in rng.permutation(n)]
    records = []
    for kind in kinds:
        seq, label = make_sample(rng, kind, length, vocab, classes)
        records.append(DatasetRecord(seq, label, kind))
    ds = Dataset(records, {})
    probes = {}
    for kind in DIFFICULTIES:
        idx = [i for i, r in enumerate(records) if r.difficulty == kind]
        if len(idx) >= 20:
            sub = ds.subset(idx)
            probes[kind] = round(probe_accuracy(sub.tokens, sub.labels, vocab, classes), 6)
    ds.header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": seed,
        "n": n,
        "vocab": vocab,
        "classes": classes,
        "length": length,
        "fractions": {"easy": easy, "medium": medium, "hard": round(1.0 - easy - medium, 12)},
        "counts": {k: kinds.count(k) for k in DIFFICULTIES},
        "probe_accuracy": probes,
    }
    return ds


def save(ds: Dataset, path) -> None:
    path = Path(path)
    lines = [json.dumps(ds.header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in ds.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME:
            raise InputError(f"{path} is not a {FORMAT_NAME} file")
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            obj = json.loads(line)
            tokens = [int(t) for t in obj["tokens"]]
            if any(t < 0 or t >= header["vocab"] for t in tokens):
                raise InputError(f"{path}:{lineno}: token outside vocab")
            records.append(DatasetRecord(tokens, int(obj["label"]), obj["difficulty"], obj.get("oracle_depth")))
    return Dataset(records, header)
