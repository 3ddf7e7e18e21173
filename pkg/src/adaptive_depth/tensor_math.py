"""Dense float64 linear algebra shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here add the shape/parameter checks the rest of the package relies on, an
in-repo one-sided Jacobi SVD, and a central-difference gradient checker.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, EvaluationError, ParameterError

Tensor = np.ndarray


def as_tensor(x) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_t(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax along ``axis``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_t(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class LowRankFactors:
    """``left @ right`` approximates the original matrix.

    ``compressive`` is False when storing the two factors costs at least as
    many numbers as the dense matrix.
    """

    left: Tensor
    right: Tensor
    rank: int
    energy_retained: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[1]

    @property
    def num_params(self) -> int:
        return self.left.size + self.right.size

    @property
    def compressive(self) -> bool:
        m, n = self.shape
        return self.num_params < m * n

    def reconstruct(self) -> Tensor:
        return self.left @ self.right


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of disjoint index pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        left = []
        right = []
        for k in range(m // 2):
            i, j = players[k], players[m - 1 - k]
            if i < n and j < n:
                left.append(min(i, j))
                right.append(max(i, j))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(w: Tensor, tol: float = 1e-10, max_sweeps: int = 60) -> tuple[Tensor, Tensor, Tensor]:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``u, s, vt`` with singular values sorted in decreasing order.
    Iteration stops once every column pair has normalized inner product
    below ``tol``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {w.shape}")
    transposed = w.shape[0] < w.shape[1]
    a = (w.T if transposed else w).copy()
    n = a.shape[1]
    v = np.eye(n)
    rounds = _round_robin_pairs(n)
    for _ in range(max_sweeps):
        worst = 0.0
        for p, q in rounds:
            if p.size == 0:
                continue
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            denom = np.sqrt(alpha * beta)
            live = denom > 0
            corr = np.zeros_like(gamma)
            corr[live] = np.abs(gamma[live]) / denom[live]
            if corr.size:
                worst = max(worst, float(corr.max()))
            rotate = live & (corr > tol)
            if not rotate.any():
                continue
            p, q = p[rotate], q[rotate]
            alpha, beta, gamma = alpha[rotate], beta[rotate], gamma[rotate]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p], a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if worst <= tol:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros_like(a)
    nz = sigma > 0
    u[:, nz] = a[:, nz] / sigma[nz]
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def rank_for_energy(sigma: Tensor, energy_ratio: float) -> tuple[int, float]:
    """Smallest rank whose squared singular values reach ``energy_ratio``."""
    energy = np.asarray(sigma, dtype=np.float64) ** 2
    total = energy.sum()
    if total == 0:
        return 0, 1.0
    cumulative = np.cumsum(energy) / total
    # 1e-12 slack absorbs round-off in exactly-at-threshold spectra such as {9, 1} at 0.9
    r = int(np.searchsorted(cumulative, energy_ratio - 1e-12) + 1)
    r = min(r, sigma.size)
    return r, float(cumulative[r - 1])


def truncated_svd(w: Tensor, energy_ratio: float = 0.9) -> LowRankFactors:
    """Best low-rank factorization retaining ``energy_ratio`` of the spectrum.

    An all-zero matrix yields rank-0 factors with ``energy_retained == 1``.
    """
    if not 0 < energy_ratio <= 1:
        raise ParameterError(f"energy_ratio must be in (0, 1], got {energy_ratio}")
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ParameterError("matrix contains non-finite entries")
    u, sigma, vt = jacobi_svd(w)
    r, kept = rank_for_energy(sigma, energy_ratio)
    m, n = w.shape
    if r == 0:
        return LowRankFactors(np.zeros((m, 0)), np.zeros((0, n)), 0, 1.0)
    left = u[:, :r] * sigma[:r]
    right = vt[:r].copy()
    return LowRankFactors(left, right, r, kept)


def grad_check(
    f: Callable[[Tensor], tuple[float, Tensor]],
    x: Tensor,
    eps: float = 1e-5,
    indices=None,
) -> float:
    """Maximum relative error between an analytic and a numerical gradient.

    ``f`` maps ``x`` to ``(value, gradient)``. Each coordinate (or only the
    flat ``indices`` given) is compared against a central difference; the
    error is scaled by ``max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = np.array(x, dtype=np.float64)
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise EvaluationError(f"f(x) is not finite: {value}")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    grad_flat = analytic.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value when perturbing coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(grad_flat[i] - numeric) / max(1.0, abs(grad_flat[i]))
        worst = max(worst, err)
    return worst
