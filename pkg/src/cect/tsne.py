"""Exact O(n^2) t-SNE: per-point bandwidth bisection, symmetric affinities,
Student-t output kernel, momentum descent with adaptive gains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import TsneConfig
from .errors import ParameterError, ValidationError
from .rng import Rng

DIST_FLOOR = 1e-12
P_FLOOR = 1e-12


@dataclass(frozen=True)
class EmbeddingSet:
    matrix: np.ndarray  # [n, d]
    labels: np.ndarray
    subsets: tuple[str, ...] = ()

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise ValidationError(f"embedding set needs [n>=2, d] features, got {self.matrix.shape}")
        if len(self.labels) != self.matrix.shape[0]:
            raise ValidationError("one label per embedded sample")
        if self.subsets and len(self.subsets) != self.matrix.shape[0]:
            raise ValidationError("one subset tag per embedded sample")
        if not np.isfinite(self.matrix).all():
            raise ValidationError("embedding features must be finite")


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(1)
    d = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def effective_perplexity(perplexity: float, n: int) -> float:
    """Clamp the target to (n-1)/3, strictly below n/3."""
    eff = min(perplexity, (n - 1) / 3.0)
    if eff < 1.0:
        raise ParameterError(f"perplexity {perplexity} is infeasible for {n} points (need at least 4)")
    return eff


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Shannon entropy (nats) and probabilities of one Gaussian row."""
    p = np.exp(-(d - d.min()) * beta)
    s = p.sum()
    p /= s
    h = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
    return h, p


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-10,
                           max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic P_{j|i} with each row's perplexity matched by bisection on beta.

    Returns the matrix and the achieved per-row perplexities.
    """
    n = x.shape[0]
    d = squared_distances(np.asarray(x, dtype=np.float64))
    target = math.log(perplexity)
    p = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        di = np.delete(d[i], i)
        beta, lo, hi = 1.0 / max(np.median(di), DIST_FLOOR), 0.0, math.inf
        for _ in range(max_iter):
            h, row = _row_entropy(di, beta)
            if abs(h - target) < tol:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2 if hi == math.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = row
        achieved[i] = math.exp(h)
    return p, achieved


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    p, _ = conditional_affinities(x, perplexity)
    p = (p + p.T) / (2 * p.shape[0])
    return p


def _q_kernel(y: np.ndarray) -> np.ndarray:
    w = 1.0 / (1.0 + squared_distances(y))
    np.fill_diagonal(w, 0.0)
    return w


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    w = _q_kernel(y)
    q = np.maximum(w / w.sum(), P_FLOOR)
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


@dataclass
class TsneResult:
    points: np.ndarray
    kl_trace: list[float]
    perplexity: float
    p: np.ndarray


def _gradient(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    w = _q_kernel(y)
    q = np.maximum(w / w.sum(), P_FLOOR)
    pq = (p - q) * w
    return 4.0 * (pq.sum(1)[:, None] * y - pq @ y)


def _backtrack(p: np.ndarray, y: np.ndarray, grad: np.ndarray, lr: float, kl: float):
    """Plain gradient step halved until the KL drops; None once nothing does."""
    step = lr
    while step > 1e-12 * lr:
        candidate = y - step * grad
        value = kl_divergence(p, candidate)
        if value < kl:
            return candidate, value
        step /= 2
    return None


def tsne(emb: EmbeddingSet | np.ndarray, cfg: TsneConfig = TsneConfig(), seed: int = 0) -> TsneResult:
    """Embed in 2-d with momentum descent and per-coordinate adaptive gains.

    Momentum and gains start from rest when exaggeration ends. After that a
    step that would raise the KL is replaced by a backtracked gradient step
    (and momentum and gains reset again), and the run stops early once no
    step size lowers it.
    """
    x = emb.matrix if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    n = x.shape[0]
    perp = effective_perplexity(cfg.perplexity, n)
    p = np.maximum(joint_affinities(x, perp), P_FLOOR)
    np.fill_diagonal(p, 0.0)
    p /= p.sum()
    y = Rng(seed).child("tsne").normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = []
    for it in range(cfg.iterations):
        early = it < cfg.exaggeration_iters
        if it == cfg.exaggeration_iters:
            update, gains = np.zeros_like(y), np.ones_like(y)
        grad = _gradient(p * cfg.exaggeration if early else p, y)
        momentum = 0.5 if early else 0.8
        flipped = update * grad < 0.0  # still moving against the new gradient
        gains = np.maximum(np.where(flipped, gains + 0.2, gains * 0.8), 0.01)
        update = momentum * update - cfg.learning_rate * gains * grad
        candidate = y + update
        kl = kl_divergence(p, candidate)
        if not early and it > cfg.exaggeration_iters and kl >= trace[-1]:
            update, gains = np.zeros_like(y), np.ones_like(y)
            found = _backtrack(p, y, grad, cfg.learning_rate, trace[-1])
            if found is None:
                break
            candidate, kl = found
        y = candidate - candidate.mean(0)
        trace.append(kl)
    return TsneResult(y, trace, perp, p)
