"""Task criteria: cross-entropy for keywords, angular softmax for speakers."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .tensor import Tensor, log_softmax, matmul, sqrt, sum_, transpose, where


def _check_labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = _check_labels(labels, logits.shape[-1])
    if len(labels) != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {len(labels)} labels")
    logp = log_softmax(logits, -1)
    return -(logp[np.arange(len(labels)), labels].mean())


def cosine_similarity(a, b):
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class AngularSoftmaxConfig:
    margin: int = 4
    lambda_base: float = 1000.0
    lambda_gamma: float = 0.2
    lambda_min: float = 5.0

    def __post_init__(self):
        if int(self.margin) != self.margin or self.margin < 1:
            raise ValueError(f"angular softmax margin must be a positive integer, got {self.margin}")
        self.margin = int(self.margin)
        if self.lambda_min < 0 or self.lambda_base < self.lambda_min or self.lambda_gamma < 0:
            raise ValueError("angular softmax needs lambda_base >= lambda_min >= 0 and lambda_gamma >= 0")

    def lam(self, step):
        return max(self.lambda_min, self.lambda_base / (1.0 + self.lambda_gamma * step))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _chebyshev(x, m):
    """cos(m·θ) as a polynomial in x = cos θ."""
    prev, cur = 1.0, x
    if m == 0:
        return x * 0.0 + 1.0
    for _ in range(m - 1):
        prev, cur = cur, cur * x * 2.0 - prev
    return cur


def angular_softmax_loss(emb, labels, weight, margin=4, lam=5.0):
    """A-Softmax cross-entropy with annealing weight ``lam``.

    ``weight`` (n_classes, dim) rows are normalised to unit length inside the
    graph. The target logit becomes (λ‖e‖cosθ + ‖e‖ψ(θ)) / (1 + λ) with
    ψ(θ) = (−1)^k cos(mθ) − 2k on θ ∈ [kπ/m, (k+1)π/m].
    """
    if emb.ndim == 1:
        emb = emb.reshape(1, -1)
    n_cls = weight.shape[0]
    labels = _check_labels(labels, n_cls)
    norms_data = np.linalg.norm(emb.data, axis=-1)
    if np.any(norms_data == 0.0):
        raise ValueError("angular softmax is undefined for a zero-norm embedding")
    w_unit = weight / sqrt(sum_(weight * weight, axis=-1, keepdims=True))
    norm = sqrt(sum_(emb * emb, axis=-1, keepdims=True))             # (B, 1)
    cos = matmul(emb, transpose(w_unit)) / norm                       # (B, n)
    rows = np.arange(len(labels))
    cos_y = cos[rows, labels]
    theta = np.arccos(np.clip(cos_y.data, -1.0, 1.0))
    k = np.minimum(np.floor(margin * theta / math.pi), margin - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    psi = _chebyshev(cos_y, margin) * sign - 2.0 * k
    norm_flat = norm.reshape(-1)
    target = (cos_y * norm_flat * lam + norm_flat * psi) * (1.0 / (1.0 + lam))
    logits = cos * norm
    onehot = np.zeros(logits.shape, dtype=bool)
    onehot[rows, labels] = True
    logits = where(onehot, target.reshape(-1, 1), logits)
    return cross_entropy(logits, labels)


class AngularSoftmax(nn.Module):
    """Trainable class directions plus the annealed A-Softmax criterion."""

    def __init__(self, dim, n_classes, config: AngularSoftmaxConfig, rng):
        self.config = config
        self.weight = nn.parameter(rng.normal(0.0, 1.0, size=(n_classes, dim)))

    def __call__(self, emb, labels, step=0):
        return angular_softmax_loss(emb, labels, self.weight, self.config.margin,
                                    self.config.lam(step))


class CrossEntropy(nn.Module):
    def __call__(self, logits, labels, step=0):
        return cross_entropy(logits, labels)
