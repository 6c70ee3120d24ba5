"""Triplet losses on unit embeddings and the NormSoftmax comparison loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class TripletBatch:
    """Triplets as parallel arrays of batch row indices plus per-triplet margins."""

    a: np.ndarray
    p: np.ndarray
    n: np.ndarray
    margin: np.ndarray

    def __post_init__(self):
        for name in ("a", "p", "n"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "margin", np.asarray(self.margin, dtype=np.float64))
        size = self.a.shape
        if not (self.a.ndim == 1 and self.p.shape == size and self.n.shape == size
                and self.margin.shape == size):
            raise ValueError("triplet arrays must be 1-D and equally long")

    def __len__(self) -> int:
        return self.a.size

    @classmethod
    def from_tuples(cls, triplets) -> "TripletBatch":
        """Build from ``(a, p, n, margin)`` tuples."""
        rows = list(triplets)
        if not rows:
            return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64),
                       np.empty(0))
        a, p, n, m = zip(*rows)
        return cls(np.array(a), np.array(p), np.array(n), np.array(m, dtype=np.float64))

    def with_margin(self, m: float) -> "TripletBatch":
        return TripletBatch(self.a, self.p, self.n, np.full(self.a.shape, float(m)))

    def canonical(self) -> "TripletBatch":
        """Copy sorted by ``(a, p, n, margin)``."""
        order = np.lexsort((self.margin, self.n, self.p, self.a))
        return TripletBatch(self.a[order], self.p[order], self.n[order], self.margin[order])


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    num_active: int


def embedding_distance(u: np.ndarray, v: np.ndarray) -> float:
    d = np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return float(np.sqrt(d @ d))


def atl_loss(embeddings: np.ndarray, batch: TripletBatch) -> LossResult:
    """Sum over triplets of ``max(0, d(a,p)^2 - d(a,n)^2 + margin)``.

    The gradient is with respect to ``embeddings``; inactive hinges, including
    those exactly at zero, contribute nothing. Triplets are summed in
    canonical order so the result does not depend on their input order.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    nrows = emb.shape[0]
    for name in ("a", "p", "n"):
        idx = getattr(batch, name)
        if idx.size and (idx.min() < 0 or idx.max() >= nrows):
            raise IndexError(f"triplet index {name} out of range for {nrows} embeddings")
    if len(batch) == 0:
        return LossResult(0.0, np.zeros_like(emb), 0)
    b = batch.canonical()
    loss, grad, active = _kernels.triplet_hinge(emb, b.a, b.p, b.n, b.margin)
    return LossResult(float(loss), grad, int(active))


def fixed_margin_loss(embeddings: np.ndarray, batch: TripletBatch, margin: float = 0.1) -> LossResult:
    if not margin > 0.0:
        raise ValueError(f"fixed margin must be positive, got {margin}")
    return atl_loss(embeddings, batch.with_margin(margin))


@dataclass
class NormSoftmaxConfig:
    class_weights: np.ndarray
    temperature: float = 0.05

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        norms = np.linalg.norm(self.class_weights, axis=1)
        if not np.allclose(norms, 1.0, rtol=0.0, atol=1e-9):
            raise ValueError("class weight rows must be unit norm")

    @classmethod
    def random(cls, num_classes: int, dim: int, seed: int = 0,
               temperature: float = 0.05) -> "NormSoftmaxConfig":
        rng = np.random.default_rng(seed)
        w = rng.uniform(-1.0, 1.0, size=(num_classes, dim))
        return cls(w / np.linalg.norm(w, axis=1, keepdims=True), temperature)


@dataclass
class NormSoftmaxResult:
    loss: float
    grad: np.ndarray
    grad_weights: np.ndarray


def norm_softmax_loss(embeddings: np.ndarray, labels: np.ndarray, cfg: NormSoftmaxConfig,
                      class_weights: np.ndarray | None = None) -> NormSoftmaxResult:
    """Mean cross-entropy of ``softmax(W u / T)`` against the product labels.

    ``class_weights`` overrides ``cfg.class_weights`` (used by gradient
    checks, which perturb rows off the unit sphere).
    """
    u = np.asarray(embeddings, dtype=np.float64)
    w = cfg.class_weights if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (u.shape[0],):
        raise ValueError("need one label per embedding")
    if y.size and (y.min() < 0 or y.max() >= w.shape[0]):
        raise IndexError("label out of range")
    t = cfg.temperature
    logits = u @ w.T / t
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(y.size)
    log_prob = shifted[rows, y] - log_z
    loss = float(-log_prob.mean())
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, y] -= 1.0
    dlogits = probs / (y.size * t)
    return NormSoftmaxResult(loss, dlogits @ w, dlogits.T @ u)


def renormalize_rows(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=1, keepdims=True)
