"""Mini-batch construction: random, online anchor nearest-neighbor, epoch recompute.

Also positive-pair enumeration and distance-weighted negative selection
within a batch.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dataset import Dataset

_DEGENERATE_NORM = 1e-12
# keeps the density finite for (near) antipodal pairs
_MIN_SPHERE_GAP = 1e-12


class SamplingError(ValueError):
    """A batch cannot be assembled from the available products."""


class NoNegativeCandidates(SamplingError):
    pass


@dataclass(frozen=True)
class BatchSpec:
    """``P`` products per batch, ``K`` images each, ``N_a`` anchors."""

    P: int = 25
    K: int = 4
    N_a: int = 5

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must be >= 2")
        if not 1 <= self.N_a <= self.P or self.P % self.N_a:
            raise ValueError("N_a must divide P and lie in [1, P]")

    @property
    def B(self) -> int:
        return self.P * self.K

    @property
    def neighbors_per_anchor(self) -> int:
        return self.P // self.N_a - 1


@dataclass
class MiniBatch:
    """``products[g]`` is group ``g``'s product index; ``images[g]`` its K image positions.

    Batch row ``g * K + j`` holds image ``images[g, j]`` of product ``products[g]``.
    """

    products: np.ndarray  # (P,)
    images: np.ndarray  # (P, K) positions within each product

    @property
    def P(self) -> int:
        return self.products.size

    @property
    def K(self) -> int:
        return self.images.shape[1]

    def rows(self, ds: Dataset) -> np.ndarray:
        """Flat dataset image rows in batch order."""
        return (ds.offsets[self.products][:, None] + self.images).reshape(-1)

    def labels(self) -> np.ndarray:
        return np.repeat(self.products, self.K)


def _fill_images(ds: Dataset, products: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    counts = ds.images_per_product()
    out = np.empty((products.size, K), dtype=np.int64)
    for g, prod in enumerate(products):
        n = int(counts[prod])
        if n >= K:
            out[g] = rng.choice(n, K, replace=False)
        else:
            # cycle through all available images before repeating any
            out[g] = np.resize(rng.permutation(n), K)
    return out


def random_batch(ds: Dataset, spec: BatchSpec, rng: np.random.Generator) -> MiniBatch:
    if len(ds) < spec.P:
        raise SamplingError(f"need at least {spec.P} products, dataset has {len(ds)}")
    products = rng.choice(len(ds), spec.P, replace=False).astype(np.int64)
    return MiniBatch(products, _fill_images(ds, products, spec.K, rng))


class ProductVectorIndex:
    """One unit vector per product with exact Euclidean neighbor search."""

    def __init__(self, vectors: np.ndarray, initialized: np.ndarray | None = None):
        v = np.array(vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("product vectors must be a non-empty 2-D array")
        norms = np.linalg.norm(v, axis=1)
        if not np.allclose(norms, 1.0, rtol=0.0, atol=1e-9):
            raise ValueError("product vectors must be unit norm")
        self.vectors = v
        self.initialized = (np.zeros(v.shape[0], dtype=bool) if initialized is None
                            else np.array(initialized, dtype=bool))
        self.diagnostics: Counter = Counter()

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "ProductVectorIndex":
        return ProductVectorIndex(self.vectors, self.initialized)

    def nearest(self, products, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``k`` nearest other products of each query product, ties to lower index."""
        products = np.atleast_1d(np.asarray(products, dtype=np.int64))
        if not 1 <= k <= len(self) - 1:
            raise ValueError(f"k must lie in [1, {len(self) - 1}]")
        return _kernels.topk_neighbors(self.vectors[products], self.vectors, k, products)


def init_product_vectors(num_products: int, embedding_dim: int, seed: int = 0) -> ProductVectorIndex:
    """Uniform ``[-1, 1]`` draws per product, L2-normalized."""
    if embedding_dim < 1:
        raise ValueError("embedding_dim must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.uniform(-1.0, 1.0, size=(num_products, embedding_dim))
    norms = np.linalg.norm(v, axis=1)
    while np.any(norms < _DEGENERATE_NORM):  # measure-zero event
        bad = norms < _DEGENERATE_NORM
        v[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), embedding_dim))
        norms = np.linalg.norm(v, axis=1)
    return ProductVectorIndex(v / norms[:, None])


def anchor_neighbor_products(index: ProductVectorIndex, spec: BatchSpec,
                             rng: np.random.Generator) -> np.ndarray:
    """Anchors drawn uniformly, each followed by its nearest unused products."""
    n = len(index)
    if n < spec.P:
        raise SamplingError(f"need at least {spec.P} products, index has {n}")
    anchors = rng.choice(n, spec.N_a, replace=False).astype(np.int64)
    m = spec.neighbors_per_anchor
    if m == 0:
        return anchors
    # P - 1 other products may already be taken, so this many always suffices
    k = min(n - 1, spec.P - 1 + m)
    ranked, _ = index.nearest(anchors, k)
    used = set(anchors.tolist())
    groups = []
    for anchor, row in zip(anchors, ranked):
        groups.append(int(anchor))
        taken = 0
        for cand in row:
            c = int(cand)
            if c in used:
                continue
            used.add(c)
            groups.append(c)
            taken += 1
            if taken == m:
                break
        if taken < m:
            raise SamplingError("not enough products to fill the batch")
    return np.array(groups, dtype=np.int64)


def oanns_sample_batch(index: ProductVectorIndex, ds: Dataset, spec: BatchSpec,
                       rng: np.random.Generator) -> MiniBatch:
    if len(index) != len(ds):
        raise ValueError("product index and dataset disagree on product count")
    products = anchor_neighbor_products(index, spec, rng)
    return MiniBatch(products, _fill_images(ds, products, spec.K, rng))


def oanns_update(index: ProductVectorIndex, batch: MiniBatch,
                 image_embeddings: np.ndarray) -> ProductVectorIndex:
    """Set each batch product's vector to the normalized mean of its K embeddings.

    Updates ``index`` in place and returns it. A product whose mean
    underflows keeps its previous vector (tallied as ``"degenerate_update"``).
    """
    emb = np.asarray(image_embeddings, dtype=np.float64)
    if emb.shape != (batch.P * batch.K, index.dim):
        raise ValueError(f"embeddings of shape {emb.shape} do not match the batch layout")
    means = emb.reshape(batch.P, batch.K, index.dim).mean(axis=1)
    norms = np.linalg.norm(means, axis=1)
    for g, prod in enumerate(batch.products):
        if norms[g] < _DEGENERATE_NORM:
            index.diagnostics["degenerate_update"] += 1
            continue
        index.vectors[prod] = means[g] / norms[g]
        index.initialized[prod] = True
    return index


def snapshot_product_vectors(ds: Dataset, image_embeddings: np.ndarray) -> ProductVectorIndex:
    """Product index from per-product means of a full-dataset embedding pass."""
    emb = np.asarray(image_embeddings, dtype=np.float64)
    if emb.shape[0] != ds.num_images:
        raise ValueError("snapshot needs one embedding per dataset image")
    sums = np.zeros((len(ds), emb.shape[1]))
    np.add.at(sums, ds.image_product, emb)
    means = sums / ds.images_per_product()[:, None]
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms < _DEGENERATE_NORM):
        raise ValueError("degenerate product mean in snapshot")
    return ProductVectorIndex(means / norms[:, None], np.ones(len(ds), dtype=bool))


def epoch_recompute_batch(ds: Dataset, snapshot: ProductVectorIndex | None, spec: BatchSpec,
                          rng: np.random.Generator) -> MiniBatch:
    if snapshot is None:
        raise SamplingError("epoch-recompute sampling needs an image-vector snapshot")
    return oanns_sample_batch(snapshot, ds, spec, rng)


def construct_positive_pairs(batch: MiniBatch) -> np.ndarray:
    """All same-product ``(a, p)`` row pairs with ``a < p``, grouped by product."""
    K = batch.K
    i, j = np.triu_indices(K, k=1)
    base = (np.arange(batch.P) * K)[:, None]
    return np.stack([(base + i).reshape(-1), (base + j).reshape(-1)], axis=1).astype(np.int64)


@dataclass(frozen=True)
class NegativeSamplingConfig:
    """``dim_n`` is the sphere dimension in the density (None: embedding dim)."""

    dim_n: int | None = None
    d_clip: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.d_clip < 2.0:
            raise ValueError("d_clip must lie in (0, 2)")
        if self.dim_n is not None and self.dim_n < 1:
            raise ValueError("dim_n must be >= 1")


def log_inverse_density(d: np.ndarray, dim_n: int, d_clip: float) -> np.ndarray:
    """``-log q(max(d, d_clip))`` for the pairwise-distance density on the sphere.

    ``q(d) = d^(n-2) * (1 - d^2/4)^((n-3)/2)``.
    """
    d = np.maximum(np.asarray(d, dtype=np.float64), d_clip)
    gap = np.maximum(1.0 - 0.25 * d * d, _MIN_SPHERE_GAP)
    return -((dim_n - 2.0) * np.log(d) + 0.5 * (dim_n - 3.0) * np.log(gap))


def pairwise_distances(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def negative_probabilities(emb: np.ndarray, labels: np.ndarray,
                           cfg: NegativeSamplingConfig) -> np.ndarray:
    """Row ``a`` is the selection distribution over negatives for anchor row ``a``."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    dim_n = cfg.dim_n if cfg.dim_n is not None else emb.shape[1]
    logw = log_inverse_density(pairwise_distances(emb), dim_n, cfg.d_clip)
    valid = labels[:, None] != labels[None, :]
    logw = np.where(valid, logw, -np.inf)
    top = logw.max(axis=1, keepdims=True)
    has = np.isfinite(top[:, 0])
    w = np.zeros_like(logw)
    w[has] = np.exp(logw[has] - top[has])
    totals = w.sum(axis=1, keepdims=True)
    return np.divide(w, totals, out=np.zeros_like(w), where=totals > 0)


def sample_negatives(pairs: np.ndarray, emb: np.ndarray, labels: np.ndarray,
                     cfg: NegativeSamplingConfig, rng: np.random.Generator) -> np.ndarray:
    """One distance-weighted negative row per ``(a, p)`` pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    probs = negative_probabilities(emb, labels, cfg)
    anchors = pairs[:, 0]
    if np.any(probs[anchors].sum(axis=1) == 0.0):
        raise NoNegativeCandidates("an anchor has no image of another product in the batch")
    cdf = np.cumsum(probs[anchors], axis=1)
    u = rng.random(anchors.size) * cdf[:, -1]
    picks = (cdf <= u[:, None]).sum(axis=1)
    # rounding can push u onto the total; fall back to the last candidate
    last = cdf.shape[1] - 1 - np.argmax(probs[anchors][:, ::-1] > 0, axis=1)
    return np.minimum(picks, last).astype(np.int64)


def distance_weighted_negative(pair, emb: np.ndarray, labels: np.ndarray,
                               cfg: NegativeSamplingConfig, rng: np.random.Generator) -> int:
    return int(sample_negatives(np.asarray(pair).reshape(1, 2), emb, labels, cfg, rng)[0])
