"""Exact k-NN retrieval, Recall@K and RR@10."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .dataset import Dataset
from .encoder import EncoderParams, ForwardCounter, forward

DEFAULT_RECALL_KS = (1, 5, 10, 20, 30, 50)


class EmptyGallery(ValueError):
    """Nothing left to search once the query image is excluded."""


@dataclass
class EmbeddedGallery:
    image_ids: list[str]
    product_ids: list[str]
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.image_ids)
        if len(self.product_ids) != n or self.embeddings.shape[0] != n:
            raise ValueError("image_ids, product_ids and embeddings must have equal length")
        self._pos = {iid: i for i, iid in enumerate(self.image_ids)}
        if len(self._pos) != n:
            raise ValueError("gallery image_ids must be unique")

    def __len__(self) -> int:
        return len(self.image_ids)

    def position(self, image_id: str) -> int:
        """Row of ``image_id`` or -1."""
        return self._pos.get(image_id, -1)


@dataclass
class MetricsReport:
    recall_at: dict[int, float]
    rr_at_10: float
    num_queries: int
    skipped_queries: int = 0

    def to_dict(self) -> dict:
        out: dict = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        out["rr@10"] = self.rr_at_10
        out["num_queries"] = self.num_queries
        out["skipped_queries"] = self.skipped_queries
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        recall = {int(k.split("@", 1)[1]): float(v) for k, v in d.items()
                  if k.startswith("recall@")}
        return cls(recall, float(d["rr@10"]), int(d["num_queries"]), int(d.get("skipped_queries", 0)))


def knn_search(query: np.ndarray, query_image_id: str | None, gallery: EmbeddedGallery,
               k: int) -> list[tuple[str, float]]:
    """Top-``k`` gallery images by Euclidean distance, the query image excluded.

    Ties go to the earlier gallery entry. Fewer than ``k`` results come back
    when the gallery is smaller.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ex = gallery.position(query_image_id) if query_image_id is not None else -1
    available = len(gallery) - (1 if ex >= 0 else 0)
    if available < 1:
        raise EmptyGallery("gallery is empty after excluding the query image")
    kk = min(k, available)
    idx, dist = _kernels.topk_neighbors(np.asarray(query, dtype=np.float64)[None, :],
                                        gallery.embeddings, kk, np.array([ex]))
    return [(gallery.image_ids[i], float(d)) for i, d in zip(idx[0], dist[0])]


def ranked_neighbors(queries: EmbeddedGallery, gallery: EmbeddedGallery, k: int) -> np.ndarray:
    """Gallery rows of the top-``k`` results per query (-1 pads short rows)."""
    exclude = np.array([gallery.position(i) for i in queries.image_ids], dtype=np.int64)
    kk = min(k, len(gallery))
    idx, _ = _kernels.topk_neighbors(queries.embeddings, gallery.embeddings, kk, exclude)
    if kk < k:
        idx = np.concatenate([idx, np.full((idx.shape[0], k - kk), -1, dtype=np.int64)], axis=1)
    return idx


@dataclass
class _Judged:
    hits: np.ndarray  # (num_kept, k) relevance of each ranked result
    relevant: np.ndarray  # (num_kept,) relevant gallery images per query
    skipped: int


def _judge(queries: EmbeddedGallery, gallery: EmbeddedGallery, k: int) -> _Judged:
    gal_products = np.array(gallery.product_ids, dtype=object)
    q_products = np.array(queries.product_ids, dtype=object)
    _, inverse = np.unique(np.concatenate([gal_products, q_products]), return_inverse=True)
    g_codes, q_codes = inverse[:len(gallery)], inverse[len(gallery):]
    counts = np.bincount(g_codes, minlength=inverse.max() + 1)
    in_gallery = np.array([gallery.position(i) >= 0 for i in queries.image_ids], dtype=bool)
    relevant = counts[q_codes] - in_gallery.astype(np.int64)
    keep = relevant > 0
    ranked = ranked_neighbors(queries, gallery, k)
    padded = np.append(g_codes, -1)  # row -1 maps to no product
    hits = padded[ranked] == q_codes[:, None]
    return _Judged(hits[keep], relevant[keep], int((~keep).sum()))


def evaluate_retrieval(queries: EmbeddedGallery, gallery: EmbeddedGallery,
                       ks: Sequence[int] = DEFAULT_RECALL_KS) -> MetricsReport:
    """Recall@K for every K in ``ks`` and RR@10 in one ranking pass.

    Queries whose product has no other image in the gallery are skipped and
    counted in ``skipped_queries``.
    """
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise ValueError("recall ks must be positive integers")
    judged = _judge(queries, gallery, max(ks[-1], 10))
    n = judged.hits.shape[0]
    if n == 0:
        return MetricsReport({k: 0.0 for k in ks}, 0.0, 0, judged.skipped)
    first_hit = np.cumsum(judged.hits, axis=1) > 0
    recall = {k: float(first_hit[:, k - 1].mean()) for k in ks}
    rr = judged.hits[:, :10].sum(axis=1) / judged.relevant
    return MetricsReport(recall, float(rr.mean()), n, judged.skipped)


def recall_at_k(queries: EmbeddedGallery, gallery: EmbeddedGallery,
                ks: Sequence[int] = DEFAULT_RECALL_KS) -> dict[int, float]:
    return evaluate_retrieval(queries, gallery, ks).recall_at


def rr_at_10(queries: EmbeddedGallery, gallery: EmbeddedGallery) -> float:
    """Mean of (relevant results in the top 10) / (relevant images in the gallery)."""
    return evaluate_retrieval(queries, gallery, (10,)).rr_at_10


def embed_dataset(params: EncoderParams, ds: Dataset, counter: ForwardCounter | None = None,
                  chunk: int = 4096) -> EmbeddedGallery:
    """Embed every image; image ids are ``"<product_id>#<n>"``."""
    parts = [forward(params, ds.image_matrix[s:s + chunk], counter)[0]
             for s in range(0, ds.num_images, chunk)]
    image_ids, product_ids = [], []
    for rec in ds.records:
        for j in range(rec.images.shape[0]):
            image_ids.append(f"{rec.product_id}#{j}")
            product_ids.append(rec.product_id)
    return EmbeddedGallery(image_ids, product_ids, np.concatenate(parts, axis=0))


def evaluate(params: EncoderParams, ds: Dataset,
             ks: Sequence[int] = DEFAULT_RECALL_KS) -> MetricsReport:
    """Every image queries all other images of ``ds``."""
    gallery = embed_dataset(params, ds, ForwardCounter())
    return evaluate_retrieval(gallery, gallery, ks)
