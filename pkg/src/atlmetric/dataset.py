"""Product catalogs: records, JSON-lines IO, synthetic generation, domain shift.

Every image belongs to exactly one product and each product carries a token
description. The synthetic generator ties image prototypes to description
embeddings so that textual and visual similarity agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .text_semantics import WordVectorTable, embed_description


class DatasetFormatError(ValueError):
    """Malformed or invariant-violating dataset file or records."""


@dataclass(frozen=True, eq=False)
class ProductRecord:
    product_id: str
    description: tuple[str, ...]
    images: np.ndarray  # (num_images, d_in)

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        if imgs.ndim != 2 or imgs.shape[0] < 1 or imgs.shape[1] < 1:
            raise DatasetFormatError(f"product {self.product_id!r}: need at least one image vector")
        if not np.all(np.isfinite(imgs)):
            raise DatasetFormatError(f"product {self.product_id!r}: non-finite image values")
        if any(not isinstance(t, str) or not t for t in self.description):
            raise DatasetFormatError(f"product {self.product_id!r}: empty description token")
        imgs.flags.writeable = False
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "description", tuple(self.description))

    def equals(self, other: "ProductRecord") -> bool:
        return (self.product_id == other.product_id and self.description == other.description
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes())


class Dataset:
    """Ordered product records with a flat view of all images.

    ``image_matrix`` stacks every image; ``image_product[i]`` is the product
    index of image row ``i`` and ``offsets[j]:offsets[j+1]`` the rows of
    product ``j``.
    """

    def __init__(self, records: Sequence[ProductRecord]):
        records = list(records)
        if not records:
            raise DatasetFormatError("dataset has no products")
        d_in = records[0].images.shape[1]
        seen: set[str] = set()
        for rec in records:
            if rec.product_id in seen:
                raise DatasetFormatError(f"duplicate product_id {rec.product_id!r}")
            seen.add(rec.product_id)
            if rec.images.shape[1] != d_in:
                raise DatasetFormatError(
                    f"product {rec.product_id!r}: image dimension {rec.images.shape[1]} != {d_in}"
                )
        self.records = records
        self.d_in = d_in
        counts = np.array([r.images.shape[0] for r in records], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.image_matrix = np.concatenate([r.images for r in records], axis=0)
        self.image_matrix.flags.writeable = False
        self.image_product = np.repeat(np.arange(len(records), dtype=np.int64), counts)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_images(self) -> int:
        return int(self.offsets[-1])

    @property
    def product_ids(self) -> list[str]:
        return [r.product_id for r in self.records]

    @property
    def descriptions(self) -> list[tuple[str, ...]]:
        return [r.description for r in self.records]

    def images_per_product(self) -> np.ndarray:
        return np.diff(self.offsets)

    def image_rows(self, product: int, within: np.ndarray) -> np.ndarray:
        """Flat image rows for per-product image positions ``within``."""
        return self.offsets[product] + np.asarray(within, dtype=np.int64)

    def equals(self, other: "Dataset") -> bool:
        return len(self) == len(other) and all(a.equals(b) for a, b in zip(self.records, other.records))

    def subset(self, products: Iterable[int]) -> "Dataset":
        return Dataset([self.records[int(i)] for i in products])

    def with_descriptions(self, descriptions: Sequence[Sequence[str]]) -> "Dataset":
        return Dataset([ProductRecord(r.product_id, tuple(d), r.images)
                        for r, d in zip(self.records, descriptions)])


def save_dataset(ds: Dataset, sink: IO[str]) -> None:
    """One JSON object per line with ``product_id``, ``description``, ``images``."""
    for rec in ds.records:
        obj = {
            "product_id": rec.product_id,
            "description": list(rec.description),
            "images": rec.images.tolist(),
        }
        sink.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_dataset(source: IO[str]) -> Dataset:
    records = []
    seen: set[str] = set()
    d_in = None
    index = 0
    for lineno, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        where = f"record {index} (line {lineno})"
        index += 1
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{where}: invalid JSON: {exc.msg}") from None
        if not isinstance(obj, dict) or not {"product_id", "description", "images"} <= obj.keys():
            raise DatasetFormatError(f"{where}: need keys product_id, description, images")
        pid, desc, images = obj["product_id"], obj["description"], obj["images"]
        if not isinstance(pid, str):
            raise DatasetFormatError(f"{where}: product_id must be a string")
        if pid in seen:
            raise DatasetFormatError(f"{where}: duplicate product_id {pid!r}")
        seen.add(pid)
        if isinstance(desc, str):
            desc = desc.split()
        if not isinstance(desc, list) or not all(isinstance(t, str) for t in desc):
            raise DatasetFormatError(f"{where}: description must be a list of tokens")
        if not isinstance(images, list) or not images:
            raise DatasetFormatError(f"{where}: product {pid!r} has no images")
        try:
            arr = np.array(images, dtype=np.float64)
        except (ValueError, TypeError):
            raise DatasetFormatError(f"{where}: images must be equal-length float arrays") from None
        if arr.ndim != 2:
            raise DatasetFormatError(f"{where}: images must be equal-length float arrays")
        if d_in is None:
            d_in = arr.shape[1]
        elif arr.shape[1] != d_in:
            raise DatasetFormatError(f"{where}: image dimension mismatch ({arr.shape[1]} != {d_in})")
        try:
            records.append(ProductRecord(pid, tuple(desc), arr))
        except DatasetFormatError as exc:
            raise DatasetFormatError(f"{where}: {exc}") from None
    return Dataset(records)


@dataclass(frozen=True)
class SyntheticConfig:
    """Shape and noise level of a generated catalog.

    Images of a product are its prototype plus isotropic Gaussian noise. The
    prototype is the product's description embedding pushed through a fixed
    random linear map into feature space.
    """

    num_products: int = 200
    images_per_product: int = 4
    vocab_size: int = 60
    attrs_per_product: int = 4
    feature_dim: int = 64
    prototype_noise_sigma: float = 0.1
    seed: int = 0
    word_dim: int = 32

    def __post_init__(self):
        for name in ("num_products", "images_per_product", "vocab_size", "attrs_per_product",
                     "feature_dim", "word_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.prototype_noise_sigma < 0:
            raise ValueError("prototype_noise_sigma must be >= 0")
        if self.vocab_size < self.attrs_per_product:
            raise ValueError("vocab_size must be >= attrs_per_product")


def _projection(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random linear map; distance preserving when ``rows >= cols``."""
    g = rng.standard_normal((rows, cols))
    if rows >= cols:
        q, r = np.linalg.qr(g)
        return q * np.sign(np.diag(r))
    return g / np.sqrt(rows)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, WordVectorTable]:
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    vocab_rng, map_rng, attr_rng, noise_rng = (np.random.default_rng(s) for s in seeds)
    width = len(str(cfg.vocab_size - 1))
    tokens = [f"attr{i:0{width}d}" for i in range(cfg.vocab_size)]
    vecs = vocab_rng.standard_normal((cfg.vocab_size, cfg.word_dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    table = WordVectorTable(dict(zip(tokens, vecs)))
    proj = _projection(map_rng, cfg.feature_dim, cfg.word_dim)
    pid_width = len(str(cfg.num_products - 1))
    records = []
    for j in range(cfg.num_products):
        attrs = np.sort(attr_rng.choice(cfg.vocab_size, cfg.attrs_per_product, replace=False))
        desc = tuple(tokens[a] for a in attrs)
        # random unit word vectors: the sum is degenerate with probability 0
        proto = proj @ embed_description(desc, table)
        noise = noise_rng.standard_normal((cfg.images_per_product, cfg.feature_dim))
        images = proto + cfg.prototype_noise_sigma * noise
        records.append(ProductRecord(f"p{j:0{pid_width}d}", desc, images))
    return Dataset(records), table


@dataclass(frozen=True)
class DomainShiftConfig:
    """Seeded feature-space shift: rotation, constant bias, extra noise.

    ``rotation_strength`` scales the random perturbation of the identity that
    is orthogonalized into the rotation; 0 keeps the identity.
    """

    rotation_seed: int = 0
    extra_noise_sigma: float = 0.0
    bias_vector_scale: float = 0.0
    rotation_strength: float = 0.0

    def __post_init__(self):
        if min(self.extra_noise_sigma, self.bias_vector_scale, self.rotation_strength) < 0:
            raise ValueError("domain shift scales must be >= 0")


def shift_rotation(dim: int, cfg: DomainShiftConfig) -> np.ndarray:
    if cfg.rotation_strength == 0.0:
        return np.eye(dim)
    rng = np.random.default_rng([cfg.rotation_seed, 0])
    q, r = np.linalg.qr(np.eye(dim) + cfg.rotation_strength * rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def apply_domain_shift(ds: Dataset, cfg: DomainShiftConfig) -> Dataset:
    """Return a copy with ``x -> R x + bias + noise`` applied to every image."""
    dim = ds.d_in
    rot = shift_rotation(dim, cfg)
    bias_rng = np.random.default_rng([cfg.rotation_seed, 1])
    noise_rng = np.random.default_rng([cfg.rotation_seed, 2])
    direction = bias_rng.standard_normal(dim)
    bias = cfg.bias_vector_scale * direction / np.linalg.norm(direction)
    identity = cfg.rotation_strength == 0.0
    records = []
    for rec in ds.records:
        imgs = rec.images if identity else rec.images @ rot.T
        if cfg.bias_vector_scale:
            imgs = imgs + bias
        if cfg.extra_noise_sigma:
            imgs = imgs + cfg.extra_noise_sigma * noise_rng.standard_normal(imgs.shape)
        records.append(ProductRecord(rec.product_id, rec.description, np.array(imgs)))
    return Dataset(records)


def split_products(ds: Dataset, num_first: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random disjoint product split into ``num_first`` and the rest."""
    if not 0 < num_first < len(ds):
        raise ValueError("split must leave products on both sides")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[:num_first])), ds.subset(np.sort(perm[num_first:]))
