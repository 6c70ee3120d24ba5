"""Description embeddings, semantic distances and adaptive margins.

A product description is embedded as the L2-normalized sum of its word
vectors. The adaptive margin between an anchor product and a negative product
is the base margin plus a scaled squared distance between their description
embeddings, so semantically distant negatives are pushed further away.
"""

from __future__ import annotations

import hashlib
import io
from collections import Counter
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

SCALING_MODES = ("literal", "range_consistent")

_DEGENERATE_NORM = 1e-12


class WordVectorFormatError(ValueError):
    """Raised for unparseable or inconsistent word-vector files."""


class NoResolvedTokens(ValueError):
    """No token of a description exists in the word-vector table."""


class DegenerateSum(ValueError):
    """The summed word vectors of a description have (near) zero norm."""


class WordVectorTable:
    """Token to vector lookup with a fixed dimension and no zero vectors."""

    def __init__(self, entries: Mapping[str, Sequence[float]]):
        vectors: dict[str, np.ndarray] = {}
        dim = None
        for token, vec in entries.items():
            v = np.asarray(vec, dtype=np.float64)
            if v.ndim != 1 or v.size == 0:
                raise WordVectorFormatError(f"vector for {token!r} is not a non-empty 1-D array")
            if dim is None:
                dim = v.size
            elif v.size != dim:
                raise WordVectorFormatError(
                    f"vector for {token!r} has dimension {v.size}, expected {dim}"
                )
            if not np.all(np.isfinite(v)):
                raise WordVectorFormatError(f"vector for {token!r} has non-finite values")
            if not np.any(v):
                raise WordVectorFormatError(f"vector for {token!r} is the zero vector")
            v = v.copy()
            v.flags.writeable = False
            vectors[token] = v
        if dim is None:
            raise WordVectorFormatError("word-vector table is empty")
        self._vectors = vectors
        self.dim: int = dim

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, token: object) -> bool:
        return token in self._vectors

    def __getitem__(self, token: str) -> np.ndarray:
        return self._vectors[token]

    def get(self, token: str):
        return self._vectors.get(token)

    def tokens(self) -> list[str]:
        return list(self._vectors)

    def dump(self, sink: IO[str]) -> None:
        """Write the table in the one-record-per-line text format."""
        for token, v in self._vectors.items():
            sink.write(token + " " + " ".join(repr(float(x)) for x in v) + "\n")


def load_word_vectors(source) -> WordVectorTable:
    """Parse ``token v1 ... vd`` lines from a byte or text stream.

    Blank lines are ignored. Later duplicates of a token replace earlier
    ones.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    entries: dict[str, np.ndarray] = {}
    dim = None
    for lineno, raw in enumerate(source, start=1):
        line = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise WordVectorFormatError(f"line {lineno}: expected a token followed by floats")
        try:
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise WordVectorFormatError(f"line {lineno}: {exc}") from None
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise WordVectorFormatError(
                f"line {lineno}: dimension mismatch ({vec.size} != {dim})"
            )
        if not np.all(np.isfinite(vec)):
            raise WordVectorFormatError(f"line {lineno}: non-finite value")
        if not np.any(vec):
            raise WordVectorFormatError(f"line {lineno}: zero vector for {parts[0]!r}")
        entries[parts[0]] = vec
    return WordVectorTable(entries)


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase and split on whitespace."""
    return tuple(text.lower().split())


def hashed_word_vector(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector for ``token``, uniform on the sphere."""
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def hashed_word_vectors(tokens: Iterable[str], dim: int = 64, seed: int = 0) -> WordVectorTable:
    """Table of :func:`hashed_word_vector` entries for the given tokens."""
    return WordVectorTable({t: hashed_word_vector(t, dim, seed) for t in tokens})


@dataclass(frozen=True)
class MarginConfig:
    """Base margin and the scaling applied to the squared description distance.

    ``literal`` divides the squared distance by ``4 - beta``;
    ``range_consistent`` multiplies it by ``(4 - beta) / 4`` so the margin
    spans exactly ``[beta, 4]``.
    """

    beta: float = 0.1
    scaling_mode: str = "range_consistent"

    def __post_init__(self):
        if not 0.0 < self.beta < 4.0:
            raise ValueError(f"beta must lie in (0, 4), got {self.beta}")
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(f"unknown scaling mode {self.scaling_mode!r}")

    @property
    def scale(self) -> float:
        if self.scaling_mode == "literal":
            return 1.0 / (4.0 - self.beta)
        return (4.0 - self.beta) / 4.0


def embed_description(tokens: Sequence[str], table: WordVectorTable) -> np.ndarray:
    """Normalized sum of the word vectors of the known tokens.

    Unknown tokens are skipped; repeated tokens count with multiplicity.
    """
    total = np.zeros(table.dim)
    resolved = 0
    for tok in tokens:
        v = table.get(tok)
        if v is not None:
            total += v
            resolved += 1
    if resolved == 0:
        raise NoResolvedTokens(f"no token of {list(tokens)!r} is in the word-vector table")
    norm = np.linalg.norm(total)
    if norm < _DEGENERATE_NORM:
        raise DegenerateSum(f"word vectors of {list(tokens)!r} sum to norm {norm:.3g}")
    return total / norm


def semantic_distance(g_a: np.ndarray, g_n: np.ndarray, cfg: MarginConfig) -> float:
    diff = np.asarray(g_a, dtype=np.float64) - np.asarray(g_n, dtype=np.float64)
    # unit inputs bound the squared distance by 4; clamp rounding overshoot
    sq = min(float(diff @ diff), 4.0)
    return sq * cfg.scale


def adaptive_margin(
    t_a: Sequence[str],
    t_n: Sequence[str],
    table: WordVectorTable,
    cfg: MarginConfig,
    diagnostics: Counter | None = None,
) -> float:
    """``beta + semantic_distance`` of the two descriptions.

    Falls back to ``beta`` when either description cannot be embedded; the
    fallback is tallied under ``"margin_fallback"`` in ``diagnostics``.
    """
    try:
        g_a = embed_description(t_a, table)
        g_n = embed_description(t_n, table)
    except (NoResolvedTokens, DegenerateSum):
        if diagnostics is not None:
            diagnostics["margin_fallback"] += 1
        return cfg.beta
    return cfg.beta + semantic_distance(g_a, g_n, cfg)


class MarginTable:
    """Adaptive margins between catalog products with cached embeddings.

    Products whose description cannot be embedded get ``None`` and every
    margin involving them falls back to ``beta``.
    """

    def __init__(self, descriptions: Sequence[Sequence[str]], table: WordVectorTable,
                 cfg: MarginConfig):
        self.cfg = cfg
        self.diagnostics: Counter = Counter()
        self._emb: list[np.ndarray | None] = []
        for tokens in descriptions:
            try:
                self._emb.append(embed_description(tokens, table))
            except (NoResolvedTokens, DegenerateSum):
                self._emb.append(None)
                self.diagnostics["unembeddable_products"] += 1

    def margin(self, product_a: int, product_n: int) -> float:
        g_a, g_n = self._emb[product_a], self._emb[product_n]
        if g_a is None or g_n is None:
            self.diagnostics["margin_fallback"] += 1
            return self.cfg.beta
        return self.cfg.beta + semantic_distance(g_a, g_n, self.cfg)

    def margins(self, products_a: Sequence[int], products_n: Sequence[int]) -> np.ndarray:
        return np.array([self.margin(int(a), int(n)) for a, n in zip(products_a, products_n)],
                        dtype=np.float64)
