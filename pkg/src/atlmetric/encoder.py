"""Small MLP image encoder with an L2-normalized output.

Forward and backward passes are written out by hand in double precision so
gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

_DEGENERATE_NORM = 1e-12

CHECKPOINT_MAGIC = b"ATLCKPT\x00"
CHECKPOINT_VERSION = 1


class DegenerateNorm(ValueError):
    """A vector to be L2-normalized has (near) zero norm."""


class ForwardCounter:
    """Counts images pushed through :func:`forward`."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


#: Default counter used when ``forward`` is not given one.
FORWARD_COUNTER = ForwardCounter()


@dataclass
class EncoderParams:
    """Affine layers ``(W, b)`` with ``W`` of shape ``(fan_in, fan_out)``.

    A rectifier follows every layer except the last.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None
    step: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need the same positive number of weights and biases")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not follow "
                                 f"{self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                             self.seed, self.step)

    def equals(self, other: "EncoderParams") -> bool:
        """Bitwise equality of all parameter arrays."""
        if self.num_layers != other.num_layers:
            return False
        return all(
            w1.shape == w2.shape and w1.tobytes() == w2.tobytes()
            and b1.tobytes() == b2.tobytes()
            for w1, w2, b1, b2 in zip(self.weights, other.weights, self.biases, other.biases)
        )


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre_acts: list[np.ndarray]  # affine output of each layer
    norms: np.ndarray  # norm of the final pre-normalization vector per row
    outputs: np.ndarray  # unit embeddings


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray = field(repr=False)


def init_encoder(input_dim: int, hidden_dims: Sequence[int] = (256,), output_dim: int = 128,
                 seed: int = 0) -> EncoderParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization."""
    dims = [int(input_dim), *[int(h) for h in hidden_dims], int(output_dim)]
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dimensions must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return EncoderParams(weights, biases, seed=seed)


def l2_normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if np.any(norms < _DEGENERATE_NORM):
        bad = int(np.argmin(norms))
        raise DegenerateNorm(f"row {bad} has norm {norms[bad]:.3g} before normalization")
    return z / norms[:, None], norms


def forward(params: EncoderParams, features: np.ndarray,
            counter: ForwardCounter | None = None) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of feature vectors; returns unit rows and the backward cache."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"expected features of shape (batch, {params.input_dim}), got {x.shape}")
    inputs, pre_acts = [], []
    h = x
    last = params.num_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    u, norms = l2_normalize_rows(h)
    (counter if counter is not None else FORWARD_COUNTER).add(x.shape[0])
    return u, ForwardCache(inputs, pre_acts, norms, u)


def normalization_backward(u: np.ndarray, norms: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Apply ``(I - u u^T) / |z|`` row-wise."""
    radial = np.einsum("ij,ij->i", upstream, u)
    return (upstream - radial[:, None] * u) / norms[:, None]


def backward(params: EncoderParams, cache: ForwardCache, upstream_grads: np.ndarray) -> GradientBundle:
    g = np.asarray(upstream_grads, dtype=np.float64)
    if g.shape != cache.outputs.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {cache.outputs.shape}")
    if len(cache.inputs) != params.num_layers:
        raise ValueError("cache does not come from these parameters")
    dz = normalization_backward(cache.outputs, cache.norms, g)
    gw: list[np.ndarray] = [None] * params.num_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * params.num_layers  # type: ignore[list-item]
    for i in range(params.num_layers - 1, -1, -1):
        if i < params.num_layers - 1:
            dz = dz * (cache.pre_acts[i] > 0.0)
        gw[i] = cache.inputs[i].T @ dz
        gb[i] = dz.sum(axis=0)
        dz = dz @ params.weights[i].T
    return GradientBundle(gw, gb, dz)


def sgd_step(params: EncoderParams, grads: GradientBundle, lr: float,
             frozen_layers: Sequence[int] = ()) -> EncoderParams:
    """Plain SGD, ``p - lr * g``; layers in ``frozen_layers`` are copied unchanged."""
    if not lr > 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads.weights) != params.num_layers:
        raise ValueError("gradient bundle does not match parameters")
    new_w, new_b = [], []
    frozen = set(frozen_layers)
    for i, (w, b, dw, db) in enumerate(zip(params.weights, params.biases, grads.weights,
                                           grads.biases)):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ValueError(f"layer {i}: gradient shape mismatch")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise ValueError(f"layer {i}: non-finite gradient")
        if i in frozen:
            new_w.append(w.copy())
            new_b.append(b.copy())
        else:
            new_w.append(w - lr * dw)
            new_b.append(b - lr * db)
    return EncoderParams(new_w, new_b, params.seed, params.step + 1)


# Checkpoint layout (all integers little-endian):
#   8 bytes   magic b"ATLCKPT\0"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: version, seed, step, layers=[{"in","out"}...],
#             extra={...}, arrays=[{"name","shape"}...]
#   payload   each array of ``arrays`` in order, C order, float64 '<f8'
def save_checkpoint(sink: IO[bytes], params: EncoderParams,
                    extra_arrays: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays.append((f"layer{i}.weight", w))
        arrays.append((f"layer{i}.bias", b))
    for name, arr in (extra_arrays or {}).items():
        arrays.append((name, np.asarray(arr, dtype=np.float64)))
    header = {
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "step": params.step,
        "layers": [{"in": w.shape[0], "out": w.shape[1]} for w in params.weights],
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    sink.write(CHECKPOINT_MAGIC)
    sink.write(struct.pack("<I", len(blob)))
    sink.write(blob)
    for _, arr in arrays:
        sink.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(source: IO[bytes]) -> tuple[EncoderParams, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`: ``(params, extra_arrays, extra)``."""
    if source.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not an encoder checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", source.read(4))
    header = json.loads(source.read(hlen).decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = source.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"checkpoint truncated in array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    nl = len(header["layers"])
    weights = [arrays.pop(f"layer{i}.weight") for i in range(nl)]
    biases = [arrays.pop(f"layer{i}.bias") for i in range(nl)]
    params = EncoderParams(weights, biases, header.get("seed"), int(header.get("step", 0)))
    return params, arrays, header.get("extra", {})
