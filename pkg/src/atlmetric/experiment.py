"""Training loop, forward-pass accounting and the four-way ablation."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .dataset import Dataset
from .encoder import EncoderParams, ForwardCounter, backward, forward, init_encoder, sgd_step
from .evaluation import DEFAULT_RECALL_KS, embed_dataset, evaluate
from .losses import NormSoftmaxConfig, TripletBatch, atl_loss, norm_softmax_loss, renormalize_rows
from .sampling import (BatchSpec, MiniBatch, NegativeSamplingConfig, ProductVectorIndex,
                       construct_positive_pairs, epoch_recompute_batch, init_product_vectors,
                       oanns_sample_batch, oanns_update, random_batch, sample_negatives,
                       snapshot_product_vectors)
from .text_semantics import MarginConfig, MarginTable, WordVectorTable, hashed_word_vectors

LOSSES = ("atl", "fixed_margin", "norm_softmax")
SAMPLERS = ("random", "oanns", "epoch_recompute")
DEFAULT_WORD_DIM = 64


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "atl"
    sampler: str = "oanns"
    beta: float = 0.1
    fixed_margin: float = 0.1
    lr: float | None = None  # None: 0.04 for triplet losses, 0.01 for norm_softmax
    steps: int = 500
    spec: BatchSpec = field(default_factory=BatchSpec)
    embedding_dim: int = 128
    hidden_dims: tuple[int, ...] = (256,)
    scaling_mode: str = "range_consistent"
    seed: int = 0
    freeze_steps: int = 200
    temperature: float = 0.05
    d_clip: float = 0.5
    dim_n: int | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; choose from {SAMPLERS}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.fixed_margin > 0:
            raise ValueError("fixed margin must be positive")
        MarginConfig(self.beta, self.scaling_mode)  # validates beta and mode

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if self.loss == "norm_softmax" else 0.04

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class RunLog:
    loss: list[float] = field(default_factory=list)
    margin_min: list[float] = field(default_factory=list)
    margin_mean: list[float] = field(default_factory=list)
    margin_max: list[float] = field(default_factory=list)
    active_fraction: list[float] = field(default_factory=list)
    train_forwards: int = 0
    recompute_forwards: int = 0
    diagnostics: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    """What one training step saw; embeddings come from the pre-update model."""

    step: int
    batch: MiniBatch
    embeddings: np.ndarray
    loss: float
    margins: np.ndarray | None
    active: int


class ForwardCost(NamedTuple):
    train_forwards: int
    recompute_forwards: int


@dataclass
class TrainState:
    params: EncoderParams
    rng: np.random.Generator
    index: ProductVectorIndex | None = None
    snapshot: ProductVectorIndex | None = None
    class_weights: np.ndarray | None = None
    step: int = 0
    train_counter: ForwardCounter = field(default_factory=ForwardCounter)
    recompute_counter: ForwardCounter = field(default_factory=ForwardCounter)


class Trainer:
    """Owns the parameters and sampler state of one deterministic run."""

    def __init__(self, ds: Dataset, cfg: TrainConfig, word_table: WordVectorTable | None = None):
        if len(ds) < cfg.spec.P:
            raise ValueError(f"dataset has {len(ds)} products, batches need {cfg.spec.P}")
        self.ds = ds
        self.cfg = cfg
        enc_seq, index_seq, rng_seq, cls_seq = np.random.SeedSequence(cfg.seed).spawn(4)
        params = init_encoder(ds.d_in, cfg.hidden_dims, cfg.embedding_dim,
                              seed=int(enc_seq.generate_state(1)[0]))
        params.seed = cfg.seed
        self.state = TrainState(params, np.random.default_rng(rng_seq))
        if cfg.sampler == "oanns":
            self.state.index = init_product_vectors(len(ds), cfg.embedding_dim,
                                                    seed=int(index_seq.generate_state(1)[0]))
        if cfg.loss == "norm_softmax":
            self.state.class_weights = NormSoftmaxConfig.random(
                len(ds), cfg.embedding_dim, seed=int(cls_seq.generate_state(1)[0]),
                temperature=cfg.temperature).class_weights
        self.margins: MarginTable | None = None
        if cfg.loss == "atl":
            table = word_table if word_table is not None else default_word_table(ds)
            self.margins = MarginTable(ds.descriptions, table,
                                       MarginConfig(cfg.beta, cfg.scaling_mode))
        self.neg_cfg = NegativeSamplingConfig(cfg.dim_n, cfg.d_clip)
        self.epoch_length = math.ceil(len(ds) / cfg.spec.P)
        self.log = RunLog()

    def _sample(self) -> MiniBatch:
        st, cfg = self.state, self.cfg
        if cfg.sampler == "random":
            return random_batch(self.ds, cfg.spec, st.rng)
        if cfg.sampler == "oanns":
            return oanns_sample_batch(st.index, self.ds, cfg.spec, st.rng)
        if st.step % self.epoch_length == 0:
            emb = embed_dataset(st.params, self.ds, st.recompute_counter).embeddings
            st.snapshot = snapshot_product_vectors(self.ds, emb)
        return epoch_recompute_batch(self.ds, st.snapshot, cfg.spec, st.rng)

    def step(self) -> StepRecord:
        st, cfg = self.state, self.cfg
        batch = self._sample()
        feats = self.ds.image_matrix[batch.rows(self.ds)]
        emb, cache = forward(st.params, feats, st.train_counter)
        labels = batch.labels()
        margins = None
        frozen: Sequence[int] = ()
        if cfg.loss == "norm_softmax":
            ns_cfg = NormSoftmaxConfig(st.class_weights, cfg.temperature)
            res = norm_softmax_loss(emb, labels, ns_cfg)
            loss, grad_emb, active = res.loss, res.grad, emb.shape[0]
            if st.step < cfg.freeze_steps:
                frozen = range(st.params.num_layers - 1)
        else:
            pairs = construct_positive_pairs(batch)
            negs = sample_negatives(pairs, emb, labels, self.neg_cfg, st.rng)
            if self.margins is not None:
                margins = self.margins.margins(labels[pairs[:, 0]], labels[negs])
            else:
                margins = np.full(pairs.shape[0], cfg.fixed_margin)
            res = atl_loss(emb, TripletBatch(pairs[:, 0], pairs[:, 1], negs, margins))
            loss, grad_emb, active = res.loss, res.grad, res.num_active
        grads = backward(st.params, cache, grad_emb)
        st.params = sgd_step(st.params, grads, cfg.learning_rate, frozen)
        if cfg.loss == "norm_softmax":
            st.class_weights = renormalize_rows(st.class_weights - cfg.learning_rate * res.grad_weights)
        if cfg.sampler == "oanns":
            oanns_update(st.index, batch, emb)
        record = StepRecord(st.step, batch, emb, loss, margins, active)
        st.step += 1
        self._record(record)
        return record

    def _record(self, rec: StepRecord) -> None:
        log = self.log
        log.loss.append(rec.loss)
        m = rec.margins
        if m is not None and m.size:
            log.margin_min.append(float(m.min()))
            log.margin_mean.append(float(m.mean()))
            log.margin_max.append(float(m.max()))
            log.active_fraction.append(rec.active / m.size)
        else:
            log.active_fraction.append(1.0)
        log.train_forwards = self.state.train_counter.count
        log.recompute_forwards = self.state.recompute_counter.count

    def run(self, steps: int | None = None,
            callback: Callable[[StepRecord], None] | None = None) -> tuple[EncoderParams, RunLog]:
        for _ in range(self.cfg.steps if steps is None else steps):
            rec = self.step()
            if callback is not None:
                callback(rec)
        diag: Counter = Counter()
        if self.margins is not None:
            diag.update(self.margins.diagnostics)
        if self.state.index is not None:
            diag.update(self.state.index.diagnostics)
        self.log.diagnostics = dict(diag)
        return self.state.params, self.log


def default_word_table(ds: Dataset, dim: int = DEFAULT_WORD_DIM, seed: int = 0) -> WordVectorTable:
    """Hashed unit vectors for every token in the catalog's descriptions."""
    tokens = sorted({t for d in ds.descriptions for t in d})
    if not tokens:
        raise ValueError("no description tokens to build word vectors from")
    return hashed_word_vectors(tokens, dim, seed)


def train(ds: Dataset, word_table: WordVectorTable | None, cfg: TrainConfig,
          callback: Callable[[StepRecord], None] | None = None) -> tuple[EncoderParams, RunLog]:
    return Trainer(ds, cfg, word_table).run(callback=callback)


def forward_cost_report(state: TrainState, dataset_size: int | None = None) -> ForwardCost:
    """Images embedded for training batches vs. for epoch snapshots.

    ``dataset_size`` (image count) only serves as a consistency check: the
    snapshot term must be a whole number of dataset passes.
    """
    recompute = state.recompute_counter.count
    if dataset_size and recompute % dataset_size:
        raise ValueError("snapshot forwards are not a whole number of dataset passes")
    return ForwardCost(state.train_counter.count, recompute)


ABLATION_CONFIGS = {
    "baseline": ("fixed_margin", "random"),
    "+ATL": ("atl", "random"),
    "+OANNS": ("fixed_margin", "oanns"),
    "+both": ("atl", "oanns"),
}
ABLATION_METRICS = tuple(f"recall@{k}" for k in DEFAULT_RECALL_KS) + ("rr@10",)


@dataclass
class AblationResult:
    runs: list[dict]  # one per (config, seed, eval_set)

    def mean_rows(self) -> list[dict]:
        out = []
        for name in ABLATION_CONFIGS:
            for eval_set in ("eval", "shifted"):
                rows = [r for r in self.runs if r["config"] == name and r["eval_set"] == eval_set]
                if not rows:
                    continue
                mean = {m: float(np.mean([r[m] for r in rows])) for m in ABLATION_METRICS}
                out.append({"config": name, "eval_set": eval_set, "num_seeds": len(rows), **mean})
        return out

    def metric(self, config: str, eval_set: str, metric: str = "recall@1") -> dict[int, float]:
        """``seed -> value`` for one cell of the table."""
        return {r["seed"]: r[metric] for r in self.runs
                if r["config"] == config and r["eval_set"] == eval_set}

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mean": self.mean_rows()}


def run_ablation(train_ds: Dataset, eval_ds: Dataset, shifted_eval_ds: Dataset,
                 seeds: Sequence[int], base_cfg: TrainConfig,
                 word_table: WordVectorTable | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationResult:
    """Baseline / +ATL / +OANNS / +both, per seed, on both evaluation sets."""
    runs = []
    for seed in seeds:
        for name, (loss, sampler) in ABLATION_CONFIGS.items():
            cfg = replace(base_cfg, loss=loss, sampler=sampler, seed=int(seed))
            params, _ = train(train_ds, word_table, cfg)
            for eval_set, ds in (("eval", eval_ds), ("shifted", shifted_eval_ds)):
                report = evaluate(params, ds, DEFAULT_RECALL_KS)
                runs.append({"config": name, "seed": int(seed), "eval_set": eval_set,
                             **report.to_dict()})
            if progress is not None:
                progress(f"seed {seed} {name}: shifted recall@1 = {runs[-1]['recall@1']:.4f}")
    return AblationResult(runs)
