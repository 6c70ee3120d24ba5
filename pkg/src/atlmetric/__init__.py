"""Adaptive triplet loss and online anchor nearest-neighbor sampling for metric learning."""

from ._kernels import BACKEND
from .dataset import (Dataset, DomainShiftConfig, ProductRecord, SyntheticConfig,
                      apply_domain_shift, generate_synthetic, load_dataset, save_dataset)
from .encoder import EncoderParams, backward, forward, init_encoder, sgd_step
from .evaluation import EmbeddedGallery, MetricsReport, evaluate, evaluate_retrieval, knn_search
from .experiment import TrainConfig, Trainer, run_ablation, train
from .losses import TripletBatch, atl_loss, fixed_margin_loss, norm_softmax_loss
from .sampling import BatchSpec, NegativeSamplingConfig, ProductVectorIndex
from .text_semantics import MarginConfig, WordVectorTable, adaptive_margin, embed_description

__version__ = "0.1.0"
