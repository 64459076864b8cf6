"""Desk-scale metric-learning mechanisms: a small autodiff engine, triplet
loss variants, generalized-mean pooling, warmup/cyclic LR schedules,
weight-averaging posteriors, retrieval evaluation, architecture
accounting, and a multi-camera tracking simulator."""

__version__ = "0.1.0"

from .autodiff import (GradCheckReport, ShapeError, Tensor, backward,
                       build_op, finite_diff_check)
from .data import IdentityDataset, PkSpec, ReaParams, gen_synthetic
from .evaluation import EvalResult, distance_matrix, evaluate_reid
from .losses import (EmbeddingBatch, SmoothingConfig, TripletConfig,
                     cross_entropy_smoothed, pairwise_distances, triplet_loss)
from .pooling import GemLayer, gem_pool
from .schedule import ScheduleState, cyclic_lr, is_snapshot_epoch, warmup_lr
from .swag import (SwagPosterior, WeightLayout, WeightVector, bma_predict,
                   collect_snapshot, swa_weights, swag_sample)
from .training import RunConfig, TrainResult, train
