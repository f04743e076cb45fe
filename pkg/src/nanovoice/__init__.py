"""Batch-wise multi-speaker low-rank adapters on a toy diffusion score model."""

from .adapters import (
    AdapterBank,
    AdapterConfig,
    SharingMode,
    adapted_backward,
    adapted_forward,
    init_bank,
    load_bank,
    merged_weight,
    param_count,
    save_bank,
)
from .config import ExperimentConfig, load_config
from .diffusion import NoiseSchedule, corrupt, lambda_of, reverse_step, sample, score_loss
from .errors import NanoVoiceError
from .experiments import evaluate, generate, pretrain_net, reference_batch
from .scorenet import NetDims, ScoreNet, init_net, load_net, pretrain, save_net, score_forward
from .tensor import RngStream
from .trainer import AdaptJob, adapt_batched, adapt_sequential, freeze_shared_B, new_job

__version__ = "0.1.0"

__all__ = [
    "AdaptJob",
    "AdapterBank",
    "AdapterConfig",
    "ExperimentConfig",
    "NanoVoiceError",
    "NetDims",
    "NoiseSchedule",
    "RngStream",
    "ScoreNet",
    "SharingMode",
    "adapt_batched",
    "adapt_sequential",
    "adapted_backward",
    "adapted_forward",
    "corrupt",
    "evaluate",
    "freeze_shared_B",
    "generate",
    "init_bank",
    "init_net",
    "lambda_of",
    "load_bank",
    "load_config",
    "load_net",
    "merged_weight",
    "new_job",
    "param_count",
    "pretrain",
    "pretrain_net",
    "reference_batch",
    "reverse_step",
    "sample",
    "save_bank",
    "save_net",
    "score_forward",
    "score_loss",
]
