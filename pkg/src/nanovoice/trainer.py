"""Batch-wise adapter fine-tuning and the sequential single-speaker baseline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import AdapterBank, AdapterConfig, SharingMode, init_bank, param_count
from .diffusion import T_MIN, NoiseSchedule, lambda_of
from .errors import ConfigurationError, NonFiniteError, TrainingError
from .optim import AdamState, adam_step
from .scorenet import ScoreNet, masked_losses, score_backward, score_forward
from .tensor import RngStream
from .toy import SpeakerBatch

_NOISE_SALT = 0x7E


@dataclass
class AdaptJob:
    bank: AdapterBank
    batch: SpeakerBatch
    iterations: int = 500
    seed: int = 0
    lr: float = 1e-4
    loss_history: np.ndarray | None = None

    def __post_init__(self):
        if self.bank.num_speakers != self.batch.num_speakers:
            raise ConfigurationError(
                f"bank has N={self.bank.num_speakers} but batch has N={self.batch.num_speakers}"
            )


@dataclass
class RunReport:
    config: dict
    param_count: float
    losses: list = field(default_factory=list)
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "config": self.config,
            "param_count_per_speaker": self.param_count,
            "losses": self.losses,
            "seconds": self.seconds,
            **self.extra,
        }


def noise_stream(seed, speaker_id) -> RngStream:
    """Per-speaker stream for (t, eps) draws; independent of batch composition."""
    return RngStream(seed, speaker_id).fork(_NOISE_SALT)


def _check_slices(finite, it, ids, what):
    if not np.all(finite):
        bad = int(np.flatnonzero(~finite)[0])
        raise TrainingError(f"non-finite {what} at iteration {it} for speaker {ids[bad]}")


def config_dict(cfg: AdapterConfig):
    return {
        "rank": cfg.rank, "alpha": cfg.alpha, "sharing_mode": cfg.sharing_mode.value,
        "scale_enabled": cfg.scale_enabled, "normalization_enabled": cfg.normalization_enabled,
        "num_speakers": cfg.num_speakers, "freeze_B": cfg.freeze_B, "detach_norm": cfg.detach_norm,
    }


def adapt_batched(net: ScoreNet, job: AdaptJob, schedule: NoiseSchedule | None = None):
    """Fine-tune all speakers of ``job.batch`` in one batched pass per iteration.

    The objective is the sum of per-speaker masked losses, so each speaker's
    batched A/m slices receive exactly the gradient a solo run would produce.
    Returns ``(bank, RunReport)``; ``job.bank`` is updated in place.
    """
    schedule = schedule or NoiseSchedule()
    bank, batch = job.bank, job.batch
    n = batch.num_speakers
    ids = batch.speaker_ids or tuple(range(n))
    streams = [noise_stream(job.seed, sid) for sid in ids]
    state = AdamState(lr=job.lr)
    params = bank.parameters()
    history = np.empty((job.iterations, n))
    mask = batch.mask
    start = time.perf_counter()
    for it in range(job.iterations):
        t = np.empty(n)
        eps = np.zeros_like(batch.x0)
        for i, st in enumerate(streams):
            t[i] = st.uniform(T_MIN, 1.0)
            eps[i, :, : batch.lengths[i]] = st.randn((batch.x0.shape[1], batch.lengths[i]))
        lam = lambda_of(schedule, t)
        x_t = np.sqrt(lam)[:, None, None] * batch.x0 + np.sqrt(1.0 - lam)[:, None, None] * eps
        _check_slices(np.isfinite(x_t).all(axis=(1, 2)), it, ids, "input")
        try:
            score, cache = score_forward(net, bank, x_t, t, batch.content, mask, schedule=schedule,
                                         return_cache=True)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite score at iteration {it}: {exc}") from exc
        losses, dscore = masked_losses(score, eps, cache.sigma, mask)
        _check_slices(np.isfinite(losses), it, ids, "loss")
        _, grads = score_backward(net, bank, cache, dscore, base_grads=False)
        adam_step(params, grads, state)
        history[it] = losses
    elapsed = time.perf_counter() - start
    job.loss_history = history
    report = RunReport(
        config=config_dict(bank.config),
        param_count=float(param_count(bank.config, bank.layer_dims)),
        losses=history.tolist(),
        seconds=elapsed,
    )
    return bank, report


def new_job(net: ScoreNet, config: AdapterConfig, batch: SpeakerBatch, seed, iterations=500, lr=1e-4):
    cfg = config.with_speakers(batch.num_speakers)
    bank = init_bank(cfg, net.base_layers(), RngStream(seed), speaker_ids=batch.speaker_ids or None)
    return AdaptJob(bank, batch, iterations=iterations, seed=seed, lr=lr)


def adapt_sequential(net: ScoreNet, batch: SpeakerBatch, config: AdapterConfig, seed, iterations=500,
                     lr=1e-4, schedule=None):
    """Adapt each speaker alone, one after another; returns ``(banks, RunReport)``."""
    banks, histories = [], []
    start = time.perf_counter()
    for i in range(batch.num_speakers):
        job = new_job(net, config, batch.select([i]), seed, iterations, lr)
        bank, _ = adapt_batched(net, job, schedule)
        banks.append(bank)
        histories.append(job.loss_history[:, 0])
    elapsed = time.perf_counter() - start
    cfg = config.with_speakers(1)
    report = RunReport(
        config=config_dict(cfg),
        param_count=float(param_count(cfg, net.adapted_layer_dims())),
        losses=np.stack(histories, axis=1).tolist(),
        seconds=elapsed,
    )
    return banks, report


def freeze_shared_B(job: AdaptJob) -> AdaptJob:
    """Same job with the shared B held at its initial value."""
    if job.bank.config.sharing_mode is not SharingMode.SHARED_B:
        raise ConfigurationError(
            f"freezing B requires sharing mode shared_B, got {job.bank.config.sharing_mode.value}"
        )
    bank = AdapterBank(replace(job.bank.config, freeze_B=True), job.bank.layers, job.bank.speaker_ids)
    return AdaptJob(bank, job.batch, job.iterations, job.seed, job.lr)
