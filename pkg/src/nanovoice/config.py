"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment.  Values are parsed according to
the type of the matching :class:`ExperimentConfig` field; integer lists are
comma separated (``seeds = 0, 1, 2``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .adapters import AdapterConfig, SharingMode
from .diffusion import NoiseSchedule
from .errors import ConfigurationError
from .scorenet import NetDims

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class ExperimentConfig:
    out: str = "nanovoice-out"
    net: str = ""  # pretrained checkpoint; empty means <out>/net.nvsn
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    # diffusion
    beta0: float = 0.05
    beta1: float = 20.0
    sample_steps: int = 50
    # network
    n_bins: int = 16
    hidden: int = 32
    attn: int = 8
    ff: int = 64
    time_dim: int = 16
    n_codes: int = 8
    n_blocks: int = 2
    n_train_speakers: int = 8
    min_len: int = 24
    max_len: int = 48
    # pretraining
    train_seed: int = 1
    utterances_per_speaker: int = 16
    pretrain_iters: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 16
    # adaptation
    rank: int = 2
    alpha: float = 8.0
    mode: str = "shared_B"
    scale: bool = True
    norm: bool = True
    freeze_b: bool = False
    detach_norm: bool = False
    speakers: int = 8
    iters: int = 500
    lr: float = 1e-3
    speaker_seed: int = 100
    # experiments
    sweep_sizes: tuple = (1, 2, 4, 8)
    bench_reps: int = 3
    bench_iters: int = 100
    group_clusters: int = 2
    group_spread: float = 0.5
    gradcheck_instances: int = 20
    fd_step: float = 1e-5
    fd_tol: float = 1e-4

    def __post_init__(self):
        SharingMode.parse(self.mode)
        if self.min_len > self.max_len:
            raise ConfigurationError(f"min_len {self.min_len} exceeds max_len {self.max_len}")
        if self.speakers < 1 or self.iters < 0:
            raise ConfigurationError("speakers must be >= 1 and iters >= 0")
        if not self.seeds:
            raise ConfigurationError("seeds must list at least one seed")

    @property
    def net_path(self):
        return self.net or f"{self.out}/net.nvsn"

    def dims(self) -> NetDims:
        return NetDims(self.n_bins, self.hidden, self.attn, self.ff, self.time_dim, self.n_codes,
                       self.n_train_speakers, self.n_blocks)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.beta0, self.beta1)

    def adapter(self, **changes) -> AdapterConfig:
        cfg = AdapterConfig(
            rank=self.rank, alpha=self.alpha, sharing_mode=SharingMode.parse(self.mode),
            scale_enabled=self.scale, normalization_enabled=self.norm and self.scale,
            num_speakers=self.speakers, freeze_B=self.freeze_b, detach_norm=self.detach_norm,
        )
        return dataclasses.replace(cfg, **changes)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _convert(name, raw, line_no):
    default = _FIELDS[name].default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p, 0) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigurationError(f"line {line_no}: bad value {raw!r} for {name}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip().replace("-", "_"), raw.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {line_no}: expected key = value")
        if key not in _FIELDS:
            raise ConfigurationError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _convert(key, raw, line_no)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
