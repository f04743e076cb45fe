"""Synthetic speakers, padded reference batches and the toy similarity metric.

A toy speaker is a unit-norm spectral signature over F bins.  Frame j of an
utterance with content codes c is::

    GAIN * signature * envelope[c_j]
    + GAIN * amp * sin(2 pi j / period + phase) * signature
    + noise

where the content envelopes are shared by all speakers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import Reader, Writer, read_file, write_atomic
from .errors import ConfigurationError, DegenerateInputError, DimensionError
from .tensor import RngStream

N_BINS = 16
N_CODES = 8
GAIN = 3.0
NOISE_STD = 0.05
MAX_SIGNATURE_COSINE = 0.9
MIN_LENGTH = 4

_ENVELOPE_SEED = 0x5EED
_SIG_SALT, _RENDER_SALT, _CONTENT_SALT = 11, 12, 13


def content_envelopes(n_bins=N_BINS, n_codes=N_CODES) -> np.ndarray:
    """Fixed per-code spectral envelopes (n_codes x F), entries in [0.5, 1.5]."""
    return RngStream(_ENVELOPE_SEED, n_bins * 1000 + n_codes).uniform(0.5, 1.5, (n_codes, n_bins))


@dataclass
class ToySpeaker:
    speaker_id: int
    signature: np.ndarray
    mod_amp: float
    mod_period: float
    mod_phase: float
    seed: int

    @property
    def n_bins(self):
        return self.signature.shape[0]


@dataclass
class SpeakerBatch:
    x0: np.ndarray
    lengths: tuple
    mask: np.ndarray
    content: np.ndarray
    speaker_ids: tuple = ()

    @property
    def num_speakers(self):
        return self.x0.shape[0]

    def select(self, indices):
        """Sub-batch of the given slices, re-padded to its own maximum length."""
        indices = list(indices)
        length = max(self.lengths[i] for i in indices)
        return SpeakerBatch(
            self.x0[indices, :, :length].copy(),
            tuple(self.lengths[i] for i in indices),
            self.mask[indices, :, :length].copy(),
            self.content[indices, :length].copy(),
            tuple(self.speaker_ids[i] for i in indices) if self.speaker_ids else (),
        )


def _draw_speaker(speaker_id, seed, n_bins, center=None, spread=None):
    st = RngStream(seed, speaker_id).fork(_SIG_SALT)
    if center is None:
        sig = st.randn(n_bins)
    else:
        sig = center + spread * st.randn(n_bins) / np.sqrt(n_bins)
    sig = sig / np.linalg.norm(sig)
    amp, period, phase = st.uniform(0.05, 0.2), st.uniform(6.0, 12.0), st.uniform(0.0, 2 * np.pi)
    return ToySpeaker(speaker_id, sig, float(amp), float(period), float(phase), seed)


def gen_speakers(count, seed, n_bins=N_BINS, first_id=0) -> list[ToySpeaker]:
    """``count`` speakers whose signatures have pairwise cosine below 0.9.

    A candidate that violates the bound is redrawn under the next free id, so
    the result is deterministic in ``(count, seed, first_id)``.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    speakers, next_id = [], first_id
    while len(speakers) < count:
        cand = _draw_speaker(next_id, seed, n_bins)
        next_id += 1
        if all(abs(cand.signature @ s.signature) < MAX_SIGNATURE_COSINE for s in speakers):
            speakers.append(cand)
    return speakers


def gen_clustered_speakers(n_clusters, per_cluster, seed, n_bins=N_BINS, spread=1.0, first_id=0):
    """Speakers drawn around ``n_clusters`` random signature centres.

    Returns a list of lists, one per cluster.  Used for the same-group versus
    mixed-group analysis.
    """
    centres = RngStream(seed, 2**62).fork(_SIG_SALT).randn((n_clusters, n_bins))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    clusters, next_id = [], first_id
    for c in range(n_clusters):
        group = []
        while len(group) < per_cluster:
            group.append(_draw_speaker(next_id, seed, n_bins, centres[c], spread))
            next_id += 1
        clusters.append(group)
    return clusters


def random_content(length, stream: RngStream, n_codes=N_CODES) -> np.ndarray:
    """Phoneme-like runs: each code is held for 3 to 6 frames."""
    codes = np.empty(length, dtype=np.int64)
    pos = 0
    while pos < length:
        run = int(stream.integers(3, 7))
        codes[pos : pos + run] = stream.integers(0, n_codes)
        pos += run
    return codes


def render(speaker: ToySpeaker, length, content, stream: RngStream | None, noise_std=NOISE_STD):
    """Mel-like F x length array; ``stream=None`` or ``noise_std=0`` gives no noise."""
    if length < MIN_LENGTH:
        raise DimensionError(f"length must be >= {MIN_LENGTH}, got {length}")
    content = np.asarray(content, dtype=np.int64)
    if content.shape != (length,):
        raise DimensionError(f"need {length} content codes, got shape {content.shape}")
    env = content_envelopes(speaker.n_bins)
    j = np.arange(length)
    wave = speaker.mod_amp * np.sin(2 * np.pi * j / speaker.mod_period + speaker.mod_phase)
    frames = GAIN * speaker.signature[:, None] * (env[content].T + wave[None, :])
    if stream is not None and noise_std > 0:
        frames = frames + noise_std * stream.randn(frames.shape)
    return frames


def utterance_streams(speaker: ToySpeaker, seed):
    base = RngStream(seed, speaker.speaker_id)
    return base.fork(_CONTENT_SALT), base.fork(_RENDER_SALT)


def render_utterance(speaker: ToySpeaker, length, seed):
    """Content codes and rendered frames for one reference utterance."""
    content_stream, noise_stream = utterance_streams(speaker, seed)
    content = random_content(length, content_stream)
    return content, render(speaker, length, content, noise_stream)


def make_reference_batch(speakers, lengths, seed) -> SpeakerBatch:
    """Pad one utterance per speaker to the longest length, with masks and content codes."""
    if not speakers:
        raise ConfigurationError("empty speaker list")
    if len(lengths) != len(speakers):
        raise DimensionError(f"{len(lengths)} lengths for {len(speakers)} speakers")
    n, f, L = len(speakers), speakers[0].n_bins, max(lengths)
    x0 = np.zeros((n, f, L))
    mask = np.zeros((n, 1, L))
    content = np.zeros((n, L), dtype=np.int64)
    for i, (spk, length) in enumerate(zip(speakers, lengths)):
        codes, frames = render_utterance(spk, int(length), seed)
        x0[i, :, :length] = frames
        mask[i, :, :length] = 1.0
        content[i, :length] = codes
    return SpeakerBatch(x0, tuple(int(x) for x in lengths), mask, content, tuple(s.speaker_id for s in speakers))


def signature_of(mel, mask=None) -> np.ndarray:
    """Unit-norm masked time average of the frames of an F x T array."""
    mel = np.asarray(mel, dtype=float)
    if mask is None:
        weights = np.ones(mel.shape[1])
    else:
        weights = np.asarray(mask, dtype=float).reshape(-1)
        if weights.shape[0] != mel.shape[1]:
            raise DimensionError(f"mask of {weights.shape[0]} frames for {mel.shape[1]} frames")
    if weights.sum() == 0:
        raise DegenerateInputError("all frames are masked")
    mean = (mel * weights[None, :]).sum(axis=1) / weights.sum()
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise DegenerateInputError("time-averaged frame is zero")
    return mean / norm


def similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=float).ravel(), np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def expected_signature(speaker: ToySpeaker, content=None) -> np.ndarray:
    """Noise-free direction the time-averaged frame converges to."""
    env = content_envelopes(speaker.n_bins)
    mean_env = env.mean(axis=0) if content is None else env[np.asarray(content)].mean(axis=0)
    v = speaker.signature * mean_env
    return v / np.linalg.norm(v)


DATASET_MAGIC = b"NVDS"


def save_speaker(speaker: ToySpeaker, path, utterances=()):
    """Dump a speaker (and optionally rendered (content, frames) pairs) to one file."""
    w = Writer(DATASET_MAGIC)
    w.pack("qqI", speaker.speaker_id, speaker.seed, speaker.n_bins)
    w.pack("ddd", speaker.mod_amp, speaker.mod_period, speaker.mod_phase)
    w.pack("I", len(utterances))
    for content, frames in utterances:
        w.pack("I", frames.shape[1])
    w.add(speaker.signature)
    for content, frames in utterances:
        w.add(np.asarray(content, dtype=float))
        w.add(frames)
    write_atomic(path, w.to_bytes())


def load_speaker(path):
    rd = Reader(read_file(path), DATASET_MAGIC)
    speaker_id, seed, n_bins = rd.unpack("qqI")
    amp, period, phase = rd.unpack("ddd")
    (count,) = rd.unpack("I")
    lengths = [rd.unpack("I")[0] for _ in range(count)]
    rd.end_header()
    shapes = [(n_bins,)]
    for length in lengths:
        shapes += [(length,), (n_bins, length)]
    arrays = rd.arrays(shapes)
    speaker = ToySpeaker(speaker_id, arrays[0], amp, period, phase, seed)
    utterances = [(arrays[1 + 2 * i].astype(np.int64), arrays[2 + 2 * i]) for i in range(count)]
    return speaker, utterances
