"""Batched low-rank adapter bank with optional shared factors and scale matrix.

For one adapted linear layer with frozen weight ``W0`` (d x k) and speaker n,
the unscaled update is ``V_n = W0 + alpha * B_n @ A_n`` and the merged weight is

* ``V_n`` when the scale matrix is off,
* ``m_n * V_n`` (column-wise) with scale on and normalization off,
* ``m_n * V_n / ||V_n||_c`` with both on.

Layers act on row vectors, ``y = x @ W`` with x of length d, so column j of a
weight holds the fan-in of output feature j and ``m`` is a per-output magnitude.
``B`` is the input-side projection and ``A`` the output side.

``B`` is stored as NB x d x r and ``A`` as NA x r x k where a leading size of 1
means the factor is shared by every speaker.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import kernels
from .container import Reader, Writer, read_file, write_atomic
from .errors import (
    CompatibilityError,
    ConfigurationError,
    DimensionError,
    FormatError,
    SingularColumnError,
)
from .tensor import RngStream, as_tensor, check_finite

SINGULAR_TOL = 1e-12
_B_INIT_SALT = 0xB1
_SHARED_STREAM_ID = 2**63 - 1


class SharingMode(str, enum.Enum):
    BATCHWISE = "batchwise"
    SHARED_B = "shared_B"
    SHARED_A = "shared_A"
    SHARED_BOTH = "shared_both"

    @property
    def b_shared(self):
        return self in (SharingMode.SHARED_B, SharingMode.SHARED_BOTH)

    @property
    def a_shared(self):
        return self in (SharingMode.SHARED_A, SharingMode.SHARED_BOTH)

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = str(text).replace("-", "_").lower()
        for mode in cls:
            if mode.value.lower() == key:
                return mode
        raise ConfigurationError(f"unknown sharing mode {text!r}")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 2
    alpha: float = 8.0
    sharing_mode: SharingMode = SharingMode.SHARED_B
    scale_enabled: bool = True
    normalization_enabled: bool = True
    num_speakers: int = 1
    freeze_B: bool = False
    # off by default: gradient flows through the column norm
    detach_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sharing_mode", SharingMode.parse(self.sharing_mode))
        if self.rank < 1:
            raise ConfigurationError(f"rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.num_speakers < 1:
            raise ConfigurationError(f"num_speakers must be >= 1, got {self.num_speakers}")
        if self.normalization_enabled and not self.scale_enabled:
            raise ConfigurationError("normalization requires the scale matrix")

    def with_speakers(self, n):
        return replace(self, num_speakers=n)


@dataclass
class AdaptedLayer:
    W0: np.ndarray
    B: np.ndarray
    A: np.ndarray
    m: np.ndarray | None = None

    @property
    def dims(self):
        return self.W0.shape


@dataclass
class LayerGradients:
    dB: np.ndarray | None
    dA: np.ndarray
    dm: np.ndarray | None


@dataclass
class MergeCache:
    W: np.ndarray
    V: np.ndarray
    norms: np.ndarray | None


@dataclass
class AdapterBank:
    config: AdapterConfig
    layers: list[AdaptedLayer]
    speaker_ids: tuple = field(default=())

    def __post_init__(self):
        if not self.speaker_ids:
            self.speaker_ids = tuple(range(self.config.num_speakers))

    @property
    def num_speakers(self):
        return self.config.num_speakers

    @property
    def layer_dims(self):
        return [layer.dims for layer in self.layers]

    def parameters(self):
        """Trainable arrays keyed by name; the arrays are the live storage."""
        params = {}
        for i, layer in enumerate(self.layers):
            if not self.config.freeze_B:
                params[f"{i}.B"] = layer.B
            params[f"{i}.A"] = layer.A
            if self.config.scale_enabled:
                params[f"{i}.m"] = layer.m
        return params

    def copy(self):
        return AdapterBank(
            self.config,
            [
                AdaptedLayer(l.W0, l.B.copy(), l.A.copy(), None if l.m is None else l.m.copy())
                for l in self.layers
            ],
            self.speaker_ids,
        )

    def merge(self, layer_index) -> MergeCache:
        layer = self.layers[layer_index]
        cfg = self.config
        W, V, norms = kernels.backend.merge_forward(
            layer.W0, layer.B, layer.A, layer.m if cfg.scale_enabled else None,
            float(cfg.alpha), cfg.num_speakers, cfg.normalization_enabled,
        )
        if norms is not None and norms.min() < SINGULAR_TOL:
            n, j = np.unravel_index(np.argmin(norms), norms.shape)
            raise SingularColumnError(
                f"layer {layer_index}, speaker {n}: column {j} of W0 + alpha*BA has norm {norms[n, j]:.3g}"
            )
        return MergeCache(check_finite(W, "merged weight"), V, norms)

    def weight_backward(self, layer_index, G, cache: MergeCache) -> LayerGradients:
        """Map the gradient w.r.t. merged weights (N x d x k) to adapter parameters."""
        layer = self.layers[layer_index]
        cfg = self.config
        db, da, dm = kernels.backend.merge_backward(
            np.ascontiguousarray(G), cache.V, cache.norms, layer.B, layer.A,
            layer.m if cfg.scale_enabled else None, float(cfg.alpha),
            cfg.normalization_enabled, cfg.detach_norm, not cfg.freeze_B,
        )
        return LayerGradients(db, da, dm)


def _b_stream(seed, stream_id):
    return RngStream(seed, stream_id).fork(_B_INIT_SALT)


def init_bank(config: AdapterConfig, base_layers, stream: RngStream, speaker_ids=None) -> AdapterBank:
    """Fresh bank over frozen ``base_layers``; the merged weight equals W0 for every speaker.

    Per-speaker factors are drawn from streams keyed by ``speaker_ids`` (default
    ``range(N)``), so a speaker's initial B does not depend on who else is in
    the batch.  ``m`` starts at the column norms of W0 when normalization is
    on and at ones when the scale acts on the unnormalized update.  ``stream`` only contributes its seed and is not advanced.
    """
    if not base_layers:
        raise ConfigurationError("no base layers to adapt")
    n = config.num_speakers
    speaker_ids = tuple(range(n)) if speaker_ids is None else tuple(int(s) for s in speaker_ids)
    if len(speaker_ids) != n:
        raise ConfigurationError(f"{len(speaker_ids)} speaker ids for {n} speakers")
    mode = config.sharing_mode
    r = config.rank
    if mode.b_shared:
        b_streams = [_b_stream(stream.seed, _SHARED_STREAM_ID)]
    else:
        b_streams = [_b_stream(stream.seed, sid) for sid in speaker_ids]
    layers = []
    for w0 in base_layers:
        w0 = as_tensor(w0).copy()
        if w0.ndim != 2:
            raise DimensionError(f"base weight must be 2-D, got shape {w0.shape}")
        w0.setflags(write=False)
        d, k = w0.shape
        B = np.stack([st.randn((d, r)) / np.sqrt(d) for st in b_streams])
        A = np.zeros((1 if mode.a_shared else n, r, k))
        m = None
        if config.normalization_enabled:
            norms = kernels.backend.column_norms(np.ascontiguousarray(w0[None]))
            m = np.repeat(norms, n, axis=0)
        elif config.scale_enabled:
            # unnormalized merge m * V: unit magnitudes keep the init identity
            m = np.ones((n, k))
        layers.append(AdaptedLayer(w0, B, A, m))
    return AdapterBank(config, layers, speaker_ids)


def merged_weight(bank: AdapterBank, layer_index: int, n: int) -> np.ndarray:
    if not 0 <= n < bank.num_speakers:
        raise IndexError(f"speaker {n} out of range for N={bank.num_speakers}")
    return bank.merge(layer_index).W[n].copy()


def adapted_forward(bank: AdapterBank, layer_index: int, x, cache: MergeCache | None = None):
    """``out[n, t] = x[n, t] @ W_n`` for x of shape N x T x d; output is N x T x k."""
    x = as_tensor(x)
    layer = bank.layers[layer_index]
    d, k = layer.dims
    if x.ndim != 3 or x.shape[0] != bank.num_speakers or x.shape[2] != d:
        raise DimensionError(f"expected input N x T x {d} with N={bank.num_speakers}, got {x.shape}")
    cache = cache or bank.merge(layer_index)
    return np.matmul(x, cache.W)


def adapted_backward(bank: AdapterBank, layer_index: int, x, upstream, cache: MergeCache | None = None):
    """Gradients of a scalar loss w.r.t. the adapter parameters and the layer input.

    Returns ``(LayerGradients, dL/dx)``.
    """
    x, upstream = as_tensor(x), as_tensor(upstream)
    layer = bank.layers[layer_index]
    d, k = layer.dims
    n = bank.num_speakers
    if x.ndim != 3 or x.shape[0] != n or x.shape[2] != d:
        raise DimensionError(f"expected input N x T x {d} with N={n}, got {x.shape}")
    if upstream.shape != (n, x.shape[1], k):
        raise DimensionError(f"upstream gradient {upstream.shape} does not match output {(n, x.shape[1], k)}")
    cache = cache or bank.merge(layer_index)
    G = np.matmul(x.transpose(0, 2, 1), upstream)
    dx = np.matmul(upstream, cache.W.transpose(0, 2, 1))
    return bank.weight_backward(layer_index, G, cache), dx


def param_count(config: AdapterConfig, layer_dims) -> Fraction:
    """Trainable parameters per speaker as an exact rational.

    A shared factor counts 1/N toward each speaker; a frozen B counts zero.
    """
    if not layer_dims:
        raise ConfigurationError("layer_dims is empty")
    n = config.num_speakers
    r = config.rank
    mode = config.sharing_mode
    total = Fraction(0)
    for d, k in layer_dims:
        if not config.freeze_B:
            total += Fraction(r * d, n) if mode.b_shared else r * d
        total += Fraction(r * k, n) if mode.a_shared else r * k
        if config.scale_enabled:
            total += k
    return total


def enumerate_param_count(bank: AdapterBank) -> Fraction:
    """Cross-check of :func:`param_count` by counting the live trainable entries."""
    # batched tensors hold N slices, shared ones one: either way size/N per speaker
    return Fraction(sum(arr.size for arr in bank.parameters().values()), bank.num_speakers)


BANK_MAGIC = b"NVBK"
_MODE_CODES = {mode: i for i, mode in enumerate(SharingMode)}
_FLAG_SCALE, _FLAG_NORM, _FLAG_FREEZE_B, _FLAG_DETACH = 1, 2, 4, 8


def bank_to_bytes(bank: AdapterBank) -> bytes:
    cfg = bank.config
    w = Writer(BANK_MAGIC)
    flags = (
        _FLAG_SCALE * cfg.scale_enabled
        | _FLAG_NORM * cfg.normalization_enabled
        | _FLAG_FREEZE_B * cfg.freeze_B
        | _FLAG_DETACH * cfg.detach_norm
    )
    w.pack("IdBBI", cfg.rank, cfg.alpha, _MODE_CODES[cfg.sharing_mode], flags, cfg.num_speakers)
    w.pack("I", len(bank.layers))
    for d, k in bank.layer_dims:
        w.pack("II", d, k)
    for layer in bank.layers:
        w.add(layer.W0)
    for layer in bank.layers:
        w.add(layer.B)
        w.add(layer.A)
        if cfg.scale_enabled:
            w.add(layer.m)
    return w.to_bytes()


def bank_from_bytes(data: bytes) -> AdapterBank:
    rd = Reader(data, BANK_MAGIC)
    cfg_offset = rd.offset
    rank, alpha, mode_code, flags, n = rd.unpack("IdBBI")
    modes = list(SharingMode)
    if mode_code >= len(modes) or flags >= 16:
        raise FormatError(f"invalid sharing mode {mode_code} or flags {flags}", cfg_offset)
    (count,) = rd.unpack("I")
    dims = [rd.unpack("II") for _ in range(count)]
    rd.end_header()
    try:
        cfg = AdapterConfig(
            rank=rank, alpha=alpha, sharing_mode=modes[mode_code],
            scale_enabled=bool(flags & _FLAG_SCALE), normalization_enabled=bool(flags & _FLAG_NORM),
            num_speakers=n, freeze_B=bool(flags & _FLAG_FREEZE_B), detach_norm=bool(flags & _FLAG_DETACH),
        )
    except ConfigurationError as exc:
        raise FormatError(f"invalid adapter config: {exc}", cfg_offset) from None
    nb = 1 if cfg.sharing_mode.b_shared else n
    na = 1 if cfg.sharing_mode.a_shared else n
    shapes = [(d, k) for d, k in dims]
    for d, k in dims:
        shapes += [(nb, d, rank), (na, rank, k)] + ([(n, k)] if cfg.scale_enabled else [])
    arrays = rd.arrays(shapes)
    w0s, rest = arrays[:count], arrays[count:]
    per = 3 if cfg.scale_enabled else 2
    layers = []
    for i, w0 in enumerate(w0s):
        w0.setflags(write=False)
        chunk = rest[i * per : (i + 1) * per]
        layers.append(AdaptedLayer(w0, chunk[0], chunk[1], chunk[2] if cfg.scale_enabled else None))
    return AdapterBank(cfg, layers)


def save_bank(bank: AdapterBank, path):
    write_atomic(path, bank_to_bytes(bank))


def load_bank(path, num_speakers: int | None = None, layer_dims=None) -> AdapterBank:
    """Read a bank checkpoint, optionally checking it fits the loading session."""
    bank = bank_from_bytes(read_file(path))
    if num_speakers is not None and bank.num_speakers != num_speakers:
        raise CompatibilityError(
            f"bank holds N={bank.num_speakers} speakers but the session has N={num_speakers}"
        )
    if layer_dims is not None and [tuple(x) for x in layer_dims] != [tuple(x) for x in bank.layer_dims]:
        raise CompatibilityError(f"bank layer dims {bank.layer_dims} do not match model dims {list(layer_dims)}")
    return bank
