"""Toy conditional score network with adapter injection sites.

Frames are processed as N x L x F.  The network predicts the noise and returns
the score ``-eps_hat / sqrt(1 - lambda_t)``::

    H   = content_emb[c] + speaker_emb[s] + time_mlp(t)
    for each block:
        H = H + softmax(Q K^T / sqrt(a), keys masked) V W_o^T       (q, k, v, o)
        H = H + silu(H W_1^T + b_1) W_2^T + b_2
    H   = H + X W_in^T + b_in
    H   = H + silu(H W_h1^T + b_h1) W_h2^T + b_h2
    eps_hat = H W_out^T + b_out

The attention blocks mix the conditioning stream over time and their q/k/v/o
projections are the adapted layers.  The noisy frames join afterwards through a
per-frame head: pooling x_t over time inside attention leaves the time-constant
noise mode under-contracted and the reverse process drifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterBank
from .container import Reader, Writer, read_file, write_atomic
from .diffusion import NoiseSchedule, lambda_of
from .errors import CompatibilityError, DimensionError, DomainError, FormatError, TrainingError
from .optim import adam_step
from .tensor import RngStream, check_finite
from .toy import make_reference_batch

ADAPTED = ("wq", "wk", "wv", "wo")
NET_MAGIC = b"NVSN"
_TIME_SCALE = 100.0


@dataclass(frozen=True)
class NetDims:
    n_bins: int = 16
    hidden: int = 32
    attn: int = 8
    ff: int = 64
    time_dim: int = 16
    n_codes: int = 8
    n_train_speakers: int = 8
    n_blocks: int = 2


@dataclass
class ScoreNet:
    dims: NetDims
    params: dict = field(default_factory=dict)

    def adapted_names(self):
        return [f"blocks.{b}.{w}" for b in range(self.dims.n_blocks) for w in ADAPTED]

    def base_layers(self):
        return [self.params[name] for name in self.adapted_names()]

    def adapted_layer_dims(self):
        return [self.params[name].shape for name in self.adapted_names()]

    def copy(self):
        return ScoreNet(self.dims, {k: v.copy() for k, v in self.params.items()})


def init_net(dims: NetDims, stream: RngStream) -> ScoreNet:
    F, h, a, f, E = dims.n_bins, dims.hidden, dims.attn, dims.ff, dims.time_dim

    def dense(d, k):
        return stream.randn((d, k)) / math.sqrt(k)

    p = {
        "w_in": dense(h, F),
        "b_in": np.zeros(h),
        "content_emb": 0.5 * stream.randn((dims.n_codes, h)),
        "speaker_emb": 0.5 * stream.randn((dims.n_train_speakers, h)),
        "wt1": dense(h, E),
        "bt1": np.zeros(h),
        "wt2": dense(h, h),
        "bt2": np.zeros(h),
        "w_h1": dense(f, h),
        "b_h1": np.zeros(f),
        "w_h2": dense(h, f) * 0.5,
        "b_h2": np.zeros(h),
        "w_out": dense(F, h),
        "b_out": np.zeros(F),
    }
    for b in range(dims.n_blocks):
        # adapted projections are stored input x output and applied as x @ W
        p[f"blocks.{b}.wq"] = dense(a, h).T
        p[f"blocks.{b}.wk"] = dense(a, h).T
        p[f"blocks.{b}.wv"] = dense(a, h).T
        p[f"blocks.{b}.wo"] = dense(h, a).T * 0.5
        p[f"blocks.{b}.w1"] = dense(f, h)
        p[f"blocks.{b}.b1"] = np.zeros(f)
        p[f"blocks.{b}.w2"] = dense(h, f) * 0.5
        p[f"blocks.{b}.b2"] = np.zeros(h)
    return ScoreNet(dims, p)


def _silu(x):
    # two-branch sigmoid: exp only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return x * s, s


def time_features(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / half)
    arg = _TIME_SCALE * np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _lin(x, w):
    """x: N x L x d; w: d x k (shared) or N x d x k (per speaker)."""
    return np.matmul(x, w)


def _lin_back(x, dy, w):
    """Returns ``(dL/dx, dL/dw)`` for ``y = x @ w``; dL/dw is per speaker when w is."""
    if w.ndim == 2:
        return dy @ w.T, np.einsum("nld,nlk->dk", x, dy)
    return np.matmul(dy, w.transpose(0, 2, 1)), np.matmul(x.transpose(0, 2, 1), dy)


@dataclass
class ForwardCache:
    tensors: dict
    merges: dict
    weights: dict
    t: np.ndarray
    sigma: np.ndarray
    content: np.ndarray
    speakers: np.ndarray | None
    key_mask: np.ndarray


def _broadcast_t(t, n):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        t = np.full(n, float(t))
    if t.shape != (n,):
        raise DimensionError(f"t must be a scalar or have shape ({n},), got {t.shape}")
    return t


def _key_mask(mask, n, length):
    if mask is None:
        return np.ones((n, length), dtype=bool)
    m = np.asarray(mask)
    m = m.reshape(n, -1) if m.ndim == 3 else m
    if m.shape != (n, length):
        raise DimensionError(f"mask shape {np.shape(mask)} does not match batch N={n}, L={length}")
    return m > 0


def score_forward(net: ScoreNet, bank: AdapterBank | None, x_t, t, content, mask=None,
                  speakers=None, schedule: NoiseSchedule | None = None, return_cache=False):
    """Score estimate for x_t of shape N x F x L.

    ``t`` is a scalar or one time per batch slice.  ``speakers`` selects
    pretraining speaker embeddings (None means no speaker conditioning).  With a
    bank, every q/k/v/o projection uses the per-speaker merged weights.
    """
    schedule = schedule or NoiseSchedule()
    p, dims = net.params, net.dims
    x_t = np.asarray(x_t, dtype=float)
    if x_t.ndim != 3 or x_t.shape[1] != dims.n_bins:
        raise DimensionError(f"x_t must be N x {dims.n_bins} x L, got {x_t.shape}")
    n, _, length = x_t.shape
    if bank is not None and bank.num_speakers != n:
        raise CompatibilityError(f"bank has N={bank.num_speakers} speakers but the batch has N={n}")
    t = _broadcast_t(t, n)
    if np.any(t <= 0.0):
        raise DomainError("score is undefined at t = 0")
    lam = lambda_of(schedule, t)
    sigma = np.sqrt(1.0 - lam)
    content = np.asarray(content, dtype=np.int64)
    if content.shape != (n, length):
        raise DimensionError(f"content must be ({n}, {length}), got {content.shape}")
    if content.size and (content.min() < 0 or content.max() >= dims.n_codes):
        raise DomainError(f"content codes must lie in [0, {dims.n_codes}), got range "
                          f"[{content.min()}, {content.max()}]")
    key_mask = _key_mask(mask, n, length)

    c = {}
    X = x_t.transpose(0, 2, 1)
    c["X"] = X
    tf = time_features(t, dims.time_dim)
    u_t = tf @ p["wt1"].T + p["bt1"]
    g_t, s_t = _silu(u_t)
    temb = g_t @ p["wt2"].T + p["bt2"]
    c.update(tf=tf, u_t=u_t, g_t=g_t, s_t=s_t)
    H = p["content_emb"][content] + temb[:, None, :]
    if speakers is not None:
        speakers = np.asarray(speakers, dtype=np.int64)
        H = H + p["speaker_emb"][speakers][:, None, :]

    merges, weights = {}, {}
    names = net.adapted_names()
    for li, name in enumerate(names):
        if bank is not None:
            merges[name] = bank.merge(li)
            weights[name] = merges[name].W
        else:
            weights[name] = p[name]

    neg_inf = np.where(key_mask, 0.0, -np.inf)[:, None, :]
    scale = 1.0 / math.sqrt(dims.attn)
    for b in range(dims.n_blocks):
        pre = f"blocks.{b}."
        Q = _lin(H, weights[pre + "wq"])
        K = _lin(H, weights[pre + "wk"])
        V = _lin(H, weights[pre + "wv"])
        S = np.matmul(Q, K.transpose(0, 2, 1)) * scale + neg_inf
        S = S - S.max(axis=-1, keepdims=True)
        P = np.exp(S)
        P /= P.sum(axis=-1, keepdims=True)
        Att = np.matmul(P, V)
        H1 = H + _lin(Att, weights[pre + "wo"])
        U = H1 @ p[pre + "w1"].T + p[pre + "b1"]
        Gf, sU = _silu(U)
        H2 = H1 + Gf @ p[pre + "w2"].T + p[pre + "b2"]
        c[pre] = dict(H=H, Q=Q, K=K, V=V, P=P, Att=Att, H1=H1, U=U, Gf=Gf, sU=sU)
        H = H2
    H = H + X @ p["w_in"].T + p["b_in"]
    Uh = H @ p["w_h1"].T + p["b_h1"]
    Gh, sUh = _silu(Uh)
    c.update(H_head=H, Uh=Uh, Gh=Gh, sUh=sUh)
    H = H + Gh @ p["w_h2"].T + p["b_h2"]
    c["H_out"] = H
    eps_hat = H @ p["w_out"].T + p["b_out"]
    score = check_finite(-(eps_hat / sigma[:, None, None]).transpose(0, 2, 1), "score")
    if not return_cache:
        return score
    return score, ForwardCache(c, merges, weights, t, sigma, content, speakers, key_mask)


def score_backward(net: ScoreNet, bank: AdapterBank | None, cache: ForwardCache, dscore,
                   base_grads=True):
    """Backpropagate ``dL/dscore`` (N x F x L).

    Returns ``(base, adapter)``: gradients of the base parameters (empty dict when
    ``base_grads`` is False; adapted layers are skipped when a bank is present)
    and, with a bank, bank-parameter gradients keyed like ``bank.parameters()``.
    """
    p, dims = net.params, net.dims
    c = cache.tensors
    grads = {}
    G_adapted = {}
    dE = -np.asarray(dscore, dtype=float).transpose(0, 2, 1) / cache.sigma[:, None, None]
    if base_grads:
        grads["w_out"] = np.einsum("nlf,nlh->fh", dE, c["H_out"])
        grads["b_out"] = dE.sum(axis=(0, 1))
    dH = dE @ p["w_out"]
    dUh = (dH @ p["w_h2"]) * (c["sUh"] * (1.0 + c["Uh"] * (1.0 - c["sUh"])))
    if base_grads:
        grads["w_h2"] = np.einsum("nlh,nlf->hf", dH, c["Gh"])
        grads["b_h2"] = dH.sum(axis=(0, 1))
        grads["w_h1"] = np.einsum("nlf,nlh->fh", dUh, c["H_head"])
        grads["b_h1"] = dUh.sum(axis=(0, 1))
    dH = dH + dUh @ p["w_h1"]
    if base_grads:
        grads["w_in"] = np.einsum("nlh,nlf->hf", dH, c["X"])
        grads["b_in"] = dH.sum(axis=(0, 1))
    scale = 1.0 / math.sqrt(dims.attn)
    w = cache.weights
    for b in reversed(range(dims.n_blocks)):
        pre = f"blocks.{b}."
        k = c[pre]
        dGf = dH @ p[pre + "w2"]
        dU = dGf * (k["sU"] * (1.0 + k["U"] * (1.0 - k["sU"])))
        if base_grads:
            grads[pre + "w2"] = np.einsum("nlh,nlf->hf", dH, k["Gf"])
            grads[pre + "b2"] = dH.sum(axis=(0, 1))
            grads[pre + "w1"] = np.einsum("nlf,nlh->fh", dU, k["H1"])
            grads[pre + "b1"] = dU.sum(axis=(0, 1))
        dH1 = dH + dU @ p[pre + "w1"]
        dAtt, G_adapted[pre + "wo"] = _lin_back(k["Att"], dH1, w[pre + "wo"])
        dP = np.matmul(dAtt, k["V"].transpose(0, 2, 1))
        dVv = np.matmul(k["P"].transpose(0, 2, 1), dAtt)
        dS = k["P"] * (dP - np.sum(dP * k["P"], axis=-1, keepdims=True)) * scale
        dQ = np.matmul(dS, k["K"])
        dK = np.matmul(dS.transpose(0, 2, 1), k["Q"])
        dH_q, G_adapted[pre + "wq"] = _lin_back(k["H"], dQ, w[pre + "wq"])
        dH_k, G_adapted[pre + "wk"] = _lin_back(k["H"], dK, w[pre + "wk"])
        dH_v, G_adapted[pre + "wv"] = _lin_back(k["H"], dVv, w[pre + "wv"])
        dH = dH1 + dH_q + dH_k + dH_v

    if base_grads:
        d_content = np.zeros_like(p["content_emb"])
        np.add.at(d_content, cache.content.ravel(), dH.reshape(-1, dims.hidden))
        grads["content_emb"] = d_content
        d_speaker = np.zeros_like(p["speaker_emb"])
        if cache.speakers is not None:
            np.add.at(d_speaker, cache.speakers, dH.sum(axis=1))
        grads["speaker_emb"] = d_speaker
        dtemb = dH.sum(axis=1)
        grads["wt2"] = dtemb.T @ c["g_t"]
        grads["bt2"] = dtemb.sum(axis=0)
        du = (dtemb @ p["wt2"]) * (c["s_t"] * (1.0 + c["u_t"] * (1.0 - c["s_t"])))
        grads["wt1"] = du.T @ c["tf"]
        grads["bt1"] = du.sum(axis=0)
        if bank is None:
            grads.update(G_adapted)

    adapter = {}
    if bank is not None:
        for li, name in enumerate(net.adapted_names()):
            lg = bank.weight_backward(li, G_adapted[name], cache.merges[name])
            if lg.dB is not None:
                adapter[f"{li}.B"] = lg.dB
            adapter[f"{li}.A"] = lg.dA
            if lg.dm is not None:
                adapter[f"{li}.m"] = lg.dm
    return grads, adapter


def masked_losses(score, eps, sigma, mask):
    """Per-slice masked mean of ``(sigma_n * score + eps)**2`` and its gradient.

    Returns ``(losses (N,), dL/dscore)`` for the total loss ``sum_n losses[n]``.
    """
    full = np.broadcast_to(mask, score.shape)
    counts = full.sum(axis=(1, 2))
    resid = sigma[:, None, None] * score + eps
    losses = (full * resid * resid).sum(axis=(1, 2)) / counts
    dscore = 2.0 * full * resid * sigma[:, None, None] / counts[:, None, None]
    return losses, dscore


# --- checkpoint -----------------------------------------------------------------

def net_to_bytes(net: ScoreNet) -> bytes:
    w = Writer(NET_MAGIC)
    d = net.dims
    w.pack("8I", d.n_bins, d.hidden, d.attn, d.ff, d.time_dim, d.n_codes, d.n_train_speakers, d.n_blocks)
    names = sorted(net.params)
    w.pack("I", len(names))
    for name in names:
        arr = net.params[name]
        w.string(name)
        w.pack("B", arr.ndim)
        w.pack(f"{arr.ndim}I", *arr.shape)
    for name in names:
        w.add(net.params[name])
    return w.to_bytes()


def net_from_bytes(data: bytes) -> ScoreNet:
    rd = Reader(data, NET_MAGIC)
    dims = NetDims(*rd.unpack("8I"))
    (count,) = rd.unpack("I")
    names, shapes = [], []
    for _ in range(count):
        names.append(rd.string())
        (ndim,) = rd.unpack("B")
        shapes.append(rd.unpack(f"{ndim}I"))
    rd.end_header()
    arrays = rd.arrays(shapes)
    net = ScoreNet(dims, dict(zip(names, arrays)))
    expected = init_net(dims, RngStream(0)).params
    for name, arr in expected.items():
        if name not in net.params or net.params[name].shape != arr.shape:
            raise FormatError(f"parameter {name!r} missing or mis-shaped for dims {dims}", rd.payload_start)
    return net


def save_net(net: ScoreNet, path):
    write_atomic(path, net_to_bytes(net))


def load_net(path) -> ScoreNet:
    return net_from_bytes(read_file(path))


# --- pretraining ----------------------------------------------------------------

@dataclass
class PretrainSet:
    """Utterances of the training speakers; ``speaker`` indexes the speaker embedding."""

    x0: np.ndarray
    mask: np.ndarray
    content: np.ndarray
    speaker: np.ndarray

    def __len__(self):
        return self.x0.shape[0]


def make_pretrain_set(speakers, utterances_per_speaker, seed, min_len=24, max_len=48) -> PretrainSet:
    rows = []
    for u in range(utterances_per_speaker):
        lengths = RngStream(seed, u).fork(0x1E).integers(min_len, max_len + 1, len(speakers))
        rows.append(make_reference_batch(speakers, lengths, seed * 1000 + u))
    L = max(b.x0.shape[2] for b in rows)

    def pad(a, fill=0):
        out = np.full(a.shape[:-1] + (L,), fill, dtype=a.dtype)
        out[..., : a.shape[-1]] = a
        return out

    return PretrainSet(
        np.concatenate([pad(b.x0) for b in rows]),
        np.concatenate([pad(b.mask) for b in rows]),
        np.concatenate([pad(b.content) for b in rows]),
        np.tile(np.arange(len(speakers)), utterances_per_speaker),
    )


def smooth(curve, decay=0.98):
    """Bias-corrected exponential moving average."""
    out = np.empty(len(curve))
    acc = 0.0
    for i, x in enumerate(curve):
        acc = decay * acc + (1 - decay) * x
        out[i] = acc / (1 - decay ** (i + 1))
    return out


def pretrain(net: ScoreNet, data: PretrainSet, iterations: int, state, stream: RngStream,
             batch_size=16, schedule: NoiseSchedule | None = None, t_min=1e-4):
    """Train all base parameters on the score-matching loss; returns ``(net, losses)``.

    ``net`` is updated in place.  Loss per iteration is the mean over the batch
    of per-utterance masked losses.
    """
    if len(data) == 0:
        raise DimensionError("empty pretraining set")
    schedule = schedule or NoiseSchedule()
    losses = np.empty(iterations)
    for it in range(iterations):
        idx = stream.integers(0, len(data), batch_size)
        x0, mask = data.x0[idx], data.mask[idx]
        t = stream.uniform(t_min, 1.0, batch_size)
        eps = stream.randn(x0.shape) * mask
        lam = lambda_of(schedule, t)
        x_t = np.sqrt(lam)[:, None, None] * x0 + np.sqrt(1 - lam)[:, None, None] * eps
        score, cache = score_forward(net, None, x_t, t, data.content[idx], mask,
                                     speakers=data.speaker[idx], schedule=schedule, return_cache=True)
        per, dscore = masked_losses(score, eps, cache.sigma, mask)
        loss = per.mean()
        if not np.isfinite(loss):
            raise TrainingError(f"pretraining loss is not finite at iteration {it}")
        grads, _ = score_backward(net, None, cache, dscore / batch_size)
        adam_step(net.params, grads, state)
        losses[it] = loss
    return net, losses
