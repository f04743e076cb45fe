"""Experiment suites behind the command-line harness.

Every command is a function of an :class:`ExperimentConfig` (and a pretrained
net where needed) that returns an :class:`ExperimentReport`.  Similarities are
always computed on samples drawn with per-speaker noise streams, so a speaker's
sample noise does not depend on which batch it was adapted in.
"""

from __future__ import annotations

import csv
import io
import json
import os
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .adapters import (
    AdapterConfig,
    SharingMode,
    adapted_backward,
    adapted_forward,
    enumerate_param_count,
    init_bank,
    param_count,
    save_bank,
)
from .config import ExperimentConfig
from .container import write_atomic
from .diffusion import sample
from .errors import ConfigurationError, TrainingError
from .optim import AdamState
from .scorenet import (
    NetDims,
    ScoreNet,
    init_net,
    load_net,
    make_pretrain_set,
    masked_losses,
    pretrain,
    save_net,
    score_backward,
    score_forward,
    smooth,
)
from .tensor import RngStream
from .toy import (
    SpeakerBatch,
    gen_clustered_speakers,
    gen_speakers,
    make_reference_batch,
    signature_of,
    similarity,
)
from .trainer import adapt_batched, adapt_sequential, new_job

# aggregate adapted-layer dims of the full-scale backbone, solved from its
# published parameter tables
AGGREGATE_DIMS = (12548, 6912)
_SAMPLE_SALT = 0x5A
_LENGTH_SALT = 0x1E17


@dataclass
class ExperimentReport:
    name: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.checks.values())

    def to_dict(self):
        return {"experiment": self.name, "rows": self.rows, "summary": self.summary, "checks": self.checks}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n"

    def to_csv(self):
        if not self.rows:
            return ""
        columns = []
        for row in self.rows:
            columns += [k for k, v in row.items() if k not in columns and not isinstance(v, (list, dict))]
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        base = os.path.join(out_dir, self.name)
        write_atomic(base + ".json", self.to_json().encode())
        write_atomic(base + ".csv", self.to_csv().encode())
        return base + ".json", base + ".csv"


def _json_default(obj):
    if isinstance(obj, Fraction):
        return float(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --- shared building blocks -----------------------------------------------------

def pretrain_net(cfg: ExperimentConfig):
    """Pretrain the toy score net on ``n_train_speakers`` speakers; returns ``(net, losses)``."""
    speakers = gen_speakers(cfg.n_train_speakers, seed=cfg.train_seed)
    data = make_pretrain_set(speakers, cfg.utterances_per_speaker, cfg.train_seed, cfg.min_len, cfg.max_len)
    net = init_net(cfg.dims(), RngStream(cfg.train_seed, 1))
    return pretrain(net, data, cfg.pretrain_iters, AdamState(lr=cfg.pretrain_lr), RngStream(cfg.train_seed, 2),
                    batch_size=cfg.pretrain_batch, schedule=cfg.schedule())


def get_net(cfg: ExperimentConfig) -> ScoreNet:
    path = cfg.net_path
    if not os.path.exists(path):
        raise FileNotFoundError(f"no pretrained net at {path}; run the pretrain command first")
    net = load_net(path)
    if net.dims != cfg.dims():
        raise ConfigurationError(f"checkpoint dims {net.dims} differ from config dims {cfg.dims()}")
    return net


def reference_batch(cfg: ExperimentConfig, seed: int, count: int | None = None) -> SpeakerBatch:
    """One reference utterance for each of ``count`` unseen speakers (default ``cfg.speakers``)."""
    count = cfg.speakers if count is None else count
    speakers = gen_speakers(count, seed=cfg.speaker_seed + seed, n_bins=cfg.n_bins, first_id=1000)
    lengths = RngStream(cfg.speaker_seed + seed, _LENGTH_SALT).integers(cfg.min_len, cfg.max_len + 1, count)
    return make_reference_batch(speakers, lengths, seed=cfg.speaker_seed + seed)


def generate(net, bank, batch: SpeakerBatch, cfg: ExperimentConfig, seed: int):
    """Sample one mel per reference with the reference's content codes and length."""
    streams = [RngStream(seed, sid).fork(_SAMPLE_SALT) for sid in batch.speaker_ids]
    schedule = cfg.schedule()

    def score_fn(x, t):
        return score_forward(net, bank, x, t, batch.content, batch.mask, schedule=schedule)

    return sample(schedule, batch.x0.shape, score_fn, cfg.sample_steps, streams) * batch.mask


def evaluate(generated, batch: SpeakerBatch) -> np.ndarray:
    """Per-speaker toy similarity between generated mels and the references."""
    return np.array([
        similarity(signature_of(generated[i], batch.mask[i]), signature_of(batch.x0[i], batch.mask[i]))
        for i in range(batch.num_speakers)
    ])


def counts(config: AdapterConfig, layer_dims, bank=None):
    """Per-speaker parameter count, cross-checked against the live bank when given."""
    exact = param_count(config, layer_dims)
    if bank is not None and enumerate_param_count(bank) != exact:
        raise TrainingError(f"param_count {exact} disagrees with enumerated count {enumerate_param_count(bank)}")
    return exact


def adapt_and_score(net, cfg: ExperimentConfig, adapter: AdapterConfig, batch: SpeakerBatch, seed: int,
                    group_size: int | None = None):
    """Adapt ``batch`` in groups of ``group_size`` speakers and score every speaker.

    Returns a dict with per-speaker similarities, final losses, the per-speaker
    param count and the adaptation wall-clock.
    """
    n = batch.num_speakers
    group_size = group_size or n
    if n % group_size:
        raise ConfigurationError(f"{n} speakers do not split into groups of {group_size}")
    sims, finals, seconds = np.empty(n), np.empty(n), 0.0
    count = None
    for start in range(0, n, group_size):
        idx = list(range(start, start + group_size))
        sub = batch.select(idx)
        job = new_job(net, adapter, sub, seed, cfg.iters, cfg.lr)
        bank, report = adapt_batched(net, job, cfg.schedule())
        seconds += report.seconds
        count = counts(bank.config, bank.layer_dims, bank)
        sims[idx] = evaluate(generate(net, bank, sub, cfg, seed), sub)
        finals[idx] = job.loss_history[-50:].mean(axis=0) if cfg.iters else np.nan
    return {"similarities": sims, "final_losses": finals, "params": count, "seconds": seconds}


def _row(label, adapter: AdapterConfig, seed, result, **extra):
    sims = result["similarities"]
    return {
        "label": label,
        "seed": seed,
        "sharing_mode": adapter.sharing_mode.value,
        "share_B": adapter.sharing_mode.b_shared,
        "share_A": adapter.sharing_mode.a_shared,
        "scale": adapter.scale_enabled,
        "normalization": adapter.normalization_enabled,
        "freeze_B": adapter.freeze_B,
        **extra,
        "params_per_speaker": round(float(result["params"]), 3),
        "similarity_mean": float(sims.mean()),
        "similarity_min": float(sims.min()),
        "final_loss_mean": float(np.mean(result["final_losses"])),
        "seconds": result["seconds"],
        "similarities": sims.tolist(),
    }


def _seed_means(rows, key="label"):
    out = {}
    for row in rows:
        out.setdefault(row[key], []).append(row["similarity_mean"])
    return {k: float(np.mean(v)) for k, v in out.items()}


# --- commands -------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig):
    start = time.perf_counter()
    net, losses = pretrain_net(cfg)
    seconds = time.perf_counter() - start
    os.makedirs(os.path.dirname(os.path.abspath(cfg.net_path)), exist_ok=True)
    save_net(net, cfg.net_path)
    curve = smooth(losses) if len(losses) else losses
    rows = [{"iteration": i, "loss": float(l), "smoothed": float(s)} for i, (l, s) in enumerate(zip(losses, curve))]
    summary = {"net": cfg.net_path, "iterations": cfg.pretrain_iters, "seconds": seconds}
    checks = {}
    if len(curve) > 20:
        summary.update(initial_smoothed=float(curve[19]), final_smoothed=float(curve[-1]))
        checks["loss_halved"] = bool(curve[-1] < 0.5 * curve[19])
    return net, ExperimentReport("pretrain", rows, summary, checks)


def cmd_count_params(cfg: ExperimentConfig, net: ScoreNet | None = None):
    """Per-speaker counts for every mode, at toy dims and at the aggregate full-scale dims."""
    toy_dims = (net or init_net(cfg.dims(), RngStream(0))).adapted_layer_dims()
    rows = []
    for scope, dims, sizes in (("toy", toy_dims, (cfg.speakers,)), ("aggregate", [AGGREGATE_DIMS], (1, 5, 20, 40))):
        for n in sizes:
            for mode in SharingMode:
                for scale in (False, True):
                    adapter = AdapterConfig(rank=cfg.rank, alpha=cfg.alpha, sharing_mode=mode, scale_enabled=scale,
                                            normalization_enabled=scale, num_speakers=n)
                    exact = param_count(adapter, dims)
                    rows.append({"scope": scope, "N": n, "sharing_mode": mode.value, "scale": scale,
                                 "params_per_speaker": round(float(exact), 3), "exact": str(exact)})
    sum_d = sum(d for d, _ in toy_dims)
    sum_k = sum(k for _, k in toy_dims)
    summary = {"toy_layer_dims": [list(x) for x in toy_dims], "toy_sum_d": sum_d, "toy_sum_k": sum_k,
               "aggregate_sum_d": AGGREGATE_DIMS[0], "aggregate_sum_k": AGGREGATE_DIMS[1]}
    return ExperimentReport("count-params", rows, summary)


def cmd_adapt(net, cfg: ExperimentConfig, seed=None):
    """Adapt ``cfg.speakers`` references in one batch; writes the bank checkpoint and a report."""
    seed = cfg.seed if seed is None else seed
    batch = reference_batch(cfg, seed)
    job = new_job(net, cfg.adapter(), batch, seed, cfg.iters, cfg.lr)
    bank, run = adapt_batched(net, job, cfg.schedule())
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "bank.nvbk")
    save_bank(bank, path)
    counts(bank.config, bank.layer_dims, bank)
    rows = [{"speaker_id": sid, "length": batch.lengths[i],
             "first_loss": float(job.loss_history[0, i]) if cfg.iters else None,
             "final_loss": float(job.loss_history[-50:, i].mean()) if cfg.iters else None}
            for i, sid in enumerate(batch.speaker_ids)]
    summary = {"bank": path, **run.to_dict()}
    return bank, ExperimentReport("adapt", rows, summary)


def cmd_sample(net, bank, cfg: ExperimentConfig, seed=None):
    """Generate one mel per reference speaker with ``bank`` (None means the pretrained net)."""
    seed = cfg.seed if seed is None else seed
    batch = reference_batch(cfg, seed)
    mels = generate(net, bank, batch, cfg, seed)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "samples.npz")
    buf = io.BytesIO()
    np.savez(buf, mels=mels, mask=batch.mask, speaker_ids=np.array(batch.speaker_ids), seed=seed)
    write_atomic(path, buf.getvalue())
    rows = [{"speaker_id": sid, "length": batch.lengths[i]} for i, sid in enumerate(batch.speaker_ids)]
    return mels, ExperimentReport("sample", rows, {"samples": path, "adapted": bank is not None})


def cmd_eval(net, bank, cfg: ExperimentConfig, seed=None, mels=None):
    """Similarity of adapted samples to the references next to the pretrained baseline."""
    seed = cfg.seed if seed is None else seed
    batch = reference_batch(cfg, seed)
    adapted = evaluate(mels if mels is not None else generate(net, bank, batch, cfg, seed), batch)
    baseline = evaluate(generate(net, None, batch, cfg, seed), batch)
    rows = [{"speaker_id": sid, "adapted": float(a), "baseline": float(b)}
            for sid, a, b in zip(batch.speaker_ids, adapted, baseline)]
    wins = int(np.sum(adapted > baseline))
    summary = {"adapted_mean": float(adapted.mean()), "baseline_mean": float(baseline.mean()), "wins": wins}
    return ExperimentReport("eval", rows, summary)


def cmd_ablation_sharing(net, cfg: ExperimentConfig):
    """The four sharing modes without the scale matrix, identical speakers and seeds."""
    rows = []
    for seed in cfg.seeds:
        batch = reference_batch(cfg, seed)
        for mode in SharingMode:
            adapter = cfg.adapter(sharing_mode=mode, scale_enabled=False, normalization_enabled=False,
                                  freeze_B=False)
            rows.append(_row(mode.value, adapter, seed, adapt_and_score(net, cfg, adapter, batch, seed)))
    sims = _seed_means(rows)
    params = {r["label"]: r["params_per_speaker"] for r in rows}
    ratio = params["shared_B"] / params["batchwise"]
    summary = {"similarity": sims, "params_per_speaker": params, "shared_B_param_ratio": ratio}
    checks = {
        "shared_B_close_to_batchwise": sims["shared_B"] >= sims["batchwise"] - 0.03,
        "shared_A_not_above_shared_B": sims["shared_A"] <= sims["shared_B"],
        "shared_both_not_above_shared_B": sims["shared_both"] <= sims["shared_B"],
        "shared_B_param_ratio_le_0.45": ratio <= 0.45,
    }
    return ExperimentReport("ablate-sharing", rows, summary, checks)


SCALE_ROWS = (
    ("NanoVoice", dict(scale_enabled=True, normalization_enabled=True, freeze_B=False)),
    ("-Normalization", dict(scale_enabled=True, normalization_enabled=False, freeze_B=False)),
    ("-ScaleMatrix", dict(scale_enabled=False, normalization_enabled=False, freeze_B=False)),
    ("NanoVoice,frozen-B", dict(scale_enabled=True, normalization_enabled=True, freeze_B=True)),
)


def cmd_ablation_scale(net, cfg: ExperimentConfig):
    """Scale-matrix rows in shared-B mode, plus the frozen-B variant of NanoVoice."""
    rows = []
    for seed in cfg.seeds:
        batch = reference_batch(cfg, seed)
        for label, flags in SCALE_ROWS:
            adapter = cfg.adapter(sharing_mode=SharingMode.SHARED_B, **flags)
            rows.append(_row(label, adapter, seed, adapt_and_score(net, cfg, adapter, batch, seed)))
    sims = _seed_means(rows)
    params = {r["label"]: r["params_per_speaker"] for r in rows}
    sum_k = sum(k for _, k in net.adapted_layer_dims())
    summary = {"similarity": sims, "params_per_speaker": params, "sum_k": sum_k}
    checks = {
        "nanovoice_vs_no_scale": sims["NanoVoice"] >= sims["-ScaleMatrix"] - 0.01,
        "nanovoice_vs_no_norm": sims["NanoVoice"] >= sims["-Normalization"] - 0.01,
        "scale_adds_sum_k": params["NanoVoice"] - params["-ScaleMatrix"] == sum_k,
        "frozen_B_within_0.02": abs(sims["NanoVoice,frozen-B"] - sims["NanoVoice"]) <= 0.02,
    }
    return ExperimentReport("ablate-scale", rows, summary, checks)


def cmd_batchsize_sweep(net, cfg: ExperimentConfig):
    """NanoVoice at several batch sizes; the same speakers are adapted in groups of N."""
    rows = []
    for seed in cfg.seeds:
        batch = reference_batch(cfg, seed)
        for n in cfg.sweep_sizes:
            adapter = cfg.adapter(sharing_mode=SharingMode.SHARED_B, num_speakers=n)
            rows.append(_row(f"N={n}", adapter, seed, adapt_and_score(net, cfg, adapter, batch, seed, n), N=n))
    sims = _seed_means(rows)
    params = [next(r["params_per_speaker"] for r in rows if r["N"] == n) for n in cfg.sweep_sizes]
    layer_dims = net.adapted_layer_dims()
    exact = [param_count(cfg.adapter(sharing_mode=SharingMode.SHARED_B, num_speakers=n), layer_dims)
             for n in cfg.sweep_sizes]
    spread = max(sims.values()) - min(sims.values())
    summary = {"similarity": sims, "params_per_speaker": params, "similarity_spread": spread}
    checks = {
        "spread_le_0.05": spread <= 0.05,
        "params_strictly_decreasing": all(a > b for a, b in zip(exact, exact[1:])),
    }
    return ExperimentReport("sweep-batch", rows, summary, checks)


def cmd_bench(net, cfg: ExperimentConfig, sizes=None):
    """Median wall-clock of batched vs sequential adaptation over ``bench_reps`` runs."""
    rows = []
    sizes = sizes or sorted({1, cfg.speakers})
    adapter = cfg.adapter()
    for n in sizes:
        batch = reference_batch(cfg, cfg.seed, n)
        batched, sequential = [], []
        for _ in range(cfg.bench_reps):
            start = time.perf_counter()
            adapt_batched(net, new_job(net, adapter, batch, cfg.seed, cfg.bench_iters, cfg.lr), cfg.schedule())
            batched.append(time.perf_counter() - start)
            start = time.perf_counter()
            adapt_sequential(net, batch, adapter, cfg.seed, cfg.bench_iters, cfg.lr, cfg.schedule())
            sequential.append(time.perf_counter() - start)
        tb, ts = statistics.median(batched), statistics.median(sequential)
        rows.append({"N": n, "iterations": cfg.bench_iters, "batched_seconds": tb, "sequential_seconds": ts,
                     "speedup": ts / tb, "batched_seconds_per_speaker": tb / n,
                     "batched_runs": batched, "sequential_runs": sequential})
    summary = {"speedup": {f"N={r['N']}": r["speedup"] for r in rows}}
    checks = {}
    if any(r["N"] == 8 for r in rows):
        checks["speedup_N8_ge_1.6"] = next(r["speedup"] for r in rows if r["N"] == 8) >= 1.6
    return ExperimentReport("bench", rows, summary, checks)


def cmd_groups(net, cfg: ExperimentConfig):
    """Same-cluster versus mixed-cluster batches of equal size (reported, not asserted)."""
    if cfg.speakers % cfg.group_clusters:
        raise ConfigurationError(f"{cfg.speakers} speakers do not split over {cfg.group_clusters} clusters")
    per = cfg.speakers // cfg.group_clusters
    adapter = cfg.adapter(num_speakers=per)
    rows = []
    for seed in cfg.seeds:
        clusters = gen_clustered_speakers(cfg.group_clusters, per, seed=cfg.speaker_seed + seed,
                                          n_bins=cfg.n_bins, spread=cfg.group_spread, first_id=2000)
        same = [list(g) for g in clusters]
        # mixed groups deal speakers round-robin across clusters
        flat = [s for j in range(per) for g in clusters for s in g[j : j + 1]]
        mixed = [flat[i : i + per] for i in range(0, len(flat), per)]
        for label, groups in (("same", same), ("mixed", mixed)):
            ordered = [s for g in groups for s in g]
            lengths = RngStream(cfg.speaker_seed + seed, _LENGTH_SALT).integers(cfg.min_len, cfg.max_len + 1,
                                                                              len(ordered))
            batch = make_reference_batch(ordered, lengths, seed=cfg.speaker_seed + seed)
            result = adapt_and_score(net, cfg, adapter, batch, seed, per)
            rows.append(_row(label, adapter, seed, result))
    sims = _seed_means(rows)
    summary = {"similarity": sims, "difference_same_minus_mixed": sims["same"] - sims["mixed"],
               "note": "informational; no significant difference is the expected outcome"}
    return ExperimentReport("groups", rows, summary)


# --- finite-difference suite -------------------------------------------------------

VALID_FLAGS = ((False, False), (True, False), (True, True))
_TINY_NET = dict(n_bins=3, hidden=4, attn=3, ff=4, time_dim=2, n_codes=3, n_train_speakers=2, n_blocks=1)


def _rel_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))


def _fd(loss, arr, h):
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + h
        up = loss()
        arr[i] = orig - h
        down = loss()
        arr[i] = orig
        out[i] = (up - down) / (2 * h)
    return out


def _perturb(bank, rng):
    """Move a fresh bank away from its init so every gradient term is exercised.

    The A step is divided by alpha so the update stays on the scale of W0; a
    larger one saturates the tanh stack and leaves gradients that finite
    differences cannot resolve above roundoff.
    """
    for layer in bank.layers:
        layer.A += rng.standard_normal(layer.A.shape) / bank.config.alpha
        if layer.m is not None:
            layer.m *= rng.uniform(0.8, 1.2, layer.m.shape)


def _layer_instance(adapter: AdapterConfig, rng, seed):
    """Random two-layer stack with loss ``sum(R2 * f2(f1(x)))`` through adapted_forward."""
    n = adapter.num_speakers
    dims = [(int(rng.integers(2, 5)), int(rng.integers(2, 5)))]
    dims.append((dims[0][1], int(rng.integers(2, 5))))
    base = [rng.standard_normal(dk) / np.sqrt(dk[0]) for dk in dims]
    bank = init_bank(adapter, base, RngStream(seed))
    _perturb(bank, rng)
    x = rng.standard_normal((n, 3, dims[0][0]))
    r2 = rng.standard_normal((n, 3, dims[1][1]))

    def loss():
        return float(np.sum(r2 * np.tanh(adapted_forward(bank, 1, np.tanh(adapted_forward(bank, 0, x))))))

    def grads():
        h_pre = adapted_forward(bank, 0, x)
        h = np.tanh(h_pre)
        out_pre = adapted_forward(bank, 1, h)
        g1, dh = adapted_backward(bank, 1, h, r2 * (1 - np.tanh(out_pre) ** 2))
        g0, _ = adapted_backward(bank, 0, x, dh * (1 - h * h))
        return {0: g0, 1: g1}

    def named():
        out = {}
        for li, g in grads().items():
            if g.dB is not None:
                out[f"{li}.B"] = g.dB
            out[f"{li}.A"] = g.dA
            if g.dm is not None:
                out[f"{li}.m"] = g.dm
        return out

    return bank, loss, named


def _net_instance(adapter: AdapterConfig, rng, seed):
    """Tiny score net with the masked score-matching loss, end to end."""
    n = adapter.num_speakers
    dims = NetDims(**_TINY_NET)
    net = init_net(dims, RngStream(seed, 7))
    bank = init_bank(adapter, net.base_layers(), RngStream(seed))
    _perturb(bank, rng)
    length = 5
    x = rng.standard_normal((n, dims.n_bins, length))
    t = rng.uniform(0.2, 0.9, n)
    content = rng.integers(0, dims.n_codes, (n, length))
    mask = np.ones((n, 1, length))
    mask[0, :, 3:] = 0
    eps = rng.standard_normal(x.shape) * mask

    def loss():
        score, cache = score_forward(net, bank, x, t, content, mask, return_cache=True)
        return float(masked_losses(score, eps, cache.sigma, mask)[0].sum())

    def named():
        score, cache = score_forward(net, bank, x, t, content, mask, return_cache=True)
        _, dscore = masked_losses(score, eps, cache.sigma, mask)
        return score_backward(net, bank, cache, dscore, base_grads=False)[1]

    return bank, loss, named


def _check_instance(build, adapter, rng, seed, h, tamper):
    bank, loss, named = build(adapter, rng, seed)
    analytic = named()
    if adapter.freeze_B and any(k.endswith(".B") for k in analytic):
        return {"B": float("inf")}
    errors = {}
    for key, arr in bank.parameters().items():
        g = analytic[key]
        if tamper is not None:
            g = tamper(key.split(".")[1], g)
        kind = key.split(".")[1]
        errors[kind] = max(errors.get(kind, 0.0), _rel_error(g, _fd(loss, arr, h)))
    return errors


def cmd_gradcheck(cfg: ExperimentConfig, tamper=None, instances=None, net_instances=2):
    """Finite-difference check of every adapter gradient in every valid configuration.

    ``tamper(kind, grad)`` may alter analytic gradients before comparison (kind is
    ``"B"``, ``"A"`` or ``"m"``); it exists to prove the suite catches errors.
    The detached-norm variant is compared too and reported as informational.
    """
    instances = cfg.gradcheck_instances if instances is None else instances
    rows, failures = [], []
    for mode in SharingMode:
        for scale, norm in VALID_FLAGS:
            for freeze in (False, True):
                worst = {}
                for i in range(instances + net_instances):
                    rng = np.random.default_rng([cfg.seed, i, len(rows)])
                    n = int(rng.integers(1, 4))
                    adapter = AdapterConfig(rank=int(rng.integers(1, 3)), alpha=cfg.alpha, sharing_mode=mode,
                                            scale_enabled=scale, normalization_enabled=norm,
                                            num_speakers=n, freeze_B=freeze)
                    build = _layer_instance if i < instances else _net_instance
                    for kind, err in _check_instance(build, adapter, rng, cfg.seed + i, cfg.fd_step, tamper).items():
                        worst[kind] = max(worst.get(kind, 0.0), err)
                ok = all(e <= cfg.fd_tol for e in worst.values())
                row = {"sharing_mode": mode.value, "scale": scale, "normalization": norm, "freeze_B": freeze,
                       "instances": instances + net_instances, "passed": ok,
                       **{f"max_rel_error_{k}": v for k, v in sorted(worst.items())}}
                rows.append(row)
                for kind, err in worst.items():
                    if err > cfg.fd_tol:
                        failures.append(f"{mode.value} scale={scale} norm={norm} freeze_B={freeze}: "
                                        f"{kind} gradient relative error {err:.3g}")
    informational = []
    for mode in SharingMode:
        rng = np.random.default_rng([cfg.seed, 99])
        adapter = AdapterConfig(sharing_mode=mode, num_speakers=2, detach_norm=True)
        errs = _check_instance(_layer_instance, adapter, rng, cfg.seed, cfg.fd_step, None)
        informational.append({"sharing_mode": mode.value, "detach_norm": True,
                              "max_rel_error": max(errs.values()),
                              "note": "detached norm is not the gradient of the full merge; mismatch expected"})
    summary = {"failures": failures, "informational": informational, "tolerance": cfg.fd_tol, "step": cfg.fd_step}
    return ExperimentReport("gradcheck", rows, summary, {"all_gradients_match": not failures})


__all__ = [
    "AGGREGATE_DIMS",
    "ExperimentReport",
    "adapt_and_score",
    "cmd_ablation_scale",
    "cmd_ablation_sharing",
    "cmd_adapt",
    "cmd_batchsize_sweep",
    "cmd_bench",
    "cmd_count_params",
    "cmd_eval",
    "cmd_gradcheck",
    "cmd_groups",
    "cmd_pretrain",
    "cmd_sample",
    "evaluate",
    "generate",
    "get_net",
    "pretrain_net",
    "reference_batch",
]
