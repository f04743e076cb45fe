"""Acceptance criteria 1 to 11, one test each.

Every test prints a ``criterion N: PASS/FAIL`` line (collected again in the
terminal summary) and then asserts the criterion at its stated tolerance.
The ablation suites run once per module and are shared between criteria.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from nanovoice import experiments as ex
from nanovoice.adapters import (
    AdapterConfig,
    SharingMode,
    bank_from_bytes,
    bank_to_bytes,
    init_bank,
    param_count,
)
from nanovoice.errors import FormatError
from nanovoice.scorenet import net_from_bytes, net_to_bytes, score_forward
from nanovoice.tensor import RngStream
from nanovoice.trainer import adapt_batched, adapt_sequential, new_job

pytestmark = pytest.mark.slow

FLAGS = [(False, False), (True, False), (True, True)]


@pytest.fixture(scope="module")
def cfg(pretrained):
    return pretrained[2]


@pytest.fixture(scope="module")
def sharing(net, cfg):
    return ex.cmd_ablation_sharing(net, cfg)


@pytest.fixture(scope="module")
def scale(net, cfg):
    return ex.cmd_ablation_scale(net, cfg)


def test_criterion_01_gradients(cfg, criterion):
    start = time.perf_counter()
    report = ex.cmd_gradcheck(cfg)
    seconds = time.perf_counter() - start
    configs = {(r["sharing_mode"], r["scale"], r["normalization"], r["freeze_B"]) for r in report.rows}
    worst = max(v for r in report.rows for k, v in r.items() if k.startswith("max_rel_error"))
    ok = (report.passed and len(configs) == 4 * len(FLAGS) * 2 and min(r["instances"] for r in report.rows) >= 20
          and seconds < 120)
    criterion(1, ok, f"{len(configs)} configs, worst relative error {worst:.2e} (tol 1e-4), {seconds:.1f}s")
    assert ok, report.summary["failures"]


def test_criterion_02_init_identity(net, cfg, criterion, rng):
    batch = ex.reference_batch(cfg, 0)
    t = rng.uniform(0.05, 1.0, batch.num_speakers)
    x = rng.standard_normal(batch.x0.shape)
    base = score_forward(net, None, x, t, batch.content, batch.mask)
    worst = 0.0
    for mode in SharingMode:
        for scale_on, norm in FLAGS:
            for freeze in (False, True):
                adapter = AdapterConfig(sharing_mode=mode, scale_enabled=scale_on, normalization_enabled=norm,
                                        num_speakers=batch.num_speakers, freeze_B=freeze)
                bank = init_bank(adapter, net.base_layers(), RngStream(3))
                worst = max(worst, np.max(np.abs(score_forward(net, bank, x, t, batch.content, batch.mask) - base)))
    ok = worst <= 1e-12
    criterion(2, ok, f"max |adapted - base| = {worst:.1e} over 24 configurations (tol 1e-12)")
    assert ok


def test_criterion_03_batched_equals_sequential(net, cfg, criterion):
    adapter = AdapterConfig(sharing_mode="batchwise", scale_enabled=False, normalization_enabled=False)
    batch = ex.reference_batch(cfg, 0, 4)
    job = new_job(net, adapter, batch, cfg.seed, 50, cfg.lr)
    bank, _ = adapt_batched(net, job)
    banks, report = adapt_sequential(net, batch, adapter, cfg.seed, 50, cfg.lr)
    param_diff = max(
        max(np.max(np.abs(joint.A[n] - solo.A[0])), np.max(np.abs(joint.B[n] - solo.B[0])))
        for n, single in enumerate(banks) for joint, solo in zip(bank.layers, single.layers)
    )
    loss_diff = np.max(np.abs(job.loss_history - np.array(report.losses)))
    ok = param_diff <= 1e-9 and loss_diff <= 1e-9
    criterion(3, ok, f"params max diff {param_diff:.1e}, loss histories max diff {loss_diff:.1e} (tol 1e-9)")
    assert ok


PUBLISHED = [  # (mode, N, scale, per-speaker count from the full-scale tables)
    ("batchwise", 40, False, 38920),
    ("shared_B", 40, False, 14459),
    ("shared_A", 40, False, 25442),
    ("shared_both", 40, False, 973),
    ("shared_B", 1, True, 45832),
    ("shared_B", 5, True, 25755),
    ("shared_B", 20, True, 21991),
    ("shared_B", 40, True, 21363),
]


def test_criterion_04_parameter_accounting(criterion, rng):
    deviations = []
    for mode, n, scale_on, published in PUBLISHED:
        adapter = AdapterConfig(2, sharing_mode=mode, num_speakers=n, scale_enabled=scale_on,
                                normalization_enabled=scale_on)
        deviations.append(abs(round(param_count(adapter, [ex.AGGREGATE_DIMS])) - published))
    exact = True
    for _ in range(200):
        dims = [tuple(int(v) for v in rng.integers(1, 500, 2)) for _ in range(int(rng.integers(1, 6)))]
        n = int(rng.integers(1, 100))
        plain = dict(scale_enabled=False, normalization_enabled=False, num_speakers=n)
        both = param_count(AdapterConfig(sharing_mode="shared_both", **plain), dims)
        batch = param_count(AdapterConfig(sharing_mode="batchwise", **plain), dims)
        exact &= isinstance(both, Fraction) and both == batch / n
    ok = max(deviations) <= 10 and exact
    criterion(4, ok, f"max deviation from the published counts {max(deviations)} (tol 10); "
                     f"shared_both == batchwise/N exact: {exact}")
    assert ok


def test_criterion_05_sharing_ablation(sharing, criterion):
    sims = sharing.summary["similarity"]
    ratio = sharing.summary["shared_B_param_ratio"]
    ok = sharing.passed
    criterion(5, ok, "sims " + ", ".join(f"{k} {v:.4f}" for k, v in sims.items())
              + f"; shared_B/batchwise params {ratio:.4f} (<= 0.45)")
    assert ok, sharing.checks


def test_criterion_06_scale_ablation(scale, net, criterion):
    sims = scale.summary["similarity"]
    params = scale.summary["params_per_speaker"]
    ok = all(scale.checks[k] for k in ("nanovoice_vs_no_scale", "nanovoice_vs_no_norm", "scale_adds_sum_k"))
    criterion(6, ok, f"NanoVoice {sims['NanoVoice']:.4f}, -ScaleMatrix {sims['-ScaleMatrix']:.4f}, "
                     f"-Normalization {sims['-Normalization']:.4f}; params {params['NanoVoice']} - "
                     f"{params['-ScaleMatrix']} = sum k {scale.summary['sum_k']}")
    assert ok, scale.checks


def test_criterion_07_batch_size(net, cfg, criterion):
    report = ex.cmd_batchsize_sweep(net, cfg)
    sims = report.summary["similarity"]
    ok = report.passed
    criterion(7, ok, f"spread {report.summary['similarity_spread']:.4f} (<= 0.05); params "
                     f"{report.summary['params_per_speaker']} for N = {list(cfg.sweep_sizes)}; sims "
                     + ", ".join(f"{k} {v:.4f}" for k, v in sims.items()))
    assert ok, report.checks


def test_criterion_08_frozen_b(scale, criterion):
    sims = scale.summary["similarity"]
    gap = abs(sims["NanoVoice,frozen-B"] - sims["NanoVoice"])
    ok = scale.checks["frozen_B_within_0.02"]
    criterion(8, ok, f"frozen B {sims['NanoVoice,frozen-B']:.4f} vs trainable {sims['NanoVoice']:.4f}, "
                     f"gap {gap:.4f} (<= 0.02)")
    assert ok


def test_criterion_09_speedup(net, cfg, criterion):
    report = ex.cmd_bench(net, cfg.replace(bench_iters=cfg.iters, bench_reps=3), sizes=[8])
    row = report.rows[0]
    ok = row["speedup"] >= 1.6
    criterion(9, ok, f"N=8 over {row['iterations']} iterations: sequential {row['sequential_seconds']:.2f}s, "
                     f"batched {row['batched_seconds']:.2f}s, speedup {row['speedup']:.2f}x (>= 1.6)")
    assert ok


def test_criterion_10_end_to_end(net, cfg, scale, criterion):
    rows = [r for r in scale.rows if r["label"] == "NanoVoice"]
    wins = []
    for row in rows:
        batch = ex.reference_batch(cfg, row["seed"])
        baseline = ex.evaluate(ex.generate(net, None, batch, cfg, row["seed"]), batch)
        wins.append(int(np.sum(np.array(row["similarities"]) > baseline)))
    ok = len(rows) == 3 and all(w >= 7 for w in wins)
    criterion(10, ok, f"adapted beats baseline for {wins} of 8 speakers per seed (>= 7 each)")
    assert ok


def test_criterion_11_serialization(net, cfg, criterion):
    batch = ex.reference_batch(cfg, 0, 3)
    job = new_job(net, cfg.adapter(), batch, 0, 5, cfg.lr)
    bank, _ = adapt_batched(net, job)
    bank_bytes = bank_to_bytes(bank)
    net_bytes = net_to_bytes(net)
    round_trip = (bank_to_bytes(bank_from_bytes(bank_bytes)) == bank_bytes
                  and net_to_bytes(net_from_bytes(net_bytes)) == net_bytes)
    rejected = 0
    for data, load in ((bank_bytes, bank_from_bytes), (net_bytes, net_from_bytes)):
        for pos in range(4, 20):
            bad = bytearray(data)
            bad[pos] ^= 0x20
            result = None
            try:
                result = load(bytes(bad))
            except FormatError:
                rejected += 1
            assert result is None
    ok = round_trip and rejected == 32
    criterion(11, ok, f"byte-identical round trips: {round_trip}; corrupted headers rejected {rejected}/32")
    assert ok


def test_sharing_full_ordering(sharing):
    sims = sharing.summary["similarity"]
    assert sims["shared_both"] <= sims["shared_A"] <= sims["shared_B"] + 0.02
    assert sims["shared_B"] >= sims["batchwise"] - 0.03
