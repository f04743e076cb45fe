import math

import numpy as np
import pytest

from nanovoice.adapters import AdapterConfig, SharingMode, param_count
from nanovoice.errors import ConfigurationError, DimensionError, TrainingError
from nanovoice.experiments import reference_batch
from nanovoice.optim import AdamState, adam_step
from nanovoice.trainer import AdaptJob, adapt_batched, adapt_sequential, freeze_shared_B, new_job, noise_stream

BATCHWISE = AdapterConfig(sharing_mode="batchwise", scale_enabled=False, normalization_enabled=False)
NANOVOICE = AdapterConfig()


def scalar_adam(p, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for step, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**step)) / (math.sqrt(v / (1 - b2**step)) + eps)
    return p


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = adam_step(p, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], [1.0, -2.0]) and state.step == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": np.array([3.0, -0.2, 50.0])}, AdamState(lr=1e-4))
    assert np.allclose(p["w"], [-1e-4, 1e-4, -1e-4], rtol=1e-6)


def test_adam_matches_scalar_reference(rng):
    grads = rng.standard_normal((100, 4))
    p = {"w": np.zeros(4)}
    state = AdamState()
    for g in grads:
        adam_step(p, {"w": g.copy()}, state)
    expected = [scalar_adam(0.0, grads[:, i]) for i in range(4)]
    assert np.max(np.abs(p["w"] - expected)) <= 1e-12


def test_adam_missing_gradient_leaves_parameter():
    p = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(p, {"a": np.ones(2)}, AdamState())
    assert np.array_equal(p["b"], np.ones(2)) and not np.array_equal(p["a"], np.ones(2))


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


@pytest.fixture(scope="module")
def cfg(pretrained):
    return pretrained[2]


def test_job_size_mismatch(net, cfg):
    job = new_job(net, NANOVOICE, reference_batch(cfg, 0, 2), 0, 1)
    with pytest.raises(ConfigurationError):
        AdaptJob(job.bank, reference_batch(cfg, 0, 3))


def test_loss_history_shape(net, cfg):
    job = new_job(net, NANOVOICE, reference_batch(cfg, 0, 3), 0, 7)
    _, report = adapt_batched(net, job)
    assert job.loss_history.shape == (7, 3)
    assert report.param_count == float(param_count(job.bank.config, net.adapted_layer_dims()))
    d = report.to_dict()
    assert d["config"]["sharing_mode"] == "shared_B" and len(d["losses"]) == 7 and d["seconds"] > 0


def test_batched_equals_sequential(net, cfg):
    batch = reference_batch(cfg, 1, 4)
    job = new_job(net, BATCHWISE, batch, 3, 20, lr=1e-3)
    bank, _ = adapt_batched(net, job)
    banks, report = adapt_sequential(net, batch, BATCHWISE, 3, 20, lr=1e-3)
    diffs = [0.0]
    for n, solo in enumerate(banks):
        for joint, single in zip(bank.layers, solo.layers):
            diffs += [np.max(np.abs(joint.A[n] - single.A[0])), np.max(np.abs(joint.B[n] - single.B[0]))]
    assert max(diffs) <= 1e-9
    assert np.max(np.abs(job.loss_history - np.array(report.losses))) <= 1e-9


@pytest.mark.parametrize("config", [BATCHWISE, NANOVOICE])
def test_single_speaker_bit_for_bit(net, cfg, config):
    batch = reference_batch(cfg, 2, 1)
    job = new_job(net, config, batch, 5, 10)
    bank, _ = adapt_batched(net, job)
    (solo,), report = adapt_sequential(net, batch, config, 5, 10)
    for a, b in zip(bank.layers, solo.layers):
        assert np.array_equal(a.A, b.A) and np.array_equal(a.B, b.B) and np.array_equal(a.m, b.m)
    assert np.array_equal(job.loss_history[:, 0], np.array(report.losses)[:, 0])


def test_noise_streams_ignore_batch_composition():
    a = noise_stream(4, 1003)
    b = noise_stream(4, 1003)
    noise_stream(4, 1002).randn(10)
    assert np.array_equal(a.randn(5), b.randn(5))


def test_loss_drops_over_500_iterations(net, cfg):
    batch = reference_batch(cfg, 0, 8)
    job = new_job(net, NANOVOICE, batch, 0, 500)
    adapt_batched(net, job)
    first, last = job.loss_history[0].mean(), job.loss_history[-50:].mean()
    assert last <= 0.7 * first


def test_nan_names_speaker(net, cfg):
    batch = reference_batch(cfg, 0, 3)
    batch.x0[1, 2, 3] = np.nan
    job = new_job(net, NANOVOICE, batch, 0, 5)
    with pytest.raises(TrainingError, match=f"iteration 0 for speaker {batch.speaker_ids[1]}"):
        adapt_batched(net, job)


def test_freeze_shared_b(net, cfg):
    job = new_job(net, NANOVOICE, reference_batch(cfg, 0, 4), 0, 30, lr=1e-3)
    frozen = freeze_shared_B(job)
    before = [layer.B.copy() for layer in frozen.bank.layers]
    adapt_batched(net, frozen)
    assert all(np.array_equal(b, layer.B) for b, layer in zip(before, frozen.bank.layers))
    assert any(np.any(layer.A) for layer in frozen.bank.layers)
    dims = net.adapted_layer_dims()
    drop = param_count(job.bank.config, dims) - param_count(frozen.bank.config, dims)
    assert drop == sum(2 * d for d, _ in dims) / 4


def test_freeze_needs_shared_b(net, cfg):
    job = new_job(net, BATCHWISE, reference_batch(cfg, 0, 2), 0, 1)
    with pytest.raises(ConfigurationError):
        freeze_shared_B(job)


@pytest.mark.parametrize("config", [
    BATCHWISE,
    AdapterConfig(sharing_mode="batchwise"),
    AdapterConfig(sharing_mode="shared_B", freeze_B=True),
])
def test_permutation_equivariance(net, cfg, config):
    batch = reference_batch(cfg, 0, 3)
    perm = [2, 0, 1]
    results = []
    for b in (batch, batch.select(perm)):
        job = new_job(net, config, b, 1, 15, lr=1e-3)
        results.append(adapt_batched(net, job)[0])
    for orig, permuted in zip(results[0].layers, results[1].layers):
        assert np.array_equal(orig.A[perm], permuted.A)
        if orig.m is not None:
            assert np.array_equal(orig.m[perm], permuted.m)


def test_shared_b_receives_summed_update(net, cfg):
    job = new_job(net, NANOVOICE, reference_batch(cfg, 0, 2), 0, 3, lr=1e-3)
    before = [layer.B.copy() for layer in job.bank.layers]
    adapt_batched(net, job)
    assert job.bank.config.sharing_mode is SharingMode.SHARED_B
    assert any(not np.array_equal(b, layer.B) for b, layer in zip(before, job.bank.layers))
