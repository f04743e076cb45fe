import math

import numpy as np
import pytest
from scipy import integrate

from nanovoice.diffusion import NoiseSchedule, corrupt, lambda_of, reverse_step, sample, score_loss
from nanovoice.errors import DegenerateInputError, DimensionError, DomainError
from nanovoice.scorenet import score_forward
from nanovoice.tensor import RngStream
from nanovoice.toy import gen_speakers, make_reference_batch

SCHED = NoiseSchedule()


def quad_lambda(t, schedule=SCHED):
    area, _ = integrate.quad(schedule.beta, 0.0, t, epsabs=1e-13, epsrel=1e-13)
    return math.exp(-area)


def forced(lam, t=0.5):
    """Constant-rate schedule with lambda_t == lam at time t."""
    b = -math.log(lam) / t
    return NoiseSchedule(b, b)


# frozen from the quadrature oracle above
LAMBDA_HALF = 0.0805602441432366
LAMBDA_ONE = 4.427900150274157e-05


def test_lambda_at_zero():
    assert lambda_of(SCHED, 0.0) == 1.0


@pytest.mark.parametrize("t,frozen", [(0.5, LAMBDA_HALF), (1.0, LAMBDA_ONE)])
def test_lambda_matches_quadrature(t, frozen):
    assert lambda_of(SCHED, t) == pytest.approx(quad_lambda(t), rel=1e-10)
    assert lambda_of(SCHED, t) == pytest.approx(frozen, rel=1e-12)


def test_lambda_strictly_decreasing():
    grid = np.linspace(0, 1, 1001)
    assert np.all(np.diff(lambda_of(SCHED, grid)) < 0)


@pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
def test_lambda_domain(t):
    with pytest.raises(DomainError):
        lambda_of(SCHED, t)


def test_schedule_invariants():
    with pytest.raises(DomainError):
        NoiseSchedule(0.0, 1.0)
    with pytest.raises(DomainError):
        NoiseSchedule(2.0, 1.0)


def test_corrupt_at_zero_is_identity(rng):
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert np.array_equal(corrupt(SCHED, x0, 0.0, eps).x_t, x0)


def test_corrupt_forced_lambda():
    out = corrupt(forced(0.64), np.zeros((2, 3)), 0.5, np.ones((2, 3)))
    assert np.allclose(out.x_t, 0.6, atol=1e-14)


def test_corrupt_shape_mismatch():
    with pytest.raises(DimensionError):
        corrupt(SCHED, np.zeros((2, 3)), 0.5, np.zeros((3, 2)))


def test_corrupt_is_linear(rng):
    x1, x2, e1, e2 = (rng.standard_normal((4, 5)) for _ in range(4))
    lhs = corrupt(SCHED, 2 * x1 + x2, 0.3, 2 * e1 + e2).x_t
    rhs = 2 * corrupt(SCHED, x1, 0.3, e1).x_t + corrupt(SCHED, x2, 0.3, e2).x_t
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_corrupt_monte_carlo_moments():
    t, trials = 0.3, 20000
    x0 = np.array([1.5, -0.5, 0.0])
    lam = lambda_of(SCHED, t)
    eps = RngStream(4, 0).randn((trials, 3))
    xs = np.stack([corrupt(SCHED, x0, t, e).x_t for e in eps])
    mean_se = math.sqrt((1 - lam) / trials)
    assert np.all(np.abs(xs.mean(axis=0) - math.sqrt(lam) * x0) < 3 * mean_se)
    var_se = (1 - lam) * math.sqrt(2 / (trials - 1))
    assert np.all(np.abs(xs.var(axis=0, ddof=1) - (1 - lam)) < 3 * var_se)


def test_score_loss_exact_score_is_zero(rng):
    t = 0.4
    eps = rng.standard_normal((4, 6))
    s = -eps / math.sqrt(1 - lambda_of(SCHED, t))
    assert score_loss(s, eps, t, np.ones((4, 6))) == pytest.approx(0.0, abs=1e-24)


def test_score_loss_zero_output(rng):
    eps = rng.standard_normal((4, 6))
    mask = np.ones((1, 6))
    mask[0, 4:] = 0
    assert score_loss(np.zeros((4, 6)), eps, 0.7, mask) == pytest.approx(np.mean(eps[:, :4] ** 2), rel=1e-14)


def test_score_loss_loop_oracle(rng):
    s, eps = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    mask = (rng.uniform(size=(4, 6)) > 0.3).astype(float)
    mask[0, 0] = 1
    sigma = math.sqrt(1 - lambda_of(SCHED, 0.25))
    total, count = 0.0, 0
    for i in range(4):
        for j in range(6):
            if mask[i, j]:
                total += (sigma * s[i, j] + eps[i, j]) ** 2
                count += 1
    assert abs(score_loss(s, eps, 0.25, mask) - total / count) <= 1e-12


def test_score_loss_errors():
    with pytest.raises(DegenerateInputError):
        score_loss(np.ones((2, 2)), np.ones((2, 2)), 0.5, np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        score_loss(np.ones((2, 2)), np.ones((2, 3)), 0.5, np.ones((2, 2)))


def test_reverse_step_frozen_dynamics(rng):
    x, s, z = (rng.standard_normal(5) for _ in range(3))
    assert np.array_equal(reverse_step(SCHED, x, s, 0.5, 0.1, z, beta=0.0), x)


def test_reverse_step_substitution():
    out = reverse_step(SCHED, np.ones(1), np.zeros(1), 0.5, 0.1, np.zeros(1), beta=2.0)
    assert out[0] == pytest.approx(1.1, abs=1e-15)


@pytest.mark.parametrize("dt", [0.0, -0.1, 0.6])
def test_reverse_step_domain(dt):
    with pytest.raises(DomainError):
        reverse_step(SCHED, np.ones(1), np.zeros(1), 0.5, dt, np.zeros(1))


def test_gaussian_sampling_reaches_data_mean():
    mu, sd, chains, steps = 1.5, 0.5, 2000, 50

    def score_fn(x, t):
        lam = lambda_of(SCHED, t)
        var = lam * sd * sd + 1 - lam
        return -(x - math.sqrt(lam) * mu) / var

    out = sample(SCHED, (chains,), score_fn, steps, RngStream(3, 0))
    se = out.std(ddof=1) / math.sqrt(chains)
    assert abs(out.mean() - mu) < 3 * se


def test_reverse_step_mean_reverting():
    # one step on a far-off point moves it toward the data mean
    mu, t = 2.0, 0.05
    lam = lambda_of(SCHED, t)
    x = np.array([10.0])
    s = -(x - math.sqrt(lam) * mu) / (lam * 0.25 + 1 - lam)
    out = reverse_step(SCHED, x, s, t, 0.01, np.zeros(1))
    assert abs(out[0] - mu) < abs(x[0] - mu)


def test_sample_without_dynamics_returns_noise():
    schedule = NoiseSchedule(1e-12, 1e-12)
    out = sample(schedule, (3, 4), lambda x, t: np.zeros_like(x), 1, RngStream(8, 1))
    assert np.allclose(out, RngStream(8, 1).randn((3, 4)), atol=1e-9)


def test_sample_deterministic():
    fn = lambda x, t: -x  # noqa: E731
    a = sample(SCHED, (2, 3), fn, 10, RngStream(1, 2))
    b = sample(SCHED, (2, 3), fn, 10, RngStream(1, 2))
    assert np.array_equal(a, b)


def test_sample_per_slice_streams():
    fn = lambda x, t: -x  # noqa: E731
    both = sample(SCHED, (2, 3), fn, 10, [RngStream(1, 5), RngStream(1, 6)])
    alone = sample(SCHED, (1, 3), fn, 10, [RngStream(1, 6)])
    assert np.array_equal(both[1], alone[0])


def test_sample_needs_steps():
    with pytest.raises(DomainError):
        sample(SCHED, (2,), lambda x, t: x, 0, RngStream(0))


def test_pretrained_samples_match_training_spectrum(pretrained):
    net, _, cfg = pretrained
    speakers = gen_speakers(cfg.n_train_speakers, seed=cfg.train_seed)
    batch = make_reference_batch(speakers, [40] * len(speakers), seed=77)
    ids = np.arange(len(speakers))

    def score_fn(x, t):
        return score_forward(net, None, x, t, batch.content, batch.mask, speakers=ids, schedule=cfg.schedule())

    mels = sample(cfg.schedule(), batch.x0.shape, score_fn, cfg.sample_steps,
                  [RngStream(5, i) for i in ids])
    for i in ids:
        rms = np.sqrt(np.mean((mels[i].mean(axis=1) - batch.x0[i].mean(axis=1)) ** 2))
        assert rms <= 0.15, (i, rms)
