"""Noise schedule, forward corruption, score-matching loss and reverse sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, DomainError
from .tensor import RngStream, as_tensor, check_finite

T_MIN = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear rate schedule ``beta_t = beta0 + (beta1 - beta0) t`` on [0, 1]."""

    beta0: float = 0.05
    beta1: float = 20.0

    def __post_init__(self):
        if not (0 < self.beta0 <= self.beta1):
            raise DomainError(f"need 0 < beta0 <= beta1, got {self.beta0}, {self.beta1}")

    def beta(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * t

    def integral(self, t):
        """Closed form of the integral of beta over [0, t]."""
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t * t


@dataclass
class CorruptionSample:
    x_t: np.ndarray
    eps: np.ndarray
    t: float


def _check_t(t):
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or not np.all(np.isfinite(t_arr)):
        raise DomainError(f"t must lie in [0, 1], got {t}")


def lambda_of(schedule: NoiseSchedule, t):
    """Signal fraction ``exp(-int_0^t beta_s ds)``; accepts scalars or arrays."""
    _check_t(t)
    if np.ndim(t) == 0:
        return math.exp(-schedule.integral(float(t)))
    return np.exp(-schedule.integral(np.asarray(t, dtype=float)))


def corrupt(schedule: NoiseSchedule, x0, t, eps) -> CorruptionSample:
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} differ")
    lam = lambda_of(schedule, t)
    x_t = math.sqrt(lam) * x0 + math.sqrt(1.0 - lam) * eps
    return CorruptionSample(check_finite(x_t, "corrupt"), eps, float(t))


def score_loss(s_out, eps, t, mask, schedule: NoiseSchedule | None = None) -> float:
    """Masked mean of ``(sqrt(1 - lambda_t) * s_out + eps)**2`` for one (t, eps) draw.

    ``mask`` must have the shape of ``s_out`` or broadcast along a leading
    feature axis (e.g. F x L data with a 1 x L mask).
    """
    schedule = schedule or NoiseSchedule()
    s_out, eps, mask = as_tensor(s_out), as_tensor(eps), as_tensor(mask)
    if s_out.shape != eps.shape:
        raise DimensionError(f"score {s_out.shape} and eps {eps.shape} differ")
    try:
        full_mask = np.broadcast_to(mask, s_out.shape)
    except ValueError:
        raise DimensionError(f"mask {mask.shape} does not fit data {s_out.shape}") from None
    count = full_mask.sum()
    if count == 0:
        raise DegenerateInputError("mask has no active elements")
    sigma = math.sqrt(1.0 - lambda_of(schedule, t))
    resid = sigma * s_out + eps
    return float(np.sum(full_mask * resid * resid) / count)


def reverse_step(schedule: NoiseSchedule, x_t, s, t: float, dt: float, z, beta=None):
    """One Euler-Maruyama step of the reverse SDE from t to t - dt.

    ``beta`` overrides ``schedule.beta(t)`` (used to freeze the dynamics in tests).
    """
    if not (0.0 < dt <= t + 1e-12):
        raise DomainError(f"need 0 < dt <= t, got dt={dt}, t={t}")
    x_t, s, z = as_tensor(x_t), as_tensor(s), as_tensor(z)
    if not (x_t.shape == s.shape == z.shape):
        raise DimensionError(f"shapes differ: x_t {x_t.shape}, s {s.shape}, z {z.shape}")
    b = schedule.beta(t) if beta is None else beta
    out = x_t + b * (0.5 * x_t + s) * dt + math.sqrt(b * dt) * z
    return check_finite(out, "reverse_step")


def sample(schedule: NoiseSchedule, shape, score_fn, steps: int, stream: RngStream):
    """Integrate the reverse SDE from pure noise at t=1 down to t=0.

    ``score_fn(x, t)`` returns the score estimate at ``x``.  The last step adds no
    noise.  ``stream`` may also be a list with one stream per leading slice of
    ``shape``, so each slice's noise is independent of the batch it sits in.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    if isinstance(stream, RngStream):
        draw = stream.randn
    else:
        if len(stream) != shape[0]:
            raise DimensionError(f"{len(stream)} streams for leading dimension {shape[0]}")
        draw = lambda shp: np.stack([st.randn(shp[1:]) for st in stream])  # noqa: E731
    dt = 1.0 / steps
    x = draw(shape)
    for i in range(steps):
        t = 1.0 - i * dt
        z = draw(shape) if i < steps - 1 else np.zeros(shape)
        x = reverse_step(schedule, x, score_fn(x, t), t, dt, z)
    return x
