"""Noise schedules, box normalization, forward corruption and the reverse step.

The diffusion state is a 5-vector of dimensionless signal coordinates per box:
each metric BEV coordinate is mapped affinely to [0, 1], then stretched to
[-scale, +scale]. Schedules and normalizers are immutable after construction
and safe to share across threads; all functions are pure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import canonical_angle


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule over T discrete steps.

    ``alpha_bars`` has length T + 1 and is indexed by time level directly:
    alpha_bars[0] == 1 and alpha_bars[t] is the cumulative product of the
    first t alphas.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b, a, ab = self.betas, self.alphas, self.alpha_bars
        if b.ndim != 1 or b.size < 1:
            raise ValueError("schedule needs at least one step")
        if not (np.all(b > 0) and np.all(b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be nondecreasing")
        if not np.allclose(a, 1.0 - b, rtol=0, atol=0):
            raise ValueError("alphas inconsistent with betas")
        if ab.shape != (b.size + 1,) or ab[0] != 1.0:
            raise ValueError("alpha_bars must start at 1 and have length T + 1")
        running = np.concatenate([[1.0], np.cumprod(a)])
        if np.max(np.abs(ab - running)) > 1e-12:
            raise ValueError("alpha_bars is not the running product of alphas")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"time level {t} outside [0, {self.num_steps}]")
        return float(self.alpha_bars[t])


def linear_beta_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp (the standard DDPM/DDIM convention)."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    betas = np.linspace(beta_start, beta_end, num_steps)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class BoxNormalizer:
    """Affine map between metric BEV boxes and signal-space coordinates.

    Unit coordinates: cx by [x_min, x_max], cy by [y_min, y_max], dx by
    (0, size_max_x], dy by (0, size_max_y], theta by [-pi/2, pi/2) -> [0, 1).
    Signal coordinates are (2 u - 1) * signal_scale.
    """

    x_min: float = 0.0
    x_max: float = 70.4
    y_min: float = -40.0
    y_max: float = 40.0
    size_max_x: float = 8.0
    size_max_y: float = 5.0
    signal_scale: float = 2.0

    # decoded sizes are floored here so a clamped signal never yields a
    # degenerate (zero-sided) box
    min_size = 1e-3

    def __post_init__(self):
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("empty scene range")
        if self.size_max_x <= 0 or self.size_max_y <= 0 or self.signal_scale <= 0:
            raise ValueError("size ceilings and signal scale must be positive")

    def to_unit(self, boxes: np.ndarray) -> np.ndarray:
        """Map (..., 5) metric boxes into [0, 1]^5, clamping out-of-range values."""
        boxes = np.asarray(boxes, dtype=float)
        if not np.all(np.isfinite(boxes)):
            raise ValueError("non-finite box coordinates")
        u = np.empty_like(boxes)
        u[..., 0] = (boxes[..., 0] - self.x_min) / (self.x_max - self.x_min)
        u[..., 1] = (boxes[..., 1] - self.y_min) / (self.y_max - self.y_min)
        u[..., 2] = boxes[..., 2] / self.size_max_x
        u[..., 3] = boxes[..., 3] / self.size_max_y
        theta = (boxes[..., 4] + math.pi / 2.0) % math.pi - math.pi / 2.0
        u[..., 4] = (theta + math.pi / 2.0) / math.pi
        return np.clip(u, 0.0, 1.0)

    def out_of_range(self, boxes: np.ndarray) -> np.ndarray:
        """Mask of boxes whose center or size falls outside the configured ranges."""
        boxes = np.asarray(boxes, dtype=float)
        return (
            (boxes[..., 0] < self.x_min)
            | (boxes[..., 0] > self.x_max)
            | (boxes[..., 1] < self.y_min)
            | (boxes[..., 1] > self.y_max)
            | (boxes[..., 2] > self.size_max_x)
            | (boxes[..., 3] > self.size_max_y)
        )

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        out[..., 0] = self.x_min + u[..., 0] * (self.x_max - self.x_min)
        out[..., 1] = self.y_min + u[..., 1] * (self.y_max - self.y_min)
        out[..., 2] = np.maximum(u[..., 2] * self.size_max_x, self.min_size)
        out[..., 3] = np.maximum(u[..., 3] * self.size_max_y, self.min_size)
        out[..., 4] = u[..., 4] * math.pi - math.pi / 2.0
        return out

    def encode(self, boxes: np.ndarray) -> np.ndarray:
        """Metric boxes -> signal coordinates in [-scale, scale]."""
        return (2.0 * self.to_unit(boxes) - 1.0) * self.signal_scale

    def decode(self, signal: np.ndarray) -> np.ndarray:
        """Signal coordinates -> metric boxes (clamps into range first)."""
        signal = np.asarray(signal, dtype=float)
        u = np.clip((signal / self.signal_scale + 1.0) / 2.0, 0.0, 1.0)
        return self.from_unit(u)


def clamp_signal(x: np.ndarray, scale: float) -> np.ndarray:
    """Per-dimension clamp to [-scale, scale]; idempotent."""
    return np.clip(np.asarray(x, dtype=float), -scale, scale)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 1 <= t <= sched.num_steps:
        raise ValueError(f"time level {t} outside [1, {sched.num_steps}]")
    eps = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(eps)):
        raise ValueError("non-finite noise")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * np.asarray(x0, dtype=float) + math.sqrt(1.0 - ab) * eps


def eps_from_x0(x_t: np.ndarray, x0_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noise implied by a clean-sample prediction; exact inverse of q_sample."""
    if not 1 <= t <= sched.num_steps:
        raise ValueError(f"time level {t} outside [1, {sched.num_steps}]")
    ab = sched.alpha_bar(t)
    return (np.asarray(x_t, dtype=float) - math.sqrt(ab) * np.asarray(x0_hat, dtype=float)) / math.sqrt(
        1.0 - ab
    )


def ddim_sigma(
    sched: NoiseSchedule, t: int, t_prev: int, eta: float = 1.0, printed_variant: bool = False
) -> float:
    """Stochasticity level of the reverse update from t to t_prev.

    Default is the standard form
    sigma = eta * sqrt((1 - abar_prev) / (1 - abar_t)) * sqrt(1 - abar_t / abar_prev).
    ``printed_variant`` selects the inverted-ratio form
    sigma = eta * sqrt((1 - abar_t / abar_prev) * (1 - abar_t) / (1 - abar_prev)),
    kept only for comparison; it is undefined at t_prev = 0 (returns 0 there).
    """
    if not (1 <= t <= sched.num_steps and 0 <= t_prev < t):
        raise ValueError(f"need 1 <= t <= T and 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    if t_prev == 0:
        return 0.0
    if printed_variant:
        return eta * math.sqrt((1.0 - ab_t / ab_p) * (1.0 - ab_t) / (1.0 - ab_p))
    return eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)


def ddim_step(
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    t_prev: int,
    noise: np.ndarray,
    sched: NoiseSchedule,
    eta: float = 1.0,
    printed_variant: bool = False,
) -> np.ndarray:
    """One reverse update from time level t to t_prev (t_prev = t - s).

    x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat
             + sigma * noise,
    with eps_hat implied by (x_t, x0_hat). At t_prev = 0 (abar_0 = 1) the
    deterministic part collapses to x0_hat exactly.
    """
    sigma = ddim_sigma(sched, t, t_prev, eta=eta, printed_variant=printed_variant)
    ab_p = sched.alpha_bar(t_prev)
    eps_hat = eps_from_x0(x_t, x0_hat, t, sched)
    coef_sq = 1.0 - ab_p - sigma * sigma
    if coef_sq < 0.0:
        warnings.warn(
            f"direction coefficient clamped to 0 at (t={t}, t_prev={t_prev}): "
            f"1 - abar_prev - sigma^2 = {coef_sq:.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
        coef_sq = 0.0
    return (
        math.sqrt(ab_p) * np.asarray(x0_hat, dtype=float)
        + math.sqrt(coef_sq) * eps_hat
        + sigma * np.asarray(noise, dtype=float)
    )
