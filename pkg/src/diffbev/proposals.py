"""Diffusion proposals: GT corruption, empty-box resampling, size constraints
and the epoch-dependent time-step ceiling.

Every function takes an explicit numpy Generator; with independent per-scene
streams the whole module is safe to run scene-parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .diffusion import BoxNormalizer, NoiseSchedule, clamp_signal, q_sample
from .geometry import PointIndex

# provenance codes per proposal
FROM_GT = 0
RESAMPLED = 1
INFERENCE = 2


@dataclass(frozen=True)
class ProposalSet:
    """N proposal boxes with consistent metric and signal views at one time level."""

    boxes: np.ndarray  # (N, 5) metric BEV boxes
    signal: np.ndarray  # (N, 5) clamped signal coordinates
    t: int
    provenance: np.ndarray  # (N,) int8, FROM_GT / RESAMPLED / INFERENCE
    low_points: np.ndarray  # (N,) bool, best-effort slots left under the point threshold

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def consistency_error(self, norm: BoxNormalizer) -> float:
        """Max abs difference between the stored metric view and decode(signal)."""
        return float(np.max(np.abs(self.boxes - norm.decode(self.signal)), initial=0.0))


@dataclass(frozen=True)
class DynamicTimeConfig:
    """Sine ramp of the training-time ceiling on the diffusion time level."""

    max_time: int = 1000
    omega: int = 5
    sigma: float = 0.5
    epochs: int = 60

    def __post_init__(self):
        if not 0 < self.omega <= self.max_time:
            raise ValueError("need 0 < omega <= max_time")
        if not 0 < self.sigma <= 1:
            raise ValueError("need 0 < sigma <= 1")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")


def dynamic_t_max(epoch: int, cfg: DynamicTimeConfig) -> int:
    """Time-step ceiling for a given epoch index.

    floor(T * sin(acos(w/T)/(sigma n) * x + asin(w/T))) while x < sigma n,
    then T. The floor carries a 1e-7 nudge so that exact values (notably
    T * (w/T) = w at x = 0) are not knocked down by one ulp.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    T = float(cfg.max_time)
    ramp_end = cfg.sigma * cfg.epochs
    if epoch >= ramp_end:
        return cfg.max_time
    ratio = cfg.omega / T
    arg = math.acos(ratio) / ramp_end * epoch + math.asin(ratio)
    return int(math.floor(T * math.sin(arg) + 1e-7))


def correlated_normals(rng: np.random.Generator, n: int, rho: float = 0.8):
    """Raw correlated pair (W, L): L, X iid standard normal, W = rho L + sqrt(1-rho^2) X."""
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"correlation must lie in [-1, 1], got {rho}")
    L = rng.standard_normal(n)
    X = rng.standard_normal(n)
    W = rho * L + math.sqrt(1.0 - rho * rho) * X
    return W, L


def sample_correlated_size(
    rng: np.random.Generator,
    n: int = 1,
    rho: float = 0.8,
    size_max_x: float = 8.0,
    size_max_y: float = 5.0,
):
    """Box sizes with correlated length/width.

    The correlated Gaussians (W, L) are pushed through the standard normal
    CDF (a Gaussian copula), which lands them in (0, 1) without clamping
    artifacts and preserves their dependence by rank, then scaled to the
    (0, w) x (0, l) ceilings: dx = Phi(W) * w, dy = Phi(L) * l.
    """
    W, L = correlated_normals(rng, n, rho)
    return ndtr(W) * size_max_x, ndtr(L) * size_max_y


def pad_gt_to_n(
    gt_boxes: np.ndarray,
    n: int,
    norm: BoxNormalizer,
    rng: np.random.Generator,
    rho: float = 0.8,
):
    """Repeat ground-truth boxes up to n entries.

    Cyclic repetition when 0 < |gt| <= n, a uniform subsample without
    replacement when |gt| > n, and n inference-style random proposals when
    the scene has no ground truth. Returns (boxes (n, 5), provenance (n,)).
    """
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 5)
    m = gt_boxes.shape[0]
    if m == 0:
        pset = sample_inference_proposals(n, t=1, norm=norm, rng=rng, rho=rho)
        return pset.boxes, np.full(n, INFERENCE, dtype=np.int8)
    if m > n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
        return gt_boxes[idx], np.full(n, FROM_GT, dtype=np.int8)
    return gt_boxes[np.arange(n) % m], np.full(n, FROM_GT, dtype=np.int8)


def corrupt(
    boxes: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    norm: BoxNormalizer,
    rng: np.random.Generator,
    provenance: np.ndarray | None = None,
) -> ProposalSet:
    """Diffuse metric boxes to time level t and materialize both views."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
    z0 = norm.encode(boxes)
    eps = rng.standard_normal(z0.shape)
    zt = clamp_signal(q_sample(z0, t, eps, sched), norm.signal_scale)
    if provenance is None:
        provenance = np.full(len(boxes), FROM_GT, dtype=np.int8)
    return ProposalSet(
        boxes=norm.decode(zt),
        signal=zt,
        t=t,
        provenance=np.asarray(provenance, dtype=np.int8).copy(),
        low_points=np.zeros(len(boxes), dtype=bool),
    )


def random_scene_boxes(
    rng: np.random.Generator, n: int, norm: BoxNormalizer, rho: float = 0.8
) -> np.ndarray:
    """Random boxes: uniform center over the scene range, correlated sizes, uniform yaw."""
    cx = rng.uniform(norm.x_min, norm.x_max, n)
    cy = rng.uniform(norm.y_min, norm.y_max, n)
    dx, dy = sample_correlated_size(rng, n, rho, norm.size_max_x, norm.size_max_y)
    theta = rng.uniform(-math.pi / 2.0, math.pi / 2.0, n)
    return np.stack([cx, cy, dx, dy, theta], axis=1)


def resample_empty(
    pset: ProposalSet,
    points_xy: np.ndarray,
    eta: int,
    norm: BoxNormalizer,
    rng: np.random.Generator,
    rho: float = 0.8,
    max_rounds: int = 100,
) -> ProposalSet:
    """Replace proposals containing fewer than eta points with fresh random boxes.

    Loops until every box passes or max_rounds is hit; slots still failing
    then keep their best-seen candidate (highest point count) and are
    flagged in ``low_points``.
    """
    if eta <= 0:
        return pset
    index = PointIndex(np.asarray(points_xy, dtype=float).reshape(-1, 2))
    boxes = pset.boxes.copy()
    signal = pset.signal.copy()
    provenance = pset.provenance.copy()

    counts = index.counts(boxes)
    best_boxes = boxes.copy()
    best_counts = counts.copy()
    failing = np.nonzero(counts < eta)[0]
    rounds = 0
    while failing.size and rounds < max_rounds:
        fresh = random_scene_boxes(rng, failing.size, norm, rho)
        fresh_counts = index.counts(fresh)
        boxes[failing] = fresh
        provenance[failing] = RESAMPLED
        better = fresh_counts > best_counts[failing]
        best_boxes[failing[better]] = fresh[better]
        best_counts[failing[better]] = fresh_counts[better]
        counts[failing] = fresh_counts
        failing = failing[fresh_counts < eta]
        rounds += 1

    low = np.zeros(len(boxes), dtype=bool)
    if failing.size:
        boxes[failing] = best_boxes[failing]
        low[failing] = True
    changed = provenance == RESAMPLED
    signal[changed] = norm.encode(boxes[changed])
    return ProposalSet(
        boxes=norm.decode(signal),
        signal=signal,
        t=pset.t,
        provenance=provenance,
        low_points=low,
    )


def sample_inference_proposals(
    n: int,
    t: int,
    norm: BoxNormalizer,
    rng: np.random.Generator,
    rho: float = 0.8,
) -> ProposalSet:
    """Gaussian signal-space proposals with size dimensions overridden by the
    correlated sampler; centers and yaw stay unconstrained."""
    if n < 1:
        raise ValueError("need at least one proposal")
    z = rng.standard_normal((n, 5))
    dx, dy = sample_correlated_size(rng, n, rho, norm.size_max_x, norm.size_max_y)
    z[:, 2] = (2.0 * dx / norm.size_max_x - 1.0) * norm.signal_scale
    z[:, 3] = (2.0 * dy / norm.size_max_y - 1.0) * norm.signal_scale
    z = clamp_signal(z, norm.signal_scale)
    return ProposalSet(
        boxes=norm.decode(z),
        signal=z,
        t=t,
        provenance=np.full(n, INFERENCE, dtype=np.int8),
        low_points=np.zeros(n, dtype=bool),
    )
