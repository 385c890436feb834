"""Set-prediction training machinery: composite matching cost, optimal
bipartite assignment and the matched-pair training loss with exact gradients.

Cost construction and the loss are pure functions; the assignment solver is
deterministic, with ties between equal-cost assignments resolved toward the
lexicographically smallest ground-truth-major pairing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import BoxNormalizer
from .geometry import Box3D, diou_loss_3d_grad, rotated_iou_matrix

_PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class MatchWeights:
    lambda_cls: float = 2.0
    lambda_reg: float = 5.0
    lambda_iou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_reg, self.lambda_iou) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairing; every ground truth is matched when N >= M."""

    pairs: tuple  # ((pred_idx, gt_idx), ...) sorted by gt index
    unmatched_preds: tuple

    def matched_preds(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=int)

    def matched_gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=int)


def focal_loss(prob: float, positive: bool, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Focal binary loss at a single probability."""
    p = min(max(prob, _PROB_CLAMP), 1.0 - _PROB_CLAMP)
    if positive:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def _focal_pos_vec(p, alpha, gamma):
    p = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def _focal_neg_vec(p, alpha, gamma):
    p = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    return -(1.0 - alpha) * p**gamma * np.log(1.0 - p)


def _focal_pos_grad(p, alpha, gamma):
    q = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    g = alpha * gamma * (1.0 - q) ** (gamma - 1.0) * np.log(q) - alpha * (1.0 - q) ** gamma / q
    return np.where((p > _PROB_CLAMP) & (p < 1.0 - _PROB_CLAMP), g, 0.0)


def _focal_neg_grad(p, alpha, gamma):
    q = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    g = -(1.0 - alpha) * gamma * q ** (gamma - 1.0) * np.log(1.0 - q) + (1.0 - alpha) * q**gamma / (
        1.0 - q
    )
    return np.where((p > _PROB_CLAMP) & (p < 1.0 - _PROB_CLAMP), g, 0.0)


def match_cost_matrix(
    pred_probs: np.ndarray,
    pred_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    norm: BoxNormalizer,
    weights: MatchWeights = MatchWeights(),
) -> np.ndarray:
    """(N, M) matching cost: focal classification + L1 on the five normalized
    coordinates + (1 - BEV IoU). The IoU term is kept as 1 - IoU so every
    entry is nonnegative; the argmin is unaffected by the constant shift."""
    pred_probs = np.asarray(pred_probs, dtype=float)
    pred_boxes = np.asarray(pred_boxes, dtype=float).reshape(-1, 5)
    gt_boxes = np.asarray(gt_boxes, dtype=float).reshape(-1, 5)
    cls = _focal_pos_vec(pred_probs, weights.focal_alpha, weights.focal_gamma)[:, None]
    u_pred = norm.to_unit(pred_boxes)
    u_gt = norm.to_unit(gt_boxes)
    reg = np.abs(u_pred[:, None, :] - u_gt[None, :, :]).sum(axis=2)
    iou = 1.0 - rotated_iou_matrix(pred_boxes, gt_boxes)
    cost = weights.lambda_cls * cls + weights.lambda_reg * reg + weights.lambda_iou * iou
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite matching cost")
    return cost


def _solve_rectangular(cost_t: np.ndarray):
    """Shortest-augmenting-path assignment on an (M, N) matrix with M <= N.

    Column 0 is a virtual root so the alternating path bookkeeping stays
    uniform; real columns are 1..N. The inner relaxation is vectorized over
    columns, so one row insertion costs O(path length * N) numpy work.

    Returns (col_for_row (M,), row potentials u (M,), column potentials v (N,)).
    """
    m, n = cost_t.shape
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    p = np.full(n + 1, -1)  # p[j] = row matched to column j; p[0] is scratch
    way = np.zeros(n + 1, dtype=int)
    for i in range(m):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            unused = ~used[1:]
            cur = cost_t[i0] - u[i0] - v[1:]
            imp = unused & (cur < minv[1:])
            minv[1:][imp] = cur[imp]
            way[1:][imp] = j0
            cand = np.where(unused, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] < 0:
                break
        while j0 != 0:
            j_prev = way[j0]
            p[j0] = p[j_prev]
            j0 = j_prev
    col_for_row = np.empty(m, dtype=int)
    for j in range(1, n + 1):
        if p[j] >= 0:
            col_for_row[p[j]] = j - 1
    return col_for_row, u[:m], v[1:]


def _has_perfect_matching(adj, rows, free_cols):
    """Kuhn's algorithm: can every row in ``rows`` be matched into free_cols?"""
    match_col = {}
    for r in rows:
        seen = set()

        def try_row(rr):
            for cc in adj[rr]:
                if cc in seen or cc not in free_cols:
                    continue
                seen.add(cc)
                if cc not in match_col or try_row(match_col[cc]):
                    match_col[cc] = rr
                    return True
            return False

        if not try_row(r):
            return False
    return True


def _lexicographic_refine(cost_t, col_for_row, u, v):
    """Canonicalize among optimal assignments.

    All optimal assignments use only edges that are tight for the optimal
    dual (complementary slackness), so greedily fixing, for each ground
    truth in order, the smallest tight prediction that still leaves the
    rest matchable yields the lexicographically smallest optimal pairing.
    """
    m, n = cost_t.shape
    scale = max(1.0, float(np.max(np.abs(cost_t))))
    tol = 1e-9 * scale
    reduced = cost_t - u[:, None] - v[None, :]
    adj = [np.nonzero(reduced[i] <= tol)[0].tolist() for i in range(m)]
    chosen = np.empty(m, dtype=int)
    free_cols = set(range(n))
    for i in range(m):
        fixed = False
        for cand in adj[i]:
            if cand not in free_cols:
                continue
            rest_free = free_cols - {cand}
            if _has_perfect_matching(adj, range(i + 1, m), rest_free):
                chosen[i] = cand
                free_cols.discard(cand)
                fixed = True
                break
        if not fixed:  # numerically starved tight graph; keep the solver's answer
            return col_for_row
    old_total = cost_t[np.arange(m), col_for_row].sum()
    new_total = cost_t[np.arange(m), chosen].sum()
    if new_total > old_total + tol * m:
        return col_for_row  # pragma: no cover - defensive against tolerance slack
    return chosen


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment of every ground truth (column) to a distinct
    prediction (row); requires N >= M. Callers pad predictions, never GT."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n < m:
        raise ValueError(f"need at least as many predictions as ground truths, got {n} < {m}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite cost matrix")
    if m == 0:
        return Assignment(pairs=(), unmatched_preds=tuple(range(n)))
    pred_for_gt, u, v = _solve_rectangular(cost.T)
    pred_for_gt = _lexicographic_refine(cost.T, pred_for_gt, u, v)
    pairs = tuple((int(pred_for_gt[j]), j) for j in range(m))
    matched = set(int(p) for p, _ in pairs)
    unmatched = tuple(i for i in range(n) if i not in matched)
    return Assignment(pairs=pairs, unmatched_preds=unmatched)


@dataclass
class TrainingLossResult:
    total: float
    terms: dict
    d_prob: np.ndarray
    d_signal: np.ndarray
    d_cz: np.ndarray
    d_dz: np.ndarray


def training_loss(
    pred_probs: np.ndarray,
    pred_signal: np.ndarray,
    pred_cz: np.ndarray,
    pred_dz: np.ndarray,
    gt_bev: np.ndarray,
    gt_cz: np.ndarray,
    gt_dz: np.ndarray,
    assignment: Assignment,
    norm: BoxNormalizer,
    weights: MatchWeights = MatchWeights(),
) -> TrainingLossResult:
    """Matched-pair training loss and its gradients w.r.t. the decoder outputs.

    Classification (focal; matched proposals positive, all others negative)
    is summed over proposals and normalized by the number of ground truths;
    the L1 term on the five normalized coordinates and the rotated 3D DIoU
    term apply to matched pairs only and are averaged over pairs.
    """
    probs = np.asarray(pred_probs, dtype=float)
    sig = np.asarray(pred_signal, dtype=float).reshape(-1, 5)
    pred_cz = np.asarray(pred_cz, dtype=float)
    pred_dz = np.asarray(pred_dz, dtype=float)
    gt_bev = np.asarray(gt_bev, dtype=float).reshape(-1, 5)
    n = probs.shape[0]
    m = gt_bev.shape[0]
    a, g = weights.focal_alpha, weights.focal_gamma

    pos = np.zeros(n, dtype=bool)
    if assignment.pairs:
        pos[assignment.matched_preds()] = True
    cls_terms = np.where(pos, _focal_pos_vec(probs, a, g), _focal_neg_vec(probs, a, g))
    cls_norm = max(m, 1)
    cls = cls_terms.sum() / cls_norm
    d_prob = (
        np.where(pos, _focal_pos_grad(probs, a, g), _focal_neg_grad(probs, a, g)) / cls_norm
    ) * weights.lambda_cls

    d_signal = np.zeros_like(sig)
    d_cz = np.zeros(n)
    d_dz = np.zeros(n)
    reg = 0.0
    iou_term = 0.0
    if assignment.pairs:
        scale = norm.signal_scale
        u_gt = norm.to_unit(gt_bev)
        npairs = len(assignment.pairs)
        du_dsig = 1.0 / (2.0 * scale)
        # metric derivatives of from_unit per coordinate
        span = np.array(
            [
                norm.x_max - norm.x_min,
                norm.y_max - norm.y_min,
                norm.size_max_x,
                norm.size_max_y,
                math.pi,
            ]
        )
        for pi, gj in assignment.pairs:
            u_p = (sig[pi] / scale + 1.0) / 2.0
            diff = u_p - u_gt[gj]
            reg += np.abs(diff).sum()
            d_signal[pi] += weights.lambda_reg * np.sign(diff) * du_dsig / npairs

            bev = norm.from_unit(u_p)
            size_floor = bev[2:4] <= norm.min_size
            pred_box = Box3D(bev[0], bev[1], pred_cz[pi], bev[2], bev[3], pred_dz[pi], bev[4])
            gt_box = Box3D(
                gt_bev[gj, 0],
                gt_bev[gj, 1],
                gt_cz[gj],
                gt_bev[gj, 2],
                gt_bev[gj, 3],
                gt_dz[gj],
                gt_bev[gj, 4],
            )
            loss_j, grad7 = diou_loss_3d_grad(pred_box, gt_box)
            iou_term += loss_j
            # chain (cx, cy, dx, dy, theta) back through from_unit and the signal map
            d_bev = np.array([grad7[0], grad7[1], grad7[3], grad7[4], grad7[6]])
            if size_floor[0]:
                d_bev[2] = 0.0
            if size_floor[1]:
                d_bev[3] = 0.0
            d_signal[pi] += weights.lambda_iou * d_bev * span * du_dsig / npairs
            d_cz[pi] += weights.lambda_iou * grad7[2] / npairs
            d_dz[pi] += weights.lambda_iou * grad7[5] / npairs
        reg /= npairs
        iou_term /= npairs

    total = weights.lambda_cls * cls + weights.lambda_reg * reg + weights.lambda_iou * iou_term
    return TrainingLossResult(
        total=float(total),
        terms={"cls": float(cls), "reg": float(reg), "iou": float(iou_term)},
        d_prob=d_prob,
        d_signal=d_signal,
        d_cz=d_cz,
        d_dz=d_dz,
    )
