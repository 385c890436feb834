"""Exact rotated-box geometry: IoU, DIoU loss, point tests and rotated NMS.

Boxes live in a metric bird's-eye-view frame: x forward, y lateral, z up.
A BEV box is (cx, cy, dx, dy, theta) with theta the yaw of the box x-axis
(length axis) measured counter-clockwise from scene +x.

All functions here are pure; nothing holds shared mutable state, so they are
safe to call from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Vertex positions closer than this are considered coincident; intersection
# areas below its square are treated as empty to avoid sliver polygons.
_EPS = 1e-9


def canonical_angle(theta: float) -> float:
    """Fold a yaw angle into [-pi/2, pi/2) by multiples of pi.

    A rectangle is invariant under rotation by pi, so folding by pi never
    changes the point set and the side lengths keep their roles (a fold by
    pi/2 would have required swapping dx/dy; this canonicalization never
    takes that branch).
    """
    return float((theta + math.pi / 2.0) % math.pi - math.pi / 2.0)


@dataclass(frozen=True)
class BevBox:
    """Rotated bird's-eye-view rectangle (meters / radians)."""

    cx: float
    cy: float
    dx: float
    dy: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.dx, self.dy, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box field: {vals}")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError(f"box sides must be positive, got dx={self.dx}, dy={self.dy}")

    def canonical(self) -> "BevBox":
        return BevBox(self.cx, self.cy, self.dx, self.dy, canonical_angle(self.theta))

    def corners(self) -> np.ndarray:
        """(4, 2) corner array in counter-clockwise order."""
        return box_corners(self.as_array()[None, :])[0]

    def area(self) -> float:
        return self.dx * self.dy

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.dx, self.dy, self.theta], dtype=float)

    @staticmethod
    def from_array(a) -> "BevBox":
        return BevBox(float(a[0]), float(a[1]), float(a[2]), float(a[3]), float(a[4]))


@dataclass(frozen=True)
class Box3D:
    """BEV box extruded along z: adds center height cz and height dz."""

    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box field: {vals}")
        if self.dx <= 0 or self.dy <= 0 or self.dz <= 0:
            raise ValueError("box sides must be positive")

    def bev(self) -> BevBox:
        return BevBox(self.cx, self.cy, self.dx, self.dy, self.theta)

    def volume(self) -> float:
        return self.dx * self.dy * self.dz

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.theta], dtype=float
        )

    @staticmethod
    def from_array(a) -> "Box3D":
        return Box3D(*(float(v) for v in a[:7]))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    label: str = "Car"

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """Corners of (N, 5) BEV boxes as (N, 4, 2), counter-clockwise."""
    boxes = np.asarray(boxes, dtype=float)
    cx, cy, dx, dy, th = (boxes[:, i] for i in range(5))
    c, s = np.cos(th), np.sin(th)
    # local corner offsets, CCW: (+,+), (-,+), (-,-), (+,-)
    lx = np.stack([dx, -dx, -dx, dx], axis=1) * 0.5
    ly = np.stack([dy, dy, -dy, -dy], axis=1) * 0.5
    gx = cx[:, None] + c[:, None] * lx - s[:, None] * ly
    gy = cy[:, None] + s[:, None] * lx + c[:, None] * ly
    return np.stack([gx, gy], axis=2)


# ---------------------------------------------------------------------------
# batched convex clipping (Sutherland-Hodgman)
# ---------------------------------------------------------------------------

_CLIP_CAP = 16  # 4 starting vertices, at most +2 per half-plane with tangency dups


def _clip_half_plane(verts, counts, a, b):
    """Clip (B, CAP, 2) polygons against the half-plane left of edge a->b."""
    bsz, cap, _ = verts.shape
    safe = np.maximum(counts, 1)
    idx = np.arange(cap)
    active = idx[None, :] < counts[:, None]
    nxt_idx = (idx[None, :] + 1) % safe[:, None]
    cur = verts
    nxt = np.take_along_axis(verts, nxt_idx[:, :, None], axis=1)

    ev = b - a  # (B, 2)
    d_cur = ev[:, None, 0] * (cur[:, :, 1] - a[:, None, 1]) - ev[:, None, 1] * (
        cur[:, :, 0] - a[:, None, 0]
    )
    d_nxt = ev[:, None, 0] * (nxt[:, :, 1] - a[:, None, 1]) - ev[:, None, 1] * (
        nxt[:, :, 0] - a[:, None, 0]
    )
    in_cur = d_cur >= 0.0
    in_nxt = d_nxt >= 0.0
    crossing = in_cur != in_nxt
    denom = d_cur - d_nxt
    t = np.where(crossing & (np.abs(denom) > 0), d_cur / np.where(denom == 0, 1.0, denom), 0.0)
    inter = cur + t[:, :, None] * (nxt - cur)

    # per subject edge: emit the current vertex if inside, then the crossing point
    emit = np.stack([cur, inter], axis=2).reshape(bsz, 2 * cap, 2)
    mask = np.stack([in_cur & active, crossing & active], axis=2).reshape(bsz, 2 * cap)

    pos = np.cumsum(mask, axis=1) - 1
    out = np.zeros((bsz, 2 * cap, 2))
    bi, si = np.nonzero(mask)
    out[bi, pos[bi, si]] = emit[bi, si]
    new_counts = mask.sum(axis=1)
    if new_counts.max(initial=0) > cap:
        raise AssertionError("clip capacity exceeded")  # pragma: no cover
    return out[:, :cap], new_counts


def _polygon_area(verts, counts):
    """Signed shoelace area of padded (B, CAP, 2) polygons."""
    bsz, cap, _ = verts.shape
    safe = np.maximum(counts, 1)
    idx = np.arange(cap)
    active = idx[None, :] < counts[:, None]
    nxt_idx = (idx[None, :] + 1) % safe[:, None]
    nxt = np.take_along_axis(verts, nxt_idx[:, :, None], axis=1)
    cross = verts[:, :, 0] * nxt[:, :, 1] - verts[:, :, 1] * nxt[:, :, 0]
    return 0.5 * np.where(active, cross, 0.0).sum(axis=1)


def _lex_swap(a: np.ndarray, b: np.ndarray):
    """Order each pair canonically so f(a, b) and f(b, a) share one float path."""
    swap = np.zeros(a.shape[0], dtype=bool)
    undecided = np.ones(a.shape[0], dtype=bool)
    for k in range(a.shape[1]):
        swap |= undecided & (a[:, k] > b[:, k])
        undecided &= a[:, k] == b[:, k]
    a2 = np.where(swap[:, None], b, a)
    b2 = np.where(swap[:, None], a, b)
    return a2, b2


def _intersection_area_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection areas for paired (B, 5) boxes; exactly symmetric in (a, b)."""
    bsz = a.shape[0]
    if bsz == 0:
        return np.zeros(0)
    a, b = _lex_swap(a, b)
    # shift each pair near the origin for numerical headroom
    shift = 0.5 * (a[:, :2] + b[:, :2])
    a = a.copy()
    b = b.copy()
    a[:, :2] -= shift
    b[:, :2] -= shift

    subject = np.zeros((bsz, _CLIP_CAP, 2))
    subject[:, :4] = box_corners(a)
    counts = np.full(bsz, 4)
    clip = box_corners(b)
    for k in range(4):
        subject, counts = _clip_half_plane(subject, counts, clip[:, k], clip[:, (k + 1) % 4])
    area = _polygon_area(subject, counts)
    area = np.where(counts >= 3, area, 0.0)
    return np.where(area > _EPS * _EPS, area, 0.0)


def _iou_bev_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter = _intersection_area_pairs(a, b)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    iou = np.where(union > 0, inter / np.maximum(union, _EPS * _EPS), 0.0)
    # boxes whose vertex sets coincide (within 1e-9) must score exactly 1
    iou = np.where(inter >= union * (1.0 - 1e-9), 1.0, iou)
    return np.clip(iou, 0.0, 1.0)


def rotated_iou_matrix(a: np.ndarray, b: np.ndarray, chunk: int = 262144) -> np.ndarray:
    """Pairwise BEV IoU between (N, 5) and (M, 5) box arrays, as (N, M).

    Pairs whose bounding circles are disjoint have IoU 0 and skip clipping.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return np.zeros((n, m))
    dist2 = ((a[:, None, :2] - b[None, :, :2]) ** 2).sum(axis=2)
    rad = 0.5 * np.hypot(a[:, 2], a[:, 3])[:, None] + 0.5 * np.hypot(b[:, 2], b[:, 3])[None, :]
    out = np.zeros((n, m))
    ai, bj = np.nonzero(dist2 <= rad * rad)
    for lo in range(0, ai.size, chunk):
        sl = slice(lo, min(lo + chunk, ai.size))
        out[ai[sl], bj[sl]] = _iou_bev_pairs(a[ai[sl]], b[bj[sl]])
    return out


def rotated_iou_bev(a: BevBox, b: BevBox) -> float:
    """BEV IoU of two rotated boxes via exact convex-polygon clipping."""
    return float(_iou_bev_pairs(a.as_array()[None, :], b.as_array()[None, :])[0])


def _z_overlap_pairs(a3: np.ndarray, b3: np.ndarray) -> np.ndarray:
    lo = np.maximum(a3[:, 2] - a3[:, 5] / 2, b3[:, 2] - b3[:, 5] / 2)
    hi = np.minimum(a3[:, 2] + a3[:, 5] / 2, b3[:, 2] + b3[:, 5] / 2)
    return np.maximum(hi - lo, 0.0)


def iou_3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 3D IoU between (N, 7) and (M, 7) box arrays (cx,cy,cz,dx,dy,dz,theta)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return np.zeros((n, m))
    ai = np.repeat(np.arange(n), m)
    bj = np.tile(np.arange(m), n)
    a_p, b_p = a[ai], b[bj]
    bev_cols = [0, 1, 3, 4, 6]
    inter_bev = _intersection_area_pairs(a_p[:, bev_cols], b_p[:, bev_cols])
    inter = inter_bev * _z_overlap_pairs(a_p, b_p)
    vol_a = a_p[:, 3] * a_p[:, 4] * a_p[:, 5]
    vol_b = b_p[:, 3] * b_p[:, 4] * b_p[:, 5]
    union = vol_a + vol_b - inter
    iou = np.where(union > 0, inter / np.maximum(union, _EPS * _EPS), 0.0)
    iou = np.where(inter >= union * (1.0 - 1e-9), 1.0, iou)
    return np.clip(iou, 0.0, 1.0).reshape(n, m)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection area times vertical overlap, over the 3D union."""
    return float(iou_3d_matrix(a.as_array()[None, :], b.as_array()[None, :])[0, 0])


# ---------------------------------------------------------------------------
# differentiable scalar path (forward-mode duals) for the DIoU training loss
# ---------------------------------------------------------------------------


class _Jet:
    """Scalar with a forward-mode gradient vector. Comparisons use the value."""

    __slots__ = ("v", "g")

    def __init__(self, v, g):
        self.v = float(v)
        self.g = g

    @staticmethod
    def const(v, n):
        return _Jet(v, np.zeros(n))

    def __add__(self, o):
        if isinstance(o, _Jet):
            return _Jet(self.v + o.v, self.g + o.g)
        return _Jet(self.v + o, self.g)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, _Jet):
            return _Jet(self.v - o.v, self.g - o.g)
        return _Jet(self.v - o, self.g)

    def __rsub__(self, o):
        return _Jet(o - self.v, -self.g)

    def __mul__(self, o):
        if isinstance(o, _Jet):
            return _Jet(self.v * o.v, self.v * o.g + o.v * self.g)
        return _Jet(self.v * o, self.g * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, _Jet):
            return _Jet(self.v / o.v, (self.g * o.v - self.v * o.g) / (o.v * o.v))
        return _Jet(self.v / o, self.g / o)

    def __rtruediv__(self, o):
        return _Jet(o / self.v, -o * self.g / (self.v * self.v))

    def __neg__(self):
        return _Jet(-self.v, -self.g)

    def sqrt(self):
        r = math.sqrt(self.v)
        return _Jet(r, self.g / (2.0 * r) if r > 0 else self.g * 0.0)

    def __lt__(self, o):
        return self.v < (o.v if isinstance(o, _Jet) else o)

    def __le__(self, o):
        return self.v <= (o.v if isinstance(o, _Jet) else o)

    def __gt__(self, o):
        return self.v > (o.v if isinstance(o, _Jet) else o)

    def __ge__(self, o):
        return self.v >= (o.v if isinstance(o, _Jet) else o)


def _jmax(a, b):
    return a if a.v >= b.v else b


def _jmin(a, b):
    return a if a.v <= b.v else b


def _jet_corners(cx, cy, dx, dy, cs, sn):
    half_x = dx * 0.5
    half_y = dy * 0.5
    pts = []
    for fx, fy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        lx = half_x * fx
        ly = half_y * fy
        pts.append((cx + cs * lx - sn * ly, cy + sn * lx + cs * ly))
    return pts


def _jet_clip_area(subject, clip):
    """Shoelace area of `subject` clipped against convex CCW polygon `clip`."""
    poly = list(subject)
    for k in range(len(clip)):
        if not poly:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % len(clip)]
        evx = bx - ax
        evy = by - ay
        out = []
        for i in range(len(poly)):
            cx_, cy_ = poly[i]
            nx_, ny_ = poly[(i + 1) % len(poly)]
            d_cur = evx * (cy_ - ay) - evy * (cx_ - ax)
            d_nxt = evx * (ny_ - ay) - evy * (nx_ - ax)
            in_cur = d_cur.v >= 0.0
            in_nxt = d_nxt.v >= 0.0
            if in_cur:
                out.append((cx_, cy_))
            if in_cur != in_nxt:
                t = d_cur / (d_cur - d_nxt)
                out.append((cx_ + t * (nx_ - cx_), cy_ + t * (ny_ - cy_)))
        poly = out
    if len(poly) < 3:
        return None
    n = len(poly[0][0].g)
    area = _Jet.const(0.0, n)
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        area = area + (x0 * y1 - y0 * x1)
    area = area * 0.5
    if area.v <= _EPS * _EPS:
        return None
    return area


def diou_loss_3d_grad(pred: Box3D, gt: Box3D):
    """DIoU loss and its gradient w.r.t. the 7 predicted box parameters.

    Loss = 1 - IoU3D + rho^2 / c^2 where rho is the 3D center distance and c
    the diagonal of the smallest axis-aligned 3D box enclosing both rotated
    boxes. Piecewise smooth; at facet boundaries (corner contact, vertical
    tangency) the one-sided derivative of the active branch is returned.

    Returns (loss, grad) with grad ordered (cx, cy, cz, dx, dy, dz, theta).
    """
    n = 7
    p = [_Jet(v, np.eye(n)[i]) for i, v in enumerate(pred.as_array())]
    cx, cy, cz, dx, dy, dz, th = p
    cs = _Jet(math.cos(th.v), np.eye(n)[6] * -math.sin(th.v))
    sn = _Jet(math.sin(th.v), np.eye(n)[6] * math.cos(th.v))

    g = [_Jet.const(v, n) for v in gt.as_array()]
    gcx, gcy, gcz, gdx, gdy, gdz, gth = g
    gcs = _Jet.const(math.cos(gth.v), n)
    gsn = _Jet.const(math.sin(gth.v), n)

    pc = _jet_corners(cx, cy, dx, dy, cs, sn)
    gc = _jet_corners(gcx, gcy, gdx, gdy, gcs, gsn)

    inter_bev = _jet_clip_area(pc, gc)
    z_lo = _jmax(cz - dz * 0.5, gcz - gdz * 0.5)
    z_hi = _jmin(cz + dz * 0.5, gcz + gdz * 0.5)
    overlap_z = z_hi - z_lo
    if inter_bev is None or overlap_z.v <= 0.0:
        iou = _Jet.const(0.0, n)
    else:
        inter = inter_bev * overlap_z
        union = dx * dy * dz + gdx * gdy * gdz - inter
        iou = inter / union

    rho2 = (cx - gcx) * (cx - gcx) + (cy - gcy) * (cy - gcy) + (cz - gcz) * (cz - gcz)

    xs = [q[0] for q in pc] + [q[0] for q in gc]
    ys = [q[1] for q in pc] + [q[1] for q in gc]
    zs = [cz - dz * 0.5, cz + dz * 0.5, gcz - gdz * 0.5, gcz + gdz * 0.5]
    xlo, xhi = _minmax(xs)
    ylo, yhi = _minmax(ys)
    zlo, zhi = _minmax(zs)
    ex, ey, ez = xhi - xlo, yhi - ylo, zhi - zlo
    c2 = ex * ex + ey * ey + ez * ez
    if c2.v <= 0.0:
        return 0.0, np.zeros(n)

    loss = 1.0 - iou + rho2 / c2
    return loss.v, loss.g.copy()


def _minmax(jets):
    lo = jets[0]
    hi = jets[0]
    for j in jets[1:]:
        lo = _jmin(lo, j)
        hi = _jmax(hi, j)
    return lo, hi


def diou_loss_3d(pred: Box3D, gt: Box3D) -> float:
    """Rotated 3D DIoU loss, >= 0 and >= 1 - IoU3D; 0 iff pred == gt."""
    return diou_loss_3d_grad(pred, gt)[0]


# ---------------------------------------------------------------------------
# point-in-box tests
# ---------------------------------------------------------------------------


def points_in_box_mask(points: np.ndarray, box: BevBox) -> np.ndarray:
    """Boolean mask over (P, 2) points, boundary inclusive with 1e-9 slack."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(box.theta), math.sin(box.theta)
    px = pts[:, 0] - box.cx
    py = pts[:, 1] - box.cy
    lx = c * px + s * py
    ly = -s * px + c * py
    return (np.abs(lx) <= box.dx / 2 + _EPS) & (np.abs(ly) <= box.dy / 2 + _EPS)


def count_points_in_box(points: np.ndarray, box: BevBox) -> int:
    """Number of points inside or on the rotated rectangle."""
    if len(points) == 0:
        return 0
    return int(points_in_box_mask(points, box).sum())


def count_points_in_boxes(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Point counts for (N, 5) boxes over (P, 2) points."""
    return PointIndex(points).counts(boxes)


class PointIndex:
    """Coarse spatial binning of 2D points for repeated exact box counts.

    Bins are laid out x-major so a y-range within one x-row is contiguous;
    per box the candidate set (all points in bins overlapping the box's
    AABB) is gathered with a couple of slices before the exact rotated test.
    """

    def __init__(self, points_xy: np.ndarray, cell: float = 4.0):
        pts = np.asarray(points_xy, dtype=float).reshape(-1, 2)
        self.pts = pts
        self.cell = cell
        if pts.shape[0] == 0:
            self.nx = self.ny = 0
            return
        self.x0, self.y0 = pts.min(axis=0)
        ix = np.floor((pts[:, 0] - self.x0) / cell).astype(int)
        iy = np.floor((pts[:, 1] - self.y0) / cell).astype(int)
        self.nx = int(ix.max()) + 1
        self.ny = int(iy.max()) + 1
        ids = ix * self.ny + iy
        self.order = np.argsort(ids, kind="stable")
        sorted_ids = ids[self.order]
        self.starts = np.searchsorted(sorted_ids, np.arange(self.nx * self.ny + 1))

    def _candidates(self, cx: float, cy: float, radius: float) -> np.ndarray:
        bx0 = max(int((cx - radius - self.x0) // self.cell), 0)
        bx1 = min(int((cx + radius - self.x0) // self.cell), self.nx - 1)
        by0 = max(int((cy - radius - self.y0) // self.cell), 0)
        by1 = min(int((cy + radius - self.y0) // self.cell), self.ny - 1)
        if bx1 < bx0 or by1 < by0:
            return np.empty(0, dtype=int)
        rows = [
            self.order[self.starts[bx * self.ny + by0] : self.starts[bx * self.ny + by1 + 1]]
            for bx in range(bx0, bx1 + 1)
        ]
        return rows[0] if len(rows) == 1 else np.concatenate(rows)

    def counts(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 5)
        out = np.zeros(boxes.shape[0], dtype=int)
        if self.pts.shape[0] == 0:
            return out
        for i, row in enumerate(boxes):
            radius = 0.5 * math.hypot(row[2], row[3]) + _EPS
            cand = self._candidates(row[0], row[1], radius)
            if cand.size == 0:
                continue
            pts = self.pts[cand]
            c, s = math.cos(row[4]), math.sin(row[4])
            px = pts[:, 0] - row[0]
            py = pts[:, 1] - row[1]
            lx = c * px + s * py
            ly = -s * px + c * py
            out[i] = int(
                ((np.abs(lx) <= row[2] / 2 + _EPS) & (np.abs(ly) <= row[3] / 2 + _EPS)).sum()
            )
        return out


# ---------------------------------------------------------------------------
# rotated NMS
# ---------------------------------------------------------------------------


def nms_rotated(dets, iou_threshold: float):
    """Greedy score-descending suppression using BEV IoU.

    Ties in score are broken by the lower original index, so the result is
    deterministic across runs and platforms. Returns the survivors ordered
    by descending score.
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.stack([dets[i].box.bev().as_array() for i in order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(order[k])
        alive[k] = False
        rest = np.nonzero(alive)[0]
        if rest.size == 0:
            break
        ious = rotated_iou_matrix(boxes[k][None, :], boxes[rest])[0]
        alive[rest[ious > iou_threshold]] = False
    return [dets[i] for i in keep]
