"""Training objective: vote offset loss, classification cross-entropy,
and the box regression stack (location, size, angle, corner distance),
combined with unit weights.

Positives are candidates lying inside a ground-truth box; all box terms
average over positives only, while classification averages over every
candidate including background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .detector import Box3D, ModelConfig, RawPrediction, encode_angle, normalize_yaw

# Loss weights: one lambda per top-level term, one delta per box sub-term.
LAMBDA_OFFSET = 1.0
LAMBDA_CLS = 1.0
LAMBDA_BOX = 1.0
DELTA_LOC = 1.0
DELTA_SIZE = 1.0
DELTA_ANGLE = 1.0
DELTA_CORNER = 1.0

# BEV corner sign pattern, counterclockwise from (+l/2, +w/2); bottom
# face first, then top.
_BEV_SIGNS = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]


@dataclass
class LossBreakdown:
    offset: float
    cls: float
    loc: float
    size: float
    angle: float
    corner: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "offset": self.offset,
            "cls": self.cls,
            "loc": self.loc,
            "size": self.size,
            "angle": self.angle,
            "corner": self.corner,
            "total": self.total,
        }


@dataclass
class TargetSet:
    """Per-candidate assignment: positives carry a box, class, and vote target."""

    positive: np.ndarray  # M bool
    class_ids: np.ndarray  # M int, 0 = background
    boxes: list[Box3D | None]
    vote_targets: np.ndarray  # Mx3, GT center - cluster position (zeros for negatives)


def point_in_box(point: np.ndarray, box: Box3D) -> bool:
    """Rotated-frame containment test (BEV rectangle plus z extent)."""
    d = np.asarray(point, dtype=np.float64) - box.center
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local_x = c * d[0] + s * d[1]
    local_y = -s * d[0] + c * d[1]
    return (
        abs(local_x) <= box.size[0] / 2.0
        and abs(local_y) <= box.size[1] / 2.0
        and abs(d[2]) <= box.size[2] / 2.0
    )


def assign_targets(
    candidates: np.ndarray,
    cluster_positions: np.ndarray,
    objects: list[tuple[Box3D, int]],
    margin: float = 0.0,
) -> TargetSet:
    """A candidate is positive iff its originating cluster lies inside a
    ground-truth box inflated by `margin` meters per dimension.

    Anchoring positivity to the fixed cluster position keeps the vote
    supervision alive no matter where the votes currently land; tying it
    to the (movable) candidate lets training collapse into an all-
    background zero of the loss by voting every candidate out of every
    box. The margin catches clusters the farthest-point sampler parked
    just beside a sparse object. The vote target points from the cluster
    to the box center; box regression applies at the candidate.
    """
    m = candidates.shape[0]
    positive = np.zeros(m, dtype=bool)
    class_ids = np.zeros(m, dtype=np.int64)
    boxes: list[Box3D | None] = [None] * m
    vote_targets = np.zeros((m, 3), dtype=np.float64)
    inflated = [
        (Box3D(center=box.center, size=box.size + margin, yaw=box.yaw), box, cls)
        for box, cls in objects
    ]
    for i in range(m):
        for test_box, box, cls in inflated:
            if point_in_box(cluster_positions[i], test_box):
                positive[i] = True
                class_ids[i] = cls
                boxes[i] = box
                vote_targets[i] = box.center - cluster_positions[i]
                break
    return TargetSet(positive=positive, class_ids=class_ids, boxes=boxes, vote_targets=vote_targets)


def smooth_l1(x, beta: float = 1.0) -> T.Tensor:
    """Mean elementwise Huber: 0.5 x^2/beta inside |x| < beta, |x| - beta/2 outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    xt = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
    v = xt.values
    if v.size == 0:
        raise ValueError("smooth_l1 on empty input")
    a = np.abs(v)
    quad = a < beta
    per = np.where(quad, 0.5 * v * v / beta, a - 0.5 * beta)
    out = T.Tensor([[per.mean()]], parents=(xt,))

    def _bp():
        g = out.grad[0, 0] / v.size
        xt.grad += g * np.where(quad, v / beta, np.sign(v))

    out._backprop = _bp
    return out


def cls_loss(logits: T.Tensor, labels) -> T.Tensor:
    """Mean softmax cross-entropy over all candidates, background included."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label outside logit range")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    log_p = z - np.log(ez.sum(axis=1, keepdims=True))
    val = float(-log_p[np.arange(n), labels].mean())
    out = T.Tensor([[val]], parents=(logits,))

    def _bp():
        onehot = np.zeros_like(p)
        onehot[np.arange(n), labels] = 1.0
        logits.grad += out.grad[0, 0] * (p - onehot) / n

    out._backprop = _bp
    return out


def _zero() -> T.Tensor:
    return T.Tensor([[0.0]])


def offset_loss(offsets: T.Tensor, targets: TargetSet) -> T.Tensor:
    """Smooth-L1 between predicted vote offsets and center offsets, positives only."""
    pos = np.flatnonzero(targets.positive)
    if pos.size == 0:
        return _zero()
    pred = T.gather_rows(offsets, pos)
    diff = T.sub(pred, T.Tensor(targets.vote_targets[pos]))
    return smooth_l1(diff)


def corners_from_box(box: Box3D) -> np.ndarray:
    """8x3 corners: bottom face then top, each CCW in BEV from (+l/2, +w/2)."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    out = np.empty((8, 3), dtype=np.float64)
    i = 0
    for sz in (-1.0, 1.0):
        for sx, sy in _BEV_SIGNS:
            lx, ly = sx * box.size[0] / 2.0, sy * box.size[1] / 2.0
            out[i] = box.center + np.array(
                [c * lx - s * ly, s * lx + c * ly, sz * box.size[2] / 2.0]
            )
            i += 1
    return out


def _corners_in_graph(center: T.Tensor, size: T.Tensor, yaw: T.Tensor) -> T.Tensor:
    """Differentiable Mx24 corner matrix in the canonical corner order."""
    cy, sy_ = T.cos(yaw), T.sin(yaw)
    cx = T.slice_cols(center, 0, 1)
    cyc = T.slice_cols(center, 1, 2)
    cz = T.slice_cols(center, 2, 3)
    half_l = T.scale(T.slice_cols(size, 0, 1), 0.5)
    half_w = T.scale(T.slice_cols(size, 1, 2), 0.5)
    half_h = T.scale(T.slice_cols(size, 2, 3), 0.5)
    cols: list[T.Tensor] = []
    for sz in (-1.0, 1.0):
        for sx, sy in _BEV_SIGNS:
            lx = T.scale(half_l, sx)
            ly = T.scale(half_w, sy)
            cols.append(T.add(cx, T.sub(T.mul(cy, lx), T.mul(sy_, ly))))
            cols.append(T.add(cyc, T.add(T.mul(sy_, lx), T.mul(cy, ly))))
            cols.append(T.add(cz, T.scale(half_h, sz)))
    return T.concat_cols(cols)


def _select_bin_column(matrix: T.Tensor, bin_ids: np.ndarray) -> T.Tensor:
    """Pick column bin_ids[i] of row i, keeping the graph differentiable."""
    onehot = np.zeros(matrix.shape, dtype=np.float64)
    onehot[np.arange(matrix.shape[0]), bin_ids] = 1.0
    return T.row_sum(T.mul(matrix, T.Tensor(onehot)))


def box_loss(
    raw: RawPrediction,
    candidates: T.Tensor,
    targets: TargetSet,
    config: ModelConfig,
) -> tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]:
    """Location, size, angle (bin CE + residual), and flip-min corner terms.

    The angle residual is supervised at the ground-truth bin; the corner
    term decodes the prediction's own yaw (argmax bin plus that bin's
    residual), so a box that is perfect up to a pi flip costs nothing.
    """
    pos = np.flatnonzero(targets.positive)
    if pos.size == 0:
        return _zero(), _zero(), _zero(), _zero()

    gt_boxes = [targets.boxes[i] for i in pos]
    anchors = np.array([config.anchors[targets.class_ids[i] - 1] for i in pos], dtype=np.float64)
    gt_centers = np.array([b.center for b in gt_boxes])
    gt_sizes = np.array([b.size for b in gt_boxes])
    bins = config.angle_bins
    encoded = [encode_angle(b.yaw, bins) for b in gt_boxes]
    gt_bins = np.array([e[0] for e in encoded], dtype=np.int64)
    gt_res = np.array([[e[1]] for e in encoded], dtype=np.float64)

    cand_pos = T.gather_rows(candidates, pos)
    pred_center = T.add(cand_pos, T.gather_rows(raw.center, pos))
    loc = smooth_l1(T.sub(pred_center, T.Tensor(gt_centers)))

    size_res = T.gather_rows(raw.size, pos)
    size = smooth_l1(T.sub(size_res, T.Tensor(np.log(gt_sizes / anchors))))

    bin_logits = T.gather_rows(raw.bin_logits, pos)
    res_sel = _select_bin_column(T.gather_rows(raw.bin_res, pos), gt_bins)
    angle = T.add(cls_loss(bin_logits, gt_bins), smooth_l1(T.sub(res_sel, T.Tensor(gt_res))))

    pred_size = T.mul(T.Tensor(anchors), T.exp(size_res))
    pred_bins = bin_logits.values.argmax(axis=1)
    pred_res = _select_bin_column(T.gather_rows(raw.bin_res, pos), pred_bins)
    centers_for_bins = np.array(
        [[_bin_center_value(b, bins)] for b in pred_bins], dtype=np.float64
    )
    pred_yaw = T.add(T.Tensor(centers_for_bins), T.scale(pred_res, np.pi / bins))
    pred_corners = _corners_in_graph(pred_center, pred_size, pred_yaw)

    gt_corners = np.stack([corners_from_box(b).reshape(-1) for b in gt_boxes])
    flipped = np.stack(
        [
            corners_from_box(
                Box3D(center=b.center, size=b.size, yaw=normalize_yaw(b.yaw + np.pi))
            ).reshape(-1)
            for b in gt_boxes
        ]
    )
    dist = T.scale(T.row_sum(T.absolute(T.sub(pred_corners, T.Tensor(gt_corners)))), 1.0 / 8.0)
    dist_flip = T.scale(
        T.row_sum(T.absolute(T.sub(pred_corners, T.Tensor(flipped)))), 1.0 / 8.0
    )
    corner = T.mean_all(T.min2(dist, dist_flip))
    return loc, size, angle, corner


def _bin_center_value(bin_id: int, bins: int) -> float:
    return normalize_yaw(bin_id * 2.0 * np.pi / bins)


def total_loss(
    offset: T.Tensor,
    cls: T.Tensor,
    loc: T.Tensor,
    size: T.Tensor,
    angle: T.Tensor,
    corner: T.Tensor,
) -> tuple[LossBreakdown, T.Tensor]:
    """Exact weighted sum; every weight is 1.0."""
    box = T.add(
        T.add(T.scale(loc, DELTA_LOC), T.scale(size, DELTA_SIZE)),
        T.add(T.scale(angle, DELTA_ANGLE), T.scale(corner, DELTA_CORNER)),
    )
    total = T.add(
        T.add(T.scale(offset, LAMBDA_OFFSET), T.scale(cls, LAMBDA_CLS)),
        T.scale(box, LAMBDA_BOX),
    )
    breakdown = LossBreakdown(
        offset=offset.item(),
        cls=cls.item(),
        loc=loc.item(),
        size=size.item(),
        angle=angle.item(),
        corner=corner.item(),
        total=total.item(),
    )
    return breakdown, total


def compute_loss(
    raw: RawPrediction,
    offsets: T.Tensor,
    candidates: T.Tensor,
    cluster_positions: np.ndarray,
    objects: list[tuple[Box3D, int]],
    config: ModelConfig,
) -> tuple[LossBreakdown, T.Tensor, TargetSet]:
    """Assemble the full objective for one scene's forward pass."""
    targets = assign_targets(
        candidates.values, cluster_positions, objects, margin=config.assign_margin
    )
    off = offset_loss(offsets, targets)
    cls = cls_loss(raw.cls_logits, targets.class_ids)
    loc, size, angle, corner = box_loss(raw, candidates, targets, config)
    breakdown, total = total_loss(off, cls, loc, size, angle, corner)
    return breakdown, total, targets
