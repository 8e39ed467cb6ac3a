"""Box algebra: anchors, transform encode/decode, IoU, NMS, minibatch sampling.

Boxes are stored center-form as (xc, yc, w, h) float arrays of shape (..., 4),
in image pixel units.  Corner form (x1, y1, x2, y2) is derived on demand and
uses the continuous pixel-area convention: a box covering pixel columns
a..b inclusive has x1 = a, x2 = b + 1, w = b - a + 1.

Everything here is pure numpy except the two training-path ops that need
gradients (``decode_op`` and ``smooth_l1``), which plug into the autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation


# ---------------------------------------------------------------------------
# Representation helpers


def to_corners(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    wh = corners[..., 2:] - corners[..., :2]
    return np.concatenate([corners[..., :2] + wh / 2.0, wh], axis=-1)


def validate_boxes(boxes: np.ndarray) -> None:
    boxes = np.asarray(boxes)
    if boxes.shape[-1] != 4:
        raise ContractViolation(f"boxes must have last extent 4, got {boxes.shape}")
    if boxes.size and not (np.all(boxes[..., 2] > 0) and np.all(boxes[..., 3] > 0)):
        raise ContractViolation("box extents must be positive")


# ---------------------------------------------------------------------------
# Transform parameterization: normalized offsets + log-space scaling


def encode(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Deltas carrying each anchor onto its target box."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    tx = (targets[..., 0] - anchors[..., 0]) / anchors[..., 2]
    ty = (targets[..., 1] - anchors[..., 1]) / anchors[..., 3]
    tw = np.log(targets[..., 2] / anchors[..., 2])
    th = np.log(targets[..., 3] / anchors[..., 3])
    return np.stack([tx, ty, tw, th], axis=-1)


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Apply deltas to anchors: x = xa + tx*wa, w = wa*exp(tw) (same for y, h)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    x = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    y = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    w = anchors[..., 2] * np.exp(deltas[..., 2])
    h = anchors[..., 3] * np.exp(deltas[..., 3])
    return np.stack([x, y, w, h], axis=-1)


def decode_op(anchors: np.ndarray, deltas: ad.Tensor,
              max_log_scale: Optional[float] = None) -> ad.Tensor:
    """Differentiable decode of an (N,4) delta tensor against fixed anchors.

    ``max_log_scale`` optionally clamps tw/th (zero gradient outside the
    clamp), a stability valve for early training steps; geometry semantics
    are unchanged within the clamp range.
    """
    anchors = np.asarray(anchors, dtype=deltas.dtype)
    if deltas.shape != anchors.shape:
        raise ContractViolation(f"deltas shape {deltas.shape} != anchors shape {anchors.shape}")
    d = deltas.data
    logwh = d[:, 2:]
    if max_log_scale is not None:
        logwh = np.clip(logwh, -max_log_scale, max_log_scale)
    out = np.empty_like(d)
    out[:, 0] = anchors[:, 0] + d[:, 0] * anchors[:, 2]
    out[:, 1] = anchors[:, 1] + d[:, 1] * anchors[:, 3]
    out[:, 2:] = anchors[:, 2:] * np.exp(logwh)

    def bw(g):
        gd = np.empty_like(d)
        gd[:, 0] = g[:, 0] * anchors[:, 2]
        gd[:, 1] = g[:, 1] * anchors[:, 3]
        gd[:, 2:] = g[:, 2:] * out[:, 2:]
        if max_log_scale is not None:
            inside = np.abs(d[:, 2:]) <= max_log_scale
            gd[:, 2:] *= inside
        return (gd,)

    return ad._apply((deltas,), out, bw)


def smooth_l1(pred: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Smooth L1 in transform space: sum over 4 coords, mean over regions.

    f(d) = 0.5 d^2 for |d| < 1 else |d| - 0.5; f'(+-1) = +-1.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise ContractViolation(f"smooth_l1 expects matching (N,4), got {pred.shape}")
    n = pred.shape[0]
    d = pred.data - target
    absd = np.abs(d)
    quad = absd < 1.0
    vals = np.where(quad, 0.5 * d * d, absd - 0.5)
    loss = vals.sum() / n

    def bw(g):
        gd = np.where(quad, d, np.sign(d)) * (float(g.reshape(())) / n)
        return (gd,)

    return ad._apply((pred,), np.asarray(loss, dtype=pred.dtype), bw)


def smooth_l1_np(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    absd = np.abs(d)
    vals = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    return float(vals.sum() / pred.shape[0]) if pred.shape[0] else 0.0


# ---------------------------------------------------------------------------
# Overlap


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) center-form boxes -> (N,M)."""
    ca, cb = to_corners(np.atleast_2d(a)), to_corners(np.atleast_2d(b))
    x1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    y1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    x2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    y2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou(a: np.ndarray, b: np.ndarray) -> float:
    return float(iou_matrix(np.asarray(a).reshape(1, 4), np.asarray(b).reshape(1, 4))[0, 0])


# ---------------------------------------------------------------------------
# Anchors


@dataclass(frozen=True)
class AnchorGrid:
    """Translation-invariant anchor layout over a W' x H' feature grid.

    Anchor centers are feature-cell centers projected to the image plane:
    ((j + 0.5) * stride, (i + 0.5) * stride).  Total anchors = W' * H' * k,
    ordered row-major over cells, then anchor shape index.
    """

    stride: int
    width: int   # W', feature cells along x
    height: int  # H', feature cells along y
    shapes: Tuple[Tuple[float, float], ...]  # (w, h) per anchor shape

    def __post_init__(self):
        if self.stride < 1 or self.width < 1 or self.height < 1 or not self.shapes:
            raise ContractViolation("AnchorGrid requires positive extents and >=1 shape")

    @property
    def k(self) -> int:
        return len(self.shapes)

    @property
    def count(self) -> int:
        return self.width * self.height * self.k


def anchor_shapes(scales: Sequence[float], ratios: Sequence[float]) -> Tuple[Tuple[float, float], ...]:
    """Anchor (w, h) per scale x ratio, area-preserving: w = s*sqrt(r), h = s/sqrt(r)."""
    out = []
    for s in scales:
        for r in ratios:
            out.append((s * np.sqrt(r), s / np.sqrt(r)))
    return tuple(out)


def generate_anchors(grid: AnchorGrid) -> np.ndarray:
    """All anchor boxes of a grid as an (W'*H'*k, 4) center-form array."""
    shapes = np.asarray(grid.shapes, dtype=np.float64)  # (k, 2)
    jj, ii = np.meshgrid(np.arange(grid.width), np.arange(grid.height), indexing="xy")
    cx = (jj.ravel() + 0.5) * grid.stride  # row-major over (i, j)
    cy = (ii.ravel() + 0.5) * grid.stride
    n_cells = grid.width * grid.height
    out = np.empty((n_cells, grid.k, 4), dtype=np.float64)
    out[:, :, 0] = cx[:, None]
    out[:, :, 1] = cy[:, None]
    out[:, :, 2] = shapes[None, :, 0]
    out[:, :, 3] = shapes[None, :, 1]
    return out.reshape(-1, 4)


# ---------------------------------------------------------------------------
# Greedy NMS


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.7,
        keep: Optional[int] = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, best score first.

    Repeatedly keeps the highest-score box and suppresses boxes overlapping it
    with IoU strictly above the threshold.  Score ties break by lower index.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ContractViolation(f"{len(boxes)} boxes vs {len(scores)} scores")
    if len(boxes) == 0:
        return np.empty(0, dtype=np.intp)
    order = np.lexsort((np.arange(len(scores)), -scores))
    corners = to_corners(boxes)
    areas = boxes[:, 2] * boxes[:, 3]
    kept = []
    limit = len(boxes) if keep is None else keep
    while order.size and len(kept) < limit:
        i = order[0]
        kept.append(i)
        rest = order[1:]
        x1 = np.maximum(corners[i, 0], corners[rest, 0])
        y1 = np.maximum(corners[i, 1], corners[rest, 1])
        x2 = np.minimum(corners[i, 2], corners[rest, 2])
        y2 = np.minimum(corners[i, 3], corners[rest, 3])
        inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
        ious = inter / (areas[i] + areas[rest] - inter)
        order = rest[ious <= iou_threshold]
    return np.asarray(kept, dtype=np.intp)


# ---------------------------------------------------------------------------
# Train-time positive/negative sampling


@dataclass
class SampledMinibatch:
    """Indices of sampled proposals with the ground-truth match per positive."""

    pos_indices: np.ndarray          # ascending proposal indices
    neg_indices: np.ndarray          # ascending proposal indices, disjoint
    matched_gt: np.ndarray           # per positive: best-IoU ground-truth index
    field_order: str = field(default="positives-first", repr=False)

    @property
    def size(self) -> int:
        return len(self.pos_indices) + len(self.neg_indices)

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.pos_indices, self.neg_indices])


def sample_minibatch(proposals: np.ndarray, gts: np.ndarray, b: int,
                     hi: float = 0.7, lo: float = 0.3,
                     rng: Optional[np.random.Generator] = None) -> SampledMinibatch:
    """Sample up to ``b`` proposals: positives are proposals with IoU >= hi
    with some ground truth, plus each ground truth's maximal-IoU proposal;
    negatives have IoU < lo with every ground truth.  Uniform subsample
    without replacement to at most b/2 positives, negatives fill the rest.

    Pools are index-sorted before subsampling so the result is invariant to
    ground-truth ordering (given the same rng state).
    """
    proposals = np.asarray(proposals, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if len(gts) == 0:
        raise ContractViolation("sample_minibatch requires at least one ground-truth box")
    if rng is None:
        rng = np.random.default_rng(0)

    ious = iou_matrix(proposals, gts)        # (N, M)
    best_gt = ious.argmax(axis=1)            # ties -> lower gt index
    best_iou = ious[np.arange(len(proposals)), best_gt]

    pos_mask = best_iou >= hi
    pos_mask[ious.argmax(axis=0)] = True     # per-gt argmax proposal is positive
    neg_mask = (best_iou < lo) & ~pos_mask

    pos_pool = np.flatnonzero(pos_mask)
    neg_pool = np.flatnonzero(neg_mask)

    n_pos = min(len(pos_pool), b // 2)
    if len(pos_pool) > n_pos:
        pos_idx = np.sort(rng.choice(pos_pool, size=n_pos, replace=False))
    else:
        pos_idx = pos_pool
    n_neg = min(len(neg_pool), b - len(pos_idx))
    if len(neg_pool) > n_neg:
        neg_idx = np.sort(rng.choice(neg_pool, size=n_neg, replace=False))
    else:
        neg_idx = neg_pool

    return SampledMinibatch(pos_indices=pos_idx, neg_indices=neg_idx,
                            matched_gt=best_gt[pos_idx])
