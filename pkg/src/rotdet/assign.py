"""Anchor-to-ground-truth assignment and balanced sampling.

Two assigners feed the two proposal heads:

* ``assign_ratio``: center-region rule. An anchor is positive when its center
  falls inside the ground-truth rectangle shrunk about its center by
  ``pos_ratio``; a further ``ignore_margin`` band around that region is
  ignored; everything else is negative. Coverage does not depend on anchor
  shape, so even a single preset anchor yields many positives.
* ``assign_maxiou``: classic IoU thresholding with forced best matches, used
  on the refined candidates of the second head.

Labels are dense arrays: ``IGNORE=-1``, ``NEGATIVE=0``, ``POSITIVE=1``, with a
parallel ``gt_index`` array (-1 unless positive).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import AnchorGrid
from .geometry import HorizontalBox, horizontal_iou_matrix

IGNORE = -1
NEGATIVE = 0
POSITIVE = 1


@dataclass(frozen=True)
class AssignResult:
    """Per-anchor labels and, for positives, the matched ground-truth index."""

    labels: np.ndarray  # (N,) int8 in {IGNORE, NEGATIVE, POSITIVE}
    gt_index: np.ndarray  # (N,) int64, -1 unless positive

    def __post_init__(self) -> None:
        if self.labels.shape != self.gt_index.shape:
            raise ValueError("labels and gt_index must have the same shape")

    @property
    def pos_mask(self) -> np.ndarray:
        return self.labels == POSITIVE

    @property
    def neg_mask(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def num_positives(self) -> int:
        return int(np.count_nonzero(self.pos_mask))


@dataclass(frozen=True)
class SampleResult:
    """Indices drawn for one training step; positives and negatives disjoint."""

    pos_indices: np.ndarray
    neg_indices: np.ndarray


def _as_hbb_array(boxes: Sequence[HorizontalBox] | np.ndarray) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)


def assign_ratio(
    anchors: AnchorGrid | np.ndarray,
    rect_gts: Sequence[HorizontalBox] | np.ndarray,
    pos_ratio: float = 0.3,
    ignore_margin: float = 0.1,
) -> AssignResult:
    """Center-region assignment on rectangular ground truths.

    When an anchor center lies in the positive region of several ground
    truths, the smallest-area one wins so small objects are not starved by
    large neighbours.
    """
    grid = anchors.flat if isinstance(anchors, AnchorGrid) else np.asarray(anchors, dtype=np.float64)
    n = grid.shape[0]
    labels = np.zeros(n, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    gts = _as_hbb_array(rect_gts)
    if gts.shape[0] == 0:
        return AssignResult(labels, gt_index)

    cx, cy = grid[:, 0:1], grid[:, 1:2]
    dx = np.abs(cx - gts[:, 0])  # (N, G)
    dy = np.abs(cy - gts[:, 1])
    half_w, half_h = gts[:, 2] / 2.0, gts[:, 3] / 2.0
    in_pos = (dx <= pos_ratio * half_w) & (dy <= pos_ratio * half_h)
    ig = pos_ratio + ignore_margin
    in_ignore = (dx <= ig * half_w) & (dy <= ig * half_h)

    labels[in_ignore.any(axis=1)] = IGNORE
    pos_any = in_pos.any(axis=1)
    labels[pos_any] = POSITIVE
    areas = gts[:, 2] * gts[:, 3]
    masked = np.where(in_pos, areas[None, :], np.inf)
    gt_index[pos_any] = np.argmin(masked[pos_any], axis=1)
    return AssignResult(labels, gt_index)


def assign_maxiou(
    anchors: Sequence[HorizontalBox] | np.ndarray,
    rect_gts: Sequence[HorizontalBox] | np.ndarray,
    pos_thr: float = 0.7,
    neg_thr: float = 0.3,
) -> AssignResult:
    """IoU-threshold assignment with forced best matches.

    Per anchor: best IoU >= ``pos_thr`` is positive, < ``neg_thr`` negative,
    in between ignored. Then every ground truth claims its single best
    anchor as positive provided that IoU is nonzero (ties resolved to the
    lowest anchor index); this keeps hard ground truths trainable even when
    no anchor clears the threshold.
    """
    if not 0.0 <= neg_thr <= pos_thr <= 1.0:
        raise ValueError(f"need 0 <= neg_thr <= pos_thr <= 1, got {neg_thr}, {pos_thr}")
    arr = _as_hbb_array(anchors)
    n = arr.shape[0]
    labels = np.zeros(n, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    gts = _as_hbb_array(rect_gts)
    if gts.shape[0] == 0 or n == 0:
        return AssignResult(labels, gt_index)

    iou = horizontal_iou_matrix(arr, gts)  # (N, G)
    best = iou.max(axis=1)
    best_gt = iou.argmax(axis=1)
    labels[(best >= neg_thr) & (best < pos_thr)] = IGNORE
    pos = best >= pos_thr
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]

    best_anchor = iou.argmax(axis=0)  # lowest index on ties
    for g in range(gts.shape[0]):
        a = best_anchor[g]
        if iou[a, g] > 0.0:
            labels[a] = POSITIVE
            gt_index[a] = g
    return AssignResult(labels, gt_index)


def sample_balanced(
    assign: AssignResult, num_pos: int = 256, num_neg: int = 256, rng_seed: int = 0
) -> SampleResult:
    """Uniform sampling without replacement from positives and negatives.

    Takes everything when fewer labels are available than requested; the
    result is deterministic for a fixed seed and returned in ascending index
    order.
    """
    rng = np.random.default_rng(rng_seed)
    pos = np.flatnonzero(assign.pos_mask)
    neg = np.flatnonzero(assign.neg_mask)
    if pos.size > num_pos:
        pos = np.sort(rng.choice(pos, size=num_pos, replace=False))
    if neg.size > num_neg:
        neg = np.sort(rng.choice(neg, size=num_neg, replace=False))
    return SampleResult(pos, neg)
