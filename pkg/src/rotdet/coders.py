"""Box delta coders.

Regression heads never predict box coordinates directly; they predict small
dimensionless deltas relative to an anchor or proposal. Two codings are used:

* 4D horizontal: center shift normalized by anchor size, log size ratios.
* 5D horizontal-to-oriented: the same four components against the reference
  rectangle plus a raw angle in radians (the reference is treated as
  unrotated).

Scalar functions define the semantics on the dataclass types; ``*_array``
variants are the vectorized hot path over ``(N, 4)`` / ``(N, 5)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import HorizontalBox, OrientedBox, canonicalize_array

# Cap on |dw|, |dh| before exponentiation. Untrained heads can emit huge
# logits; without the cap exp() overflows and poisons the loss.
MAX_LOG_RATIO = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Delta4:
    """Horizontal box deltas: center shifts over anchor size, log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        if not all(map(math.isfinite, (self.dx, self.dy, self.dw, self.dh))):
            raise ValueError(f"deltas must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class Delta5:
    """Oriented deltas: Delta4 components plus a raw angle in radians."""

    dx: float
    dy: float
    dw: float
    dh: float
    dtheta: float

    def __post_init__(self) -> None:
        vals = (self.dx, self.dy, self.dw, self.dh, self.dtheta)
        if not all(map(math.isfinite, vals)):
            raise ValueError(f"deltas must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh, self.dtheta], dtype=np.float64)


def encode_h(anchor: HorizontalBox, target: HorizontalBox) -> Delta4:
    """Deltas that move ``anchor`` onto ``target``."""
    return Delta4(
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    )


def decode_h(anchor: HorizontalBox, delta: Delta4) -> HorizontalBox:
    """Apply predicted deltas to ``anchor``; log ratios are clamped first."""
    dw = min(max(delta.dw, -MAX_LOG_RATIO), MAX_LOG_RATIO)
    dh = min(max(delta.dh, -MAX_LOG_RATIO), MAX_LOG_RATIO)
    return HorizontalBox(
        delta.dx * anchor.w + anchor.cx,
        delta.dy * anchor.h + anchor.cy,
        anchor.w * math.exp(dw),
        anchor.h * math.exp(dh),
    )


def encode_o(reference: HorizontalBox, target: OrientedBox) -> Delta5:
    """Deltas from a horizontal reference (treated as angle 0) to an
    oriented target; the first four components follow :func:`encode_h`
    against the target's own rectangle parameters."""
    return Delta5(
        (target.cx - reference.cx) / reference.w,
        (target.cy - reference.cy) / reference.h,
        math.log(target.w / reference.w),
        math.log(target.h / reference.h),
        target.theta,
    )


def decode_o(reference: HorizontalBox, delta: Delta5) -> OrientedBox:
    """Apply 5D deltas to a horizontal reference; result is canonical."""
    out = decode_o_array(reference.as_array()[None], delta.as_array()[None])[0]
    return OrientedBox(*out)


def encode_h_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_h`: ``(N, 4) x (N, 4) -> (N, 4)``."""
    anchors = np.asarray(anchors, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return np.stack(
        [
            (targets[:, 0] - anchors[:, 0]) / anchors[:, 2],
            (targets[:, 1] - anchors[:, 1]) / anchors[:, 3],
            np.log(targets[:, 2] / anchors[:, 2]),
            np.log(targets[:, 3] / anchors[:, 3]),
        ],
        axis=1,
    )


def decode_h_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decode_h`: ``(N, 4) x (N, 4) -> (N, 4)``."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    dw = np.clip(deltas[:, 2], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    dh = np.clip(deltas[:, 3], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    return np.stack(
        [
            deltas[:, 0] * anchors[:, 2] + anchors[:, 0],
            deltas[:, 1] * anchors[:, 3] + anchors[:, 1],
            anchors[:, 2] * np.exp(dw),
            anchors[:, 3] * np.exp(dh),
        ],
        axis=1,
    )


def encode_o_array(references: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_o`: ``(N, 4) x (N, 5) -> (N, 5)``."""
    targets = np.asarray(targets, dtype=np.float64)
    d4 = encode_h_array(references, targets[:, :4])
    return np.concatenate([d4, targets[:, 4:5]], axis=1)


def decode_o_array(references: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized :func:`decode_o`; rows come back canonicalized."""
    deltas = np.asarray(deltas, dtype=np.float64)
    h4 = decode_h_array(references, deltas[:, :4])
    out = np.concatenate([h4, deltas[:, 4:5]], axis=1)
    return canonicalize_array(out)
