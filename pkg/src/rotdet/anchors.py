"""Single-anchor generation: one preset horizontal box per feature-map cell.

Unlike classic multi-anchor schemes (3 scales x 3 ratios per location), each
pyramid level carries exactly one anchor per cell: a box of size
``stride * scale * sqrt(ratio)`` by ``stride * scale / sqrt(ratio)`` centered
on the cell. The later refinement stage compensates for the lost shape
diversity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FeatureLevelSpec:
    """Shape of one pyramid level: ``stride`` pixels per cell, grid size in cells."""

    stride: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.stride < 1 or self.height < 1 or self.width < 1:
            raise ValueError(f"invalid level spec {self}")


@dataclass(frozen=True)
class AnchorGrid:
    """Anchors for a whole pyramid.

    ``per_level[k]`` is an ``(H_k * W_k, 4)`` center-form array, row-major
    over cells (y outer, x inner). ``flat`` concatenates the levels.
    """

    levels: tuple[FeatureLevelSpec, ...]
    per_level: tuple[np.ndarray, ...]

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.per_level, axis=0)

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.per_level)

    def __len__(self) -> int:
        return sum(self.level_sizes)


def generate_anchors(
    levels: Sequence[FeatureLevelSpec], scale: float, ratio: float
) -> AnchorGrid:
    """One anchor per cell on every level.

    Args:
        levels: pyramid level shapes.
        scale: anchor side length in units of the stride.
        ratio: aspect ratio w/h; 1.0 gives squares.
    """
    if scale <= 0 or ratio <= 0:
        raise ValueError(f"scale and ratio must be positive, got {scale}, {ratio}")
    root = math.sqrt(ratio)
    out = []
    for lvl in levels:
        w = lvl.stride * scale * root
        h = lvl.stride * scale / root
        xs = (np.arange(lvl.width, dtype=np.float64) + 0.5) * lvl.stride
        ys = (np.arange(lvl.height, dtype=np.float64) + 0.5) * lvl.stride
        gx, gy = np.meshgrid(xs, ys)
        boxes = np.stack(
            [gx.ravel(), gy.ravel(), np.full(gx.size, w), np.full(gx.size, h)], axis=1
        )
        out.append(boxes)
    return AnchorGrid(tuple(levels), tuple(out))
