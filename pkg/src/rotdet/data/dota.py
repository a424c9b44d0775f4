"""Text annotation format with 4-corner polygons, plus large-image tiling.

Each annotation line holds eight polygon coordinates, a category token, and
a difficulty flag::

    x1 y1 x2 y2 x3 y3 x4 y4 category difficulty

Files may start with metadata lines such as ``imagesource:GoogleEarth``;
any leading line whose first token contains ``:`` is skipped. After the
first annotation line, metadata is no longer recognized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..geometry import _clip_polygon, shoelace_area


@dataclass(frozen=True)
class AnnotationRecord:
    polygon: np.ndarray  # (4, 2) vertices, counter-clockwise
    category: str
    difficulty: int


def _reorder_ccw(poly: np.ndarray) -> np.ndarray:
    """Sort vertices counter-clockwise around the centroid.

    For convex quads this reproduces hull order starting from the vertex
    with the smallest angle; the starting vertex is then rotated so the
    original first vertex leads, keeping round trips stable.
    """
    center = poly.mean(axis=0)
    angles = np.arctan2(poly[:, 1] - center[1], poly[:, 0] - center[0])
    order = np.argsort(angles, kind="stable")
    start = int(np.nonzero(order == 0)[0][0])
    order = np.roll(order, -start)
    return poly[order]


def parse_dota(lines: Iterable[str]) -> list[AnnotationRecord]:
    """Parse annotation lines.

    Raises:
        ValueError: malformed line; the message names the 1-based line
            number of the offender.
    """
    records: list[AnnotationRecord] = []
    header_done = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if not header_done and ":" in tokens[0]:
            continue
        header_done = True
        if len(tokens) != 10:
            raise ValueError(
                f"line {lineno}: expected 10 tokens (8 coordinates, category, "
                f"difficulty), got {len(tokens)}"
            )
        try:
            coords = [float(t) for t in tokens[:8]]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric coordinate") from None
        try:
            difficulty = int(tokens[9])
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer difficulty") from None
        if difficulty not in (0, 1):
            raise ValueError(f"line {lineno}: difficulty must be 0 or 1, got {difficulty}")
        poly = np.asarray(coords, dtype=np.float64).reshape(4, 2)
        records.append(AnnotationRecord(_reorder_ccw(poly), tokens[8], difficulty))
    return records


def serialize_dota(records: Sequence[AnnotationRecord]) -> list[str]:
    """Inverse of :func:`parse_dota`; coordinates use the shortest digit
    string that parses back to the same float."""
    lines = []
    for r in records:
        coords = " ".join(
            np.format_float_positional(v, trim="-") for v in r.polygon.reshape(-1)
        )
        lines.append(f"{coords} {r.category} {r.difficulty}")
    return lines


def tile_origins(extent: int, tile: int, stride: int) -> list[int]:
    """Window origins covering ``extent`` with the last origin clamped so
    the final window ends exactly at the border."""
    if tile <= 0 or stride <= 0:
        raise ValueError("tile and stride must be positive")
    if extent <= tile:
        return [0]
    xs = list(range(0, extent - tile, stride))
    last = extent - tile
    if xs[-1] != last:
        xs.append(last)
    return xs


def tile_image(
    width: int,
    height: int,
    records: Sequence[AnnotationRecord],
    tile: int = 1024,
    stride: int = 824,
    min_retention: float = 0.6,
):
    """-> list of ((x0, y0, tile, tile), window records).

    A ground truth is kept in a window when at least ``min_retention`` of
    its polygon area survives clipping to the window; kept polygons are
    shifted whole (not clipped) into window coordinates.
    """
    windows = []
    areas = [abs(shoelace_area(r.polygon)) for r in records]
    for y0 in tile_origins(height, tile, stride):
        for x0 in tile_origins(width, tile, stride):
            rect = np.array(
                [[x0, y0], [x0 + tile, y0], [x0 + tile, y0 + tile], [x0, y0 + tile]],
                dtype=np.float64,
            )
            kept = []
            for r, area in zip(records, areas):
                if area <= 0.0:
                    continue
                subject = [(float(x), float(y)) for x, y in r.polygon]
                clipped = _clip_polygon(subject, rect)
                if len(clipped) < 3:
                    continue
                if abs(shoelace_area(np.asarray(clipped))) < min_retention * area:
                    continue
                shifted = r.polygon - np.array([x0, y0])
                kept.append(AnnotationRecord(shifted, r.category, r.difficulty))
            windows.append(((x0, y0, tile, tile), kept))
    return windows
