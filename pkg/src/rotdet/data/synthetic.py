"""Synthetic oriented-object scenes.

Renders filled rotated rectangles on a dark background with additive
Gaussian noise, and returns the exact oriented boxes as ground truth. Three
classes differ by aspect-ratio band (roughly square, elongated, thin) and
fill intensity, which exercises large-aspect-ratio regression without any
real data. Rendering is deterministic per seed.

A dataset on disk is a directory with ``manifest.json`` (image index, ground
truth, class names) plus one raw 8-bit row-major grayscale file per image.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..geometry import (
    OrientedBox,
    canonicalize,
    obb_corners,
    rectangularize_array,
    rotated_iou_one_many,
)

CLASS_NAMES = ("compact", "elongated", "thin")
ASPECT_BANDS = ((1.0, 1.5), (2.0, 4.0), (5.0, 9.0))
FILL_LEVELS = (0.45, 0.65, 0.85)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one random scene."""

    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 6
    long_edge: tuple[float, float] = (28.0, 72.0)
    min_short_edge: float = 7.0
    margin: float = 4.0
    noise_sigma: float = 0.03
    background: float = 0.12
    max_overlap: float = 0.05
    classes: tuple[int, ...] = (0, 1, 2)
    seed: int = 0
    angle_range: tuple[float, float] = (-np.pi / 2, np.pi / 2)

    def __post_init__(self) -> None:
        if self.min_instances < 0 or self.max_instances < self.min_instances:
            raise ValueError("bad instance count range")
        if not all(0 <= c < len(CLASS_NAMES) for c in self.classes):
            raise ValueError(f"classes must be in 0..{len(CLASS_NAMES) - 1}")


def _coverage(box: np.ndarray, size: int, sub: int = 4) -> np.ndarray:
    """Anti-aliased fill mask via sub-pixel point-in-box tests."""
    corners = obb_corners(box[None])[0]
    x1 = max(int(np.floor(corners[:, 0].min())) - 1, 0)
    x2 = min(int(np.ceil(corners[:, 0].max())) + 1, size)
    y1 = max(int(np.floor(corners[:, 1].min())) - 1, 0)
    y2 = min(int(np.ceil(corners[:, 1].max())) + 1, size)
    mask = np.zeros((size, size))
    if x2 <= x1 or y2 <= y1:
        return mask
    fr = (np.arange(sub) + 0.5) / sub
    gy, gx = np.mgrid[y1:y2, x1:x2]
    cov = np.zeros((y2 - y1, x2 - x1))
    c, s = np.cos(box[4]), np.sin(box[4])
    for fy in fr:
        for fx in fr:
            px = gx + fx - box[0]
            py = gy + fy - box[1]
            u = px * c + py * s
            v = -px * s + py * c
            cov += (np.abs(u) <= box[2] / 2) & (np.abs(v) <= box[3] / 2)
    mask[y1:y2, x1:x2] = cov / (sub * sub)
    return mask


def generate_scene(spec: SceneSpec):
    """-> (image (1, S, S) float32 in [0, 1], gts (G, 5), labels (G,)).

    Raises:
        RuntimeError: when rejection sampling cannot place an instance
            after 1000 attempts.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    boxes: list[np.ndarray] = []
    labels: list[int] = []
    for _ in range(n):
        placed = False
        for _ in range(1000):
            cls = int(rng.choice(spec.classes))
            lo, hi = ASPECT_BANDS[cls]
            aspect = rng.uniform(lo, hi)
            long_edge = rng.uniform(*spec.long_edge)
            short_edge = long_edge / aspect
            if short_edge < spec.min_short_edge:
                # Keep the aspect band; grow the box instead of fattening it.
                short_edge = spec.min_short_edge
                long_edge = short_edge * aspect
            theta = rng.uniform(*spec.angle_range)
            b = canonicalize(OrientedBox(0.0, 0.0, long_edge, short_edge, theta))
            ext = rectangularize_array(b.as_array()[None])[0]
            half_w, half_h = ext[2] / 2, ext[3] / 2
            if 2 * half_w > size - 2 * spec.margin or 2 * half_h > size - 2 * spec.margin:
                continue
            cx = rng.uniform(spec.margin + half_w, size - spec.margin - half_w)
            cy = rng.uniform(spec.margin + half_h, size - spec.margin - half_h)
            cand = np.array([cx, cy, b.w, b.h, b.theta])
            if boxes:
                ious = rotated_iou_one_many(cand, np.stack(boxes))
                if ious.max() > spec.max_overlap:
                    continue
            boxes.append(cand)
            labels.append(cls)
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"could not place instance {len(boxes) + 1}/{n} after 1000 attempts"
            )

    image = np.full((size, size), spec.background)
    for b, cls in zip(boxes, labels):
        fill = FILL_LEVELS[cls] + rng.uniform(-0.05, 0.05)
        mask = _coverage(b, size)
        image = image * (1 - mask) + fill * mask
    image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    gts = np.stack(boxes) if boxes else np.zeros((0, 5))
    return image, gts, np.asarray(labels, dtype=np.int64)


def flip_scene(image: np.ndarray, gts: np.ndarray):
    """Horizontal flip; angles negate and boxes stay canonical."""
    flipped = image[..., ::-1].copy()
    size = image.shape[-1]
    out = gts.copy()
    if out.shape[0]:
        out[:, 0] = size - out[:, 0]
        out[:, 4] = -out[:, 4]
        # -(-pi/2) wraps back to the canonical open interval.
        out[out[:, 4] == np.pi / 2, 4] = -np.pi / 2
    return flipped, out


@dataclass
class DatasetRecord:
    image_id: str
    image: np.ndarray  # (1, S, S) float32
    gts: np.ndarray  # (G, 5)
    labels: np.ndarray  # (G,)
    difficulties: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.difficulties is None:
            self.difficulties = np.zeros(self.gts.shape[0], dtype=np.int64)


def write_dataset(directory: str, specs: list[SceneSpec]) -> None:
    """Render scenes to raw files plus a manifest."""
    os.makedirs(directory, exist_ok=True)
    images = []
    for i, spec in enumerate(specs):
        image, gts, labels = generate_scene(spec)
        image_id = f"img_{i:05d}"
        fname = image_id + ".raw"
        raw = (image[0] * 255.0).round().astype(np.uint8)
        raw.tofile(os.path.join(directory, fname))
        images.append(
            {
                "id": image_id,
                "file": fname,
                "width": spec.image_size,
                "height": spec.image_size,
                "objects": [
                    {
                        "cx": float(b[0]),
                        "cy": float(b[1]),
                        "w": float(b[2]),
                        "h": float(b[3]),
                        "theta": float(b[4]),
                        "class_id": int(c),
                        "difficulty": 0,
                    }
                    for b, c in zip(gts, labels)
                ],
            }
        )
    manifest = {"classes": list(CLASS_NAMES), "images": images}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(directory: str) -> list[DatasetRecord]:
    """Read a manifest directory back into memory."""
    path = os.path.join(directory, "manifest.json")
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    records = []
    for entry in manifest["images"]:
        raw = np.fromfile(os.path.join(directory, entry["file"]), dtype=np.uint8)
        img = raw.reshape(entry["height"], entry["width"]).astype(np.float32) / 255.0
        objs = entry["objects"]
        gts = np.array([[o["cx"], o["cy"], o["w"], o["h"], o["theta"]] for o in objs]).reshape(-1, 5)
        labels = np.array([o["class_id"] for o in objs], dtype=np.int64)
        diffs = np.array([o.get("difficulty", 0) for o in objs], dtype=np.int64)
        records.append(DatasetRecord(entry["id"], img[None], gts, labels, diffs))
    return records


def standard_specs(n_images: int, base_seed: int, rotation_heavy: bool = False, **overrides) -> list[SceneSpec]:
    """Per-image specs with distinct seeds; ``rotation_heavy`` restricts
    angles away from near-axis-aligned poses."""
    angle = (np.pi / 12, np.pi * 5 / 12) if rotation_heavy else (-np.pi / 2, np.pi / 2)
    out = []
    for i in range(n_images):
        spec = SceneSpec(seed=base_seed + i, angle_range=angle, **overrides)
        out.append(spec)
    return out
