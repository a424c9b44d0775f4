"""Mean average precision for oriented detections.

Matching is greedy per class: detections sorted by descending score claim
the highest-overlap unclaimed ground truth in their image when the rotated
IoU clears the threshold. Ground truths flagged difficulty 1 never count
toward recall; detections matching them are dropped from the ranking
instead of becoming false positives.

Two interpolation modes are supported: ``voc07`` (11-point) and ``voc12``
(area under the monotonized precision-recall curve).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..geometry import rotated_iou_one_many


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    box: np.ndarray  # (5,)
    difficulty: int = 0


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    box: np.ndarray  # (5,)


def _ap_voc07(recall: np.ndarray, precision: np.ndarray) -> float:
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 11.0


def _ap_voc12(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def _class_ap(
    dets: list[DetectionRecord],
    gts_by_image: dict[str, list[GroundTruth]],
    iou_thr: float,
    metric: str,
) -> float:
    npos = sum(g.difficulty == 0 for gs in gts_by_image.values() for g in gs)
    # Stable sort on negated score keeps insertion order among ties.
    order = np.argsort([-d.score for d in dets], kind="stable")
    claimed: dict[str, np.ndarray] = {
        img: np.zeros(len(gs), dtype=bool) for img, gs in gts_by_image.items()
    }
    tp, fp = [], []
    for idx in order:
        d = dets[idx]
        gs = gts_by_image.get(d.image_id, [])
        best_iou, best_j = 0.0, -1
        if gs:
            ious = rotated_iou_one_many(d.box, np.stack([g.box for g in gs]))
            best_j = int(np.argmax(ious))
            best_iou = float(ious[best_j])
        if best_j >= 0 and best_iou >= iou_thr:
            if gs[best_j].difficulty == 1:
                continue  # neither TP nor FP
            if claimed[d.image_id][best_j]:
                tp.append(0.0)
                fp.append(1.0)
            else:
                claimed[d.image_id][best_j] = True
                tp.append(1.0)
                fp.append(0.0)
        else:
            tp.append(0.0)
            fp.append(1.0)
    if npos == 0:
        return 0.0 if dets else float("nan")
    if not tp:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    return _ap_voc07(recall, precision) if metric == "voc07" else _ap_voc12(recall, precision)


def evaluate_map(
    detections: Iterable[DetectionRecord],
    ground_truths: Iterable[GroundTruth],
    class_names: Sequence[str],
    iou_thr: float = 0.5,
    metric: str = "voc07",
) -> dict:
    """-> {"per_class": {name: AP or None}, "map": float, ...}.

    Classes with no ground truth and no detections get AP ``None`` and are
    excluded from the mean; with detections but no ground truth the AP is
    0. Detections with a class id outside the label map raise.
    """
    if metric not in ("voc07", "voc12"):
        raise ValueError(f"unknown metric {metric!r}")
    dets_by_class: dict[int, list[DetectionRecord]] = {}
    for d in detections:
        if not 0 <= d.class_id < len(class_names):
            raise ValueError(
                f"detection class id {d.class_id} not in label map of size {len(class_names)}"
            )
        dets_by_class.setdefault(d.class_id, []).append(d)
    gts_by_class: dict[int, dict[str, list[GroundTruth]]] = {}
    for g in ground_truths:
        if not 0 <= g.class_id < len(class_names):
            raise ValueError(
                f"ground truth class id {g.class_id} not in label map of size {len(class_names)}"
            )
        gts_by_class.setdefault(g.class_id, {}).setdefault(g.image_id, []).append(g)

    per_class: dict[str, float | None] = {}
    aps = []
    for c, name in enumerate(class_names):
        ap = _class_ap(dets_by_class.get(c, []), gts_by_class.get(c, {}), iou_thr, metric)
        if np.isnan(ap):
            per_class[name] = None
        else:
            per_class[name] = float(ap)
            aps.append(ap)
    return {
        "per_class": per_class,
        "map": float(np.mean(aps)) if aps else 0.0,
        "iou_thr": iou_thr,
        "metric": metric,
    }


def dump_detections(path: str, detections: Sequence[DetectionRecord]) -> None:
    """One JSON object per line with a fixed key order."""
    with open(path, "w", encoding="utf-8") as f:
        for d in detections:
            row = {
                "image_id": d.image_id,
                "class": int(d.class_id),
                "score": float(d.score),
                "cx": float(d.box[0]),
                "cy": float(d.box[1]),
                "w": float(d.box[2]),
                "h": float(d.box[3]),
                "theta": float(d.box[4]),
            }
            f.write(json.dumps(row) + "\n")


def load_detections(path: str) -> list[DetectionRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            box = np.array([row["cx"], row["cy"], row["w"], row["h"], row["theta"]])
            out.append(DetectionRecord(row["image_id"], row["class"], row["score"], box))
    return out


def format_ap_table(result: dict, class_names: Sequence[str]) -> str:
    """Aligned text table; one row per class plus the mean."""
    width = max(len("class"), *(len(n) for n in class_names))
    lines = [f"{'class':<{width}}  {'AP':>7}"]
    for name in class_names:
        ap = result["per_class"][name]
        lines.append(f"{name:<{width}}  {'-':>7}" if ap is None else f"{name:<{width}}  {ap:>7.4f}")
    lines.append(f"{'mAP':<{width}}  {result['map']:>7.4f}")
    return "\n".join(lines)
