"""Second-stage heads: RoI pooling, horizontal-to-oriented regression, and
the final oriented classification/refinement head.

Horizontal proposals are pooled with RoIAlign and passed through a small
fully connected network that regresses five deltas, turning each horizontal
proposal into an oriented one. The oriented proposals are then pooled with
a rotated RoIAlign (sample points generated in the box frame and rotated
into the image) and a second network produces per-class scores plus
per-class five-delta refinements. Both RoI ops use the half-cell aligned
mapping ``feature_coord = pixel / stride - 0.5`` and average 2x2 bilinear
samples per output bin.

Proposal boxes are constants with respect to the loss: gradients flow into
the pooled features and the head weights only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coders import decode_o_array, encode_o_array
from .geometry import OrientedBox, canonicalize_array, rotated_iou_matrix, rotated_nms
from .netcore import (
    Dense,
    ParamStore,
    bilinear_sample_backward,
    bilinear_sample_forward,
    relu_backward,
    relu_forward,
    smooth_l1_backward,
    smooth_l1_forward,
    softmax_ce_backward,
    softmax_ce_forward,
)

SUB = (0.25, 0.75)  # sub-bin sample fractions, 2x2 per bin


@dataclass(frozen=True)
class Detection:
    """One output object: canonical oriented box, score, 0-based class id."""

    box: OrientedBox
    score: float
    class_id: int


def _bin_points_h_many(boxes: np.ndarray, out: int) -> np.ndarray:
    """Sample points (B, out*out*4, 2) in image pixels for horizontal boxes,
    ordered bin-row-major with the 2x2 sub-samples contiguous."""
    cx, cy, w, h = boxes.T
    x1, y1 = cx - w / 2, cy - h / 2
    bw, bh = w / out, h / out
    idx = np.arange(out)
    sub = np.asarray(SUB)
    # gx[b, bx, sj] = x1 + (bx + SUB[sj]) * bin_width; gy likewise per row.
    gx = x1[:, None, None] + (idx[None, :, None] + sub[None, None, :]) * bw[:, None, None]
    gy = y1[:, None, None] + (idx[None, :, None] + sub[None, None, :]) * bh[:, None, None]
    pts = np.empty((boxes.shape[0], out, out, 2, 2, 2))
    pts[..., 0] = gx[:, None, :, None, :]
    pts[..., 1] = gy[:, :, None, :, None]
    return pts.reshape(boxes.shape[0], -1, 2)


def _bin_points_o_many(boxes: np.ndarray, out: int) -> np.ndarray:
    """Sample points for oriented boxes: the horizontal grid built in each
    box frame, rotated by theta and shifted to the center."""
    zeros = np.zeros(boxes.shape[0])
    frame = _bin_points_h_many(np.column_stack([zeros, zeros, boxes[:, 2], boxes[:, 3]]), out)
    c = np.cos(boxes[:, 4])[:, None]
    s = np.sin(boxes[:, 4])[:, None]
    x = frame[..., 0] * c - frame[..., 1] * s + boxes[:, 0][:, None]
    y = frame[..., 0] * s + frame[..., 1] * c + boxes[:, 1][:, None]
    return np.stack([x, y], axis=2)


def _bin_points_h(box: np.ndarray, out: int) -> np.ndarray:
    return _bin_points_h_many(np.asarray(box, dtype=np.float64)[None], out)[0]


def _bin_points_o(box: np.ndarray, out: int) -> np.ndarray:
    return _bin_points_o_many(np.asarray(box, dtype=np.float64)[None], out)[0]


def _clip_check(box: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    bw, bh = bounds
    x1 = max(box[0] - box[2] / 2, 0.0)
    y1 = max(box[1] - box[3] / 2, 0.0)
    x2 = min(box[0] + box[2] / 2, bw)
    y2 = min(box[1] + box[3] / 2, bh)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise ValueError(f"box {box[:4]} has zero area after clipping to {bounds}")
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])


def _overlaps_bounds(boxes: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    """Mask of (N, 5) oriented boxes whose axis-aligned extent would survive
    the same clip that _clip_check applies."""
    bw, bh = bounds
    ew = np.abs(boxes[:, 2] * np.cos(boxes[:, 4])) + np.abs(boxes[:, 3] * np.sin(boxes[:, 4]))
    eh = np.abs(boxes[:, 2] * np.sin(boxes[:, 4])) + np.abs(boxes[:, 3] * np.cos(boxes[:, 4]))
    x1 = np.maximum(boxes[:, 0] - ew / 2, 0.0)
    y1 = np.maximum(boxes[:, 1] - eh / 2, 0.0)
    x2 = np.minimum(boxes[:, 0] + ew / 2, bw)
    y2 = np.minimum(boxes[:, 1] + eh / 2, bh)
    return (x2 - x1 > 0) & (y2 - y1 > 0)


def roi_align(feature: np.ndarray, box, out: int = 7, stride: float = 8.0):
    """Pool a horizontal box (image pixels) from (C, H, W) features.

    Returns ((C, out, out), cache). The box is clipped to the feature
    extent first; a box entirely outside raises ValueError.
    """
    arr = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=np.float64)
    c, fh, fw = feature.shape
    clipped = _clip_check(arr, (fw * stride, fh * stride))
    pts = _bin_points_h(clipped, out) / stride - 0.5
    vals, s_cache = bilinear_sample_forward(feature, pts)
    pooled = vals.reshape(out * out, 4, c).mean(axis=1).T.reshape(c, out, out)
    return pooled, (s_cache, out, c)


def rotated_roi_align(feature: np.ndarray, box, out: int = 7, stride: float = 8.0):
    """Pool an oriented box; sub-bin points live in the box frame and are
    rotated into the image before sampling."""
    arr = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=np.float64)
    c, fh, fw = feature.shape
    # Entirely-outside boxes would pool pure padding; reject them the same
    # way a zero-area clip is rejected for horizontal boxes.
    ew = abs(arr[2] * np.cos(arr[4])) + abs(arr[3] * np.sin(arr[4]))
    eh = abs(arr[2] * np.sin(arr[4])) + abs(arr[3] * np.cos(arr[4]))
    _clip_check(np.array([arr[0], arr[1], ew, eh]), (fw * stride, fh * stride))
    pts = _bin_points_o(arr, out) / stride - 0.5
    vals, s_cache = bilinear_sample_forward(feature, pts)
    pooled = vals.reshape(out * out, 4, c).mean(axis=1).T.reshape(c, out, out)
    return pooled, (s_cache, out, c)


def roi_align_backward(dpooled: np.ndarray, cache) -> np.ndarray:
    """Gradient to the feature map for either RoI op (same sampling cache)."""
    s_cache, out, c = cache
    dvals = np.repeat(dpooled.reshape(c, out * out).T[:, None, :] / 4.0, 4, axis=1)
    dfeat, _ = bilinear_sample_backward(dvals.reshape(out * out * 4, c), s_cache)
    return dfeat


class RcnnHeads:
    """The two RoI networks and their training losses."""

    def __init__(
        self,
        store: ParamStore,
        rng: np.random.Generator,
        channels: int,
        num_classes: int,
        roi_size: int = 7,
        hidden: int = 256,
    ) -> None:
        self.num_classes = num_classes
        self.roi_size = roi_size
        self.channels = channels
        din = channels * roi_size * roi_size
        self.h2o_fc1 = Dense(store, "rcnn.h2o_fc1", din, hidden, rng)
        self.h2o_fc2 = Dense(store, "rcnn.h2o_fc2", hidden, 5, rng, weight_std=0.001)
        self.obb_fc1 = Dense(store, "rcnn.obb_fc1", din, hidden, rng)
        self.obb_cls = Dense(store, "rcnn.obb_cls", hidden, num_classes + 1, rng, weight_std=0.01)
        self.obb_reg = Dense(store, "rcnn.obb_reg", hidden, 5 * num_classes, rng, weight_std=0.001)

    # -- pooled-feature chains --------------------------------------------

    def _pool_many(self, feature, boxes, rotated: bool, stride: float):
        """All boxes pooled through one bilinear gather; per box the result
        matches roi_align / rotated_roi_align bit for bit."""
        out = self.roi_size
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5 if rotated else 4)
        n = boxes.shape[0]
        if n == 0:
            return np.zeros((0, self.channels * out * out), dtype=feature.dtype), None
        c, fh, fw = feature.shape
        bounds = (fw * stride, fh * stride)
        if rotated:
            for b in boxes:
                ew = abs(b[2] * np.cos(b[4])) + abs(b[3] * np.sin(b[4]))
                eh = abs(b[2] * np.sin(b[4])) + abs(b[3] * np.cos(b[4]))
                _clip_check(np.array([b[0], b[1], ew, eh]), bounds)
            pts = _bin_points_o_many(boxes, out)
        else:
            clipped = np.stack([_clip_check(b, bounds) for b in boxes])
            pts = _bin_points_h_many(clipped, out)
        vals, s_cache = bilinear_sample_forward(feature, pts.reshape(-1, 2) / stride - 0.5)
        pooled = vals.reshape(n, out * out, 4, c).mean(axis=2)
        feats = pooled.transpose(0, 2, 1).reshape(n, c * out * out)
        return feats.astype(feature.dtype), (s_cache, out, c, n)

    def _pool_many_backward(self, dfeats: np.ndarray, cache) -> np.ndarray:
        s_cache, out, c, n = cache
        dpooled = dfeats.reshape(n, c, out * out).transpose(0, 2, 1)
        dvals = np.repeat(dpooled[:, :, None, :] / 4.0, 4, axis=2)
        dfeat, _ = bilinear_sample_backward(
            dvals.reshape(n * out * out * 4, c), s_cache, need_dpoints=False
        )
        return dfeat

    def h2o_forward(self, roi_feats: np.ndarray):
        """Flattened RoI features (R, D) -> five deltas per proposal."""
        h, c1 = self.h2o_fc1.forward(roi_feats)
        a, c2 = relu_forward(h)
        d, c3 = self.h2o_fc2.forward(a)
        return d, (c1, c2, c3)

    def h2o_backward(self, ddeltas: np.ndarray, cache) -> np.ndarray:
        c1, c2, c3 = cache
        da = self.h2o_fc2.backward(ddeltas, c3)
        dh = relu_backward(da, c2)
        return self.h2o_fc1.backward(dh, c1)

    def obb_forward(self, roi_feats: np.ndarray):
        """-> ((R, C+1) class logits, (R, 5C) per-class deltas)."""
        h, c1 = self.obb_fc1.forward(roi_feats)
        a, c2 = relu_forward(h)
        logits, c3 = self.obb_cls.forward(a)
        deltas, c4 = self.obb_reg.forward(a)
        return logits, deltas, (c1, c2, c3, c4)

    def obb_backward(self, dlogits: np.ndarray, ddeltas: np.ndarray, cache) -> np.ndarray:
        c1, c2, c3, c4 = cache
        da = self.obb_cls.backward(dlogits, c3)
        da = da + self.obb_reg.backward(ddeltas, c4)
        dh = relu_backward(da, c2)
        return self.obb_fc1.backward(dh, c1)

    # -- training ----------------------------------------------------------

    def forward_train(
        self,
        feature: np.ndarray,
        proposals: np.ndarray,
        gt_obbs: np.ndarray,
        gt_labels: np.ndarray,
        stride: float,
        rng_seed: int,
        num_pos: int = 24,
        num_neg: int = 72,
        beta: float = 1.0 / 9.0,
    ):
        """Both RoI stages with losses.

        Proposals (P, 4) should already include appended ground-truth rects.
        Returns ((loss_cls, loss_reg), backward_closure); the closure yields
        d(loss)/d(feature).
        """
        from .assign import assign_maxiou, sample_balanced
        from .geometry import rectangularize_array

        gt_rects = rectangularize_array(gt_obbs) if gt_obbs.shape[0] else np.zeros((0, 4))
        h2o_assign = assign_maxiou(proposals, gt_rects, 0.5, 0.5)
        sample = sample_balanced(h2o_assign, num_pos, num_neg, rng_seed)
        rois = np.concatenate([sample.pos_indices, sample.neg_indices])
        if rois.size == 0:
            return (0.0, 0.0), lambda: np.zeros_like(feature)
        boxes = proposals[rois]
        n_pos = sample.pos_indices.size

        h2o_feats, h2o_pool_caches = self._pool_many(feature, boxes, rotated=False, stride=stride)
        h2o_deltas, h2o_cache = self.h2o_forward(h2o_feats)

        loss_h2o = 0.0
        dh2o = np.zeros_like(h2o_deltas)
        if n_pos and gt_obbs.shape[0]:
            gt_of = h2o_assign.gt_index[sample.pos_indices]
            targets = encode_o_array(boxes[:n_pos], gt_obbs[gt_of])
            l, sl_cache = smooth_l1_forward(h2o_deltas[:n_pos].astype(np.float64), targets, beta)
            loss_h2o = float(l.mean())
            dh2o[:n_pos] = smooth_l1_backward(np.full(l.shape, 1.0 / l.size), sl_cache)

        oriented = decode_o_array(boxes, h2o_deltas.astype(np.float64))

        # Second stage trains on the oriented proposals plus the true GT
        # boxes so rotated positives exist before the first stage has
        # learned angles.
        if gt_obbs.shape[0]:
            obb_rois = np.concatenate([oriented, gt_obbs])
        else:
            obb_rois = oriented
        # Early h2o deltas can throw a decoded box entirely off the image;
        # pooling one would read pure padding. Cut those rows before labels
        # are derived so every later index stays aligned.
        _, fh, fw = feature.shape
        obb_rois = obb_rois[_overlaps_bounds(obb_rois, (fw * stride, fh * stride))]
        if obb_rois.shape[0] == 0:

            def backward_h2o() -> np.ndarray:
                dfeats_h2o = self.h2o_backward(dh2o.astype(feature.dtype), h2o_cache)
                return self._pool_many_backward(dfeats_h2o, h2o_pool_caches)

            return (0.0, loss_h2o), backward_h2o
        labels = np.zeros(obb_rois.shape[0], dtype=np.int64)
        if gt_obbs.shape[0]:
            iou = rotated_iou_matrix(obb_rois, gt_obbs)
            best = iou.max(axis=1)
            best_gt = iou.argmax(axis=1)
            pos_mask = best >= 0.5
            labels[pos_mask] = gt_labels[best_gt[pos_mask]] + 1
        pos_idx = np.flatnonzero(labels > 0)
        neg_idx = np.flatnonzero(labels == 0)
        rng = np.random.default_rng(rng_seed + 1)
        if pos_idx.size > num_pos:
            pos_idx = np.sort(rng.choice(pos_idx, num_pos, replace=False))
        if neg_idx.size > num_neg:
            neg_idx = np.sort(rng.choice(neg_idx, num_neg, replace=False))
        sel = np.concatenate([pos_idx, neg_idx])
        sel_boxes = obb_rois[sel]
        sel_labels = labels[sel]

        obb_feats, obb_pool_caches = self._pool_many(feature, sel_boxes, rotated=True, stride=stride)
        logits, reg, obb_cache = self.obb_forward(obb_feats)
        loss_cls, ce_cache = softmax_ce_forward(logits.astype(np.float64), sel_labels)

        loss_obb_reg = 0.0
        dreg = np.zeros_like(reg)
        sel_pos = np.flatnonzero(sel_labels > 0)
        if sel_pos.size and gt_obbs.shape[0]:
            cls0 = sel_labels[sel_pos] - 1
            cols = (cls0[:, None] * 5 + np.arange(5)).astype(np.int64)
            picked = np.take_along_axis(reg[sel_pos].astype(np.float64), cols, axis=1)
            gt_of = iou.argmax(axis=1)[sel[sel_pos]]
            targets = encode_o_array(sel_boxes[sel_pos, :4], gt_obbs[gt_of])
            l, sl_cache2 = smooth_l1_forward(picked, targets, beta)
            loss_obb_reg = float(l.mean())
            dpicked = smooth_l1_backward(np.full(l.shape, 1.0 / l.size), sl_cache2)
            for row, r_idx in enumerate(sel_pos):
                dreg[r_idx, cols[row]] = dpicked[row]

        losses = (float(loss_cls), loss_h2o + loss_obb_reg)

        def backward() -> np.ndarray:
            dlogits = softmax_ce_backward(1.0, ce_cache).astype(feature.dtype)
            dfeats_obb = self.obb_backward(dlogits, dreg.astype(feature.dtype), obb_cache)
            dfeature = self._pool_many_backward(dfeats_obb, obb_pool_caches)
            dfeats_h2o = self.h2o_backward(dh2o.astype(feature.dtype), h2o_cache)
            dfeature += self._pool_many_backward(dfeats_h2o, h2o_pool_caches)
            return dfeature

        return losses, backward

    # -- inference ---------------------------------------------------------

    def detect(
        self,
        feature: np.ndarray,
        proposals: np.ndarray,
        stride: float,
        score_thr: float = 0.05,
        nms_thr: float = 0.1,
        max_det: int = 100,
    ) -> list[Detection]:
        """Full second stage on final proposals -> per-class NMS'd detections."""
        if proposals.shape[0] == 0:
            return []
        h2o_feats, _ = self._pool_many(feature, proposals, rotated=False, stride=stride)
        h2o_deltas, _ = self.h2o_forward(h2o_feats)
        oriented = decode_o_array(proposals, h2o_deltas.astype(np.float64))
        _, fh, fw = feature.shape
        oriented = oriented[_overlaps_bounds(oriented, (fw * stride, fh * stride))]
        if oriented.shape[0] == 0:
            return []
        obb_feats, _ = self._pool_many(feature, oriented, rotated=True, stride=stride)
        logits, reg, _ = self.obb_forward(obb_feats)
        shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
        ex = np.exp(shifted)
        probs = ex / ex.sum(axis=1, keepdims=True)

        out: list[Detection] = []
        for cls in range(self.num_classes):
            scores = probs[:, cls + 1]
            keep = scores >= score_thr
            if not np.any(keep):
                continue
            deltas = reg[keep][:, cls * 5 : cls * 5 + 5].astype(np.float64)
            boxes = decode_o_array(oriented[keep, :4], deltas)
            boxes = canonicalize_array(boxes)
            kept = rotated_nms(boxes, scores[keep], nms_thr)
            for i in kept:
                out.append(Detection(OrientedBox(*boxes[i]), float(scores[keep][i]), cls))
        out.sort(key=lambda d: -d.score)
        return out[:max_det]
