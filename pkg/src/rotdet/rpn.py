"""Two-headed region proposal network over a shared feature pyramid.

Stage one (anchor-free flavour): a single preset anchor per location is
assigned by the center-region rule against rectangularized ground truths, a
small conv head regresses box deltas, and the decoded candidates are trained
with an IoU log-loss. No objectness is produced here.

Stage two (anchor-based): the decoded candidates act as anchors. They are
re-assigned by Max-IoU; each location's candidate box plus the matched
ground-truth angle define the orientation-aware convolution offsets; a
second regression plus an objectness head refine and score the candidates.

The stage-two losses are an IoU log-loss over sampled positives and binary
cross-entropy over the sampled positives and negatives. Total proposal loss
is the plain sum of the two stage losses. Proposals are the refined boxes,
score-sorted, clipped, and pruned by horizontal NMS.

Candidates cross the stage boundary as constants: stage two's gradients do
not flow back into stage one's regression (each stage trains its own head
against its own assignment, both into the shared features).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorGrid, FeatureLevelSpec, generate_anchors
from .assign import AssignResult, assign_maxiou, assign_ratio, sample_balanced
from .coders import MAX_LOG_RATIO, decode_h_array
from .geometry import clip_hbb_array, horizontal_iou_matrix, rectangularize_array
from .netcore import (
    Conv,
    ParamStore,
    bce_backward,
    bce_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    smooth_l1_backward,
    smooth_l1_forward,
)
from .oaware import oaconv_backward, oaconv_forward, offset_field

IOU_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Weights of the two stage regression losses and the IoU clamp."""

    w_af: float = 7.0
    w_ab: float = 7.0
    iou_eps: float = IOU_EPS


@dataclass(frozen=True)
class Proposal:
    """A scored horizontal region, clipped to image bounds."""

    box: np.ndarray  # (4,) center form
    objectness: float


@dataclass
class RpnTrainOutput:
    loss_af: float
    loss_ab: float
    proposals: list[Proposal]
    num_pos_af: int
    num_pos_ab: int

    @property
    def loss_rpn(self) -> float:
        return self.loss_af + self.loss_ab


@dataclass(frozen=True)
class RpnSettings:
    """Proposal-stage knobs; defaults follow the reference recipe at desk scale."""

    anchor_scale: float = 4.0
    anchor_ratio: float = 1.0
    af_pos_ratio: float = 0.3
    af_ignore_margin: float = 0.1
    ab_pos_thr: float = 0.7
    ab_neg_thr: float = 0.3
    sample_pos: int = 256
    sample_neg: int = 256
    pre_nms_topk: int = 1000
    post_nms_topk: int = 500
    nms_thr: float = 0.7
    loss: LossConfig = field(default_factory=LossConfig)
    conv_mode: str = "oaware"  # or "standard"
    disable_af_head: bool = False
    disable_ab_head: bool = False
    af_predict_angle: bool = False  # 5-channel stage-one ablation, unsupported path


# ---------------------------------------------------------------------------
# IoU log-loss with analytic gradient


def iou_loss_array(pred: np.ndarray, target: np.ndarray, weight: float, eps: float = IOU_EPS):
    """``weight * (-ln(max(IoU, eps)))`` per row with d(loss)/d(pred).

    Boxes are (N, 4) center-form axis-aligned. Disjoint pairs sit on the
    clamp plateau and get zero gradient. Gradient at coordinate ties uses
    the open-side subgradient (ties have measure zero under training noise).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    px1, px2 = pred[:, 0] - pred[:, 2] / 2, pred[:, 0] + pred[:, 2] / 2
    py1, py2 = pred[:, 1] - pred[:, 3] / 2, pred[:, 1] + pred[:, 3] / 2
    tx1, tx2 = target[:, 0] - target[:, 2] / 2, target[:, 0] + target[:, 2] / 2
    ty1, ty2 = target[:, 1] - target[:, 3] / 2, target[:, 1] + target[:, 3] / 2
    iw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    overlap = (iw > 0) & (ih > 0)
    iw_c, ih_c = np.maximum(iw, 0.0), np.maximum(ih, 0.0)
    inter = iw_c * ih_c
    union = pred[:, 2] * pred[:, 3] + target[:, 2] * target[:, 3] - inter
    iou = np.where(union > 0, inter / union, 0.0)
    loss = weight * (-np.log(np.maximum(iou, eps)))

    grad = np.zeros_like(pred)
    act = overlap & (iou > eps)
    if np.any(act):
        dl_diou = -weight / iou[act]
        u = union[act]
        diou_di = (u + inter[act]) / (u * u)
        diou_dap = -inter[act] / (u * u)
        # Active borders: the pred side is the binding one.
        rx = (px2[act] < tx2[act]).astype(np.float64)  # d iw / d px2
        lx = (px1[act] > tx1[act]).astype(np.float64)  # -d iw / d px1
        ry = (py2[act] < ty2[act]).astype(np.float64)
        ly = (py1[act] > ty1[act]).astype(np.float64)
        di_dcx = ih_c[act] * (rx - lx)
        di_dw = ih_c[act] * 0.5 * (rx + lx)
        di_dcy = iw_c[act] * (ry - ly)
        di_dh = iw_c[act] * 0.5 * (ry + ly)
        grad[act, 0] = dl_diou * diou_di * di_dcx
        grad[act, 1] = dl_diou * diou_di * di_dcy
        grad[act, 2] = dl_diou * (diou_di * di_dw + diou_dap * pred[act, 3])
        grad[act, 3] = dl_diou * (diou_di * di_dh + diou_dap * pred[act, 2])
    return loss, grad


def iou_loss(pred, target, weight: float, eps: float = IOU_EPS) -> float:
    """Scalar form of :func:`iou_loss_array` over single center-form boxes."""
    p = pred.as_array() if hasattr(pred, "as_array") else np.asarray(pred, dtype=np.float64)
    t = target.as_array() if hasattr(target, "as_array") else np.asarray(target, dtype=np.float64)
    loss, _ = iou_loss_array(p[None], t[None], weight, eps)
    return float(loss[0])


def decode_h_grad(anchors: np.ndarray, deltas: np.ndarray, dbox: np.ndarray) -> np.ndarray:
    """Chain d(loss)/d(box) through decode_h_array back to the deltas."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty_like(deltas)
    out[:, 0] = dbox[:, 0] * anchors[:, 2]
    out[:, 1] = dbox[:, 1] * anchors[:, 3]
    inside_w = np.abs(deltas[:, 2]) < MAX_LOG_RATIO
    inside_h = np.abs(deltas[:, 3]) < MAX_LOG_RATIO
    dw = np.clip(deltas[:, 2], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    dh = np.clip(deltas[:, 3], -MAX_LOG_RATIO, MAX_LOG_RATIO)
    out[:, 2] = dbox[:, 2] * anchors[:, 2] * np.exp(dw) * inside_w
    out[:, 3] = dbox[:, 3] * anchors[:, 3] * np.exp(dh) * inside_h
    return out


def horizontal_nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy axis-aligned NMS; stable descending-score order."""
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = horizontal_iou_matrix(boxes[i][None], boxes[rest])[0]
        order = rest[ious <= iou_thr]
    return keep


# ---------------------------------------------------------------------------
# network


class HybridRPN:
    """Both proposal heads over a shared pyramid; owns only its own params."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, channels: int, settings: RpnSettings) -> None:
        self.s = settings
        reg_out = 5 if settings.af_predict_angle else 4
        self.af_conv = Conv(store, "rpn.af_conv", channels, channels, 3, rng)
        self.af_reg = Conv(store, "rpn.af_reg", channels, reg_out, 1, rng, weight_std=0.001)
        self.ab_conv = Conv(store, "rpn.ab_conv", channels, channels, 3, rng)
        self.ab_reg = Conv(store, "rpn.ab_reg", channels, 4, 1, rng, weight_std=0.001)
        self.ab_obj = Conv(store, "rpn.ab_obj", channels, 1, rng=rng, k=1, bias_init=-2.0)

    # -- helpers -----------------------------------------------------------

    @staticmethod
    def level_specs(features) -> list[FeatureLevelSpec]:
        from .backbone import STRIDES

        return [
            FeatureLevelSpec(stride, f.shape[2], f.shape[3])
            for stride, f in zip(STRIDES, features)
        ]

    def anchors_for(self, features) -> AnchorGrid:
        return generate_anchors(self.level_specs(features), self.s.anchor_scale, self.s.anchor_ratio)

    @staticmethod
    def _heads_to_flat(maps: list[np.ndarray]) -> np.ndarray:
        """Per-level (1, C, H, W) head outputs -> (sum HW, C) rows."""
        rows = [m[0].transpose(1, 2, 0).reshape(-1, m.shape[1]) for m in maps]
        return np.concatenate(rows, axis=0)

    @staticmethod
    def _flat_to_heads(flat: np.ndarray, shapes: list[tuple[int, int]]) -> list[np.ndarray]:
        out = []
        start = 0
        c = flat.shape[1]
        for h, w in shapes:
            chunk = flat[start : start + h * w]
            out.append(chunk.reshape(h, w, c).transpose(2, 0, 1)[None])
            start += h * w
        return out

    def _af_forward(self, features):
        maps, caches = [], []
        for f in features:
            h, c1 = self.af_conv.forward(f)
            a, c2 = relu_forward(h)
            d, c3 = self.af_reg.forward(a)
            maps.append(d)
            caches.append((c1, c2, c3))
        return self._heads_to_flat(maps), caches

    def _af_backward(self, dflat: np.ndarray, caches, shapes) -> list[np.ndarray]:
        dmaps = self._flat_to_heads(dflat, shapes)
        dps = []
        for dmap, (c1, c2, c3) in zip(dmaps, caches):
            da = self.af_reg.backward(dmap.astype(np.float32), c3)
            dh = relu_backward(da, c2)
            dps.append(self.af_conv.backward(dh, c1))
        return dps

    def _ab_forward(self, features, candidates, thetas, specs):
        """Stage-two heads; candidates/thetas are flat over all levels."""
        reg_maps, obj_maps, caches = [], [], []
        start = 0
        for f, spec in zip(features, specs):
            n_cells = spec.height * spec.width
            if self.s.conv_mode == "oaware":
                anchors_hw = candidates[start : start + n_cells].reshape(spec.height, spec.width, 4)
                th_hw = thetas[start : start + n_cells].reshape(spec.height, spec.width)
                off = offset_field(anchors_hw, th_hw, spec.stride, 3)[None]
                h, c1 = oaconv_forward(f, self.ab_conv.w.value, self.ab_conv.b.value, off)
                mode = "oaware"
            else:
                h, c1 = self.ab_conv.forward(f)
                mode = "standard"
            a, c2 = relu_forward(h)
            r, c3 = self.ab_reg.forward(a)
            o, c4 = self.ab_obj.forward(a)
            reg_maps.append(r)
            obj_maps.append(o)
            caches.append((mode, c1, c2, c3, c4))
            start += n_cells
        return self._heads_to_flat(reg_maps), self._heads_to_flat(obj_maps)[:, 0], caches

    def _ab_backward(self, dreg_flat, dobj_flat, caches, shapes) -> list[np.ndarray]:
        dregs = self._flat_to_heads(dreg_flat, shapes)
        dobjs = self._flat_to_heads(dobj_flat[:, None], shapes)
        dps = []
        for dreg, dobj, (mode, c1, c2, c3, c4) in zip(dregs, dobjs, caches):
            da = self.ab_reg.backward(dreg.astype(np.float32), c3)
            da = da + self.ab_obj.backward(dobj.astype(np.float32), c4)
            dh = relu_backward(da, c2)
            if mode == "oaware":
                dx, dw, db = oaconv_backward(dh, c1)
                self.ab_conv.w.grad += dw
                self.ab_conv.b.grad += db
                dps.append(dx)
            else:
                dps.append(self.ab_conv.backward(dh, c1))
        return dps

    def _emit_proposals(self, boxes: np.ndarray, scores: np.ndarray, image_size) -> list[Proposal]:
        w_img, h_img = image_size
        boxes = clip_hbb_array(boxes, w_img, h_img)
        order = np.argsort(-scores, kind="stable")[: self.s.pre_nms_topk]
        keep = horizontal_nms(boxes[order], scores[order], self.s.nms_thr)
        keep = order[keep][: self.s.post_nms_topk]
        return [Proposal(boxes[i], float(scores[i])) for i in keep]

    # -- training ----------------------------------------------------------

    def forward_train(
        self,
        features: list[np.ndarray],
        gt_obbs: np.ndarray,
        image_size: tuple[int, int],
        step_seed: int,
    ):
        """One training pass.

        Args:
            features: per-level (1, C, H, W) maps (will receive gradients).
            gt_obbs: (G, 5) oriented ground truths (may be empty).
            image_size: (width, height) pixels.
            step_seed: base seed for the two balanced samplers.

        Returns:
            (RpnTrainOutput, backward_closure). Calling the closure
            accumulates parameter gradients and returns d(loss)/d(features).
        """
        s = self.s
        specs = self.level_specs(features)
        shapes = [(sp.height, sp.width) for sp in specs]
        grid = self.anchors_for(features)
        anchors = grid.flat
        gt_rects = rectangularize_array(gt_obbs) if gt_obbs.shape[0] else np.zeros((0, 4))

        # ---- stage one: regress candidates from the preset anchors
        af_extra = None
        if s.disable_af_head:
            candidates = anchors.copy()
            af_caches = None
            af_deltas = None
            af_assign = None
            af_pos = np.zeros(0, dtype=np.int64)
        else:
            af_flat, af_caches = self._af_forward(features)
            af_deltas = af_flat[:, :4].astype(np.float64)
            if s.af_predict_angle:
                af_extra = af_flat[:, 4].astype(np.float64)
            candidates = decode_h_array(anchors, af_deltas)
            af_assign = assign_ratio(grid, gt_rects, s.af_pos_ratio, s.af_ignore_margin)
            af_sample = sample_balanced(af_assign, s.sample_pos, s.sample_neg, step_seed)
            af_pos = af_sample.pos_indices

        loss_af = 0.0
        af_grad_flat = None
        af_angle_cache = None
        if not s.disable_af_head:
            af_grad_flat = np.zeros((anchors.shape[0], 4))
            if af_pos.size:
                tgt = gt_rects[af_assign.gt_index[af_pos]]
                losses, dbox = iou_loss_array(candidates[af_pos], tgt, s.loss.w_af, s.loss.iou_eps)
                loss_af = float(losses.mean())
                af_grad_flat[af_pos] = decode_h_grad(anchors[af_pos], af_deltas[af_pos], dbox / af_pos.size)
                if s.af_predict_angle:
                    th_t = gt_obbs[af_assign.gt_index[af_pos], 4]
                    ang_losses, ang_cache = smooth_l1_forward(af_extra[af_pos], th_t, 1.0 / 9.0)
                    loss_af += float(ang_losses.mean())
                    af_angle_cache = (ang_cache, af_pos)

        # ---- stage two: candidates as anchors
        ab_assign = assign_maxiou(candidates, gt_rects, s.ab_pos_thr, s.ab_neg_thr)
        thetas = np.zeros(anchors.shape[0])
        pos_mask = ab_assign.pos_mask
        if gt_obbs.shape[0]:
            thetas[pos_mask] = gt_obbs[ab_assign.gt_index[pos_mask], 4]

        if s.disable_ab_head:
            scores = np.full(candidates.shape[0], 0.5)
            out = RpnTrainOutput(
                loss_af, 0.0, self._emit_proposals(candidates, scores, image_size), int(af_pos.size), 0
            )

            def backward_noab():
                dps = [np.zeros_like(f) for f in features]
                if not s.disable_af_head:
                    extra = self._assemble_af_grad(af_grad_flat, af_angle_cache, anchors.shape[0])
                    for i, d in enumerate(self._af_backward(extra, af_caches, shapes)):
                        dps[i] += d
                return dps

            return out, backward_noab

        ab_reg_flat, ab_obj_flat, ab_caches = self._ab_forward(features, candidates, thetas, specs)
        ab_deltas = ab_reg_flat.astype(np.float64)
        refined = decode_h_array(candidates, ab_deltas)
        ab_sample = sample_balanced(ab_assign, s.sample_pos, s.sample_neg, step_seed + 1)
        ab_pos, ab_neg = ab_sample.pos_indices, ab_sample.neg_indices

        ab_grad_flat = np.zeros((anchors.shape[0], 4))
        loss_ab_reg = 0.0
        if ab_pos.size:
            tgt = gt_rects[ab_assign.gt_index[ab_pos]]
            losses, dbox = iou_loss_array(refined[ab_pos], tgt, s.loss.w_ab, s.loss.iou_eps)
            loss_ab_reg = float(losses.mean())
            ab_grad_flat[ab_pos] = decode_h_grad(candidates[ab_pos], ab_deltas[ab_pos], dbox / ab_pos.size)

        obj_idx = np.concatenate([ab_pos, ab_neg])
        obj_labels = np.concatenate([np.ones(ab_pos.size), np.zeros(ab_neg.size)])
        probs, sig_cache = sigmoid_forward(ab_obj_flat[obj_idx])
        loss_ab_obj, bce_cache = bce_forward(probs, obj_labels)
        loss_ab = loss_ab_reg + loss_ab_obj

        all_scores, _ = sigmoid_forward(ab_obj_flat)
        proposals = self._emit_proposals(refined, all_scores, image_size)
        out = RpnTrainOutput(loss_af, loss_ab, proposals, int(af_pos.size), int(ab_pos.size))

        def backward():
            dobj_flat = np.zeros(anchors.shape[0])
            dprobs = bce_backward(1.0, bce_cache)
            dobj_flat[obj_idx] = sigmoid_backward(dprobs, sig_cache)
            dps_ab = self._ab_backward(ab_grad_flat, dobj_flat, ab_caches, shapes)
            dps = list(dps_ab)
            if not s.disable_af_head:
                extra = self._assemble_af_grad(af_grad_flat, af_angle_cache, anchors.shape[0])
                for i, d in enumerate(self._af_backward(extra, af_caches, shapes)):
                    dps[i] += d
            return dps

        return out, backward

    def _assemble_af_grad(self, af_grad_flat, af_angle_cache, n: int) -> np.ndarray:
        if not self.s.af_predict_angle:
            return af_grad_flat
        full = np.zeros((n, 5))
        full[:, :4] = af_grad_flat
        if af_angle_cache is not None:
            ang_cache, pos = af_angle_cache
            full[pos, 4] = smooth_l1_backward(np.full(pos.size, 1.0 / pos.size), ang_cache)
        return full

    # -- inference ---------------------------------------------------------

    def forward_infer(self, features: list[np.ndarray], image_size: tuple[int, int]) -> list[Proposal]:
        """Deterministic proposal generation; orientation offsets are zero
        because no ground truth exists to orient them."""
        s = self.s
        specs = self.level_specs(features)
        grid = self.anchors_for(features)
        anchors = grid.flat
        if s.disable_af_head:
            candidates = anchors.copy()
        else:
            af_flat, _ = self._af_forward(features)
            candidates = decode_h_array(anchors, af_flat[:, :4].astype(np.float64))
        if s.disable_ab_head:
            return self._emit_proposals(candidates, np.full(candidates.shape[0], 0.5), image_size)
        thetas = np.zeros(anchors.shape[0])
        ab_reg_flat, ab_obj_flat, _ = self._ab_forward(features, candidates, thetas, specs)
        refined = decode_h_array(candidates, ab_reg_flat.astype(np.float64))
        scores, _ = sigmoid_forward(ab_obj_flat)
        return self._emit_proposals(refined, scores, image_size)
