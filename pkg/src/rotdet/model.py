"""Whole-image detector: backbone, two-stage proposal network, RoI heads.

One ``ParamStore`` owns every trainable tensor, so optimizer steps and
checkpoints cover the full model. Training works image by image:
``train_step`` returns the per-component losses and accumulates parameter
gradients; the caller decides when to apply an optimizer step.
"""

from __future__ import annotations

from dataclasses import asdict, fields

import numpy as np

from . import checkpoint as ckpt
from .backbone import STRIDES, Backbone
from .geometry import rectangularize_array
from .heads import Detection, RcnnHeads
from .netcore import ParamStore
from .rpn import HybridRPN, RpnSettings

CHECKPOINT_KIND = "rotdet-detector"


class Detector:
    """End-to-end oriented-object detector over grayscale images."""

    def __init__(
        self,
        num_classes: int = 3,
        channels: int = 32,
        seed: int = 0,
        settings: RpnSettings | None = None,
        rcnn_pos: int = 24,
        rcnn_neg: int = 72,
    ) -> None:
        self.num_classes = num_classes
        self.channels = channels
        self.rcnn_pos = rcnn_pos
        self.rcnn_neg = rcnn_neg
        self.settings = settings if settings is not None else RpnSettings()
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(self.store, rng, in_channels=1, out_channels=channels)
        self.rpn = HybridRPN(self.store, rng, channels, self.settings)
        self.heads = RcnnHeads(self.store, rng, channels, num_classes)

    # -- training ----------------------------------------------------------

    def train_step(
        self,
        image: np.ndarray,
        gt_obbs: np.ndarray,
        gt_labels: np.ndarray,
        step_seed: int,
    ) -> dict[str, float]:
        """Accumulate gradients for one image.

        Args:
            image: (1, H, W) in [0, 1], H and W divisible by 16.
            gt_obbs: (G, 5) oriented boxes in pixels.
            gt_labels: (G,) class ids in [0, num_classes).
            step_seed: seeds the stage samplers; vary it per step.

        Returns:
            losses keyed loss_af / loss_ab / loss_rcnn_cls / loss_rcnn_reg
            plus their sum under "loss_total".
        """
        if image.ndim != 3 or image.shape[0] != 1:
            raise ValueError(f"expected (1, H, W) image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        x = image[None].astype(np.float64)
        levels, bb_cache = self.backbone.forward(x)
        rpn_out, rpn_backward = self.rpn.forward_train(levels, gt_obbs, (w, h), step_seed)

        if rpn_out.proposals:
            prop_boxes = np.stack([p.box for p in rpn_out.proposals])
        else:
            prop_boxes = np.zeros((0, 4))
        if gt_obbs.shape[0]:
            # GT rectangles ride along so the RoI stages always see
            # positives, even before the proposal network works.
            prop_boxes = np.concatenate([prop_boxes, rectangularize_array(gt_obbs)])

        (loss_cls, loss_reg), heads_backward = self.heads.forward_train(
            levels[0][0],
            prop_boxes,
            gt_obbs,
            gt_labels,
            stride=float(STRIDES[0]),
            rng_seed=step_seed + 2,
            num_pos=self.rcnn_pos,
            num_neg=self.rcnn_neg,
        )

        dlevels = rpn_backward()
        dlevels[0] = dlevels[0].copy()
        dlevels[0][0] += heads_backward()
        self.backbone.backward(dlevels, bb_cache)

        losses = {
            "loss_af": rpn_out.loss_af,
            "loss_ab": rpn_out.loss_ab,
            "loss_rcnn_cls": loss_cls,
            "loss_rcnn_reg": loss_reg,
        }
        losses["loss_total"] = sum(losses.values())
        return losses

    # -- inference ---------------------------------------------------------

    def infer(self, image: np.ndarray, score_thr: float = 0.05) -> list[Detection]:
        """Detections for one (1, H, W) image, best first."""
        if image.ndim != 3 or image.shape[0] != 1:
            raise ValueError(f"expected (1, H, W) image, got {image.shape}")
        h, w = image.shape[1], image.shape[2]
        levels, _ = self.backbone.forward(image[None].astype(np.float64))
        proposals = self.rpn.forward_infer(levels, (w, h))
        if not proposals:
            return []
        boxes = np.stack([p.box for p in proposals])
        return self.heads.detect(levels[0][0], boxes, float(STRIDES[0]), score_thr=score_thr)

    # -- persistence -------------------------------------------------------

    def save(self, path: str, extra_meta: dict | None = None) -> None:
        meta = {
            "kind": CHECKPOINT_KIND,
            "num_classes": self.num_classes,
            "channels": self.channels,
            "rcnn_pos": self.rcnn_pos,
            "rcnn_neg": self.rcnn_neg,
            "settings": asdict(self.settings),
        }
        if extra_meta:
            meta.update(extra_meta)
        ckpt.save_checkpoint(path, self.store.state_arrays(), meta)

    @classmethod
    def load(cls, path: str) -> tuple["Detector", dict]:
        """Rebuild a detector from a checkpoint; returns (model, meta)."""
        arrays, meta = ckpt.load_checkpoint(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"not a detector checkpoint: kind={meta.get('kind')!r}")
        known = {f.name for f in fields(RpnSettings)}
        raw = meta.get("settings", {})
        settings_kwargs = {k: v for k, v in raw.items() if k in known}
        if "loss" in raw and isinstance(raw["loss"], dict):
            from .rpn import LossConfig

            settings_kwargs["loss"] = LossConfig(**raw["loss"])
        model = cls(
            num_classes=int(meta["num_classes"]),
            channels=int(meta["channels"]),
            settings=RpnSettings(**settings_kwargs),
            rcnn_pos=int(meta.get("rcnn_pos", 24)),
            rcnn_neg=int(meta.get("rcnn_neg", 72)),
        )
        model.store.load_state(arrays)
        return model, meta
