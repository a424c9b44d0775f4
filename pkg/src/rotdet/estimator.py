"""Estimator facade over the detector with a fit/predict surface.

Wraps the imperative training loop in a scikit-learn style class so the
model slots into that ecosystem's param handling (``get_params`` /
``set_params``, cloning). X is a batch of grayscale images; y carries per
image oriented boxes and class labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data.evaluate import DetectionRecord, GroundTruth, evaluate_map
from .model import Detector
from .netcore import clip_grad_norm, sgd_step


def _as_images(X) -> list[np.ndarray]:
    out = []
    for i, img in enumerate(X):
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] != 1:
            raise ValueError(f"image {i}: expected (H, W) or (1, H, W), got {np.asarray(img).shape}")
        if arr.shape[1] % 16 or arr.shape[2] % 16:
            raise ValueError(f"image {i}: sides must be divisible by 16, got {arr.shape[1:]}")
        out.append(arr)
    return out


def _as_targets(y, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if len(y) != n:
        raise ValueError(f"X has {n} images but y has {len(y)} entries")
    out = []
    for i, t in enumerate(y):
        if not isinstance(t, dict) or "boxes" not in t or "labels" not in t:
            raise ValueError(f"y[{i}] must be a dict with 'boxes' (G, 5) and 'labels' (G,)")
        boxes = np.asarray(t["boxes"], dtype=np.float64).reshape(-1, 5)
        labels = np.asarray(t["labels"], dtype=np.int64).reshape(-1)
        if boxes.shape[0] != labels.shape[0]:
            raise ValueError(f"y[{i}]: {boxes.shape[0]} boxes but {labels.shape[0]} labels")
        if not np.all(np.isfinite(boxes)):
            raise ValueError(f"y[{i}]: non-finite box coordinates")
        out.append((boxes, labels))
    return out


class HybridAnchorDetector(BaseEstimator):
    """Oriented-object detector with the two-headed proposal stage.

    Parameters mirror the training config; ``fit`` runs SGD over the given
    images for ``epochs`` passes, ``predict`` returns per-image oriented
    detections, and ``score`` reports rotated mAP@0.5 (VOC07).
    """

    def __init__(
        self,
        epochs: int = 12,
        learning_rate: float = 0.005,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        num_classes: int = 3,
        channels: int = 32,
        conv_mode: str = "oaware",
        score_thr: float = 0.05,
        seed: int = 0,
    ) -> None:
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.num_classes = num_classes
        self.channels = channels
        self.conv_mode = conv_mode
        self.score_thr = score_thr
        self.seed = seed

    def fit(self, X, y) -> "HybridAnchorDetector":
        from .rpn import RpnSettings
        from .train import MAX_GRAD_NORM, lr_at_epoch

        images = _as_images(X)
        targets = _as_targets(y, len(images))
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        for i, (_, labels) in enumerate(targets):
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"y[{i}]: labels outside [0, {self.num_classes})")

        model = Detector(
            num_classes=self.num_classes,
            channels=self.channels,
            seed=self.seed,
            settings=RpnSettings(conv_mode=self.conv_mode),
        )

        class _Cfg:  # minimal stand-in for the schedule helper
            epochs = self.epochs
            learning_rate = self.learning_rate

        for epoch in range(self.epochs):
            lr = lr_at_epoch(_Cfg, epoch)
            for i, (image, (boxes, labels)) in enumerate(zip(images, targets)):
                model.store.zero_grads()
                model.train_step(image, boxes, labels, step_seed=epoch * len(images) + i)
                clip_grad_norm(model.store, MAX_GRAD_NORM)
                sgd_step(model.store, lr, self.momentum, self.weight_decay)
        self.model_ = model
        self.n_images_fit_ = len(images)
        return self

    def predict(self, X) -> list[dict]:
        """Per image: {"boxes": (D, 5), "scores": (D,), "labels": (D,)}."""
        check_is_fitted(self, "model_")
        out = []
        for image in _as_images(X):
            dets = self.model_.infer(image, score_thr=self.score_thr)
            out.append(
                {
                    "boxes": np.array([d.box.as_array() for d in dets]).reshape(-1, 5),
                    "scores": np.array([d.score for d in dets]),
                    "labels": np.array([d.class_id for d in dets], dtype=np.int64),
                }
            )
        return out

    def score(self, X, y) -> float:
        """Rotated mAP at IoU 0.5 under the 11-point metric."""
        check_is_fitted(self, "model_")
        targets = _as_targets(y, len(list(X)))
        preds = self.predict(X)
        dets, gts = [], []
        for i, (pred, (boxes, labels)) in enumerate(zip(preds, targets)):
            img_id = f"img_{i}"
            for b, s, c in zip(pred["boxes"], pred["scores"], pred["labels"]):
                dets.append(DetectionRecord(img_id, int(c), float(s), b))
            for b, c in zip(boxes, labels):
                gts.append(GroundTruth(img_id, int(c), b))
        names = [f"class_{c}" for c in range(self.num_classes)]
        return float(evaluate_map(dets, gts, names, 0.5, "voc07")["map"])
