"""Config-driven training loop and evaluation runner.

One process owns a checkpoint directory at a time (guarded by a lock file).
Each iteration trains on a single image with SGD after clipping the global
gradient norm; the learning rate drops by 10x after 2/3 and again after 8/9
of the epochs. Every per-iteration loss is appended to ``loss_log.csv``
with full float precision, so two runs with the same config and seed
produce byte-identical logs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data.evaluate import DetectionRecord, GroundTruth, evaluate_map
from .data.synthetic import (
    CLASS_NAMES,
    DatasetRecord,
    flip_scene,
    generate_scene,
    load_dataset,
    standard_specs,
)
from .model import Detector
from .netcore import clip_grad_norm, sgd_step

LOG_COLUMNS = ("iteration", "loss_af", "loss_ab", "loss_rcnn_cls", "loss_rcnn_reg")
OPTIM_KIND = "rotdet-optim"

# The log-IoU box loss has a 1/IoU gradient factor, so a near-miss positive
# can emit a gradient thousands of times the typical norm (~10-20). Momentum
# amplifies whatever enters the buffer about tenfold, and below the loss
# clamp the gradient is exactly zero, which makes a degenerate regressor an
# absorbing state. A cap near the healthy p90 keeps every update small
# enough that live positives can always pull the heads back.
MAX_GRAD_NORM = 20.0


class CheckpointDirLock:
    """Exclusive ownership of a checkpoint directory via an O_EXCL file."""

    def __init__(self, directory: str) -> None:
        self.path = os.path.join(directory, ".lock")
        self._fd: int | None = None

    def __enter__(self) -> "CheckpointDirLock":
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"checkpoint directory is locked by another run ({self.path}); "
                "remove the file if that run is dead"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            os.unlink(self.path)


def build_records(cfg: RunConfig, split: str) -> list[DatasetRecord]:
    """Materialize a split. Synthetic val seeds sit far from train seeds."""
    ds = cfg.dataset
    if ds.kind == "manifest":
        records = load_dataset(ds.train_dir if split == "train" else ds.val_dir)
        if not records:
            raise ValueError(f"{split} split is empty")
        return records
    n = ds.train_images if split == "train" else ds.val_images
    base = ds.base_seed if split == "train" else ds.base_seed + 1_000_000
    if n < 1:
        raise ValueError(f"{split} split is empty")
    specs = standard_specs(n, base, rotation_heavy=ds.rotation_heavy, image_size=ds.image_size)
    out = []
    for i, spec in enumerate(specs):
        image, gts, labels = generate_scene(spec)
        out.append(DatasetRecord(f"{split}_{i:05d}", image, gts, labels))
    return out


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    """Step decay: /10 after 2/3 of the epochs, /100 after 8/9.

    Thresholds are floored at 1 so very short runs still spend their first
    epoch at the base rate.
    """
    lr = cfg.learning_rate
    first = max((cfg.epochs * 2) // 3, 1)
    second = max((cfg.epochs * 8) // 9, first)
    if epoch >= second:
        return lr / 100.0
    if epoch >= first:
        return lr / 10.0
    return lr


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    epochs_run: int
    final_epoch_mean_loss: float


def _append_log(path: str, rows: list[tuple]) -> None:
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as f:
        if new:
            f.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            it = row[0]
            f.write(str(it) + "," + ",".join(format(v, ".17g") for v in row[1:]) + "\n")


def _optim_path(directory: str) -> str:
    return os.path.join(directory, "optimizer.ckpt")


def train(cfg: RunConfig, resume: bool = False, progress=None) -> TrainResult:
    """Run the configured training; returns paths to the final artifacts.

    Args:
        cfg: validated run configuration.
        resume: continue from ``latest.ckpt`` in the checkpoint directory.
        progress: optional callable(epoch, iteration, losses) for reporting.
    """
    cfg.validate()
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    log_path = os.path.join(cfg.checkpoint_dir, "loss_log.csv")
    latest = os.path.join(cfg.checkpoint_dir, "latest.ckpt")

    with CheckpointDirLock(cfg.checkpoint_dir):
        records = build_records(cfg, "train")
        start_epoch = 0
        if resume:
            model, meta = Detector.load(latest)
            start_epoch = int(meta["epoch"]) + 1
            opt_path = _optim_path(cfg.checkpoint_dir)
            if os.path.exists(opt_path):
                arrays, ometa = ckpt.load_checkpoint(opt_path)
                if ometa.get("kind") == OPTIM_KIND:
                    for name, param in model.store.items():
                        if name in arrays:
                            param.momentum[...] = arrays[name]
        else:
            if os.path.exists(log_path):
                os.unlink(log_path)
            model = Detector(
                num_classes=cfg.num_classes,
                channels=cfg.channels,
                seed=cfg.seed,
                settings=cfg.rpn_settings(),
                rcnn_pos=cfg.rcnn_pos,
                rcnn_neg=cfg.rcnn_neg,
            )

        epoch = start_epoch - 1
        mean_loss = float("nan")
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            rows = []
            totals = []
            for i, rec in enumerate(records):
                iteration = epoch * len(records) + i
                image, gts = rec.image, rec.gts
                if cfg.flip_probability > 0.0:
                    flip_rng = np.random.default_rng((cfg.seed, iteration))
                    if flip_rng.random() < cfg.flip_probability:
                        image, gts = flip_scene(image, gts)
                model.store.zero_grads()
                losses = model.train_step(image, gts, rec.labels, step_seed=iteration)
                clip_grad_norm(model.store, MAX_GRAD_NORM)
                sgd_step(model.store, lr, cfg.momentum, cfg.weight_decay)
                rows.append(
                    (
                        iteration,
                        losses["loss_af"],
                        losses["loss_ab"],
                        losses["loss_rcnn_cls"],
                        losses["loss_rcnn_reg"],
                    )
                )
                totals.append(losses["loss_total"])
                if progress is not None:
                    progress(epoch, iteration, losses)
            _append_log(log_path, rows)
            mean_loss = float(np.mean(totals))
            extra = {"epoch": epoch, "config": cfg.to_dict(), "mean_loss": mean_loss}
            model.save(os.path.join(cfg.checkpoint_dir, f"epoch_{epoch:03d}.ckpt"), extra)
            model.save(latest, extra)
            ckpt.save_checkpoint(
                _optim_path(cfg.checkpoint_dir),
                {k: p.momentum for k, p in model.store.items()},
                {"kind": OPTIM_KIND, "epoch": epoch},
            )

    return TrainResult(latest, log_path, epoch - start_epoch + 1, mean_loss)


def run_eval(
    model: Detector,
    records: list[DatasetRecord],
    score_thr: float = 0.05,
    iou_thr: float = 0.5,
    class_names=CLASS_NAMES,
):
    """-> (voc07 result, voc12 result, detections). Raises on an empty split."""
    if not records:
        raise ValueError("evaluation split is empty")
    detections: list[DetectionRecord] = []
    gts: list[GroundTruth] = []
    for rec in records:
        for d in model.infer(rec.image, score_thr=score_thr):
            detections.append(
                DetectionRecord(rec.image_id, d.class_id, d.score, d.box.as_array())
            )
        for g, label, diff in zip(rec.gts, rec.labels, rec.difficulties):
            gts.append(GroundTruth(rec.image_id, int(label), g, int(diff)))
    voc07 = evaluate_map(detections, gts, class_names, iou_thr, "voc07")
    voc12 = evaluate_map(detections, gts, class_names, iou_thr, "voc12")
    return voc07, voc12, detections
