"""Run configuration: a YAML-backed dataclass with strict key checking.

Defaults follow the reference training recipe (SGD at 0.005 with momentum
0.9 and weight decay 1e-4, one square anchor of scale 4 per location,
regression loss weight 7, 256/256 sampling). Every field can be overridden
from the file or from CLI flags; unknown keys are rejected by name rather
than silently ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .rpn import LossConfig, RpnSettings


@dataclass
class DatasetConfig:
    """Where training/validation images come from.

    kind "synthetic" renders scenes on the fly from seeds; kind "manifest"
    reads datasets written by ``rotdet.data.synthetic.write_dataset``.
    """

    kind: str = "synthetic"
    train_images: int = 500
    val_images: int = 100
    image_size: int = 128
    base_seed: int = 1000
    rotation_heavy: bool = False
    train_dir: str | None = None
    val_dir: str | None = None

    def validate(self) -> None:
        if self.kind not in ("synthetic", "manifest"):
            raise ValueError(f"dataset.kind must be synthetic or manifest, got {self.kind!r}")
        if self.kind == "manifest" and not (self.train_dir and self.val_dir):
            raise ValueError("dataset.kind manifest requires train_dir and val_dir")
        if self.image_size % 16:
            raise ValueError(f"dataset.image_size must be divisible by 16, got {self.image_size}")


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 30
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    anchor_scale: float = 4.0
    anchor_ratio: float = 1.0
    loss_weight: float = 7.0
    sample_pos: int = 256
    sample_neg: int = 256
    rcnn_pos: int = 16
    rcnn_neg: int = 48
    pre_nms_topk: int = 1000
    post_nms_topk: int = 500
    nms_thr: float = 0.7
    conv_mode: str = "oaware"
    disable_af_head: bool = False
    disable_ab_head: bool = False
    num_classes: int = 3
    channels: int = 32
    flip_probability: float = 0.5
    score_thr: float = 0.05
    eval_iou_thr: float = 0.5
    checkpoint_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")
        if self.conv_mode not in ("oaware", "standard"):
            raise ValueError(f"conv_mode must be oaware or standard, got {self.conv_mode!r}")
        self.dataset.validate()

    def rpn_settings(self) -> RpnSettings:
        return RpnSettings(
            anchor_scale=self.anchor_scale,
            anchor_ratio=self.anchor_ratio,
            sample_pos=self.sample_pos,
            sample_neg=self.sample_neg,
            pre_nms_topk=self.pre_nms_topk,
            post_nms_topk=self.post_nms_topk,
            nms_thr=self.nms_thr,
            conv_mode=self.conv_mode,
            disable_af_head=self.disable_af_head,
            disable_ab_head=self.disable_ab_head,
            loss=LossConfig(w_af=self.loss_weight, w_ab=self.loss_weight),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValueError("config root must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        if "dataset" in kwargs and kwargs["dataset"] is not None:
            ds = kwargs["dataset"]
            ds_known = {f.name for f in fields(DatasetConfig)}
            ds_unknown = set(ds) - ds_known
            if ds_unknown:
                raise ValueError(f"unknown config key(s): {', '.join('dataset.' + k for k in sorted(ds_unknown))}")
            kwargs["dataset"] = DatasetConfig(**ds)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "RunConfig":
        """New config with non-None overrides applied; unknown names raise."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in data or key == "dataset":
                raise ValueError(f"unknown config key(s): {key}")
            data[key] = value
        return RunConfig.from_dict(data)
