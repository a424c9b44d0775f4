"""Config loading tests: defaults, YAML round trip, strict keys, overrides."""

from __future__ import annotations

import pytest
import yaml

from rotdet.config import DatasetConfig, RunConfig


class TestDefaults:
    def test_reference_recipe(self):
        cfg = RunConfig()
        assert cfg.learning_rate == 0.005
        assert cfg.momentum == 0.9
        assert cfg.weight_decay == 1e-4
        assert cfg.loss_weight == 7.0
        assert cfg.anchor_scale == 4.0 and cfg.anchor_ratio == 1.0
        assert cfg.sample_pos == 256 and cfg.sample_neg == 256
        assert cfg.conv_mode == "oaware"
        assert cfg.dataset.kind == "synthetic"
        cfg.validate()

    def test_rpn_settings_mapping(self):
        cfg = RunConfig(loss_weight=3.5, nms_thr=0.6, disable_ab_head=True)
        st = cfg.rpn_settings()
        assert st.loss.w_af == 3.5 and st.loss.w_ab == 3.5
        assert st.nms_thr == 0.6
        assert st.disable_ab_head is True


class TestSerialization:
    def test_yaml_round_trip(self, tmp_path):
        cfg = RunConfig(
            epochs=5,
            learning_rate=0.01,
            dataset=DatasetConfig(train_images=20, base_seed=7, rotation_heavy=True),
        )
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump(cfg.to_dict()), encoding="utf-8")
        back = RunConfig.from_yaml(str(path))
        assert back == cfg

    def test_empty_yaml_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert RunConfig.from_yaml(str(path)) == RunConfig()

    def test_partial_yaml(self, tmp_path):
        path = tmp_path / "p.yaml"
        path.write_text("epochs: 3\ndataset:\n  train_images: 8\n", encoding="utf-8")
        cfg = RunConfig.from_yaml(str(path))
        assert cfg.epochs == 3
        assert cfg.dataset.train_images == 8
        assert cfg.learning_rate == 0.005  # untouched default


class TestStrictKeys:
    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="learning_rte"):
            RunConfig.from_dict({"learning_rte": 0.1})

    def test_unknown_dataset_key(self):
        with pytest.raises(ValueError, match="dataset.n_images"):
            RunConfig.from_dict({"dataset": {"n_images": 5}})

    def test_non_mapping_root(self):
        with pytest.raises(ValueError, match="mapping"):
            RunConfig.from_dict([1, 2])


class TestValidation:
    def test_bad_epochs(self):
        with pytest.raises(ValueError, match="epochs"):
            RunConfig.from_dict({"epochs": 0})

    def test_bad_conv_mode(self):
        with pytest.raises(ValueError, match="conv_mode"):
            RunConfig.from_dict({"conv_mode": "deformable"})

    def test_bad_flip_probability(self):
        with pytest.raises(ValueError, match="flip_probability"):
            RunConfig.from_dict({"flip_probability": 1.5})

    def test_bad_image_size(self):
        with pytest.raises(ValueError, match="divisible by 16"):
            RunConfig.from_dict({"dataset": {"image_size": 100}})

    def test_manifest_requires_dirs(self):
        with pytest.raises(ValueError, match="manifest"):
            RunConfig.from_dict({"dataset": {"kind": "manifest"}})

    def test_bad_dataset_kind(self):
        with pytest.raises(ValueError, match="dataset.kind"):
            RunConfig.from_dict({"dataset": {"kind": "coco"}})


class TestOverrides:
    def test_applied_and_validated(self):
        cfg = RunConfig().with_overrides(epochs=2, seed=9)
        assert cfg.epochs == 2 and cfg.seed == 9

    def test_none_skipped(self):
        cfg = RunConfig(epochs=4).with_overrides(epochs=None)
        assert cfg.epochs == 4

    def test_unknown_name_raises(self):
        with pytest.raises(ValueError, match="nope"):
            RunConfig().with_overrides(nope=1)

    def test_does_not_mutate_original(self):
        cfg = RunConfig()
        cfg.with_overrides(epochs=99)
        assert cfg.epochs == 30
