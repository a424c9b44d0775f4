"""Command-line tests driven through ``main(argv)``."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest

from rotdet.cli import BENCH_MIN_PAIRS_PER_SEC, main
from rotdet.data.synthetic import standard_specs, write_dataset


def run_tiny_train(tmp_path, *extra: str) -> str:
    ckpt_dir = str(tmp_path / "run")
    code = main(
        [
            "train",
            "--quiet",
            "--checkpoint-dir", ckpt_dir,
            "--epochs", "1",
            "--set", "channels=8",
            "--set", "rcnn_pos=4",
            "--set", "rcnn_neg=12",
            "--set", "dataset.train_images=2",
            "--set", "dataset.val_images=1",
            *extra,
        ]
    )
    assert code == 0
    return ckpt_dir


class TestTrainCommand:
    def test_writes_artifacts_and_config_echo(self, tmp_path):
        ckpt_dir = run_tiny_train(tmp_path)
        assert os.path.exists(os.path.join(ckpt_dir, "latest.ckpt"))
        assert os.path.exists(os.path.join(ckpt_dir, "loss_log.csv"))
        import yaml

        with open(os.path.join(ckpt_dir, "config.yaml"), encoding="utf-8") as f:
            echoed = yaml.safe_load(f)
        assert echoed["channels"] == 8
        assert echoed["epochs"] == 1
        assert echoed["dataset"]["train_images"] == 2

    def test_config_file_plus_flag_overrides(self, tmp_path):
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text("epochs: 9\nchannels: 8\n", encoding="utf-8")
        ckpt_dir = str(tmp_path / "run")
        code = main(
            [
                "train", "--quiet",
                "--config", str(cfg_path),
                "--checkpoint-dir", ckpt_dir,
                "--epochs", "1",  # flag beats file
                "--set", "rcnn_pos=4",
                "--set", "rcnn_neg=12",
                "--set", "dataset.train_images=2",
                "--set", "dataset.val_images=1",
            ]
        )
        assert code == 0
        import yaml

        with open(os.path.join(ckpt_dir, "config.yaml"), encoding="utf-8") as f:
            assert yaml.safe_load(f)["epochs"] == 1

    def test_unknown_set_key_rejected(self, tmp_path):
        with pytest.raises(SystemExit, match="unknown config key"):
            main(["train", "--quiet", "--set", "chanels=8",
                  "--checkpoint-dir", str(tmp_path / "x")])

    def test_bad_set_value_rejected(self, tmp_path):
        with pytest.raises(SystemExit, match="bad value"):
            main(["train", "--quiet", "--set", "epochs=three",
                  "--checkpoint-dir", str(tmp_path / "x")])

    def test_set_without_equals_rejected(self, tmp_path):
        with pytest.raises(SystemExit, match="KEY=VALUE"):
            main(["train", "--quiet", "--set", "epochs",
                  "--checkpoint-dir", str(tmp_path / "x")])


class TestEvalCommand:
    def test_prints_both_metrics_and_writes_report(self, tmp_path, capsys):
        ckpt_dir = run_tiny_train(tmp_path)
        report = str(tmp_path / "report.json")
        dets = str(tmp_path / "dets.jsonl")
        code = main(
            [
                "eval",
                "--checkpoint-dir", ckpt_dir,
                "--set", "channels=8",
                "--set", "dataset.val_images=1",
                "--out", report,
                "--dump-detections", dets,
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "VOC07" in out and "VOC12" in out and "mAP" in out
        with open(report, encoding="utf-8") as f:
            data = json.load(f)
        assert set(data) == {"voc07", "voc12"}
        assert data["voc07"]["metric"] == "voc07"
        assert os.path.exists(dets)

    def test_missing_checkpoint_fails(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")])
        assert code == 1
        assert "not found" in capsys.readouterr().err


class TestBenchCommand:
    def test_reports_throughput(self, capsys):
        code = main(["bench-iou", "--n", "20000"])
        out = capsys.readouterr().out
        assert "pairs/sec" in out
        assert code in (0, 1)  # small n is noisy; format is the contract here

    def test_recorded_floor(self):
        assert BENCH_MIN_PAIRS_PER_SEC == 1e5


class TestSelfcheckCommand:
    def test_all_suites_pass(self, capsys):
        assert main(["selfcheck"]) == 0
        out = capsys.readouterr().out
        assert "suites passed" in out
        assert "FAIL" not in out


class TestRenderCommand:
    def test_synthetic_ground_truth_only(self, tmp_path):
        out = str(tmp_path / "scene.ppm")
        assert main(["render", "--synthetic-seed", "4", "--draw-gt", "--out", out]) == 0
        with open(out, "rb") as f:
            assert f.readline().strip() == b"P6"
            w, h = map(int, f.readline().split())
            assert f.readline().strip() == b"255"
            pixels = np.frombuffer(f.read(), dtype=np.uint8)
        assert (w, h) == (128, 128)
        assert pixels.size == 128 * 128 * 3
        rgb = pixels.reshape(128, 128, 3)
        assert np.any(np.all(rgb == 255, axis=2))  # ground-truth outlines

    def test_with_checkpoint_draws_detections(self, tmp_path):
        ckpt_dir = run_tiny_train(tmp_path)
        out = str(tmp_path / "overlay.ppm")
        code = main(
            [
                "render",
                "--checkpoint", os.path.join(ckpt_dir, "latest.ckpt"),
                "--synthetic-seed", "4",
                "--score-thr", "0.01",
                "--out", out,
            ]
        )
        assert code == 0 and os.path.exists(out)

    def test_manifest_source(self, tmp_path):
        data_dir = str(tmp_path / "data")
        write_dataset(data_dir, standard_specs(2, base_seed=77))
        out = str(tmp_path / "m.ppm")
        code = main(
            ["render", "--manifest", data_dir, "--image-id", "img_00001",
             "--draw-gt", "--out", out]
        )
        assert code == 0 and os.path.exists(out)

    def test_manifest_requires_image_id(self, tmp_path):
        data_dir = str(tmp_path / "data")
        write_dataset(data_dir, standard_specs(1, base_seed=77))
        with pytest.raises(SystemExit, match="image-id"):
            main(["render", "--manifest", data_dir, "--out", str(tmp_path / "x.ppm")])

    def test_missing_checkpoint_fails(self, tmp_path, capsys):
        code = main(
            ["render", "--checkpoint", str(tmp_path / "no.ckpt"),
             "--synthetic-seed", "0", "--out", str(tmp_path / "x.ppm")]
        )
        assert code == 1
        assert "not found" in capsys.readouterr().err
