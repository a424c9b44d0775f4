"""Estimator facade tests: param handling, validation, fit/predict/score."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rotdet.data.synthetic import SceneSpec, generate_scene
from rotdet.estimator import HybridAnchorDetector


@pytest.fixture(scope="module")
def tiny_dataset():
    X, y = [], []
    for seed in (31, 32):
        image, gts, labels = generate_scene(SceneSpec(seed=seed))
        X.append(image)
        y.append({"boxes": gts, "labels": labels})
    return X, y


def tiny_estimator(**overrides) -> HybridAnchorDetector:
    params = dict(epochs=2, channels=8, seed=0)
    params.update(overrides)
    return HybridAnchorDetector(**params)


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        est = HybridAnchorDetector(epochs=3, learning_rate=0.01, conv_mode="standard")
        params = est.get_params()
        assert params["epochs"] == 3
        assert params["learning_rate"] == 0.01
        assert params["conv_mode"] == "standard"
        rebuilt = HybridAnchorDetector(**params)
        assert rebuilt.get_params() == params

    def test_set_params(self):
        est = HybridAnchorDetector()
        est.set_params(epochs=7, channels=16)
        assert est.epochs == 7 and est.channels == 16
        with pytest.raises(ValueError):
            est.set_params(not_a_param=1)

    def test_clone_unfitted_copy(self, tiny_dataset):
        X, y = tiny_dataset
        est = tiny_estimator().fit(X, y)
        duplicate = clone(est)
        assert duplicate.get_params() == est.get_params()
        assert not hasattr(duplicate, "model_")

    def test_predict_before_fit_raises(self, tiny_dataset):
        X, _ = tiny_dataset
        with pytest.raises(NotFittedError):
            HybridAnchorDetector().predict(X)


class TestValidation:
    def test_bad_image_shape(self, tiny_dataset):
        _, y = tiny_dataset
        with pytest.raises(ValueError, match="image 0"):
            tiny_estimator().fit([np.zeros((3, 64, 64), dtype=np.float32)], y[:1])

    def test_non_multiple_of_16(self, tiny_dataset):
        _, y = tiny_dataset
        with pytest.raises(ValueError, match="divisible by 16"):
            tiny_estimator().fit([np.zeros((100, 100), dtype=np.float32)], y[:1])

    def test_length_mismatch(self, tiny_dataset):
        X, y = tiny_dataset
        with pytest.raises(ValueError, match="2 images but y has 1"):
            tiny_estimator().fit(X, y[:1])

    def test_y_not_dict(self, tiny_dataset):
        X, _ = tiny_dataset
        with pytest.raises(ValueError, match=r"y\[0\]"):
            tiny_estimator().fit(X[:1], [np.zeros((2, 5))])

    def test_box_label_mismatch(self, tiny_dataset):
        X, _ = tiny_dataset
        bad = [{"boxes": np.zeros((2, 5)), "labels": np.zeros(3, dtype=np.int64)}]
        with pytest.raises(ValueError, match="2 boxes but 3 labels"):
            tiny_estimator().fit(X[:1], bad)

    def test_non_finite_boxes(self, tiny_dataset):
        X, _ = tiny_dataset
        bad = [{"boxes": np.full((1, 5), np.nan), "labels": np.zeros(1, dtype=np.int64)}]
        with pytest.raises(ValueError, match="non-finite"):
            tiny_estimator().fit(X[:1], bad)

    def test_labels_out_of_range(self, tiny_dataset):
        X, _ = tiny_dataset
        bad = [{"boxes": np.array([[50, 50, 30, 12, 0.1]]), "labels": np.array([4])}]
        with pytest.raises(ValueError, match="labels outside"):
            tiny_estimator(num_classes=3).fit(X[:1], bad)


class TestFitPredictScore:
    def test_smoke(self, tiny_dataset):
        X, y = tiny_dataset
        est = tiny_estimator().fit(X, y)
        assert est.n_images_fit_ == 2

        preds = est.predict(X)
        assert len(preds) == 2
        for p in preds:
            assert set(p) == {"boxes", "scores", "labels"}
            d = p["boxes"].shape[0]
            assert p["boxes"].shape == (d, 5)
            assert p["scores"].shape == (d,) and p["labels"].shape == (d,)
            assert np.all(np.diff(p["scores"]) <= 0)
            if d:
                assert p["labels"].min() >= 0 and p["labels"].max() < 3

        value = est.score(X, y)
        assert 0.0 <= value <= 1.0

    def test_plain_hw_images_accepted(self, tiny_dataset):
        X, y = tiny_dataset
        est = tiny_estimator().fit([x[0] for x in X], y)
        preds = est.predict([x[0] for x in X])
        assert len(preds) == 2

    def test_deterministic_given_seed(self, tiny_dataset):
        X, y = tiny_dataset
        a = tiny_estimator().fit(X, y).predict(X)
        b = tiny_estimator().fit(X, y).predict(X)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa["boxes"], pb["boxes"])
            np.testing.assert_array_equal(pa["scores"], pb["scores"])
