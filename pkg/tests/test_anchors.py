"""Anchor grid tests: counts, centers, sizing."""

from __future__ import annotations

import numpy as np
import pytest

from rotdet.anchors import AnchorGrid, FeatureLevelSpec, generate_anchors


class TestGenerateAnchors:
    def test_spec_example_2x2_stride8(self):
        grid = generate_anchors([FeatureLevelSpec(8, 2, 2)], scale=4.0, ratio=1.0)
        boxes = grid.per_level[0]
        assert boxes.shape == (4, 4)
        # Row-major over (y, x).
        np.testing.assert_allclose(
            boxes[:, :2], [[4, 4], [12, 4], [4, 12], [12, 12]]
        )
        np.testing.assert_allclose(boxes[:, 2:], np.full((4, 2), 32.0))

    def test_square_for_ratio_one(self):
        levels = [FeatureLevelSpec(s, 3, 5) for s in (4, 8, 16, 32, 64)]
        grid = generate_anchors(levels, scale=4.0, ratio=1.0)
        for lvl, boxes in zip(levels, grid.per_level):
            assert np.all(boxes[:, 2] == boxes[:, 3])
            assert np.all(boxes[:, 2] == lvl.stride * 4.0)

    def test_scale_six(self):
        grid = generate_anchors([FeatureLevelSpec(8, 1, 1)], scale=6.0, ratio=1.0)
        np.testing.assert_allclose(grid.per_level[0][0], [4.0, 4.0, 48.0, 48.0])

    def test_ratio_shapes(self):
        grid = generate_anchors([FeatureLevelSpec(8, 1, 1)], scale=4.0, ratio=4.0)
        box = grid.per_level[0][0]
        assert box[2] == pytest.approx(64.0)
        assert box[3] == pytest.approx(16.0)
        # Area is preserved across ratios at fixed scale.
        assert box[2] * box[3] == pytest.approx((8 * 4.0) ** 2)

    def test_total_count_and_flat(self):
        levels = [FeatureLevelSpec(4, 32, 32), FeatureLevelSpec(8, 16, 16), FeatureLevelSpec(16, 8, 8)]
        grid = generate_anchors(levels, 4.0, 1.0)
        assert len(grid) == 32 * 32 + 16 * 16 + 8 * 8
        assert grid.flat.shape == (len(grid), 4)
        assert grid.level_sizes == (1024, 256, 64)

    def test_centers_tile_with_stride_spacing(self):
        grid = generate_anchors([FeatureLevelSpec(16, 4, 6)], 4.0, 1.0)
        boxes = grid.per_level[0].reshape(4, 6, 4)
        dx = np.diff(boxes[:, :, 0], axis=1)
        dy = np.diff(boxes[:, :, 1], axis=0)
        assert np.all(dx == 16.0)
        assert np.all(dy == 16.0)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            generate_anchors([FeatureLevelSpec(8, 2, 2)], scale=0.0, ratio=1.0)
        with pytest.raises(ValueError):
            generate_anchors([FeatureLevelSpec(8, 2, 2)], scale=4.0, ratio=-1.0)
        with pytest.raises(ValueError):
            FeatureLevelSpec(0, 2, 2)
