"""Orientation-aware convolution tests: closed-form offset cases, reduction
to plain convolution, the naive-evaluator cross-check, gradients."""

from __future__ import annotations

import math

import numpy as np
import pytest

from rotdet.geometry import rotation_matrix
from rotdet.netcore import conv2d_backward, conv2d_forward
from rotdet.oaware import (
    oaconv_backward,
    oaconv_forward,
    offset_field,
    tap_grid,
    zero_offset_field,
)
from rotdet.oracles import finite_difference, oaconv_naive, relative_error


def canonical_anchors(h, w, stride, k=3):
    """Anchor field that zeroes the offsets: centered, size k*stride."""
    anchors = np.zeros((h, w, 4))
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    anchors[..., 0] = px * stride
    anchors[..., 1] = py * stride
    anchors[..., 2] = k * stride
    anchors[..., 3] = k * stride
    return anchors


class TestTapGrid:
    def test_layout(self):
        taps = tap_grid(3)
        assert taps.shape == (9, 2)
        np.testing.assert_array_equal(taps[0], [-1, -1])
        np.testing.assert_array_equal(taps[4], [0, 0])
        np.testing.assert_array_equal(taps[5], [1, 0])
        np.testing.assert_array_equal(taps[8], [1, 1])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            tap_grid(2)


class TestOffsetField:
    def test_canonical_anchor_zero_offsets(self):
        stride, k = 8, 3
        anchors = canonical_anchors(4, 5, stride, k)
        off = offset_field(anchors, np.zeros((4, 5)), stride, k)
        assert off.shape == (18, 4, 5)
        np.testing.assert_allclose(off, 0.0, atol=1e-12)

    def test_double_width_stretches_x(self):
        stride, k = 8, 3
        anchors = canonical_anchors(3, 3, stride, k)
        anchors[..., 2] = 2 * k * stride
        off = offset_field(anchors, np.zeros((3, 3)), stride, k)
        taps = tap_grid(k)
        for t in range(9):
            np.testing.assert_allclose(off[2 * t], taps[t, 0], atol=1e-12)
            np.testing.assert_allclose(off[2 * t + 1], 0.0, atol=1e-12)

    def test_quarter_turn_hand_case(self):
        # Square canonical anchor, theta = pi/2, tap r = (1, 0): the rotated
        # tap lands at (0, 1), so the offset is (-1, 1).
        stride, k = 8, 3
        anchors = canonical_anchors(1, 1, stride, k)
        off = offset_field(anchors, np.full((1, 1), math.pi / 2), stride, k)
        t = 5  # tap (1, 0)
        assert off[2 * t, 0, 0] == pytest.approx(-1.0, abs=1e-9)
        assert off[2 * t + 1, 0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_translation_moves_all_taps(self):
        stride, k = 8, 3
        anchors = canonical_anchors(2, 2, stride, k)
        anchors[..., 0] += 4.0  # half a cell right
        off = offset_field(anchors, np.zeros((2, 2)), stride, k)
        np.testing.assert_allclose(off[0::2], 0.5, atol=1e-12)
        np.testing.assert_allclose(off[1::2], 0.0, atol=1e-12)

    def test_rotation_consistency_square_anchor(self):
        # For square anchors, bumping theta by a quarter turn equals
        # rotating the tap index: omega_{t+90}(r) = omega_t(r') + r' - r
        # with r' = r @ R(pi/2).T.
        rng = np.random.default_rng(71)
        stride, k = 8, 3
        h = w = 4
        anchors = canonical_anchors(h, w, stride, k)
        anchors[..., 0] += rng.uniform(-4, 4, (h, w))
        anchors[..., 1] += rng.uniform(-4, 4, (h, w))
        side = rng.uniform(8, 40, (h, w))
        anchors[..., 2] = side
        anchors[..., 3] = side
        thetas = rng.uniform(-math.pi / 2, math.pi / 2, (h, w))
        off_a = offset_field(anchors, thetas, stride, k)
        off_b = offset_field(anchors, thetas + math.pi / 2, stride, k)
        taps = tap_grid(k)
        rot = rotation_matrix(math.pi / 2)
        for t in range(k * k):
            rp = taps[t] @ rot.T
            tp = int(np.argmin(np.abs(taps - rp).sum(axis=1)))
            np.testing.assert_allclose(
                off_b[2 * t], off_a[2 * tp] + (rp[0] - taps[t, 0]), atol=1e-9
            )
            np.testing.assert_allclose(
                off_b[2 * t + 1], off_a[2 * tp + 1] + (rp[1] - taps[t, 1]), atol=1e-9
            )

    def test_zero_theta_deterministic(self):
        rng = np.random.default_rng(72)
        anchors = rng.uniform(0, 64, (5, 5, 4)) + [0, 0, 8, 8]
        a = offset_field(anchors, np.zeros((5, 5)), 8.0)
        b = offset_field(anchors.copy(), np.zeros((5, 5)), 8.0)
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            offset_field(np.zeros((2, 2, 4)), np.zeros((3, 3)), 8.0)


class TestOAConvForward:
    def test_zero_offsets_reduce_to_conv2d(self):
        rng = np.random.default_rng(73)
        for _ in range(5):
            x = rng.standard_normal((1, 3, 6, 7))
            w = rng.standard_normal((4, 3, 3, 3))
            b = rng.standard_normal(4)
            off = zero_offset_field((6, 7))[None]
            y, _ = oaconv_forward(x, w, b, off)
            ref, _ = conv2d_forward(x, w, b, stride=1, pad=1)
            np.testing.assert_allclose(y, ref, atol=1e-6)

    def test_canonical_anchor_field_reduces(self):
        rng = np.random.default_rng(74)
        stride = 8
        anchors = canonical_anchors(6, 6, stride)
        off = offset_field(anchors, np.zeros((6, 6)), stride)[None]
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        y, _ = oaconv_forward(x, w, b, off)
        ref, _ = conv2d_forward(x, w, b)
        np.testing.assert_allclose(y, ref, atol=1e-6)

    def test_constant_map_all_ones_kernel(self):
        c = 1.7
        x = np.full((1, 1, 8, 8), c)
        w = np.ones((1, 1, 3, 3))
        off = np.zeros((1, 18, 8, 8))
        off[0, 0::2] = 0.25  # shift everything slightly; interior stays in-bounds
        y, _ = oaconv_forward(x, w, np.zeros(1), off)
        np.testing.assert_allclose(y[0, 0, 3:5, 3:5], 9 * c, atol=1e-9)

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(75)
        x = rng.standard_normal((2, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        off = rng.uniform(-1.5, 1.5, (2, 18, 5, 6))
        y, _ = oaconv_forward(x, w, b, off)
        ref = oaconv_naive(x, w, b, off)
        np.testing.assert_allclose(y, ref, atol=1e-6)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            oaconv_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 2, 3, 3)), np.zeros(3), np.zeros((1, 18, 5, 5)))
        with pytest.raises(ValueError):
            oaconv_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 1, 3, 3)), np.zeros(3), np.zeros((1, 18, 4, 4)))


class TestOAConvBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(76)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        off = rng.uniform(-1, 1, (1, 18, 5, 5))
        y, cache = oaconv_forward(x, w, b, off)
        dx, dw, db = oaconv_backward(np.zeros_like(y), cache)
        assert not dx.any() and not dw.any() and not db.any()

    def test_zero_offset_grads_match_conv2d(self):
        rng = np.random.default_rng(77)
        x = rng.standard_normal((1, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        up = rng.standard_normal((1, 3, 6, 6))
        y, cache = oaconv_forward(x, w, b, zero_offset_field((6, 6))[None])
        dx, dw, db = oaconv_backward(up, cache)
        yr, cr = conv2d_forward(x, w, b)
        rx, rw, rb = conv2d_backward(up, cr)
        np.testing.assert_allclose(dx, rx, atol=1e-6)
        np.testing.assert_allclose(dw, rw, atol=1e-6)
        np.testing.assert_allclose(db, rb, atol=1e-6)

    def test_finite_difference(self):
        rng = np.random.default_rng(78)
        x = rng.standard_normal((1, 2, 8, 8))
        w = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal(2)
        off = rng.uniform(-1.2, 1.2, (1, 18, 8, 8)) + 0.07
        up = rng.standard_normal((1, 2, 8, 8))
        y, cache = oaconv_forward(x, w, b, off)
        dx, dw, db = oaconv_backward(up, cache)

        def loss_x(v):
            return float((oaconv_forward(v, w, b, off)[0] * up).sum())

        def loss_w(v):
            return float((oaconv_forward(x, v, b, off)[0] * up).sum())

        def loss_b(v):
            return float((oaconv_forward(x, w, v, off)[0] * up).sum())

        assert relative_error(dx, finite_difference(loss_x, x, 1e-5)) < 1e-4
        assert relative_error(dw, finite_difference(loss_w, w, 1e-5)) < 1e-4
        assert relative_error(db, finite_difference(loss_b, b, 1e-5)) < 1e-4
