"""Delta coder tests: hand values, round trips, equivariances, clamping."""

from __future__ import annotations

import math

import numpy as np
import pytest

from rotdet.coders import (
    MAX_LOG_RATIO,
    Delta4,
    Delta5,
    decode_h,
    decode_h_array,
    decode_o,
    decode_o_array,
    encode_h,
    encode_h_array,
    encode_o,
    encode_o_array,
)
from rotdet.geometry import HorizontalBox, OrientedBox, canonicalize, rotated_iou


def random_hbb(rng) -> HorizontalBox:
    return HorizontalBox(
        rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(1, 60), rng.uniform(1, 60)
    )


def random_obb(rng) -> OrientedBox:
    return canonicalize(
        OrientedBox(
            rng.uniform(-50, 50),
            rng.uniform(-50, 50),
            rng.uniform(1, 60),
            rng.uniform(1, 60),
            rng.uniform(-math.pi, math.pi),
        )
    )


class TestHorizontalCoder:
    def test_identity(self):
        b = HorizontalBox(3.0, 4.0, 10.0, 6.0)
        d = encode_h(b, b)
        assert (d.dx, d.dy, d.dw, d.dh) == (0.0, 0.0, 0.0, 0.0)

    def test_hand_example(self):
        d = encode_h(HorizontalBox(0, 0, 10, 10), HorizontalBox(1, 2, 20, 10))
        assert d.dx == pytest.approx(0.1, abs=1e-15)
        assert d.dy == pytest.approx(0.2, abs=1e-15)
        assert d.dw == pytest.approx(math.log(2), abs=1e-15)
        assert d.dh == 0.0

    def test_decode_inverse_of_hand_example(self):
        out = decode_h(HorizontalBox(0, 0, 10, 10), Delta4(0.1, 0.2, math.log(2), 0.0))
        assert (out.cx, out.cy) == pytest.approx((1.0, 2.0), abs=1e-12)
        assert (out.w, out.h) == pytest.approx((20.0, 10.0), rel=1e-12)

    def test_zero_delta_is_identity(self):
        b = HorizontalBox(-7.0, 2.5, 3.0, 9.0)
        out = decode_h(b, Delta4(0, 0, 0, 0))
        assert out == b

    def test_round_trip(self):
        rng = np.random.default_rng(31)
        for _ in range(500):
            a, t = random_hbb(rng), random_hbb(rng)
            r = decode_h(a, encode_h(a, t))
            np.testing.assert_allclose(r.as_array(), t.as_array(), atol=1e-9)

    def test_clamp(self):
        a = HorizontalBox(0, 0, 10, 10)
        out = decode_h(a, Delta4(0, 0, 50.0, -50.0))
        assert out.w == pytest.approx(10 * math.exp(MAX_LOG_RATIO), rel=1e-12)
        assert out.h == pytest.approx(10 * math.exp(-MAX_LOG_RATIO), rel=1e-12)
        assert MAX_LOG_RATIO == pytest.approx(math.log(1000 / 16), abs=0)

    def test_translation_equivariance(self):
        # Exact in real arithmetic; float cancellation in (t+s)-(a+s) leaves
        # rounding at the last bit, so the contract tolerance is 1e-12.
        rng = np.random.default_rng(32)
        for _ in range(100):
            a, t = random_hbb(rng), random_hbb(rng)
            sx, sy = rng.uniform(-40, 40, 2)
            a2 = HorizontalBox(a.cx + sx, a.cy + sy, a.w, a.h)
            t2 = HorizontalBox(t.cx + sx, t.cy + sy, t.w, t.h)
            np.testing.assert_allclose(
                encode_h(a2, t2).as_array(), encode_h(a, t).as_array(), atol=1e-12
            )

    def test_scale_equivariance(self):
        rng = np.random.default_rng(33)
        for _ in range(100):
            a, t = random_hbb(rng), random_hbb(rng)
            s = rng.uniform(0.25, 8.0)
            a2 = HorizontalBox(a.cx * s, a.cy * s, a.w * s, a.h * s)
            t2 = HorizontalBox(t.cx * s, t.cy * s, t.w * s, t.h * s)
            np.testing.assert_allclose(
                encode_h(a2, t2).as_array(), encode_h(a, t).as_array(), atol=1e-12
            )

    def test_finite_enforced(self):
        with pytest.raises(ValueError):
            Delta4(float("nan"), 0, 0, 0)
        with pytest.raises(ValueError):
            Delta5(0, 0, float("inf"), 0, 0)


class TestOrientedCoder:
    def test_zero_target(self):
        ref = HorizontalBox(2.0, 3.0, 8.0, 8.0)
        t = OrientedBox(2.0, 3.0, 8.0, 8.0, 0.0)
        d = encode_o(ref, t)
        assert d.as_array().tolist() == [0, 0, 0, 0, 0]

    def test_pure_rotation(self):
        ref = HorizontalBox(0, 0, 10, 10)
        out = decode_o(ref, Delta5(0, 0, 0, 0, math.pi / 4))
        assert (out.cx, out.cy, out.w, out.h) == pytest.approx((0, 0, 10, 10), abs=1e-12)
        assert out.theta == pytest.approx(math.pi / 4, abs=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(34)
        for _ in range(500):
            ref, t = random_hbb(rng), random_obb(rng)
            r = decode_o(ref, encode_o(ref, t))
            assert rotated_iou(r, t) > 1 - 1e-9
            np.testing.assert_allclose(r.as_array()[:4], t.as_array()[:4], atol=1e-9)

    def test_decode_output_canonical(self):
        rng = np.random.default_rng(35)
        for _ in range(100):
            ref = random_hbb(rng)
            d = Delta5(*rng.uniform(-1, 1, 4), rng.uniform(-4, 4))
            out = decode_o(ref, d)
            assert out.w >= out.h
            assert -math.pi / 2 <= out.theta < math.pi / 2


class TestArrayVariants:
    def test_encode_h_matches_scalar(self):
        rng = np.random.default_rng(36)
        a = np.stack([random_hbb(rng).as_array() for _ in range(64)])
        t = np.stack([random_hbb(rng).as_array() for _ in range(64)])
        out = encode_h_array(a, t)
        for i in range(64):
            ref = encode_h(HorizontalBox(*a[i]), HorizontalBox(*t[i]))
            np.testing.assert_allclose(out[i], ref.as_array(), atol=1e-14)

    def test_decode_h_matches_scalar(self):
        rng = np.random.default_rng(37)
        a = np.stack([random_hbb(rng).as_array() for _ in range(64)])
        d = rng.uniform(-6, 6, (64, 4))
        out = decode_h_array(a, d)
        for i in range(64):
            ref = decode_h(HorizontalBox(*a[i]), Delta4(*d[i]))
            np.testing.assert_allclose(out[i], ref.as_array(), rtol=1e-14)

    def test_oriented_array_round_trip(self):
        rng = np.random.default_rng(38)
        refs = np.stack([random_hbb(rng).as_array() for _ in range(128)])
        targets = np.stack([random_obb(rng).as_array() for _ in range(128)])
        back = decode_o_array(refs, encode_o_array(refs, targets))
        np.testing.assert_allclose(back, targets, atol=1e-9)
