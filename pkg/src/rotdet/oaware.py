"""Orientation-aware convolution.

A deformable-style convolution whose per-tap sampling offsets are not
learned: they are computed in closed form from the current anchor box at each
location and, during training, the orientation of its assigned ground truth.
Each kernel tap is moved so the k x k grid stretches to the anchor's width
and height and rotates by the assigned angle; with no assignment (and always
at inference) the angle is zero, which makes the offsets a deterministic
function of the anchors alone.

For a location ``p`` (cells), tap ``r`` (tap units, x right / y down), anchor
``(x, y, w, h)`` (pixels), stride ``S`` and angle ``theta``:

    omega(p, r) = (1/S) * ((x, y) + (1/k) * ((w, h) * r) @ R(theta).T) - p - r

with ``R`` the counter-clockwise rotation matrix and row-vector convention,
so ``v @ R.T`` rotates ``v`` by ``theta``. A centered anchor of size
``k*S`` with ``theta = 0`` gives zero offsets and the op reduces exactly to
plain convolution with zero padding.

Offsets carry no gradient: they derive from box geometry, not from learned
tensors, so the backward pass only routes into the input and the weights.
"""

from __future__ import annotations

import numpy as np

from .netcore import bilinear_sample_backward, bilinear_sample_forward


def tap_grid(k: int) -> np.ndarray:
    """Tap vectors r as a (k*k, 2) array of (rx, ry), row-major over (ry, rx).

    For k=3 the taps run (-1,-1), (0,-1), (1,-1), (-1,0), ... matching the
    kernel weight layout w[:, :, ty + c, tx + c].
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    c = (k - 1) // 2
    ry, rx = np.mgrid[-c : c + 1, -c : c + 1]
    return np.stack([rx.ravel(), ry.ravel()], axis=1).astype(np.float64)


def offset_field(anchors: np.ndarray, thetas: np.ndarray, stride: float, k: int = 3) -> np.ndarray:
    """Per-location, per-tap sampling offsets.

    Args:
        anchors: (H, W, 4) center-form boxes in pixels, one per location.
        thetas: (H, W) angles in radians (zero where nothing is assigned).
        stride: pixels per feature cell.
        k: kernel size.

    Returns:
        (2*k*k, H, W) offsets in cells; channel 2t is the x component of
        tap t, channel 2t+1 the y component.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    h, w = thetas.shape
    if anchors.shape != (h, w, 4):
        raise ValueError(f"anchors {anchors.shape} do not match thetas {thetas.shape}")
    taps = tap_grid(k)  # (T, 2)
    cos = np.cos(thetas)[None]  # (1, H, W)
    sin = np.sin(thetas)[None]
    sx = (anchors[..., 2] / k)[None] * taps[:, 0, None, None]  # (T, H, W) = w*rx/k
    sy = (anchors[..., 3] / k)[None] * taps[:, 1, None, None]
    ux = cos * sx - sin * sy
    uy = sin * sx + cos * sy
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    off_x = (anchors[..., 0][None] + ux) / stride - px[None] - taps[:, 0, None, None]
    off_y = (anchors[..., 1][None] + uy) / stride - py[None] - taps[:, 1, None, None]
    out = np.empty((2 * k * k, h, w), dtype=np.float64)
    out[0::2] = off_x
    out[1::2] = off_y
    return out


def zero_offset_field(shape: tuple[int, int], k: int = 3, dtype=np.float64) -> np.ndarray:
    """Offsets that make oaconv coincide with plain zero-padded convolution."""
    h, w = shape
    return np.zeros((2 * k * k, h, w), dtype=dtype)


def oaconv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, offsets: np.ndarray):
    """Offset-guided convolution. x (N,C,H,W), w (Cout,C,k,k), offsets
    (N, 2k^2, H, W). Output matches the input spatial size; out-of-bounds
    samples read zero, which reproduces zero padding when offsets vanish.
    """
    n, c, hh, ww = x.shape
    cout, cin, k, k2 = w.shape
    if cin != c or k != k2:
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    if offsets.shape != (n, 2 * k * k, hh, ww):
        raise ValueError(f"offsets {offsets.shape} incompatible with input {x.shape} and k={k}")
    taps = tap_grid(k)
    px, py = np.meshgrid(np.arange(ww, dtype=x.dtype), np.arange(hh, dtype=x.dtype))
    base = np.stack([px.ravel(), py.ravel()], axis=1)  # (P, 2)
    wflat = w.reshape(cout, c, k * k)
    y = np.tile(b[None, :, None, None], (n, 1, hh, ww)).astype(x.dtype) if b is not None else np.zeros((n, cout, hh, ww), dtype=x.dtype)
    caches = []
    for img in range(n):
        # One gather covers every tap: (T, P, 2) points, flattened.
        off = offsets[img].reshape(k * k, 2, hh * ww).transpose(0, 2, 1)
        pts = base[None] + taps[:, None, :] + off
        vals, cache = bilinear_sample_forward(x[img], pts.reshape(-1, 2).astype(x.dtype))
        v3 = vals.reshape(k * k, hh * ww, c)
        y[img] += np.einsum("tpc,oct->op", v3, wflat).reshape(cout, hh, ww)
        caches.append((cache, v3))
    return y, (caches, x.shape, w, offsets.shape)


def oaconv_backward(dy: np.ndarray, cache):
    """Gradients (dx, dw, db); offsets are constants and receive none."""
    caches, x_shape, w, _ = cache
    n, c, hh, ww = x_shape
    cout, _, k, _ = w.shape
    wflat = w.reshape(cout, c, k * k)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 2, 3))
    for img in range(n):
        dy2 = dy[img].reshape(cout, -1)  # (Cout, P)
        samp_cache, v3 = caches[img]
        dw += np.einsum("op,tpc->oct", dy2, v3).reshape(w.shape)
        dvals = np.einsum("op,oct->tpc", dy2, wflat)
        dxi, _ = bilinear_sample_backward(dvals.reshape(-1, c), samp_cache, need_dpoints=False)
        dx[img] += dxi
    return dx, dw, db
