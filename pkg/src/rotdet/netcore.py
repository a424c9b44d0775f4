"""Minimal numpy tensor ops with hand-written backward passes.

Every op is a ``*_forward`` / ``*_backward`` pair: forward returns the output
plus an opaque cache, backward consumes the upstream gradient and the cache.
Composites chain these calls explicitly; there is no autodiff graph. All ops
preserve the input dtype, so gradient-check suites can run the same code in
float64 while training runs in float32.

Summation order is fixed by the im2col/GEMM formulation (BLAS dot products
over a deterministic layout), so repeated runs in one environment are
bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    """A trainable tensor with its gradient accumulator and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)


class ParamStore(dict):
    """Named parameters; insertion order defines checkpoint layout."""

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(np.ascontiguousarray(value))
        self[name] = p
        return p

    def zero_grads(self) -> None:
        for p in self.values():
            p.grad[...] = 0.0

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) - set(arrays)
        extra = set(arrays) - set(self)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for k, p in self.items():
            a = arrays[k]
            if a.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {p.value.shape}")
            p.value[...] = a


def sgd_step(store: ParamStore, lr: float, momentum: float, weight_decay: float) -> None:
    """SGD with momentum and decoupled-from-nothing L2 weight decay:
    g += wd*w; buf = m*buf + g; w -= lr*buf."""
    for p in store.values():
        g = p.grad + weight_decay * p.value
        p.momentum *= momentum
        p.momentum += g
        p.value -= lr * p.momentum


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. The log-IoU box loss has a 1/IoU factor, so
    a near-miss positive can emit a gradient orders of magnitude above the
    usual range; without this cap a handful of such steps compound into
    overflow.
    """
    total = 0.0
    for p in store.values():
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in store.values():
            p.grad *= scale
    return norm


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    std = math.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 1):
    """Cross-correlation. x (N,C,H,W), w (Cout,C,k,k), b (Cout,).

    Returns y (N,Cout,Ho,Wo) with Ho = (H + 2*pad - k)//stride + 1.
    """
    n, c, h, wd = x.shape
    cout, cin, k, k2 = w.shape
    if cin != c or k != k2:
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)
    y = cols @ w.reshape(cout, -1).T + b
    y = y.transpose(0, 2, 1).reshape(n, cout, ho, wo)
    cache = (cols, x.shape, w, stride, pad)
    return y, cache


def conv2d_backward(dy: np.ndarray, cache):
    """Gradients (dx, dw, db) for conv2d_forward."""
    cols, x_shape, w, stride, pad = cache
    n, c, h, wd = x_shape
    cout, _, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dy2 = dy.reshape(n, cout, ho * wo).transpose(0, 2, 1)  # (N, P, Cout)
    db = dy2.sum(axis=(0, 1))
    dw = np.tensordot(dy2, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    dcols = dy2 @ w.reshape(cout, -1)  # (N, P, C*k*k)
    dcols = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[..., i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd]
    return dx, dw, db


# ---------------------------------------------------------------------------
# dense / activations / losses


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x (N, D) @ w (M, D).T + b (M,)."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"fc shapes disagree: x {x.shape}, w {w.shape}")
    return x @ w.T + b, (x, w)


def fc_backward(dy: np.ndarray, cache):
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), (x > 0)


def relu_backward(dy: np.ndarray, cache):
    return dy * cache


def sigmoid_forward(x: np.ndarray):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dy: np.ndarray, cache):
    y = cache
    return dy * y * (1.0 - y)


def bce_forward(pred: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    if pred.shape != labels.shape:
        raise ValueError(f"bce shapes disagree: {pred.shape} vs {labels.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    return float(loss), (pred, p, labels)


def bce_backward(dloss: float, cache):
    pred, p, labels = cache
    n = pred.size if pred.size else 1
    grad = (-(labels / p) + (1.0 - labels) / (1.0 - p)) / n
    # The clamp is flat: no gradient where the raw prediction was clipped.
    grad = np.where((pred > BCE_EPS) & (pred < 1.0 - BCE_EPS), grad, 0.0)
    return dloss * grad.astype(pred.dtype)


def softmax_ce_forward(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over (N, K) logits with integer labels (N,)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-30))))
    return loss, (probs, labels)


def softmax_ce_backward(dloss: float, cache):
    probs, labels = cache
    n = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return dloss * grad / n


def smooth_l1_forward(pred: np.ndarray, target: np.ndarray, beta: float):
    """Elementwise Huber-style loss: 0.5 d^2/beta inside |d|<beta, |d|-beta/2 outside."""
    d = pred - target
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return loss, (d, beta)


def smooth_l1_backward(dloss: np.ndarray, cache):
    d, beta = cache
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return dloss * g


# ---------------------------------------------------------------------------
# sampling / resizing


def bilinear_sample_forward(x: np.ndarray, points: np.ndarray):
    """Sample x (C, H, W) at continuous (px, py) cell coordinates.

    Out-of-bounds neighbors read as zero. Returns values (P, C).
    """
    points = np.asarray(points, dtype=x.dtype)
    px, py = points[:, 0], points[:, 1]
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    tx = px - x0
    ty = py - y0
    c, h, w = x.shape
    rows = np.ascontiguousarray(x.reshape(c, -1).T)  # (H*W, C) row gather

    def gather(xi, yi):
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = np.zeros((points.shape[0], c), dtype=x.dtype)
        vals[ok] = rows[yi[ok] * w + xi[ok]]
        return vals, ok

    v00, m00 = gather(x0, y0)
    v10, m10 = gather(x0 + 1, y0)
    v01, m01 = gather(x0, y0 + 1)
    v11, m11 = gather(x0 + 1, y0 + 1)
    w00 = ((1 - tx) * (1 - ty))[:, None]
    w10 = (tx * (1 - ty))[:, None]
    w01 = ((1 - tx) * ty)[:, None]
    w11 = (tx * ty)[:, None]
    out = v00 * w00 + v10 * w10 + v01 * w01 + v11 * w11
    cache = (x.shape, x.dtype, x0, y0, tx, ty, (v00, v10, v01, v11), (m00, m10, m01, m11))
    return out, cache


def bilinear_sample_backward(dy: np.ndarray, cache, need_dpoints: bool = True):
    """Gradients (dx (C,H,W), dpoints (P,2)) for bilinear_sample_forward.

    ``need_dpoints=False`` skips the coordinate gradient (returned as None)
    for callers whose sample positions are constants.
    """
    x_shape, dtype, x0, y0, tx, ty, vals, masks = cache
    v00, v10, v01, v11 = vals
    m00, m10, m01, m11 = masks
    c, h, w = x_shape

    idx_parts, contrib_parts = [], []
    for mask, xi, yi, weight in (
        (m00, x0, y0, (1 - tx) * (1 - ty)),
        (m10, x0 + 1, y0, tx * (1 - ty)),
        (m01, x0, y0 + 1, (1 - tx) * ty),
        (m11, x0 + 1, y0 + 1, tx * ty),
    ):
        if np.any(mask):
            idx_parts.append(yi[mask] * w + xi[mask])
            contrib_parts.append(dy[mask] * weight[mask, None])
    if idx_parts:
        flat = np.concatenate(idx_parts)
        contrib = np.concatenate(contrib_parts)  # (Q, C)
        acc = np.empty((c, h * w))
        for ch in range(c):
            acc[ch] = np.bincount(flat, weights=contrib[:, ch], minlength=h * w)
        dx = acc.reshape(c, h, w).astype(dtype, copy=False)
    else:
        dx = np.zeros(x_shape, dtype=dtype)

    if not need_dpoints:
        return dx, None
    dval_dx = (1 - ty)[:, None] * (v10 - v00) + ty[:, None] * (v11 - v01)
    dval_dy = (1 - tx)[:, None] * (v01 - v00) + tx[:, None] * (v11 - v10)
    dpoints = np.stack([(dy * dval_dx).sum(axis=1), (dy * dval_dy).sum(axis=1)], axis=1)
    return dx, dpoints


def upsample2x_forward(x: np.ndarray):
    """Nearest-neighbor 2x upsample of (N, C, H, W)."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), x.shape


def upsample2x_backward(dy: np.ndarray, cache):
    n, c, h, w = cache
    return dy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# layer wrappers: register parameters in a store, accumulate gradients


class Conv:
    """A conv2d layer bound to named parameters in a ParamStore."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        weight_std: float | None = None,
        bias_init: float = 0.0,
    ) -> None:
        if weight_std is None:
            w = he_normal(rng, (cout, cin, k, k))
        else:
            w = (rng.standard_normal((cout, cin, k, k)) * weight_std).astype(np.float32)
        self.w = store.add(name + ".w", w)
        self.b = store.add(name + ".b", np.full(cout, bias_init, dtype=np.float32))
        self.stride = stride
        self.pad = (k - 1) // 2

    def forward(self, x: np.ndarray):
        return conv2d_forward(x, self.w.value, self.b.value, self.stride, self.pad)

    def backward(self, dy: np.ndarray, cache):
        dx, dw, db = conv2d_backward(dy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx


class Dense:
    """A fully connected layer bound to named parameters in a ParamStore."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        din: int,
        dout: int,
        rng: np.random.Generator,
        weight_std: float | None = None,
        bias_init: float = 0.0,
    ) -> None:
        if weight_std is None:
            w = he_normal(rng, (dout, din))
        else:
            w = (rng.standard_normal((dout, din)) * weight_std).astype(np.float32)
        self.w = store.add(name + ".w", w)
        self.b = store.add(name + ".b", np.full(dout, bias_init, dtype=np.float32))

    def forward(self, x: np.ndarray):
        return fc_forward(x, self.w.value, self.b.value)

    def backward(self, dy: np.ndarray, cache):
        dx, dw, db = fc_backward(dy, cache)
        self.w.grad += dw
        self.b.grad += db
        return dx
