"""Desk-scale convolutional backbone with a two-level feature pyramid.

Four stages (16/32/64/64 channels, stride 2 each) shrink the image by 16x;
the last two stages feed 1x1 lateral projections merged top-down with
nearest upsampling into pyramid levels P3 (stride 8) and P4 (stride 16),
both at ``out_channels``. Stands in for the large pretrained backbones that
are out of scope at this scale.
"""

from __future__ import annotations

import numpy as np

from .netcore import (
    Conv,
    ParamStore,
    relu_backward,
    relu_forward,
    upsample2x_backward,
    upsample2x_forward,
)

STRIDES = (8, 16)


class Backbone:
    """conv stages + feature pyramid; strides of the emitted levels are
    ``STRIDES`` (P3, P4)."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, in_channels: int = 1, out_channels: int = 32) -> None:
        chans = (16, 32, 64, 64)
        self.stages: list[list[Conv]] = []
        prev = in_channels
        for i, c in enumerate(chans):
            stage = [Conv(store, f"backbone.s{i + 1}a", prev, c, 3, rng, stride=2)]
            if i > 0:
                stage.append(Conv(store, f"backbone.s{i + 1}b", c, c, 3, rng))
            self.stages.append(stage)
            prev = c
        self.lat3 = Conv(store, "fpn.lat3", chans[2], out_channels, 1, rng)
        self.lat4 = Conv(store, "fpn.lat4", chans[3], out_channels, 1, rng)
        self.smooth3 = Conv(store, "fpn.smooth3", out_channels, out_channels, 3, rng)
        self.smooth4 = Conv(store, "fpn.smooth4", out_channels, out_channels, 3, rng)
        self.out_channels = out_channels

    def forward(self, x: np.ndarray):
        """x (N, C, H, W) with H, W divisible by 16 -> ([P3, P4], cache)."""
        caches = []
        h = x
        stage_outs = []
        for stage in self.stages:
            stage_cache = []
            for conv in stage:
                h, c_conv = conv.forward(h)
                h, c_relu = relu_forward(h)
                stage_cache.append((c_conv, c_relu))
            caches.append(stage_cache)
            stage_outs.append(h)
        c3, c4 = stage_outs[2], stage_outs[3]
        l3, cl3 = self.lat3.forward(c3)
        l4, cl4 = self.lat4.forward(c4)
        up4, cup = upsample2x_forward(l4)
        m3 = l3 + up4
        p3, cs3 = self.smooth3.forward(m3)
        p4, cs4 = self.smooth4.forward(l4)
        cache = (caches, cl3, cl4, cup, cs3, cs4)
        return [p3, p4], cache

    def backward(self, dlevels, cache) -> None:
        """Accumulate parameter gradients from [dP3, dP4]."""
        caches, cl3, cl4, cup, cs3, cs4 = cache
        dp3, dp4 = dlevels
        dm3 = self.smooth3.backward(dp3, cs3)
        dl4 = self.smooth4.backward(dp4, cs4)
        dl3 = dm3
        dl4 = dl4 + upsample2x_backward(dm3, cup)
        dc3 = self.lat3.backward(dl3, cl3)
        dc4 = self.lat4.backward(dl4, cl4)

        # Stage 4 sits on top of stage 3's output: its input gradient joins
        # the lateral path of C3 before stages 3..1 are walked backward.
        d = dc4
        for conv, (c_conv, c_relu) in zip(reversed(self.stages[3]), reversed(caches[3])):
            d = relu_backward(d, c_relu)
            d = conv.backward(d, c_conv)
        d = d + dc3
        for stage, stage_cache in zip(reversed(self.stages[:3]), reversed(caches[:3])):
            for conv, (c_conv, c_relu) in zip(reversed(stage), reversed(stage_cache)):
                d = relu_backward(d, c_relu)
                d = conv.backward(d, c_conv)
