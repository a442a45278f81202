"""Temporal block: convolution over time, attention over time, convolution again.

Both convolutions slide along the time axis only (node kernel size 1) with
symmetric zero padding, so the block never mixes nodes and always preserves
shape.  The attention stage is single-head scaled dot-product over the time
positions of each node independently, applied residually (x + attention(x))
so the stage starts out information-preserving; disabling it turns the stage
into the identity map, leaving exactly conv2(conv1(h)).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class AttConvBlock:
    def __init__(self, channels: int, kernel_sizes: tuple[int, int],
                 use_attention: bool, rng: np.random.Generator, prefix: str = "attconv"):
        k1, k2 = kernel_sizes
        if k1 < 1 or k2 < 1:
            raise ValueError(f"kernel sizes must be >= 1, got {kernel_sizes}")
        self.channels = channels
        self.kernel_sizes = (k1, k2)
        self.use_attention = use_attention

        def conv_init(k):
            bound = 1.0 / np.sqrt(channels * k)
            return rng.uniform(-bound, bound, size=(channels, channels, k))

        self.conv1_w = Parameter(f"{prefix}.conv1.weight", conv_init(k1))
        self.conv1_b = Parameter(f"{prefix}.conv1.bias", np.zeros(channels))
        self.conv2_w = Parameter(f"{prefix}.conv2.weight", conv_init(k2))
        self.conv2_b = Parameter(f"{prefix}.conv2.bias", np.zeros(channels))
        if use_attention:
            bound = 1.0 / np.sqrt(channels)
            self.query_w = Parameter(f"{prefix}.attention.query",
                                     rng.uniform(-bound, bound, size=(channels, channels)))
            self.key_w = Parameter(f"{prefix}.attention.key",
                                   rng.uniform(-bound, bound, size=(channels, channels)))
            # zero value projection: the attention stage starts as the identity
            # (residual only) and grows as it learns what to re-weight
            self.value_w = Parameter(f"{prefix}.attention.value",
                                     np.zeros((channels, channels)))

    def parameters(self) -> list[Parameter]:
        params = [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]
        if self.use_attention:
            params += [self.query_w, self.key_w, self.value_w]
        return params

    def _attend(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Per-node attention over time; returns (context [...,C,N,t], scores [...,N,t,t])."""
        q = T.moveaxis(T.linear(h, self.query_w, axis=-3), -3, -1)   # [..., N, t, C]
        k = T.moveaxis(T.linear(h, self.key_w, axis=-3), -3, -1)
        v = T.moveaxis(T.linear(h, self.value_w, axis=-3), -3, -1)
        logits = T.bmatmul(q, T.moveaxis(k, -1, -2)) * (1.0 / np.sqrt(self.channels))
        scores = T.softmax(logits, axis=-1)
        context = T.moveaxis(T.bmatmul(scores, v), -1, -3)
        return context, scores

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[-3] != self.channels:
            raise T.ShapeError(f"block expects {self.channels} channels, "
                               f"input has shape {h.shape}")
        out = T.time_conv(h, self.conv1_w, self.conv1_b)
        if self.use_attention:
            context, _ = self._attend(out)
            out = T.add(out, context)    # residual keeps early training stable
        return T.time_conv(out, self.conv2_w, self.conv2_b)

    def attention_scores(self, h: Tensor) -> Tensor:
        """Row-stochastic attention matrices per node, for inspection."""
        if not self.use_attention:
            raise ValueError("attention is disabled for this block")
        if h.shape[-3] != self.channels:
            raise T.ShapeError(f"block expects {self.channels} channels, "
                               f"input has shape {h.shape}")
        _, scores = self._attend(T.time_conv(h, self.conv1_w, self.conv1_b))
        return scores
