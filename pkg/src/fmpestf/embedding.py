"""Input embedding: channel expansion plus learned time-of-day/day-of-week codes.

The raw window is widened along the channel axis by an affine map, while each
history step looks up a time-of-day vector and a day-of-week vector, sums
them, and broadcasts the result across all nodes.  Both parts concatenate
into the model representation, so the first ``expand_channels`` channels are
a linear function of the raw values and the trailing ``embed_channels``
depend only on the time indices.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

DAYS_PER_WEEK = 7
TABLE_INIT_SCALE = 0.04


class DataEmbedding:
    def __init__(self, in_channels: int, expand_channels: int, embed_channels: int,
                 slots_per_day: int, rng: np.random.Generator, prefix: str = "embed"):
        self.in_channels = in_channels
        self.expand_channels = expand_channels
        self.embed_channels = embed_channels
        self.slots_per_day = slots_per_day
        bound = 1.0 / np.sqrt(in_channels)
        self.expand_w = Parameter(f"{prefix}.expand.weight",
                                  rng.uniform(-bound, bound, size=(expand_channels, in_channels)))
        self.expand_b = Parameter(f"{prefix}.expand.bias", np.zeros(expand_channels))
        self.day_table = Parameter(f"{prefix}.time_of_day",
                                   rng.uniform(-TABLE_INIT_SCALE, TABLE_INIT_SCALE,
                                               size=(slots_per_day, embed_channels)))
        self.week_table = Parameter(f"{prefix}.day_of_week",
                                    rng.uniform(-TABLE_INIT_SCALE, TABLE_INIT_SCALE,
                                                size=(DAYS_PER_WEEK, embed_channels)))

    @property
    def out_channels(self) -> int:
        return self.expand_channels + self.embed_channels

    def parameters(self) -> list[Parameter]:
        return [self.expand_w, self.expand_b, self.day_table, self.week_table]

    def forward(self, x_raw: Tensor, slots: np.ndarray, dows: np.ndarray) -> Tensor:
        """Embed ``[..., D, N, T]`` into ``[..., C, N, T]`` with C = d1 + d2."""
        if x_raw.shape[-3] != self.in_channels:
            raise T.ShapeError(f"expected {self.in_channels} input channels, "
                               f"got shape {x_raw.shape}")
        slots = np.asarray(slots)
        dows = np.asarray(dows)
        if slots.shape != x_raw.shape[:-3] + (x_raw.shape[-1],):
            raise T.ShapeError(f"time index shape {slots.shape} does not match "
                               f"input {x_raw.shape}")
        n_nodes = x_raw.shape[-2]

        expanded = T.linear(x_raw, self.expand_w, self.expand_b, axis=-3)
        step_codes = T.add(T.lookup(self.day_table, slots),
                           T.lookup(self.week_table, dows))     # [..., T, d2]
        periodic = T.expand_axis(T.moveaxis(step_codes, -1, -2), -2, n_nodes)
        return T.concat([expanded, periodic], axis=-3)
