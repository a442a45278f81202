"""Interactive-learning encoder: interleaved split, cross-branch exchange, merge.

Each component splits its input into the even-index and odd-index time
subsequences, runs two rounds of cross-branch interaction (multiplicative
then additive, each arrow through its own temporal block and the component's
shared spatial block), optionally recurses into two child components, and
re-interleaves.  The encoder adds the original input back on top of the
root's output.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .spatial import FusionGraphBlock
from .temporal import AttConvBlock


def split_interleave(h: Tensor) -> tuple[Tensor, Tensor]:
    """Even time indices into the first half, odd into the second."""
    t = h.shape[-1]
    if t % 2 != 0:
        raise T.ShapeError(f"time length {t} must be even to split into two "
                           f"equal interleaved subsequences")
    return T.take_stride(h, 0, 2), T.take_stride(h, 1, 2)


def merge_interleave(pre: Tensor, post: Tensor) -> Tensor:
    """Exact inverse of :func:`split_interleave`."""
    return T.interleave(pre, post)


class STComp:
    """One split/interact/merge unit: four temporal blocks, one shared spatial block."""

    def __init__(self, channels: int, n_nodes: int, kernel_sizes: tuple[int, int],
                 diffusion_steps: int, max_neighbors: int, use_attention: bool,
                 use_prompt: bool, use_dynamic: bool, levels_below: int,
                 rng: np.random.Generator, prefix: str):
        self.prefix = prefix
        self.att_conv = [
            AttConvBlock(channels, kernel_sizes, use_attention, rng,
                         prefix=f"{prefix}.attconv{i}")
            for i in range(4)
        ]
        self.fusion = FusionGraphBlock(channels, n_nodes, diffusion_steps,
                                       max_neighbors, use_prompt, use_dynamic,
                                       rng, prefix=f"{prefix}.fusion")
        if levels_below > 0:
            self.children = tuple(
                STComp(channels, n_nodes, kernel_sizes, diffusion_steps,
                       max_neighbors, use_attention, use_prompt, use_dynamic,
                       levels_below - 1, rng, prefix=f"{prefix}.{side}")
                for side in ("pre", "post"))
        else:
            self.children = None

    def parameters(self):
        params = []
        for block in self.att_conv:
            params += block.parameters()
        params += self.fusion.parameters()
        if self.children:
            for child in self.children:
                params += child.parameters()
        return params

    def _transform(self, arrow: int, h: Tensor, a_prompt, collect) -> Tensor:
        """One interaction arrow: temporal block, spatial block, bounded output.

        tanh keeps the multiplicative round from amplifying without bound.
        """
        out = self.fusion.forward(self.att_conv[arrow].forward(h), a_prompt,
                                  collect, tag=f"{self.prefix}.arrow{arrow}")
        return T.tanh(out)

    def interact(self, pre: Tensor, post: Tensor, a_prompt,
                 collect=None) -> tuple[Tensor, Tensor]:
        """Two rounds of cross-branch exchange: gate by the other branch, then add it."""
        if pre.shape != post.shape:
            raise T.ShapeError(f"branch shapes differ: {pre.shape} vs {post.shape}")
        pre_1 = T.mul(self._transform(0, post, a_prompt, collect), pre)
        post_1 = T.mul(self._transform(1, pre, a_prompt, collect), post)
        pre_2 = T.add(self._transform(2, post_1, a_prompt, collect), pre_1)
        post_2 = T.add(self._transform(3, pre_1, a_prompt, collect), post_1)
        return pre_2, post_2

    def forward(self, h: Tensor, a_prompt, collect=None) -> Tensor:
        pre, post = split_interleave(h)
        pre, post = self.interact(pre, post, a_prompt, collect)
        if self.children:
            pre = self.children[0].forward(pre, a_prompt, collect)
            post = self.children[1].forward(post, a_prompt, collect)
        return merge_interleave(pre, post)


class InteractiveEncoder:
    """Binary tree of components with a top-level residual connection."""

    def __init__(self, channels: int, n_nodes: int, kernel_sizes: tuple[int, int],
                 diffusion_steps: int, max_neighbors: int, use_attention: bool,
                 use_prompt: bool, use_dynamic: bool, depth: int,
                 rng: np.random.Generator, prefix: str = "encoder"):
        if depth < 0:
            raise ValueError(f"tree depth must be >= 0, got {depth}")
        self.depth = depth
        if depth == 0:
            self.root = None
        else:
            self.root = STComp(channels, n_nodes, kernel_sizes, diffusion_steps,
                               max_neighbors, use_attention, use_prompt,
                               use_dynamic, depth - 1, rng, prefix=f"{prefix}.root")

    def parameters(self):
        return self.root.parameters() if self.root is not None else []

    def forward(self, h: Tensor, a_prompt, collect=None) -> Tensor:
        if self.root is None:
            return h
        required = 2 ** self.depth
        if h.shape[-1] % required != 0:
            raise T.ShapeError(f"time length {h.shape[-1]} must be divisible by "
                               f"{required} for a depth-{self.depth} encoder")
        return T.add(self.root.forward(h, a_prompt, collect), h)
