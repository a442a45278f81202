"""Spatial block: dynamic fusion-matrix construction and diffusion convolution.

The block collapses its input over time, measures similarity of the collapsed
representation against a learnable per-node pattern bank (long-term view) and
against itself (current view), mixes the resulting matrices with the static
adjacency prompt through shared per-entry weights, keeps the top-``tau``
entries of every row, row-normalizes, and propagates the input through powers
of that matrix with per-step channel weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

PATTERN_INIT_SCALE = 0.04


def spatial_similarity(x: Tensor, y: Tensor) -> Tensor:
    """Row-stochastic affinity of ``x`` columns to ``y`` columns.

    Inputs are ``[..., C, N]``; output ``[..., N, N]`` where entry (i, j) is
    the softmax-normalized rectified dot product of node i's representation
    in ``x`` with column j of ``y``, scaled by 1/sqrt(C).
    """
    if x.shape[-2] != y.shape[-2]:
        raise T.ShapeError(f"channel widths differ: {x.shape} vs {y.shape}")
    scale = 1.0 / np.sqrt(x.shape[-2])
    logits = T.bmatmul(T.moveaxis(x, -2, -1), y) * scale
    return T.softmax(T.relu(logits), axis=-1)


def topk_row_mask(values: np.ndarray, tau: int) -> np.ndarray:
    """0/1 mask keeping each row's ``tau`` largest entries.

    Ties break toward the lower column index (stable descending order), which
    keeps the selection deterministic.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if tau >= values.shape[-1]:
        return np.ones_like(values)
    order = np.argsort(-values, axis=-1, kind="stable")
    mask = np.zeros_like(values)
    np.put_along_axis(mask, order[..., :tau], 1.0, axis=-1)
    return mask


def row_normalize(a: Tensor) -> Tensor:
    """Scale each row to sum to one; all-zero rows are left untouched."""
    total = T.expand_axis(T.tsum(a, axis=-1), -1, a.shape[-1])
    guard = Tensor((total.data == 0.0).astype(np.float64))  # all-zero rows divide by 1
    return T.div(a, T.add(total, guard))


@dataclass
class FusionMatrix:
    """Sparsified, row-normalized node-relation matrix plus build metadata."""

    matrix: Tensor
    tau: int
    sources: tuple[str, ...]


class FusionGraphBlock:
    def __init__(self, channels: int, n_nodes: int, diffusion_steps: int,
                 max_neighbors: int, use_prompt: bool, use_dynamic: bool,
                 rng: np.random.Generator, prefix: str = "fusion"):
        if diffusion_steps < 0:
            raise ValueError(f"diffusion steps must be >= 0, got {diffusion_steps}")
        if not (use_prompt or use_dynamic):
            raise ValueError("at least one fusion source (prompt adjacency or "
                             "dynamic matrices) must be enabled")
        self.channels = channels
        self.n_nodes = n_nodes
        self.diffusion_steps = diffusion_steps
        self.max_neighbors = max_neighbors
        self.use_prompt = use_prompt
        self.use_dynamic = use_dynamic

        bound = 1.0 / np.sqrt(channels)
        self.collapse_w = Parameter(f"{prefix}.collapse.weight",
                                    rng.uniform(-bound, bound, size=(channels, channels)))
        self.collapse_b = Parameter(f"{prefix}.collapse.bias", np.zeros(channels))
        if use_dynamic:
            self.pattern_bank = Parameter(
                f"{prefix}.pattern_bank",
                rng.uniform(-PATTERN_INIT_SCALE, PATTERN_INIT_SCALE, size=(channels, n_nodes)))
        self.mix_weights: dict[str, Parameter] = {}
        sources = (["prompt"] if use_prompt else []) + \
                  (["longterm", "self"] if use_dynamic else [])
        for src in sources:
            self.mix_weights[src] = Parameter(f"{prefix}.mix.{src}", np.float64(1.0))
        # k=0 (no mixing) starts random; the k>=1 neighbour-mixing terms start
        # at zero so graph propagation only contributes once it has learned to
        self.diffusion_w = [
            Parameter(f"{prefix}.diffusion{k}.weight",
                      rng.uniform(-bound, bound, size=(channels, channels))
                      if k == 0 else np.zeros((channels, channels)))
            for k in range(diffusion_steps + 1)
        ]

    def parameters(self) -> list[Parameter]:
        params = [self.collapse_w, self.collapse_b]
        if self.use_dynamic:
            params.append(self.pattern_bank)
        params += list(self.mix_weights.values())
        params += self.diffusion_w
        return params

    def collapse_time(self, h: Tensor) -> Tensor:
        """Sum over the time axis, then an affine map on the channel axis."""
        return T.linear(T.tsum(h, axis=-1), self.collapse_w, self.collapse_b, axis=-2)

    def build_fusion_matrix(self, h_f: Tensor, a_prompt: np.ndarray | None) -> FusionMatrix:
        terms = []
        sources = []
        if self.use_prompt:
            if a_prompt is None:
                raise ValueError("this block fuses the adjacency prompt but none was given")
            terms.append((Tensor(a_prompt), self.mix_weights["prompt"]))
            sources.append("prompt")
        if self.use_dynamic:
            terms.append((spatial_similarity(h_f, self.pattern_bank),
                          self.mix_weights["longterm"]))
            terms.append((spatial_similarity(h_f, h_f), self.mix_weights["self"]))
            sources += ["longterm", "self"]

        mixed = T.mul(terms[0][0], terms[0][1])
        for mat, w in terms[1:]:
            mixed = T.add(mixed, T.mul(mat, w))
        rectified = T.relu(mixed)
        mask = topk_row_mask(rectified.data, self.max_neighbors)
        sparse = T.mul(rectified, Tensor(mask))
        return FusionMatrix(matrix=row_normalize(sparse), tau=self.max_neighbors,
                            sources=tuple(sources))

    def diffuse(self, h: Tensor, fusion: FusionMatrix) -> Tensor:
        """Sum of k-step propagations A^k h W_k for k = 0..K; shape preserved."""
        a = fusion.matrix
        if a.ndim > 2:
            a = T.reshape(a, a.shape[:-2] + (1,) + a.shape[-2:])  # broadcast over channels
        out = T.linear(h, self.diffusion_w[0], axis=-3)
        current = h
        for k in range(1, self.diffusion_steps + 1):
            current = T.bmatmul(a, current)
            out = T.add(out, T.linear(current, self.diffusion_w[k], axis=-3))
        return out

    def forward(self, h: Tensor, a_prompt: np.ndarray | None,
                collect: list | None = None, tag: str = "") -> Tensor:
        """Full pass: collapse, build the fusion matrix, diffuse, add residual."""
        fusion = self.build_fusion_matrix(self.collapse_time(h), a_prompt)
        if collect is not None:
            collect.append((tag, fusion.matrix.data))
        return T.add(self.diffuse(h, fusion), h)
