"""Full forecaster assembly: configuration, decoder, checkpoints, ablations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .data import Normalizer, SampleWindow
from .embedding import DataEmbedding
from .encoder import InteractiveEncoder
from .tensor import NumericsError, Parameter, Tensor

CHECKPOINT_FORMAT = "FMPESTF-CKPT-v1"

ABLATIONS = {
    "no-att": {"use_attention": False},
    "no-adj": {"use_prompt": False},
    "no-dyn": {"use_dynamic": False},
}


class ConfigError(ValueError):
    """Invalid configuration or incompatible artifacts."""


@dataclass
class ModelConfig:
    n_nodes: int
    in_channels: int = 1
    window: int = 12
    horizon: int = 12
    expand_channels: int = 32
    embed_channels: int = 32
    slots_per_day: int = 288
    kernel_sizes: tuple[int, int] = (7, 1)
    diffusion_steps: int = 2
    max_neighbors: int = 10
    tree_depth: int = 2
    use_attention: bool = True
    use_prompt: bool = True
    use_dynamic: bool = True
    seed: int = 0

    @property
    def channels(self) -> int:
        return self.expand_channels + self.embed_channels

    def validate(self) -> "ModelConfig":
        positive = ["n_nodes", "in_channels", "window", "horizon", "expand_channels",
                    "embed_channels", "slots_per_day", "max_neighbors"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.diffusion_steps < 0:
            raise ConfigError(f"diffusion_steps must be >= 0, got {self.diffusion_steps}")
        if self.tree_depth < 0:
            raise ConfigError(f"tree_depth must be >= 0, got {self.tree_depth}")
        ks = tuple(self.kernel_sizes)
        if len(ks) != 2 or any(k < 1 for k in ks):
            raise ConfigError(f"kernel_sizes must be two integers >= 1, got {self.kernel_sizes}")
        self.kernel_sizes = ks
        if self.window % (2 ** self.tree_depth) != 0:
            raise ConfigError(f"window {self.window} must be divisible by "
                              f"2^tree_depth = {2 ** self.tree_depth}")
        if not (self.use_prompt or self.use_dynamic):
            raise ConfigError("at least one of use_prompt/use_dynamic must stay enabled")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "kernel_sizes" in d:
            d["kernel_sizes"] = tuple(d["kernel_sizes"])
        return cls(**d)


def apply_ablation(cfg: ModelConfig, name: str | None) -> ModelConfig:
    """Structural variant of a config: the named mechanism is removed, not zeroed."""
    if name is None:
        return cfg
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}, expected one of {sorted(ABLATIONS)}")
    return replace(cfg, **ABLATIONS[name])


class FmpestfModel:
    """Embedding, interactive encoder, gated decoder and per-node regression head."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        channels = cfg.channels
        self.embedding = DataEmbedding(cfg.in_channels, cfg.expand_channels,
                                       cfg.embed_channels, cfg.slots_per_day, rng)
        self.encoder = InteractiveEncoder(channels, cfg.n_nodes, cfg.kernel_sizes,
                                          cfg.diffusion_steps, cfg.max_neighbors,
                                          cfg.use_attention, cfg.use_prompt,
                                          cfg.use_dynamic, cfg.tree_depth, rng)
        bound = 1.0 / np.sqrt(channels)
        self.gate_value_w = Parameter("decoder.glu.value.weight",
                                      rng.uniform(-bound, bound, size=(channels, channels)))
        self.gate_value_b = Parameter("decoder.glu.value.bias", np.zeros(channels))
        self.gate_w = Parameter("decoder.glu.gate.weight",
                                rng.uniform(-bound, bound, size=(channels, channels)))
        self.gate_b = Parameter("decoder.glu.gate.bias", np.zeros(channels))
        features = channels * cfg.window
        bound = 1.0 / np.sqrt(features)
        self.head_w = Parameter("decoder.head.weight",
                                rng.uniform(-bound, bound, size=(cfg.horizon, features)))
        self.head_b = Parameter("decoder.head.bias", np.zeros(cfg.horizon))
        # raw-unit affine for the output; identity until a normalizer is attached
        self.normalizer = Normalizer(mean=np.zeros(cfg.in_channels),
                                     std=np.ones(cfg.in_channels))

        self._params = (self.embedding.parameters() + self.encoder.parameters() +
                        [self.gate_value_w, self.gate_value_b, self.gate_w, self.gate_b,
                         self.head_w, self.head_b])
        by_name = {}
        for p in self._params:
            if p.name in by_name:
                raise ConfigError(f"duplicate parameter id {p.name!r}")
            by_name[p.name] = p
        self._by_name = by_name

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def parameter(self, name: str) -> Parameter:
        return self._by_name[name]

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    def set_normalizer(self, normalizer: Normalizer) -> None:
        if normalizer.mean.shape != (self.cfg.in_channels,):
            raise ConfigError(f"normalizer covers {normalizer.mean.shape[0]} channels, "
                              f"model expects {self.cfg.in_channels}")
        self.normalizer = normalizer

    def glu(self, h: Tensor) -> Tensor:
        value = T.linear(h, self.gate_value_w, self.gate_value_b, axis=-3)
        gate = T.sigmoid(T.linear(h, self.gate_w, self.gate_b, axis=-3))
        return T.mul(value, gate)

    def regress(self, h: Tensor) -> Tensor:
        """Per-node head: flatten (channels, time) and map to all horizons at once."""
        cfg = self.cfg
        hm = T.moveaxis(h, -3, -2)                                   # [..., N, C, T]
        flat = T.reshape(hm, hm.shape[:-2] + (cfg.channels * cfg.window,))
        return T.linear(flat, self.head_w, self.head_b, axis=-1)

    def forward(self, histories: np.ndarray, slots: np.ndarray, dows: np.ndarray,
                a_prompt: np.ndarray | None, collect: list | None = None) -> Tensor:
        """Normalized histories ``[..., D, N, T]`` to raw-unit forecasts ``[..., N, T']``."""
        cfg = self.cfg
        histories = np.asarray(histories, dtype=np.float64)
        expected_tail = (cfg.in_channels, cfg.n_nodes, cfg.window)
        if histories.shape[-3:] != expected_tail:
            raise T.ShapeError(f"history shape {histories.shape} does not end in "
                               f"{expected_tail}")
        if cfg.use_prompt:
            if a_prompt is None:
                raise ConfigError("model fuses the adjacency prompt; pass the adjacency matrix")
            a_prompt = np.asarray(a_prompt, dtype=np.float64)
            if a_prompt.shape != (cfg.n_nodes, cfg.n_nodes):
                raise T.ShapeError(f"adjacency shape {a_prompt.shape} != "
                                   f"({cfg.n_nodes}, {cfg.n_nodes})")

        h = self.embedding.forward(Tensor(histories), slots, dows)
        _assert_finite(h, "embedding")
        encoded = self.encoder.forward(h, a_prompt, collect)
        _assert_finite(encoded, "encoder")
        gated = self.glu(encoded)
        _assert_finite(gated, "decoder gate")
        out = self.regress(gated)
        raw = out * float(self.normalizer.std[0]) + float(self.normalizer.mean[0])
        _assert_finite(raw, "output")
        return raw


def _assert_finite(x: Tensor, stage: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericsError(f"non-finite values after the {stage} stage")


def model_forward(model: FmpestfModel, window: SampleWindow,
                  a_prompt: np.ndarray | None) -> np.ndarray:
    """Forecast one (already normalized) window; returns ``[N, T']`` raw units."""
    out = model.forward(window.history, window.slots, window.dows, a_prompt)
    return out.data


def build_model(cfg: ModelConfig) -> FmpestfModel:
    return FmpestfModel(cfg)


def build_variant(cfg: ModelConfig, ablation: str | None = None) -> FmpestfModel:
    """Model with the named mechanism structurally removed."""
    return FmpestfModel(apply_ablation(cfg, ablation))


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count implied by a config.

    embedding: d1*D + d1 + slots*d2 + 7*d2
    per temporal block: C^2*k1 + C + C^2*k2 + C (+ 3*C^2 with attention)
    per spatial block: C^2 + C (collapse) + C*N (pattern bank, dynamic only)
                       + #mix sources + (K+1)*C^2
    tree: (2^depth - 1) components, 4 temporal + 1 spatial each
    decoder: 2*(C^2 + C) for the gate pair + T'*(C*T) + T' for the head
    """
    c = cfg.channels
    k1, k2 = cfg.kernel_sizes
    embed = (cfg.expand_channels * cfg.in_channels + cfg.expand_channels
             + cfg.slots_per_day * cfg.embed_channels + 7 * cfg.embed_channels)
    att_conv = c * c * k1 + c + c * c * k2 + c
    if cfg.use_attention:
        att_conv += 3 * c * c
    mix_sources = (1 if cfg.use_prompt else 0) + (2 if cfg.use_dynamic else 0)
    fusion = (c * c + c
              + (c * cfg.n_nodes if cfg.use_dynamic else 0)
              + mix_sources
              + (cfg.diffusion_steps + 1) * c * c)
    n_comps = 2 ** cfg.tree_depth - 1
    decoder = 2 * (c * c + c) + cfg.horizon * (c * cfg.window) + cfg.horizon
    return embed + n_comps * (4 * att_conv + fusion) + decoder


def save_checkpoint(path, model: FmpestfModel) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "normalizer": {
            "mean": [float(v) for v in model.normalizer.mean],
            "std": [float(v) for v in model.normalizer.std],
        },
        "params": {
            p.name: {"shape": list(p.shape), "values": [float(v) for v in p.data.reshape(-1)]}
            for p in model.parameters()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> FmpestfModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not a readable checkpoint ({err})") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: checkpoint header {payload.get('format')!r} "
                          f"is not {CHECKPOINT_FORMAT!r}")
    cfg = ModelConfig.from_dict(payload["config"])
    model = FmpestfModel(cfg)
    model.set_normalizer(Normalizer(
        mean=np.asarray(payload["normalizer"]["mean"], dtype=np.float64),
        std=np.asarray(payload["normalizer"]["std"], dtype=np.float64)))
    saved = payload["params"]
    missing = sorted(set(p.name for p in model.parameters()) - set(saved))
    extra = sorted(set(saved) - set(p.name for p in model.parameters()))
    if missing or extra:
        raise ConfigError(f"{path}: parameter set mismatch, missing {missing}, "
                          f"unexpected {extra}")
    for p in model.parameters():
        entry = saved[p.name]
        if tuple(entry["shape"]) != p.shape:
            raise ConfigError(f"{path}: parameter {p.name!r} has shape {entry['shape']}, "
                              f"model expects {list(p.shape)}")
        p.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape)
    return model
