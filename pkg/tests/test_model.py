import json

import numpy as np
import pytest

from fmpestf import tensor as T
from fmpestf.data import Normalizer, make_windows, split_chronological, synth_series
from fmpestf.model import (
    ConfigError,
    FmpestfModel,
    ModelConfig,
    apply_ablation,
    build_variant,
    expected_parameter_count,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from fmpestf.tensor import Tensor, grad_check


def liven_zero_weights(params, seed):
    # value projections and k>=1 diffusion weights initialize to zero; fill
    # them so gradient checks exercise every pathway
    rng = np.random.default_rng(seed)
    for p in params:
        if p.ndim >= 2 and not p.data.any():
            p.data[...] = rng.normal(scale=0.3, size=p.shape)


def toy_config(**overrides):
    base = dict(n_nodes=4, in_channels=1, window=8, horizon=4, expand_channels=2,
                embed_channels=2, slots_per_day=8, kernel_sizes=(3, 1),
                diffusion_steps=1, max_neighbors=3, tree_depth=1, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def ring_adjacency(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return a


def toy_inputs(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    hist = rng.normal(size=lead + (cfg.in_channels, cfg.n_nodes, cfg.window))
    starts = rng.integers(0, cfg.slots_per_day * 7, size=lead or (1,))
    steps = starts[..., None] + np.arange(cfg.window)
    slots = steps % cfg.slots_per_day
    dows = (steps // cfg.slots_per_day) % 7
    if batch is None:
        slots, dows = slots[0], dows[0]
    return hist, slots, dows


class TestConfig:
    def test_defaults_validate(self):
        ModelConfig(n_nodes=10).validate()

    def test_window_divisibility(self):
        with pytest.raises(ConfigError):
            toy_config(window=6, tree_depth=2).validate()

    def test_flag_combination(self):
        with pytest.raises(ConfigError):
            toy_config(use_prompt=False, use_dynamic=False).validate()

    def test_round_trip_dict(self):
        cfg = toy_config()
        again = ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ConfigError):
            apply_ablation(toy_config(), "no-gpu")

    def test_ablations_toggle_single_flags(self):
        cfg = toy_config()
        assert not apply_ablation(cfg, "no-att").use_attention
        assert not apply_ablation(cfg, "no-adj").use_prompt
        assert not apply_ablation(cfg, "no-dyn").use_dynamic
        assert apply_ablation(cfg, None) == cfg


class TestGlu:
    def test_saturated_gate_passes_value_branch(self):
        model = FmpestfModel(toy_config())
        model.gate_w.data[...] = 0.0
        model.gate_b.data[...] = 50.0    # sigmoid ~ 1
        h = Tensor(np.random.default_rng(1).normal(size=(4, 4, 8)))
        out = model.glu(h).data
        value = T.linear(h, model.gate_value_w, model.gate_value_b, axis=-3).data
        assert np.max(np.abs(out - value)) < 1e-12

    def test_closed_gate_blocks_everything(self):
        model = FmpestfModel(toy_config())
        model.gate_w.data[...] = 0.0
        model.gate_b.data[...] = -50.0   # sigmoid ~ 0
        h = Tensor(np.random.default_rng(2).normal(size=(4, 4, 8)))
        assert np.max(np.abs(model.glu(h).data)) < 1e-12

    def test_glu_gradients(self):
        model = FmpestfModel(toy_config(seed=3))
        rng = np.random.default_rng(4)
        h = Tensor(rng.normal(size=(4, 4, 8)))
        probe = Tensor(rng.normal(size=(4, 4, 8)))
        params = [model.gate_value_w, model.gate_value_b, model.gate_w, model.gate_b]

        def f():
            return T.tsum(T.mul(model.glu(h), probe))

        assert grad_check(f, params).max_rel_err < 1e-6


class TestRegress:
    def test_zero_weights_give_bias_broadcast(self):
        model = FmpestfModel(toy_config())
        model.head_w.data[...] = 0.0
        model.head_b.data[...] = np.arange(4.0)
        h = Tensor(np.random.default_rng(5).normal(size=(4, 4, 8)))
        out = model.regress(h).data
        assert out.shape == (4, 4)
        assert np.array_equal(out, np.tile(np.arange(4.0), (4, 1)))

    def test_output_shape_default_horizon(self):
        cfg = ModelConfig(n_nodes=5, expand_channels=2, embed_channels=2,
                          slots_per_day=8, tree_depth=1, kernel_sizes=(3, 1))
        model = FmpestfModel(cfg)
        h = Tensor(np.zeros((4, 5, 12)))
        assert model.regress(h).shape == (5, 12)

    def test_head_is_per_node(self):
        model = FmpestfModel(toy_config(seed=6))
        rng = np.random.default_rng(7)
        h = rng.normal(size=(4, 4, 8))
        base = model.regress(Tensor(h)).data
        bumped = h.copy()
        bumped[:, 2, :] += 1.0
        out = model.regress(Tensor(bumped)).data
        others = [0, 1, 3]
        assert np.array_equal(out[others], base[others])
        assert not np.array_equal(out[2], base[2])


class TestForward:
    def test_deterministic(self):
        cfg = toy_config(seed=8)
        model = FmpestfModel(cfg)
        hist, slots, dows = toy_inputs(cfg, seed=9)
        adj = ring_adjacency(4)
        a = model.forward(hist, slots, dows, adj).data
        b = model.forward(hist, slots, dows, adj).data
        assert np.array_equal(a, b)

    def test_synthetic_window_shape_and_finiteness(self):
        series, graph = synth_series(4, 3, interval_min=180, seed=10)
        windows = make_windows(series, 8, 4, slots_per_day=8)
        split = split_chronological(windows)
        cfg = toy_config(seed=11)
        model = FmpestfModel(cfg)
        model.set_normalizer(split.normalizer)
        out = model_forward(model, split.test[0], graph.adjacency)
        assert out.shape == (4, 4)
        assert np.all(np.isfinite(out))

    def test_missing_adjacency_rejected_when_prompt_enabled(self):
        cfg = toy_config()
        model = FmpestfModel(cfg)
        hist, slots, dows = toy_inputs(cfg)
        with pytest.raises(ConfigError):
            model.forward(hist, slots, dows, None)

    def test_no_adj_variant_runs_without_adjacency(self):
        cfg = apply_ablation(toy_config(seed=12), "no-adj")
        model = FmpestfModel(cfg)
        hist, slots, dows = toy_inputs(cfg, seed=13)
        out = model.forward(hist, slots, dows, None)
        assert out.shape == (4, 4)

    def test_batched_matches_per_sample(self):
        cfg = toy_config(seed=14)
        model = FmpestfModel(cfg)
        hist, slots, dows = toy_inputs(cfg, seed=15, batch=3)
        adj = ring_adjacency(4)
        batched = model.forward(hist, slots, dows, adj).data
        for i in range(3):
            single = model.forward(hist[i], slots[i], dows[i], adj).data
            assert np.max(np.abs(batched[i] - single)) < 1e-12

    def test_normalizer_affine_relation(self):
        cfg = toy_config(seed=16)
        model = FmpestfModel(cfg)
        hist, slots, dows = toy_inputs(cfg, seed=17)
        adj = ring_adjacency(4)
        base = model.forward(hist, slots, dows, adj).data
        model.set_normalizer(Normalizer(mean=np.array([7.0]), std=np.array([2.5])))
        scaled = model.forward(hist, slots, dows, adj).data
        assert np.array_equal(scaled, base * 2.5 + 7.0)

    def test_full_model_gradient_check(self):
        cfg = toy_config(seed=18)
        model = FmpestfModel(cfg)
        liven_zero_weights(model.parameters(), seed=180)
        hist, slots, dows = toy_inputs(cfg, seed=19)
        adj = ring_adjacency(4)
        rng = np.random.default_rng(20)
        probe = Tensor(rng.normal(size=(4, 4)))

        def f():
            return T.tsum(T.mul(model.forward(hist, slots, dows, adj), probe))

        report = grad_check(f, model.parameters())
        assert report.max_rel_err < 1e-4, str(report)


class TestVariants:
    def test_no_att_has_strictly_fewer_parameters(self):
        full = build_variant(toy_config())
        ablated = build_variant(toy_config(), "no-att")
        assert ablated.parameter_count() < full.parameter_count()
        assert not any("attention" in p.name for p in ablated.parameters())

    def test_no_dyn_has_no_pattern_bank(self):
        ablated = build_variant(toy_config(), "no-dyn")
        assert not any("pattern_bank" in p.name for p in ablated.parameters())

    def test_full_flagset_matches_default_registry(self):
        default = FmpestfModel(toy_config())
        explicit = build_variant(toy_config(use_attention=True, use_prompt=True,
                                            use_dynamic=True))
        assert [p.name for p in default.parameters()] == \
               [p.name for p in explicit.parameters()]

    @pytest.mark.parametrize("ablation", [None, "no-att", "no-adj", "no-dyn"])
    def test_parameter_count_formula(self, ablation):
        cfg = apply_ablation(toy_config(), ablation)
        model = FmpestfModel(cfg)
        assert model.parameter_count() == expected_parameter_count(cfg)

    def test_parameter_count_formula_default_scale(self):
        cfg = ModelConfig(n_nodes=16)
        assert FmpestfModel(cfg).parameter_count() == expected_parameter_count(cfg)

    def test_parameter_names_unique(self):
        model = FmpestfModel(toy_config(tree_depth=2))
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, tmp_path):
        cfg = toy_config(seed=21)
        model = FmpestfModel(cfg)
        model.set_normalizer(Normalizer(mean=np.array([3.0]), std=np.array([1.5])))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        again = load_checkpoint(path)
        assert again.cfg == cfg
        for p, q in zip(model.parameters(), again.parameters()):
            assert p.name == q.name
            assert np.array_equal(p.data, q.data)
        hist, slots, dows = toy_inputs(cfg, seed=22)
        adj = ring_adjacency(4)
        assert np.array_equal(model.forward(hist, slots, dows, adj).data,
                              again.forward(hist, slots, dows, adj).data)

    def test_save_is_deterministic(self, tmp_path):
        model = FmpestfModel(toy_config(seed=23))
        save_checkpoint(tmp_path / "a.ckpt", model)
        save_checkpoint(tmp_path / "b.ckpt", model)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_tampered_header_rejected(self, tmp_path):
        model = FmpestfModel(toy_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        payload = json.loads(path.read_text())
        payload["format"] = "FMPESTF-CKPT-v0"
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError) as exc:
            load_checkpoint(path)
        assert "FMPESTF-CKPT-v1" in str(exc.value)

    def test_missing_parameter_rejected(self, tmp_path):
        model = FmpestfModel(toy_config())
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        payload = json.loads(path.read_text())
        removed = sorted(payload["params"])[0]
        del payload["params"][removed]
        path.write_text(json.dumps(payload))
        with pytest.raises(ConfigError) as exc:
            load_checkpoint(path)
        assert removed in str(exc.value)

    def test_non_json_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_text("definitely not json")
        with pytest.raises(ConfigError):
            load_checkpoint(path)


class TestPermutationEquivariance:
    def test_full_model_rows_permute(self):
        cfg = toy_config(seed=24)
        model = FmpestfModel(cfg)
        hist, slots, dows = toy_inputs(cfg, seed=25)
        rng = np.random.default_rng(26)
        adj = ring_adjacency(4) + 0.2 * rng.random((4, 4))
        adj = np.maximum(adj, adj.T)
        np.fill_diagonal(adj, 0.0)
        base = model.forward(hist, slots, dows, adj).data

        perm = np.array([2, 0, 3, 1])
        for p in model.parameters():
            if p.name.endswith("pattern_bank"):
                p.data[...] = p.data[:, perm]
        out = model.forward(hist[:, perm, :], slots, dows,
                            adj[np.ix_(perm, perm)]).data
        assert np.max(np.abs(out - base[perm, :])) < 1e-12
