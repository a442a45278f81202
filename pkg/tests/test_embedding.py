import numpy as np
import pytest

from fmpestf.embedding import DataEmbedding
from fmpestf.tensor import ShapeError, Tensor, grad_check, tsum, mul


def make_embedding(d=1, d1=4, d2=4, spd=24, seed=0):
    return DataEmbedding(d, d1, d2, spd, np.random.default_rng(seed))


def time_index(start, t, spd):
    steps = np.arange(start, start + t)
    return steps % spd, (steps // spd) % 7


class TestEmbedShapes:
    def test_output_shape(self):
        emb = make_embedding()
        x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 12)))
        slots, dows = time_index(5, 12, 24)
        out = emb.forward(x, slots, dows)
        assert out.shape == (8, 3, 12)

    def test_batched_output_shape(self):
        emb = make_embedding()
        x = Tensor(np.random.default_rng(2).normal(size=(5, 1, 3, 12)))
        slots = np.stack([time_index(i, 12, 24)[0] for i in range(5)])
        dows = np.stack([time_index(i, 12, 24)[1] for i in range(5)])
        out = emb.forward(x, slots, dows)
        assert out.shape == (5, 8, 3, 12)

    def test_channel_mismatch_rejected(self):
        emb = make_embedding(d=2)
        slots, dows = time_index(0, 12, 24)
        with pytest.raises(ShapeError):
            emb.forward(Tensor(np.zeros((1, 3, 12))), slots, dows)


class TestEmbedValues:
    def test_zero_tables_give_zero_periodic_channels(self):
        emb = make_embedding()
        emb.day_table.data[...] = 0.0
        emb.week_table.data[...] = 0.0
        emb.expand_w.data[...] = 1.0  # each expanded channel repeats the raw channel
        emb.expand_b.data[...] = 0.0
        x = np.random.default_rng(3).normal(size=(1, 3, 12))
        slots, dows = time_index(0, 12, 24)
        out = emb.forward(Tensor(x), slots, dows).data
        for ch in range(4):
            assert np.array_equal(out[ch], x[0])
        assert np.all(out[4:] == 0.0)

    def test_same_time_index_gives_identical_periodic_channels(self):
        emb = make_embedding(spd=24)
        rng = np.random.default_rng(4)
        slots, dows = time_index(24 * 7 + 3, 12, 24)  # same slots/dows one week later
        slots2, dows2 = time_index(3, 12, 24)
        assert np.array_equal(slots, slots2) and np.array_equal(dows, dows2)
        out_a = emb.forward(Tensor(rng.normal(size=(1, 3, 12))), slots, dows).data
        out_b = emb.forward(Tensor(rng.normal(size=(1, 3, 12))), slots2, dows2).data
        assert np.array_equal(out_a[4:], out_b[4:])

    def test_periodic_channels_ignore_raw_values(self):
        emb = make_embedding()
        slots, dows = time_index(7, 12, 24)
        a = emb.forward(Tensor(np.zeros((1, 3, 12))), slots, dows).data
        b = emb.forward(Tensor(np.full((1, 3, 12), 1e3)), slots, dows).data
        assert np.array_equal(a[4:], b[4:])
        assert not np.array_equal(a[:4], b[:4])

    def test_first_block_is_linear_superposition(self):
        emb = make_embedding()
        emb.expand_b.data[...] = 0.0
        slots, dows = time_index(2, 12, 24)
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(1, 3, 12)), rng.normal(size=(1, 3, 12))

        def first_block(x):
            return emb.forward(Tensor(x), slots, dows).data[:4]

        residual = (first_block(a + b) - first_block(a) - first_block(b)
                    + first_block(np.zeros((1, 3, 12))))
        assert np.max(np.abs(residual)) < 1e-12

    def test_periodic_broadcast_identical_across_nodes(self):
        emb = make_embedding()
        slots, dows = time_index(11, 12, 24)
        out = emb.forward(Tensor(np.zeros((1, 5, 12))), slots, dows).data
        for node in range(1, 5):
            assert np.array_equal(out[4:, node], out[4:, 0])


class TestEmbedErrors:
    def test_slot_out_of_range(self):
        emb = make_embedding(spd=24)
        slots = np.full(12, 24)
        dows = np.zeros(12, dtype=int)
        with pytest.raises(IndexError):
            emb.forward(Tensor(np.zeros((1, 3, 12))), slots, dows)

    def test_dow_out_of_range(self):
        emb = make_embedding()
        slots = np.zeros(12, dtype=int)
        dows = np.full(12, 7)
        with pytest.raises(IndexError):
            emb.forward(Tensor(np.zeros((1, 3, 12))), slots, dows)

    def test_time_index_length_mismatch(self):
        emb = make_embedding()
        slots, dows = time_index(0, 10, 24)
        with pytest.raises(ShapeError):
            emb.forward(Tensor(np.zeros((1, 3, 12))), slots, dows)


def test_embedding_gradients_match_finite_differences():
    emb = make_embedding(spd=8, seed=9)
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(1, 2, 6)))
    slots = np.arange(6) % 8
    dows = (np.arange(6) // 8) % 7
    probe = Tensor(rng.normal(size=(8, 2, 6)))

    def f():
        return tsum(mul(emb.forward(x, slots, dows), probe))

    report = grad_check(f, emb.parameters())
    assert report.max_rel_err < 1e-6
