"""Parameter store, linear/LN/FFN/attention/GRU blocks, dropout, pooling."""

import numpy as np
import pytest

from gret import autodiff as ad
from gret.autodiff import (ContractError, Tensor, backward,
                           finite_difference_check, record)
from gret.nn import (Dropout, FeedForward, GRUCell, LayerNorm, Linear,
                     MultiHeadAttention, ParamStore, causal_mask, masked_mean)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestParamStore:
    def test_draw_depends_only_on_seed_and_name(self):
        a = ParamStore(3)
        b = ParamStore(3)
        # register in different orders; draws must still agree bitwise
        a.init_param("x.w", (4, 5))
        a.init_param("y.w", (2, 3))
        b.init_param("y.w", (2, 3))
        b.init_param("x.w", (4, 5))
        assert np.array_equal(a["x.w"].data, b["x.w"].data)
        assert np.array_equal(a["y.w"].data, b["y.w"].data)

    def test_different_seeds_differ(self):
        a = ParamStore(0).init_param("w", (4, 4))
        b = ParamStore(1).init_param("w", (4, 4))
        assert not np.array_equal(a.data, b.data)

    def test_duplicate_name_rejected(self):
        store = ParamStore(0)
        store.init_param("w", (2, 2))
        with pytest.raises(ContractError, match="duplicate"):
            store.init_param("w", (2, 2))

    def test_rank1_starts_at_zero(self):
        store = ParamStore(0)
        assert not store.init_param("b", (7,)).data.any()

    def test_init_modes(self):
        store = ParamStore(0)
        assert (store.init_param("scale", (5,), init="ones").data == 1.0).all()
        assert not store.init_param("shift", (5,), init="zeros").data.any()

    def test_ensure_checks_shape(self):
        store = ParamStore(0)
        store.ensure("w", (2, 3))
        with pytest.raises(ad.ShapeError):
            store.ensure("w", (3, 2))

    def test_alias_collapses_in_count(self):
        store = ParamStore(0)
        store.init_param("a", (4, 4))
        store.alias("b", "a")
        assert store["a"] is store["b"]
        assert store.size() == 16
        assert list(store.unique_tensors()) == ["a"]

    def test_zero_grads(self):
        store = ParamStore(0)
        w = store.init_param("w", (2, 2))
        w.grad = np.ones((2, 2))
        store.zero_grads()
        assert w.grad is None

    def test_uniform_bound(self):
        w = ParamStore(0).init_param("w", (30, 50)).data
        bound = np.sqrt(6.0 / 80)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound  # actually fills the range


class TestLinear:
    def test_affine(self):
        store = ParamStore(0)
        lin = Linear(store, "l", 3, 2)
        x = rand((5, 3))
        want = x @ lin.w.data + lin.b.data
        assert np.allclose(lin(Tensor(x)).data, want)

    def test_bias_starts_zero(self):
        lin = Linear(ParamStore(0), "l", 3, 2)
        assert not lin.b.data.any()

    def test_no_bias(self):
        lin = Linear(ParamStore(0), "l", 3, 2, bias=False)
        assert lin.b is None

    def test_vector_input_squeezed(self):
        lin = Linear(ParamStore(0), "l", 3, 2)
        y = lin(Tensor(rand(3)))
        assert y.shape == (2,)


class TestLayerNorm:
    def test_normalizes_rows(self):
        ln = LayerNorm(ParamStore(0), "ln", 16)
        y = ln(Tensor(rand((4, 16)) * 5 + 3)).data
        assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-9)
        assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_scale_shift_init(self):
        store = ParamStore(0)
        LayerNorm(store, "ln", 8)
        assert (store["ln.scale"].data == 1.0).all()
        assert not store["ln.shift"].data.any()

    def test_gradient(self):
        store = ParamStore(0)
        ln = LayerNorm(store, "ln", 6)
        store["ln.scale"].data[:] = rand(6, 1)
        store["ln.shift"].data[:] = rand(6, 2)
        x = Tensor(rand((3, 6), 3), requires_grad=True)
        assert finite_difference_check(lambda t: (ln(t) * ln(t)).sum(), x) <= 1e-4


class TestFeedForward:
    def test_matches_manual(self):
        store = ParamStore(0)
        ffn = FeedForward(store, "f", 4, 8, 3)
        x = rand((5, 4))
        hidden = np.maximum(x @ store["f.inner.w"].data + store["f.inner.b"].data, 0.0)
        want = hidden @ store["f.outer.w"].data + store["f.outer.b"].data
        assert np.allclose(ffn(Tensor(x)).data, want)


class TestCausalMask:
    def test_lower_triangular(self):
        m = causal_mask(4)
        assert m.dtype == bool
        assert m[2, 2] and m[2, 0] and not m[2, 3]
        assert np.array_equal(m, np.tril(np.ones((4, 4), dtype=bool)))


class TestAttention:
    def _mha(self, d=8, heads=2, seed=0):
        return MultiHeadAttention(ParamStore(seed), "attn", d, heads)

    def test_heads_must_divide(self):
        with pytest.raises(ContractError, match="divide"):
            MultiHeadAttention(ParamStore(0), "attn", 8, 3)

    def test_output_shape(self):
        mha = self._mha()
        y = mha(Tensor(rand((2, 5, 8))), Tensor(rand((2, 7, 8), 1)),
                Tensor(rand((2, 7, 8), 2)))
        assert y.shape == (2, 5, 8)

    def test_padded_keys_ignored_bitwise(self):
        """Changing content at masked key positions cannot move any output bit."""
        mha = self._mha()
        km = np.array([[True, True, False, False], [True, True, True, False]])
        q = rand((2, 3, 8))
        kv = rand((2, 4, 8), 1)
        kv2 = kv.copy()
        kv2[~km] = 1e6
        a = mha(Tensor(q), Tensor(kv), Tensor(kv), key_mask=km).data
        b = mha(Tensor(q), Tensor(kv2), Tensor(kv2), key_mask=km).data
        assert np.array_equal(a, b)

    def test_causal_blocks_future_bitwise(self):
        mha = self._mha()
        x = rand((6, 8))
        x2 = x.copy()
        x2[4:] = 99.0  # only positions after 3 change
        a = mha(Tensor(x), Tensor(x), Tensor(x), causal=True).data
        b = mha(Tensor(x2), Tensor(x2), Tensor(x2), causal=True).data
        assert np.array_equal(a[:4], b[:4])
        assert not np.allclose(a[4:], b[4:])

    def test_causal_requires_square(self):
        mha = self._mha()
        with pytest.raises(ContractError, match="causal"):
            mha(Tensor(rand((3, 8))), Tensor(rand((5, 8))), Tensor(rand((5, 8))),
                causal=True)

    def test_batched_equals_loop(self):
        mha = self._mha()
        q, kv = rand((3, 4, 8)), rand((3, 6, 8), 1)
        km = np.ones((3, 6), dtype=bool)
        km[1, 4:] = False
        batched = mha(Tensor(q), Tensor(kv), Tensor(kv), key_mask=km).data
        for i in range(3):
            row = mha(Tensor(q[i]), Tensor(kv[i]), Tensor(kv[i]), key_mask=km[i]).data
            assert np.allclose(batched[i], row, atol=1e-12)

    def test_uniform_when_queries_zero(self):
        """Zero queries give uniform attention: output = mean of value rows."""
        store = ParamStore(0)
        mha = MultiHeadAttention(store, "attn", 8, 2)
        store["attn.q.w"].data[:] = 0.0
        v = rand((5, 8))
        got = mha(Tensor(np.zeros((2, 8))), Tensor(v), Tensor(v)).data
        vh = v @ store["attn.v.w"].data + store["attn.v.b"].data
        want = np.broadcast_to(vh.mean(axis=0), (2, 8)) @ store["attn.out.w"].data \
            + store["attn.out.b"].data
        assert np.allclose(got, want)

    def test_gradient(self):
        mha = self._mha(d=4, heads=2, seed=5)

        def f(x):
            y = mha(x, x, x, causal=True)
            return (y * y).sum()

        x = Tensor(rand((3, 4), 7), requires_grad=True)
        assert finite_difference_check(f, x) <= 1e-4


class TestGRUCell:
    def test_zero_params_halve_state(self):
        store = ParamStore(0)
        cell = GRUCell(store, "gru", 4)
        for name in store.names():
            store[name].data[:] = 0.0
        x, h = rand((3, 4)), rand((3, 4), 1)
        assert np.allclose(cell(Tensor(x), Tensor(h)).data, 0.5 * h, atol=1e-15)

    def test_matches_manual(self):
        store = ParamStore(2)
        cell = GRUCell(store, "gru", 3)
        x, h = rand((2, 3)), rand((2, 3), 1)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        xs = np.concatenate([x, h], axis=-1)
        z = sig(xs @ store["gru.update.w"].data + store["gru.update.b"].data)
        r = sig(xs @ store["gru.reset.w"].data + store["gru.reset.b"].data)
        c = np.tanh(np.concatenate([x, r * h], axis=-1) @ store["gru.cand.w"].data
                    + store["gru.cand.b"].data)
        want = z * h + (1.0 - z) * c
        assert np.allclose(cell(Tensor(x), Tensor(h)).data, want)

    def test_gradient(self):
        store = ParamStore(4)
        cell = GRUCell(store, "gru", 3)
        x = Tensor(rand((2, 3), 8))
        h = Tensor(rand((2, 3), 9), requires_grad=True)

        def f(t):
            y = cell(x, t)
            return (y * y).sum()

        assert finite_difference_check(f, h) <= 1e-4


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(rand((4, 4)))
        assert Dropout(0.0)(x) is x

    def test_no_rng_is_identity(self):
        x = Tensor(rand((4, 4)))
        assert Dropout(0.5, None)(x) is x

    def test_bad_rate(self):
        with pytest.raises(ContractError):
            Dropout(1.0)

    def test_masks_and_rescales(self):
        drop = Dropout(0.5, np.random.default_rng(0))
        x = np.ones((100, 100))
        y = drop(Tensor(x)).data
        kept = y != 0.0
        assert np.allclose(y[kept], 2.0)  # inverted scaling 1/(1-rate)
        assert abs(kept.mean() - 0.5) < 0.05


class TestMaskedMean:
    def test_hand_example(self):
        h = np.array([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]])
        mask = np.array([[True, True, False]])
        got = masked_mean(Tensor(h), mask).data
        assert np.allclose(got, [[2.0, 3.0]])

    def test_bitwise_pad_invariance(self):
        h = rand((2, 5, 3))
        mask = np.array([[True] * 3 + [False] * 2, [True] * 5])
        h2 = h.copy()
        h2[0, 3:] = -999.0
        assert np.array_equal(masked_mean(Tensor(h), mask).data,
                              masked_mean(Tensor(h2), mask).data)

    def test_fully_masked_raises(self):
        with pytest.raises(ContractError, match="masked"):
            masked_mean(Tensor(rand((1, 3, 2))), np.zeros((1, 3), dtype=bool))

    def test_gradient_flows_only_to_unmasked(self):
        x = Tensor(rand((4, 3)), requires_grad=True)
        mask = np.array([True, True, False, True])
        with record():
            backward(masked_mean(x, mask, axis=0).sum())
        assert not x.grad[2].any()
        assert np.allclose(x.grad[0], 1.0 / 3)
