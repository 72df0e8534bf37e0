import math

import numpy as np
import pytest

from csanet import tensor as T
from csanet.attention import (AttentionAggregator, CSAModule, FeatureMap, ISAModule,
                              aggregate_attention, csa_forward, isa_forward)
from csanet.errors import ConfigurationError, DimensionError
from csanet.nn import init_params
from csanet.tensor import Tensor, finite_diff_grad, rel_error

from .oracles import loop_attention


def fmap(a):
    return FeatureMap(Tensor(a))


def csa_module(C, heads, seed):
    m = CSAModule(C, heads)
    init_params(seed, m)
    return m


def isa_module(C, heads, seed):
    m = ISAModule(C, heads)
    init_params(seed, m)
    return m


SHAPES = [(2, 2, 4, 1), (2, 2, 4, 2), (3, 3, 8, 1), (3, 3, 8, 4)]


@pytest.mark.parametrize("h,w,C,k", SHAPES)
def test_csa_matches_loop_oracle(h, w, C, k):
    rng = np.random.default_rng(h * 10 + C + k)
    fc, fn = rng.normal(size=(h, w, C)), rng.normal(size=(h, w, C))
    m = csa_module(C, k, seed=k)
    out = csa_forward(fmap(fc), fmap(fn), m).values.data
    ref = loop_attention(fn, fc, m.w_theta.data, m.w_phi.data, m.w_psi.data, m.w_g.data)
    assert np.max(np.abs(out - ref)) <= 1e-12


@pytest.mark.parametrize("h,w,C,k", SHAPES)
def test_isa_matches_loop_oracle(h, w, C, k):
    rng = np.random.default_rng(h * 7 + C + k)
    fc = rng.normal(size=(h, w, C))
    m = isa_module(C, k, seed=k + 3)
    out = isa_forward(fmap(fc), m).values.data
    ref = loop_attention(fc, fc, m.w_alpha.data, m.w_beta.data, m.w_gamma.data, m.w_epsilon.data)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_scaled_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    fc, fn = rng.normal(size=(2, 2, 8)), rng.normal(size=(2, 2, 8))
    m = CSAModule(8, 2, scaled=True)
    init_params(1, m)
    out = csa_forward(fmap(fc), fmap(fn), m).values.data
    ref = loop_attention(fn, fc, m.w_theta.data, m.w_phi.data, m.w_psi.data, m.w_g.data, scale=1.0 / math.sqrt(2.0))
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_csa_single_token_is_value_path():
    rng = np.random.default_rng(1)
    fc, fn = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))
    m = csa_module(8, 2, 0)
    vals = np.concatenate([fc.reshape(1, 8) @ m.w_psi.data[h] for h in range(2)], axis=1)
    expected = (vals @ m.w_g.data).reshape(1, 1, 8)
    assert np.allclose(csa_forward(fmap(fc), fmap(fn), m).values.data, expected, atol=1e-15)


def test_isa_single_token_is_value_path():
    fc = np.random.default_rng(2).normal(size=(1, 1, 4))
    m = isa_module(4, 1, 0)
    expected = (fc.reshape(1, 4) @ m.w_gamma.data[0] @ m.w_epsilon.data).reshape(1, 1, 4)
    assert np.allclose(isa_forward(fmap(fc), m).values.data, expected, atol=1e-15)


@pytest.mark.parametrize("h,w,C,k", [(2, 2, 4, 1), (3, 3, 8, 2), (4, 2, 16, 4)])
def test_csa_of_same_map_equals_isa_exactly(h, w, C, k):
    f = np.random.default_rng(3).normal(size=(h, w, C))
    isa = isa_module(C, k, 5)
    csa = CSAModule(C, k)
    csa.w_theta.data, csa.w_phi.data = isa.w_alpha.data, isa.w_beta.data
    csa.w_psi.data, csa.w_g.data = isa.w_gamma.data, isa.w_epsilon.data
    assert np.array_equal(csa_forward(fmap(f), fmap(f), csa).values.data,
                          isa_forward(fmap(f), isa).values.data)


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(4)
    m = csa_module(8, 2, 0)
    _, weights = csa_forward(fmap(rng.normal(size=(3, 3, 8))), fmap(rng.normal(size=(3, 3, 8))),
                             m, return_weights=True)
    A = weights.data
    assert A.shape == (2, 9, 9)
    assert np.all(np.abs(A.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all((A > 0) & (A < 1))


def test_isa_permutation_equivariance():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(2, 2, 4))
    m = isa_module(4, 1, 0)
    perm = rng.permutation(4)
    out = isa_forward(fmap(f), m).values.data.reshape(4, 4)
    out_p = isa_forward(fmap(f.reshape(4, 4)[perm].reshape(2, 2, 4)), m).values.data.reshape(4, 4)
    assert np.allclose(out_p, out[perm], atol=1e-14)


def test_csa_query_permutation_and_key_invariance():
    rng = np.random.default_rng(6)
    fc, fn = rng.normal(size=(3, 3, 8)), rng.normal(size=(3, 3, 8))
    m = csa_module(8, 2, 0)
    base = csa_forward(fmap(fc), fmap(fn), m).values.data.reshape(9, 8)
    perm = rng.permutation(9)
    fn_p = fn.reshape(9, 8)[perm].reshape(3, 3, 8)
    out = csa_forward(fmap(fc), fmap(fn_p), m).values.data.reshape(9, 8)
    assert np.allclose(out, base[perm], atol=1e-14)
    fc_p = fc.reshape(9, 8)[perm].reshape(3, 3, 8)
    out = csa_forward(fmap(fc_p), fmap(fn), m).values.data.reshape(9, 8)
    assert np.allclose(out, base, atol=1e-14)


@pytest.mark.parametrize("k", [1, 2, 4, 8])
def test_head_count_preserves_shape(k):
    rng = np.random.default_rng(7)
    m = csa_module(16, k, 0)
    out = csa_forward(fmap(rng.normal(size=(2, 3, 16))), fmap(rng.normal(size=(2, 3, 16))), m)
    assert out.extent == (2, 3, 16)


def test_batched_feature_maps():
    rng = np.random.default_rng(8)
    fc, fn = rng.normal(size=(3, 2, 2, 8)), rng.normal(size=(3, 2, 2, 8))
    m = csa_module(8, 2, 0)
    batched = csa_forward(fmap(fc), fmap(fn), m).values.data
    for i in range(3):
        assert np.allclose(batched[i], csa_forward(fmap(fc[i]), fmap(fn[i]), m).values.data, atol=1e-14)


def test_heads_must_divide_channels():
    with pytest.raises(ConfigurationError):
        CSAModule(12, 4)
    with pytest.raises(ConfigurationError):
        ISAModule(6, 2)


def test_csa_extent_mismatch():
    m = csa_module(4, 1, 0)
    with pytest.raises(DimensionError):
        csa_forward(fmap(np.zeros((2, 2, 4))), fmap(np.zeros((3, 2, 4))), m)


def test_module_width_mismatch():
    with pytest.raises(ConfigurationError):
        isa_forward(fmap(np.zeros((2, 2, 8))), isa_module(4, 1, 0))


def test_feature_map_flatten_round_trip():
    v = np.random.default_rng(9).normal(size=(3, 5, 6))
    f = fmap(v)
    assert f.flat().shape == (15, 6)
    assert np.array_equal(FeatureMap.from_flat(f.flat(), 3, 5).values.data, v)


# ---------------------------------------------------------------- aggregation

def test_aggregator_pass_through():
    rng = np.random.default_rng(10)
    C = 4
    maps = [rng.normal(size=(2, 3, C)) for _ in range(4)]
    agg = AttentionAggregator(C)
    agg.weight.data = np.vstack([np.zeros((3 * C, C)), np.eye(C)])
    out = aggregate_attention(*map(fmap, maps), agg).values.data
    assert np.array_equal(out, maps[3])


def test_aggregator_identity_blocks_with_zero_attention():
    C = 4
    f = np.random.default_rng(11).normal(size=(2, 2, C))
    zero = np.zeros_like(f)
    agg = AttentionAggregator(C)
    agg.weight.data = np.vstack([np.eye(C)] * 4)
    assert np.array_equal(aggregate_attention(fmap(zero), fmap(zero), fmap(zero), fmap(f), agg).values.data, f)


def test_aggregator_matches_block_loops():
    rng = np.random.default_rng(12)
    C, h, w = 3, 2, 2
    maps = [rng.normal(size=(h, w, C)) for _ in range(4)]
    agg = AttentionAggregator(C)
    init_params(0, agg)
    agg.bias.data = rng.normal(size=C)
    out = aggregate_attention(*map(fmap, maps), agg).values.data
    W = agg.weight.data
    for y in range(h):
        for x in range(w):
            for o in range(C):
                s = agg.bias.data[o]
                for b in range(4):
                    for c in range(C):
                        s += maps[b][y, x, c] * W[b * C + c, o]
                assert abs(out[y, x, o] - s) <= 1e-13


def test_aggregator_extent_mismatch():
    agg = AttentionAggregator(4)
    a = fmap(np.zeros((2, 2, 4)))
    with pytest.raises(DimensionError):
        aggregate_attention(a, a, fmap(np.zeros((2, 3, 4))), a, agg)


# ---------------------------------------------------------------- gradients

def _gradcheck(loss_fn, tensors):
    T.backward(loss_fn())
    return max(rel_error(t.grad, finite_diff_grad(lambda _: loss_fn(), t)) for t in tensors)


def test_csa_isa_gradients_on_3x3x8():
    rng = np.random.default_rng(13)
    fc = Tensor(rng.uniform(-1, 1, (3, 3, 8)), requires_grad=True)
    fn = Tensor(rng.uniform(-1, 1, (3, 3, 8)), requires_grad=True)
    csa, isa = csa_module(8, 2, 1), isa_module(8, 2, 2)
    w = rng.normal(size=(3, 3, 8))

    def loss():
        a = csa_forward(FeatureMap(fc), FeatureMap(fn), csa).values
        b = isa_forward(FeatureMap(fc), isa).values
        return ((a + b) * w).sum()

    assert _gradcheck(loss, [fc, fn, *csa.parameters().values(), *isa.parameters().values()]) <= 1e-4


def test_aggregator_gradient():
    rng = np.random.default_rng(14)
    maps = [Tensor(rng.uniform(-1, 1, (2, 2, 4)), requires_grad=True) for _ in range(4)]
    agg = AttentionAggregator(4)
    init_params(3, agg)
    w = rng.normal(size=(2, 2, 4))

    def loss():
        return (aggregate_attention(*(FeatureMap(m) for m in maps), agg).values * w).sum()

    assert _gradcheck(loss, maps + [agg.weight, agg.bias]) <= 1e-4
