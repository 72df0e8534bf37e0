import numpy as np
import pytest

from csanet import tensor as T
from csanet.errors import ConfigurationError, ContractError, DimensionError
from csanet.nn import (AdamState, Conv2D, LayerNorm, Linear, Module, TransposedConv2D, adam_step,
                       conv2d, init_params, layer_norm, transposed_conv2d)
from csanet.tensor import Tensor, finite_diff_grad, rel_error


def conv_loop(x, k, b, stride, pad):
    """Direct cross-correlation with zero padding, one output element at a time."""
    cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            s += k[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = s
    return out


def make_conv(cin, cout, k, stride=1, padding=0, seed=0):
    layer = Conv2D(cin, cout, k, stride=stride, padding=padding)
    init_params(seed, layer)
    layer.bias.data = np.random.default_rng(seed + 100).normal(size=cout)
    return layer


# ---------------------------------------------------------------- conv2d

def test_conv_identity_1x1():
    layer = Conv2D(3, 3, 1)
    layer.kernel.data = np.eye(3).reshape(3, 3, 1, 1)
    x = np.random.default_rng(0).normal(size=(3, 5, 4))
    assert np.array_equal(conv2d(Tensor(x), layer).data, x)


def test_conv_ones_kernel_constant_input():
    layer = Conv2D(1, 1, 3, padding=1)
    layer.kernel.data = np.ones((1, 1, 3, 3))
    out = conv2d(Tensor(np.full((1, 6, 6), 2.5)), layer).data
    assert np.all(out[0, 1:-1, 1:-1] == 22.5)
    assert out[0, 0, 0] == 4 * 2.5


def test_conv_zero_kernel_gives_bias():
    layer = Conv2D(2, 3, 3, padding=1)
    layer.bias.data = np.array([1.0, -2.0, 0.5])
    out = conv2d(Tensor(np.random.default_rng(1).normal(size=(2, 4, 4))), layer).data
    assert np.array_equal(out, np.broadcast_to(layer.bias.data[:, None, None], (3, 4, 4)))


@pytest.mark.parametrize("k,stride,pad,size", [(3, 1, 1, 7), (3, 2, 1, 8), (1, 2, 0, 6), (2, 1, 0, 5), (3, 2, 0, 9)])
def test_conv_matches_loop_oracle(k, stride, pad, size):
    layer = make_conv(2, 3, k, stride, pad, seed=k + stride)
    x = np.random.default_rng(2).normal(size=(2, size, size))
    out = conv2d(Tensor(x), layer).data
    ref = conv_loop(x, layer.kernel.data, layer.bias.data, stride, pad)
    expected = (size + 2 * pad - k) // stride + 1
    assert out.shape == (3, expected, expected)
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Conv2D(3, 1, 1))


def test_conv_stride2_stack_divides_by_2r():
    x = Tensor(np.zeros((1, 1, 32, 32)))
    for i in range(3):
        x = conv2d(x, Conv2D(1, 1, 3, stride=2, padding=1))
    assert x.shape[-2:] == (4, 4)


def test_conv_batched_equals_per_sample():
    layer = make_conv(2, 4, 3, 1, 1)
    x = np.random.default_rng(3).normal(size=(3, 2, 5, 5))
    batched = conv2d(Tensor(x), layer).data
    for n in range(3):
        assert np.allclose(batched[n], conv2d(Tensor(x[n]), layer).data, atol=1e-13)


# ---------------------------------------------------------------- transposed conv

def test_transposed_hand_example():
    layer = TransposedConv2D(1, 1)
    layer.kernel.data = np.ones((1, 1, 2, 2))
    assert transposed_conv2d(Tensor([[[1.0]]]), layer).data.tolist() == [[[1.0, 1.0], [1.0, 1.0]]]


def test_transposed_zero_input():
    layer = TransposedConv2D(2, 3)
    init_params(0, layer)
    assert np.array_equal(transposed_conv2d(Tensor(np.zeros((2, 3, 3))), layer).data, np.zeros((3, 6, 6)))


def test_transposed_doubles_extent():
    layer = TransposedConv2D(4, 2)
    assert transposed_conv2d(Tensor(np.zeros((4, 3, 5))), layer).shape == (2, 6, 10)


def test_transposed_adjoint_of_strided_conv():
    rng = np.random.default_rng(4)
    kernel = rng.normal(size=(2, 3, 2, 2))           # (Cin_t, Cout_t, 2, 2)
    fwd = Conv2D(3, 2, 2, stride=2, bias=False)
    fwd.kernel.data = kernel                          # conv: 3 -> 2 channels uses (out=2, in=3)
    adj = TransposedConv2D(2, 3, bias=False)
    adj.kernel.data = kernel
    x = rng.normal(size=(3, 6, 8))
    y = rng.normal(size=(2, 3, 4))
    lhs = np.sum(conv2d(Tensor(x), fwd).data * y)
    rhs = np.sum(x * transposed_conv2d(Tensor(y), adj).data)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_transposed_requires_kernel_equal_stride():
    with pytest.raises(ConfigurationError):
        TransposedConv2D(2, 2, kernel_size=3, stride=2)


def test_transposed_channel_mismatch():
    with pytest.raises(DimensionError):
        transposed_conv2d(Tensor(np.zeros((3, 2, 2))), TransposedConv2D(2, 1))


# ---------------------------------------------------------------- layer norm

def test_layer_norm_invariant():
    x = np.random.default_rng(5).normal(3.0, 2.0, size=(6, 16))
    out = layer_norm(Tensor(x), LayerNorm(16)).data
    # eps = 1e-5 shrinks the variance by var/(var+eps); undo that to check the normalization itself
    var = x.var(axis=1, keepdims=True)
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-9)
    assert np.allclose((out ** 2).mean(axis=1, keepdims=True) * (var + 1e-5) / var, 1.0, atol=1e-9)


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((2, 5), 7.0)), LayerNorm(5)).data
    assert np.array_equal(out, np.zeros((2, 5)))


def test_layer_norm_idempotent_on_normalized_rows():
    ln = LayerNorm(8, eps=0.0)
    x = np.random.default_rng(6).normal(size=(4, 8))
    once = layer_norm(Tensor(x), ln).data
    assert np.allclose(layer_norm(Tensor(once), ln).data, once, atol=1e-12)


def test_layer_norm_channel_axis():
    x = np.random.default_rng(7).normal(size=(2, 4, 3, 3))
    out = layer_norm(Tensor(x), LayerNorm(4, axis=1)).data
    ref = layer_norm(Tensor(np.moveaxis(x, 1, -1)), LayerNorm(4)).data
    assert np.allclose(np.moveaxis(out, 1, -1), ref, atol=1e-14)


# ---------------------------------------------------------------- gradients on 8x8 inputs

def _layer_gradcheck(fn, x, params, seed=0):
    rng = np.random.default_rng(seed)
    xt = Tensor(x, requires_grad=True)
    w = rng.normal(size=fn(Tensor(x)).shape)

    def f(_=None):
        return (fn(xt) * w).sum()

    for p in params:
        p.grad = None
    T.backward(f())
    return max(rel_error(t.grad, finite_diff_grad(f, t)) for t in [xt, *params])


def test_conv_gradient():
    layer = make_conv(2, 3, 3, stride=2, padding=1)
    x = np.random.default_rng(8).uniform(-1, 1, (2, 8, 8))
    assert _layer_gradcheck(lambda t: conv2d(t, layer), x, [layer.kernel, layer.bias]) <= 1e-4


def test_transposed_conv_gradient():
    layer = TransposedConv2D(2, 3)
    init_params(1, layer)
    x = np.random.default_rng(9).uniform(-1, 1, (2, 8, 8))
    assert _layer_gradcheck(lambda t: transposed_conv2d(t, layer), x, [layer.kernel, layer.bias]) <= 1e-4


def test_layer_norm_gradient():
    ln = LayerNorm(8)
    ln.scale.data = np.linspace(0.5, 1.5, 8)
    ln.shift.data = np.linspace(-1, 1, 8)
    x = np.random.default_rng(10).uniform(-1, 1, (8, 8))
    assert _layer_gradcheck(lambda t: layer_norm(t, ln), x, [ln.scale, ln.shift]) <= 1e-4


def test_linear_gradient():
    lin = Linear(8, 4)
    init_params(2, lin)
    x = np.random.default_rng(11).uniform(-1, 1, (8, 8))
    assert _layer_gradcheck(lin, x, [lin.weight, lin.bias]) <= 1e-4


# ---------------------------------------------------------------- Adam

def _params(*arrays):
    return {f"p{i}": Tensor(np.array(a, dtype=np.float64), requires_grad=True) for i, a in enumerate(arrays)}


def test_adam_zero_gradient_no_decay_is_noop():
    params = _params([1.0, -2.0], [[3.0]])
    before = {k: p.data.copy() for k, p in params.items()}
    adam_step(params, {k: np.zeros_like(p.data) for k, p in params.items()},
              AdamState(weight_decay=0.0))
    assert all(np.array_equal(p.data, before[k]) for k, p in params.items())


def test_adam_first_step_magnitude_is_lr():
    params = _params(np.zeros(5))
    g = np.array([0.3, -2.0, 5.0, -0.01, 1.0])
    adam_step(params, {"p0": g}, AdamState(weight_decay=0.0))
    step = params["p0"].data
    # m_hat = g, v_hat = g^2, so the update is -lr * g / (|g| + eps)
    assert np.allclose(step, -1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-18)
    assert np.array_equal(np.sign(step), -np.sign(g))


def test_adam_closed_form_two_steps_with_decay():
    p0 = np.array([0.5, -1.0])
    g1, g2 = np.array([0.2, -0.4]), np.array([-0.1, 0.3])
    lr, wd, b1, b2, eps = 1e-3, 1e-5, 0.9, 0.999, 1e-8
    theta, m, v = p0.copy(), np.zeros(2), np.zeros(2)
    for t, g in enumerate((g1, g2), 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        theta = theta - lr * wd * theta
    params = _params(p0)
    state = AdamState()
    adam_step(params, {"p0": g1}, state)
    adam_step(params, {"p0": g2}, state)
    assert np.allclose(params["p0"].data, theta, rtol=1e-15, atol=0)
    assert state.step == 2


def test_adam_deterministic():
    rng = np.random.default_rng(12)
    init = rng.normal(size=(3, 3))
    g = rng.normal(size=(3, 3))
    results = []
    for _ in range(2):
        params = _params(init)
        state = AdamState()
        adam_step(params, {"p0": g}, state)
        results.append((params["p0"].data.copy(), state.m["p0"].copy(), state.v["p0"].copy()))
    assert all(np.array_equal(a, b) for a, b in zip(*results))


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step(_params(np.zeros(3)), {"p0": np.zeros(4)}, AdamState())


def test_adam_moments_match_parameter_shapes():
    params = _params(np.zeros((2, 3)), np.zeros(4))
    state = AdamState()
    adam_step(params, {"p0": np.ones((2, 3)), "p1": None}, state)
    assert all(state.m[k].shape == p.shape == state.v[k].shape for k, p in params.items())


# ---------------------------------------------------------------- init

class _Net(Module):
    def __init__(self):
        self.conv = Conv2D(10, 20, 10)
        self.lin = Linear(16, 8)
        self.norm = LayerNorm(8)


def test_init_same_seed_identical():
    a, b = init_params(3, _Net()), init_params(3, _Net())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_init_different_seed_differs():
    a, b = init_params(3, _Net()), init_params(4, _Net())
    assert not np.array_equal(a["conv.kernel"].data, b["conv.kernel"].data)
    assert not np.array_equal(a["lin.weight"].data, b["lin.weight"].data)


def test_init_kinds():
    p = init_params(0, _Net())
    assert np.all(p["conv.bias"].data == 0) and np.all(p["lin.bias"].data == 0)
    assert np.all(p["norm.scale"].data == 1) and np.all(p["norm.shift"].data == 0)
    bound = np.sqrt(6.0 / (16 + 8))
    assert np.abs(p["lin.weight"].data).max() <= bound


def test_he_variance_statistical():
    k = init_params(1, _Net())["conv.kernel"].data     # 20*10*10*10 = 20000 entries, fan_in 1000
    sub = k.reshape(-1)[:1000]
    assert abs(sub.var() / (2.0 / 1000) - 1.0) <= 0.2
