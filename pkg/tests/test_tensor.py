import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fetalseg import tensor as T
from fetalseg.train import dice_loss


def t(a, dtype=torch.float64):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def img(a):
    return t(a)[None, None]


# -- conv2d

def test_conv_identity_1x1():
    x = torch.randn(2, 3, 5, 7, dtype=torch.float64)
    w = torch.eye(3, dtype=torch.float64)[:, :, None, None]
    out = T.conv2d(x, T.ConvParams(w, torch.zeros(3, dtype=torch.float64)))
    assert torch.equal(out, x)


def test_conv_all_ones_3x3():
    out = T.conv2d(img(np.ones((3, 3))), T.ConvParams(torch.ones(1, 1, 3, 3, dtype=torch.float64), padding=1))
    assert out[0, 0, 1, 1] == 9
    for r, c in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out[0, 0, r, c] == 4


def test_conv_full_size_shape():
    x = torch.zeros(1, 3, 160, 288)
    out = T.conv2d(x, T.ConvParams(torch.zeros(64, 3, 3, 3), torch.zeros(64), padding=1))
    assert out.shape == (1, 64, 160, 288)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(t(x), T.ConvParams(t(w), t(b), stride=2, padding=1)).numpy()
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    ref = np.zeros((1, 3, ho, wo))
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        T.conv2d(torch.zeros(1, 2, 4, 4), T.ConvParams(torch.zeros(1, 3, 1, 1)))


def test_conv_rejects_nonfinite():
    x = torch.zeros(1, 1, 3, 3)
    x[0, 0, 1, 1] = float("nan")
    with pytest.raises(T.NumericError):
        T.conv2d(x, T.ConvParams(torch.ones(1, 1, 1, 1)))


def test_conv_params_validation():
    with pytest.raises(ValueError):
        T.ConvParams(torch.zeros(3, 3))
    with pytest.raises(ValueError):
        T.ConvParams(torch.zeros(1, 1, 3, 3), stride=0)
    with pytest.raises(ValueError):
        T.ConvParams(torch.zeros(2, 1, 3, 3), bias=torch.zeros(3))


@settings(max_examples=25, deadline=None)
@given(k=st.sampled_from([1, 3, 5, 7]), h=st.integers(7, 12), w=st.integers(7, 12))
def test_same_padding_preserves_shape(k, h, w):
    x = torch.randn(1, 2, h, w)
    out = T.conv2d(x, T.ConvParams(torch.randn(3, 2, k, k), padding=T.same_padding(k)))
    assert out.shape[2:] == (h, w)


# -- maxpool

def test_maxpool_examples():
    assert T.maxpool2(img([[1, 2], [3, 4]])).numpy().tolist() == [[[[4]]]]
    out = T.maxpool2(img(np.arange(16).reshape(4, 4)))
    assert out[0, 0].numpy().tolist() == [[5, 7], [13, 15]]
    const = T.maxpool2(img(np.full((6, 8), 2.5)))
    assert const.shape == (1, 1, 3, 4) and torch.all(const == 2.5)


def test_maxpool_odd_rejected():
    with pytest.raises(ValueError):
        T.maxpool2(torch.zeros(1, 1, 3, 4))


def test_maxpool_gradient_goes_to_first_max():
    x = img(np.ones((2, 2))).requires_grad_(True)
    T.maxpool2(x).sum().backward()
    assert x.grad[0, 0].numpy().tolist() == [[1, 0], [0, 0]]
    x = img([[0, 3], [3, 1]]).requires_grad_(True)
    T.maxpool2(x).sum().backward()
    assert x.grad[0, 0].numpy().tolist() == [[0, 1], [0, 0]]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=16, max_size=16))
def test_maxpool_matches_window_oracle(vals):
    a = np.array(vals, dtype=float).reshape(4, 4)
    ref = np.array([[a[i:i + 2, j:j + 2].max() for j in (0, 2)] for i in (0, 2)])
    assert np.array_equal(T.maxpool2(img(a))[0, 0].numpy(), ref)


# -- upsample

def test_upsample_examples():
    out = T.upsample_bilinear2x(img([[0.0, 1.0]]))
    np.testing.assert_allclose(out[0, 0, 0].numpy(), [0, 0.25, 0.75, 1.0])
    assert out.shape == (1, 1, 2, 4)
    assert T.upsample_bilinear2x(torch.zeros(1, 64, 20, 36)).shape == (1, 64, 40, 72)
    c = T.upsample_bilinear2x(img(np.full((3, 5), 0.7)))
    np.testing.assert_allclose(c.numpy(), 0.7, atol=1e-15)


def _upsample_oracle(a):
    h, w = a.shape
    out = np.zeros((2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            sy = min(max((i + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((j + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
                         + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
    return out


def test_upsample_matches_coordinate_formula():
    a = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_allclose(T.upsample_bilinear2x(img(a))[0, 0].numpy(), _upsample_oracle(a), atol=1e-12)


def test_pool_then_upsample_constant():
    x = img(np.full((8, 8), 3.25))
    assert torch.all(T.upsample_bilinear2x(T.maxpool2(x)) == 3.25)


# -- avgpool

def test_avgpool_examples():
    a = img(np.arange(1, 10).reshape(3, 3))
    out = T.avgpool3_s1(a)[0, 0]
    assert out[1, 1] == 5
    assert out[0, 0] == 3
    c = T.avgpool3_s1(img(np.full((4, 5), 0.3)))
    np.testing.assert_allclose(c.numpy(), 0.3, atol=1e-15)


# -- batchnorm

def _bn_state(c, mean=0.0, var=1.0):
    return (torch.full((c,), mean, dtype=torch.float64), torch.full((c,), var, dtype=torch.float64),
            torch.ones(c, dtype=torch.float64), torch.zeros(c, dtype=torch.float64))


def test_batchnorm_train_normalizes():
    x = torch.randn(4, 3, 5, 6, dtype=torch.float64) * 3 + 2
    rm, rv, w, b = _bn_state(3)
    out = T.batchnorm(x, rm, rv, w, b, training=True)
    assert out.mean(dim=(0, 2, 3)).abs().max() < 1e-5
    assert (out.var(dim=(0, 2, 3), unbiased=False) - 1).abs().max() < 1e-4
    # running stats moved toward the batch statistics
    np.testing.assert_allclose(rm.numpy(), 0.1 * x.mean(dim=(0, 2, 3)).numpy(), atol=1e-12)


def test_batchnorm_standardized_input_passthrough():
    x = torch.randn(8, 2, 6, 6, dtype=torch.float64)
    x = (x - x.mean(dim=(0, 2, 3), keepdim=True)) / x.std(dim=(0, 2, 3), unbiased=False, keepdim=True)
    out = T.batchnorm(x, *_bn_state(2), training=True)
    # only the epsilon in the denominator separates output from input
    assert (out - x).abs().max() < 1e-5 * x.abs().max()
    assert torch.allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_batchnorm_eval_running_stats():
    x = torch.full((1, 1, 2, 2), 4.0, dtype=torch.float64)
    out = T.batchnorm(x, *_bn_state(1, 2.0, 4.0), training=False)
    np.testing.assert_allclose(out.numpy(), 2 / np.sqrt(4 + 1e-5), rtol=1e-12)
    assert abs(out[0, 0, 0, 0].item() - 1.0) < 1e-5


def test_batchnorm_single_value_rejected():
    with pytest.raises(ValueError):
        T.batchnorm(torch.zeros(1, 2, 1, 1), *_bn_state(2), training=True)


# -- relu, concat, softmax

def test_relu_concat_softmax():
    assert T.relu(t([-1.0, 2.0])).tolist() == [0.0, 2.0]
    out = T.concat_channels([torch.zeros(1, 64, 3, 4), torch.ones(1, 64, 3, 4)])
    assert out.shape == (1, 128, 3, 4)
    with pytest.raises(ValueError):
        T.concat_channels([torch.zeros(1, 2, 3, 4), torch.zeros(1, 2, 3, 5)])
    p = T.softmax_channels(torch.zeros(1, 11, 2, 2))
    np.testing.assert_allclose(p.numpy(), 1 / 11, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_softmax_simplex(seed, scale):
    x = torch.randn(2, 11, 3, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * scale
    p = T.softmax_channels(x)
    assert (p.sum(1) - 1).abs().max() < 1e-6
    assert p.min() >= 0 and p.max() <= 1


def test_ops_deterministic():
    x = torch.randn(2, 4, 8, 8)
    params = T.ConvParams(torch.randn(3, 4, 3, 3), torch.randn(3), padding=1)
    assert torch.equal(T.conv2d(x, params), T.conv2d(x, params))
    assert torch.equal(T.upsample_bilinear2x(x), T.upsample_bilinear2x(x))


# -- gradient checks (double precision)

def test_grad_check_linear_exact():
    x = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    w = torch.randn(2, 3, 1, 1, dtype=torch.float64)
    # central differences carry no truncation error on a map that is linear in
    # each input, so a unit step only leaves rounding
    rep = T.grad_check(lambda a, b: T.conv2d(a, T.ConvParams(b)), [x, w], step=1.0)
    assert rep.max_rel_error < 1e-9


OP_CASES = {
    "conv2d": (lambda x, w, b: T.conv2d(x, T.ConvParams(w, b, padding=1)),
               lambda g: [torch.randn(2, 2, 5, 4, generator=g), torch.randn(3, 2, 3, 3, generator=g),
                          torch.randn(3, generator=g)]),
    "conv2d_stride": (lambda x, w: T.conv2d(x, T.ConvParams(w, stride=2)),
                      lambda g: [torch.randn(1, 2, 7, 6, generator=g), torch.randn(2, 2, 3, 3, generator=g)]),
    # distinct values keep maxpool away from ties, where it is not differentiable
    "maxpool2": (T.maxpool2, lambda g: [torch.randperm(48, generator=g).double().reshape(1, 3, 4, 4) * 0.1]),
    "upsample": (T.upsample_bilinear2x, lambda g: [torch.randn(1, 2, 3, 4, generator=g)]),
    "avgpool": (T.avgpool3_s1, lambda g: [torch.randn(1, 2, 4, 5, generator=g)]),
    "batchnorm_train": (
        lambda x, w, b: T.batchnorm(x, torch.zeros(3, dtype=x.dtype), torch.ones(3, dtype=x.dtype), w, b, True),
        lambda g: [torch.randn(2, 3, 3, 4, generator=g), torch.rand(3, generator=g) + 0.5,
                   torch.randn(3, generator=g)]),
    "batchnorm_eval": (
        lambda x: T.batchnorm(x, torch.full((2,), 0.3, dtype=x.dtype), torch.full((2,), 2.0, dtype=x.dtype),
                              None, None, False),
        lambda g: [torch.randn(1, 2, 3, 3, generator=g)]),
    "relu": (T.relu, lambda g: [torch.randn(1, 2, 4, 4, generator=g) + 0.05]),
    "concat": (lambda a, b: T.concat_channels([a, b]),
               lambda g: [torch.randn(1, 2, 3, 3, generator=g), torch.randn(1, 1, 3, 3, generator=g)]),
    "softmax": (T.softmax_channels, lambda g: [torch.randn(2, 5, 3, 3, generator=g)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_single_op_gradients(name):
    fn, make = OP_CASES[name]
    g = torch.Generator().manual_seed(7)
    inputs = [a.double() for a in make(g)]
    if name == "relu":
        inputs[0][inputs[0].abs() < 1e-3] = 0.5  # stay off the kink
    rep = T.grad_check(fn, inputs)
    assert rep.max_rel_error < 1e-4, rep


def test_composite_conv_bn_relu_stack():
    g = torch.Generator().manual_seed(3)
    ws = [torch.randn(4, 1, 3, 3, generator=g), torch.randn(4, 4, 3, 3, generator=g),
          torch.randn(4, 4, 3, 3, generator=g)]
    x = torch.randn(2, 1, 4, 8, generator=g)

    def stack(x, w1, w2, w3):
        for w in (w1, w2, w3):
            c = w.shape[0]
            x = T.conv2d(x, T.ConvParams(w, padding=1))
            x = T.batchnorm(x, torch.zeros(c, dtype=x.dtype), torch.ones(c, dtype=x.dtype), None, None, True)
            x = T.relu(x)
        return x

    rep = T.grad_check(stack, [x] + ws)
    assert rep.max_rel_error < 1e-4, rep


def test_softmax_dice_composite():
    g = torch.Generator().manual_seed(5)
    logits = torch.randn(2, 11, 4, 4, generator=g, dtype=torch.float64)
    target = torch.randint(0, 11, (2, 4, 4), generator=g)
    rep = T.grad_check(lambda z: dice_loss(T.softmax_channels(z), target), [logits])
    assert rep.max_rel_error < 1e-4, rep


def test_grad_check_reports_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * 2

        @staticmethod
        def backward(ctx, g):
            return g * 3

    rep = T.grad_check(Bad.apply, [torch.randn(1, 1, 2, 2, dtype=torch.float64)])
    assert not rep.passed(1e-4)


def test_set_precision_roundtrip():
    T.set_precision(True)
    try:
        assert torch.zeros(1).dtype == torch.float64
    finally:
        T.set_precision(False)
    assert torch.zeros(1).dtype == torch.float32
