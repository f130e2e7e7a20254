import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmnet.ops import (
    BatchNormParams,
    ConvSpec,
    batch_norm,
    bilinear_resize,
    conv2d,
    conv_output_size,
    gaussian_derivative_kernels,
    naive_conv2d,
    relu6,
    same_padding,
    sobel_gradients,
    sobel_kernel_weights,
    softmax2,
)


def random_conv_case(rng):
    stride = int(rng.choice([1, 2]))
    dilation = int(rng.choice([1, 2, 4, 8]))
    k = int(rng.choice([1, 3]))
    cin = int(rng.integers(1, 5))
    depthwise = bool(rng.random() < 0.5)
    if depthwise:
        groups, cout = cin, cin
        wshape = (cin, 1, k, k)
    else:
        groups = 1
        cout = int(rng.integers(1, 5))
        wshape = (cout, cin, k, k)
    n = int(rng.integers(1, 3))
    h = int(rng.integers(4, 12))
    w = int(rng.integers(4, 12))
    x = rng.standard_normal((n, cin, h, w))
    wgt = rng.standard_normal(wshape)
    bias = rng.standard_normal(cout) if rng.random() < 0.5 else None
    spec = ConvSpec(k, k, stride=stride, dilation=dilation, groups=groups)
    return x, wgt, bias, spec


def test_conv2d_matches_naive_oracle_many_cases():
    """The vectorized convolution must agree with the literal nested-loop
    oracle across strides, dilations, and groupings."""
    rng = np.random.default_rng(7)
    cases = 0
    seen = set()
    while cases < 220:
        x, w, b, spec = random_conv_case(rng)
        got = conv2d(x, w, b, spec)
        want = naive_conv2d(x, w, b, spec)
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)
        seen.add((spec.stride, spec.dilation, spec.groups == 1))
        cases += 1
    # the sweep must actually cover the advertised parameter space
    strides = {s for s, _, _ in seen}
    dilations = {d for _, d, _ in seen}
    groupings = {g for _, _, g in seen}
    assert strides == {1, 2}
    assert dilations == {1, 2, 4, 8}
    assert groupings == {True, False}


def test_conv_output_size_is_ceil_div():
    spec = ConvSpec(3, 3, stride=2)
    assert conv_output_size(7, 8, spec) == (4, 4)
    assert conv_output_size(1, 1, spec) == (1, 1)


def test_same_padding_stride1_centers_kernel():
    assert same_padding(8, 8, ConvSpec(3, 3)) == (1, 1, 1, 1)
    # dilation widens the effective kernel
    assert same_padding(8, 8, ConvSpec(3, 3, dilation=4)) == (4, 4, 4, 4)


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).random((1, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    np.testing.assert_allclose(conv2d(x, w, spec=ConvSpec(1, 1)), x)


def test_conv2d_shape_validation():
    x = np.zeros((1, 3, 4, 4))
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((2, 4, 3, 3)))  # wrong c_in
    with pytest.raises(ValueError):
        conv2d(x, np.zeros((3, 2, 3, 3)), spec=ConvSpec(3, 3, groups=3))
    with pytest.raises(ValueError):
        ConvSpec(3, 3, stride=3)
    with pytest.raises(ValueError):
        ConvSpec(3, 3, dilation=3)


def test_conv2d_preserves_dtype():
    x64 = np.zeros((1, 1, 4, 4), dtype=np.float64)
    w64 = np.zeros((1, 1, 3, 3), dtype=np.float64)
    assert conv2d(x64, w64).dtype == np.float64
    assert conv2d(x64.astype(np.float32), w64.astype(np.float32)).dtype == np.float32


def test_batch_norm_inference_identity_params():
    x = np.random.default_rng(1).random((2, 3, 4, 4)).astype(np.float32)
    p = BatchNormParams(
        gamma=np.ones(3, np.float32),
        beta=np.zeros(3, np.float32),
        running_mean=np.zeros(3, np.float32),
        running_var=np.ones(3, np.float32),
    )
    out = batch_norm(x, p)
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batch_norm_training_normalizes_and_updates_stats():
    rng = np.random.default_rng(2)
    x = (rng.random((4, 2, 8, 8)) * 3 + 1).astype(np.float32)
    p = BatchNormParams(
        gamma=np.ones(2, np.float32),
        beta=np.zeros(2, np.float32),
        running_mean=np.zeros(2, np.float32),
        running_var=np.ones(2, np.float32),
    )
    out = batch_norm(x, p, training=True)
    assert abs(out.mean()) < 1e-5
    assert abs(out.var() - 1.0) < 1e-2
    # EMA moved toward the batch statistics
    assert np.all(p.running_mean > 0)
    expected = 0.9 * 0 + 0.1 * x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(p.running_mean, expected, rtol=1e-5)


def test_relu6_clips_both_sides():
    x = np.array([-1.0, 0.0, 3.0, 6.0, 9.0])
    np.testing.assert_array_equal(relu6(x), [0, 0, 3, 6, 6])


def test_bilinear_resize_identity_and_constant():
    x = np.random.default_rng(3).random((1, 2, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(bilinear_resize(x, 6, 6), x)
    const = np.full((1, 1, 4, 4), 0.7, dtype=np.float32)
    np.testing.assert_allclose(bilinear_resize(const, 9, 13), 0.7, rtol=1e-6)


def test_bilinear_resize_downsample_average():
    # 2x downsample with half-pixel centers averages 2x2 blocks
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = bilinear_resize(x, 2, 2)
    want = np.array([[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_allclose(out[0, 0], want)


def test_bilinear_resize_upsample_preserves_range():
    rng = np.random.default_rng(4)
    x = rng.random((1, 1, 5, 5))
    out = bilinear_resize(x, 17, 17)
    assert out.min() >= x.min() - 1e-12
    assert out.max() <= x.max() + 1e-12


@given(st.integers(1, 8), st.integers(1, 8))
@settings(max_examples=20)
def test_bilinear_resize_align_corners_hits_corners(h, w):
    rng = np.random.default_rng(5)
    x = rng.random((1, 1, h, w))
    out = bilinear_resize(x, 2 * h + 1, 2 * w + 1, align_corners=True)
    assert abs(out[0, 0, 0, 0] - x[0, 0, 0, 0]) < 1e-12
    assert abs(out[0, 0, -1, -1] - x[0, 0, -1, -1]) < 1e-12


def test_softmax2_sums_to_one_and_is_stable():
    x = np.array([[[[1000.0]], [[999.0]]]])
    y = softmax2(x)
    np.testing.assert_allclose(y.sum(axis=1), 1.0)
    assert np.all(np.isfinite(y))
    # channel order: larger logit gets the larger probability
    assert y[0, 0, 0, 0] > y[0, 1, 0, 0]


def test_softmax2_requires_two_channels():
    with pytest.raises(ValueError):
        softmax2(np.zeros((1, 3, 2, 2)))


def test_sobel_gradients_on_linear_ramp():
    # a pure x-ramp has x-derivative 1 and y-derivative 0 in the interior
    xs = np.arange(8, dtype=np.float64)
    ramp = np.broadcast_to(xs, (8, 8)).copy()[None, None]
    g = sobel_gradients(ramp)
    np.testing.assert_allclose(g[0, 0, 1:-1, 1:-1], 1.0, atol=1e-12)
    np.testing.assert_allclose(g[0, 1, 1:-1, 1:-1], 0.0, atol=1e-12)


def test_sobel_kernel_weights_shape_and_transpose():
    w = sobel_kernel_weights(np.float64)
    assert w.shape == (2, 1, 3, 3)
    np.testing.assert_array_equal(w[1, 0], w[0, 0].T)


def test_gaussian_derivative_kernels_properties():
    kx, ky = gaussian_derivative_kernels(1.4)
    assert kx.shape == (11, 11)  # radius ceil(3*1.4) = 5
    # the table is exactly antisymmetric in x; summation order can still
    # leave sub-1e-15 residue in the total
    np.testing.assert_array_equal(kx[:, ::-1], -kx)
    assert abs(kx.sum()) < 1e-15
    np.testing.assert_array_equal(ky, kx.T)
    # an x-ramp cross-correlated with the derivative kernel gives a constant
    # response of magnitude 1 up to Gaussian truncation (radius 3 sigma)
    xs = np.arange(31, dtype=np.float64)
    ramp = np.broadcast_to(xs, (31, 31)).copy()[None, None]
    resp = conv2d(ramp, kx[None, None], spec=ConvSpec(11, 11))
    interior = resp[0, 0, 12:-12, 12:-12]
    np.testing.assert_allclose(interior, interior[0, 0], atol=1e-9)
    assert abs(abs(interior[0, 0]) - 1.0) < 2e-3


def test_gaussian_derivative_kernels_reject_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_derivative_kernels(0.0)
