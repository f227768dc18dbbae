import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbavatar import decoder as dec
from nbavatar.checks import decoder_full_gradient, decoder_layer_gradients
from nbavatar.errors import CacheMismatch, ShapeError


@pytest.fixture(scope="module")
def weights():
    return dec.DecoderWeights.init(6, 3, 16, True, seed=0)


def test_zero_weights_give_half_everywhere(weights):
    w = dec.DecoderWeights.init(6, 3, 16, True, seed=0)
    w.params = {k: np.zeros_like(v) for k, v in w.params.items()}
    rgb, alpha, _ = dec.decode(np.random.default_rng(0).standard_normal((16, 16, 6)), w)
    assert np.all(rgb == 0.5) and np.all(alpha == 0.5)


def test_output_shapes(weights):
    rgb, alpha, cache = dec.decode(np.zeros((64, 64, 6)), weights)
    assert rgb.shape == (64, 64, 3) and alpha.shape == (64, 64)
    assert cache is not None
    assert dec.decode(np.zeros((64, 64, 6)), weights, training=False)[2] is None


def test_parameter_count_is_deterministic():
    a = dec.DecoderWeights.init(6, 3, 16, seed=0)
    b = dec.DecoderWeights.init(6, 3, 16, seed=9)
    assert a.n_params() == b.n_params() and a.signature() == b.signature()
    # five levels stay constructible
    deep = dec.DecoderWeights.init(6, 5, 8, seed=0)
    rgb, _, _ = dec.decode(np.zeros((32, 32, 6)), deep)
    assert rgb.shape == (32, 32, 3)


def test_indivisible_size_rejected(weights):
    with pytest.raises(ShapeError):
        dec.decode(np.zeros((60, 64, 6)), weights)
    with pytest.raises(ShapeError):
        dec.decode(np.zeros((64, 64, 3)), weights)


def test_decode_is_deterministic(weights):
    x = np.random.default_rng(1).standard_normal((32, 32, 6))
    a = dec.decode(x, weights)[:2]
    b = dec.decode(x, weights)[:2]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_translation_covariance_without_norm():
    rng = np.random.default_rng(2)
    w = dec.DecoderWeights.init(6, 3, 8, instance_norm=False, seed=1)
    x = rng.standard_normal((96, 96, 6))
    shift = 2 ** 3
    shifted = np.zeros_like(x)
    shifted[shift:, shift:] = x[:-shift, :-shift]
    r1, a1, _ = dec.decode(x, w, training=False)
    r2, a2, _ = dec.decode(shifted, w, training=False)
    m = 40  # beyond the receptive field of the border
    assert np.abs(r2[m + shift:-m, m + shift:-m] - r1[m:-m - shift, m:-m - shift]).max() < 1e-5
    assert np.abs(a2[m + shift:-m, m + shift:-m] - a1[m:-m - shift, m:-m - shift]).max() < 1e-5


def test_translation_covariance_with_norm(weights):
    """A compact pattern on a zero background keeps its per-channel statistics when moved."""
    rng = np.random.default_rng(3)
    x = np.zeros((128, 128, 6))
    x[56:64, 56:64] = rng.standard_normal((8, 8, 6))
    shifted = np.roll(x, (8, 8), axis=(0, 1))
    r1, a1, _ = dec.decode(x, weights, training=False)
    r2, a2, _ = dec.decode(shifted, weights, training=False)
    lo, hi = 24, 104
    assert np.abs(r2[lo + 8:hi + 8, lo + 8:hi + 8] - r1[lo:hi, lo:hi]).max() < 1e-5
    assert np.abs(a2[lo + 8:hi + 8, lo + 8:hi + 8] - a1[lo:hi, lo:hi]).max() < 1e-5


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31))
def test_outputs_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    w = dec.DecoderWeights.init(6, 2, 8, seed=seed % 100)
    rgb, alpha, _ = dec.decode(rng.uniform(-10, 10, (16, 16, 6)), w)
    for out in (rgb, alpha):
        assert np.all(np.isfinite(out)) and np.all((out > 0) & (out < 1))


def test_instance_norm_statistics():
    x = np.random.default_rng(4).normal(3.0, 5.0, (8, 8, 4))
    y, _ = dec.instance_norm_forward(x, np.ones(4), np.zeros(4))
    np.testing.assert_allclose(y.mean(axis=(0, 1)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 1)), 1.0, atol=1e-5)


def test_leaky_relu_slope():
    y, _ = dec.leaky_relu_forward(np.array([-1.0, 2.0]))
    np.testing.assert_allclose(y, [-0.2, 2.0])


def test_upsample_preserves_constants_and_size():
    x = np.full((3, 5, 2), 0.7)
    y = dec.upsample2x_forward(x)
    assert y.shape == (6, 10, 2)
    np.testing.assert_allclose(y, 0.7)


def test_each_layer_matches_finite_differences():
    res = decoder_layer_gradients(seed=0)
    assert set(res) >= {"conv3x3_s1", "conv3x3_s2", "conv1x1", "instance_norm", "leaky_relu", "upsample2x",
                        "sigmoid", "composite_background"}
    for name, err in res.items():
        assert err < 1e-4, (name, err)


def test_full_network_matches_finite_differences():
    res = decoder_full_gradient(seed=0, n_params=100, size=16)
    assert res["params"] < 1e-3 and res["input"] < 1e-3


def test_zero_output_gradient(weights):
    x = np.random.default_rng(5).standard_normal((16, 16, 6))
    _, _, cache = dec.decode(x, weights)
    gw, gx = dec.decode_backward(np.zeros((16, 16, 3)), np.zeros((16, 16)), cache, weights)
    assert np.all(gx == 0) and all(np.all(g == 0) for g in gw.values())
    assert set(gw) == set(weights.params)


def test_cache_mismatch(weights):
    other = dec.DecoderWeights.init(6, 2, 16, seed=0)
    _, _, cache = dec.decode(np.zeros((16, 16, 6)), other)
    with pytest.raises(CacheMismatch):
        dec.decode_backward(np.zeros((16, 16, 3)), np.zeros((16, 16)), cache, weights)
    with pytest.raises(CacheMismatch):
        dec.decode_backward(np.zeros((16, 16, 3)), np.zeros((16, 16)), None, weights)


def test_float32_matches_float64():
    w64 = dec.DecoderWeights.init(6, 3, 8, seed=2)
    w32 = dec.DecoderWeights.init(6, 3, 8, seed=2, dtype=np.float32)
    x = np.random.default_rng(6).standard_normal((32, 32, 6))
    r64, _, _ = dec.decode(x, w64)
    r32, _, _ = dec.decode(x, w32)
    assert r32.dtype == np.float32
    assert np.abs(r64 - r32).max() < 1e-4


# ---------------------------------------------------------------- background

def test_composite_opaque_and_transparent():
    rng = np.random.default_rng(7)
    rgb = rng.uniform(0, 1, (4, 4, 3))
    bg = np.array([0.1, 0.5, 0.9])
    np.testing.assert_array_equal(dec.composite_background(rgb, np.ones((4, 4)), bg), rgb)
    np.testing.assert_array_equal(dec.composite_background(rgb, np.zeros((4, 4)), bg), np.broadcast_to(bg, rgb.shape))


def test_composite_arithmetic():
    out = dec.composite_background(np.ones((1, 1, 3)), np.full((1, 1), 0.25), np.zeros(3))
    np.testing.assert_allclose(out, 0.25)


def test_composite_alpha_gradient_includes_color_difference():
    rgb = np.full((1, 1, 3), 0.8)
    bg = np.array([0.2, 0.2, 0.2])
    _, d_alpha = dec.composite_background_backward(np.ones((1, 1, 3)), rgb, np.full((1, 1), 0.3), bg)
    assert d_alpha[0, 0] == pytest.approx(3 * 0.6)
