import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nbavatar import quaternion as quat
from nbavatar.billboards import (BillboardSet, bilinear_footprint, gaussian_alpha, init_billboards, logit,
                                 sample_texture, sigmoid)
from nbavatar.errors import ChannelMismatch, OutOfDomain
from nbavatar.mesh import spectral_coords, triangle_bases

unit = st.floats(-1.0, 1.0, allow_nan=False)


@pytest.fixture(scope="module")
def init_set():
    from nbavatar.synth import make_scene

    mesh, _ = make_scene("sphere", subdiv=2)
    coords = spectral_coords(mesh, 6)
    return mesh, coords, init_billboards(mesh, coords, 16, 6)


def brute_bilinear(tex, u, v):
    """Scalar reimplementation: walk to the enclosing cell and blend."""
    S = tex.shape[0]
    x = (u + 1) / 2 * (S - 1)
    y = (v + 1) / 2 * (S - 1)
    c = min(int(x), S - 2)
    r = min(int(y), S - 2)
    a, b = x - c, y - r
    top = tex[r][c] * (1 - a) + tex[r][c + 1] * a
    bot = tex[r + 1][c] * (1 - a) + tex[r + 1][c + 1] * a
    return top * (1 - b) + bot * b


# ---------------------------------------------------------------- init

def test_gaussian_alpha_center_and_corner():
    a = gaussian_alpha(17)
    assert a[8, 8] == pytest.approx(1.0)
    for r, c in [(0, 0), (0, 16), (16, 0), (16, 16)]:
        assert a[r, c] == pytest.approx(np.exp(-4.0), rel=1e-12)
    assert np.exp(-4.0) == pytest.approx(0.0183, abs=1e-4)


def test_init_offsets_zero_and_one_per_triangle(init_set):
    mesh, _, b = init_set
    assert len(b) == mesh.n_triangles == 320
    assert np.all(b.mu == 0)
    assert np.array_equal(b.anchor, np.arange(320))
    assert b.nt.shape == (320, 16, 16, 6)
    np.testing.assert_allclose(np.linalg.norm(b.q, axis=1), 1.0, atol=1e-12)


def test_init_scale_half_mean_edge(init_set):
    mesh, _, b = init_set
    p = mesh.rest_vertices[mesh.triangles]
    e = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2).mean(axis=1) / 2
    np.testing.assert_allclose(b.s, np.stack([e, e], 1), rtol=1e-12)


def test_init_billboards_lie_in_triangle_plane(init_set):
    mesh, _, b = init_set
    np.testing.assert_allclose(quat.to_matrix(b.q), triangle_bases(mesh.rest_vertices, mesh.triangles),
                               atol=1e-12)


def test_init_alpha_is_gaussian(init_set):
    *_, b = init_set
    np.testing.assert_allclose(b.alpha_tex()[5], gaussian_alpha(16), atol=1e-6)


def test_init_texels_within_vertex_range(init_set):
    mesh, coords, b = init_set
    vc = coords[mesh.triangles]
    lo, hi = vc.min(axis=1), vc.max(axis=1)
    assert np.all(b.nt >= lo[:, None, None, :] - 1e-12)
    assert np.all(b.nt <= hi[:, None, None, :] + 1e-12)


def test_init_texel_at_vertex_position_equals_vertex_coord(init_set):
    """The texel whose plane position is nearest to a vertex carries (about) that vertex's value."""
    mesh, coords, b = init_set
    # the billboard center is the triangle centroid: barycentric (1/3, 1/3, 1/3)
    S = 16
    center = b.nt[:, S // 2 - 1:S // 2 + 1, S // 2 - 1:S // 2 + 1].mean(axis=(1, 2))
    np.testing.assert_allclose(center, coords[mesh.triangles].mean(axis=1), atol=0.05)


def test_init_channel_mismatch(init_set):
    mesh, coords, _ = init_set
    with pytest.raises(ChannelMismatch):
        init_billboards(mesh, coords, 16, 3)


def test_set_indexing_and_subset(init_set):
    *_, b = init_set
    bb = b[4]
    assert bb.anchor == 4
    assert bb.alpha_tex.shape == (16, 16)
    sub = b.subset([3, 1])
    assert np.array_equal(sub.anchor, [3, 1])
    c = b.copy()
    c.mu[0] = 1
    assert np.all(b.mu[0] == 0)


# ---------------------------------------------------------------- sampling

def test_sample_corner_is_texel_zero():
    tex = np.arange(16.0).reshape(4, 4)
    value, texels, weights = sample_texture(tex, -1.0, -1.0)
    assert value == tex[0, 0]
    assert tuple(texels[np.argmax(weights)]) == (0, 0)


def test_sample_far_corner_is_last_texel():
    tex = np.arange(16.0).reshape(4, 4)
    assert sample_texture(tex, 1.0, 1.0)[0] == tex[3, 3]


def test_sample_midpoint_of_checker():
    tex = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert sample_texture(tex, 0.0, 0.0)[0] == pytest.approx(0.5)


def test_sample_exact_at_grid_points():
    rng = np.random.default_rng(0)
    tex = rng.standard_normal((5, 5, 3))
    g = np.linspace(-1, 1, 5)
    for r in range(5):
        for c in range(5):
            np.testing.assert_allclose(sample_texture(tex, g[c], g[r])[0], tex[r, c], atol=1e-15)


def test_sample_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    tex = rng.standard_normal((16, 16))
    for u, v in rng.uniform(-1, 1, (100, 2)):
        assert abs(sample_texture(tex, u, v)[0] - brute_bilinear(tex, u, v)) < 1e-7


def test_sample_out_of_domain():
    with pytest.raises(OutOfDomain):
        sample_texture(np.zeros((4, 4)), 1.01, 0.0)


@given(unit, unit)
def test_weights_sum_to_one_and_nonnegative(u, v):
    _, _, w = bilinear_footprint(u, v, 16)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w >= -1e-15)


@given(unit, unit, st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3))
def test_sampling_lipschitz(u, v, du, dv):
    rng = np.random.default_rng(5)
    S = 8
    tex = rng.standard_normal((S, S))
    u2, v2 = np.clip(u + du, -1, 1), np.clip(v + dv, -1, 1)
    eps = abs(u2 - u) + abs(v2 - v)
    max_step = max(np.abs(np.diff(tex, axis=0)).max(), np.abs(np.diff(tex, axis=1)).max())
    diff = abs(sample_texture(tex, u2, v2)[0] - sample_texture(tex, u, v)[0])
    assert diff <= eps * (S - 1) * max_step + 1e-12


@given(unit, unit)
def test_texel_gradient_is_bilinear_weight(u, v):
    rng = np.random.default_rng(1)
    tex = rng.standard_normal((6, 6))
    _, texels, w = sample_texture(tex, u, v)
    h = 1e-6
    for (r, c), wi in zip(texels, w):
        if wi == 0:
            continue
        t = tex.copy()
        t[r, c] += h
        plus = sample_texture(t, u, v)[0]
        t[r, c] -= 2 * h
        minus = sample_texture(t, u, v)[0]
        fd = (plus - minus) / (2 * h)
        assert abs(fd - wi) <= 1e-6 * max(abs(wi), 1e-3) + 1e-9


@given(st.floats(1e-6, 1 - 1e-6))
def test_alpha_logit_round_trip(p):
    assert abs(sigmoid(logit(p)) - p) < 1e-7


def test_sigmoid_range_no_overflow():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    y = sigmoid(x)
    assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))
    assert y[2] == 0.5
