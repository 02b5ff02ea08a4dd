import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twostream.gvf import (
    EdgeMap,
    GvfField,
    GvfFormatError,
    GvfParams,
    compute_gvf,
    edge_map,
    gvf_residual,
    gvf_solve,
    normalize_field,
    read_gvf,
    spatial_gradient,
    to_luma,
    write_gvf,
)


# -- independent loop oracles -------------------------------------------------

def loop_gradient(p):
    H, W = p.shape
    fx = np.zeros((H, W))
    fy = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            if j == 0:
                fx[i, j] = p[i, 1] - p[i, 0]
            elif j == W - 1:
                fx[i, j] = p[i, W - 1] - p[i, W - 2]
            else:
                fx[i, j] = (p[i, j + 1] - p[i, j - 1]) / 2
            if i == 0:
                fy[i, j] = p[1, j] - p[0, j]
            elif i == H - 1:
                fy[i, j] = p[H - 1, j] - p[H - 2, j]
            else:
                fy[i, j] = (p[i + 1, j] - p[i - 1, j]) / 2
    return fx, fy


def loop_smooth(p, sigma):
    radius = int(4.0 * sigma + 0.5)
    k = [math.exp(-0.5 * (t / sigma) ** 2) for t in range(-radius, radius + 1)]
    s = sum(k)
    k = [x / s for x in k]
    H, W = p.shape
    tmp = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            tmp[i, j] = sum(k[t + radius] * p[min(max(i + t, 0), H - 1), j] for t in range(-radius, radius + 1))
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            out[i, j] = sum(k[t + radius] * tmp[i, min(max(j + t, 0), W - 1)] for t in range(-radius, radius + 1))
    return out


def loop_gvf(edge, mu, dt, iters):
    fx, fy = loop_gradient(edge)
    H, W = edge.shape
    u, v = fx.copy(), fy.copy()
    for _ in range(iters):
        nu, nv = np.zeros((H, W)), np.zeros((H, W))
        for i in range(H):
            for j in range(W):
                b = fx[i, j] ** 2 + fy[i, j] ** 2
                for cur, f, new in ((u, fx, nu), (v, fy, nv)):
                    up = cur[max(i - 1, 0), j]
                    dn = cur[min(i + 1, H - 1), j]
                    lf = cur[i, max(j - 1, 0)]
                    rt = cur[i, min(j + 1, W - 1)]
                    lap = up + dn + lf + rt - 4 * cur[i, j]
                    new[i, j] = cur[i, j] + dt * (mu * lap - (cur[i, j] - f[i, j]) * b)
        u, v = nu, nv
    return u, v


def random_image(seed, size=20):
    rng = np.random.default_rng(seed)
    img = rng.random((size, size)) * 0.3
    y, x = np.mgrid[:size, :size]
    cy, cx = rng.integers(4, size - 4, 2)
    img[(x - cx) ** 2 + (y - cy) ** 2 < rng.integers(6, 30)] += 0.6
    return img


# -- spatial_gradient ------------------------------------------------------------

def test_gradient_ramps():
    y, x = np.mgrid[:6, :7].astype(float)
    fx, fy = spatial_gradient(x)
    np.testing.assert_array_equal(fx[:, 1:-1], 1.0)
    np.testing.assert_array_equal(fy, 0.0)
    fx, fy = spatial_gradient(y)
    np.testing.assert_array_equal(fy[1:-1], 1.0)
    np.testing.assert_array_equal(fx, 0.0)


def test_gradient_matches_loop_oracle():
    p = np.random.default_rng(0).standard_normal((6, 6))
    fx, fy = spatial_gradient(p)
    ox, oy = loop_gradient(p)
    np.testing.assert_array_equal(fx, ox)
    np.testing.assert_array_equal(fy, oy)


# -- edge_map ----------------------------------------------------------------------

def test_edge_map_constant_is_zero():
    e = edge_map(np.full((10, 12), 0.4))
    assert e.values.shape == (10, 12)
    np.testing.assert_array_equal(e.values, 0.0)


def test_edge_map_step_peak_next_to_edge():
    img = np.zeros((12, 12))
    c = 6
    img[:, c:] = 1.0
    e = edge_map(img, 1.0).values
    cols = np.argmax(e, axis=1)
    assert set(cols.tolist()) <= {c - 1, c}
    assert e.max() == 1.0 and e.min() >= 0.0


def test_edge_map_matches_hand_rolled_oracle():
    img = np.zeros((8, 8))
    img[2:6, 3:7] = 0.8
    img += 0.1
    sm = loop_smooth(img, 1.0)
    gx, gy = loop_gradient(sm)
    e = gx ** 2 + gy ** 2
    e /= e.max()
    np.testing.assert_allclose(edge_map(img, 1.0).values, e, rtol=0, atol=1e-12)


def test_edge_map_too_small():
    with pytest.raises(ValueError):
        edge_map(np.zeros((2, 5)))


def test_luma_weights():
    img = np.zeros((3, 3, 3))
    img[..., 0], img[..., 1], img[..., 2] = 1.0, 0.5, 0.25
    np.testing.assert_allclose(to_luma(img), 0.299 + 0.587 * 0.5 + 0.114 * 0.25)


# -- gvf_solve ------------------------------------------------------------------------

def test_params_defaults_and_stability():
    p = GvfParams()
    assert (p.mu, p.iterations, p.step) == (0.2, 80, 1.0)
    assert GvfParams(mu=0.5).step == 0.5
    with pytest.raises(ValueError, match="stability"):
        gvf_solve(EdgeMap(np.zeros((4, 4))), GvfParams(mu=0.5, dt=1.0))
    with pytest.raises(ValueError):
        GvfParams(mu=0.0)
    with pytest.raises(ValueError):
        GvfParams(iterations=0)


def test_zero_edge_zero_field():
    for iters in (1, 7, 80):
        f = gvf_solve(EdgeMap(np.zeros((9, 9))), GvfParams(iterations=iters))
        np.testing.assert_array_equal(f.u, 0.0)
        np.testing.assert_array_equal(f.v, 0.0)
        assert f.residual == 0.0


def test_solver_matches_dense_loop_oracle():
    rng = np.random.default_rng(1)
    e = np.clip(rng.random((8, 8)) ** 2, 0, 1)
    f = gvf_solve(EdgeMap(e), GvfParams(mu=0.2, iterations=10, dt=1.0))
    ou, ov = loop_gvf(e, 0.2, 1.0, 10)
    np.testing.assert_allclose(f.u, ou, rtol=0, atol=1e-10)
    np.testing.assert_allclose(f.v, ov, rtol=0, atol=1e-10)


def test_operating_point_finite_and_residual_drops():
    e = edge_map(random_image(2))
    f80 = gvf_solve(e, GvfParams(mu=0.2, iterations=80, dt=1.0))
    f1 = gvf_solve(e, GvfParams(mu=0.2, iterations=1, dt=1.0))
    assert np.all(np.isfinite(f80.u)) and np.all(np.isfinite(f80.v))
    assert f80.residual < f1.residual


def test_row_parallel_is_bit_identical():
    e = edge_map(random_image(3, 23))
    a = gvf_solve(e, GvfParams(iterations=15))
    b = gvf_solve(e, GvfParams(iterations=15), workers=4)
    assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)


# -- residual ---------------------------------------------------------------------------

def test_residual_zero_case():
    z = np.zeros((5, 5))
    assert gvf_residual(GvfField(z, z), EdgeMap(z), 0.2) == 0.0


def test_residual_single_pixel_by_hand():
    # centre spike: fx row 1 = [1, 0, -1], fy column 1 = [1, 0, -1]^T, so b = 1
    # on the four edge-centres. With u = v = 0 the residual planes are fx*b and
    # fy*b: two unit entries each, over 2 * 9 cells -> sqrt(4 / 18).
    e = np.zeros((3, 3))
    e[1, 1] = 1.0
    z = np.zeros((3, 3))
    assert gvf_residual(GvfField(z, z), EdgeMap(e), 0.2) == pytest.approx(math.sqrt(2) / 3, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_residual_monotone_log_spaced(seed):
    e = edge_map(random_image(10 + seed))
    counts = sorted(set(np.geomspace(1, 80, 8).round().astype(int).tolist()))
    assert len(counts) == 8
    res = [gvf_solve(e, GvfParams(iterations=k)).residual for k in counts]
    assert all(b <= a for a, b in zip(res, res[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_boundedness(seed):
    e = edge_map(random_image(20 + seed))
    fx, fy = spatial_gradient(e.values)
    f = gvf_solve(e)
    assert max(np.abs(f.u).max(), np.abs(f.v).max()) <= max(np.abs(fx).max(), np.abs(fy).max()) + 1e-9


# -- equivariance -----------------------------------------------------------------------

def check_equivariance(img):
    base = compute_gvf(img)
    fh = compute_gvf(img[:, ::-1])
    np.testing.assert_allclose(fh.u, -base.u[:, ::-1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(fh.v, base.v[:, ::-1], rtol=0, atol=1e-12)
    fv = compute_gvf(img[::-1, :])
    np.testing.assert_allclose(fv.u, base.u[::-1, :], rtol=0, atol=1e-12)
    np.testing.assert_allclose(fv.v, -base.v[::-1, :], rtol=0, atol=1e-12)
    # np.rot90 (counter-clockwise): u' = rot(v), v' = -rot(u)
    fr = compute_gvf(np.rot90(img))
    np.testing.assert_allclose(fr.u, np.rot90(base.v), rtol=0, atol=1e-12)
    np.testing.assert_allclose(fr.v, -np.rot90(base.u), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_flip_rotation_equivariance(seed):
    check_equivariance(random_image(30 + seed, 16))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(6, 14))
def test_equivariance_property(seed, size):
    check_equivariance(np.random.default_rng(seed).random((size, size)))


# -- normalization ------------------------------------------------------------------------

def test_normalize_modes():
    rng = np.random.default_rng(4)
    f = GvfField(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)))
    assert normalize_field(f, "none") is f
    m = normalize_field(f, "max_magnitude")
    assert np.sqrt(m.u ** 2 + m.v ** 2).max() == pytest.approx(1.0, abs=1e-15)
    c = normalize_field(GvfField(np.full((3, 3), 3.0), np.full((3, 3), 4.0)), "unit")
    np.testing.assert_allclose(c.u, 0.6, atol=1e-15)
    np.testing.assert_allclose(c.v, 0.8, atol=1e-15)
    z = normalize_field(GvfField(np.zeros((2, 2)), np.zeros((2, 2))), "unit")
    np.testing.assert_array_equal(z.u, 0.0)
    np.testing.assert_array_equal(normalize_field(GvfField(np.zeros((2, 2)), np.zeros((2, 2))), "max_magnitude").u, 0)
    with pytest.raises(ValueError):
        normalize_field(f, "zscore")


# -- GVF2 files ---------------------------------------------------------------------------

def test_gvf2_round_trip(tmp_path):
    f = compute_gvf(random_image(5, 12)[:, :10])
    path = tmp_path / "a.gvf"
    write_gvf(path, f)
    raw = path.read_bytes()
    assert raw[:4] == b"GVF2" and len(raw) == 24 + 2 * 4 * 120
    g = read_gvf(path)
    assert g.shape == (12, 10)
    assert g.params.mu == pytest.approx(0.2) and g.params.iterations == 80
    np.testing.assert_array_equal(g.u, f.u.astype(np.float32))
    np.testing.assert_array_equal(g.v, f.v.astype(np.float32))
    write_gvf(tmp_path / "b.gvf", g)
    assert (tmp_path / "b.gvf").read_bytes() == raw


def test_gvf2_corruption(tmp_path):
    p = tmp_path / "bad.gvf"
    p.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(GvfFormatError, match="magic"):
        read_gvf(p)
    f = compute_gvf(random_image(6, 10))
    write_gvf(p, f)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(GvfFormatError):
        read_gvf(p)
