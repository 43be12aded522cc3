import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiface.errors import InputDomainError
from tiface.iface import (
    INV_STD_FLOOR, SDFBatch, eikonal_loss, extract_depth_normal, grid_points, iface_loss_config, iface_total_loss,
    init_sdf_field, neus_alpha, query_sdf, render_ray_sdf, render_rays_sdf, sdf_gradient, sparsity_loss,
)
from tiface.render import Ray
from tiface.tface import LossConfig

from oracles import central_fd, rel_err, trilinear_corner_sum

AABB = np.array([[-1.0] * 3, [1.0] * 3])


def plane_field(res=(9, 9, 9), inv_std=30.0, offset=0.0):
    f = init_sdf_field(res, AABB, inv_std=inv_std)
    f.sdf_values[...] = grid_points(res, AABB)[..., 2] - offset
    return f


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestInit:
    def test_unit_gradient(self, rng):
        f = init_sdf_field((32, 32, 32), AABB)
        g = sdf_gradient(f, rng.uniform(-0.9, 0.9, (1000, 3)))
        assert np.max(np.abs(np.linalg.norm(g, axis=1) - 1.0)) < 0.1

    def test_inv_std_positive(self):
        with pytest.raises(InputDomainError):
            init_sdf_field((4, 4, 4), AABB, inv_std=0.0)


class TestQuerySDF:
    def test_center_of_sphere(self):
        f = init_sdf_field((17, 17, 17), AABB)
        assert abs(query_sdf(f, [0.0, 0.0, 0.0]) + 0.5) < 2.0 / 16

    def test_vertex_exact(self, rng):
        f = init_sdf_field((5, 6, 7), AABB, init="random", seed=1)
        pts = grid_points(f.resolution, AABB)
        assert query_sdf(f, pts[2, 3, 4]) == f.sdf_values[2, 3, 4]

    def test_corner_sum_oracle(self, rng):
        f = init_sdf_field((5, 6, 7), AABB, init="random", seed=2)
        pts = rng.uniform(-1, 1, (100, 3))
        u = (pts + 1) / 2 * (np.array(f.resolution) - 1)
        ref = np.array([trilinear_corner_sum(f.sdf_values, p) for p in u])
        np.testing.assert_allclose(query_sdf(f, pts), ref, atol=1e-12, rtol=0)

    def test_outside_adds_offset(self):
        f = plane_field()
        assert abs(query_sdf(f, [1.5, 0.0, 0.25]) - (0.25 + 0.5)) < 1e-12

    def test_non_finite(self):
        with pytest.raises(InputDomainError):
            query_sdf(plane_field(), [0.0, np.inf, 0.0])


class TestSDFGradient:
    def test_plane(self, rng):
        g = sdf_gradient(plane_field(), rng.uniform(-1, 1, (50, 3)))
        np.testing.assert_allclose(g, np.tile([0.0, 0.0, 1.0], (50, 1)), atol=1e-12)

    def test_constant(self, rng):
        f = plane_field()
        f.sdf_values[...] = 0.3
        np.testing.assert_allclose(sdf_gradient(f, rng.uniform(-1, 1, (20, 3))), 0.0, atol=1e-15)

    def test_fd_oracle(self, rng):
        f = init_sdf_field((6, 6, 6), AABB, init="random", seed=3)
        h = 1e-6
        for _ in range(30):
            # keep away from cell faces so the stencil stays in one cell
            cell = rng.integers(0, 5, 3)
            p = -1 + (cell + rng.uniform(0.1, 0.9, 3)) * 0.4
            num = np.array([(query_sdf(f, p + h * e) - query_sdf(f, p - h * e)) / (2 * h) for e in np.eye(3)])
            assert rel_err(sdf_gradient(f, p), num, 1e-3) < 1e-6


class TestNeusAlpha:
    def test_no_crossing(self):
        assert neus_alpha(0.3, 0.3, 10.0) == 0.0

    def test_increasing_is_zero(self):
        assert neus_alpha(-0.1, 0.2, 10.0) == 0.0

    def test_hard_limit(self):
        assert neus_alpha(0.1, -0.1, 1e6) > 1 - 1e-12

    def test_closed_form(self):
        expect = (sig(1.0) - sig(-1.0)) / sig(1.0)
        assert abs(neus_alpha(0.1, -0.1, 10.0) - expect) < 1e-14
        assert abs(expect - 0.6322) < 1e-4

    def test_bad_s(self):
        with pytest.raises(InputDomainError):
            neus_alpha(0.1, 0.0, 0.0)

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-3, 1e4))
    def test_range(self, a, b, s):
        al = neus_alpha(a, b, s)
        assert 0.0 <= al <= 1.0
        if b >= a:
            assert al == 0.0

    def test_gradient_closed_form(self, rng):
        for _ in range(20):
            a, b = np.sort(rng.uniform(-1, 1, 2))[::-1]
            s = rng.uniform(1, 50)
            _, (ga, gb, gs) = neus_alpha(a, b, s, return_grad=True)
            h = 1e-7
            assert abs(ga - (neus_alpha(a + h, b, s) - neus_alpha(a - h, b, s)) / (2 * h)) < 1e-5 * max(1, abs(ga))
            assert abs(gb - (neus_alpha(a, b + h, s) - neus_alpha(a, b - h, s)) / (2 * h)) < 1e-5 * max(1, abs(gb))
            assert abs(gs - (neus_alpha(a, b, s + h) - neus_alpha(a, b, s - h)) / (2 * h)) < 1e-5 * max(1, abs(gs))


def _alpha_chain(profile, t, s):
    """Independent per-interval alpha and transmittance product in plain Python."""
    trans, op = 1.0, 0.0
    for i in range(len(t) - 1):
        a, b = s * profile(t[i]), s * profile(t[i + 1])
        al = max((sig(a) - sig(b)) / sig(a), 0.0)
        op += trans * al
        trans *= 1 - al
    return op


class TestRenderSDF:
    def test_positive_field_oracle(self):
        f = plane_field(inv_std=5.0, offset=-2.0)  # d = z + 2 > 0 everywhere inside
        ray = Ray(np.array([0.1, 0.2, -1.0]), np.array([0.0, 0.0, 1.0]), 0.0, 2.0)
        r = render_ray_sdf(f, ray, 64)
        edges = np.linspace(0, 2, 65)
        assert r.opacity < 0.05
        assert abs(r.opacity - _alpha_chain(lambda t: -1 + t + 2, edges, 5.0)) < 1e-12

    def test_crossing_oracle(self):
        f = plane_field(inv_std=200.0)
        # moving down through d = z
        ray = Ray(np.array([0.1, 0.2, 1.0]), np.array([0.0, 0.0, -1.0]), 0.0, 2.0)
        r = render_ray_sdf(f, ray, 64)
        edges = np.linspace(0, 2, 65)
        assert r.opacity > 0.95
        assert abs(r.opacity - _alpha_chain(lambda t: 1 - t, edges, 200.0)) < 1e-12

    def test_weights_valid(self, rng):
        f = init_sdf_field((10, 10, 10), AABB, init="random", seed=4)
        o = rng.uniform(-3, 3, (50, 3))
        d = -o / np.linalg.norm(o, axis=1, keepdims=True)
        out = render_rays_sdf(f, o, d, 32, rng.uniform(size=(50, 32)))
        assert np.all(out.weights >= 0)
        assert np.all(out.weights.sum(axis=1) <= 1 + 1e-12)


class TestSparsity:
    def _field_with_values(self, vals):
        # constant field: every point of the sample set sees the same value
        f = plane_field()
        out = []
        for v in vals:
            f.sdf_values[...] = v
            out.append(sparsity_loss(f, [[0.0, 0.0, 0.0]]))
        return out

    def test_zero(self):
        assert self._field_with_values([0.0]) == [1.0]

    def test_single(self):
        (v,) = self._field_with_values([2.0])
        assert abs(v - math.exp(-1)) < 1e-15
        (w,) = self._field_with_values([-2.0])
        assert v == w

    def test_three_values(self):
        f = plane_field(offset=0.0)
        # d = z, so points at heights 0, 2, 4 (beyond the box the offset continues linearly)
        pts = [[0, 0, 0.0], [0, 0, 2.0], [0, 0, 4.0]]
        assert abs(sparsity_loss(f, pts) - (1 + math.exp(-1) + math.exp(-2)) / 3) < 1e-12

    def test_default_gamma(self):
        assert iface_loss_config().sparsity_exponent == 0.5

    def test_signed_flag(self):
        f = plane_field()
        assert abs(sparsity_loss(f, [[0, 0, -0.5]], signed=True) - math.exp(0.25)) < 1e-14

    def test_empty(self):
        with pytest.raises(InputDomainError):
            sparsity_loss(plane_field(), np.zeros((0, 3)))

    @given(st.lists(st.floats(-0.9, 0.9), min_size=1, max_size=10))
    def test_range_and_monotone(self, zs):
        f = plane_field()
        pts = np.array([[0.0, 0.0, z] for z in zs])
        v = sparsity_loss(f, pts)
        assert 0 < v <= 1
        pts2 = pts.copy()
        pts2[0, 2] = np.sign(pts[0, 2] or 1.0) * (abs(pts[0, 2]) + 0.05)
        assert sparsity_loss(f, pts2) < v


class TestEikonal:
    def test_plane(self, rng):
        assert eikonal_loss(plane_field(), rng.uniform(-1, 1, (100, 3))) < 1e-24

    def test_constant(self, rng):
        f = plane_field()
        f.sdf_values[...] = 1.0
        assert eikonal_loss(f, rng.uniform(-1, 1, (10, 3))) == 1.0

    def test_doubled(self, rng):
        f = plane_field()
        f.sdf_values *= 2
        assert abs(eikonal_loss(f, rng.uniform(-1, 1, (10, 3))) - 1.0) < 1e-12

    def test_empty(self):
        with pytest.raises(InputDomainError):
            eikonal_loss(plane_field(), np.zeros((0, 3)))

    def test_gradient_fd(self, rng):
        f = init_sdf_field((4, 4, 4), AABB, init="random", seed=5)
        pts = rng.uniform(-1, 1, (40, 3))
        _, g = eikonal_loss(f, pts, return_grad=True)

        def loss(x):
            saved = f.sdf_values.copy()
            f.sdf_values[...] = x.reshape(saved.shape)
            v = eikonal_loss(f, pts)
            f.sdf_values[...] = saved
            return v

        num = central_fd(loss, f.sdf_values.ravel().copy())
        assert rel_err(g, num, 1e-3 * np.max(np.abs(num))) < 1e-6


def _batch(rng, n=5, q=12):
    o = rng.uniform(-0.5, 0.5, (n, 3))
    o[:, 2] = -3.0
    d = rng.normal(0, 0.1, (n, 3))
    d[:, 2] = 1.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return SDFBatch(o, d, rng.uniform(0, 1, (n, 3)), (rng.uniform(size=n) > 0.5).astype(float),
                    rng.uniform(size=(n, q)), rng.uniform(-1, 1, (16, 3)))


class TestTotalLoss:
    def test_perfect_render(self, rng):
        f = init_sdf_field((6, 6, 6), AABB, seed=1)
        b = _batch(rng)
        b.target = render_rays_sdf(f, b.origins, b.dirs, 12, b.jitter).rgb
        cfg = LossConfig(alpha_reg=0, beta_mask=0, gamma_sparsity=0, mask_loss="bce")
        assert iface_total_loss(f, b, cfg, 12)[0] == 0.0

    def test_mask_only_matching(self, rng):
        f = plane_field(inv_std=2000.0, res=(6, 6, 6))
        b = _batch(rng)
        b.mask[:] = 1.0
        b.origins[:, 2] = 3.0
        b.dirs[:, 2] *= -1
        cfg = LossConfig(alpha_reg=0, beta_mask=1, gamma_sparsity=0, mask_loss="bce", lambda_mask=1.0)
        b.target = render_rays_sdf(f, b.origins, b.dirs, 12, b.jitter).rgb
        assert iface_total_loss(f, b, cfg, 12)[0] < 1e-6

    def test_gradient_fd(self, rng):
        f = init_sdf_field((5, 5, 5), AABB, seed=2, inv_std=4.0)
        f.sdf_values += rng.normal(0, 0.05, f.sdf_values.shape)
        b = _batch(rng, 4, 10)
        cfg = LossConfig(alpha_reg=0.5, beta_mask=1, gamma_sparsity=0.5, mask_loss="bce", lambda_mask=1.0,
                         sparsity_exponent=0.5)
        _, _, g = iface_total_loss(f, b, cfg, 10, background=0.3)
        for name in ("sdf", "features", "inv_std"):
            arr = f.params()[name]

            def loss(x, arr=arr):
                saved = arr.copy()
                arr[...] = x.reshape(arr.shape)
                v = iface_total_loss(f, b, cfg, 10, 0.3, need_grad=False)[0]
                arr[...] = saved
                return v

            num = central_fd(loss, arr.ravel().copy())
            assert rel_err(g[name], num, 1e-3 * np.max(np.abs(num)) + 1e-12) < 1e-4

    def test_workers_deterministic(self, rng):
        f = init_sdf_field((8, 8, 8), AABB, seed=3)
        b = _batch(rng, 30, 16)
        cfg = iface_loss_config()
        _, _, g1 = iface_total_loss(f, b, cfg, 16, workers=1)
        _, _, g2 = iface_total_loss(f, b, cfg, 16, workers=4)
        for k in g1:
            assert np.max(np.abs(g1[k] - g2[k])) < 1e-12


class TestDepthNormal:
    def test_plane(self):
        f = plane_field(inv_std=500.0)
        ray = Ray(np.array([0.2, -0.1, 1.0]), np.array([0.0, 0.0, -1.0]), 0.0, 2.0)
        depth, n = extract_depth_normal(f, ray, 128)
        assert abs(depth - 1.0) < 2.0 / 128
        np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)

    def test_empty(self):
        f = plane_field(inv_std=5.0, offset=-5.0)
        ray = Ray(np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, 1.0]), 0.0, 2.0)
        depth, n = extract_depth_normal(f, ray)
        assert depth == 2.0 and not n.any()

    def test_sphere_normals_radial(self, rng):
        f = init_sdf_field((96, 96, 96), AABB, inv_std=300.0)
        for _ in range(20):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            o = -2.5 * d + rng.uniform(-0.2, 0.2, 3)
            ray = Ray(o, d, 1.0, 4.0)
            depth, n = extract_depth_normal(f, ray, 256)
            hit = o + depth * d
            radial = hit / np.linalg.norm(hit)
            assert math.degrees(math.acos(min(1.0, float(n @ radial)))) < 2.0


def test_inv_std_floor_constant():
    assert INV_STD_FLOOR == 1e-3
