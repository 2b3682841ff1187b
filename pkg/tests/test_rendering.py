import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from satgeo import diff
from satgeo.camera import make_rays
from satgeo.field import FieldConfig, init_params
from satgeo.rendering import (alphas, color_loss, composite, render_depth, render_rays,
                              render_weights, sample_deltas, stratified_sample, transmittance,
                              uncertainty_loss)


def slab_depth(lo, hi, sigma, n, t_far=1.0):
    t = stratified_sample(0.0, t_far, n).astype(np.float64)
    s = np.where((t >= lo) & (t <= hi), sigma, 0.0)
    w = render_weights(diff.Tensor(s), sample_deltas(t, 0.0))
    return float(composite(w, t).data[0])


class TestStratified:
    def test_midpoints(self):
        np.testing.assert_allclose(stratified_sample(0.0, 1.0, 4)[0], [0.125, 0.375, 0.625, 0.875])

    def test_bin_membership_and_mean(self):
        rng = np.random.default_rng(0)
        t = stratified_sample(np.zeros(10_000), np.ones(10_000), 8, rng).astype(np.float64)
        k = np.arange(8)
        assert np.all((t >= k / 8) & (t < (k + 1) / 8))
        assert abs(t.mean() - 0.5) < 0.01
        assert np.all(np.diff(t, axis=1) > 0)

    def test_seeded(self):
        a = stratified_sample(0.0, 2.0, 16, np.random.default_rng(3))
        b = stratified_sample(0.0, 2.0, 16, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            stratified_sample(0.0, 1.0, 1)

    def test_deltas_start_from_near(self):
        t = np.array([[0.3, 0.5, 0.9]])
        np.testing.assert_allclose(sample_deltas(t, 0.1), [[0.2, 0.2, 0.4]])


class TestAlphaTransmittance:
    def test_alpha_values(self):
        a = alphas(np.array([0.0, np.log(2.0), 1e3]), np.array([1.0, 1.0, 1.0])).data
        np.testing.assert_allclose(a, [0.0, 0.5, 1.0], rtol=1e-7)
        assert np.all(np.isfinite(a)) and a[2] <= 1.0

    def test_transmittance_examples(self):
        np.testing.assert_array_equal(transmittance(np.zeros((1, 5))).data, 1.0)
        np.testing.assert_allclose(transmittance(np.array([[0.5, 0.5, 0.5]])).data, [[1, 0.5, 0.25]])

    @given(arrays(np.float64, (3, 12), elements=st.floats(0, 1)))
    @settings(max_examples=100, deadline=None)
    def test_prefix_products(self, a):
        T = transmittance(a).data
        for r in range(3):
            for i in range(12):
                assert T[r, i] == pytest.approx(np.prod(1 - a[r, :i]), rel=1e-12, abs=1e-300)
        assert np.all(np.diff(T, axis=1) <= 0) and np.all((T >= 0) & (T <= 1))

    @given(arrays(np.float64, (4, 9), elements=st.floats(0, 50)),
           arrays(np.float64, (4, 9), elements=st.floats(1e-3, 1)))
    @settings(max_examples=100, deadline=None)
    def test_weight_sum_telescopes(self, sigma, delta):
        w = render_weights(sigma, delta).data
        a = 1 - np.exp(-sigma * delta)
        np.testing.assert_allclose(w.sum(-1), 1 - np.prod(1 - a, axis=-1), atol=1e-12)
        assert np.all(w.sum(-1) <= 1 + 1e-12)


class TestComposite:
    def test_opaque_sample(self):
        t = np.array([[0.1, 0.4, 0.7, 0.9]])
        w = render_weights(np.array([[0, 0, 1e4, 0.0]]), sample_deltas(t, 0.0))
        assert float(composite(w, t).data[0]) == pytest.approx(0.7, abs=1e-9)

    def test_transparent(self):
        t = stratified_sample(0.0, 1.0, 8).astype(np.float64)
        w = render_weights(np.zeros((1, 8)), sample_deltas(t, 0.0))
        assert composite(w, t).data[0] == 0.0
        np.testing.assert_array_equal(composite(w, np.ones((1, 8, 3))).data, 0.0)

    def test_dense_slab(self):
        fine = slab_depth(0.4, 0.6, 50.0, 10_000)
        # continuous answer: 0.4 + (1 - 11 e^-10) / 50
        assert fine == pytest.approx(0.4 + (1 - 11 * np.exp(-10.0)) / 50, abs=2e-4)
        coarse = slab_depth(0.4, 0.6, 50.0, 256)
        assert 0.4 <= coarse <= 0.42
        assert abs(coarse - fine) < 2 / 256

    @pytest.mark.parametrize("shift", [0.05, 0.1, 0.2])
    def test_depth_follows_slab(self, shift):
        base = slab_depth(0.3, 0.45, 80.0, 512)
        moved = slab_depth(0.3 + shift, 0.45 + shift, 80.0, 512)
        assert moved - base == pytest.approx(shift, abs=2 / 512)

    def test_order_matters(self, rng):
        t = np.linspace(0.1, 1.0, 6)[None]
        sigma = rng.uniform(0.5, 5, (1, 6))
        v = rng.uniform(0, 1, (1, 6))
        d = sample_deltas(t, 0.0)
        a = composite(render_weights(sigma, d), v).data
        b = composite(render_weights(sigma[:, ::-1], d), v[:, ::-1]).data
        assert not np.allclose(a, b)
        single = np.zeros((1, 6))
        single[0, 2] = 3.0
        a = composite(render_weights(single, np.full((1, 6), 0.2)), v).data
        b = composite(render_weights(single[:, ::-1], np.full((1, 6), 0.2)), v[:, ::-1]).data
        np.testing.assert_allclose(a, b, rtol=1e-14)


class TestLosses:
    def test_color_examples(self, rng):
        c = rng.uniform(0, 1, (5, 3))
        assert color_loss(c, c).data == 0.0
        assert color_loss(np.ones((4, 3)), np.zeros((4, 3))).data == pytest.approx(3.0)

    def test_color_matches_loop(self, rng):
        a, b = rng.uniform(0, 1, (33, 3)), rng.uniform(0, 1, (33, 3))
        want = sum(sum((a[i, k] - b[i, k]) ** 2 for k in range(3)) for i in range(33)) / 33
        assert float(color_loss(a, b).data) == pytest.approx(want, rel=1e-12)

    def test_uncertainty_closed_form(self, rng):
        c = rng.uniform(0, 1, (6, 3))
        got = float(uncertainty_loss(c, c, np.full(6, 0.05)).data)
        assert got == pytest.approx((np.log(0.05) + 3.0) / 2, rel=1e-12)
        assert (np.log(0.05) + 3.0) / 2 > 0

    def test_uncertainty_large_beta(self):
        c, g = np.zeros((1, 3)), np.full((1, 3), 0.5)
        beta = np.array([1e4])
        got = float(uncertainty_loss(c, g, beta).data)
        assert got == pytest.approx((np.log(1e4) + 3) / 2, rel=1e-8)

    def test_uncertainty_gated_by_tau(self):
        c, g = np.zeros((2, 3)), np.full((2, 3), 0.2)
        a = uncertainty_loss(c, g, np.array([0.3, 0.8]), np.array([0.5, 0.25]))
        b = uncertainty_loss(c, g, np.array([0.05 + 0.15, 0.05 + 0.2]))
        assert float(a.data) == pytest.approx(float(b.data), rel=1e-12)

    def test_beta_stationary_point(self):
        c, g = np.zeros((1, 3)), np.array([[0.3, 0.4, 0.0]])  # squared error 0.25

        def dbeta(beta):
            b = diff.Tensor(np.array([beta]), requires_grad=True)
            (gb,) = diff.backward(uncertainty_loss(c, g, b), wrt=[b])
            return gb[0]

        # d/dbeta [e / (2 beta^2) + log(beta) / 2] vanishes at beta^2 = 2e
        root = np.sqrt(0.5)
        assert dbeta(root - 0.02) < 0 < dbeta(root + 0.02)
        assert dbeta(root) == pytest.approx(0.0, abs=1e-12)
        f = lambda b: uncertainty_loss(c, g, b)
        assert diff.grad_check(f, diff.Tensor(np.array([0.37])), eps=1e-6) < 1e-6

    def test_total_loss_gradient_wrt_sigma(self, rng):
        t = stratified_sample(0.0, 1.0, 12).astype(np.float64)
        t = np.repeat(t, 4, axis=0)
        v = rng.uniform(0, 1, (4, 12, 3))
        gt = rng.uniform(0, 1, (4, 3))

        def f(sigma):
            w = render_weights(sigma, sample_deltas(t, np.zeros(4)))
            return color_loss(composite(w, v), gt) + diff.mean(composite(w, t))

        assert diff.grad_check(f, diff.Tensor(rng.uniform(0, 8, (4, 12))), eps=1e-6) < 1e-3


class TestRenderRays:
    def test_constant_field(self, tiny_dataset):
        cfg = FieldConfig(n_images=tiny_dataset.n_images, width=16, depth=2, head_width=8)
        p = init_params(cfg, seed=0, zero_final=True, dtype=np.float64)
        ids = np.array([0, 1, 2, 1])
        pix = np.array([[0, 0], [3, 4], [5, 5], [15, 0]])
        rays = make_rays(tiny_dataset.cams, tiny_dataset.frame, ids, pix, dtype=np.float64)
        t = stratified_sample(rays.t_near, rays.t_far, 32)
        res = render_rays(p, rays, t, tiny_dataset.cams)
        opacity = 1 - np.exp(-np.log(2.0) * t[:, -1])  # absorption stops at the last sample
        np.testing.assert_allclose(res.weights.data.sum(-1), opacity, rtol=1e-12)
        np.testing.assert_allclose(res.color.data, np.repeat(0.5 * opacity[:, None], 3, 1), rtol=1e-12)
        depth, w = render_depth(p, rays, t)
        np.testing.assert_array_equal(depth.data, res.depth.data)

    def test_gradients_reach_every_term(self, tiny_dataset):
        cfg = FieldConfig(n_images=tiny_dataset.n_images, width=16, depth=2, head_width=8)
        p = init_params(cfg, seed=1)
        ids = np.arange(6) % 3
        pix = np.stack([np.arange(6), np.arange(6)[::-1]], 1)
        rays = make_rays(tiny_dataset.cams, tiny_dataset.frame, ids, pix, q=p["image.q"])
        t = stratified_sample(rays.t_near, rays.t_far, 16)
        res = render_rays(p, rays, t, tiny_dataset.cams)
        loss = uncertainty_loss(res.color, np.full((6, 3), 0.3), res.beta, res.tau)
        grads = diff.backward(loss)
        for name in ("backbone.0.w", "albedo.1.w", "uncert.1.w", "image.A", "image.b", "image.q",
                     "image.embed"):
            assert np.any(grads[p[name]] != 0), name
        assert not np.any(grads[p["ambient.1.w"]])  # ambient is inert under full light

    def test_unknown_shading(self, tiny_dataset):
        cfg = FieldConfig(n_images=3, width=8, depth=1, head_width=4)
        p = init_params(cfg)
        rays = make_rays(tiny_dataset.cams, tiny_dataset.frame, [0], [[1, 1]])
        with pytest.raises(ValueError):
            render_rays(p, rays, stratified_sample(rays.t_near, rays.t_far, 4), tiny_dataset.cams,
                        shading="moon")
