import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satgeo import diff
from satgeo.encoding import (EncodingSpec, GranularitySchedule, granularity_mask, masked_encode,
                             pos_encode)


def direct_encoding(x, n_freqs):
    """Trig terms evaluated one by one, in the documented channel order."""
    out = list(x)
    for xi in x:
        for k in range(n_freqs):
            out += [math.sin(2.0 ** k * math.pi * xi), math.cos(2.0 ** k * math.pi * xi)]
    return np.array(out)


class TestPosEncode:
    def test_zero_two_freqs(self):
        out = pos_encode(diff.Tensor(np.zeros((1, 1))), EncodingSpec(2, include_identity=False))
        np.testing.assert_array_equal(out.data, [[0.0, 1.0, 0.0, 1.0]])

    def test_one_single_freq(self):
        out = pos_encode(diff.Tensor(np.ones((1, 1), np.float64)), EncodingSpec(1, False))
        np.testing.assert_allclose(out.data, [[0.0, -1.0]], atol=1e-15)

    def test_quarter_three_freqs(self):
        out = pos_encode(diff.Tensor(np.array([[0.25]], np.float64)), EncodingSpec(3, False))
        np.testing.assert_allclose(out.data[0], direct_encoding([0.25], 3)[1:], atol=1e-15)

    def test_layout_with_identity(self, rng):
        x = rng.uniform(-1, 1, (5, 3))
        out = pos_encode(diff.Tensor(x), EncodingSpec(4)).data
        assert out.shape == (5, EncodingSpec(4).out_dim(3)) == (5, 27)
        for row, xi in zip(out, x):
            np.testing.assert_allclose(row, direct_encoding(xi, 4), atol=1e-12)

    def test_rejects_zero_freqs(self):
        with pytest.raises(ValueError):
            EncodingSpec(0)

    def test_gradient(self, rng):
        spec = EncodingSpec(6)
        w = rng.uniform(0.5, 1.5, (4, spec.out_dim(3)))
        f = lambda t: diff.mean(pos_encode(t, spec) * w)
        assert diff.grad_check(f, diff.Tensor(rng.uniform(-1, 1, (4, 3))), eps=1e-6) < 1e-6


class TestGranularityMask:
    def test_half_open_at_start(self):
        m = granularity_mask(0, GranularitySchedule(window=100, bias=5, n_freqs=10))
        np.testing.assert_array_equal(m, [1] * 10 + [0] * 10)

    def test_open_after_window(self):
        sched = GranularitySchedule(window=100, bias=5, n_freqs=10)
        for t in (100, 101, 10_000):
            assert granularity_mask(t, sched).all()

    def test_open_at_half_window_with_half_bias(self):
        m = granularity_mask(50, GranularitySchedule(window=100, bias=5, n_freqs=10))
        assert m.all()

    def test_for_training_defaults(self):
        sched = GranularitySchedule.for_training(20_000)
        assert (sched.window, sched.bias, sched.n_freqs) == (2000, 5.0, 10)

    def test_validation(self):
        with pytest.raises(ValueError):
            GranularitySchedule(window=0, bias=1, n_freqs=4)
        with pytest.raises(ValueError):
            GranularitySchedule(window=10, bias=5, n_freqs=4)
        with pytest.raises(ValueError):
            granularity_mask(-1, GranularitySchedule(10, 1, 4))

    @given(st.integers(1, 500), st.floats(0, 10), st.integers(1, 12), st.booleans(), st.data())
    @settings(max_examples=200, deadline=None)
    def test_matches_indicator_and_is_monotone(self, window, bias_frac, n, pair, data):
        bias = bias_frac * n / 10
        sched = GranularitySchedule(window, bias, n, pair_mode=pair)
        t = data.draw(st.integers(0, 2 * window))
        m = granularity_mask(t, sched)
        thr = 2 * (t * n / window + bias)
        idx = np.arange(2 * n)
        key = (idx // 2) * 2 if pair else idx
        want = np.ones(2 * n) if t >= window else (key < thr).astype(float)
        np.testing.assert_array_equal(m, want)
        assert np.all(granularity_mask(t + 1, sched) >= m)
        if pair:
            np.testing.assert_array_equal(m[0::2], m[1::2])


class TestMaskedEncode:
    def test_open_mask_equals_pos_encode(self, rng):
        spec = EncodingSpec(10)
        sched = GranularitySchedule(100, 5, 10)
        x = diff.Tensor(rng.uniform(-1, 1, (7, 3)).astype(np.float32))
        np.testing.assert_array_equal(masked_encode(x, spec, 100, sched).data,
                                      pos_encode(x, spec).data)

    def test_zero_bias_keeps_identity_only(self, rng):
        spec = EncodingSpec(4)
        x = rng.uniform(-1, 1, (5, 3))
        out = masked_encode(diff.Tensor(x), spec, 0, GranularitySchedule(10, 0, 4)).data
        np.testing.assert_array_equal(out[:, :3], x)
        np.testing.assert_array_equal(out[:, 3:], 0.0)

    def test_quarter_window(self, rng):
        spec = EncodingSpec(8)
        sched = GranularitySchedule(400, 2, 8)
        x = rng.uniform(-1, 1, (6, 3))
        got = masked_encode(diff.Tensor(x), spec, 100, sched).data
        want = pos_encode(diff.Tensor(x), spec).data.reshape(6, -1)
        blocks = want[:, 3:].reshape(6, 3, 16).copy()
        i = np.arange(16)
        blocks[..., (i // 2) * 2 >= 2 * (8 / 4 + 2)] = 0.0
        np.testing.assert_array_equal(got[:, 3:], blocks.reshape(6, -1))

    def test_masked_channels_carry_no_gradient(self):
        spec = EncodingSpec(4, include_identity=False)
        sched = GranularitySchedule(10, 1, 4)  # only the first band open at t=0
        x = diff.Tensor(np.array([[0.3]], np.float64), requires_grad=True)
        spike = np.zeros((1, 8))
        spike[0, 5] = 1.0  # a masked channel
        (g,) = diff.backward(diff.sum(masked_encode(x, spec, 0, sched) * spike), wrt=[x])
        assert g[0, 0] == 0.0
        spike[0, 1] = 1.0  # an open one
        (g,) = diff.backward(diff.sum(masked_encode(x, spec, 0, sched) * spike), wrt=[x])
        np.testing.assert_allclose(g, [[-np.pi * np.sin(np.pi * 0.3)]], rtol=1e-12)

    def test_schedule_frequency_mismatch(self):
        with pytest.raises(ValueError):
            masked_encode(diff.Tensor(np.zeros((1, 3))), EncodingSpec(4), 0,
                          GranularitySchedule(10, 1, 5))
