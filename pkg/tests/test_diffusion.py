import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsect.diffusion import (AnalyticGaussianDenoiser, ConditionalGaussianDenoiser, NoiseSchedule,
                                absent, analytic_gaussian_denoiser, cfg_combine, condition_dropout,
                                ddim_step, denoise_loss, fast_timesteps, forward_sample,
                                gaussian_posterior_mean, linear_schedule, make_rng,
                                predict_x0, reverse_mean, reverse_step, sample, sample_ancestral,
                                sample_fast)
from sparsect.errors import ShapeMismatchError, ValidationError

S = linear_schedule()


class TestSchedule:
    def test_single_step(self):
        s = linear_schedule(1, 0.05, 0.05)
        np.testing.assert_array_equal(s.beta, [0.05])
        assert s.alpha_bar_at(1) == 1 - 0.05
        assert s.alpha_bar_at(0) == 1.0

    def test_default_terminal_alpha_bar(self):
        prod = 1.0
        for b in np.linspace(1e-4, 0.02, 1000):
            prod *= 1.0 - b
        assert S.alpha_bar_at(1000) < 1e-4
        assert S.alpha_bar_at(1000) == pytest.approx(4.035829765375676e-05, rel=1e-10)
        assert S.alpha_bar_at(1000) == pytest.approx(prod, rel=1e-12)

    def test_constant_beta_is_geometric(self):
        s = linear_schedule(50, 0.03, 0.03)
        t = np.arange(1, 51)
        np.testing.assert_allclose(s.alpha_bar, 0.97 ** t, rtol=0, atol=1e-12)

    def test_recursion_and_monotonicity(self):
        ab = np.concatenate([[1.0], S.alpha_bar])
        np.testing.assert_allclose(ab[1:], ab[:-1] * S.alpha, atol=1e-12)
        assert np.all(np.diff(ab) < 0)
        np.testing.assert_allclose(S.alpha, 1.0 - S.beta, atol=1e-12)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_rejects_bad_parameters(self, args):
        with pytest.raises(ValidationError):
            linear_schedule(*args)

    def test_timestep_range(self):
        with pytest.raises(ValidationError):
            S.alpha_at(0)
        with pytest.raises(ValidationError):
            S.alpha_bar_at(1001)


class TestForwardReverse:
    def test_zero_signal(self, rng):
        e = rng.standard_normal(50)
        np.testing.assert_array_equal(forward_sample(np.zeros(50), 400, e, S),
                                      math.sqrt(1 - S.alpha_bar_at(400)) * e)

    def test_small_t_stays_close(self, rng):
        x0, e = rng.standard_normal(100), rng.standard_normal(100)
        xt = forward_sample(x0, 1, e, S)
        assert np.linalg.norm(xt - x0) <= math.sqrt(1 - S.alpha_bar_at(1)) * np.linalg.norm(e) + np.linalg.norm(x0) * (1 - math.sqrt(S.alpha_bar_at(1))) + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            forward_sample(np.zeros(3), 5, np.zeros(4), S)

    def test_unit_gaussian_marginals_preserved(self):
        r = make_rng(7)
        x0, e = r.standard_normal(200_000), r.standard_normal(200_000)
        for t in (1, 300, 1000):
            assert abs(forward_sample(x0, t, e, S).var() - 1.0) < 0.01

    def test_exact_eps_inverts_at_t1(self, rng):
        x0, e = rng.standard_normal(64), rng.standard_normal(64)
        xt = forward_sample(x0, 1, e, S)
        np.testing.assert_allclose(reverse_step(xt, 1, e, S, noise=np.ones(64)), x0, atol=1e-6)

    def test_zero_fixed_point_plus_noise(self, rng):
        z = rng.standard_normal(10)
        out = reverse_step(np.zeros(10), 500, np.zeros(10), S, noise=z)
        np.testing.assert_allclose(out, math.sqrt(S.beta_at(500)) * z, atol=1e-15)

    @given(st.integers(2, 1000), st.integers(0, 2**31 - 1))
    def test_mean_matches_posterior_coefficient_form(self, t, seed):
        r = np.random.default_rng(seed)
        xt, eps = r.standard_normal(16) * 3, r.standard_normal(16)
        ab, ab_prev, a, b = S.alpha_bar_at(t), S.alpha_bar_at(t - 1), S.alpha_at(t), S.beta_at(t)
        x0 = (xt - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        mu = (math.sqrt(ab_prev) * b / (1 - ab)) * x0 + (math.sqrt(a) * (1 - ab_prev) / (1 - ab)) * xt
        np.testing.assert_allclose(reverse_mean(xt, t, eps, S), mu, rtol=1e-12, atol=1e-12 * np.abs(x0).max())

    def test_reverse_step_range(self):
        with pytest.raises(ValidationError):
            reverse_step(np.zeros(2), 0, np.zeros(2), S)


class TestLossAndGuidance:
    def test_oracle_and_zero_denoisers(self, rng):
        x0, e = rng.standard_normal(30), rng.standard_normal(30)
        assert denoise_loss(x0, 100, e, lambda x, t, c: e, S) == 0.0
        assert denoise_loss(x0, 100, e, lambda x, t, c: np.zeros_like(x), S) == pytest.approx(np.mean(e ** 2))

    def test_analytic_denoiser_beats_zero(self):
        r = make_rng(3)
        den = AnalyticGaussianDenoiser(S, 1.0, 0.5)
        zero = lambda x, t, c: np.zeros_like(x)
        a = b = 0.0
        for _ in range(1000):
            x0 = 1.0 + math.sqrt(0.5) * r.standard_normal(4)
            e = r.standard_normal(4)
            t = int(r.integers(1, 1001))
            a += denoise_loss(x0, t, e, den, S)
            b += denoise_loss(x0, t, e, zero, S)
        assert a < b

    def test_cfg_identities(self, rng):
        a, b = rng.standard_normal(9), rng.standard_normal(9)
        assert np.array_equal(cfg_combine(a, b, 0.0), a)
        assert np.array_equal(cfg_combine(a, a, 3.7), a)
        np.testing.assert_array_equal(cfg_combine(2 * a, a, 1.0), 3 * a)
        with pytest.raises(ShapeMismatchError):
            cfg_combine(a, b[:3], 1.0)

    @given(st.floats(-5, 5), st.integers(0, 2**31 - 1))
    def test_cfg_affine(self, w, seed):
        r = np.random.default_rng(seed)
        a, b, d = r.standard_normal((3, 12))
        np.testing.assert_allclose(cfg_combine(a + d, b + d, w), cfg_combine(a, b, w) + d, rtol=0, atol=1e-12 * (1 + 2 * abs(w)) * 8)

    def test_dropout(self):
        c = np.ones(3)
        r = make_rng(0)
        assert all(condition_dropout(c, 0.0, r) is c for _ in range(100))
        assert all(not condition_dropout(c, 1.0, r).any() for _ in range(100))
        n = 100_000
        drops = sum(not condition_dropout(c, 0.1, r).any() for _ in range(n))
        assert abs(drops / n - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / n)
        with pytest.raises(ValidationError):
            condition_dropout(c, 1.5, r)

    def test_absent_sentinel(self):
        assert not absent(np.ones((2, 3))).any()


class TestAnalyticDenoiser:
    def test_point_mass_prior(self, rng):
        x = rng.standard_normal(10)
        np.testing.assert_array_equal(gaussian_posterior_mean(x, 500, S, 2.0, 1e-300), 2.0)

    def test_no_noise_limit(self, rng):
        s = linear_schedule(10, 1e-12, 1e-12)
        x = rng.standard_normal(10)
        np.testing.assert_allclose(gaussian_posterior_mean(x, 1, s, 0.5, 1.0), x, atol=1e-9)
        assert np.all(np.isfinite(analytic_gaussian_denoiser(x, 1, s, 0.5, 1.0)))

    @pytest.mark.parametrize("t", [5, 200, 700])
    def test_matches_quadrature(self, t):
        m, v = 0.7, 0.3
        ab = S.alpha_bar_at(t)
        grid = np.linspace(m - 12 * math.sqrt(v), m + 12 * math.sqrt(v), 200_001)
        for xt in (-1.3, 0.2, 2.9):
            logw = -(grid - m) ** 2 / (2 * v) - (xt - math.sqrt(ab) * grid) ** 2 / (2 * (1 - ab))
            w = np.exp(logw - logw.max())
            post = np.trapezoid(grid * w, grid) / np.trapezoid(w, grid)
            assert abs(gaussian_posterior_mean(np.array([xt]), t, S, m, v)[0] - post) <= 1e-6

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValidationError):
            gaussian_posterior_mean(np.zeros(2), 3, S, 0.0, 0.0)

    def test_conditional_sentinel_matches_unconditional(self, rng):
        den = ConditionalGaussianDenoiser(S, offset=0.3, gain=2.0, lift=np.ones(2) / math.sqrt(2))
        x = rng.standard_normal((2, 3, 3, 3))
        cond = rng.random((1, 3, 3, 3))
        assert np.array_equal(den(x, 50, absent(cond)), den(x, 50, None))
        assert not np.array_equal(den(x, 50, cond), den(x, 50, None))
        with pytest.raises(ShapeMismatchError):
            den(x, 50, np.zeros((1, 2, 3, 3)))


def gauss_den():
    return AnalyticGaussianDenoiser(S, 3.0, 0.25)


class TestSamplers:
    def test_ancestral_deterministic(self):
        a = sample_ancestral(gauss_den(), None, S, (7,), seed=11)
        b = sample_ancestral(gauss_den(), None, S, (7,), seed=11)
        assert a.tobytes() == b.tobytes()

    def test_w0_sentinel_equals_unconditional(self):
        den = ConditionalGaussianDenoiser(S, offset=0.5, gain=1.0)
        shape = (1, 2, 2, 2)
        cond = np.zeros(shape)
        for kind in ("ancestral", "fast"):
            a = sample(kind, den, cond, S, shape, w=0.0, seed=4)
            b = sample(kind, den, None, S, shape, w=0.0, seed=4)
            assert a.tobytes() == b.tobytes()

    def test_fast_deterministic(self):
        a = sample_fast(gauss_den(), None, S, (5,), seed=2)
        b = sample_fast(gauss_den(), None, S, (5,), seed=2)
        assert a.tobytes() == b.tobytes()

    def test_dense_first_order_is_deterministic_ancestral_limit(self):
        den = gauss_den()
        x = make_rng(9).standard_normal(40)
        # eta = 0 DDIM chain over every timestep, written out independently.
        ref = x.copy()
        for t in range(S.T, 0, -1):
            ab, ab_prev = S.alpha_bar[t - 1], (S.alpha_bar[t - 2] if t > 1 else 1.0)
            eps = den(ref, t)
            x0 = (ref - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
            ref = np.sqrt(ab_prev) * x0 + np.sqrt(1 - ab_prev) * eps
        out = sample_fast(den, None, S, (40,), steps=S.T, seed=9, order=1)
        np.testing.assert_allclose(out, ref, atol=1e-5)

    def test_ddim_step_matches_first_order_update(self, rng):
        x, eps = rng.standard_normal(6), rng.standard_normal(6)
        ab = S.alpha_bar_at(300)
        x0 = predict_x0(x, 300, eps, S)
        np.testing.assert_allclose(ddim_step(x, 300, 120, eps, S),
                                   math.sqrt(S.alpha_bar_at(120)) * x0 + math.sqrt(1 - S.alpha_bar_at(120)) * eps)
        assert ab > 0

    def test_fast_timesteps(self):
        ts = fast_timesteps(S, 10)
        assert ts[0] == 1000 and ts[-1] == 0 and ts[-2] == 1 and len(ts) == 11
        assert np.all(np.diff(ts) < 0)
        np.testing.assert_array_equal(fast_timesteps(S, 1000), np.arange(1000, -1, -1))
        np.testing.assert_array_equal(fast_timesteps(S, 4, "time"), [1000, 667, 334, 1, 0])
        np.testing.assert_array_equal(fast_timesteps(S, 1), [1000, 0])
        with pytest.raises(ValidationError):
            fast_timesteps(S, 0)
        with pytest.raises(ValidationError):
            fast_timesteps(S, 5, "cosine")

    @given(st.integers(1, 1000))
    def test_fast_timesteps_distinct(self, steps):
        ts = fast_timesteps(S, steps)
        assert len(ts) == steps + 1 and np.all(np.diff(ts) < 0) and ts[0] == S.T and ts[-1] == 0

    def test_callback_sees_every_step(self):
        seen = []
        sample_fast(gauss_den(), None, S, (3,), steps=6, callback=lambda t, x: seen.append(t))
        assert seen == list(fast_timesteps(S, 6))
        seen.clear()
        sample_ancestral(gauss_den(), None, linear_schedule(20), (3,), callback=lambda t, x: seen.append(t))
        assert seen == list(range(20, -1, -1))

    def test_unknown_sampler(self):
        with pytest.raises(ValidationError):
            sample("euler", gauss_den(), None, S, (2,))
        with pytest.raises(ValidationError):
            sample_fast(gauss_den(), None, S, (2,), order=3)

    @pytest.mark.slow
    def test_chain_marginals_track_forward_process(self):
        n, m, v = 2000, 3.0, 0.25
        snaps = {}
        keep = {1000, 500, 1}

        def cb(t, x):
            if t in keep:
                snaps[t] = x.copy()

        sample_ancestral(gauss_den(), None, S, (n,), seed=0, callback=cb)
        for t, x in snaps.items():
            ab = S.alpha_bar_at(t)
            mean, var = math.sqrt(ab) * m, ab * v + 1 - ab
            assert abs(x.mean() - mean) <= 4 * math.sqrt(var / n)
            assert abs(x.var() - var) <= 4 * var * math.sqrt(2 / n) + 0.01 * var


def test_noise_schedule_validation():
    with pytest.raises(ValidationError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValidationError):
        NoiseSchedule(np.array([]))
