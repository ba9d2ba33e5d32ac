import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momar.interpolants import (LINEAR, ScheduleError, ancestral_sample, ancestral_step,
                                build_schedule, cfg_combine, eps_from_x0, error_relation,
                                forward_diffuse, gaussian_eps_oracle, gaussian_velocity_oracle,
                                ode_sample, ode_step, posterior_coefficients, respace,
                                score_from_velocity, velocity_target, verify_error_relation,
                                x0_from_eps)
from momar.numerics import make_rng

# frozen from a 40-digit mpmath product / closed form
LINEAR_ABAR_T = 4.035829765375683e-05
COSINE_ABAR_500 = 0.4938435904406377


class TestSchedule:
    def test_linear_first_step(self):
        assert build_schedule("linear", 1000).alpha_bar[1] == pytest.approx(0.9999, abs=1e-15)

    def test_linear_endpoint_matches_high_precision(self):
        assert build_schedule("linear", 1000).alpha_bar[-1] == pytest.approx(LINEAR_ABAR_T, rel=1e-10)

    def test_cosine_midpoint_matches_closed_form(self):
        sch = build_schedule("cosine", 1000)
        assert sch.alpha_bar[0] == 1.0
        assert sch.alpha_bar[500] == pytest.approx(COSINE_ABAR_500, rel=1e-12)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_invariants(self, kind):
        sch = build_schedule(kind, 1000)
        assert sch.alpha_bar[-1] < 0.01
        assert np.all(np.diff(sch.alpha_bar) < 0)
        assert np.all((sch.beta[1:] > 0) & (sch.beta[1:] < 1))
        assert sch.beta.max() <= 0.999

    def test_unknown_kind(self):
        with pytest.raises(ScheduleError):
            build_schedule("quadratic", 10)
        with pytest.raises(ScheduleError):
            build_schedule("linear", 0)

    def test_respace_keeps_endpoints(self):
        base = build_schedule("linear", 1000)
        sch = respace(base, 50)
        assert sch.T == 50
        assert sch.timesteps[1] == 1 and sch.timesteps[-1] == 1000
        np.testing.assert_allclose(sch.alpha_bar[1:], base.alpha_bar[sch.timesteps[1:]], rtol=1e-12)

    def test_dump_format(self):
        lines = build_schedule("linear", 4).dump().splitlines()
        assert len(lines) == 4
        t, b, ab = lines[0].split()
        assert t == "1" and float(b) == build_schedule("linear", 4).beta[1]


class TestConversions:
    def test_forward_endpoints(self):
        x0, eps = np.array([1.0, -2.0]), np.array([0.3, 0.7])
        np.testing.assert_array_equal(forward_diffuse(x0, eps, 1.0), x0)
        np.testing.assert_array_equal(forward_diffuse(x0, eps, 0.0), eps)
        np.testing.assert_allclose(forward_diffuse(0 * x0, eps, 0.25), math.sqrt(0.75) * eps)

    def test_forward_range(self):
        with pytest.raises(ScheduleError):
            forward_diffuse([0.0], [0.0], 1.5)

    def test_x0_from_eps_trivial(self):
        assert x0_from_eps(np.array(1.0), np.array(0.0), 0.25) == pytest.approx(2.0)
        with pytest.raises(ScheduleError):
            x0_from_eps(np.array(1.0), np.array(0.0), 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(1e-4, 0.9999), st.integers(0, 10_000))
    def test_round_trip(self, abar, seed):
        r = np.random.default_rng(seed)
        x0, eps = r.normal(size=8), r.normal(size=8)
        xt = forward_diffuse(x0, eps, abar)
        np.testing.assert_allclose(x0_from_eps(xt, eps, abar), x0, atol=1e-12 / math.sqrt(abar))
        np.testing.assert_allclose(eps_from_x0(xt, x0, abar), eps, atol=1e-12 / math.sqrt(1 - abar))

    def test_error_relation_values(self):
        assert error_relation(0.5) == 1.0
        assert error_relation(0.2) == pytest.approx(4.0)

    def test_error_relation_over_table(self):
        r = np.random.default_rng(3)
        for abar in build_schedule("linear", 1000).alpha_bar[1:]:
            rel = verify_error_relation(r.normal(size=16), r.normal(size=16), r.normal(size=16), abar)
            assert rel.max_rel_error < 1e-10

    def test_error_relation_with_sd_ratio(self):
        r = np.random.default_rng(4)
        phi = np.array([2.0, 0.5, 1.0])
        x0 = r.normal(size=(50, 3)) / phi
        rel = verify_error_relation(x0, r.normal(size=(50, 3)), r.normal(size=(50, 3)), 0.3, phi=phi)
        assert rel.max_rel_error < 1e-10


class TestAncestral:
    def test_last_step_returns_x0(self):
        sch = build_schedule("linear", 1000)
        c_xt, c_x0, sd = posterior_coefficients(sch, 1)
        assert (c_xt, sd) == (0.0, 0.0) and c_x0 == pytest.approx(1.0)
        out = ancestral_step(np.ones(3), np.full(3, 5.0), 1, sch, make_rng(0))
        np.testing.assert_allclose(out, 5.0)

    def test_consistent_input_is_fixed_point(self):
        sch = build_schedule("cosine", 100)
        for t in range(1, 101):
            c_xt, c_x0, _ = posterior_coefficients(sch, t)
            # x_t = sqrt(abar_t) x0 and x0_hat = x0 maps to sqrt(abar_{t-1}) x0
            assert c_xt * math.sqrt(sch.alpha_bar[t]) + c_x0 == pytest.approx(math.sqrt(sch.alpha_bar[t - 1]))

    def test_t_out_of_range(self):
        sch = build_schedule("linear", 10)
        with pytest.raises(ScheduleError):
            posterior_coefficients(sch, 0)
        with pytest.raises(ScheduleError):
            posterior_coefficients(sch, 11)

    def test_variance_options(self):
        sch = build_schedule("linear", 1000)
        _, _, a = posterior_coefficients(sch, 500, "beta")
        _, _, b = posterior_coefficients(sch, 500, "posterior")
        assert a == pytest.approx(math.sqrt(sch.beta[500])) and b < a

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_gaussian_oracle_chain(self, kind):
        mu, s, n = 1.5, 1.0, 10_000
        sch = respace(build_schedule(kind, 1000), 50)
        x = ancestral_sample(gaussian_eps_oracle(mu, s, sch), (n,), sch, make_rng(7, "chain", kind))
        assert abs(x.mean() - mu) < 3 * s / math.sqrt(n)
        assert abs(x.std(ddof=1) - s) < 3 * s / math.sqrt(2 * n)


class TestVelocity:
    def test_linear_velocity(self):
        x0, eps = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
        np.testing.assert_array_equal(velocity_target(x0, eps), eps - x0)

    def test_equal_endpoints_constant_path(self):
        x0 = np.array([0.4, -0.3])
        for t in (0.1, 0.5, 0.9):
            np.testing.assert_allclose(LINEAR(x0, x0, t), x0)
            np.testing.assert_allclose(velocity_target(x0, x0, t), 0.0)

    @pytest.mark.parametrize("t", np.linspace(0.02, 1.0, 50))
    def test_point_mass_score(self, t):
        x = np.random.default_rng(1).normal(size=5) * t
        v = x / t
        np.testing.assert_allclose(score_from_velocity(x, v, t), -x / t**2, rtol=1e-6)

    @pytest.mark.parametrize("t", np.linspace(0.02, 0.98, 25))
    def test_gaussian_score(self, t):
        mu, s = 0.7, 1.3
        x = np.random.default_rng(2).normal(size=5)
        v = gaussian_velocity_oracle(mu, s)(x, t)
        analytic = -(x - (1 - t) * mu) / ((1 - t) ** 2 * s**2 + t**2)
        np.testing.assert_allclose(score_from_velocity(x, v, t), analytic, rtol=1e-6)

    def test_score_singular_at_zero(self):
        with pytest.raises(ScheduleError):
            score_from_velocity(np.ones(2), np.ones(2), 0.0)


class TestOde:
    @pytest.mark.parametrize("steps", [1, 3, 25])
    def test_constant_field(self, steps):
        c = np.array([0.5, -2.0])
        x = ode_sample(lambda x, t: c, (2,), steps, make_rng(0), x_1=np.zeros(2))
        np.testing.assert_allclose(x, -c, atol=1e-14)

    def test_single_step(self):
        x1 = np.array([1.0, 2.0])
        v = gaussian_velocity_oracle(0.3, 1.0)
        np.testing.assert_allclose(ode_sample(v, (2,), 1, make_rng(0), x_1=x1), ode_step(x1, v(x1, 1.0), 1.0))

    @pytest.mark.parametrize("steps", [1, 10, 25])
    def test_point_mass_paths_are_straight(self, steps):
        # x_t = t x_1 + (1 - t) mu has constant velocity, so Euler is exact
        mu = 0.8
        x1 = np.random.default_rng(0).normal(size=200)
        x = ode_sample(gaussian_velocity_oracle(mu, 0.0), (200,), steps, make_rng(0), x_1=x1)
        np.testing.assert_allclose(x, mu, atol=1e-12)

    def test_gaussian_sd_error_first_order(self):
        # Euler on a linear field is linear in x_1, so the output SD is exact
        field = gaussian_velocity_oracle(1.5, 1.0)
        gaps = []
        for k in (25, 50, 100, 200):
            slope = ode_sample(field, (2,), k, make_rng(0), x_1=np.array([0.0, 1.0]))
            gaps.append(1.0 - (slope[1] - slope[0]))
        ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
        np.testing.assert_allclose(ratios, 2.0, rtol=0.1)


class TestCfg:
    def test_endpoints(self):
        c, u = np.array([1.0, 2.0]), np.array([0.0, -1.0])
        np.testing.assert_array_equal(cfg_combine(c, u, 1.0), c)
        np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
        np.testing.assert_allclose(cfg_combine(c, u, 4.5), u + 4.5 * (c - u))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(np.ones(2), np.ones(3), 1.0)
