import numpy as np
import pytest

from wavedamp.controllers import (
    EMERGENCY_DECEL,
    IdmParams,
    PiParams,
    PiState,
    command_to_accel,
    idm_accel,
    idm_accel_noisy,
    idm_equilibrium_gap,
    idm_equilibrium_speed,
    pi_target_velocity,
    pi_update_command,
)

IDM = IdmParams()
PI = PiParams()


class TestIdm:
    def test_equilibrium_at_desired_velocity(self):
        a = idm_accel(30.0, 30.0, 1e9, IDM)
        assert abs(a) < 1e-6

    def test_standstill_at_minimum_gap(self):
        # s* = s0 = 2 and gap = 2 cancel the free-road term exactly
        a = idm_accel(0.0, 0.0, 2.0, IDM)
        assert a == pytest.approx(0.0, abs=1e-12)

    def test_plugin_value(self):
        # 1 - (10/30)^4 - (12/20)^2 = 1271/2025
        a = idm_accel(10.0, 10.0, 20.0, IDM)
        assert abs(a - 1271.0 / 2025.0) < 1e-6

    def test_rejects_nonpositive_gap(self):
        with pytest.raises(ValueError):
            idm_accel(5.0, 5.0, 0.0, IDM)
        with pytest.raises(ValueError):
            idm_accel(5.0, 5.0, -1.0, IDM)

    def test_monotone_decreasing_in_speed(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            gap = rng.uniform(5.0, 80.0)
            dv = rng.uniform(-3.0, 3.0)
            v1 = rng.uniform(0.5, 25.0)
            v2 = v1 + rng.uniform(0.1, 4.0)
            a1 = idm_accel(v1, v1 - dv, gap, IDM)
            a2 = idm_accel(v2, v2 - dv, gap, IDM)
            assert a2 < a1

    def test_monotone_increasing_in_gap(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            v = rng.uniform(0.5, 25.0)
            dv = rng.uniform(-3.0, 3.0)
            g1 = rng.uniform(3.0, 60.0)
            g2 = g1 + rng.uniform(0.5, 30.0)
            a1 = idm_accel(v, v - dv, g1, IDM)
            a2 = idm_accel(v, v - dv, g2, IDM)
            assert a2 > a1

    def test_vectorized_matches_scalar(self):
        v = np.array([3.0, 10.0, 22.0])
        vl = np.array([4.0, 9.0, 22.0])
        gap = np.array([10.0, 25.0, 40.0])
        vec = idm_accel(v, vl, gap, IDM)
        for k in range(3):
            assert vec[k] == pytest.approx(idm_accel(v[k], vl[k], gap[k], IDM))

    def test_equilibrium_gap_speed_roundtrip(self):
        for v in (1.0, 5.0, 15.0, 25.0):
            gap = idm_equilibrium_gap(v, IDM)
            assert idm_equilibrium_speed(gap, IDM) == pytest.approx(v, abs=1e-6)
            assert abs(idm_accel(v, v, gap, IDM)) < 1e-9


class TestNoisyIdm:
    def test_zero_noise_matches_deterministic(self):
        params = IdmParams(noise_std=0.0)
        rng = np.random.default_rng(0)
        a = idm_accel_noisy(12.0, 11.0, 18.0, params, rng)
        assert a == pytest.approx(idm_accel(12.0, 11.0, 18.0, params))

    def test_sample_mean_matches_deterministic(self):
        rng = np.random.default_rng(3)
        n = 100_000
        # state chosen so the base accel sits ~9 sigma from both clip bounds
        v, vl, gap = 10.0, 8.0, 15.0
        base = idm_accel(v, vl, gap, IDM)
        assert -2.4 < base < 0.4
        draws = idm_accel_noisy(
            np.full(n, v), np.full(n, vl), np.full(n, gap), IDM, rng
        )
        assert abs(draws.mean() - base) < 3 * IDM.noise_std / np.sqrt(n)

    def test_seeded_reproducibility(self):
        a1 = idm_accel_noisy(8.0, 7.0, 15.0, IDM, np.random.default_rng(7))
        a2 = idm_accel_noisy(8.0, 7.0, 15.0, IDM, np.random.default_rng(7))
        assert a1 == a2

    def test_clipped_to_executable_range(self):
        rng = np.random.default_rng(4)
        draws = idm_accel_noisy(
            np.full(1000, 20.0), np.zeros(1000), np.full(1000, 3.0), IDM, rng
        )
        assert np.all(draws >= -EMERGENCY_DECEL)
        assert np.all(draws <= IDM.a_max)


class TestPiController:
    def test_target_velocity_lower_clamp(self):
        assert pi_target_velocity(4.0, 7.0, PI) == pytest.approx(4.0)

    def test_target_velocity_upper_clamp(self):
        assert pi_target_velocity(4.0, 30.0, PI) == pytest.approx(5.0)
        assert pi_target_velocity(4.0, 300.0, PI) == pytest.approx(5.0)

    def test_target_velocity_interpolates(self):
        # 4 + 1 * (18.5 - 7) / 23 = 4.5
        assert abs(pi_target_velocity(4.0, 18.5, PI) - 4.5) < 1e-9

    def test_command_defers_to_leader_at_safety_gap(self):
        state = PiState.fresh(PI.window, 5.0)
        v_cmd = pi_update_command(state, 4.0, 3.25, 5.0, PI)
        assert abs(v_cmd - 3.25) < 1e-9

    def test_command_at_full_alpha(self):
        # gap = 6 gives alpha = 1, beta = 0.5; gap < s_l keeps v* = v_bar
        state = PiState.fresh(PI.window, 4.0)
        state.v_cmd = 2.0
        v_cmd = pi_update_command(state, 6.0, 9.0, 4.0, PI)
        assert abs(v_cmd - (0.5 * 4.0 + 0.5 * 2.0)) < 1e-9

    def test_command_worked_example(self):
        state = PiState.fresh(PI.window, 4.5)
        state.speed_history.extend([4.5, 4.5])
        state.v_cmd = 4.0
        v_cmd = pi_update_command(state, 5.0, 3.0, 4.5, PI)
        assert abs(v_cmd - 3.8125) < 1e-9

    def test_saturation_and_convexity_invariants(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            v_bar = rng.uniform(0.0, 30.0)
            gap = rng.uniform(0.0, 60.0)
            v_star = pi_target_velocity(v_bar, gap, PI)
            assert v_bar - 1e-12 <= v_star <= v_bar + PI.v_c + 1e-12
            alpha = min(max((gap - PI.dx_s) / 2.0, 0.0), 1.0)
            beta = 1.0 - alpha / 2.0
            assert 0.0 <= alpha <= 1.0
            assert 0.5 <= beta <= 1.0

    def test_command_in_convex_hull(self):
        rng = np.random.default_rng(6)
        for _ in range(10_000):
            v_ego = rng.uniform(0.0, 30.0)
            state = PiState.fresh(PI.window, v_ego)
            state.v_cmd = rng.uniform(0.0, 30.0)
            v_lead = rng.uniform(0.0, 30.0)
            gap = rng.uniform(0.0, 60.0)
            v_prev = state.v_cmd
            v_star = pi_target_velocity(v_ego, gap, PI)  # history holds v_ego only
            out = pi_update_command(state, gap, v_lead, v_ego, PI)
            lo = min(v_star, v_lead, v_prev) - 1e-9
            hi = max(v_star, v_lead, v_prev) + 1e-9
            assert lo <= out <= hi

    def test_history_window_cap(self):
        params = PiParams(window=5)
        state = PiState.fresh(params.window, 1.0)
        for k in range(20):
            pi_update_command(state, 10.0, 2.0, float(k), params)
        assert len(state.speed_history) == 5

    def test_partial_history_uses_available_samples(self):
        state = PiState.fresh(PI.window, 2.0)
        # history is [2.0, 6.0] after the push; mean 4, gap below s_l keeps v* = 4
        pi_update_command(state, 4.0, 0.0, 6.0, PI)
        assert len(state.speed_history) == 2


class TestCommandToAccel:
    def test_zero_error(self):
        assert command_to_accel(5.0, 5.0, 0.1) == 0.0

    def test_proportional(self):
        assert command_to_accel(5.05, 5.0, 0.1) == pytest.approx(0.5)

    def test_saturates(self):
        assert command_to_accel(6.0, 5.0, 0.1) == 1.0
        assert command_to_accel(4.0, 5.0, 0.1) == -1.0

    def test_always_within_bounds(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            a = command_to_accel(rng.uniform(0, 40), rng.uniform(0, 40), 0.1)
            assert -1.0 <= a <= 1.0

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            command_to_accel(1.0, 1.0, 0.0)
