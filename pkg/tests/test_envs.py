import math

import numpy as np
import pytest

from sombrl.envs import (
    EnvFamily,
    EnvSpec,
    MountainCar,
    Pendulum,
    SyntheticSystem,
    env_reset,
    env_step,
    make_env,
    true_dynamics,
    wrap_angle,
)
from sombrl.gp import KernelSpec

PEND = EnvSpec(EnvFamily.PENDULUM)
MC = EnvSpec(EnvFamily.MOUNTAIN_CAR)


def quiet(family, **kw):
    return EnvSpec(family, noise_std=0.0, **kw)


class TestReset:
    @pytest.mark.parametrize("spec", [PEND, MC])
    def test_deterministic(self, spec):
        np.testing.assert_array_equal(env_reset(spec, 3), env_reset(spec, 3))

    def test_pendulum_without_jitter_hangs_down(self):
        x = env_reset(EnvSpec(EnvFamily.PENDULUM, jitter=0.0), 0)
        assert abs(abs(x[0]) - math.pi) < 1e-12
        assert x[1] == 0.0

    def test_jitter_bounded(self):
        a, b = env_reset(PEND, 1), env_reset(PEND, 2)
        assert not np.array_equal(a, b)
        assert abs(wrap_angle(a[0] - math.pi)) <= 0.05 and abs(a[1]) <= 0.05
        c = env_reset(MC, 5)
        assert abs(c[0] + 0.5) <= 0.05 and c[1] == 0.0


class TestPendulum:
    def test_downward_equilibrium(self):
        spec = quiet(EnvFamily.PENDULUM)
        x, _ = env_step(spec, np.array([-math.pi, 0.0]), [0.0], np.random.default_rng(0))
        assert abs(wrap_angle(x[0] + math.pi)) < 1e-12
        assert abs(x[1]) < 1e-12

    def test_matches_hand_integration(self):
        env = Pendulum(quiet(EnvFamily.PENDULUM))
        rng = np.random.default_rng(1)
        x = np.array([0.4, -0.3])
        theta, omega = 0.4, -0.3
        for _ in range(10):
            u = rng.uniform(-2, 2)
            x, _ = env.step(x, [u], rng)
            omega = omega + 0.05 * (9.81 * math.sin(theta) + u - 0.05 * omega)
            theta = theta + 0.05 * omega
        assert abs(wrap_angle(x[0] - theta)) < 1e-10
        assert abs(x[1] - omega) < 1e-10

    def test_step_equals_true_dynamics_without_noise(self):
        spec = quiet(EnvFamily.PENDULUM)
        x, u = np.array([1.0, 2.0]), np.array([0.7])
        np.testing.assert_array_equal(env_step(spec, x, u, np.random.default_rng(0))[0], true_dynamics(spec, x, u))

    def test_aligned_torque_adds_energy(self):
        env = Pendulum(quiet(EnvFamily.PENDULUM), damping=0.0)
        x = np.array([2.0, 1.0])
        pushed = env.true_dynamics(x, np.array([2.0]))
        coasting = env.true_dynamics(x, np.array([0.0]))
        assert env.energy(pushed) > env.energy(x)
        assert env.energy(pushed) > env.energy(coasting)

    def test_actions_clipped(self):
        spec = quiet(EnvFamily.PENDULUM)
        x = np.array([0.3, 0.0])
        np.testing.assert_array_equal(true_dynamics(spec, x, [50.0]), true_dynamics(spec, x, [2.0]))

    def test_angle_wrapped(self):
        env = Pendulum(PEND)
        rng = np.random.default_rng(2)
        x = env.reset(0)
        for _ in range(500):
            x, _ = env.step(x, rng.uniform(-2, 2, 1), rng)
            assert -math.pi <= x[0] < math.pi

    def test_residual_target_wraps(self):
        env = Pendulum(PEND)
        x, nxt = np.array([math.pi - 0.01, 1.0]), np.array([-math.pi + 0.01, 1.0])
        np.testing.assert_allclose(env.to_target(x, nxt), [0.02, 0.0], atol=1e-12)
        np.testing.assert_allclose(env.from_target(x, env.to_target(x, nxt)), nxt, atol=1e-12)

    def test_nonfinite_state_rejected(self):
        with pytest.raises(ValueError):
            Pendulum(PEND).step(np.array([np.nan, 0.0]), [0.0], np.random.default_rng(0))


class TestMountainCar:
    def test_goal_reward(self):
        env = MountainCar(MC)
        assert env.reward(np.array([0.45, 0.0]), np.array([0.0])) == 1.0
        assert env.reward(np.array([0.2, 0.0]), np.array([0.0])) == 0.0

    def test_velocity_clipped(self):
        x = true_dynamics(quiet(EnvFamily.MOUNTAIN_CAR), np.array([-0.5, 0.0699]), [1.0])
        assert x[1] == pytest.approx(0.07)

    def test_left_wall_stops_car(self):
        x = true_dynamics(quiet(EnvFamily.MOUNTAIN_CAR), np.array([-1.19, -0.07]), [-1.0])
        assert x[0] == -1.2 and x[1] == 0.0

    def test_matches_hand_integration(self):
        env = MountainCar(quiet(EnvFamily.MOUNTAIN_CAR))
        rng = np.random.default_rng(3)
        x, (p, v) = np.array([-0.5, 0.0]), (-0.5, 0.0)
        for _ in range(10):
            u = rng.uniform(-1, 1)
            x, _ = env.step(x, [u], rng)
            v = min(max(v + 0.0015 * u - 0.0025 * math.cos(3 * p), -0.07), 0.07)
            p = p + v
        np.testing.assert_allclose(x, [p, v], atol=1e-10)


class TestInvariants:
    @pytest.mark.parametrize("family,sigma", [(EnvFamily.PENDULUM, 0.01), (EnvFamily.MOUNTAIN_CAR, 0.01)])
    def test_noise_level(self, family, sigma):
        env = make_env(EnvSpec(family, noise_std=sigma))
        rng = np.random.default_rng(4)
        # states away from wraps and walls so the noise is observed unprojected
        x = np.array([0.0, 0.0]) if family is EnvFamily.PENDULUM else np.array([-0.5, 0.0])
        u = np.array([0.0])
        clean = env.true_dynamics(x, u)
        draws = np.array([env.step(x, u, rng)[0] - clean for _ in range(100_000)])
        np.testing.assert_allclose(draws.std(axis=0), sigma, rtol=0.02)

    @pytest.mark.parametrize("family,cost", [(EnvFamily.PENDULUM, 0.0), (EnvFamily.MOUNTAIN_CAR, 0.0),
                                             (EnvFamily.PENDULUM, 0.1)])
    def test_reward_range(self, family, cost):
        env = make_env(EnvSpec(family, action_cost=cost))
        rng = np.random.default_rng(5)
        n = 100_000
        if family is EnvFamily.PENDULUM:
            x = np.c_[rng.uniform(-math.pi, math.pi, n), rng.uniform(-8, 8, n)]
        else:
            x = np.c_[rng.uniform(-1.2, 0.6, n), rng.uniform(-0.07, 0.07, n)]
        r = env.reward(x, rng.uniform(-3, 3, (n, 1)))
        assert r.min() >= 0.0
        assert r.max() <= env.r_max

    def test_action_cost_shift(self):
        env = Pendulum(EnvSpec(EnvFamily.PENDULUM, action_cost=0.5))
        assert env.r_max == pytest.approx(2.0)
        upright = np.array([0.0, 0.0])
        assert env.reward(upright, [0.0]) - env.reward(upright, [2.0]) == pytest.approx(1.0 + 0.004)

    @pytest.mark.parametrize("kwargs", [dict(horizon=0), dict(noise_std=-1.0), dict(action_cost=-0.1),
                                        dict(reward_params={"bogus": 1.0})])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ValueError):
            EnvSpec(EnvFamily.PENDULUM, **kwargs)


class TestSyntheticSystem:
    def test_sample_reproducible(self):
        k = KernelSpec.rbf(3)
        a = SyntheticSystem.sample(k, 2, np.random.default_rng(6))
        b = SyntheticSystem.sample(k, 2, np.random.default_rng(6))
        z = np.random.default_rng(7).normal(size=(5, 3))
        np.testing.assert_array_equal(a.f(z), b.f(z))

    def test_dynamics_shape_and_reward(self):
        env = SyntheticSystem.sample(KernelSpec.rbf(2), 1, np.random.default_rng(8), goal=0.5)
        x = env.reset(0)
        nxt = env.true_dynamics(x, np.array([0.3]))
        assert nxt.shape == (1,)
        assert env.reward(np.array([0.5]), np.array([0.0])) == pytest.approx(1.0)

    def test_kernel_dimension_checked(self):
        with pytest.raises(ValueError):
            SyntheticSystem.sample(KernelSpec.rbf(2), 2, np.random.default_rng(0))
