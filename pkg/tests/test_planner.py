import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sombrl.calibration import BetaSchedule, CalibratedModel
from sombrl.envs import EnvFamily, EnvSpec, Pendulum, SyntheticSystem
from sombrl.gp import Dataset, KernelSpec
from sombrl.planner import (
    ICemConfig,
    LambdaSchedule,
    LambdaTuner,
    MPCAgent,
    ObjectiveMode,
    PlannerConfig,
    PlanningWarning,
    colored_noise,
    evaluate_objective,
    icem_plan,
    lambda_autotune_step,
    lambda_value,
    mpc_act,
    rollout_values,
)


def fitted_pendulum_model(n=30, seed=0):
    env = Pendulum(EnvSpec(EnvFamily.PENDULUM))
    rng = np.random.default_rng(seed)
    x = np.c_[rng.uniform(-math.pi, math.pi, n), rng.uniform(-3, 3, n)]
    u = rng.uniform(-2, 2, (n, 1))
    nxt = env.true_dynamics(x, u)
    data = Dataset(env.features(x, u), env.to_target(x, nxt), 1e-4)
    kernels = (KernelSpec.rbf(4, 1.0, 0.01), KernelSpec.rbf(4, 1.0, 0.5))
    return env, CalibratedModel.create(data, kernels, BetaSchedule.fixed(2.0))


class TestLambda:
    def test_theory_value(self):
        s = LambdaSchedule.theory(c_max=1.0, horizon=10, state_dim=4, noise_std=1.0)
        assert lambda_value(s, 3, 2.0) == pytest.approx(60.0)

    def test_constant(self):
        assert all(lambda_value(LambdaSchedule.constant(10.0), n, 5.0) == 10.0 for n in (0, 7, 99))

    def test_linear_decay_endpoints(self):
        s = LambdaSchedule.linear_decay(0.5, 0.0, 10)
        assert lambda_value(s, 0, 1.0) == 0.5
        assert lambda_value(s, 5, 1.0) == pytest.approx(0.25)
        assert lambda_value(s, 10, 1.0) == 0.0
        assert lambda_value(s, 30, 1.0) == 0.0

    def test_autotune_stationary(self):
        assert lambda_autotune_step(2.0, [0.3, 0.5], [0.5, 0.3], 0.1) == 2.0

    def test_autotune_one_step(self):
        assert lambda_autotune_step(1.0, [0.0], [0.5], 0.1) == pytest.approx(1.05)

    def test_autotune_decreases_to_floor(self):
        tuner = LambdaTuner(LambdaSchedule.autotune(0.5, 1.0, 0.2, 5.0))
        values = [tuner.update([1.0], [0.0]) for _ in range(10)]
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert values[-1] == 0.2

    def test_autotune_validation(self):
        with pytest.raises(ValueError):
            lambda_autotune_step(0.0, [1.0], [1.0], 0.1)
        with pytest.raises(ValueError):
            lambda_autotune_step(1.0, [], [], 0.1)

    def test_invalid_schedules(self):
        with pytest.raises(ValueError):
            LambdaSchedule.constant(-1.0)
        with pytest.raises(ValueError):
            LambdaSchedule.autotune(0.1, 10.0, 0.0, 1.0)


class TestICemConfig:
    def test_population_floor(self):
        cfg = ICemConfig(population=40, elites=10, iterations=10, population_decay=2.0)
        assert cfg.population_at(0) == 40
        assert cfg.population_at(5) == 20

    @pytest.mark.parametrize("kwargs", [dict(elites=0), dict(population=10, elites=6), dict(horizon=0),
                                        dict(population_decay=0.5), dict(elite_fraction_kept=1.5)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ICemConfig(**kwargs)


class TestColoredNoise:
    def test_unit_variance(self):
        x = colored_noise(2.0, (4000, 30), np.random.default_rng(0))
        assert x.std() == pytest.approx(1.0, rel=0.05)

    def test_exponent_controls_smoothness(self):
        rng = np.random.default_rng(1)
        white = colored_noise(0.0, (2000, 50), rng)
        red = colored_noise(2.0, (2000, 50), rng)

        def lag1(a):
            return np.mean(a[:, 1:] * a[:, :-1]) / np.mean(a * a)

        assert abs(lag1(white)) < 0.05
        assert lag1(red) > 0.5

    def test_single_step(self):
        assert colored_noise(2.0, (5, 3, 1), np.random.default_rng(2)).shape == (5, 3, 1)


class TestICem:
    def test_quadratic_optimum(self):
        cfg = ICemConfig(horizon=5)
        res = icem_plan(lambda a: -np.sum(a**2, axis=(1, 2)), cfg, [-1.0], [1.0], np.random.default_rng(0))
        assert res.value > -1e-3
        assert np.abs(res.actions).max() < 0.1

    def test_bang_bang(self):
        cfg = ICemConfig(horizon=4)
        res = icem_plan(lambda a: a[:, 2, 0], cfg, [-2.0], [2.0], np.random.default_rng(1))
        assert res.actions[2, 0] == pytest.approx(2.0, abs=1e-6)

    def test_deterministic(self):
        cfg = ICemConfig(population=30, elites=3, horizon=6)
        f = lambda a: -np.sum((a - 0.3) ** 2, axis=(1, 2))  # noqa: E731
        a = icem_plan(f, cfg, [-1.0], [1.0], np.random.default_rng(5))
        b = icem_plan(f, cfg, [-1.0], [1.0], np.random.default_rng(5))
        np.testing.assert_array_equal(a.actions, b.actions)
        assert a.value == b.value

    def test_warm_start_never_worse(self):
        cfg = ICemConfig(population=8, elites=2, iterations=1, horizon=6)
        target = np.linspace(-1, 1, 6)[:, None]
        f = lambda a: -np.sum((a - target) ** 2, axis=(1, 2))  # noqa: E731
        prev = np.r_[[[0.0]], target[:-1]]  # shifts to target[:-1] + last
        shifted = np.r_[prev[1:], prev[-1:]]
        res = icem_plan(f, cfg, [-1.0], [1.0], np.random.default_rng(3), prev)
        assert res.injected_elite
        assert res.value >= f(shifted[None])[0]

    def test_history_nondecreasing(self):
        cfg = ICemConfig(population=20, elites=4, iterations=6, horizon=3)
        res = icem_plan(lambda a: -np.abs(a - 0.5).sum(axis=(1, 2)), cfg, [-1.0], [1.0], np.random.default_rng(4))
        assert list(res.best_history) == sorted(res.best_history)

    def test_actions_within_bounds(self):
        cfg = ICemConfig(population=20, elites=4, horizon=5, init_std=5.0)
        res = icem_plan(lambda a: a.sum(axis=(1, 2)), cfg, [-0.3, 0.0], [0.1, 2.0], np.random.default_rng(6))
        assert np.all(res.actions >= [-0.3, 0.0]) and np.all(res.actions <= [0.1, 2.0])

    def test_all_infinite_returns_zeros(self):
        cfg = ICemConfig(population=10, elites=2, horizon=3)
        with pytest.warns(PlanningWarning):
            res = icem_plan(lambda a: np.full(len(a), -np.inf), cfg, [-1.0], [1.0], np.random.default_rng(0))
        np.testing.assert_array_equal(res.actions, 0.0)

    def test_wrong_warm_start_shape(self):
        with pytest.raises(ValueError):
            icem_plan(lambda a: a.sum(axis=(1, 2)), ICemConfig(population=10, elites=2, horizon=3),
                      [-1.0], [1.0], np.random.default_rng(0), np.zeros((4, 1)))


class TestObjectives:
    def test_zero_lambda_is_mean_bit_exact(self):
        env, model = fitted_pendulum_model()
        rng = np.random.default_rng(1)
        for _ in range(5):
            a = rng.uniform(-2, 2, (8, 1))
            assert (evaluate_objective(model, ObjectiveMode.OPTIMISTIC, [3.0, 0.0], a, 0.0, 1.0, env)
                    == evaluate_objective(model, ObjectiveMode.MEAN, [3.0, 0.0], a, 5.0, 1.0, env))

    def test_zero_eta_is_mean(self):
        env, model = fitted_pendulum_model()
        a = np.random.default_rng(2).uniform(-2, 2, (8, 1))
        assert (evaluate_objective(model, ObjectiveMode.HALLUCINATED, [3.0, 0.0], a, 0.0, 1.0, env)
                == evaluate_objective(model, ObjectiveMode.MEAN, [3.0, 0.0], a, 0.0, 1.0, env))

    def test_one_step_by_hand(self):
        env, model = fitted_pendulum_model()
        x0, u0 = np.array([1.0, 0.5]), np.array([0.7])
        _, sd = model.predict(env.features(x0, u0))
        want = float(env.reward(x0, u0)) + 3.0 * float(np.linalg.norm(sd))
        got = evaluate_objective(model, ObjectiveMode.OPTIMISTIC, x0, u0[None], 3.0, 1.0, env)
        assert got == pytest.approx(want, abs=1e-12)

    def test_discount_applied(self):
        env, model = fitted_pendulum_model()
        a = np.zeros((3, 1))
        seen = []

        def reward(x, u):
            seen.append(x.copy())
            return np.ones(len(x))

        assert evaluate_objective(model, ObjectiveMode.MEAN, [1.0, 0.0], a, 0.0, 0.5, env, reward) == 1.75

    def test_hallucinated_stays_in_confidence_set(self):
        env, model = fitted_pendulum_model()
        x0, u = np.array([0.5, -1.0]), np.array([[0.4], [0.0]])
        eta = np.array([[1.0, -0.3], [0.0, 0.0]])
        seen = []

        def reward(x, uu):
            seen.append(x.copy())
            return np.zeros(len(x))

        evaluate_objective(model, ObjectiveMode.HALLUCINATED, x0, u, 0.0, 1.0, env, reward, eta=eta)
        mu, sd = model.predict(env.features(x0, u[0]))
        delta = env.to_target(x0, seen[1][0])
        assert np.all(np.abs(delta - mu) <= model.beta * sd + 1e-12)
        np.testing.assert_allclose(delta, mu + model.beta * sd * eta[0], atol=1e-12)

    def test_posterior_sample_needs_noise(self):
        env, model = fitted_pendulum_model()
        with pytest.raises(ValueError):
            evaluate_objective(model, ObjectiveMode.POSTERIOR_SAMPLE, [0.0, 0.0], np.zeros((2, 1)), 0.0, 1.0, env)

    def test_posterior_sample_zero_noise_is_mean(self):
        env, model = fitted_pendulum_model()
        a = np.random.default_rng(3).uniform(-2, 2, (5, 1))
        v = evaluate_objective(model, ObjectiveMode.POSTERIOR_SAMPLE, [2.0, 0.0], a, 0.0, 1.0, env,
                               sample_noise=np.zeros((3, 5, 2)))
        assert v == pytest.approx(evaluate_objective(model, ObjectiveMode.MEAN, [2.0, 0.0], a, 0.0, 1.0, env))

    def test_nonfinite_rollout_is_discarded(self):
        env, model = fitted_pendulum_model()
        vals = rollout_values(model, env, ObjectiveMode.MEAN, [0.0, 0.0], np.zeros((2, 2, 1)), 0.0, 1.0,
                              lambda x, u: np.array([np.nan, 1.0]))
        assert vals[0] == -np.inf and vals[1] == 2.0

    def test_true_dynamics_planning(self):
        env = Pendulum(EnvSpec(EnvFamily.PENDULUM))
        a = np.zeros((4, 1))
        x, total = np.array([0.3, 0.0]), 0.0
        for t in range(4):
            total += float(env.reward(x, a[t]))
            x = env.true_dynamics(x, a[t])
        assert evaluate_objective(None, ObjectiveMode.MEAN, [0.3, 0.0], a, 0.0, 1.0, env) == pytest.approx(total)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), l1=st.floats(0, 50), dl=st.floats(0, 50))
    def test_optimistic_monotone_in_lambda(self, seed, l1, dl):
        env = SyntheticSystem.sample(KernelSpec.rbf(2), 1, np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 1)
        data = Dataset(rng.normal(size=(6, 2)), rng.normal(size=6), 0.01)
        model = CalibratedModel.create(data, KernelSpec.rbf(2))
        a = rng.uniform(-1, 1, (5, 1))
        v1 = evaluate_objective(model, ObjectiveMode.OPTIMISTIC, [0.0], a, l1, 1.0, env)
        v2 = evaluate_objective(model, ObjectiveMode.OPTIMISTIC, [0.0], a, l1 + dl, 1.0, env)
        assert v2 >= v1 - 1e-12


class TestMPC:
    def cfg(self, mode=ObjectiveMode.OPTIMISTIC):
        return PlannerConfig(ICemConfig(population=16, elites=4, iterations=2, horizon=6), mode)

    def test_first_episode_uniform(self):
        env = Pendulum(EnvSpec(EnvFamily.PENDULUM))
        a = MPCAgent(self.cfg(), env, np.random.default_rng(0))
        b = np.random.default_rng(0).uniform(env.action_low, env.action_high)
        np.testing.assert_array_equal(mpc_act(a, None, env.reset(0), 0), b)

    def test_warm_start_reused(self):
        env, model = fitted_pendulum_model()
        agent = MPCAgent(self.cfg(), env, np.random.default_rng(1))
        x = np.array([3.0, 0.0])
        agent.act(model, x, 1, 10.0)
        assert not agent.last_result.injected_elite
        agent.act(model, x, 1, 10.0)
        assert agent.last_result.injected_elite
        agent.reset()
        agent.act(model, x, 1, 10.0)
        assert not agent.last_result.injected_elite

    def test_hallucinated_decision_space(self):
        env, model = fitted_pendulum_model()
        agent = MPCAgent(self.cfg(ObjectiveMode.HALLUCINATED), env, np.random.default_rng(2))
        res = agent.plan(model, np.array([3.0, 0.0]))
        assert res.actions.shape == (6, 3)
        assert np.all(np.abs(res.actions[:, 1:]) <= 1.0)
        assert agent.act(model, np.array([3.0, 0.0]), 1).shape == (1,)

    def test_large_bonus_changes_behaviour(self):
        env, model = fitted_pendulum_model(n=8, seed=4)
        rng = np.random.default_rng(5)
        states = np.c_[rng.uniform(-math.pi, math.pi, 20), rng.uniform(-3, 3, 20)]
        differ = 0
        for i, x in enumerate(states):
            acts = [MPCAgent(self.cfg(), env, np.random.default_rng(i)).act(model, x, 1, lam)
                    for lam in (0.0, 1e6)]
            differ += not np.allclose(acts[0], acts[1], atol=1e-6)
        assert differ >= 10

    def test_deterministic_given_seed(self):
        env, model = fitted_pendulum_model()
        for mode in ObjectiveMode:
            cfg = PlannerConfig(self.cfg().icem, mode, particles=2)
            a = MPCAgent(cfg, env, np.random.default_rng(7)).act(model, np.array([1.0, 1.0]), 2, 10.0)
            b = MPCAgent(cfg, env, np.random.default_rng(7)).act(model, np.array([1.0, 1.0]), 2, 10.0)
            np.testing.assert_array_equal(a, b)
