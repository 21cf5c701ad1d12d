"""Ground-truth systems ``x' = f*(x, u) + w`` with bounded rewards.

Each environment also tells the learner how to see it: ``features`` maps a
state-action pair to the GP input, ``to_target``/``from_target`` convert between
next states and the GP regression targets (state residuals for the physical
systems).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .gp import KernelSpec, kernel_matrix


class EnvFamily(str, enum.Enum):
    PENDULUM = "pendulum"
    MOUNTAIN_CAR = "mountaincar"


DEFAULT_HORIZON = {EnvFamily.PENDULUM: 200, EnvFamily.MOUNTAIN_CAR: 150}
DEFAULT_NOISE = {EnvFamily.PENDULUM: (0.01, 0.01), EnvFamily.MOUNTAIN_CAR: (1e-3, 1e-4)}
DEFAULT_DT = {EnvFamily.PENDULUM: 0.05, EnvFamily.MOUNTAIN_CAR: 1.0}
DEFAULT_REWARD = {
    EnvFamily.PENDULUM: {"control_penalty": 0.001},
    EnvFamily.MOUNTAIN_CAR: {"goal_position": 0.45},
}


@dataclass(frozen=True)
class EnvSpec:
    family: EnvFamily
    horizon: int | None = None
    noise_std: tuple[float, ...] | None = None
    dt: float | None = None
    action_cost: float = 0.0
    jitter: float = 0.05
    reward_params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        family = EnvFamily(self.family)
        object.__setattr__(self, "family", family)
        if self.horizon is None:
            object.__setattr__(self, "horizon", DEFAULT_HORIZON[family])
        if self.noise_std is None:
            object.__setattr__(self, "noise_std", DEFAULT_NOISE[family])
        else:
            noise = np.broadcast_to(np.asarray(self.noise_std, dtype=float), (2,))
            object.__setattr__(self, "noise_std", tuple(float(v) for v in noise))
        if self.dt is None:
            object.__setattr__(self, "dt", DEFAULT_DT[family])
        params = dict(DEFAULT_REWARD[family])
        unknown = set(self.reward_params) - set(params)
        if unknown:
            raise ValueError(f"unknown reward parameters for {family.value}: {sorted(unknown)}")
        params.update(self.reward_params)
        object.__setattr__(self, "reward_params", params)
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if any(s < 0 for s in self.noise_std):
            raise ValueError("noise std must be non-negative")
        if self.action_cost < 0:
            raise ValueError("action cost must be non-negative")
        if not 0 <= self.jitter:
            raise ValueError("jitter must be non-negative")


def wrap_angle(theta):
    """Map angles to ``[-pi, pi)``."""
    return np.mod(np.asarray(theta) + math.pi, 2.0 * math.pi) - math.pi


class Environment:
    """Common plumbing: clipping, noise injection and the action-cost wrapper."""

    state_dim: int
    action_dim: int
    feature_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    base_r_max: float = 1.0

    def __init__(self, horizon: int, noise_std, action_cost: float = 0.0):
        self.horizon = int(horizon)
        self.noise_std = np.broadcast_to(np.asarray(noise_std, dtype=float), (self.state_dim,)).copy()
        self.action_cost = float(action_cost)

    @property
    def r_max(self) -> float:
        return self.base_r_max + self.action_cost * self._cost_shift

    @property
    def _cost_shift(self) -> float:
        u_max = float(np.max(np.maximum(np.abs(self.action_low), np.abs(self.action_high))))
        return u_max * math.sqrt(self.action_dim)

    def clip_action(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.action_low, self.action_high)

    def reward(self, x, u) -> np.ndarray:
        """Reward in ``[0, r_max]`` for (batched) states and clipped actions."""
        u = self.clip_action(u)
        r = self.base_reward(np.asarray(x, dtype=float), u)
        if self.action_cost:
            r = r - self.action_cost * np.linalg.norm(u, axis=-1) + self.action_cost * self._cost_shift
        return r

    def step(self, x, u, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,) or not np.all(np.isfinite(x)):
            raise ValueError(f"invalid state {x!r}")
        u = self.clip_action(np.reshape(u, (self.action_dim,)))
        nxt = self.true_dynamics(x, u)
        if np.any(self.noise_std > 0):
            nxt = self.project(nxt + self.noise_std * rng.standard_normal(self.state_dim))
        return nxt, float(self.reward(x, u))

    # learner-facing view -------------------------------------------------
    def to_target(self, x, x_next) -> np.ndarray:
        return np.asarray(x_next, dtype=float) - np.asarray(x, dtype=float)

    def from_target(self, x, delta) -> np.ndarray:
        return self.project(np.asarray(x, dtype=float) + delta)

    def project(self, x) -> np.ndarray:
        return x

    # family specific ------------------------------------------------------
    def reset(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def true_dynamics(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def base_reward(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def features(self, x, u) -> np.ndarray:
        raise NotImplementedError


class Pendulum(Environment):
    """Torque-limited pendulum, ``theta = 0`` upright, state ``(theta, theta_dot)``.

    ``theta_ddot = (g/l) sin(theta) + u / (m l^2) - c * theta_dot`` integrated
    with semi-implicit Euler.
    """

    state_dim = 2
    action_dim = 1
    feature_dim = 4
    action_low = np.array([-2.0])
    action_high = np.array([2.0])
    omega_scale = 4.0

    def __init__(self, spec: EnvSpec | None = None, *, gravity=9.81, length=1.0, mass=1.0, damping=0.05):
        spec = spec or EnvSpec(EnvFamily.PENDULUM)
        super().__init__(spec.horizon, spec.noise_std, spec.action_cost)
        self.spec = spec
        self.dt = spec.dt
        self.gravity, self.length, self.mass, self.damping = gravity, length, mass, damping
        self.control_penalty = spec.reward_params["control_penalty"]
        self.jitter = spec.jitter

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        offset = rng.uniform(-self.jitter, self.jitter, size=2) if self.jitter else np.zeros(2)
        return np.array([wrap_angle(math.pi + offset[0]), offset[1]])

    def true_dynamics(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.clip_action(u)
        theta, omega = x[..., 0], x[..., 1]
        acc = (self.gravity / self.length) * np.sin(theta) + u[..., 0] / (self.mass * self.length ** 2) \
            - self.damping * omega
        omega_next = omega + self.dt * acc
        theta_next = wrap_angle(theta + self.dt * omega_next)
        return np.stack([theta_next, omega_next], axis=-1)

    def base_reward(self, x, u) -> np.ndarray:
        r = 0.5 * (1.0 + np.cos(x[..., 0])) - self.control_penalty * u[..., 0] ** 2
        return np.clip(r, 0.0, 1.0)

    def features(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.clip_action(u)
        return np.stack([np.cos(x[..., 0]), np.sin(x[..., 0]), x[..., 1] / self.omega_scale,
                         u[..., 0] / self.action_high[0]], axis=-1)

    def to_target(self, x, x_next) -> np.ndarray:
        d = np.asarray(x_next, dtype=float) - np.asarray(x, dtype=float)
        return np.stack([wrap_angle(d[..., 0]), d[..., 1]], axis=-1)

    def project(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        x[..., 0] = wrap_angle(x[..., 0])
        return x

    def energy(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ml2 = self.mass * self.length ** 2
        return 0.5 * ml2 * x[..., 1] ** 2 + self.mass * self.gravity * self.length * np.cos(x[..., 0])


class MountainCar(Environment):
    """Continuous mountain car with a sparse goal indicator reward."""

    state_dim = 2
    action_dim = 1
    feature_dim = 3
    action_low = np.array([-1.0])
    action_high = np.array([1.0])
    min_position, max_position = -1.2, 0.6
    max_speed = 0.07
    power = 0.0015
    gravity = 0.0025

    def __init__(self, spec: EnvSpec | None = None):
        spec = spec or EnvSpec(EnvFamily.MOUNTAIN_CAR)
        super().__init__(spec.horizon, spec.noise_std, spec.action_cost)
        self.spec = spec
        self.goal_position = spec.reward_params["goal_position"]
        self.jitter = spec.jitter

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        offset = rng.uniform(-self.jitter, self.jitter) if self.jitter else 0.0
        return np.array([-0.5 + offset, 0.0])

    def project(self, x) -> np.ndarray:
        x = np.array(x, dtype=float)
        p = np.clip(x[..., 0], self.min_position, self.max_position)
        v = np.clip(x[..., 1], -self.max_speed, self.max_speed)
        v = np.where((p <= self.min_position) & (v < 0), 0.0, v)
        v = np.where((p >= self.max_position) & (v > 0), 0.0, v)
        return np.stack([p, v], axis=-1)

    def true_dynamics(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.clip_action(u)
        p, v = x[..., 0], x[..., 1]
        v = np.clip(v + self.power * u[..., 0] - self.gravity * np.cos(3.0 * p), -self.max_speed, self.max_speed)
        return self.project(np.stack([p + v, v], axis=-1))

    def base_reward(self, x, u) -> np.ndarray:
        return (x[..., 0] >= self.goal_position).astype(float)

    def features(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.clip_action(u)
        return np.stack([x[..., 0], x[..., 1] / self.max_speed, u[..., 0]], axis=-1)


def make_env(spec: EnvSpec) -> Environment:
    if spec.family is EnvFamily.PENDULUM:
        return Pendulum(spec)
    return MountainCar(spec)


def env_reset(spec: EnvSpec, seed: int) -> np.ndarray:
    return make_env(spec).reset(seed)


def env_step(spec: EnvSpec, state, action, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    return make_env(spec).step(state, action, rng)


def true_dynamics(spec: EnvSpec, state, action) -> np.ndarray:
    return make_env(spec).true_dynamics(state, action)


class SyntheticSystem(Environment):
    """Dynamics drawn from a GP prior: ``x' = f(x, u) + w`` with ``f`` in the RKHS.

    ``f_j`` is the kernel interpolant of a joint prior sample at ``n_centers``
    random locations, so it is an exact member of the kernel's RKHS and
    matches the prior's smoothness. The learner regresses ``x'`` directly.
    Reward is a Gaussian bump around ``goal`` in state space.
    """

    def __init__(self, kernel: KernelSpec, centers: np.ndarray, coefficients: np.ndarray, *,
                 state_dim: int, action_dim: int = 1, horizon: int = 10, noise_std=0.05,
                 goal=1.0, reward_width: float = 0.5, start=None, action_bound: float = 1.0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.feature_dim = state_dim + action_dim
        self.action_low = np.full(action_dim, -action_bound)
        self.action_high = np.full(action_dim, action_bound)
        super().__init__(horizon, noise_std)
        self.kernel = kernel
        self.centers = np.asarray(centers, dtype=float)
        self.coefficients = np.asarray(coefficients, dtype=float)
        self.goal = np.broadcast_to(np.asarray(goal, dtype=float), (state_dim,)).copy()
        self.reward_width = reward_width
        self.start = np.zeros(state_dim) if start is None else np.asarray(start, dtype=float)

    @classmethod
    def sample(cls, kernel: KernelSpec, state_dim: int, rng: np.random.Generator, *, action_dim: int = 1,
               n_centers: int = 150, box: float = 3.0, **kwargs) -> "SyntheticSystem":
        d = state_dim + action_dim
        if kernel.input_dim != d:
            raise ValueError("kernel input dimension must equal state_dim + action_dim")
        centers = rng.uniform(-box, box, size=(n_centers, d))
        gram = kernel_matrix(kernel, centers, centers) + 1e-8 * np.eye(n_centers)
        chol = np.linalg.cholesky(gram)
        values = chol @ rng.standard_normal((n_centers, state_dim))
        coefficients = np.linalg.solve(gram, values)
        return cls(kernel, centers, coefficients, state_dim=state_dim, action_dim=action_dim, **kwargs)

    def f(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        flat = z.reshape(-1, self.feature_dim)
        out = kernel_matrix(self.kernel, flat, self.centers) @ self.coefficients
        return out.reshape(z.shape[:-1] + (self.state_dim,))

    def reset(self, seed: int) -> np.ndarray:
        return self.start.copy()

    def true_dynamics(self, x, u) -> np.ndarray:
        return self.f(self.features(x, u))

    def base_reward(self, x, u) -> np.ndarray:
        d2 = np.sum((np.asarray(x) - self.goal) ** 2, axis=-1)
        return np.exp(-0.5 * d2 / self.reward_width ** 2)

    def features(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = self.clip_action(u)
        return np.concatenate([x, u], axis=-1)

    def to_target(self, x, x_next) -> np.ndarray:
        return np.asarray(x_next, dtype=float)

    def from_target(self, x, delta) -> np.ndarray:
        return np.asarray(delta, dtype=float)
