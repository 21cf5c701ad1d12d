"""Trajectory optimization against learned (or true) dynamics.

Open-loop action sequences are scored by rolling them through the posterior
mean. The score is the discounted reward plus, depending on the objective mode,
an epistemic bonus ``lam * ||sigma_n||`` (optimistic), nothing (mean), sampled
model noise (posterior sample) or adversarially chosen "hallucinated" controls
that move the state anywhere inside the confidence set. Sequences are optimized
with iCEM and executed in receding-horizon fashion by :class:`MPCAgent`.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .calibration import CalibratedModel
from .envs import Environment

logger = logging.getLogger(__name__)


class PlanningWarning(UserWarning):
    pass


class ObjectiveMode(str, enum.Enum):
    OPTIMISTIC = "optimistic"
    MEAN = "mean"
    POSTERIOR_SAMPLE = "posterior_sample"
    HALLUCINATED = "hallucinated"


class LambdaMode(str, enum.Enum):
    CONSTANT = "constant"
    THEORY = "theory"
    LINEAR_DECAY = "linear_decay"
    AUTOTUNE = "autotune"


@dataclass(frozen=True)
class LambdaSchedule:
    """Weight of the epistemic bonus as a function of the episode index.

    Only the fields relevant to ``mode`` are read.
    """

    mode: LambdaMode = LambdaMode.CONSTANT
    value: float = 10.0
    # theory
    c_max: float = 1.0
    horizon: int = 1
    state_dim: int = 1
    noise_std: float = 1.0
    # linear decay
    lambda_init: float = 0.5
    lambda_final: float = 0.0
    n_final: int = 10
    # auto-tune
    step_size: float = 0.1
    lambda_min: float = 0.0
    lambda_max: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "mode", LambdaMode(self.mode))
        if self.mode is LambdaMode.CONSTANT and self.value < 0:
            raise ValueError("constant lambda must be non-negative")
        if self.mode is LambdaMode.THEORY and not (self.c_max > 0 and self.horizon >= 1
                                                   and self.state_dim >= 1 and self.noise_std > 0):
            raise ValueError("theory lambda needs positive C_max, T, d_x and noise std")
        if self.mode is LambdaMode.LINEAR_DECAY:
            if self.lambda_init < 0 or self.lambda_final < 0 or self.n_final < 1:
                raise ValueError("linear decay needs non-negative endpoints and n_final >= 1")
        if self.mode is LambdaMode.AUTOTUNE:
            if not 0 <= self.lambda_min <= self.lambda_max:
                raise ValueError("auto-tune bounds must satisfy 0 <= lambda_min <= lambda_max")
            if not self.lambda_min <= self.lambda_init <= self.lambda_max or self.lambda_init <= 0:
                raise ValueError("auto-tune initial lambda must be positive and inside its bounds")
            if self.step_size < 0:
                raise ValueError("auto-tune step size must be non-negative")

    @classmethod
    def constant(cls, value: float) -> "LambdaSchedule":
        return cls(LambdaMode.CONSTANT, value=value)

    @classmethod
    def theory(cls, c_max: float, horizon: int, state_dim: int, noise_std: float) -> "LambdaSchedule":
        return cls(LambdaMode.THEORY, c_max=c_max, horizon=horizon, state_dim=state_dim, noise_std=noise_std)

    @classmethod
    def linear_decay(cls, lambda_init: float, lambda_final: float, n_final: int) -> "LambdaSchedule":
        return cls(LambdaMode.LINEAR_DECAY, lambda_init=lambda_init, lambda_final=lambda_final, n_final=n_final)

    @classmethod
    def autotune(cls, step_size: float, lambda_init: float, lambda_min: float, lambda_max: float) -> "LambdaSchedule":
        return cls(LambdaMode.AUTOTUNE, step_size=step_size, lambda_init=lambda_init,
                   lambda_min=lambda_min, lambda_max=lambda_max)


def lambda_value(schedule: LambdaSchedule, n: int, beta: float) -> float:
    """Bonus weight for episode ``n``; ``beta`` is the previous model's confidence width.

    Auto-tune mode is stateful; this returns its initial value and
    :class:`LambdaTuner` carries the updates.
    """
    if n < 0:
        raise ValueError("episode index must be non-negative")
    s = schedule
    if s.mode is LambdaMode.CONSTANT:
        return float(s.value)
    if s.mode is LambdaMode.THEORY:
        return float(s.c_max * s.horizon * (1.0 + math.sqrt(s.state_dim)) * beta / s.noise_std)
    if s.mode is LambdaMode.LINEAR_DECAY:
        frac = min(n / s.n_final, 1.0)
        return float(s.lambda_init + (s.lambda_final - s.lambda_init) * frac)
    return float(s.lambda_init)


def lambda_autotune_step(lam: float, sigma_current, sigma_target, step: float,
                         lambda_min: float = 0.0, lambda_max: float = math.inf) -> float:
    """One gradient step on ``E[log(lam) * (sigma_current - sigma_target)]``.

    The gradient is ``mean(delta) / lam``; ``lam`` grows when the current policy
    collects less uncertainty than the target.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    cur = np.asarray(sigma_current, dtype=float)
    tgt = np.asarray(sigma_target, dtype=float)
    if cur.size == 0 or cur.shape != tgt.shape:
        raise ValueError("uncertainty batches must be nonempty and of equal shape")
    grad = float(np.mean(cur - tgt)) / lam
    return float(np.clip(lam - step * grad, lambda_min, lambda_max))


@dataclass
class LambdaTuner:
    """Carries the auto-tuned bonus weight across episodes."""

    schedule: LambdaSchedule
    value: float = field(init=False)

    def __post_init__(self):
        self.value = lambda_value(self.schedule, 0, 0.0)

    def update(self, sigma_current, sigma_target) -> float:
        s = self.schedule
        self.value = lambda_autotune_step(self.value, sigma_current, sigma_target, s.step_size,
                                          s.lambda_min, s.lambda_max)
        return self.value


@dataclass(frozen=True)
class ICemConfig:
    """iCEM parameters. ``init_std`` is relative to each action half-range."""

    population: int = 200
    elites: int = 20
    iterations: int = 5
    horizon: int = 30
    noise_color_exponent: float = 2.0
    population_decay: float = 1.25
    elite_fraction_kept: float = 0.3
    init_std: float | tuple[float, ...] = 0.5
    momentum: float = 0.1
    shift_init: bool = True
    add_mean_last: bool = True

    def __post_init__(self):
        if isinstance(self.init_std, list):
            object.__setattr__(self, "init_std", tuple(self.init_std))
        if self.horizon < 1 or self.iterations < 1:
            raise ValueError("horizon and iterations must be at least 1")
        if not 1 <= self.elites <= self.population:
            raise ValueError("elites must lie in [1, population]")
        if self.population < 2 * self.elites:
            raise ValueError("population must be at least twice the number of elites")
        if self.population_decay < 1.0:
            raise ValueError("population_decay must be >= 1")
        if not 0.0 <= self.elite_fraction_kept <= 1.0:
            raise ValueError("elite_fraction_kept must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if np.any(np.asarray(self.init_std) <= 0):
            raise ValueError("init_std must be positive")

    def population_at(self, iteration: int) -> int:
        return max(int(round(self.population * self.population_decay ** (-iteration))), 2 * self.elites)


@dataclass(frozen=True)
class PlannerConfig:
    icem: ICemConfig = field(default_factory=ICemConfig)
    mode: ObjectiveMode = ObjectiveMode.OPTIMISTIC
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    particles: int = 1
    discount: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", ObjectiveMode(self.mode))
        if self.particles < 1:
            raise ValueError("particles must be at least 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("planning discount must lie in (0, 1]")


def colored_noise(exponent: float, size: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian noise with power spectrum ``~ 1/f**exponent`` along the last axis."""
    n = size[-1]
    if n == 1:
        return rng.standard_normal(size)
    freqs = np.fft.rfftfreq(n)
    freqs[0] = 1.0 / n
    scale = freqs ** (-exponent / 2.0)
    # exact per-sample variance of the inverse transform below
    inner = scale[1:-1] if n % 2 == 0 else scale[1:]
    edge = scale[0] ** 2 + (scale[-1] ** 2 if n % 2 == 0 else 0.0)
    sigma = math.sqrt(2.0 * edge + 4.0 * float(np.sum(inner * inner))) / n
    shape = tuple(size[:-1]) + (len(freqs),)
    real = rng.standard_normal(shape) * scale
    imag = rng.standard_normal(shape) * scale
    if n % 2 == 0:
        imag[..., -1] = 0.0
        real[..., -1] *= math.sqrt(2.0)
    imag[..., 0] = 0.0
    real[..., 0] *= math.sqrt(2.0)
    return np.fft.irfft(real + 1j * imag, n=n, axis=-1) / sigma


@dataclass(frozen=True)
class PlanResult:
    actions: np.ndarray
    value: float
    injected_elite: bool
    best_history: tuple[float, ...]


def icem_plan(objective: Callable[[np.ndarray], np.ndarray], cfg: ICemConfig, low, high,
              rng: np.random.Generator, prev_solution: np.ndarray | None = None) -> PlanResult:
    """Maximize ``objective`` over ``(horizon, dim)`` sequences inside ``[low, high]``.

    ``objective`` scores a batch ``(P, horizon, dim)`` and returns ``(P,)``.
    A supplied previous solution is shifted by one step and evaluated as an
    extra candidate, so the result never scores below it.
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    h, d = cfg.horizon, low.shape[0]
    half = 0.5 * (high - low)
    mean = np.broadcast_to(0.5 * (high + low), (h, d)).copy()
    shifted = None
    if prev_solution is not None and cfg.shift_init:
        prev = np.asarray(prev_solution, dtype=float)
        if prev.shape != (h, d):
            raise ValueError(f"previous solution has shape {prev.shape}, expected {(h, d)}")
        shifted = np.clip(np.concatenate([prev[1:], prev[-1:]], axis=0), low, high)
        mean = shifted.copy()
    std = np.broadcast_to(np.asarray(cfg.init_std, dtype=float) * half, (h, d)).copy()

    best, best_value = None, -math.inf
    history = []
    kept = None
    n_keep = int(math.ceil(cfg.elite_fraction_kept * cfg.elites))
    for it in range(cfg.iterations):
        noise = colored_noise(cfg.noise_color_exponent, (cfg.population_at(it), d, h), rng)
        candidates = [np.clip(mean + std * noise.transpose(0, 2, 1), low, high)]
        if it == 0 and shifted is not None:
            candidates.append(shifted[None])
        if kept is not None and n_keep:
            candidates.append(kept)
        if it == cfg.iterations - 1 and cfg.add_mean_last:
            candidates.append(np.clip(mean, low, high)[None])
        samples = np.concatenate(candidates, axis=0)
        values = np.asarray(objective(samples), dtype=float)
        values = np.where(np.isnan(values), -math.inf, values)
        order = np.argsort(-values, kind="stable")[: cfg.elites]
        elites, elite_values = samples[order], values[order]
        if elite_values[0] > best_value:
            best, best_value = elites[0].copy(), float(elite_values[0])
        history.append(best_value)
        finite = np.isfinite(elite_values)
        if finite.any():
            fe = elites[finite]
            mean = cfg.momentum * mean + (1.0 - cfg.momentum) * fe.mean(axis=0)
            std = cfg.momentum * std + (1.0 - cfg.momentum) * fe.std(axis=0)
            kept = fe[:n_keep]
    if best is None:
        warnings.warn("every candidate sequence scored -inf; returning zero actions", PlanningWarning, stacklevel=2)
        best = np.broadcast_to(np.clip(np.zeros(d), low, high), (h, d)).copy()
    return PlanResult(best, best_value, shifted is not None, tuple(history))


class _LearnedDynamics:
    """Predictions of next-state targets from a calibrated model."""

    def __init__(self, model: CalibratedModel, env: Environment):
        self.model, self.env = model, env
        self.beta = model.beta

    def mean(self, x, u):
        return self.model.predict_mean(self.env.features(x, u))

    def mean_std(self, x, u):
        return self.model.predict(self.env.features(x, u))


class _TrueDynamics:
    """Noise-free ground truth in the same interface; zero epistemic uncertainty."""

    beta = 0.0

    def __init__(self, env: Environment):
        self.env = env

    def mean(self, x, u):
        return self.env.to_target(x, self.env.true_dynamics(x, u))

    def mean_std(self, x, u):
        m = self.mean(x, u)
        return m, np.zeros_like(m)


def rollout_values(model: CalibratedModel | None, env: Environment, mode: ObjectiveMode, x0,
                   decisions: np.ndarray, lam: float = 0.0, discount: float = 1.0,
                   reward_fn: Callable | None = None, sample_noise: np.ndarray | None = None) -> np.ndarray:
    """Score a batch of decision sequences ``(P, H, D)``.

    ``D`` is ``d_u`` except in hallucinated mode where the trailing ``d_x``
    entries are the hallucinated controls ``eta``. ``sample_noise`` holds the
    fixed standard-normal draws ``(K, H, d_x)`` for posterior-sample mode; the
    value is averaged over the ``K`` particles. ``model=None`` plans on the
    true dynamics.
    """
    mode = ObjectiveMode(mode)
    reward_fn = reward_fn or env.reward
    dyn = _TrueDynamics(env) if model is None else _LearnedDynamics(model, env)
    decisions = np.asarray(decisions, dtype=float)
    p, h, _ = decisions.shape
    du, dx = env.action_dim, env.state_dim
    actions = env.clip_action(decisions[..., :du])
    eta = None
    if mode is ObjectiveMode.HALLUCINATED:
        eta = np.clip(decisions[..., du:du + dx], -1.0, 1.0)
    particles = 1
    if mode is ObjectiveMode.POSTERIOR_SAMPLE:
        if sample_noise is None:
            raise ValueError("posterior-sample mode needs fixed sample noise")
        particles = sample_noise.shape[0]
        actions = np.repeat(actions, particles, axis=0)
        noise = np.tile(sample_noise, (p, 1, 1))
    x = np.tile(np.asarray(x0, dtype=float), (p * particles, 1))
    need_std = (mode is ObjectiveMode.OPTIMISTIC and lam != 0.0) or mode in (
        ObjectiveMode.HALLUCINATED, ObjectiveMode.POSTERIOR_SAMPLE)
    values = np.zeros(p * particles)
    bad = np.zeros(p * particles, dtype=bool)
    disc = 1.0
    for t in range(h):
        u = actions[:, t]
        r = reward_fn(x, u)
        if need_std:
            mu, sd = dyn.mean_std(x, u)
        else:
            mu = dyn.mean(x, u)
        if mode is ObjectiveMode.OPTIMISTIC and lam != 0.0:
            values += disc * (r + lam * np.linalg.norm(sd, axis=-1))
        else:
            values += disc * r
        if mode is ObjectiveMode.HALLUCINATED:
            mu = mu + dyn.beta * sd * eta[:, t]
        elif mode is ObjectiveMode.POSTERIOR_SAMPLE:
            mu = mu + sd * noise[:, t]
        x = env.from_target(x, mu)
        now_bad = ~np.all(np.isfinite(x), axis=-1)
        if now_bad.any():
            bad |= now_bad
            x[now_bad] = np.asarray(x0, dtype=float)
        disc *= discount
    values[bad | ~np.isfinite(values)] = -math.inf
    if bad.any():
        logger.debug("discarded %d candidates with non-finite rollouts", int(bad.sum()))
    if particles > 1:
        values = values.reshape(p, particles).mean(axis=1)
    return values


def evaluate_objective(model: CalibratedModel | None, mode: ObjectiveMode, x0, actions, lam: float,
                       discount: float, env: Environment, reward_fn: Callable | None = None,
                       eta=None, sample_noise: np.ndarray | None = None) -> float:
    """Value of a single ``(H, d_u)`` action sequence under the chosen objective."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim != 2 or actions.shape[1] != env.action_dim:
        raise ValueError(f"actions must have shape (H, {env.action_dim})")
    decisions = actions
    if ObjectiveMode(mode) is ObjectiveMode.HALLUCINATED:
        eta = np.zeros((len(actions), env.state_dim)) if eta is None else np.asarray(eta, dtype=float)
        decisions = np.concatenate([actions, eta], axis=1)
    return float(rollout_values(model, env, mode, x0, decisions[None], lam, discount, reward_fn, sample_noise)[0])


class MPCAgent:
    """Receding-horizon controller: plan, execute the first action, shift, repeat."""

    def __init__(self, config: PlannerConfig, env: Environment, rng: np.random.Generator,
                 reward_fn: Callable | None = None):
        self.config = config
        self.env = env
        self.rng = rng
        self.reward_fn = reward_fn
        self.prev: np.ndarray | None = None
        self.last_result: PlanResult | None = None
        hallucinated = config.mode is ObjectiveMode.HALLUCINATED
        extra = env.state_dim if hallucinated else 0
        self.low = np.concatenate([env.action_low, -np.ones(extra)])
        self.high = np.concatenate([env.action_high, np.ones(extra)])

    def reset(self) -> None:
        self.prev = None
        self.last_result = None

    def random_action(self) -> np.ndarray:
        return self.rng.uniform(self.env.action_low, self.env.action_high)

    def plan(self, model: CalibratedModel | None, x, lam: float = 0.0) -> PlanResult:
        cfg = self.config
        noise = None
        if cfg.mode is ObjectiveMode.POSTERIOR_SAMPLE:
            noise = self.rng.standard_normal((cfg.particles, cfg.icem.horizon, self.env.state_dim))
        mode = cfg.mode if model is not None else ObjectiveMode.MEAN

        def objective(decisions):
            return rollout_values(model, self.env, mode, x, decisions, lam, cfg.discount, self.reward_fn, noise)

        result = icem_plan(objective, cfg.icem, self.low, self.high, self.rng, self.prev)
        self.prev = result.actions
        self.last_result = result
        return result

    def act(self, model: CalibratedModel | None, x, n: int, lam: float = 0.0) -> np.ndarray:
        """First action of a fresh plan; uniform random when ``n == 0``."""
        if n == 0:
            return self.random_action()
        return self.plan(model, x, lam).actions[0, : self.env.action_dim].copy()


def mpc_act(agent: MPCAgent, model: CalibratedModel | None, x, n: int, lam: float = 0.0) -> np.ndarray:
    return agent.act(model, x, n, lam)
