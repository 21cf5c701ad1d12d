"""Interaction loops: episodic, discounted, nonepisodic and pure exploration.

Every loop alternates between acting with the current model (receding-horizon
planning) and refitting the model on all data collected so far. Episode 0 (or
the warm-up phase of the nonepisodic loop) uses uniform random actions because
no model exists yet.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .calibration import BetaSchedule, CalibratedModel, update_model
from .envs import EnvFamily, EnvSpec, Environment, make_env
from .gp import (
    Dataset,
    HyperparameterBounds,
    KernelFamily,
    KernelSpec,
    NumericalError,
    fit_hyperparameters,
    gp_fit,
    information_gain_increment,
    select_informative,
)
from .planner import (
    ICemConfig,
    LambdaMode,
    LambdaTuner,
    MPCAgent,
    ObjectiveMode,
    PlannerConfig,
    lambda_value,
)

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)


class Regime(str, enum.Enum):
    EPISODIC = "episodic"
    DISCOUNTED = "discounted"
    NONEPISODIC = "nonepisodic"
    PURE_EXPLORATION = "pure_exploration"


@dataclass(frozen=True)
class ModelConfig:
    """GP model options.

    ``signal_variance=None`` initializes each output's signal variance from the
    empirical variance of its targets. ``noise_std=None`` uses the
    environment's process noise. ``min_gain > 0`` thins new data: a transition
    is stored only if it adds at least that much information (nats, summed over
    outputs) given the data already stored.
    """

    kernel: KernelFamily = KernelFamily.RBF
    lengthscale: float = 1.0
    signal_variance: float | None = None
    noise_std: float | tuple[float, ...] | None = None
    fit_hyperparameters: bool = True
    fit_restarts: int = 5
    fit_points: int | None = 150
    fit_every: int = 1
    lengthscale_bounds: tuple[float, float] = (0.05, 20.0)
    max_points: int | None = 2000
    min_gain: float = 0.0
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    qp_bound: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", KernelFamily(self.kernel))
        if isinstance(self.noise_std, list):
            object.__setattr__(self, "noise_std", tuple(self.noise_std))
        if isinstance(self.lengthscale_bounds, list):
            object.__setattr__(self, "lengthscale_bounds", tuple(self.lengthscale_bounds))
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        if self.signal_variance is not None and self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if self.noise_std is not None and np.any(np.asarray(self.noise_std) <= 0):
            raise ValueError("model noise std must be positive")
        if self.fit_restarts < 1 or self.fit_every < 1:
            raise ValueError("fit_restarts and fit_every must be at least 1")
        if self.max_points is not None and self.max_points < 1:
            raise ValueError("max_points must be at least 1")
        if self.qp_bound is not None and self.qp_bound < 0:
            raise ValueError("qp_bound must be non-negative")
        if self.min_gain < 0:
            raise ValueError("min_gain must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    regime: Regime = Regime.EPISODIC
    episodes: int = 10
    seed: int = 0
    gamma: float = 0.99
    evaluate_discounted: bool = True
    trigger_threshold: float = LOG2
    min_horizon: int = 1
    hard_cap: int | None = 500
    total_steps: int = 5000
    warmup_steps: int = 50
    eval_points: np.ndarray | None = None
    autotune_lag: int = 3
    autotune_batch: int = 8

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.trigger_threshold > 0:
            raise ValueError("trigger_threshold must be positive")
        if self.min_horizon < 1:
            raise ValueError("min_horizon must be at least 1")
        if self.hard_cap is not None and self.hard_cap < 1:
            raise ValueError("hard_cap must be at least 1")
        if self.total_steps < 1 or self.warmup_steps < 1:
            raise ValueError("total_steps and warmup_steps must be at least 1")


@dataclass
class EpisodeRecord:
    index: int
    ret: float
    intrinsic_return: float
    length: int
    lam: float
    info_gain: float
    beta: float
    wall_time: float
    discounted_return: float | None = None
    max_sigma: float | None = None


@dataclass
class StepTrace:
    """Per-step trace of the nonepisodic loop."""

    states: list = field(default_factory=list)
    next_states: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    sigma_norms: list = field(default_factory=list)
    info_contributions: list = field(default_factory=list)
    variances: list = field(default_factory=list)
    trigger_steps: list = field(default_factory=list)
    trigger_reasons: list = field(default_factory=list)
    trigger_values: list = field(default_factory=list)


@dataclass
class ExperimentLog:
    regime: Regime
    env: str
    mode: str
    seed: int
    episodes: list[EpisodeRecord] = field(default_factory=list)
    steps: StepTrace | None = None
    model_updates: int = 0
    resets: int = 0
    noise_variance: tuple[float, ...] = ()
    failed: str | None = None

    @property
    def returns(self) -> np.ndarray:
        return np.array([e.ret for e in self.episodes])

    @property
    def info_gains(self) -> np.ndarray:
        return np.array([e.info_gain for e in self.episodes])

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.episodes])

    @property
    def lengths(self) -> np.ndarray:
        return np.array([e.length for e in self.episodes], dtype=int)


def horizon_schedule(n: int, gamma: float) -> int:
    """Episode length ``max(1, ceil(-ln n / ln gamma))`` for the discounted setting."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    return max(1, math.ceil(-math.log(n) / math.log(gamma)))


def information_sum(variances, noise_variance) -> float:
    """``sum_k sum_j log(1 + var_kj / noise_j)`` over accumulated steps."""
    v = np.atleast_2d(np.asarray(variances, dtype=float))
    return float(np.sum(np.log1p(v / np.asarray(noise_variance, dtype=float))))


def trigger_reason(variances, noise_variance, threshold: float = LOG2, steps_since_update: int | None = None,
                   hard_cap: int | None = 500, min_horizon: int = 1) -> str | None:
    """Why a model update is due, or ``None``.

    ``"information"`` when the accumulated log-sum strictly exceeds
    ``threshold``; ``"hard_cap"`` when the step budget since the last update is
    exhausted.
    """
    steps = len(np.atleast_2d(variances)) if steps_since_update is None else steps_since_update
    if steps < min_horizon:
        return None
    if information_sum(variances, noise_variance) > threshold:
        return "information"
    if hard_cap is not None and steps >= hard_cap:
        return "hard_cap"
    return None


def update_trigger(variances, noise_variance, threshold: float = LOG2, steps_since_update: int | None = None,
                   hard_cap: int | None = 500, min_horizon: int = 1) -> bool:
    return trigger_reason(variances, noise_variance, threshold, steps_since_update, hard_cap, min_horizon) is not None


def discounted_eval_length(gamma: float, r_max: float, tol: float = 1e-4) -> int:
    """First ``t`` with ``gamma**t * r_max < tol``."""
    if r_max <= tol:
        return 1
    return max(1, math.floor(math.log(tol / r_max) / math.log(gamma)) + 1)


class _Streams:
    """Independent random streams derived from one integer seed."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        env_ss, plan_ss, reset_ss, aux_ss = ss.spawn(4)
        self.env = np.random.default_rng(env_ss)
        self.plan = np.random.default_rng(plan_ss)
        self.aux = np.random.default_rng(aux_ss)
        self._reset = np.random.default_rng(reset_ss)

    def reset_seed(self) -> int:
        return int(self._reset.integers(2 ** 31))


class _ModelBuilder:
    """Owns the data buffer and the hyperparameter refits."""

    def __init__(self, cfg: ModelConfig, env: Environment, rng: np.random.Generator):
        self.cfg = cfg
        self.env = env
        self.rng = rng
        noise = env.noise_std if cfg.noise_std is None else cfg.noise_std
        noise = np.broadcast_to(np.asarray(noise, dtype=float), (env.state_dim,))
        if np.any(noise <= 0):
            raise ValueError("the GP needs a positive noise level; set model.noise_std")
        self.noise_variance = noise ** 2
        self.kernels: tuple[KernelSpec, ...] | None = None
        self.bounds = HyperparameterBounds(lengthscale=cfg.lengthscale_bounds)
        self.updates = 0

    def empty(self) -> Dataset:
        return Dataset.empty(self.env.feature_dim, self.env.state_dim, self.noise_variance)

    def dataset(self, states, actions, next_states) -> Dataset:
        x = np.asarray(states, dtype=float).reshape(-1, self.env.state_dim)
        u = np.asarray(actions, dtype=float).reshape(-1, self.env.action_dim)
        xn = np.asarray(next_states, dtype=float).reshape(-1, self.env.state_dim)
        if len(x) == 0:
            return self.empty()
        return Dataset(self.env.features(x, u), self.env.to_target(x, xn), self.noise_variance)

    def _initial_kernels(self, data: Dataset) -> tuple[KernelSpec, ...]:
        out = []
        for j in range(self.env.state_dim):
            sv = self.cfg.signal_variance
            if sv is None:
                sv = float(np.var(data.targets[:, j])) if len(data) > 1 else 1.0
                sv = min(max(sv, 1e-6), 1e2)
            out.append(KernelSpec(self.cfg.kernel, (self.cfg.lengthscale,) * self.env.feature_dim, sv,
                                  self.env.feature_dim))
        return tuple(out)

    def update(self, model: CalibratedModel | None, new: Dataset) -> CalibratedModel:
        cfg = self.cfg
        if self.kernels is None:
            self.kernels = self._initial_kernels(new)
        if cfg.min_gain > 0 and len(new):
            post = model.posterior if model is not None else gp_fit(self.empty(), self.kernels)
            keep = select_informative(post, new.inputs, cfg.min_gain)
            new = Dataset(new.inputs[keep], new.targets[keep], new.noise_variance)
        if model is None:
            data = new
        else:
            data = model.data.extend(new, cfg.max_points)
        if cfg.fit_hyperparameters and self.updates % cfg.fit_every == 0:
            self.kernels = fit_hyperparameters(data, self.kernels, self.bounds, restarts=cfg.fit_restarts,
                                               max_points=cfg.fit_points, rng=self.rng)
        self.updates += 1
        if model is None:
            return CalibratedModel.create(data, self.kernels, cfg.beta, max_points=cfg.max_points,
                                          qp_bound=cfg.qp_bound, n=1)
        return update_model(model, new, self.kernels)


def _sigma_norm(model: CalibratedModel | None, env: Environment, x, u) -> tuple[float, np.ndarray]:
    if model is None:
        return 0.0, np.zeros(env.state_dim)
    _, sd = model.predict(env.features(np.asarray(x), np.asarray(u)))
    return float(np.linalg.norm(sd)), sd


def _zero_reward(x, u):
    return np.zeros(np.shape(x)[:-1])


def run_experiment(cfg: RunConfig, env: Environment | None = None) -> ExperimentLog:
    """Run one seed of the configured regime; deterministic given ``cfg.seed``.

    ``env`` overrides the environment built from ``cfg.env`` (used for
    synthetic systems).
    """
    env = env or make_env(cfg.env)
    planner_cfg = cfg.planner
    if cfg.regime is Regime.PURE_EXPLORATION:
        planner_cfg = replace(planner_cfg, mode=ObjectiveMode.OPTIMISTIC)
    if cfg.regime is Regime.DISCOUNTED:
        planner_cfg = replace(planner_cfg, discount=cfg.gamma)
    streams = _Streams(cfg.seed)
    reward_fn = _zero_reward if cfg.regime is Regime.PURE_EXPLORATION else None
    agent = MPCAgent(planner_cfg, env, streams.plan, reward_fn)
    builder = _ModelBuilder(cfg.model, env, streams.aux)
    log = ExperimentLog(cfg.regime, getattr(cfg.env.family, "value", str(cfg.env.family)),
                        planner_cfg.mode.value, cfg.seed,
                        noise_variance=tuple(float(v) for v in builder.noise_variance))
    try:
        if cfg.regime is Regime.NONEPISODIC:
            _run_nonepisodic(cfg, env, agent, builder, streams, log)
        else:
            _run_episodes(cfg, planner_cfg, env, agent, builder, streams, log)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        log.failed = f"{type(exc).__name__}: {exc}"
        logger.error("run aborted after %d episodes: %s", len(log.episodes), exc)
        raise RunAborted(log) from exc
    return log


class RunAborted(RuntimeError):
    """Model fitting failed; ``log`` holds everything recorded before the failure."""

    def __init__(self, log: ExperimentLog):
        super().__init__(log.failed)
        self.log = log


def _episode_length(cfg: RunConfig, env: Environment, n: int) -> int:
    if cfg.regime is Regime.DISCOUNTED:
        return horizon_schedule(n + 1, cfg.gamma)
    return env.horizon


def _run_episodes(cfg, planner_cfg, env, agent, builder, streams, log) -> None:
    model: CalibratedModel | None = None
    gamma_total = 0.0
    schedule = planner_cfg.lambda_schedule
    tuner = LambdaTuner(schedule) if schedule.mode is LambdaMode.AUTOTUNE else None
    snapshots: list[tuple[CalibratedModel | None, float]] = []
    for n in range(cfg.episodes):
        t0 = time.perf_counter()
        if cfg.regime is Regime.PURE_EXPLORATION:
            lam = 1.0
        elif tuner is not None:
            lam = tuner.value
        else:
            lam = lambda_value(schedule, n, model.beta if model is not None else 0.0)
        x = env.reset(streams.reset_seed())
        log.resets += 1
        agent.reset()
        length = _episode_length(cfg, env, n)
        states, actions, nexts = [], [], []
        ret = intrinsic = 0.0
        for _ in range(length):
            u = agent.act(model, x, n, lam)
            x_next, r = env.step(x, u, streams.env)
            intrinsic += _sigma_norm(model, env, x, u)[0] if n else 0.0
            states.append(x)
            actions.append(env.clip_action(u))
            nexts.append(x_next)
            ret += r
            x = x_next
        new = builder.dataset(states, actions, nexts)
        if model is not None:
            gamma_total += float(information_gain_increment(model.posterior, new.inputs).sum())
        elif len(new):
            empty = CalibratedModel.create(builder.empty(), builder._initial_kernels(new), cfg.model.beta)
            gamma_total += float(information_gain_increment(empty.posterior, new.inputs).sum())
        snapshots.append((model, lam))
        model = builder.update(model, new)
        log.model_updates += 1
        if tuner is not None and n >= cfg.autotune_lag:
            _autotune(cfg, env, agent, model, tuner, snapshots[n - cfg.autotune_lag + 1], states, streams.aux, n)
        rec = EpisodeRecord(n, ret, intrinsic, length, lam, gamma_total, model.beta, time.perf_counter() - t0)
        if cfg.regime is Regime.DISCOUNTED and cfg.evaluate_discounted:
            rec.discounted_return = _discounted_eval(cfg, env, planner_cfg, model, lam, streams)
        if cfg.eval_points is not None:
            _, sd = model.predict(cfg.eval_points)
            rec.max_sigma = float(np.linalg.norm(sd, axis=1).max())
        log.episodes.append(rec)
        logger.info("episode %d: return %.3f, lambda %.3g, Gamma %.3f", n, ret, lam, gamma_total)


def _autotune(cfg, env, agent, model, tuner, snapshot, states, rng, n) -> None:
    """Compare uncertainty collected by the current and a lagged planner on replayed states."""
    old_model, old_lam = snapshot
    idx = rng.choice(len(states), size=min(cfg.autotune_batch, len(states)), replace=False)
    probe = MPCAgent(agent.config, env, rng, agent.reward_fn)
    cur, tgt = [], []
    for i in np.sort(idx):
        x = states[i]
        probe.reset()
        u_cur = probe.act(model, x, n, tuner.value)
        probe.reset()
        u_old = probe.act(old_model, x, 1 if old_model is not None else 0, old_lam)
        cur.append(_sigma_norm(model, env, x, u_cur)[0])
        tgt.append(_sigma_norm(model, env, x, u_old)[0])
    tuner.update(cur, tgt)


def _discounted_eval(cfg, env, planner_cfg, model, lam, streams) -> float:
    """Discounted return of the current policy, truncated once ``gamma^t * R_max < 1e-4``."""
    rng = np.random.default_rng(streams.aux.integers(2 ** 63))
    agent = MPCAgent(planner_cfg, env, rng)
    x = env.reset(int(rng.integers(2 ** 31)))
    total, disc = 0.0, 1.0
    for _ in range(discounted_eval_length(cfg.gamma, env.r_max)):
        u = agent.act(model, x, 1, lam)
        x, r = env.step(x, u, rng)
        total += disc * r
        disc *= cfg.gamma
    return total


def _run_nonepisodic(cfg, env, agent, builder, streams, log) -> None:
    trace = StepTrace()
    log.steps = trace
    model: CalibratedModel | None = None
    schedule = agent.config.lambda_schedule
    x = env.reset(streams.reset_seed())
    log.resets += 1
    pending_s, pending_a, pending_n = [], [], []
    window = []
    gamma_total = 0.0
    ret = intrinsic = 0.0
    lam = 0.0
    t0 = time.perf_counter()
    seg_start = 0
    for step in range(cfg.total_steps):
        n = log.model_updates
        u = agent.act(model, x, n, lam)
        x_next, r = env.step(x, u, streams.env)
        u = env.clip_action(u)
        if model is not None:
            norm, sd = _sigma_norm(model, env, x, u)
        else:
            norm, sd = 0.0, np.sqrt(np.full(env.state_dim, np.inf))
        var = sd ** 2
        trace.states.append(x)
        trace.next_states.append(x_next)
        trace.rewards.append(r)
        trace.sigma_norms.append(norm)
        trace.variances.append(var)
        contrib = information_sum(var, builder.noise_variance) if model is not None else math.inf
        trace.info_contributions.append(contrib)
        pending_s.append(x)
        pending_a.append(u)
        pending_n.append(x_next)
        window.append(var)
        ret += r
        intrinsic += norm
        x = x_next
        if model is None:
            reason = "warmup" if len(pending_s) >= cfg.warmup_steps else None
        else:
            reason = trigger_reason(window, builder.noise_variance, cfg.trigger_threshold, len(window),
                                    cfg.hard_cap, cfg.min_horizon)
        if reason is None:
            continue
        trace.trigger_steps.append(step)
        trace.trigger_reasons.append(reason)
        trace.trigger_values.append(information_sum(window, builder.noise_variance) if model is not None
                                    else math.inf)
        new = builder.dataset(pending_s, pending_a, pending_n)
        if model is not None:
            gamma_total += float(information_gain_increment(model.posterior, new.inputs).sum())
        model = builder.update(model, new)
        log.model_updates += 1
        lam = lambda_value(schedule, log.model_updates, model.beta)
        log.episodes.append(EpisodeRecord(len(log.episodes), ret, intrinsic, step + 1 - seg_start, lam,
                                          gamma_total, model.beta, time.perf_counter() - t0))
        pending_s, pending_a, pending_n, window = [], [], [], []
        ret = intrinsic = 0.0
        seg_start = step + 1
        t0 = time.perf_counter()


def estimate_oracle(env: EnvSpec | Environment, planner_cfg: PlannerConfig, seeds: Sequence[int],
                    reward_fn=None) -> float:
    """Median episodic return of iCEM planning on the true, noise-free dynamics.

    This is the reference ``J(pi*)`` for regret reports; it is an estimate, not
    the true optimum.
    """
    return float(np.median(oracle_returns(env, planner_cfg, seeds, reward_fn)))


def oracle_returns(env: EnvSpec | Environment, planner_cfg: PlannerConfig, seeds: Sequence[int],
                   reward_fn=None) -> np.ndarray:
    env = make_env(env) if isinstance(env, EnvSpec) else env
    cfg = replace(planner_cfg, mode=ObjectiveMode.MEAN)
    out = []
    for seed in seeds:
        streams = _Streams(seed)
        agent = MPCAgent(cfg, env, streams.plan, reward_fn)
        x = env.reset(streams.reset_seed())
        total = 0.0
        for _ in range(env.horizon):
            u = agent.act(None, x, 1)
            x, r = env.step(x, u, streams.env)
            total += r
        out.append(total)
    return np.array(out)


def random_policy_returns(env: EnvSpec | Environment, seeds: Sequence[int]) -> np.ndarray:
    env = make_env(env) if isinstance(env, EnvSpec) else env
    out = []
    for seed in seeds:
        streams = _Streams(seed)
        x = env.reset(streams.reset_seed())
        total = 0.0
        for _ in range(env.horizon):
            x, r = env.step(x, streams.plan.uniform(env.action_low, env.action_high), streams.env)
            total += r
        out.append(total)
    return np.array(out)


def default_planner(family: EnvFamily | str, **overrides) -> PlannerConfig:
    """Planner defaults per environment (horizon 30 for Pendulum, 50 for MountainCar)."""
    family = EnvFamily(family)
    horizon = 30 if family is EnvFamily.PENDULUM else 50
    icem = ICemConfig(horizon=horizon)
    return PlannerConfig(icem=icem, **overrides)
