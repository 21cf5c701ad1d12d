"""Experiment configuration: TOML files, validation, presets.

A config file has top-level keys ``seeds``, ``output_dir``, ``modes``,
``workers`` and the sections ``[env]``, ``[run]``, ``[planner]``, ``[lambda]``,
``[model]`` and ``[oracle]``. Every key is optional except ``env.family``;
unknown keys are rejected.
"""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .calibration import BetaMode, BetaSchedule
from .envs import EnvFamily, EnvSpec
from .gp import KernelFamily
from .planner import ICemConfig, LambdaMode, LambdaSchedule, ObjectiveMode, PlannerConfig
from .runner import ModelConfig, Regime, RunConfig

MODES = ("optimistic", "mean", "pets", "thompson", "hallucinated")


class ConfigError(Exception):
    """Base class for configuration problems (CLI exit code 1)."""


class ConfigFileNotFound(ConfigError):
    pass


class ConfigParseError(ConfigError):
    pass


class ConfigValidationError(ConfigError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None
    modes: tuple[str, ...] = ("optimistic",)
    oracle_horizon: int | None = None
    workers: int = 0
    pets_particles: int = 5

    @property
    def env(self) -> EnvSpec:
        return self.run.env

    @property
    def planner(self) -> PlannerConfig:
        return self.run.planner

    @property
    def model(self) -> ModelConfig:
        return self.run.model

    @property
    def name(self) -> str:
        return self.env.family.value

    def planner_for(self, mode: str) -> PlannerConfig:
        """Planner settings for a named comparison mode."""
        base = self.planner
        if mode == "optimistic":
            return replace(base, mode=ObjectiveMode.OPTIMISTIC)
        if mode == "mean":
            return replace(base, mode=ObjectiveMode.MEAN)
        if mode == "pets":
            return replace(base, mode=ObjectiveMode.POSTERIOR_SAMPLE, particles=self.pets_particles)
        if mode == "thompson":
            return replace(base, mode=ObjectiveMode.POSTERIOR_SAMPLE, particles=1)
        if mode == "hallucinated":
            return replace(base, mode=ObjectiveMode.HALLUCINATED)
        raise ConfigValidationError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")

    def oracle_planner(self) -> PlannerConfig:
        icem = self.planner.icem
        if self.oracle_horizon is not None:
            icem = replace(icem, horizon=self.oracle_horizon)
        return replace(self.planner, icem=icem, mode=ObjectiveMode.MEAN)


# ---------------------------------------------------------------------------
# key tables: name -> (converter/validator, description of the constraint)

def _num(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False, integer=False):
    left = "(" if lo_open else "["
    right = ")" if hi_open else "]"
    kind = "an integer" if integer else "a number"
    desc = f"{kind} in {left}{_show(lo)}, {_show(hi)}{right}"

    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeError
        if integer and not float(v).is_integer():
            raise TypeError
        if (v < lo or (lo_open and v == lo)) or (v > hi or (hi_open and v == hi)) or math.isnan(v):
            raise TypeError
        return int(v) if integer else float(v)

    return check, desc


def _show(v):
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    return f"{v:g}"


def _bool():
    def check(v):
        if not isinstance(v, bool):
            raise TypeError
        return v
    return check, "true or false"


def _choice(options):
    def check(v):
        if v not in options:
            raise TypeError
        return v
    return check, "one of " + ", ".join(options)


def _optional(inner):
    # TOML has no null: false or 0 disables
    check_inner, desc = inner

    def check(v):
        if v is False or (not isinstance(v, bool) and v == 0):
            return None
        return check_inner(v)
    return check, desc + " (0 or false disables)"


def _vector(inner, length=None):
    check_inner, desc = inner

    def check(v):
        vals = v if isinstance(v, list) else [v]
        if length is not None and isinstance(v, list) and len(v) != length:
            raise TypeError
        out = tuple(check_inner(x) for x in vals)
        return out if isinstance(v, list) else out[0]
    return check, desc + " or a list of them"


def _table():
    def check(v):
        if not isinstance(v, dict) or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                              for x in v.values()):
            raise TypeError
        return {k: float(x) for k, x in v.items()}
    return check, "a table of numeric reward constants"


def _pair(inner):
    check_inner, desc = inner

    def check(v):
        if not isinstance(v, list) or len(v) != 2:
            raise TypeError
        lo, hi = check_inner(v[0]), check_inner(v[1])
        if lo > hi:
            raise TypeError
        return (lo, hi)
    return check, f"a [low, high] pair of {desc}"


POS = _num(0, lo_open=True)
NONNEG = _num(0)
POS_INT = _num(1, integer=True)
NONNEG_INT = _num(0, integer=True)

SECTIONS: dict[str, dict[str, tuple[Callable, str]]] = {
    "env": {
        "family": _choice([f.value for f in EnvFamily]),
        "horizon": POS_INT,
        "noise_std": _vector(NONNEG),
        "dt": POS,
        "action_cost": NONNEG,
        "jitter": NONNEG,
        "reward_params": _table(),
    },
    "run": {
        "regime": _choice([r.value for r in Regime]),
        "episodes": POS_INT,
        "gamma": _num(0, 1, lo_open=True, hi_open=True),
        "evaluate_discounted": _bool(),
        "trigger_threshold": _num(0, lo_open=True),
        "min_horizon": POS_INT,
        "hard_cap": _optional(POS_INT),
        "total_steps": POS_INT,
        "warmup_steps": POS_INT,
        "autotune_lag": POS_INT,
        "autotune_batch": POS_INT,
    },
    "planner": {
        "mode": _choice([m.value for m in ObjectiveMode]),
        "population": POS_INT,
        "elites": POS_INT,
        "iterations": POS_INT,
        "horizon": POS_INT,
        "noise_color_exponent": NONNEG,
        "population_decay": _num(1),
        "elite_fraction_kept": _num(0, 1),
        "init_std": _vector(POS),
        "momentum": _num(0, 1, hi_open=True),
        "shift_init": _bool(),
        "add_mean_last": _bool(),
        "particles": POS_INT,
        "pets_particles": POS_INT,
    },
    "lambda": {
        "mode": _choice([m.value for m in LambdaMode]),
        "value": NONNEG,
        "c_max": POS,
        "horizon": POS_INT,
        "state_dim": POS_INT,
        "noise_std": POS,
        "lambda_init": NONNEG,
        "lambda_final": NONNEG,
        "n_final": POS_INT,
        "step_size": NONNEG,
        "lambda_min": NONNEG,
        "lambda_max": NONNEG,
    },
    "model": {
        "kernel": _choice([k.value for k in KernelFamily]),
        "lengthscale": POS,
        "signal_variance": _optional(POS),
        "noise_std": _optional(_vector(POS)),
        "fit_hyperparameters": _bool(),
        "fit_restarts": POS_INT,
        "fit_points": _optional(POS_INT),
        "fit_every": POS_INT,
        "lengthscale_bounds": _pair(POS),
        "max_points": _optional(POS_INT),
        "min_gain": NONNEG,
        "qp_bound": _optional(NONNEG),
        "beta_mode": _choice([b.value for b in BetaMode]),
        "beta": POS,
        "rkhs_bound": POS,
        "beta_noise_std": POS,
        "delta": _num(0, 1, lo_open=True),
    },
    "oracle": {
        "horizon": _optional(POS_INT),
    },
}

TOP_LEVEL: dict[str, tuple[Callable, str]] = {
    "seeds": (None, "a positive seed count or a list of non-negative integer seeds"),
    "output_dir": (None, "a path string"),
    "modes": (None, "a list of modes from " + ", ".join(MODES)),
    "workers": NONNEG_INT,
}


def parse_seeds(value) -> tuple[int, ...]:
    """``n`` -> ``(0, ..., n-1)``; a list (or comma-separated string) is taken literally."""
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty seed list")
        if "," not in value:
            value = int(parts[0])
        else:
            value = [int(p) for p in parts]
    if isinstance(value, bool):
        raise ValueError("seeds must be integers")
    if isinstance(value, int):
        if value < 1:
            raise ValueError("seed count must be positive")
        return tuple(range(value))
    if isinstance(value, list) and value and all(isinstance(v, int) and not isinstance(v, bool) and v >= 0
                                                  for v in value):
        return tuple(value)
    raise ValueError("seeds must be a positive count or a list of non-negative integers")


def parse_modes(value) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if not isinstance(value, list) or not value:
        raise ValueError("modes must be a nonempty list")
    for m in value:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}; expected one of {', '.join(MODES)}")
    return tuple(value)


def _check_section(name: str, table: Any) -> dict:
    if not isinstance(table, dict):
        raise ConfigValidationError(f"`{name}` must be a table")
    keys = SECTIONS[name]
    out = {}
    for key, value in table.items():
        if key not in keys:
            raise ConfigValidationError(f"unknown key `{name}.{key}`; allowed: {', '.join(sorted(keys))}")
        check, desc = keys[key]
        try:
            out[key] = check(value)
        except (TypeError, ValueError):
            raise ConfigValidationError(f"`{name}.{key}` must be {desc}, got {value!r}") from None
    return out


def config_from_dict(doc: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Validate a parsed document and merge it over ``base`` (or the defaults)."""
    for key in doc:
        if key not in TOP_LEVEL and key not in SECTIONS:
            raise ConfigValidationError(f"unknown key `{key}`")
    sec = {name: _check_section(name, doc.get(name, {})) for name in SECTIONS}
    if base is None:
        if "family" not in sec["env"]:
            raise ConfigValidationError("`env.family` is required")
        base = default_experiment(sec["env"]["family"])
    elif "family" in sec["env"] and sec["env"]["family"] != base.env.family.value:
        base = replace(base, run=replace(base.run, env=EnvSpec(sec["env"]["family"])))
    return _merge(base, sec, {k: doc[k] for k in TOP_LEVEL if k in doc})


def _merge(base: ExperimentConfig, sec: dict, top: dict) -> ExperimentConfig:
    run = base.run
    try:
        env_kw = _env_fields(run.env)
        env_kw.update(sec["env"])
        env = EnvSpec(**env_kw)

        icem_kw = {k: v for k, v in sec["planner"].items()
                   if k not in ("mode", "particles", "pets_particles")}
        icem = replace(run.planner.icem, **icem_kw)
        lam = replace(run.planner.lambda_schedule, **sec["lambda"])
        planner_kw = {k: sec["planner"][k] for k in ("mode", "particles") if k in sec["planner"]}
        planner = replace(run.planner, icem=icem, lambda_schedule=lam, **planner_kw)

        model_sec = dict(sec["model"])
        beta_kw = {}
        for src, dst in (("beta_mode", "mode"), ("beta", "value"), ("rkhs_bound", "rkhs_bound"),
                         ("beta_noise_std", "noise_std"), ("delta", "delta")):
            if src in model_sec:
                beta_kw[dst] = model_sec.pop(src)
        beta = replace(run.model.beta, **beta_kw)
        model = replace(run.model, beta=beta, **model_sec)

        run = replace(run, env=env, planner=planner, model=model, **sec["run"])
    except ValueError as exc:
        raise ConfigValidationError(f"inconsistent configuration: {exc}") from None

    kw = {}
    if "seeds" in top:
        try:
            kw["seeds"] = parse_seeds(top["seeds"])
        except ValueError as exc:
            raise ConfigValidationError(f"`seeds`: {exc}") from None
    if "modes" in top:
        try:
            kw["modes"] = parse_modes(top["modes"])
        except ValueError as exc:
            raise ConfigValidationError(f"`modes`: {exc}") from None
    if "output_dir" in top:
        if not isinstance(top["output_dir"], str):
            raise ConfigValidationError("`output_dir` must be a path string")
        kw["output_dir"] = top["output_dir"] or None
    if "workers" in top:
        check, desc = TOP_LEVEL["workers"]
        try:
            kw["workers"] = check(top["workers"])
        except TypeError:
            raise ConfigValidationError(f"`workers` must be {desc} (0 = one per CPU core)") from None
    if "pets_particles" in sec["planner"]:
        kw["pets_particles"] = sec["planner"]["pets_particles"]
    if "horizon" in sec["oracle"]:
        kw["oracle_horizon"] = sec["oracle"]["horizon"]
    return replace(base, run=run, **kw)


def _env_fields(env: EnvSpec) -> dict:
    return {"family": env.family.value, "horizon": env.horizon, "noise_std": env.noise_std, "dt": env.dt,
            "action_cost": env.action_cost, "jitter": env.jitter, "reward_params": dict(env.reward_params)}


def parse_config(path) -> ExperimentConfig:
    """Read, validate and default-fill a TOML experiment file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigFileNotFound(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigParseError(f"could not parse {path}: {exc}") from None
    return config_from_dict(doc)


def _plain(v):
    # TOML-serializable form; None becomes 0, which the optional keys read back as "disabled"
    if v is None:
        return 0
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, enum.Enum):
        return v.value
    return v


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of :func:`config_from_dict`: every key written explicitly."""
    run = cfg.run
    icem = run.planner.icem
    lam = run.planner.lambda_schedule
    model = run.model
    beta = model.beta
    doc = {
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir or "",
        "modes": list(cfg.modes),
        "workers": cfg.workers,
        "env": _env_fields(run.env),
        "run": {k: getattr(run, k) for k in SECTIONS["run"]},
        "planner": {**{k: getattr(icem, k) for k in SECTIONS["planner"]
                       if k not in ("mode", "particles", "pets_particles")},
                    "mode": run.planner.mode, "particles": run.planner.particles,
                    "pets_particles": cfg.pets_particles},
        "lambda": {k: getattr(lam, k) for k in SECTIONS["lambda"]},
        "model": {**{k: getattr(model, k) for k in SECTIONS["model"]
                     if k not in ("beta_mode", "beta", "rkhs_bound", "beta_noise_std", "delta")},
                  "beta_mode": beta.mode, "beta": beta.value, "rkhs_bound": beta.rkhs_bound,
                  "beta_noise_std": beta.noise_std, "delta": beta.delta},
        "oracle": {"horizon": cfg.oracle_horizon},
    }
    return _plain(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


# ---------------------------------------------------------------------------
# defaults and presets

def default_experiment(family: EnvFamily | str) -> ExperimentConfig:
    family = EnvFamily(family)
    horizon = 30 if family is EnvFamily.PENDULUM else 50
    planner = PlannerConfig(icem=ICemConfig(horizon=horizon), lambda_schedule=LambdaSchedule.constant(10.0))
    run = RunConfig(env=EnvSpec(family), planner=planner, model=ModelConfig(beta=BetaSchedule.fixed(2.0)))
    return ExperimentConfig(run=run)


PRESET_SEEDS = (0, 1, 2, 3, 4)
PRESET_MODES = ("optimistic", "mean", "pets", "hallucinated")


def paper_gp_preset() -> list[ExperimentConfig]:
    """Optimistic, mean, PETS-style and hallucinated planners on Pendulum and MountainCar, 5 seeds.

    Planner and data budgets are reduced from the library defaults so the whole
    matrix runs on a single CPU core; see the README for the numbers.
    """
    out = []
    # MountainCar carries a small action cost, on the scale of the classic continuous benchmark
    for family, episodes, horizon, oracle_h, cost in ((EnvFamily.PENDULUM, 20, 25, None, 0.0),
                                                      (EnvFamily.MOUNTAIN_CAR, 30, 50, 80, 1e-3)):
        icem = ICemConfig(population=32, elites=4, iterations=1, horizon=horizon)
        planner = PlannerConfig(icem=icem, lambda_schedule=LambdaSchedule.constant(10.0))
        model = ModelConfig(beta=BetaSchedule.fixed(2.0), max_points=400, min_gain=0.5,
                            fit_restarts=2, fit_points=100)
        run = RunConfig(env=EnvSpec(family, action_cost=cost), planner=planner, model=model, episodes=episodes)
        out.append(ExperimentConfig(run=run, seeds=PRESET_SEEDS, modes=PRESET_MODES,
                                    oracle_horizon=oracle_h, pets_particles=3))
    return out


PRESETS: dict[str, Callable[[], list[ExperimentConfig]]] = {"paper-gp": paper_gp_preset}
