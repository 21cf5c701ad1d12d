"""Command-line entry point: expand modes x environments x seeds and run them.

Exit codes: 0 success, 1 configuration error, 2 one or more failed cells.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    MODES,
    PRESETS,
    ConfigError,
    ConfigFileNotFound,
    ConfigParseError,
    ExperimentConfig,
    config_from_dict,
    parse_config,
    parse_modes,
    parse_seeds,
    tomllib,
)
from .metrics import ORACLE_LABEL, cumulative_regret, export_results, summarize_seeds
from .runner import ExperimentLog, RunAborted, oracle_returns, run_experiment

logger = logging.getLogger("sombrl")

OUT_ENV_VAR = "SOMBRL_OUT"
DEFAULT_OUT = "results"
FINAL_WINDOW = 5


def cell_seed(master_seed: int, env: str, mode: str) -> int:
    """Seed for one (env, mode, seed) cell; independent of which other cells exist."""
    tag = zlib.crc32(f"{env}/{mode}".encode())
    return int(np.random.SeedSequence([master_seed, tag]).generate_state(1)[0])


@dataclass(frozen=True)
class Cell:
    config: ExperimentConfig
    mode: str
    seed: int

    @property
    def env(self) -> str:
        return self.config.name


def expand(configs: Sequence[ExperimentConfig]) -> list[Cell]:
    return [Cell(cfg, mode, seed) for cfg in configs for mode in cfg.modes for seed in cfg.seeds]


def _run_cell(cell: Cell) -> ExperimentLog:
    cfg = cell.config
    run = replace(cfg.run, planner=cfg.planner_for(cell.mode), seed=cell_seed(cell.seed, cell.env, cell.mode))
    log = run_experiment(run)
    log.mode = cell.mode
    log.seed = cell.seed
    return log


def _oracle(cfg: ExperimentConfig) -> tuple[float, np.ndarray]:
    seeds = [cell_seed(s, cfg.name, "oracle") for s in cfg.seeds]
    returns = oracle_returns(cfg.env, cfg.oracle_planner(), seeds)
    return float(np.median(returns)), returns


def _workers(requested: int) -> int:
    return requested if requested > 0 else (os.cpu_count() or 1)


def run_matrix(configs: Sequence[ExperimentConfig], out_dir: Path, workers: int = 1,
               stream=None) -> int:
    """Run every cell, write one result directory per (env, mode), print a summary table."""
    stream = sys.stdout if stream is None else stream
    cells = expand(configs)
    logs: dict[tuple[str, str], list[ExperimentLog]] = {}
    failures: list[str] = []
    n_workers = min(_workers(workers), max(len(cells), 1))
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_run_cell, c) for c in cells]
            outcomes = []
            for c, f in zip(cells, futures):
                try:
                    outcomes.append((c, f.result(), None))
                except Exception as exc:  # a failed cell must not abort the others
                    outcomes.append((c, None, exc))
    else:
        outcomes = []
        for c in cells:
            try:
                outcomes.append((c, _run_cell(c), None))
            except Exception as exc:
                outcomes.append((c, None, exc))
    for c, log, exc in outcomes:
        if exc is not None:
            if isinstance(exc, RunAborted):
                exc.log.mode, exc.log.seed = c.mode, c.seed
            failures.append(f"{c.env}/{c.mode}/seed {c.seed}: {type(exc).__name__}: {exc}")
            logger.error("cell failed: %s", failures[-1])
            continue
        logs.setdefault((c.env, c.mode), []).append(log)

    rows = []
    for cfg in configs:
        oracle, oracle_rets = _oracle(cfg)
        env_dir = out_dir / cfg.name
        env_dir.mkdir(parents=True, exist_ok=True)
        _write_oracle(env_dir / "oracle.json", oracle, oracle_rets, cfg.seeds)
        for mode in cfg.modes:
            group = logs.get((cfg.name, mode), [])
            if not group:
                rows.append((cfg.name, mode, None, None, 0))
                continue
            summary = summarize_seeds(group)
            series = cumulative_regret(summary.median_return, oracle)
            cell_dir = env_dir / mode
            cell_dir.mkdir(parents=True, exist_ok=True)
            meta = {"env": cfg.name, "mode": mode, "regime": cfg.run.regime.value,
                    "episodes": cfg.run.episodes, "seeds": list(summary.seeds)}
            export_results(summary, series, cell_dir / "results.csv", "csv")
            export_results(summary, series, cell_dir / "results.json", "json", meta=meta, logs=group)
            final = float(np.median(summary.median_return[-FINAL_WINDOW:]))
            rows.append((cfg.name, mode, final, series.final, len(group)))
        rows.append((cfg.name, ORACLE_LABEL, oracle, None, len(cfg.seeds)))
    _print_table(rows, stream)
    if failures:
        print(f"{len(failures)} cell(s) failed:", file=stream)
        for f in failures:
            print(f"  {f}", file=stream)
        return 2
    return 0


def _write_oracle(path: Path, value: float, returns: np.ndarray, seeds) -> None:
    import json

    doc = {"label": ORACLE_LABEL, "value": value, "returns": [float(r) for r in returns],
           "seeds": list(seeds)}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _print_table(rows, stream) -> None:
    header = f"{'env':<12} {'mode':<16} {'final median return':>20} {'cum. regret':>12} {'seeds':>6}"
    print(header, file=stream)
    print("-" * len(header), file=stream)
    for env, mode, final, regret, n in rows:
        f = "failed" if final is None else f"{final:.2f}"
        r = "" if regret is None else f"{regret:.2f}"
        print(f"{env:<12} {mode:<16} {f:>20} {r:>12} {n:>6}", file=stream)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sombrl",
        description="Run optimistic model-based RL experiments over modes x environments x seeds.",
        epilog=f"Output directory precedence: --out, then output_dir in the config, then ${OUT_ENV_VAR}, "
               f"then ./{DEFAULT_OUT}. Exit codes: 0 ok, 1 config error, 2 failed cells.",
    )
    p.add_argument("--config", metavar="PATH", help="TOML experiment file (sections env, run, planner, "
                                                    "lambda, model, oracle)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment matrix; --config values "
                                                             "are applied on top of it")
    p.add_argument("--mode", metavar="NAME[,NAME...]",
                   help=f"planner modes to compare (config key modes); choices: {', '.join(MODES)}")
    p.add_argument("--seeds", metavar="N|S1,S2,...",
                   help="seed count (0..N-1) or comma-separated list (config key seeds)")
    p.add_argument("--out", metavar="DIR", help="output directory (config key output_dir)")
    p.add_argument("--episodes", type=int, metavar="N", help="episodes per run (config key run.episodes)")
    p.add_argument("--workers", type=int, metavar="N",
                   help="parallel worker processes, 0 = one per CPU core (config key workers)")
    p.add_argument("--plan", action="store_true", help="print the expanded matrix and exit without "
                                                       "running or writing anything")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def resolve(args: argparse.Namespace, environ=os.environ) -> tuple[list[ExperimentConfig], Path]:
    """Apply precedence: CLI flags over config file over preset/defaults."""
    if not args.config and not args.preset:
        raise ConfigError("nothing to run: pass --config and/or --preset")
    configs = PRESETS[args.preset]() if args.preset else []
    if args.config:
        if configs:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigFileNotFound(f"config file not found: {path}")
            try:
                doc = tomllib.loads(path.read_text(encoding="utf-8"))
            except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
                raise ConfigParseError(f"could not parse {path}: {exc}") from None
            configs = [config_from_dict(doc, base) for base in configs]
        else:
            configs = [parse_config(args.config)]
    overrides = {}
    try:
        if args.mode:
            overrides["modes"] = parse_modes(args.mode)
        if args.seeds:
            overrides["seeds"] = parse_seeds(args.seeds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.workers is not None:
        if args.workers < 0:
            raise ConfigError("--workers must be >= 0")
        overrides["workers"] = args.workers
    out = []
    for cfg in configs:
        cfg = replace(cfg, **overrides)
        if args.episodes is not None:
            if args.episodes < 1:
                raise ConfigError("--episodes must be >= 1")
            cfg = replace(cfg, run=replace(cfg.run, episodes=args.episodes))
        out.append(cfg)
    out_dir = args.out or next((c.output_dir for c in out if c.output_dir), None) \
        or environ.get(OUT_ENV_VAR) or DEFAULT_OUT
    return out, Path(out_dir)


def describe(configs: Sequence[ExperimentConfig], out_dir: Path, stream=None) -> None:
    stream = sys.stdout if stream is None else stream
    cells = expand(configs)
    print(f"{len(cells)} cell(s), output under {out_dir}", file=stream)
    for cfg in configs:
        icem = cfg.planner.icem
        print(f"{cfg.name}: regime={cfg.run.regime.value} episodes={cfg.run.episodes} "
              f"seeds={list(cfg.seeds)} planner=pop{icem.population}/elites{icem.elites}/"
              f"iters{icem.iterations}/H{icem.horizon}", file=stream)
        for mode in cfg.modes:
            print(f"  {mode:<14} -> {out_dir / cfg.name / mode}", file=stream)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configs, out_dir = resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.plan:
        describe(configs, out_dir)
        return 0
    workers = configs[0].workers if configs else 1
    return run_matrix(configs, out_dir, workers)


if __name__ == "__main__":
    sys.exit(main())
