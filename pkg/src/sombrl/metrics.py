"""Regret, seed aggregation and result files.

CSV is the primary artifact (one row per episode). JSON mirrors the same
columns and adds per-seed curves plus per-step traces of nonepisodic runs.
Both formats round-trip exactly through :func:`read_results`.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .runner import ExperimentLog

COLUMNS = ("episode", "median_return", "std_return", "cum_regret", "info_gain", "lambda")
ORACLE_LABEL = "oracle estimate"
SCHEMA_NAME = "results.schema.json"


class ExportFormat(str, enum.Enum):
    CSV = "csv"
    JSON = "json"


@dataclass(frozen=True)
class RegretSeries:
    oracle: float
    achieved: np.ndarray
    instantaneous: np.ndarray
    cumulative: np.ndarray

    @property
    def final(self) -> float:
        return float(self.cumulative[-1]) if len(self.cumulative) else 0.0


def cumulative_regret(log: ExperimentLog | Sequence[float], oracle: float) -> RegretSeries:
    """``r_n = oracle - return_n`` (kept even when negative) and its prefix sums."""
    achieved = log.returns if isinstance(log, ExperimentLog) else np.asarray(log, dtype=float)
    if achieved.size == 0:
        raise ValueError("need at least one episode")
    inst = oracle - achieved
    return RegretSeries(float(oracle), achieved.copy(), inst, np.cumsum(inst))


@dataclass(frozen=True)
class SeedSummary:
    median_return: np.ndarray
    std_return: np.ndarray
    info_gain: np.ndarray
    lam: np.ndarray
    n_seeds: int
    padded: bool
    seeds: tuple[int, ...] = ()
    per_seed_returns: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    per_seed_info_gain: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    per_seed_lambda: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def episodes(self) -> np.ndarray:
        return np.arange(len(self.median_return))


def _pad(rows: list[np.ndarray]) -> tuple[np.ndarray, bool]:
    length = max(len(r) for r in rows)
    padded = any(len(r) < length for r in rows)
    out = np.empty((len(rows), length))
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        out[i, len(r):] = r[-1] if len(r) else np.nan
    return out, padded


def summarize_seeds(logs: Sequence[ExperimentLog]) -> SeedSummary:
    """Per-episode median and (population) standard deviation across seeds.

    Shorter logs are padded with their last value and the summary is flagged.
    """
    if not logs:
        raise ValueError("need at least one log")
    returns, p1 = _pad([log.returns for log in logs])
    gains, p2 = _pad([log.info_gains for log in logs])
    lams, p3 = _pad([log.lambdas for log in logs])
    return SeedSummary(
        median_return=np.median(returns, axis=0),
        std_return=np.std(returns, axis=0),
        info_gain=np.median(gains, axis=0),
        lam=np.median(lams, axis=0),
        n_seeds=len(logs),
        padded=p1 or p2 or p3,
        seeds=tuple(int(log.seed) for log in logs),
        per_seed_returns=returns,
        per_seed_info_gain=gains,
        per_seed_lambda=lams,
    )


@dataclass
class ResultTable:
    """Contents of a result file: the episode columns plus metadata."""

    columns: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.columns["episode"])


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _table(summary: SeedSummary, series: RegretSeries | None) -> dict[str, np.ndarray]:
    n = len(summary.median_return)
    regret = series.cumulative if series is not None else np.full(n, np.nan)
    if len(regret) != n:
        raise ValueError("regret series and summary differ in length")
    return {
        "episode": summary.episodes.astype(float),
        "median_return": summary.median_return,
        "std_return": summary.std_return,
        "cum_regret": regret,
        "info_gain": summary.info_gain,
        "lambda": summary.lam,
    }


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _json_list(values) -> list:
    return [_json_float(v) for v in np.asarray(values, dtype=float).ravel()]


def export_results(summary: SeedSummary, series: RegretSeries | None, path, fmt: ExportFormat | str = "csv",
                   meta: dict | None = None, logs: Sequence[ExperimentLog] = ()) -> Path:
    """Write one result file. ``meta`` and ``logs`` only affect JSON output."""
    path = Path(path)
    fmt = ExportFormat(fmt)
    table = _table(summary, series)
    try:
        if fmt is ExportFormat.CSV:
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(COLUMNS)
            for i in range(len(summary.median_return)):
                writer.writerow([str(i)] + [_fmt(table[c][i]) for c in COLUMNS[1:]])
            path.write_text(buf.getvalue(), encoding="utf-8")
        else:
            doc = {
                "format": "sombrl-results",
                "version": 1,
                "columns": list(COLUMNS),
                "n_seeds": summary.n_seeds,
                "padded": summary.padded,
                "oracle_label": ORACLE_LABEL,
                "oracle_estimate": _json_float(series.oracle) if series is not None else None,
                "meta": dict(meta or {}),
                "episodes": [
                    {c: (i if c == "episode" else _json_float(table[c][i])) for c in COLUMNS}
                    for i in range(len(summary.median_return))
                ],
                "seeds": [_seed_record(log) for log in logs],
            }
            path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not write results to {path}: {exc}") from exc
    return path


def _seed_record(log: ExperimentLog) -> dict:
    rec = {
        "seed": int(log.seed),
        "returns": _json_list(log.returns),
        "info_gain": _json_list(log.info_gains),
        "lambda": _json_list(log.lambdas),
        "lengths": [int(v) for v in log.lengths],
        "model_updates": int(log.model_updates),
        "resets": int(log.resets),
    }
    disc = [e.discounted_return for e in log.episodes]
    if any(v is not None for v in disc):
        rec["discounted_return"] = [_json_float(v) if v is not None else None for v in disc]
    if log.steps is not None:
        s = log.steps
        rec["steps"] = {
            "rewards": _json_list(s.rewards),
            "sigma_norms": _json_list(s.sigma_norms),
            "info_contributions": _json_list(s.info_contributions),
            "trigger_steps": [int(v) for v in s.trigger_steps],
            "trigger_reasons": list(s.trigger_reasons),
        }
    return rec


def read_results(path) -> ResultTable:
    """Read a CSV or JSON result file written by :func:`export_results`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"could not read results from {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        doc = json.loads(text)
        cols = {c: np.array([np.nan if row[c] is None else float(row[c]) for row in doc["episodes"]])
                for c in COLUMNS}
        meta = {k: v for k, v in doc.items() if k != "episodes"}
        return ResultTable(cols, meta)
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path} does not start with the expected header {','.join(COLUMNS)}")
    body = rows[1:]
    cols = {c: np.array([float(r[i]) for r in body]) for i, c in enumerate(COLUMNS)}
    return ResultTable(cols)


def load_schema() -> dict:
    return json.loads(resources.files("sombrl").joinpath(SCHEMA_NAME).read_text(encoding="utf-8"))
