"""Hyperband-style random search with successive halving, plus reports.

Configurations are sampled independently from a declarative search space;
brackets trade off how many configurations start against how much budget
each gets, and every rung keeps the best 1/eta fraction. Trials resume from
their own checkpoints, so a promotion only pays for the additional epochs.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError

Objective = Callable[[dict, int, int], float]  # (config, total_epochs, trial_id) -> metric


@dataclass
class ParamSpec:
    name: str
    kind: str  # continuous | integer | categorical
    lo: Optional[float] = None
    hi: Optional[float] = None
    scale: str = "linear"  # linear | log (continuous only)
    values: Optional[list] = None

    def __post_init__(self):
        if self.kind not in ("continuous", "integer", "categorical"):
            raise ConfigError(f"param {self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.values:
                raise ConfigError(f"param {self.name}: categorical needs non-empty values")
            return
        if self.lo is None or self.hi is None or not self.lo < self.hi:
            raise ConfigError(f"param {self.name}: need lo < hi, got lo={self.lo}, hi={self.hi}")
        if self.scale not in ("linear", "log"):
            raise ConfigError(f"param {self.name}: scale must be linear or log")
        if self.scale == "log" and self.lo <= 0:
            raise ConfigError(f"param {self.name}: log scale needs lo > 0")


@dataclass
class SearchSpace:
    params: list[ParamSpec]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate parameter names in search space: {names}")

    def names(self) -> list[str]:
        return [p.name for p in self.params]


@dataclass
class Trial:
    trial_id: int
    config: dict
    resource: int = 0
    metric: float = -math.inf
    status: str = "pending"  # pending | running | stopped | complete | failed
    history: list = field(default_factory=list)  # (epochs, metric) pairs
    bracket: int = -1


@dataclass
class Bracket:
    s: int
    rungs: list[tuple[int, int]]  # (n_configs, epochs_per_config)


def sample_config(space: SearchSpace, rng: np.random.Generator) -> dict:
    """One independent draw per parameter; log-scale params are uniform in log."""
    out = {}
    for p in space.params:
        if p.kind == "categorical":
            out[p.name] = p.values[int(rng.integers(0, len(p.values)))]
        elif p.kind == "integer":
            out[p.name] = int(rng.integers(int(p.lo), int(p.hi) + 1))
        elif p.scale == "log":
            out[p.name] = float(np.exp(rng.uniform(np.log(p.lo), np.log(p.hi))))
        else:
            out[p.name] = float(rng.uniform(p.lo, p.hi))
    return out


def max_bracket_index(R: int, eta: int) -> int:
    """Largest s with eta**s <= R, computed in exact integer arithmetic."""
    s = 0
    while eta ** (s + 1) <= R:
        s += 1
    return s


def hyperband_brackets(R: int, eta: int) -> list[Bracket]:
    """The bracket/rung table for a max budget R and halving rate eta."""
    if R < 1:
        raise ConfigError(f"R must be >= 1, got {R}")
    if eta < 2:
        raise ConfigError(f"eta must be >= 2, got {eta}")
    s_max = max_bracket_index(R, eta)
    brackets = []
    for s in range(s_max, -1, -1):
        n = -((-(s_max + 1) * eta ** s) // (s + 1))  # exact integer ceil
        rungs = []
        for k in range(s + 1):
            n_k = n // eta ** k
            r_k = max(1, (R * eta ** k) // eta ** s)
            rungs.append((int(n_k), int(r_k)))
        brackets.append(Bracket(s=s, rungs=rungs))
    return brackets


def hyperband(space: SearchSpace, R: int, eta: int, objective: Objective,
              seed: int = 0, jobs: int = 1) -> tuple[Trial, list[Trial]]:
    """Run every bracket; returns (best trial, all trials).

    ``objective(config, total_epochs, trial_id)`` reports the metric after
    the trial has consumed ``total_epochs`` in total; it is expected to
    resume from its own checkpoints when called again with a larger budget.
    A raising objective marks the trial failed (metric -inf, never promoted).
    """
    rng = np.random.default_rng([seed, 0x5EED])
    trials: list[Trial] = []
    for bracket in hyperband_brackets(R, eta):
        n0 = bracket.rungs[0][0]
        active = []
        for _ in range(n0):
            trial = Trial(trial_id=len(trials), config=sample_config(space, rng),
                          bracket=bracket.s)
            trials.append(trial)
            active.append(trial)
        for rung_idx, (n_k, r_k) in enumerate(bracket.rungs):
            active = active[:n_k]
            rung_scores: dict[int, float] = {}

            def run_one(trial: Trial) -> None:
                trial.status = "running"
                try:
                    value = float(objective(trial.config, r_k, trial.trial_id))
                except Exception:
                    trial.status = "failed"
                    rung_scores[trial.trial_id] = -math.inf
                    return
                trial.resource = r_k
                trial.metric = max(trial.metric, value)
                trial.history.append((r_k, value))
                trial.status = "complete"
                rung_scores[trial.trial_id] = value

            runnable = [t for t in active if t.status != "failed"]
            if jobs > 1 and len(runnable) > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    list(pool.map(run_one, runnable))
            else:
                for trial in runnable:
                    run_one(trial)
            for trial in active:
                rung_scores.setdefault(trial.trial_id, -math.inf)
            # best metric first; ties go to the earlier trial
            active.sort(key=lambda t: (-rung_scores[t.trial_id], t.trial_id))
            if rung_idx < len(bracket.rungs) - 1:
                keep = bracket.rungs[rung_idx + 1][0]
                for trial in active[keep:]:
                    if trial.status != "failed":
                        trial.status = "stopped"
                active = active[:keep]
            else:
                for trial in active:
                    if trial.status != "failed":
                        trial.status = "complete"
    finished = [t for t in trials if math.isfinite(t.metric)]
    if not finished:
        raise ConfigError("every trial failed; nothing to report")
    best = min(finished, key=lambda t: (-t.metric, t.trial_id))
    return best, trials


def total_epochs_bound(R: int, eta: int) -> int:
    """Loose cap on epochs a full hyperband run may consume."""
    s_max = int(math.floor(math.log(R) / math.log(eta)))
    return (s_max + 1) * (s_max + 1) * R


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float((xc * xc).sum()))
    sy = math.sqrt(float((yc * yc).sum()))
    if sx < 1e-12 or sy < 1e-12:
        return 0.0, True
    return float((xc * yc).sum() / (sx * sy)), False


def correlation_report(trials: Sequence[Trial], space: SearchSpace) -> list[dict]:
    """Per-parameter Pearson correlation with the final metric, ranked by |r|.

    Log-scale parameters correlate in the log domain; categorical values
    correlate one-hot, one row per value. Zero-variance columns (or a
    constant metric) are flagged degenerate with r = 0.
    """
    done = [t for t in trials if math.isfinite(t.metric)]
    if len(done) < 3:
        raise ConfigError(f"correlation report needs >= 3 completed trials, got {len(done)}")
    metric = np.array([t.metric for t in done], dtype=np.float64)
    rows = []
    for p in space.params:
        if p.kind == "categorical":
            for v in p.values:
                x = np.array([1.0 if t.config[p.name] == v else 0.0 for t in done])
                r, degenerate = _pearson(x, metric)
                rows.append({"param": f"{p.name}={v}", "pearson_r": r, "degenerate": degenerate})
        else:
            x = np.array([t.config[p.name] for t in done], dtype=np.float64)
            if p.kind == "continuous" and p.scale == "log":
                x = np.log(x)
            r, degenerate = _pearson(x, metric)
            rows.append({"param": p.name, "pearson_r": r, "degenerate": degenerate})
    rows.sort(key=lambda row: -abs(row["pearson_r"]))
    for rank, row in enumerate(rows, start=1):
        row["importance_rank"] = rank
    return rows


def sweep_report(trials: Sequence[Trial], space: SearchSpace,
                 out_dir: Union[str, Path]) -> dict:
    """Write parallel-coordinates CSV and per-trial metric curves for plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = space.names()
    table = out / "parallel_coordinates.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial"] + names + ["resource", "metric"])
        for t in trials:
            writer.writerow([t.trial_id] + [t.config[n] for n in names] + [t.resource, t.metric])
    curves_dir = out / "curves"
    curves_dir.mkdir(exist_ok=True)
    curve_paths = []
    for t in trials:
        path = curves_dir / f"trial_{t.trial_id}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epochs", "metric"])
            for epochs, value in t.history:
                writer.writerow([epochs, value])
        curve_paths.append(path)
    return {"table": table, "curves": curve_paths}


def write_correlation_csv(rows: list[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "pearson_r", "importance_rank", "degenerate"])
        for row in rows:
            writer.writerow([row["param"], row["pearson_r"], row["importance_rank"],
                             int(row["degenerate"])])


# ---------------------------------------------------------------------------
# sweep spec files: flat key = value sections
# ---------------------------------------------------------------------------

SWEEP_DEFAULT_SPACE = SearchSpace([
    ParamSpec("lr", "continuous", lo=1e-3, hi=1e-1, scale="log"),
    ParamSpec("batch_size", "categorical", values=[32, 64, 128, 256]),
    ParamSpec("alpha", "continuous", lo=0.1, hi=1.0),
    ParamSpec("momentum", "continuous", lo=0.5, hi=0.99),
    ParamSpec("weight_decay", "continuous", lo=1e-5, hi=1e-3, scale="log"),
])


@dataclass
class SweepSpec:
    space: SearchSpace
    R: int = 9
    eta: int = 3
    seed: int = 0


def parse_sweep_spec(path: Union[str, Path]) -> SweepSpec:
    """Parse a sweep spec file; raises ConfigError naming the offending key."""
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"cannot read sweep spec: {path}")
    R, eta, seed = 9, 3, 0
    if parser.has_section("sweep"):
        sec = parser["sweep"]
        try:
            R = sec.getint("R", R)
            eta = sec.getint("eta", eta)
            seed = sec.getint("seed", seed)
        except ValueError as exc:
            raise ConfigError(f"sweep spec {path}: bad [sweep] value: {exc}") from exc
    params = []
    for section in parser.sections():
        if not section.startswith("param."):
            continue
        name = section[len("param."):]
        sec = parser[section]
        kind = sec.get("type", "").strip()
        try:
            if kind == "categorical":
                raw = sec.get("values", "")
                values = [_coerce_scalar(v.strip()) for v in raw.split(",") if v.strip()]
                spec = ParamSpec(name, "categorical", values=values)
            elif kind in ("continuous", "integer"):
                spec = ParamSpec(name, kind,
                                 lo=float(sec.get("lo")), hi=float(sec.get("hi")),
                                 scale=sec.get("scale", "linear").strip())
            else:
                raise ConfigError(f"param {name}: unknown type {kind!r}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep spec {path}: bad section [{section}]: {exc}") from exc
        params.append(spec)
    space = SearchSpace(params) if params else SWEEP_DEFAULT_SPACE
    if R < 1:
        raise ConfigError(f"sweep spec {path}: R must be >= 1, got {R}")
    if eta < 2:
        raise ConfigError(f"sweep spec {path}: eta must be >= 2, got {eta}")
    return SweepSpec(space=space, R=R, eta=eta, seed=seed)


def _coerce_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def trial_seed(sweep_seed: int, trial_id: int) -> int:
    """Stable per-trial seed derived from the sweep seed."""
    return int(np.random.SeedSequence([sweep_seed, trial_id]).generate_state(1)[0])


def write_trials_json(trials: Sequence[Trial], path: Union[str, Path]) -> None:
    payload = [
        {"trial_id": t.trial_id, "config": t.config, "resource": t.resource,
         "metric": None if not math.isfinite(t.metric) else t.metric,
         "status": t.status, "history": t.history}
        for t in trials
    ]
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
