"""Experiment engine: single trials, one-axis sweeps and their reports.

Seeding rule: trial ``(setting i, repetition r)`` of a sweep with master
seed ``m`` trains with ``AgentConfig.seed = trial_seed(m, i, r)``, i.e. the
first 64-bit word of ``SeedSequence(m, spawn_key=(i, r))``. Trials share no
random state, so they can run in any order or in parallel.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import agent as A
from . import detector as det
from . import environment as E
from .fingerprint import NORMAL, ingest_csv
from .profiles import (
    DetectionTable,
    builtin_detection_table,
    builtin_profiles,
    optimal_profile,
)

log = logging.getLogger(__name__)

BACKENDS = ("table", "synthetic", "replay")
TRIAL_COLUMNS = ("setting_index", "setting", "rep", "seed", "status", "accuracy",
                 "episodes_to_converge", "aqd", "error")
AGGREGATE_COLUMNS = ("setting_index", "setting", "trials", "failed", "accuracy",
                     "episodes_to_converge", "aqd", "wall_time_s")


class ConfigError(ValueError):
    pass


# --- metrics --------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    episodes_to_converge: Optional[int]
    aqd: float
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")


def evaluation_states(env, M: int, rng: np.random.Generator) -> np.ndarray:
    if M < 1:
        raise ValueError("M must be >= 1")
    return np.vstack([env.sample_normal(rng).values for _ in range(M)])


def evaluate_policy(net: A.QNetwork, env, M: int, optimal: int,
                    rng: np.random.Generator, states: Optional[np.ndarray] = None) -> float:
    """Fraction of ``M`` fresh states whose greedy action is profile ``optimal``."""
    X = evaluation_states(env, M, rng) if states is None else states
    target = env.action_index(optimal)
    return float(np.mean(A.greedy_actions(net, X) == target))


def aqd(net: A.QNetwork, env, M: int, optimal: int, rng: np.random.Generator,
        states: Optional[np.ndarray] = None) -> float:
    """Mean of Q(s, optimal) minus the best other Q-value, over sampled states."""
    X = evaluation_states(env, M, rng) if states is None else states
    Q = net.q_values_many(X)
    k = env.action_index(optimal)
    others = np.delete(Q, k, axis=1)
    return float(np.mean(Q[:, k] - others.max(axis=1)))


def episodes_to_converge(checkpoints: Sequence[tuple[int, int]], optimal_index: int) -> Optional[int]:
    """First checkpoint episode from which the greedy action stays optimal."""
    if not checkpoints:
        raise ValueError("no checkpoints recorded")
    first = None
    for episode, action in checkpoints:
        if action == optimal_index:
            if first is None:
                first = episode
        else:
            first = None
    return first


# --- configuration --------------------------------------------------------------


@dataclass
class SweepAxis:
    name: str
    values: list[Any]

    def __post_init__(self):
        if not self.values:
            raise ConfigError("sweep axis needs at least one value")


@dataclass
class ExperimentConfig:
    backend: str = "table"
    generator: Optional[E.GeneratorSpec] = None
    detection_table: DetectionTable = field(default_factory=builtin_detection_table)
    detector: det.DetectorConfig = field(default_factory=det.DetectorConfig)
    agent: A.AgentConfig = field(default_factory=lambda: A.BEST_AGENT)
    network: A.NetworkSpec = field(default_factory=lambda: A.BEST_NETWORK)
    axis: Optional[SweepAxis] = None
    repetitions: int = 1
    eval_size: int = 1000
    seed: int = 0
    out_dir: str = "runs"
    workers: int = 1
    checkpoint_every: int = 10
    calibration_tolerance: float = 0.01
    replay_csv: Optional[str] = None
    save_runs: bool = False

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.eval_size < 1:
            raise ConfigError("eval_size must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.backend == "replay" and not self.replay_csv:
            raise ConfigError("replay backend needs replay_csv")

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "generator": self.generator.to_dict() if self.generator else None,
            "detection_table": self.detection_table.to_dict(),
            "detector": vars(self.detector).copy(),
            "agent": self.agent.to_dict(),
            "network": self.network.to_dict(),
            "axis": {"name": self.axis.name, "values": self.axis.values} if self.axis else None,
            "repetitions": self.repetitions,
            "eval_size": self.eval_size,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "workers": self.workers,
            "checkpoint_every": self.checkpoint_every,
            "calibration_tolerance": self.calibration_tolerance,
            "replay_csv": self.replay_csv,
            "save_runs": self.save_runs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if d.get("generator") is not None:
            d["generator"] = E.GeneratorSpec.from_dict(d["generator"])
        if "detection_table" in d:
            d["detection_table"] = DetectionTable.from_dict(d["detection_table"])
        if "detector" in d:
            d["detector"] = det.DetectorConfig(**d["detector"])
        if "agent" in d:
            d["agent"] = A.AgentConfig.from_dict({**A.BEST_AGENT.to_dict(), **d["agent"]})
        if "network" in d:
            d["network"] = A.NetworkSpec.from_dict({**A.BEST_NETWORK.to_dict(), **d["network"]})
        if d.get("axis") is not None:
            d["axis"] = SweepAxis(d["axis"]["name"], list(d["axis"]["values"]))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_NETWORK_KEYS = {"hidden", "hidden_activation", "output_activation", "init", "activation"}


def apply_setting(agent: A.AgentConfig, network: A.NetworkSpec, name: str,
                  value: Any) -> tuple[A.AgentConfig, A.NetworkSpec]:
    """Override one axis value; dict values set several fields at once."""
    items = value.items() if isinstance(value, dict) else [(name, value)]
    for key, v in items:
        if key in A.AgentConfig.__dataclass_fields__:
            if key == "seed":
                raise ConfigError("seed cannot be a sweep axis")
            agent = A.AgentConfig.from_dict({**agent.to_dict(), key: v})
        elif key in _NETWORK_KEYS:
            if key == "activation":
                hk, ok = A.parse_activation_pair(v)
                network = replace(network, hidden_activation=hk, output_activation=ok)
            else:
                network = A.NetworkSpec.from_dict({**network.to_dict(), key: v})
        else:
            raise ConfigError(f"unknown sweep parameter {key!r}")
    return agent, network


def setting_label(name: str, value: Any) -> str:
    if isinstance(value, dict):
        return " ".join(f"{k}={v}" for k, v in value.items())
    return f"{name}={value}"


def trial_seed(master: int, setting_index: int, rep: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(setting_index, rep))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- environment construction ---------------------------------------------------


@dataclass
class BuiltEnvironment:
    env: Any
    optimal: int
    notes: dict = field(default_factory=dict)


def build_environment(config: ExperimentConfig) -> BuiltEnvironment:
    generator = config.generator or E.default_generator_spec()
    profiles = builtin_profiles()
    if config.backend == "table":
        env = E.TableEnv(generator, config.detection_table, profiles)
        best, _ = optimal_profile(profiles, config.detection_table)
        return BuiltEnvironment(env, best)
    if config.backend == "synthetic":
        result = E.calibrate(generator, config.detector, config.detection_table,
                             tolerance=config.calibration_tolerance, seed=config.seed)
        env = E.SyntheticEnv(result.spec, result.model, profiles)
        achieved = DetectionTable(config.detection_table.normal_tnr, result.achieved)
        best, _ = optimal_profile(profiles, achieved)
        return BuiltEnvironment(env, best, {"calibration": result.to_dict()})
    _, rows = ingest_csv(config.replay_csv, schema_mode="conforming")
    normal = [fp for fp in rows if fp.label == NORMAL]
    model = det.fit_config(np.vstack([fp.values for fp in normal]), config.detector)
    env = E.ReplayEnv(rows, model, profiles)
    best, _ = optimal_profile(profiles, config.detection_table)
    return BuiltEnvironment(env, best)


# --- trials ---------------------------------------------------------------------


@dataclass
class TrialResult:
    setting_index: int
    setting: str
    rep: int
    seed: int
    status: str
    metrics: Optional[Metrics]
    error: str = ""

    def row(self) -> dict:
        m = self.metrics
        return {
            "setting_index": self.setting_index,
            "setting": self.setting,
            "rep": self.rep,
            "seed": self.seed,
            "status": self.status,
            # Failed trials count as accuracy 0.
            "accuracy": repr(m.accuracy) if m else repr(0.0),
            "episodes_to_converge": "" if m is None or m.episodes_to_converge is None
            else m.episodes_to_converge,
            "aqd": repr(m.aqd) if m else "",
            "error": self.error,
        }


def run_trial(built: BuiltEnvironment, agent: A.AgentConfig, network: A.NetworkSpec,
              eval_size: int, checkpoint_every: int = 10,
              run_csv: Optional[Path] = None) -> Metrics:
    """Train once and compute all metrics; raises DivergenceError on divergence."""
    env = built.env
    t0 = time.perf_counter()
    net, record = A.train(env, agent, network, checkpoint_every=checkpoint_every)
    wall = time.perf_counter() - t0
    rng = A.trial_streams(agent.seed)["eval"]
    states = evaluation_states(env, eval_size, rng)
    acc = evaluate_policy(net, env, eval_size, built.optimal, rng, states)
    margin = aqd(net, env, eval_size, built.optimal, rng, states)
    etc = episodes_to_converge(record.checkpoints, env.action_index(built.optimal)) \
        if record.checkpoints else None
    if run_csv is not None:
        record.write_csv(run_csv)
    return Metrics(acc, etc, margin, wall)


def _trial_job(args) -> TrialResult:
    built, i, label, rep, agent, network, eval_size, every, run_csv = args
    try:
        m = run_trial(built, agent, network, eval_size, every, run_csv)
        return TrialResult(i, label, rep, agent.seed, "ok", m)
    except A.DivergenceError as exc:
        return TrialResult(i, label, rep, agent.seed, "diverged", None, str(exc))
    except E.ReplayExhausted as exc:
        return TrialResult(i, label, rep, agent.seed, "exhausted", None, str(exc))


def settings(config: ExperimentConfig) -> list[tuple[str, A.AgentConfig, A.NetworkSpec]]:
    if config.axis is None:
        return [("baseline", config.agent, config.network)]
    out = []
    for v in config.axis.values:
        agent, network = apply_setting(config.agent, config.network, config.axis.name, v)
        out.append((setting_label(config.axis.name, v), agent, network))
    return out


def run_sweep(config: ExperimentConfig, built: Optional[BuiltEnvironment] = None) -> list[TrialResult]:
    """Run every setting x repetition and write the report files to ``out_dir``.

    ``trials.csv`` and ``aggregate.csv`` hold only seed-determined numbers;
    wall-clock times go to ``timings.csv``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if built is None:
        built = build_environment(config)
    jobs = []
    for i, (label, agent, network) in enumerate(settings(config)):
        for rep in range(config.repetitions):
            seeded = replace(agent, seed=trial_seed(config.seed, i, rep))
            run_csv = out / f"run_{i}_{rep}.csv" if config.save_runs else None
            # Replay rows are consumed, so every trial gets its own copy.
            b = build_environment(config) if config.backend == "replay" and jobs else built
            jobs.append((b, i, label, rep, seeded, network, config.eval_size,
                         config.checkpoint_every, run_csv))

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_trial_job(job))
            r = results[-1]
            log.info("%s rep %d: %s %s", r.setting, r.rep, r.status,
                     f"acc={r.metrics.accuracy:.3f}" if r.metrics else r.error)

    write_trials(out / "trials.csv", results)
    write_aggregate(out / "aggregate.csv", aggregate(results))
    with open(out / "timings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["setting_index", "rep", "wall_time_s"])
        for r in results:
            w.writerow([r.setting_index, r.rep, f"{r.metrics.wall_time_s:.3f}" if r.metrics else ""])
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump({"config": config.to_dict(), "optimal_profile": built.optimal,
                   "environment": built.notes}, fh, indent=2, sort_keys=True)
    return results


def write_trials(path: Path, results: Sequence[TrialResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TRIAL_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def _mean(xs: list[float]) -> Optional[float]:
    return float(np.mean(xs)) if xs else None


def aggregate(results: Sequence[TrialResult]) -> list[dict]:
    """Per-setting means: accuracy over all trials, the other metrics over
    the trials where they exist."""
    rows = []
    for i in sorted({r.setting_index for r in results}):
        group = [r for r in results if r.setting_index == i]
        ok = [r.metrics for r in group if r.metrics is not None]
        acc = _mean([m.accuracy if m else 0.0 for m in (r.metrics for r in group)])
        etc = _mean([m.episodes_to_converge for m in ok if m.episodes_to_converge is not None])
        rows.append({
            "setting_index": i,
            "setting": group[0].setting,
            "trials": len(group),
            "failed": len(group) - len(ok),
            "accuracy": repr(acc),
            "episodes_to_converge": "" if etc is None else repr(etc),
            "aqd": "" if not ok else repr(_mean([m.aqd for m in ok])),
            "wall_time_s": _mean([m.wall_time_s for m in ok]),
        })
    return rows


def write_aggregate(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS[:-1], extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def format_report(out_dir: str | Path) -> str:
    """Plain-text table: setting, mean learning time, accuracy, episodes, AQD."""
    out = Path(out_dir)
    with open(out / "aggregate.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    times: dict[str, list[float]] = {}
    tpath = out / "timings.csv"
    if tpath.exists():
        with open(tpath, newline="", encoding="utf-8") as fh:
            for t in csv.DictReader(fh):
                if t["wall_time_s"]:
                    times.setdefault(t["setting_index"], []).append(float(t["wall_time_s"]))
    lines = [f"{'setting':<32} {'learn (s)':>10} {'accuracy':>9} {'episodes':>9} {'AQD':>9}"]
    for r in rows:
        t = times.get(r["setting_index"])
        learn = f"{np.mean(t):10.1f}" if t else f"{'-':>10}"
        acc = f"{100 * float(r['accuracy']):8.2f}%"
        eps = f"{float(r['episodes_to_converge']):9.0f}" if r["episodes_to_converge"] else f"{'-':>9}"
        q = f"{float(r['aqd']):9.2f}" if r["aqd"] else f"{'-':>9}"
        lines.append(f"{r['setting']:<32} {learn} {acc} {eps} {q}")
    return "\n".join(lines)
