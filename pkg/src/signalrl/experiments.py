"""Experiment harness: controllers, sweeps over detection rate / flow / perturbations, CSV export.

Seeding: cell ``i`` replication ``j`` of a sweep is evaluated with seed
``base_seed + i * 10_000 + j``. Every agent trained inside a sweep uses seed
``base_seed + 5_000``, so the same (scenario, hyperparameters) pair always
yields the same network, and trained networks can be cached on disk.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence


from .agent import AgentController, Hyperparams, train_agent
from .baselines import LongestQueueController, PretimedController
from .episode import Controller, run_episode, simulate
from .metrics import MetricsRecord, collect_metrics
from .nn import QNetwork, read_checkpoint, write_checkpoint
from .scenarios import ScenarioConfig
from .sim import NO_PERTURBATIONS, Perturbations

log = logging.getLogger(__name__)

CELL_STRIDE = 10_000
TRAIN_SEED_OFFSET = 5_000

RUN_COLUMNS = ("scenario", "controller", "detection_rate", "flow_scale", "seed", "wait_all",
               "wait_detected", "wait_undetected", "trip_mean", "departures")
SUMMARY_COLUMNS = ("scenario", "controller", "detection_rate", "flow_scale", "reps",
                   "wait_all_mean", "wait_all_ci95", "wait_detected_mean", "wait_detected_ci95",
                   "wait_undetected_mean", "wait_undetected_ci95", "trip_mean_mean",
                   "trip_mean_ci95", "departures_mean")

DEFAULT_PERTURBATIONS = {
    "bulk": Perturbations(bulk_mean=2.0),
    "speed-noise": Perturbations(speed_sigma=1.5),
    "midlane": Perturbations(midlane_spawn=True),
    "combined": Perturbations(bulk_mean=2.0, speed_sigma=1.5, midlane_spawn=True),
}


def eval_seed(base_seed: int, cell: int, rep: int) -> int:
    return base_seed + cell * CELL_STRIDE + rep


def train_seed(base_seed: int) -> int:
    return base_seed + TRAIN_SEED_OFFSET


def mean_ci95(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Sample mean and 1.96 * sd / sqrt(n) (sd with n-1 dof); the half-width needs n >= 2."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = math.fsum(vals) / len(vals)
    if len(vals) < 2:
        return mean, None
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, 1.96 * math.sqrt(var) / math.sqrt(len(vals))


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    controller: str
    detection_rate: float | None
    flow_scale: float
    reps: int
    wait_all: tuple[float | None, float | None]
    wait_detected: tuple[float | None, float | None]
    wait_undetected: tuple[float | None, float | None]
    trip_mean: tuple[float | None, float | None]
    departures_mean: float


@dataclass
class SweepResult:
    """Replicated episode records for a grid of cells, plus per-cell aggregates."""

    axis: str
    records: list[MetricsRecord] = field(default_factory=list)

    def extend(self, records: Iterable[MetricsRecord]) -> None:
        self.records.extend(records)

    @staticmethod
    def _key(rec: MetricsRecord):
        return (rec.scenario, rec.controller, rec.detection_rate if rec.detection_rate is not None
                else -1.0, rec.flow_scale)

    def sorted_records(self) -> list[MetricsRecord]:
        return sorted(self.records, key=lambda r: (*self._key(r), r.seed if r.seed is not None else -1))

    def summary(self) -> list[SummaryRow]:
        groups: dict[tuple, list[MetricsRecord]] = defaultdict(list)
        for rec in self.records:
            groups[self._key(rec)].append(rec)
        rows = []
        for key in sorted(groups):
            recs = groups[key]
            first = recs[0]
            rows.append(SummaryRow(
                scenario=first.scenario, controller=first.controller,
                detection_rate=first.detection_rate, flow_scale=first.flow_scale, reps=len(recs),
                wait_all=mean_ci95([r.wait_all for r in recs]),
                wait_detected=mean_ci95([r.wait_detected for r in recs]),
                wait_undetected=mean_ci95([r.wait_undetected for r in recs]),
                trip_mean=mean_ci95([r.trip_mean for r in recs]),
                departures_mean=math.fsum(r.n_all for r in recs) / len(recs)))
        return rows

    def cell(self, controller: str | None = None, **match) -> list[MetricsRecord]:
        out = []
        for rec in self.records:
            if controller is not None and rec.controller != controller:
                continue
            if all(_close(getattr(rec, k), v) for k, v in match.items()):
                out.append(rec)
        return out

    def mean(self, metric: str = "wait_all", controller: str | None = None, **match) -> float | None:
        return mean_ci95([getattr(r, metric) for r in self.cell(controller, **match)])[0]


def _close(a, b) -> bool:
    if isinstance(a, float) and isinstance(b, (int, float)):
        return abs(a - b) < 1e-12
    return a == b


# --- controllers and agents -----------------------------------------------------------------

def make_controller(kind: str | QNetwork, hp: Hyperparams, lane_length: float) -> Controller:
    if isinstance(kind, QNetwork):
        return AgentController(kind, hp, lane_length)
    if kind == "pretimed":
        return PretimedController()
    if kind in ("longest-queue", "longest_queue"):
        return LongestQueueController(hp=hp)
    raise ValueError(f"unknown controller {kind!r}")


def _code_fingerprint() -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def _cache_key(scenario: ScenarioConfig, hp: Hyperparams, seed: int) -> str:
    text = f"{scenario!r}|{hp!r}|{seed}|{_code_fingerprint()}"
    return hashlib.sha256(text.encode()).hexdigest()[:24]


def train_or_load(scenario: ScenarioConfig, hp: Hyperparams, seed: int,
                  cache_dir: str | Path | None = None) -> QNetwork:
    """Train an agent, reusing a cached checkpoint when an identical training was done before."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"agent-{_cache_key(scenario, hp, seed)}.ckpt"
        if path.is_file():
            return read_checkpoint(path, expected_dims=hp.mlp_spec().layer_dims)
    log.info("training agent: scenario=%s p=%s flow_scale=%s seed=%d", scenario.name,
             scenario.detection_rate, scenario.flow_scale, seed)
    net, _ = train_agent(scenario, hp, seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        write_checkpoint(net, tmp)
        tmp.replace(path)
    return net


AgentSource = Callable[[ScenarioConfig], QNetwork]


def training_source(hp: Hyperparams, base_seed: int = 0,
                    cache_dir: str | Path | None = None) -> AgentSource:
    """Agent source that trains (or loads from cache) one agent per scenario variant."""
    def source(scenario: ScenarioConfig) -> QNetwork:
        return train_or_load(scenario, hp, train_seed(base_seed), cache_dir)
    return source


def mapping_source(agents: Mapping[float, QNetwork | str | Path], hp: Hyperparams) -> AgentSource:
    """Agent source backed by per-detection-rate networks or checkpoint paths."""
    def source(scenario: ScenarioConfig) -> QNetwork:
        for p, agent in agents.items():
            if abs(p - scenario.detection_rate) < 1e-12:
                if isinstance(agent, QNetwork):
                    return agent
                return read_checkpoint(agent, expected_dims=hp.mlp_spec().layer_dims)
        raise KeyError(f"no agent provided for detection rate {scenario.detection_rate}")
    return source


# --- experiments ----------------------------------------------------------------------------

def evaluate(scenario: ScenarioConfig, controller: Controller, reps: int, base_seed: int,
             cell: int = 0, perturbations: Perturbations = NO_PERTURBATIONS,
             label: str | None = None) -> list[MetricsRecord]:
    if reps < 1:
        raise ValueError("reps must be >= 1")
    out = []
    for j in range(reps):
        rec = run_episode(scenario, controller, eval_seed(base_seed, cell, j), perturbations)
        out.append(rec if label is None else rec.labelled(controller=label))
    return out


def sweep_detection_rate(scenario: ScenarioConfig, rates: Sequence[float], reps: int,
                         agent_source: AgentSource, hp: Hyperparams, base_seed: int = 0,
                         include_pretimed: bool = True) -> SweepResult:
    """Per detection rate: obtain an agent for that rate and evaluate it over ``reps`` seeds."""
    if any(not 0.0 <= p <= 1.0 for p in rates):
        raise ValueError("detection rates must lie in [0, 1]")
    result = SweepResult(axis="detection_rate")
    for i, p in enumerate(rates):
        cell_scenario = scenario.with_detection_rate(p)
        net = agent_source(cell_scenario)
        controller = make_controller(net, hp, scenario.road.lane_length)
        result.extend(evaluate(cell_scenario, controller, reps, base_seed, i))
        if include_pretimed:
            result.extend(evaluate(cell_scenario, PretimedController(), reps, base_seed, i))
    return result


def sensitivity_sweep(scenario: ScenarioConfig, axis: str, train_value: float,
                      eval_values: Sequence[float], reps: int, agent_source: AgentSource,
                      hp: Hyperparams, base_seed: int = 0) -> SweepResult:
    """Evaluate an agent trained at ``train_value`` across ``eval_values`` next to per-value optimal agents.

    ``axis`` is ``"flow"`` (values are flow scales of ``scenario``) or
    ``"detection_rate"``. Both controllers in a cell share evaluation seeds.
    """
    if axis == "flow":
        vary = ScenarioConfig.with_flow_scale
    elif axis == "detection_rate":
        vary = ScenarioConfig.with_detection_rate
    else:
        raise ValueError(f"axis must be 'flow' or 'detection_rate', got {axis!r}")
    fixed = agent_source(vary(scenario, train_value))
    fixed_label = f"fixed@{train_value:g}"
    result = SweepResult(axis=axis)
    for i, value in enumerate(eval_values):
        cell_scenario = vary(scenario, value)
        optimal = agent_source(cell_scenario)
        lane = scenario.road.lane_length
        result.extend(evaluate(cell_scenario, make_controller(fixed, hp, lane), reps, base_seed, i,
                               label=fixed_label))
        result.extend(evaluate(cell_scenario, make_controller(optimal, hp, lane), reps, base_seed,
                               i, label="optimal"))
    return result


def whole_day_eval(scenario: ScenarioConfig, rates: Sequence[float], reps: int,
                   agent_source: AgentSource, hp: Hyperparams, base_seed: int = 0,
                   include_pretimed: bool = True) -> SweepResult:
    """Evaluate agents over full days; records are binned by the hour their vehicles spawned.

    Each record's ``hour`` field holds the bin; the warm-up at the start of the
    day is excluded.
    """
    if scenario.hourly_profile is None:
        raise ValueError("whole-day evaluation needs a scenario with an hourly profile")
    if scenario.episode_seconds < 86400.0 or scenario.start_time != 0.0:
        raise ValueError("whole-day evaluation needs a 24 h episode starting at midnight")
    result = SweepResult(axis="hour")
    lane = scenario.road.lane_length
    entries: list[tuple[int, float, Controller]] = []
    for i, p in enumerate(rates):
        cell_scenario = scenario.with_detection_rate(p)
        entries.append((i, p, make_controller(agent_source(cell_scenario), hp, lane)))
        if include_pretimed:
            entries.append((i, p, PretimedController()))
    for i, p, controller in entries:
        cell_scenario = scenario.with_detection_rate(p)
        for j in range(reps):
            seed = eval_seed(base_seed, i, j)
            trace = simulate(cell_scenario, controller, seed)
            for hour in range(24):
                start = max(hour * 3600.0, scenario.warmup_seconds)
                rec = collect_metrics(trace.departed, (start, (hour + 1) * 3600.0),
                                      t_min=scenario.road.free_flow_time, seed=seed,
                                      scenario=scenario.name, controller=controller.name,
                                      detection_rate=p, flow_scale=scenario.flow_scale)
                result.records.append(rec.labelled(hour=hour))
    return result


def robustness_eval(scenario: ScenarioConfig, rates: Sequence[float], reps: int,
                    agent_source: AgentSource, hp: Hyperparams,
                    perturbations: Mapping[str, Perturbations] | None = None,
                    base_seed: int = 0) -> SweepResult:
    """Evaluate unmodified agents on perturbed simulations.

    Rows for the unperturbed baseline carry the plain scenario name; perturbed
    rows are named ``"<scenario>+<perturbation>"``.
    """
    perturbations = DEFAULT_PERTURBATIONS if perturbations is None else perturbations
    result = SweepResult(axis="perturbation")
    lane = scenario.road.lane_length
    for i, p in enumerate(rates):
        cell_scenario = scenario.with_detection_rate(p)
        controller = make_controller(agent_source(cell_scenario), hp, lane)
        result.extend(evaluate(cell_scenario, controller, reps, base_seed, i))
        for name, pert in perturbations.items():
            recs = evaluate(cell_scenario, controller, reps, base_seed, i, perturbations=pert)
            result.extend(r.labelled(scenario=f"{scenario.name}+{name}") for r in recs)
    return result


def robustness_deltas(result: SweepResult, base_name: str) -> dict[tuple[str, float], float | None]:
    """Mean all-vehicle wait change of each perturbation relative to the unperturbed run, per rate."""
    out = {}
    for row in result.summary():
        if row.scenario == base_name:
            continue
        base = result.mean("wait_all", scenario=base_name, detection_rate=row.detection_rate)
        value = row.wait_all[0]
        name = row.scenario.split("+", 1)[-1]
        out[(name, row.detection_rate)] = None if base is None or value is None else value - base
    return out


# --- export ---------------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_results(result: SweepResult, directory: str | Path, prefix: str = "results") -> tuple[Path, Path]:
    """Write ``<prefix>_runs.csv`` (one row per replication) and ``<prefix>_summary.csv``.

    Floats are written with ``repr`` so parsing recovers them exactly. Time-binned
    results get a trailing ``hour`` column.
    """
    directory = Path(directory)
    runs_path = directory / f"{prefix}_runs.csv"
    summary_path = directory / f"{prefix}_summary.csv"
    binned = any(r.hour is not None for r in result.records)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(runs_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RUN_COLUMNS + (("hour",) if binned else ()))
            records = result.sorted_records()
            if binned:
                records = sorted(records, key=lambda r: (*SweepResult._key(r), r.hour, r.seed))
            for rec in records:
                row = [rec.scenario, rec.controller, rec.detection_rate, rec.flow_scale, rec.seed,
                       rec.wait_all, rec.wait_detected, rec.wait_undetected, rec.trip_mean,
                       rec.n_all]
                if binned:
                    row.append(rec.hour)
                writer.writerow([_fmt(v) for v in row])
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SUMMARY_COLUMNS + (("hour",) if binned else ()))
            for row, hour in _summary_rows(result, binned):
                values = [row.scenario, row.controller, row.detection_rate, row.flow_scale,
                          row.reps, *row.wait_all, *row.wait_detected, *row.wait_undetected,
                          *row.trip_mean, row.departures_mean]
                if binned:
                    values.append(hour)
                writer.writerow([_fmt(v) for v in values])
    except OSError as exc:
        raise OSError(f"cannot write results under {directory}: {exc}") from exc
    return runs_path, summary_path


def _summary_rows(result: SweepResult, binned: bool):
    if not binned:
        return [(row, None) for row in result.summary()]
    rows = []
    for hour in sorted({r.hour for r in result.records}):
        sub = SweepResult(result.axis, [r for r in result.records if r.hour == hour])
        rows.extend((row, hour) for row in sub.summary())
    return sorted(rows, key=lambda item: (item[0].scenario, item[0].controller,
                                          item[0].detection_rate, item[0].flow_scale, item[1]))


def read_runs_csv(path: str | Path) -> list[dict]:
    """Parse a runs CSV back into typed dicts (numbers as float/int, blanks as None)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for key, value in row.items():
                if value == "":
                    parsed[key] = None
                elif key in ("scenario", "controller"):
                    parsed[key] = value
                elif key in ("seed", "departures", "hour"):
                    parsed[key] = int(value)
                else:
                    parsed[key] = float(value)
            out.append(parsed)
    return out


__all__ = [
    "DEFAULT_PERTURBATIONS", "SweepResult", "SummaryRow", "evaluate", "eval_seed", "export_results",
    "make_controller", "mapping_source", "mean_ci95", "read_runs_csv", "robustness_deltas",
    "robustness_eval", "sensitivity_sweep", "sweep_detection_rate", "train_or_load",
    "train_seed", "training_source", "whole_day_eval",
]
