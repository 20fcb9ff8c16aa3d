"""Closed-loop episode runner shared by the learned agent and the baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from .metrics import MetricsRecord, collect_metrics
from .scenarios import ScenarioConfig
from .sim import (NO_PERTURBATIONS, Command, ConfigurationError, Perturbations, Vehicle,
                  WorldState, new_world, step_simulation)


class Controller(Protocol):
    name: str
    # seconds between decisions; None decides on every simulation step
    decision_interval: float | None

    def decide(self, world: WorldState) -> Command: ...


def steps_per_decision(decision_interval: float | None, sim_dt: float) -> int:
    if decision_interval is None:
        return 1
    ratio = decision_interval / sim_dt
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9:
        raise ConfigurationError(
            f"decision interval {decision_interval}s is not a whole number of {sim_dt}s steps")
    return n


@dataclass
class EpisodeTrace:
    world: WorldState
    departed: list[Vehicle] = field(default_factory=list)
    green_durations: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)


def simulate(scenario: ScenarioConfig, controller: Controller, seed: int,
             perturbations: Perturbations = NO_PERTURBATIONS,
             record_rewards: bool = False) -> EpisodeTrace:
    params = scenario.road
    world = new_world(params, scenario.arrival_spec(), seed, start_clock=scenario.start_time,
                      perturbations=perturbations)
    n_steps = int(round(scenario.episode_seconds / params.sim_dt))
    every = steps_per_decision(controller.decision_interval, params.sim_dt)
    trace = EpisodeTrace(world)
    for k in range(n_steps):
        command = controller.decide(world) if k % every == 0 else Command.KEEP
        was_green = not world.phase.is_amber
        elapsed = world.phase.elapsed
        _, stats = step_simulation(world, command)
        if was_green and command == Command.SWITCH:
            trace.green_durations.append(elapsed)
        trace.departed.extend(stats.departed)
        if record_rewards:
            trace.rewards.append(stats.reward)
    return trace


def run_episode(scenario: ScenarioConfig, controller: Controller, seed: int,
                perturbations: Perturbations = NO_PERTURBATIONS) -> MetricsRecord:
    """Simulate one episode and summarise departures spawned after the warm-up."""
    trace = simulate(scenario, controller, seed, perturbations)
    start = scenario.start_time + scenario.warmup_seconds
    end = scenario.start_time + scenario.episode_seconds
    return collect_metrics(trace.departed, (start, end), t_min=scenario.road.free_flow_time,
                           seed=seed, scenario=scenario.name, controller=controller.name,
                           detection_rate=scenario.detection_rate, flow_scale=scenario.flow_scale)
