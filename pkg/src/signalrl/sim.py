"""Discrete-time microscopic simulation of one signalized four-way intersection.

Each approach is a single through lane. Vehicles enter at position 0 and leave
once they pass the stop line at ``lane_length`` on green. Car-following uses a
Krauss-style safe speed; a red or amber signal acts as a stopped leader at the
stop line. Every spawned vehicle is independently flagged as detected with the
scenario's detection rate, and only detected vehicles are visible through
:func:`measure_state`.

All randomness flows through ``WorldState.rng`` so a world is reproducible from
its seed and the command sequence applied to it.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

NUM_APPROACHES = 4
APPROACH_NAMES = ("N", "E", "S", "W")


class ConfigurationError(ValueError):
    """Raised when simulation inputs are inconsistent with the world's parameters."""


class Phase(IntEnum):
    NS_GREEN = 0
    NS_AMBER = 1
    EW_GREEN = 2
    EW_AMBER = 3


class Command(IntEnum):
    KEEP = 0
    SWITCH = 1


# Approaches served by each phase; amber phases keep the assignment of the
# green they follow.
_SERVED = {
    Phase.NS_GREEN: (True, False, True, False),
    Phase.NS_AMBER: (True, False, True, False),
    Phase.EW_GREEN: (False, True, False, True),
    Phase.EW_AMBER: (False, True, False, True),
}
_NEXT = {
    Phase.NS_GREEN: Phase.NS_AMBER,
    Phase.NS_AMBER: Phase.EW_GREEN,
    Phase.EW_GREEN: Phase.EW_AMBER,
    Phase.EW_AMBER: Phase.NS_GREEN,
}


@dataclass(frozen=True)
class RoadParams:
    approach_count: int = NUM_APPROACHES
    lane_length: float = 125.0
    v_max: float = 13.89
    accel: float = 2.6
    decel: float = 4.5
    tau: float = 1.0
    vehicle_length: float = 5.0
    min_gap: float = 2.5
    sim_dt: float = 0.5
    amber_duration: float = 3.0
    wait_speed_threshold: float = 0.1

    def __post_init__(self) -> None:
        if self.approach_count != NUM_APPROACHES:
            raise ConfigurationError("only four-approach intersections are supported")
        for name in ("lane_length", "v_max", "accel", "decel", "tau", "vehicle_length",
                     "min_gap", "sim_dt", "amber_duration", "wait_speed_threshold"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigurationError(f"{name} must be finite and > 0, got {value!r}")
        if self.sim_dt > self.tau:
            raise ConfigurationError("sim_dt must not exceed the reaction time tau")

    @property
    def headway_length(self) -> float:
        """Minimum distance between the positions of two consecutive vehicles."""
        return self.vehicle_length + self.min_gap

    @property
    def free_flow_time(self) -> float:
        """Lane traversal time at the speed limit."""
        return self.lane_length / self.v_max


@dataclass(slots=True)
class Vehicle:
    id: int
    approach: int
    position: float
    speed: float
    detected: bool
    spawn_time: float
    accumulated_wait: float = 0.0
    accumulated_penalty: float = 0.0
    desired_speed: float = math.inf
    depart_time: float | None = None

    @property
    def trip_time(self) -> float | None:
        if self.depart_time is None:
            return None
        return self.depart_time - self.spawn_time


@dataclass
class SignalPhase:
    phase_id: Phase = Phase.NS_GREEN
    elapsed: float = 0.0

    @property
    def is_amber(self) -> bool:
        return self.phase_id in (Phase.NS_AMBER, Phase.EW_AMBER)

    def served(self) -> tuple[bool, ...]:
        """Per-approach flag: True where this phase (or the green before an amber) serves the approach."""
        return _SERVED[self.phase_id]

    def has_green(self, approach: int) -> bool:
        return not self.is_amber and _SERVED[self.phase_id][approach]


@dataclass(frozen=True)
class ArrivalSpec:
    """Poisson demand per approach plus the Bernoulli detection probability.

    ``rates`` are vehicles/second per approach. When ``hourly_profile`` is given
    (24 entries), the rate for hour ``h`` of the day is ``rates[a] * hourly_profile[h]``.
    """

    rates: tuple[float, ...]
    detection_rate: float = 1.0
    hourly_profile: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if len(self.rates) != NUM_APPROACHES:
            raise ConfigurationError(f"expected {NUM_APPROACHES} approach rates, got {len(self.rates)}")
        if any(not math.isfinite(r) or r < 0 for r in self.rates):
            raise ConfigurationError(f"arrival rates must be finite and >= 0: {self.rates}")
        if not 0.0 <= self.detection_rate <= 1.0:
            raise ConfigurationError(f"detection_rate must lie in [0, 1], got {self.detection_rate}")
        if self.hourly_profile is not None:
            if len(self.hourly_profile) != 24:
                raise ConfigurationError("hourly_profile needs exactly 24 entries")
            if any(not math.isfinite(r) or r < 0 for r in self.hourly_profile):
                raise ConfigurationError("hourly_profile entries must be finite and >= 0")

    def rates_at(self, clock: float) -> np.ndarray:
        rates = np.asarray(self.rates, dtype=float)
        if self.hourly_profile is not None:
            hour = int(clock // 3600.0) % 24
            rates = rates * self.hourly_profile[hour]
        return rates


@dataclass(frozen=True)
class Perturbations:
    """Simulation variants used to probe robustness of a trained controller.

    bulk_mean: mean extra vehicles per Poisson arrival event (geometric batch
        size), turning single arrivals into platoons. The event rate is scaled
        down so the offered volume is unchanged.
    speed_sigma: std. dev. (m/s) of a half-normal deficit subtracted from the
        speed limit to give each vehicle its own desired speed, floored at half
        the limit.
    midlane_spawn: vehicles appear at a uniform position in the first half of
        the lane instead of at the lane entry when there is room.
    """

    bulk_mean: float = 0.0
    speed_sigma: float = 0.0
    midlane_spawn: bool = False

    def __post_init__(self) -> None:
        if self.bulk_mean < 0 or self.speed_sigma < 0:
            raise ConfigurationError("perturbation magnitudes must be >= 0")

    @property
    def active(self) -> bool:
        return self.bulk_mean > 0 or self.speed_sigma > 0 or self.midlane_spawn


NO_PERTURBATIONS = Perturbations()


@dataclass
class StepStats:
    reward: float
    detected_present: int
    undetected_present: int
    backlog: int
    departed: list[Vehicle] = field(default_factory=list)


@dataclass(frozen=True)
class RawDetection:
    """What a partial-detection sensor reports: only detected vehicles contribute."""

    counts: tuple[int, ...]
    distances: tuple[float, ...]
    phase_id: Phase
    elapsed: float
    amber: bool
    clock: float


@dataclass
class WorldState:
    params: RoadParams
    arrivals: ArrivalSpec
    rng: np.random.Generator
    clock: float = 0.0
    phase: SignalPhase = field(default_factory=SignalPhase)
    lanes: list[list[Vehicle]] = field(default_factory=lambda: [[] for _ in range(NUM_APPROACHES)])
    backlog: list[deque] = field(default_factory=lambda: [deque() for _ in range(NUM_APPROACHES)])
    perturbations: Perturbations = NO_PERTURBATIONS
    next_id: int = 0
    generated: int = 0
    spawned: int = 0
    departed: int = 0

    @property
    def present(self) -> int:
        return sum(len(lane) for lane in self.lanes)

    def vehicles(self):
        for lane in self.lanes:
            yield from lane

    def snapshot(self) -> tuple:
        """Hashable, exact image of the dynamic state (for determinism checks)."""
        lanes = tuple(
            tuple((v.id, v.position, v.speed, v.detected, v.spawn_time, v.accumulated_wait)
                  for v in lane)
            for lane in self.lanes
        )
        backlog = tuple(tuple(v.id for v in q) for q in self.backlog)
        return (self.clock, int(self.phase.phase_id), self.phase.elapsed, lanes, backlog,
                self.generated, self.spawned, self.departed)

    def copy(self) -> WorldState:
        return copy.deepcopy(self)


def new_world(params: RoadParams, arrivals: ArrivalSpec, seed: int | np.random.SeedSequence,
              start_clock: float = 0.0, perturbations: Perturbations = NO_PERTURBATIONS) -> WorldState:
    return WorldState(params=params, arrivals=arrivals, rng=np.random.default_rng(seed),
                      clock=start_clock, perturbations=perturbations)


def compute_target_speed(v: float, gap: float, leader_speed: float, params: RoadParams,
                         v_desired: float | None = None) -> float:
    """Next-step speed under Krauss-style car following.

    ``gap`` is the free space (m) to the leader's rear bumper minus ``min_gap``,
    or to the stop line when the signal is the leader. Besides the safe speed,
    the result is capped at ``gap / sim_dt`` so one step never closes more than
    the available gap.
    """
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    v_lim = params.v_max if v_desired is None else min(v_desired, params.v_max)
    bt = params.decel * params.tau
    v_safe = -bt + math.sqrt(bt * bt + leader_speed * leader_speed + 2.0 * params.decel * gap)
    target = min(v + params.accel * params.sim_dt, v_lim, v_safe, gap / params.sim_dt)
    return target if target > 0.0 else 0.0


def generate_arrivals(spec: ArrivalSpec, clock: float, dt: float, rng: np.random.Generator,
                      params: RoadParams | None = None, next_id: int = 0,
                      perturbations: Perturbations = NO_PERTURBATIONS) -> list[Vehicle]:
    """Sample this step's new vehicles for every approach.

    Counts are Poisson(rate * dt) per approach; detectability is Bernoulli(p).
    New vehicles carry ``spawn_time = clock + dt``, position 0 and the speed
    limit as their speed; insertion into the lane happens in :func:`step_simulation`.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    params = params or RoadParams()
    rates = np.maximum(spec.rates_at(clock), 0.0)
    if not rates.any():
        return []
    if perturbations.bulk_mean > 0:
        # geometric platoon sizes with mean 1 + bulk_mean; event rate keeps volume fixed
        size_mean = 1.0 + perturbations.bulk_mean
        events = rng.poisson(rates * dt / size_mean)
        counts = [int(sum(rng.geometric(1.0 / size_mean, size=int(e)))) if e else 0 for e in events]
    else:
        counts = rng.poisson(rates * dt).tolist()
    total = int(sum(counts))
    if total == 0:
        return []
    detected = rng.random(total) < spec.detection_rate
    if perturbations.speed_sigma > 0:
        deficits = np.abs(rng.normal(0.0, perturbations.speed_sigma, size=total))
        desired = np.maximum(params.v_max - deficits, 0.5 * params.v_max)
    else:
        desired = np.full(total, math.inf)
    out: list[Vehicle] = []
    k = 0
    spawn_time = clock + dt
    for approach, n in enumerate(counts):
        for _ in range(n):
            out.append(Vehicle(id=next_id + k, approach=approach, position=0.0,
                               speed=min(params.v_max, float(desired[k])),
                               detected=bool(detected[k]), spawn_time=spawn_time,
                               desired_speed=float(desired[k])))
            k += 1
    return out


def step_reward(world: WorldState) -> float:
    """Mean over present vehicles of -(v_max - v) / v_max; 0 on an empty road."""
    v_max = world.params.v_max
    total = 0.0
    n = 0
    for lane in world.lanes:
        for veh in lane:
            total += v_max - veh.speed
            n += 1
    if n == 0:
        return 0.0
    return -total / (v_max * n)


def measure_state(world: WorldState) -> RawDetection:
    length = world.params.lane_length
    counts = []
    distances = []
    for lane in world.lanes:
        count = 0
        nearest = None
        for veh in lane:  # front of queue first
            if veh.detected:
                count += 1
                if nearest is None:
                    nearest = length - veh.position
        counts.append(count)
        distances.append(length if nearest is None else nearest)
    return RawDetection(counts=tuple(counts), distances=tuple(distances),
                        phase_id=world.phase.phase_id, elapsed=world.phase.elapsed,
                        amber=world.phase.is_amber, clock=world.clock)


def _try_insert(world: WorldState, veh: Vehicle, now: float) -> bool:
    params = world.params
    lane = world.lanes[veh.approach]
    headway = params.headway_length
    green = world.phase.has_green(veh.approach)

    position = 0.0
    index = len(lane)
    if world.perturbations.midlane_spawn:
        candidate = float(world.rng.uniform(0.0, 0.5 * params.lane_length))
        idx = 0
        while idx < len(lane) and lane[idx].position > candidate:
            idx += 1
        front_ok = idx == 0 or lane[idx - 1].position - candidate >= headway
        rear_ok = idx == len(lane) or candidate - lane[idx].position >= headway
        if front_ok and rear_ok:
            position, index = candidate, idx

    if index > 0:
        leader = lane[index - 1]
        gap = leader.position - headway - position
        leader_speed = leader.speed
    elif green:
        gap, leader_speed = math.inf, params.v_max
    else:
        gap, leader_speed = params.lane_length - position, 0.0
    if gap < 0:
        return False
    if index == len(lane) and position == 0.0 and gap == math.inf:
        speed = min(params.v_max, veh.desired_speed)
    else:
        speed = compute_target_speed(params.v_max, gap, leader_speed, params, veh.desired_speed)
    veh.position = position
    veh.speed = speed
    veh.accumulated_wait += now - veh.spawn_time
    lane.insert(index, veh)
    return True


def step_simulation(world: WorldState, command: Command | int = Command.KEEP,
                    dt: float | None = None) -> tuple[WorldState, StepStats]:
    """Advance ``world`` in place by one step and return it with the step's statistics.

    SWITCH on a green phase starts the following amber; amber cannot be
    interrupted and hands over to the opposing green after ``amber_duration``.
    """
    params = world.params
    if dt is None:
        dt = params.sim_dt
    if dt != params.sim_dt:
        raise ConfigurationError(f"step dt {dt} does not match configured sim_dt {params.sim_dt}")

    phase = world.phase
    if command == Command.SWITCH and not phase.is_amber:
        phase.phase_id = _NEXT[phase.phase_id]
        phase.elapsed = 0.0

    now = world.clock + dt
    length = params.lane_length
    headway = params.headway_length
    v_max = params.v_max
    threshold = params.wait_speed_threshold
    # constants of compute_target_speed, hoisted out of the per-vehicle loop
    bt = params.decel * params.tau
    bt_sq = bt * bt
    two_b = 2.0 * params.decel
    accel_step = params.accel * dt
    sqrt = math.sqrt
    departed: list[Vehicle] = []

    for approach, lane in enumerate(world.lanes):
        if not lane:
            continue
        green = phase.has_green(approach)
        keep: list[Vehicle] = []
        leader: Vehicle | None = None
        for veh in lane:
            if leader is not None:
                gap = leader.position - headway - veh.position
                leader_speed = leader.speed
            elif green:
                gap, leader_speed = math.inf, v_max
            else:
                gap, leader_speed = length - veh.position, 0.0
            if gap < 0.0:
                gap = 0.0  # float round-off only; spacing is maintained below
            # same arithmetic as compute_target_speed, inlined for speed
            v_lim = veh.desired_speed if veh.desired_speed < v_max else v_max
            speed = veh.speed + accel_step
            if v_lim < speed:
                speed = v_lim
            v_safe = -bt + sqrt(bt_sq + leader_speed * leader_speed + two_b * gap)
            if v_safe < speed:
                speed = v_safe
            cap = gap / dt
            if cap < speed:
                speed = cap
            if speed < 0.0:
                speed = 0.0
            veh.speed = speed
            veh.position += speed * dt
            veh.accumulated_penalty += dt * (v_max - speed) / v_max
            if speed < threshold:
                veh.accumulated_wait += dt
            if green and leader is None and veh.position >= length:
                veh.position = length
                veh.depart_time = now
                departed.append(veh)
                continue
            keep.append(veh)
            leader = veh
        world.lanes[approach] = keep
    world.departed += len(departed)

    new = generate_arrivals(world.arrivals, world.clock, dt, world.rng, params,
                            world.next_id, world.perturbations)
    world.next_id += len(new)
    world.generated += len(new)
    for veh in new:
        world.backlog[veh.approach].append(veh)
    for queue in world.backlog:
        while queue and _try_insert(world, queue[0], now):
            queue.popleft()
            world.spawned += 1

    world.clock = now
    phase.elapsed += dt
    if phase.is_amber and phase.elapsed >= params.amber_duration - 1e-9:
        phase.phase_id = _NEXT[phase.phase_id]
        phase.elapsed = 0.0

    detected = undetected = 0
    for lane in world.lanes:
        for veh in lane:
            if veh.detected:
                detected += 1
            else:
                undetected += 1
    stats = StepStats(reward=step_reward(world), detected_present=detected,
                      undetected_present=undetected,
                      backlog=sum(len(q) for q in world.backlog), departed=departed)
    return world, stats


def served_mask(phase_id: Phase) -> Sequence[bool]:
    return _SERVED[Phase(phase_id)]
