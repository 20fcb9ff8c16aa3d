"""Deep Q-learning signal controller.

The agent sees only detected vehicles (via :func:`signalrl.sim.measure_state`),
decides every ``decision_interval`` seconds whether to keep or switch the
current green, and is overruled by a minimum/maximum green guard. During
training, decisions come from the target network while the online network is
updated from replayed transitions; the two are synchronised periodically.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .episode import run_episode, steps_per_decision
from .metrics import MetricsRecord
from .nn import (AdamState, MlpSpec, QNetwork, adam_step, batch_backward, forward, init_network,
                 load_checkpoint)
from .scenarios import ScenarioConfig
from .sim import (NUM_APPROACHES, Command, Perturbations, NO_PERTURBATIONS, RawDetection,
                  SignalPhase, WorldState, measure_state, new_world, served_mask, step_simulation)

log = logging.getLogger(__name__)

Action = Command  # KEEP = 0, SWITCH = 1

# fixed input scaling applied before the network; part of the policy definition
COUNT_SCALE = 10.0
ELAPSED_SCALE = 60.0


class Representation:
    SIGN = "sign"
    INDICATOR = "indicator"


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.95
    lr: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.5
    batch_size: int = 32
    buffer_capacity: int = 50_000
    target_sync_interval: int = 500
    decision_interval: float = 1.0
    min_phase: float = 5.0
    max_phase: float = 60.0
    train_episodes: int = 100
    train_episode_seconds: float | None = 600.0
    hidden: tuple[int, ...] = (64, 64)
    representation: str = "sign"
    sync_at_start: bool = False
    # keep the snapshot with the lowest greedy validation penalty; 0 disables
    select_every: int = 5
    select_episodes: int = 3
    select_seconds: float = 1800.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ValueError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not 0 <= self.epsilon_decay_fraction <= 1:
            raise ValueError("epsilon_decay_fraction must lie in [0, 1]")
        if not 1 <= self.batch_size <= self.buffer_capacity:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if self.target_sync_interval < 1 or self.train_episodes < 1:
            raise ValueError("target_sync_interval and train_episodes must be >= 1")
        if not 0 <= self.min_phase < self.max_phase:
            raise ValueError("need 0 <= min_phase < max_phase")
        if self.decision_interval <= 0:
            raise ValueError("decision_interval must be > 0")
        if self.select_every < 0 or self.select_episodes < 1 or self.select_seconds <= 0:
            raise ValueError("need select_every >= 0, select_episodes >= 1, select_seconds > 0")
        if self.train_episode_seconds is not None and self.train_episode_seconds <= 0:
            raise ValueError("train_episode_seconds must be > 0")
        if self.representation not in (Representation.SIGN, Representation.INDICATOR):
            raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.representation)

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec((self.obs_dim, *self.hidden, len(Action)))

    def replace(self, **changes) -> Hyperparams:
        return dataclasses.replace(self, **changes)


def load_hyperparams(path: str | Path) -> Hyperparams:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError("hyperparameter file must be a mapping")
    known = {f.name for f in dataclasses.fields(Hyperparams)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
    return Hyperparams(**data)


def observation_dim(representation: str = Representation.SIGN) -> int:
    base = 2 * NUM_APPROACHES + 3
    return base + 1 if representation == Representation.INDICATOR else base


def encode_observation(raw: RawDetection, lane_length: float,
                       representation: str = Representation.SIGN) -> np.ndarray:
    """Observation vector: per approach (count, nearest distance), then phase elapsed, amber flag, time of day.

    With the sign representation an approach's pair is negated while it is
    red; amber keeps the signs of the green it ends. The indicator
    representation leaves the pairs unsigned and appends a 1/0 flag for
    north-south being served.
    """
    served = served_mask(raw.phase_id)
    out = np.empty(observation_dim(representation))
    sign_rep = representation == Representation.SIGN
    for a in range(NUM_APPROACHES):
        distance = min(raw.distances[a], lane_length)
        s = 1.0 if (served[a] or not sign_rep) else -1.0
        out[2 * a] = s * raw.counts[a]
        out[2 * a + 1] = s * distance
    k = 2 * NUM_APPROACHES
    out[k] = raw.elapsed
    out[k + 1] = 1.0 if raw.amber else 0.0
    out[k + 2] = (raw.clock % 86400.0) / 86400.0
    if not sign_rep:
        out[k + 3] = 1.0 if served[0] else 0.0
    return out


def feature_scale(lane_length: float, representation: str = Representation.SIGN) -> np.ndarray:
    """Multiplier mapping an observation vector to network inputs of order one."""
    scale = np.ones(observation_dim(representation))
    scale[0:2 * NUM_APPROACHES:2] = 1.0 / COUNT_SCALE
    scale[1:2 * NUM_APPROACHES:2] = 1.0 / lane_length
    scale[2 * NUM_APPROACHES] = 1.0 / ELAPSED_SCALE
    return scale


def select_action(obs: np.ndarray, net: QNetwork, epsilon: float,
                  rng: np.random.Generator | None = None) -> Action:
    """Epsilon-greedy over ``forward(net, obs)``; exact ties go to KEEP."""
    if epsilon > 0 and rng.random() < epsilon:
        return Action(int(rng.integers(len(Action))))
    q = forward(net, obs)
    return Action.SWITCH if q[Action.SWITCH] > q[Action.KEEP] else Action.KEEP


def apply_phase_guard(proposed: Action, phase: SignalPhase, hp: Hyperparams) -> Action:
    if phase.is_amber:
        return Action.KEEP  # amber runs its course regardless
    if phase.elapsed < hp.min_phase - 1e-9:
        return Action.KEEP
    if phase.elapsed >= hp.max_phase - 1e-9:
        return Action.SWITCH
    return Action(proposed)


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions, sampled uniformly with replacement."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.size = 0
        self._next = 0
        self._s = np.zeros((capacity, obs_dim))
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, obs_dim))
        self._term = np.zeros(capacity, dtype=bool)

    def __len__(self) -> int:
        return self.size

    def add(self, s, a: int, r: float, s_next, terminal: bool) -> None:
        i = self._next
        self._s[i] = s
        self._a[i] = int(a)
        self._r[i] = r
        self._s2[i] = s_next
        self._term[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, t: Transition) -> None:
        self.add(t.s, t.a, t.r, t.s_next, t.terminal)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=batch_size)
        return self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._term[idx]

    def transitions(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self._next if self.size == self.capacity else 0
        order = [(start + k) % self.capacity for k in range(self.size)]
        return [Transition(self._s[i].copy(), int(self._a[i]), float(self._r[i]),
                           self._s2[i].copy(), bool(self._term[i])) for i in order]


def td_targets(rewards, next_obs, terminals, target_net: QNetwork, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    best_next = forward(target_net, np.atleast_2d(next_obs)).max(axis=1)
    return rewards + gamma * np.where(np.asarray(terminals, dtype=bool), 0.0, best_next)


def compute_td_targets(batch: Sequence[Transition], target_net: QNetwork, gamma: float) -> np.ndarray:
    """r + gamma * max_a Q_target(s', a), or r for terminal transitions."""
    if not batch:
        raise ValueError("batch must be nonempty")
    return td_targets([t.r for t in batch], np.stack([t.s_next for t in batch]),
                      [t.terminal for t in batch], target_net, gamma)


def train_step(online: QNetwork, target: QNetwork, buffer: ReplayBuffer, hp: Hyperparams,
               adam: AdamState, rng: np.random.Generator) -> float | None:
    """One minibatch Adam update of ``online``. Returns the loss, or None if the buffer is too small."""
    if len(buffer) < hp.batch_size:
        return None
    s, a, r, s2, term = buffer.sample(hp.batch_size, rng)
    targets = td_targets(r, s2, term, target, hp.gamma)
    grads, loss = batch_backward(online, s, a, targets)
    adam_step(online, grads, adam)
    return loss


def sync_target(online: QNetwork, target: QNetwork) -> None:
    if online.spec != target.spec:
        raise ValueError(f"cannot sync networks with specs {online.spec} and {target.spec}")
    for dst, src in zip(target.params(), online.params()):
        dst[...] = src


def epsilon_at(step: int, total_steps: int, hp: Hyperparams) -> float:
    """Linear decay from epsilon_start to epsilon_end over the first decay fraction of training."""
    decay_steps = hp.epsilon_decay_fraction * total_steps
    if decay_steps <= 0 or step >= decay_steps:
        return hp.epsilon_end
    frac = step / decay_steps
    return hp.epsilon_start + frac * (hp.epsilon_end - hp.epsilon_start)


@dataclass
class LearningCurve:
    episodes: list[int] = field(default_factory=list)
    mean_penalty: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    selection: list[tuple[int, float]] = field(default_factory=list)  # (episode, validation penalty)

    def append(self, episode: int, penalty: float, eps: float) -> None:
        self.episodes.append(episode)
        self.mean_penalty.append(penalty)
        self.epsilon.append(eps)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["episode", "mean_penalty", "epsilon"])
            for row in zip(self.episodes, self.mean_penalty, self.epsilon):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


class AgentController:
    """Greedy (frozen) DQN policy with the phase guard, usable by the episode runner."""

    name = "dqn"

    def __init__(self, net: QNetwork, hp: Hyperparams, lane_length: float):
        if net.spec.input_dim != hp.obs_dim:
            raise ValueError(f"network input {net.spec.input_dim} does not match "
                             f"{hp.representation!r} observations ({hp.obs_dim})")
        self.net = net
        self.hp = hp
        self.lane_length = lane_length
        self.decision_interval = hp.decision_interval
        self._scale = feature_scale(lane_length, hp.representation)

    def features(self, world: WorldState) -> np.ndarray:
        obs = encode_observation(measure_state(world), self.lane_length, self.hp.representation)
        return obs * self._scale

    def decide(self, world: WorldState) -> Command:
        if world.phase.is_amber:
            return Command.KEEP
        proposed = select_action(self.features(world), self.net, 0.0)
        return apply_phase_guard(proposed, world.phase, self.hp)


def _episode_start(scenario: ScenarioConfig, rng: np.random.Generator) -> float:
    if scenario.hourly_profile is not None:
        return float(rng.integers(24)) * 3600.0
    return scenario.start_time


def train_agent(scenario: ScenarioConfig, hp: Hyperparams, seed: int,
                progress: Callable[[int, float, float], None] | None = None,
                reward_log: list | None = None) -> tuple[QNetwork, LearningCurve]:
    """Train a DQN controller on ``scenario`` and return the online network and learning curve.

    If ``reward_log`` is a list, one ``(snapshots, reward)`` pair is appended per
    stored transition, with a :meth:`WorldState.snapshot` after every enclosed
    simulation step (used to audit reward bookkeeping).
    """
    params = scenario.road
    spec = hp.mlp_spec()
    ss = np.random.SeedSequence(seed)
    init_online, init_target, agent_seq, world_seq, select_seq = ss.spawn(5)
    online = init_network(spec, np.random.default_rng(init_online))
    target = init_network(spec, np.random.default_rng(init_target))
    if hp.sync_at_start:
        sync_target(online, target)
    rng = np.random.default_rng(agent_seq)
    adam = AdamState.for_network(online, lr=hp.lr)
    buffer = ReplayBuffer(hp.buffer_capacity, hp.obs_dim)
    controller = AgentController(online, hp, params.lane_length)
    scale = controller._scale

    sub_steps = steps_per_decision(hp.decision_interval, params.sim_dt)
    episode_seconds = hp.train_episode_seconds or scenario.episode_seconds
    decisions_per_episode = max(1, int(round(episode_seconds / hp.decision_interval)))
    total_decisions = decisions_per_episode * hp.train_episodes
    arrivals = scenario.arrival_spec()
    curve = LearningCurve()
    step = 0
    eps = hp.epsilon_start
    select_seeds = [int(np.random.default_rng(c).integers(2**63))
                    for c in select_seq.spawn(hp.select_episodes)]
    best, best_score = None, math.inf

    for episode, world_seed in enumerate(world_seq.spawn(hp.train_episodes)):
        world_rng = np.random.default_rng(world_seed)
        start = _episode_start(scenario, world_rng)
        world = new_world(params, arrivals, world_rng.integers(2**63), start_clock=start)
        obs = encode_observation(measure_state(world), params.lane_length, hp.representation) * scale
        penalty = 0.0
        for k in range(decisions_per_episode):
            eps = epsilon_at(step, total_decisions, hp)
            proposed = select_action(obs, target, eps, rng)
            command = apply_phase_guard(proposed, world.phase, hp)
            reward = 0.0
            snapshots = []
            for j in range(sub_steps):
                _, stats = step_simulation(world, command if j == 0 else Command.KEEP)
                reward += stats.reward
                if reward_log is not None:
                    snapshots.append(world.snapshot())
            reward /= sub_steps
            next_obs = encode_observation(measure_state(world), params.lane_length,
                                          hp.representation) * scale
            terminal = k == decisions_per_episode - 1
            # the guard is part of the environment, so the proposed action is what was "taken"
            buffer.add(obs, int(proposed), reward, next_obs, terminal)
            if reward_log is not None:
                reward_log.append((snapshots, reward))
            train_step(online, target, buffer, hp, adam, rng)
            step += 1
            if step % hp.target_sync_interval == 0:
                sync_target(online, target)
            penalty -= reward
            obs = next_obs
        mean_penalty = penalty / decisions_per_episode
        curve.append(episode, mean_penalty, eps)
        if progress is not None:
            progress(episode, mean_penalty, eps)
        log.debug("episode %d penalty %.4f epsilon %.3f", episode, mean_penalty, eps)
        if _selection_due(episode, hp):
            score = validation_penalty(online, scenario, hp, select_seeds, hp.select_seconds)
            curve.selection.append((episode, score))
            if score < best_score:
                best, best_score = online.copy(), score
    return (online if best is None else best), curve


def _selection_due(episode: int, hp: Hyperparams) -> bool:
    """Snapshots are scored every ``select_every`` episodes once exploration has decayed."""
    done = episode + 1
    if hp.select_every == 0:
        return False
    if done == hp.train_episodes:
        return True
    return done % hp.select_every == 0 and done >= hp.epsilon_decay_fraction * hp.train_episodes


def validation_penalty(net: QNetwork, scenario: ScenarioConfig, hp: Hyperparams,
                       seeds: Sequence[int], episode_seconds: float) -> float:
    """Mean per-step penalty of the greedy guarded policy over fixed validation episodes."""
    params = scenario.road
    controller = AgentController(net, hp, params.lane_length)
    sub_steps = steps_per_decision(hp.decision_interval, params.sim_dt)
    arrivals = scenario.arrival_spec()
    total, count = 0.0, 0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        world = new_world(params, arrivals, rng.integers(2**63),
                          start_clock=_episode_start(scenario, rng))
        for _ in range(int(round(episode_seconds / params.sim_dt)) // sub_steps):
            command = controller.decide(world)
            for j in range(sub_steps):
                _, stats = step_simulation(world, command if j == 0 else Command.KEEP)
                total -= stats.reward
                count += 1
    return total / count


def deploy_agent(checkpoint: bytes | QNetwork, scenario: ScenarioConfig, seed: int,
                 hp: Hyperparams | None = None,
                 perturbations: Perturbations = NO_PERTURBATIONS) -> MetricsRecord:
    """Run one frozen, greedy episode; the network is never updated."""
    hp = hp or Hyperparams()
    net = checkpoint if isinstance(checkpoint, QNetwork) else load_checkpoint(
        checkpoint, expected_dims=hp.mlp_spec().layer_dims)
    controller = AgentController(net, hp, scenario.road.lane_length)
    return run_episode(scenario, controller, seed, perturbations)


def representation_for_dims(input_dim: int) -> str:
    for rep in (Representation.SIGN, Representation.INDICATOR):
        if observation_dim(rep) == input_dim:
            return rep
    raise ValueError(f"no observation representation has {input_dim} inputs")


__all__ = [
    "Action", "AgentController", "Hyperparams", "LearningCurve", "ReplayBuffer", "Transition",
    "apply_phase_guard", "compute_td_targets", "deploy_agent", "encode_observation",
    "epsilon_at", "feature_scale", "load_hyperparams", "select_action", "sync_target",
    "train_agent", "train_step", "td_targets", "validation_penalty",
]
