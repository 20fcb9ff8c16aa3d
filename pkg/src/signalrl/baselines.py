"""Non-learning reference controllers."""

from __future__ import annotations

from dataclasses import dataclass

from .agent import Action, Hyperparams, apply_phase_guard
from .sim import RawDetection, SignalPhase, WorldState, measure_state, served_mask


@dataclass(frozen=True)
class PretimedPlan:
    green_duration: float = 24.0
    amber_duration: float = 3.0

    def __post_init__(self) -> None:
        if self.green_duration <= 0 or self.amber_duration <= 0:
            raise ValueError("phase durations must be > 0")

    @property
    def cycle_length(self) -> float:
        return 2.0 * (self.green_duration + self.amber_duration)


def pretimed_decide(phase: SignalPhase, plan: PretimedPlan) -> Action:
    if phase.is_amber:
        return Action.KEEP
    return Action.SWITCH if phase.elapsed >= plan.green_duration - 1e-9 else Action.KEEP


def longest_queue_decide(raw: RawDetection, margin: int = 1) -> Action:
    """Switch when red approaches hold at least ``margin`` more detected vehicles than green ones."""
    served = served_mask(raw.phase_id)
    green = sum(c for c, s in zip(raw.counts, served) if s)
    red = sum(c for c, s in zip(raw.counts, served) if not s)
    return Action.SWITCH if red - green >= margin else Action.KEEP


class PretimedController:
    name = "pretimed"
    decision_interval = None

    def __init__(self, plan: PretimedPlan | None = None):
        self.plan = plan or PretimedPlan()

    def decide(self, world: WorldState) -> Action:
        if abs(world.params.amber_duration - self.plan.amber_duration) > 1e-9:
            raise ValueError("pretimed plan amber differs from the simulated amber duration")
        return pretimed_decide(world.phase, self.plan)


class LongestQueueController:
    """Actuated reference: serve the side with more detected vehicles, within the phase bounds."""

    name = "longest-queue"

    def __init__(self, margin: int = 1, hp: Hyperparams | None = None):
        if margin < 1:
            raise ValueError("margin must be >= 1 so that ties keep the phase")
        self.margin = margin
        self.hp = hp or Hyperparams()
        self.decision_interval = self.hp.decision_interval

    def decide(self, world: WorldState) -> Action:
        if world.phase.is_amber:
            return Action.KEEP
        proposed = longest_queue_decide(measure_state(world), self.margin)
        return apply_phase_guard(proposed, world.phase, self.hp)
