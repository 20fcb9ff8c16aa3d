from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

from .sim import Vehicle


@dataclass(frozen=True)
class MetricsRecord:
    """Per-episode waiting/trip outcomes.

    Class means are ``None`` when the class had no departures in the window;
    ``empty`` flags a record with no departures at all.
    """

    wait_all: float | None
    wait_detected: float | None
    wait_undetected: float | None
    n_all: int
    n_detected: int
    n_undetected: int
    trip_mean: float | None
    t_min: float | None = None
    seed: int | None = None
    scenario: str = ""
    controller: str = ""
    detection_rate: float | None = None
    flow_scale: float = 1.0
    hour: int | None = None

    @property
    def empty(self) -> bool:
        return self.n_all == 0

    @property
    def detected_empty(self) -> bool:
        return self.n_detected == 0

    @property
    def undetected_empty(self) -> bool:
        return self.n_undetected == 0

    def labelled(self, **labels) -> MetricsRecord:
        return dataclasses.replace(self, **labels)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def collect_metrics(departed: Iterable[Vehicle], clock_range: tuple[float, float] | None = None,
                    t_min: float | None = None, **labels) -> MetricsRecord:
    """Aggregate waits of departed vehicles whose spawn time falls in ``clock_range`` (start inclusive)."""
    waits_det: list[float] = []
    waits_undet: list[float] = []
    trips: list[float] = []
    for veh in departed:
        if clock_range is not None and not clock_range[0] <= veh.spawn_time < clock_range[1]:
            continue
        (waits_det if veh.detected else waits_undet).append(veh.accumulated_wait)
        if veh.trip_time is not None:
            trips.append(veh.trip_time)
    all_waits = waits_det + waits_undet
    return MetricsRecord(
        wait_all=_mean(all_waits),
        wait_detected=_mean(waits_det),
        wait_undetected=_mean(waits_undet),
        n_all=len(all_waits),
        n_detected=len(waits_det),
        n_undetected=len(waits_undet),
        trip_mean=_mean(trips),
        t_min=t_min,
        **labels,
    )
