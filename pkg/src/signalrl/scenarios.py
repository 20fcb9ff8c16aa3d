"""Scenario configuration: road geometry, demand, detection rate, episode timing.

Scenario files are YAML with this schema (all keys optional except ``name``
and one of ``rates``/``base``)::

    name: my-scenario
    base: medium              # start from a built-in scenario
    rates: [0.02, 0.1, 0.02, 0.05]   # veh/s for N, E, S, W
    hourly_profile: [...]     # 24 multipliers of ``rates`` (day scenarios)
    detection_rate: 0.2
    flow_scale: 1.0           # multiplies every rate
    episode_seconds: 3600
    warmup_seconds: 300
    start_time: 0             # seconds since midnight
    road: {lane_length: 125, v_max: 13.89, ...}   # any RoadParams field

Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sim import ArrivalSpec, ConfigurationError, RoadParams


class ScenarioError(Exception):
    pass


class ScenarioNotFoundError(ScenarioError, FileNotFoundError):
    pass


class ScenarioParseError(ScenarioError):
    pass


class ScenarioSchemaError(ScenarioError, ValueError):
    pass


# Total intersection demand (veh/s) per hour of day: peaks of 1.2 at 08:00 and
# 18:00, about 0.7 through regular daytime hours, light at night.
DAY_PROFILE = (
    0.10, 0.06, 0.05, 0.05, 0.08, 0.25, 0.55, 0.95,
    1.20, 0.90, 0.70, 0.70, 0.72, 0.70, 0.68, 0.70,
    0.80, 1.00, 1.20, 0.85, 0.60, 0.40, 0.25, 0.15,
)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    rates: tuple[float, ...]
    detection_rate: float = 1.0
    hourly_profile: tuple[float, ...] | None = None
    flow_scale: float = 1.0
    episode_seconds: float = 3600.0
    warmup_seconds: float = 300.0
    start_time: float = 0.0
    road: RoadParams = field(default_factory=RoadParams)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if self.hourly_profile is not None:
            object.__setattr__(self, "hourly_profile", tuple(float(r) for r in self.hourly_profile))
        if not math.isfinite(self.flow_scale) or self.flow_scale < 0:
            raise ScenarioSchemaError(f"flow_scale must be >= 0, got {self.flow_scale}")
        if self.episode_seconds <= 0 or self.warmup_seconds < 0:
            raise ScenarioSchemaError("episode_seconds must be > 0 and warmup_seconds >= 0")
        if self.warmup_seconds >= self.episode_seconds:
            raise ScenarioSchemaError("warm-up must be shorter than the episode")
        if not 0 <= self.start_time < 86400:
            raise ScenarioSchemaError("start_time must lie within one day")
        try:
            self.arrival_spec()
        except ConfigurationError as exc:
            raise ScenarioSchemaError(str(exc)) from None

    def arrival_spec(self) -> ArrivalSpec:
        return ArrivalSpec(rates=tuple(r * self.flow_scale for r in self.rates),
                           detection_rate=self.detection_rate,
                           hourly_profile=self.hourly_profile)

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)

    def with_detection_rate(self, p: float) -> ScenarioConfig:
        return self.replace(detection_rate=float(p))

    def with_flow_scale(self, scale: float) -> ScenarioConfig:
        return self.replace(flow_scale=float(scale))


BUILTIN_SCENARIOS: dict[str, ScenarioConfig] = {
    "sparse": ScenarioConfig("sparse", rates=(0.02, 0.02, 0.02, 0.02)),
    "medium": ScenarioConfig("medium", rates=(0.02, 0.1, 0.02, 0.05)),
    "dense": ScenarioConfig("dense", rates=(0.5, 0.5, 0.5, 0.5)),
    # flow-sensitivity base: 0.1 veh/s on every approach, scaled via flow_scale
    "uniform": ScenarioConfig("uniform", rates=(0.1, 0.1, 0.1, 0.1)),
    # whole-day demand split evenly over the four approaches
    "day": ScenarioConfig("day", rates=(0.25, 0.25, 0.25, 0.25), hourly_profile=DAY_PROFILE,
                          episode_seconds=86400.0),
}

_ROAD_KEYS = {f.name for f in dataclasses.fields(RoadParams)}
_TOP_KEYS = {"name", "base", "rates", "hourly_profile", "detection_rate", "flow_scale",
             "episode_seconds", "warmup_seconds", "start_time", "road"}


def scenario_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ScenarioSchemaError("scenario document must be a mapping")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ScenarioSchemaError(f"unknown scenario keys: {sorted(unknown)}")
    base_name = data.get("base")
    if base_name is not None:
        if base_name not in BUILTIN_SCENARIOS:
            raise ScenarioSchemaError(f"unknown base scenario {base_name!r}")
        base = BUILTIN_SCENARIOS[base_name]
    elif "rates" in data:
        base = None
    else:
        raise ScenarioSchemaError("scenario needs either 'rates' or 'base'")
    if "name" not in data and base is None:
        raise ScenarioSchemaError("scenario needs a 'name'")

    kwargs = {}
    for key in ("name", "detection_rate", "flow_scale", "episode_seconds", "warmup_seconds",
                "start_time"):
        if key in data:
            kwargs[key] = data[key]
    for key in ("rates", "hourly_profile"):
        if key in data:
            value = data[key]
            if value is not None and not isinstance(value, (list, tuple)):
                raise ScenarioSchemaError(f"{key} must be a list of numbers")
            kwargs[key] = None if value is None else tuple(value)
    if "road" in data:
        road = data["road"]
        if not isinstance(road, dict):
            raise ScenarioSchemaError("road must be a mapping")
        bad = set(road) - _ROAD_KEYS
        if bad:
            raise ScenarioSchemaError(f"unknown road keys: {sorted(bad)}")
        try:
            kwargs["road"] = RoadParams(**road)
        except (ConfigurationError, TypeError) as exc:
            raise ScenarioSchemaError(f"invalid road parameters: {exc}") from None
    for key, value in kwargs.items():
        if key in ("name",):
            if not isinstance(value, str) or not value:
                raise ScenarioSchemaError("name must be a non-empty string")
        elif key in ("rates", "hourly_profile"):
            if value is not None and not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                             for v in value):
                raise ScenarioSchemaError(f"{key} entries must be numbers")
        elif key != "road" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ScenarioSchemaError(f"{key} must be a number")
    try:
        if base is not None:
            return base.replace(**kwargs)
        return ScenarioConfig(**kwargs)
    except (ConfigurationError, TypeError) as exc:
        raise ScenarioSchemaError(str(exc)) from None


def load_scenario(source: str | Path) -> ScenarioConfig:
    """Resolve a built-in scenario name or load and validate a YAML scenario file."""
    if isinstance(source, str) and source in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[source]
    path = Path(source)
    if not path.is_file():
        raise ScenarioNotFoundError(f"scenario file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"cannot parse {path}: {exc}") from None
    return scenario_from_dict(data)
