import pytest

from signalrl.scenarios import (BUILTIN_SCENARIOS, DAY_PROFILE, ScenarioNotFoundError,
                                ScenarioParseError, ScenarioSchemaError, load_scenario,
                                scenario_from_dict)


def test_builtin_rates():
    assert load_scenario("medium").rates == (0.02, 0.1, 0.02, 0.05)
    assert load_scenario("sparse").rates == (0.02,) * 4
    assert load_scenario("dense").rates == (0.5,) * 4


def test_day_profile_landmarks():
    day = load_scenario("day")
    totals = [sum(day.arrival_spec().rates_at(h * 3600.0 + 1.0)) for h in range(24)]
    peak = max(totals)
    assert peak == pytest.approx(1.2)
    assert [h for h, t in enumerate(totals) if t == pytest.approx(peak)] == [8, 18]
    daytime = [totals[h] for h in (10, 11, 12, 13, 14, 15)]
    assert all(0.6 <= t <= 0.8 for t in daytime)
    assert len(DAY_PROFILE) == 24 and day.episode_seconds == 86400.0


def test_yaml_file_with_base(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("name: custom\nbase: medium\ndetection_rate: 0.4\nroad:\n  lane_length: 200\n")
    sc = load_scenario(path)
    assert sc.name == "custom" and sc.detection_rate == 0.4
    assert sc.rates == BUILTIN_SCENARIOS["medium"].rates
    assert sc.road.lane_length == 200.0


def test_yaml_file_from_scratch(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("name: t\nrates: [0.1, 0, 0.1, 0]\nepisode_seconds: 1200\n")
    sc = load_scenario(str(path))
    assert sc.rates == (0.1, 0.0, 0.1, 0.0) and sc.episode_seconds == 1200


@pytest.mark.parametrize("doc", [
    {"name": "x", "rates": [0.1, -0.1, 0.1, 0.1]},
    {"name": "x", "rates": [0.1, 0.1, 0.1]},
    {"name": "x", "rates": [0.1] * 4, "detection_rate": 1.5},
    {"name": "x", "rates": [0.1] * 4, "color": "red"},
    {"name": "x", "rates": [0.1] * 4, "road": {"lanes": 2}},
    {"name": "x", "rates": [0.1] * 4, "road": {"v_max": -1}},
    {"name": "x", "rates": "fast"},
    {"name": "x", "rates": [0.1] * 4, "hourly_profile": [1.0] * 23},
    {"base": "nowhere"},
    {"detection_rate": 0.2},
    ["not", "a", "mapping"],
])
def test_schema_violations(doc):
    with pytest.raises(ScenarioSchemaError):
        scenario_from_dict(doc)


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioNotFoundError):
        load_scenario(tmp_path / "nope.yaml")


def test_parse_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: [unclosed\n")
    with pytest.raises(ScenarioParseError):
        load_scenario(path)


def test_variants():
    medium = BUILTIN_SCENARIOS["medium"]
    assert medium.with_detection_rate(0.3).detection_rate == 0.3
    scaled = medium.with_flow_scale(2.0)
    assert scaled.arrival_spec().rates == pytest.approx((0.04, 0.2, 0.04, 0.1))
