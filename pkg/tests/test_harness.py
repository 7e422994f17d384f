import json
import os

import numpy as np
import pytest

from mavguard.attestor import Decision, SessionStatus
from mavguard.config import GatewayConfig
from mavguard.harness import (
    Scenario,
    ScenarioError,
    load_scenario,
    run_matrix,
    run_scenario,
)
from mavguard.messages import (
    MAV_CMD_COMPONENT_ARM_DISARM,
    MAV_CMD_DO_SET_MODE,
    MAV_CMD_MISSION_START,
    MAV_CMD_NAV_TAKEOFF,
    MAV_RESULT_ACCEPTED,
    MAV_RESULT_UNSUPPORTED,
    CommandLong,
    Heartbeat,
    MissionCount,
    MissionItemInt,
)
from mavguard.simulators import FcsSimulator, Phase
from mavguard.utils import list_packaged_scenarios


@pytest.fixture
def config(tmp_path):
    return GatewayConfig(log_dir=str(tmp_path), backoff_spins=200, backoff_sleep_us=20)


def test_packaged_scenarios_load():
    names = list_packaged_scenarios()
    assert names == [
        "attack_inaccurate_bounds",
        "attack_mission_overflow",
        "attack_parachute",
        "benign_mission_25",
    ]
    for name in names:
        scenario = load_scenario(name)
        assert scenario.name == name
        assert scenario.attack == name.startswith("attack_")


def test_circuit_expands_to_a_mission_upload():
    steps = load_scenario("attack_mission_overflow").expand_script()
    assert len(steps) == 6
    assert isinstance(steps[0].msg, MissionCount)
    assert steps[0].msg.count == 3
    assert [s.msg.seq for s in steps[1:]] == [0, 1, 2, 3, 0]
    assert all(isinstance(s.msg, MissionItemInt) for s in steps[1:])
    times = [s.at_s for s in steps]
    assert times == sorted(times)


def test_benign_mission_script():
    scenario = load_scenario("benign_mission_25")
    steps = scenario.expand_script()
    assert len(steps) == 34
    assert steps[5].msg.count == 25
    assert steps[30].msg.seq == 24


def test_timeline_pads_to_message_volume():
    scenario = load_scenario("attack_parachute")
    timeline, positions = scenario.timeline()
    assert len(timeline) == 250
    assert len(positions) == 2
    assert positions[0] < positions[1]
    assert [timeline[p].msg.param1 for p in positions] == [1.0, 2.0]
    padding = [m.msg for i, m in enumerate(timeline) if i not in positions]
    assert isinstance(padding[0], Heartbeat)
    assert timeline == scenario.timeline()[0]


def test_scenario_validation(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text(
        json.dumps(
            {
                "name": "broken",
                "gcs_script": [{"message": {"mavpackettype": "COMMAND_LONG", "command": 400}}],
                "expected": [{"index": 3, "decision": "reject"}],
            }
        )
    )
    with pytest.raises(ScenarioError):
        load_scenario(str(path))

    with pytest.raises(ValueError):
        Scenario(name="x", fcs_script={"phases": [{"mode": "HOVER"}]})
    with pytest.raises(ValueError):
        Scenario(
            name="x",
            gcs_script=[{"message": {"mavpackettype": "MISSION_COUNT", "count": 1}, "circuit": {"waypoints": 1}}],
        )


def test_missing_scenario():
    with pytest.raises(FileNotFoundError):
        load_scenario("no_such_scenario")


@pytest.mark.asyncio
async def test_empty_scenario(config):
    report = await run_scenario(Scenario(name="empty", timeout_s=10), config)
    assert (report.sent, report.forwarded, report.rejected, report.dropped) == (0, 0, 0, 0)
    assert report.passed
    assert report.latency is None
    assert report.audit_ok


@pytest.mark.asyncio
@pytest.mark.parametrize("name", ["attack_inaccurate_bounds", "attack_parachute", "attack_mission_overflow"])
async def test_attacks_are_stopped_by_the_spec(config, name):
    scenario = load_scenario(name)
    report = await run_scenario(scenario, config)
    assert report.passed, report.summary()
    assert report.attack_detected
    assert report.sent == 250
    assert report.dropped == 0
    assert report.fifo_ok
    assert report.audit_ok
    assert report.latency is not None

    log_dir = os.path.join(config.log_dir, name, "gateway_spec")
    with open(os.path.join(log_dir, "report.json")) as f:
        assert json.load(f)["attack_detected"] is True
    assert os.path.exists(os.path.join(log_dir, "verdicts.jsonl"))


@pytest.mark.asyncio
async def test_mission_overflow_rejected_at_the_fourth_item(config):
    report = await run_scenario(load_scenario("attack_mission_overflow"), config)
    rejected = [o.index for o in report.outcomes if o.decision == Decision.REJECT]
    assert rejected == [4, 5]
    assert report.outcomes[4].reason == "no matching session"
    assert report.sessions["mission_upload"] == SessionStatus.COMPLETE


@pytest.mark.asyncio
@pytest.mark.parametrize("mode", ["passthrough", "gateway"])
async def test_attacks_pass_without_the_spec(config, mode):
    report = await run_scenario(load_scenario("attack_parachute"), config, mode=mode)
    assert report.attack_detected is False
    assert report.rejected == 0
    assert report.forwarded == report.sent == 250


@pytest.mark.asyncio
async def test_matrix(config):
    scenarios = [load_scenario("attack_parachute")]
    result = await run_matrix(scenarios, config, modes=["passthrough", "gateway+spec"])
    assert len(result.reports) == 2
    assert result.passed
    text = result.render()
    assert "attack_parachute" in text
    assert "Yes" in text and "No" in text
    assert os.path.exists(os.path.join(config.log_dir, "matrix.txt"))
    assert os.path.exists(os.path.join(config.log_dir, "matrix.json"))


@pytest.mark.slow
@pytest.mark.asyncio
async def test_benign_mission_is_forwarded_in_order(config):
    report = await run_scenario(load_scenario("benign_mission_25"), config)
    assert report.passed, report.summary()
    assert report.sent == 5000
    assert report.rejected == 0
    assert report.fifo_ok
    assert report.sessions["mission_upload"] == SessionStatus.COMPLETE


@pytest.mark.slow
@pytest.mark.asyncio
async def test_full_matrix(tmp_path):
    config = GatewayConfig(log_dir=str(tmp_path))
    scenarios = [load_scenario(name) for name in list_packaged_scenarios()]
    result = await run_matrix(scenarios, config)
    assert len(result.reports) == 12
    assert result.passed, "\n".join(r.summary() for r in result.reports if not r.passed)

    for report in result.reports:
        assert report.dropped == 0
        assert report.fifo_ok
        if report.mode == "passthrough":
            assert report.audit_ok is None
        else:
            assert report.audit_ok
        if report.attack:
            assert report.attack_detected is (report.mode == "gateway+spec")
        else:
            assert report.rejected == 0

    medians = {
        mode: np.median(np.concatenate([r.latency_samples_us for r in result.reports if r.mode == mode])) / 1000.0
        for mode in ("passthrough", "gateway", "gateway+spec")
    }
    # ms of scheduling noise allowed between neighbouring modes
    tolerance = 0.2
    assert medians["gateway+spec"] - medians["passthrough"] <= 1.0
    assert medians["passthrough"] <= medians["gateway"] + tolerance
    assert medians["gateway"] <= medians["gateway+spec"] + tolerance


def test_fcs_simulator_acknowledges_supported_commands():
    fcs = FcsSimulator([Phase(duration_s=1.0, armed=True, mode="LOITER", altitude_m=10.0, climb_rate_mps=0.0)])
    try:
        for command in (MAV_CMD_COMPONENT_ARM_DISARM, MAV_CMD_DO_SET_MODE, MAV_CMD_NAV_TAKEOFF, MAV_CMD_MISSION_START):
            (ack,) = fcs.acknowledge(CommandLong(command=command))
            assert (ack.command, ack.result) == (command, MAV_RESULT_ACCEPTED)
        (ack,) = fcs.acknowledge(CommandLong(command=31000))
        assert ack.result == MAV_RESULT_UNSUPPORTED
    finally:
        fcs.stop()
