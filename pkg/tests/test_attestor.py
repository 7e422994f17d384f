import itertools
import logging
import random

import pytest

from mavguard.attestor import Attestor, Decision, SessionStatus
from mavguard.dsl import EMPTY_SPEC, load_spec, parse_spec
from mavguard.messages import (
    MAV_AUTOPILOT_INVALID,
    MAV_TYPE_GCS,
    CommandLong,
    GlobalPositionInt,
    Heartbeat,
    MissionAck,
    MissionCount,
    MissionItemInt,
    ParamSet,
    StatusText,
)
from mavguard.utils import get_flight_modes
from tests.reference import MissionAutomaton

MISSION_ONLY_SPEC = """
iter mission_upload: on MISSION_COUNT(count->N, mission_type->kind) expect MISSION_ITEM_INT(seq->i)
    require msg.mission_type == kind
"""


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self) -> float:
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def monitor(clock):
    return Attestor(load_spec("default.spec"), clock=clock)


@pytest.fixture
def quiet():
    logger = logging.getLogger("mavguard")
    level = logger.level
    logger.setLevel(logging.ERROR)
    yield
    logger.setLevel(level)


def fly(monitor, armed=True, mode="LOITER", altitude_m=30.0, climb_rate_mps=0.0):
    base_mode = 0x01 | (0x80 if armed else 0)
    monitor.observe(Heartbeat(type=2, autopilot=3, base_mode=base_mode, custom_mode=get_flight_modes()[mode]))
    monitor.observe(GlobalPositionInt(relative_alt=int(altitude_m * 1000), vz=int(round(-climb_rate_mps * 100))))


def param_set(name, value):
    return ParamSet(param_id=name, param_value=value)


def release():
    return CommandLong(command=208, param1=2)


def test_table_defaults_sit_under_the_bound(monitor):
    # 10 * 6.5 * 25 * 0.15 * (0 + 1) = 243.75
    assert monitor.attest(param_set("MC_PITCHRATE_MAX", 220.0)).accepted
    assert monitor.attest(param_set("MC_PITCHRATE_MAX", 243.75)).accepted
    verdict = monitor.attest(param_set("MC_PITCHRATE_MAX", 244.0))
    assert verdict.decision == Decision.REJECT
    assert verdict.rule_name == "pitchrate"


def test_inaccurate_bounds_attack(monitor):
    assert monitor.attest(param_set("MC_PITCH_P", 12.0)).accepted
    assert monitor.attest(param_set("MC_PITCHRATE_FF", 2.0)).accepted
    # bound is now 120 * 3.75 * 3 = 1350
    verdict = monitor.attest(param_set("MC_PITCHRATE_MAX", 1800.0))
    assert verdict.decision == Decision.REJECT
    assert verdict.rule_name == "pitchrate"
    assert verdict.reason == "pitch rate above gain-dependent bound"
    assert monitor.state.lookup("MC_PITCHRATE_MAX") == 220.0
    assert monitor.attest(param_set("MC_PITCHRATE_MAX", 1350.0)).accepted
    assert monitor.state.lookup("MC_PITCHRATE_MAX") == 1350.0


def test_gain_change_checked_against_current_limit(monitor):
    assert monitor.attest(param_set("MC_PITCHRATE_MAX", 240.0)).accepted
    verdict = monitor.attest(param_set("MC_PITCHRATE_P", 0.1))
    assert verdict.decision == Decision.REJECT
    assert verdict.rule_name == "pitchrate_gain"
    assert monitor.state.lookup("MC_PITCHRATE_P") == 0.15


def test_static_bounds(monitor):
    verdict = monitor.attest(param_set("MC_PITCH_P", 13.0))
    assert verdict.decision == Decision.REJECT
    assert verdict.rule_name == "bounds"
    assert verdict.reason == "MC_PITCH_P=13.0 outside [0.0, 12.0]"


def test_undeclared_parameter_is_forwarded(monitor):
    verdict = monitor.attest(param_set("WPNAV_SPEED", 1000.0))
    assert verdict.accepted
    assert verdict.reason == "no rule matches"
    assert monitor.state.params["WPNAV_SPEED"].declared is False


def test_parachute_release_while_climbing(monitor):
    fly(monitor, climb_rate_mps=1.5)
    verdict = monitor.attest(release())
    assert verdict.decision == Decision.REJECT
    assert verdict.rule_name == "parachute"
    assert verdict.reason == "climbing"


@pytest.mark.parametrize(
    "conditions, reason",
    [
        ({"armed": False}, "not armed"),
        ({"mode": "FLIP"}, "forbidden flight mode"),
        ({"mode": "ACRO"}, "forbidden flight mode"),
        ({"altitude_m": 5.0}, "below CHUTE_ALT_MIN"),
    ],
)
def test_parachute_preconditions(monitor, conditions, reason):
    fly(monitor, **conditions)
    verdict = monitor.attest(release())
    assert verdict.decision == Decision.REJECT
    assert verdict.reason == reason


def test_parachute_release_when_safe(monitor):
    fly(monitor, altitude_m=40.0, climb_rate_mps=-1.0)
    assert monitor.attest(release()).accepted
    assert monitor.attest(CommandLong(command=208, param1=0)).accepted


def test_parachute_unknown_action_has_no_branch(monitor):
    fly(monitor)
    verdict = monitor.attest(CommandLong(command=208, param1=3))
    assert verdict.decision == Decision.REJECT
    assert verdict.reason == "no branch"


def test_stale_state_rejects_telemetry_rules(monitor, clock):
    verdict = monitor.attest(release())
    assert verdict.reason == "stale state"
    fly(monitor)
    clock.now = 5.0
    assert monitor.attest(release()).accepted
    clock.now = 5.5
    assert monitor.attest(release()).reason == "stale state"
    # parameter rules read no telemetry
    assert monitor.attest(param_set("MC_PITCHRATE_MAX", 200.0)).accepted


def test_stale_state_only_gates_branches_reading_telemetry(monitor):
    for action in (0, 1):
        verdict = monitor.attest(CommandLong(command=208, param1=action))
        assert verdict.accepted
        assert verdict.rule_name == "parachute"
    assert monitor.attest(release()).reason == "stale state"


def test_stale_state_rejects_telemetry_guard(clock):
    spec = parse_spec(
        """
rule takeoff: on COMMAND_LONG(command=22)
    when state.armed:
        require msg.param7 > 0 else "no altitude"
    otherwise:
"""
    )
    monitor = Attestor(spec, clock=clock)
    verdict = monitor.attest(CommandLong(command=22, param7=10.0))
    assert verdict.decision == Decision.REJECT
    assert verdict.reason == "stale state"
    fly(monitor)
    assert monitor.attest(CommandLong(command=22, param7=10.0)).accepted
    assert monitor.attest(CommandLong(command=22)).reason == "no altitude"


def test_ground_station_heartbeat_is_accepted(monitor):
    verdict = monitor.attest(Heartbeat(type=MAV_TYPE_GCS, autopilot=MAV_AUTOPILOT_INVALID))
    assert verdict.accepted
    assert verdict.rule_name is None
    assert verdict.reason == "no rule matches"


def test_mission_upload_and_overflow(monitor):
    assert monitor.attest(MissionCount(count=3)).accepted
    assert monitor.sessions["mission_upload"].status == SessionStatus.UPLOADING
    for seq in range(3):
        assert monitor.attest(MissionItemInt(seq=seq)).accepted
    assert monitor.sessions["mission_upload"].status == SessionStatus.COMPLETE
    for seq in (3, 0):
        verdict = monitor.attest(MissionItemInt(seq=seq))
        assert verdict.decision == Decision.REJECT
        assert verdict.reason == "no matching session"


def test_mission_item_errors(monitor):
    assert monitor.attest(MissionCount(count=3)).accepted
    assert monitor.attest(MissionItemInt(seq=3)).reason == "item 3 outside 0..2"
    assert monitor.attest(MissionItemInt(seq=1)).accepted
    assert monitor.attest(MissionItemInt(seq=1)).reason == "item 1 already received"
    assert monitor.attest(MissionCount(count=5)).reason == "session already open"
    assert monitor.attest(MissionItemInt(seq=0, mission_type=1)).reason == "mission type mismatch"
    assert monitor.sessions["mission_upload"].received_seqs == {1}


def test_empty_mission_completes_immediately(monitor):
    assert monitor.attest(MissionCount(count=0)).accepted
    assert monitor.sessions["mission_upload"].status == SessionStatus.COMPLETE
    assert monitor.attest(MissionItemInt(seq=0)).reason == "no matching session"


def test_session_timeout(monitor, clock):
    assert monitor.attest(MissionCount(count=2)).accepted
    assert monitor.attest(MissionItemInt(seq=0)).accepted
    clock.now = 10.5
    verdict = monitor.attest(MissionItemInt(seq=1))
    assert verdict.reason == "no matching session"
    (event,) = monitor.drain_events()
    assert event["event"] == "session_expired"
    assert event["received"] == 1 and event["expected"] == 2
    assert monitor.drain_events() == []


def test_reset_mid_upload(monitor):
    assert monitor.attest(param_set("MC_PITCH_P", 10.0)).accepted
    assert monitor.attest(MissionCount(count=2)).accepted
    monitor.reset()
    assert monitor.attest(MissionItemInt(seq=0)).reason == "no matching session"
    assert monitor.state.lookup("MC_PITCH_P") == 6.5


def test_empty_spec_accepts_everything(clock):
    monitor = Attestor(EMPTY_SPEC, clock=clock)
    for msg in [release(), param_set("MC_PITCH_P", 1e6), MissionItemInt(seq=7), StatusText(text="hi")]:
        assert monitor.attest(msg).accepted


def test_default_deny(clock):
    monitor = Attestor(load_spec("default.spec"), clock=clock, default_deny=True)
    verdict = monitor.attest(StatusText(text="hi"))
    assert verdict.decision == Decision.REJECT
    assert verdict.rule_name == "default-deny"
    assert monitor.attest(param_set("MC_PITCHRATE_MAX", 200.0)).accepted
    assert monitor.attest_unknown(180).decision == Decision.REJECT


def test_unknown_message_forwarded_without_default_deny(monitor):
    verdict = monitor.attest_unknown(180)
    assert verdict.accepted
    assert verdict.message == "UNKNOWN_180"


def test_evaluation_errors_fail_closed(clock):
    spec = parse_spec(
        "rule ratio: on PARAM_SET(param_id=\"RATIO\", param_value->v)\n"
        "    require v / (v - v) > 0\n"
    )
    monitor = Attestor(spec, clock=clock)
    verdict = monitor.attest(param_set("RATIO", 2.0))
    assert verdict.decision == Decision.REJECT
    assert verdict.reason == "evaluation error: division by zero"
    assert "RATIO" not in monitor.state.params


def test_accepted_param_sets_keep_declared_bounds(monitor, quiet):
    rng = random.Random(3)
    names = [decl.name for decl in monitor.spec.state_decls]
    for _ in range(500):
        monitor.attest(param_set(rng.choice(names), rng.uniform(-100.0, 2500.0)))
        for entry in monitor.state.params.values():
            assert entry.in_bounds(entry.value)


def test_verdict_sequences_are_deterministic(clock, quiet):
    rng = random.Random(9)
    messages = []
    for _ in range(300):
        roll = rng.random()
        if roll < 0.4:
            messages.append(param_set(rng.choice(["MC_PITCH_P", "MC_PITCHRATE_MAX", "MC_PITCHRATE_FF"]), rng.uniform(0, 2000)))
        elif roll < 0.7:
            messages.append(MissionItemInt(seq=rng.randrange(4)))
        else:
            messages.append(MissionCount(count=rng.randrange(4)))
    first = Attestor(load_spec("default.spec"), clock=clock)
    second = Attestor(load_spec("default.spec"), clock=clock)
    run_a = [first.attest(m).model_dump(exclude={"timestamp"}) for m in messages]
    run_b = [second.attest(m).model_dump(exclude={"timestamp"}) for m in messages]
    first.reset()
    run_c = [first.attest(m).model_dump(exclude={"timestamp"}) for m in messages]
    assert run_a == run_b == run_c


@pytest.mark.slow
@pytest.mark.parametrize("count", [0, 1, 2, 3])
def test_mission_oracle_exhaustive(count, clock, quiet):
    monitor = Attestor(parse_spec(MISSION_ONLY_SPEC), clock=clock)
    symbols = [("count", count)] + [("item", seq) for seq in range(4)] + [("ack", 0)]
    messages = {("count", count): MissionCount(count=count), ("ack", 0): MissionAck()}
    messages.update({("item", seq): MissionItemInt(seq=seq) for seq in range(4)})
    disagreements = []
    # every sequence up to length 6 is a prefix of one of these
    for sequence in itertools.product(symbols, repeat=6):
        monitor.reset()
        automaton = MissionAutomaton()
        for step, symbol in enumerate(sequence):
            if monitor.attest(messages[symbol]).accepted != automaton.step(symbol):
                disagreements.append(sequence[: step + 1])
                break
    assert disagreements == []
