"""Scenario files, the scenario runner and the configuration matrix.

A run boots the FCS simulator, the gateway in the requested mode and the GCS
simulator, plays the scenario, waits until every uplink frame is accounted
for (received by the FCS or rejected) and then compares what happened with
the scenario's expectations.
"""
import asyncio
import json
import logging
import math
import os
import time
from collections import defaultdict, deque
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from mavguard.attestor import Decision, SessionStatus
from mavguard.config import GATEWAY_MODES, GatewayConfig
from mavguard.dsl import ProtocolSpec, load_spec
from mavguard.evaluation import (
    LatencyStats,
    detection_table,
    latency_stats,
    latency_table,
    render_table,
)
from mavguard.gateway import Gateway, audit_non_bypass
from mavguard.messages import (
    MAV_CMD_NAV_WAYPOINT,
    MAV_TYPE_GCS,
    MAV_AUTOPILOT_INVALID,
    AnyMessage,
    GlobalPositionInt,
    Heartbeat,
    MavMessage,
    MissionCount,
    MissionItemInt,
)
from mavguard.simulators import (
    HOME_LAT,
    HOME_LON,
    MAV_STATE_ACTIVE,
    FcsSimulator,
    GcsSimulator,
    Phase,
    TimedMessage,
)
from mavguard.utils import SPECS_DIR, get_flight_modes, resolve_scenario_path, save_json, save_text

logger = logging.getLogger("mavguard")

EARTH_RADIUS_M = 6378137.0
WARMUP_TIMEOUT_S = 5.0


class ScenarioError(ValueError):
    pass


class ScenarioTimeout(TimeoutError):
    pass


class Circuit(BaseModel):
    """A ring of waypoints expanded into MISSION_COUNT plus one MISSION_ITEM_INT per point."""

    waypoints: int = Field(25, ge=0, le=0xFFFF)
    center_lat: float = Field(HOME_LAT, description="Ring centre latitude, degrees.")
    center_lon: float = Field(HOME_LON, description="Ring centre longitude, degrees.")
    radius_m: float = Field(60.0, gt=0)
    altitude_m: float = Field(20.0, description="Item altitude relative to home.")
    item_delay_ms: float = Field(20.0, ge=0, description="Delay before each item.")
    mission_type: int = Field(0, ge=0, le=255)

    def messages(self) -> List[MavMessage]:
        items: List[MavMessage] = [MissionCount(count=self.waypoints, mission_type=self.mission_type)]
        for seq in range(self.waypoints):
            angle = 2 * math.pi * seq / max(self.waypoints, 1)
            dlat = self.radius_m * math.cos(angle) / EARTH_RADIUS_M
            dlon = self.radius_m * math.sin(angle) / (EARTH_RADIUS_M * math.cos(math.radians(self.center_lat)))
            items.append(
                MissionItemInt(
                    seq=seq,
                    command=MAV_CMD_NAV_WAYPOINT,
                    x=int(round((self.center_lat + math.degrees(dlat)) * 1e7)),
                    y=int(round((self.center_lon + math.degrees(dlon)) * 1e7)),
                    z=self.altitude_m,
                    current=1 if seq == 0 else 0,
                    mission_type=self.mission_type,
                )
            )
        return items


class ScriptEntry(BaseModel):
    delay_ms: float = Field(0.0, ge=0, description="Delay after the previous entry, scenario milliseconds.")
    message: Optional[AnyMessage] = Field(None, description="Message keyed by mavpackettype.")
    circuit: Optional[Circuit] = Field(None, description="Mission upload generated from a ring of waypoints.")
    sysid: int = Field(255, ge=0, le=255)
    compid: int = Field(190, ge=0, le=255)

    @model_validator(mode="after")
    def _one_payload(self):
        if (self.message is None) == (self.circuit is None):
            raise ValueError("a script entry needs exactly one of 'message' or 'circuit'")
        return self


class TelemetryPhase(BaseModel):
    duration_s: float = Field(math.inf, gt=0, description="Scenario seconds; the last phase lasts forever.")
    armed: bool = False
    mode: str = "STABILIZE"
    altitude_m: float = 0.0
    climb_rate_mps: float = Field(0.0, description="Positive up.")


class FcsScript(BaseModel):
    phases: List[TelemetryPhase] = Field(default_factory=lambda: [TelemetryPhase()])
    telemetry_hz: float = Field(10.0, gt=0, description="Wall-clock telemetry rate.")
    auto_ack: bool = True


class Padding(BaseModel):
    """GCS heartbeat and position traffic filling the run up to ``message_volume`` uplink messages."""

    rate_hz: float = Field(50.0, gt=0, description="Scenario-time rate of padding messages.")
    message_volume: int = Field(0, ge=0, description="Total uplink messages including the script.")


class ExpectedVerdict(BaseModel):
    index: int = Field(..., ge=0, description="Position in the expanded GCS script.")
    decision: Decision
    rule_name: Optional[str] = None
    reason: Optional[str] = None


class ExpectedSession(BaseModel):
    iteration: str
    status: SessionStatus


class Scenario(BaseModel):
    name: str
    description: str = ""
    attack: bool = Field(False, description="True if the script contains an attack the spec must stop.")
    seed: int = 0
    speedup: float = Field(1.0, gt=0, description="Scenario time runs this many times faster than wall time.")
    gcs_script: List[ScriptEntry] = Field(default_factory=list)
    fcs_script: FcsScript = Field(default_factory=FcsScript)
    padding: Optional[Padding] = None
    expected: List[ExpectedVerdict] = Field(default_factory=list)
    expected_sessions: List[ExpectedSession] = Field(default_factory=list)
    max_rejects: Optional[int] = Field(None, description="Upper bound on rejections under gateway+spec.")
    timeout_s: float = Field(120.0, gt=0, description="Wall-clock cap for the run.")

    @model_validator(mode="after")
    def _check_indices(self):
        count = len(self.expand_script())
        for expectation in self.expected:
            if expectation.index >= count:
                raise ValueError(f"expected index {expectation.index} beyond the {count}-message script")
        modes = get_flight_modes()
        for phase in self.fcs_script.phases:
            if phase.mode not in modes:
                raise ValueError(f"unknown flight mode {phase.mode}")
        return self

    def expand_script(self) -> List[TimedMessage]:
        """The GCS script with circuits expanded, at absolute scenario times."""
        steps = []
        at_ms = 0.0
        for entry in self.gcs_script:
            at_ms += entry.delay_ms
            if entry.message is not None:
                steps.append(TimedMessage(at_ms / 1000.0, entry.message, entry.sysid, entry.compid))
                continue
            for i, msg in enumerate(entry.circuit.messages()):
                if i:
                    at_ms += entry.circuit.item_delay_ms
                steps.append(TimedMessage(at_ms / 1000.0, msg, entry.sysid, entry.compid))
        return steps

    def timeline(self) -> Tuple[List[TimedMessage], List[int]]:
        """Script merged with padding, plus the timeline position of every script step."""
        steps = self.expand_script()
        tagged = [(step.at_s, 0, i, step) for i, step in enumerate(steps)]
        padding_count = max((self.padding.message_volume if self.padding else 0) - len(steps), 0)
        rng = np.random.default_rng(self.seed)
        jitter = rng.normal(0.0, 2e-5, size=(padding_count, 2))
        for k in range(padding_count):
            at_s = k / self.padding.rate_hz
            if k % 2 == 0:
                msg = Heartbeat(type=MAV_TYPE_GCS, autopilot=MAV_AUTOPILOT_INVALID, system_status=MAV_STATE_ACTIVE)
            else:
                msg = GlobalPositionInt(
                    time_boot_ms=int(at_s * 1000),
                    lat=int(round((HOME_LAT + jitter[k, 0]) * 1e7)),
                    lon=int(round((HOME_LON + jitter[k, 1]) * 1e7)),
                    alt=584000,
                )
            tagged.append((at_s, 1, k, TimedMessage(at_s, msg)))
        tagged.sort(key=lambda t: (t[0], t[1], t[2]))
        timeline = [t[3] for t in tagged]
        positions = [0] * len(steps)
        for position, t in enumerate(tagged):
            if t[1] == 0:
                positions[t[2]] = position
        return timeline, positions


def load_scenario(name_or_path: str) -> Scenario:
    path = resolve_scenario_path(name_or_path)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    try:
        return Scenario(**data)
    except ValueError as e:
        raise ScenarioError(f"invalid scenario {path}: {e}") from e


class CommandOutcome(BaseModel):
    index: int = Field(..., description="Position in the expanded GCS script.")
    position: int = Field(..., description="Position in the uplink stream.")
    message: str
    decision: Optional[Decision] = None
    rule_name: Optional[str] = None
    reason: Optional[str] = None


class RunReport(BaseModel):
    scenario: str
    mode: str
    attack: bool = False
    sent: int = 0
    forwarded: int = 0
    rejected: int = 0
    dropped: int = 0
    downlink_received: int = 0
    fifo_ok: bool = True
    outcomes: List[CommandOutcome] = Field(default_factory=list)
    latency: Optional[LatencyStats] = None
    latency_samples_us: List[float] = Field(default_factory=list, exclude=True)
    attack_detected: Optional[bool] = None
    sessions: Dict[str, SessionStatus] = Field(default_factory=dict)
    audit_ok: Optional[bool] = None
    failures: List[str] = Field(default_factory=list)
    duration_s: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        latency = str(self.latency) if self.latency else "n/a"
        lines = [
            f"scenario {self.scenario} [{self.mode}]",
            f"  sent {self.sent}  forwarded {self.forwarded}  rejected {self.rejected}  dropped {self.dropped}",
            f"  latency (ms) {latency}",
        ]
        for outcome in self.outcomes:
            if outcome.decision == Decision.REJECT:
                lines.append(f"  rejected #{outcome.index} {outcome.message}: {outcome.reason} ({outcome.rule_name})")
        if self.attack_detected is not None:
            lines.append(f"  attack detected: {'yes' if self.attack_detected else 'no'}")
        for failure in self.failures:
            lines.append(f"  FAIL {failure}")
        return "\n".join(lines)


def _phases(scenario: Scenario) -> List[Phase]:
    return [Phase(p.duration_s, p.armed, p.mode, p.altitude_m, p.climb_rate_mps) for p in scenario.fcs_script.phases]


def _latencies(sent: List[Tuple[bytes, int]], received: List[Tuple[bytes, int]]) -> List[float]:
    pending: Dict[bytes, Deque[int]] = defaultdict(deque)
    for frame, sent_ns in sent:
        pending[frame].append(sent_ns)
    samples = []
    for frame, received_ns in received:
        if pending[frame]:
            samples.append((received_ns - pending[frame].popleft()) / 1000.0)
    return samples


def _default_spec(config: GatewayConfig) -> ProtocolSpec:
    return load_spec(config.spec_path or str(SPECS_DIR / "default.spec"), config.spec_defines())


async def run_scenario(
    scenario: Scenario,
    config: Optional[GatewayConfig] = None,
    spec: Optional[ProtocolSpec] = None,
    mode: str = "gateway+spec",
    write_report: bool = True,
) -> RunReport:
    """Play one scenario through a gateway in ``mode`` and report what happened."""
    if mode not in GATEWAY_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    config = config or GatewayConfig()
    if mode == "gateway+spec" and spec is None:
        spec = _default_spec(config)
    log_dir = os.path.join(config.log_dir, scenario.name, mode.replace("+", "_"))
    run_config = config.model_copy(
        update={"gcs_listen": "127.0.0.1:0", "fcs_listen": "127.0.0.1:0", "log_dir": log_dir}
    )
    timeline, positions = scenario.timeline()
    steps = scenario.expand_script()
    logger.info("Scenario %s (%s): %d uplink messages", scenario.name, mode, len(timeline))

    started = time.monotonic()
    fcs = FcsSimulator(
        _phases(scenario),
        telemetry_hz=scenario.fcs_script.telemetry_hz,
        auto_ack=scenario.fcs_script.auto_ack,
        speedup=scenario.speedup,
    )
    run_config = run_config.model_copy(update={"fcs_target": "%s:%d" % fcs.address})
    gateway = Gateway(run_config, spec, mode)
    gateway.logs.clear()
    gcs = None
    try:
        gateway.start()
        fcs.start(gateway.fcs_side_address)
        await _wait_for(
            lambda: fcs.telemetry_sent > 0 and (mode == "passthrough" or gateway.monitor.state.last_update is not None),
            WARMUP_TIMEOUT_S,
            "no telemetry reached the gateway",
        )
        gcs = GcsSimulator(gateway.gcs_address, timeline, speedup=scenario.speedup).start()
        deadline = started + scenario.timeout_s

        def accounted() -> bool:
            return gcs.done.is_set() and len(fcs.received) + gateway.counters.rejected >= len(timeline)

        while not accounted():
            if time.monotonic() > deadline:
                raise ScenarioTimeout(f"scenario {scenario.name} did not finish within {scenario.timeout_s} s")
            await asyncio.sleep(0.01)
        # let trailing acknowledgements reach the GCS
        await asyncio.sleep(0.05)
    finally:
        if gcs is not None:
            gcs.stop()
        gateway.stop()
        fcs.stop()
        await gateway.flush_logs()

    report = _build_report(scenario, mode, gateway, gcs, fcs, steps, positions)
    report.duration_s = time.monotonic() - started
    if write_report:
        await save_json(os.path.join(log_dir, "report.json"), report.model_dump(mode="json"))
        await save_text(os.path.join(log_dir, "report.txt"), report.summary() + "\n")
    logger.info("Scenario %s (%s) finished: %s", scenario.name, mode, "passed" if report.passed else "failed")
    return report


async def _wait_for(predicate, timeout: float, message: str) -> None:
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise ScenarioTimeout(message)
        await asyncio.sleep(0.01)


def _build_report(scenario, mode, gateway, gcs, fcs, steps, positions) -> RunReport:
    verdicts = {r["index"]: r for r in gateway.logs.verdict_records() if "index" in r}
    rejected_positions = {i for i, r in verdicts.items() if r["decision"] == Decision.REJECT.value}
    sent_frames = [frame for frame, _ in gcs.sent]
    received_frames = [frame for frame, _ in fcs.received]
    expected_frames = [f for i, f in enumerate(sent_frames) if i not in rejected_positions]

    report = RunReport(
        scenario=scenario.name,
        mode=mode,
        attack=scenario.attack,
        sent=len(sent_frames),
        forwarded=len(received_frames),
        rejected=len(rejected_positions),
        downlink_received=len(gcs.received),
        fifo_ok=received_frames == expected_frames,
    )
    report.dropped = report.sent - report.forwarded - report.rejected
    if report.dropped:
        report.failures.append(f"{report.dropped} frames lost between GCS and FCS")
    if not report.fifo_ok:
        report.failures.append("FCS did not receive the accepted frames in send order")

    report.latency_samples_us = _latencies(gcs.sent, fcs.received)
    if report.latency_samples_us:
        report.latency = latency_stats(report.latency_samples_us)

    for index, (step, position) in enumerate(zip(steps, positions)):
        record = verdicts.get(position, {})
        report.outcomes.append(
            CommandOutcome(
                index=index,
                position=position,
                message=step.msg.NAME,
                decision=record.get("decision"),
                rule_name=record.get("rule_name"),
                reason=record.get("reason"),
            )
        )

    if mode != "passthrough":
        audit = audit_non_bypass(gateway.logs.verdicts.read(), gateway.logs.forwarded.read())
        report.audit_ok = audit.ok
        if not audit.ok:
            report.failures.append(f"non-bypass audit failed: {audit.model_dump()}")
        report.sessions = {name: session.status for name, session in gateway.monitor.sessions.items()}

    expected_rejects = [e.index for e in scenario.expected if e.decision == Decision.REJECT]
    if scenario.attack:
        report.attack_detected = bool(expected_rejects) and all(
            report.outcomes[i].decision == Decision.REJECT for i in expected_rejects
        )
    if mode == "gateway+spec":
        _check_expectations(scenario, report)
    return report


def _check_expectations(scenario: Scenario, report: RunReport) -> None:
    for expectation in scenario.expected:
        outcome = report.outcomes[expectation.index]
        if outcome.decision != expectation.decision:
            report.failures.append(
                f"message #{expectation.index} ({outcome.message}): expected {expectation.decision.value}, "
                f"got {outcome.decision.value if outcome.decision else 'no verdict'}"
            )
            continue
        if expectation.rule_name is not None and outcome.rule_name != expectation.rule_name:
            report.failures.append(
                f"message #{expectation.index}: expected rule {expectation.rule_name}, got {outcome.rule_name}"
            )
        if expectation.reason is not None and outcome.reason != expectation.reason:
            report.failures.append(
                f"message #{expectation.index}: expected reason {expectation.reason!r}, got {outcome.reason!r}"
            )
    if scenario.max_rejects is not None and report.rejected > scenario.max_rejects:
        report.failures.append(f"{report.rejected} rejections, at most {scenario.max_rejects} allowed")
    for expectation in scenario.expected_sessions:
        status = report.sessions.get(expectation.iteration)
        if status != expectation.status:
            report.failures.append(
                f"session {expectation.iteration}: expected {expectation.status.value}, got {status.value if status else 'none'}"
            )


class MatrixResult(BaseModel):
    reports: List[RunReport] = Field(default_factory=list)

    def latency_rows(self) -> List[dict]:
        return [
            {
                "scenario": r.scenario,
                "mode": r.mode,
                "messages": r.sent,
                "latency_ms": str(r.latency) if r.latency else "n/a",
                "median_ms": round(r.latency.median_ms, 3) if r.latency else None,
            }
            for r in self.reports
        ]

    def detection_rows(self) -> List[dict]:
        return [
            {"scenario": r.scenario, "mode": r.mode, "detected": bool(r.attack_detected)}
            for r in self.reports
            if r.attack
        ]

    def render(self) -> str:
        return "\n\n".join(
            [
                "Latency (mean ± 95% CI, ms)",
                render_table(latency_table(self.latency_rows())),
                "Attack detection",
                render_table(detection_table(self.detection_rows())),
            ]
        )

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


async def run_matrix(
    scenarios: Sequence[Scenario],
    config: Optional[GatewayConfig] = None,
    modes: Sequence[str] = GATEWAY_MODES,
    spec: Optional[ProtocolSpec] = None,
) -> MatrixResult:
    """Every scenario under every mode; results feed the latency and detection tables."""
    config = config or GatewayConfig()
    if spec is None and "gateway+spec" in modes:
        spec = _default_spec(config)
    result = MatrixResult()
    runs = [(s, m) for s in scenarios for m in modes]
    for scenario, mode in tqdm(runs, desc="Scenario matrix", unit="run"):
        result.reports.append(await run_scenario(scenario, config, spec, mode))
    await save_text(os.path.join(config.log_dir, "matrix.txt"), result.render() + "\n")
    await save_json(os.path.join(config.log_dir, "matrix.json"), result.model_dump(mode="json"))
    return result
