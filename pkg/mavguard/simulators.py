"""Scripted ground station and flight controller used by the scenario harness.

Both simulators run on their own thread and talk plain MAVLink v2 over UDP,
so either can be swapped for a real GCS or SITL autopilot. Send and receive
instants are taken with ``time.perf_counter_ns`` inside the simulators.
"""
import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from mavguard.codec import FrameError, decode_frame_bytes, frame_encode, scan_frames
from mavguard.messages import (
    MAV_MODE_FLAG_CUSTOM_MODE_ENABLED,
    MAV_MODE_FLAG_SAFETY_ARMED,
    MAV_CMD_COMPONENT_ARM_DISARM,
    MAV_CMD_DO_PARACHUTE,
    MAV_CMD_DO_SET_MODE,
    MAV_CMD_MISSION_START,
    MAV_CMD_NAV_TAKEOFF,
    MAV_RESULT_ACCEPTED,
    MAV_RESULT_UNSUPPORTED,
    CommandAck,
    CommandLong,
    GlobalPositionInt,
    Heartbeat,
    MavMessage,
    MissionAck,
    MissionCount,
    MissionItemInt,
    ParamSet,
    ParamValue,
)
from mavguard.utils import get_flight_modes

logger = logging.getLogger("mavguard")

MAV_TYPE_QUADROTOR = 2
MAV_AUTOPILOT_ARDUPILOTMEGA = 3
MAV_STATE_ACTIVE = 4
HOME_LAT = -35.3632621
HOME_LON = 149.1652374
# commands the simulated autopilot acknowledges as accepted
SUPPORTED_COMMANDS = frozenset(
    {
        MAV_CMD_NAV_TAKEOFF,
        MAV_CMD_DO_SET_MODE,
        MAV_CMD_DO_PARACHUTE,
        MAV_CMD_MISSION_START,
        MAV_CMD_COMPONENT_ARM_DISARM,
    }
)


@dataclass(frozen=True)
class TimedMessage:
    """One uplink message at ``at_s`` seconds of scenario time."""

    at_s: float
    msg: MavMessage
    sysid: int = 255
    compid: int = 190


@dataclass(frozen=True)
class Phase:
    """Telemetry the FCS reports for ``duration_s`` seconds of scenario time."""

    duration_s: float
    armed: bool
    mode: str
    altitude_m: float
    climb_rate_mps: float


def _udp_socket(bind: Tuple[str, int]) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 1024 * 1024)
    sock.bind(bind)
    return sock


def _sleep_until(deadline_ns: int) -> None:
    while True:
        remaining = deadline_ns - time.perf_counter_ns()
        if remaining <= 0:
            return
        # coarse sleep, then spin the last half millisecond
        if remaining > 1_000_000:
            time.sleep((remaining - 500_000) / 1e9)
        else:
            time.sleep(0)


class GcsSimulator:
    """Plays a timeline of uplink messages at the gateway, one frame per datagram."""

    def __init__(
        self,
        gateway: Tuple[str, int],
        timeline: Sequence[TimedMessage],
        speedup: float = 1.0,
        bind: Tuple[str, int] = ("127.0.0.1", 0),
    ):
        self.gateway = gateway
        self.timeline = list(timeline)
        self.speedup = speedup
        self.sock = _udp_socket(bind)
        self.sock.settimeout(0.05)
        self.sent: List[Tuple[bytes, int]] = []
        self.received: List[MavMessage] = []
        self.done = threading.Event()
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()

    def start(self) -> "GcsSimulator":
        for name, target in (("gcs-send", self._send_loop), ("gcs-recv", self._recv_loop)):
            thread = threading.Thread(target=target, name=name, daemon=True)
            thread.start()
            self._threads.append(thread)
        return self

    def _send_loop(self) -> None:
        start_ns = time.perf_counter_ns()
        seq = 0
        for item in self.timeline:
            if self._stop.is_set():
                break
            _sleep_until(start_ns + int(item.at_s / self.speedup * 1e9))
            frame = frame_encode(item.msg, seq, item.sysid, item.compid)
            seq = (seq + 1) & 0xFF
            self.sent.append((frame, time.perf_counter_ns()))
            self.sock.sendto(frame, self.gateway)
        logger.info("GCS simulator sent %d messages", len(self.sent))
        self.done.set()

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                continue
            for frame in scan_frames(data).frames:
                try:
                    _, msg = decode_frame_bytes(frame)
                except FrameError:
                    continue
                self.received.append(msg)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(2.0)
        self.sock.close()


class FcsSimulator:
    """Scripted autopilot: phased telemetry plus automatic acknowledgements.

    Telemetry (HEARTBEAT and GLOBAL_POSITION_INT) goes to ``peer`` at
    ``telemetry_hz`` wall-clock rate; acknowledgements go back to whoever sent
    the command.
    """

    def __init__(
        self,
        phases: Sequence[Phase],
        telemetry_hz: float = 10.0,
        auto_ack: bool = True,
        speedup: float = 1.0,
        bind: Tuple[str, int] = ("127.0.0.1", 0),
    ):
        self.phases = list(phases)
        self.telemetry_period = 1.0 / telemetry_hz
        self.auto_ack = auto_ack
        self.speedup = speedup
        self.sock = _udp_socket(bind)
        self.peer: Optional[Tuple[str, int]] = None
        self.received: List[Tuple[bytes, int]] = []
        self.telemetry_sent = 0
        self.acks_sent = 0
        self.mission_count: Optional[int] = None
        self.modes = get_flight_modes()
        self._seq = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._started = 0.0

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()

    def start(self, peer: Tuple[str, int]) -> "FcsSimulator":
        self.peer = peer
        self._started = time.monotonic()
        self._thread = threading.Thread(target=self._run, name="fcs-sim", daemon=True)
        self._thread.start()
        return self

    def phase_at(self, scenario_s: float) -> Tuple[Phase, float]:
        """The active phase and the time already spent in it."""
        elapsed = scenario_s
        for phase in self.phases[:-1]:
            if elapsed < phase.duration_s:
                return phase, elapsed
            elapsed -= phase.duration_s
        return self.phases[-1], elapsed

    def telemetry(self, scenario_s: float) -> List[MavMessage]:
        phase, into = self.phase_at(scenario_s)
        base_mode = MAV_MODE_FLAG_CUSTOM_MODE_ENABLED | (MAV_MODE_FLAG_SAFETY_ARMED if phase.armed else 0)
        altitude = phase.altitude_m + phase.climb_rate_mps * into
        return [
            Heartbeat(
                custom_mode=self.modes[phase.mode],
                type=MAV_TYPE_QUADROTOR,
                autopilot=MAV_AUTOPILOT_ARDUPILOTMEGA,
                base_mode=base_mode,
                system_status=MAV_STATE_ACTIVE,
            ),
            GlobalPositionInt(
                time_boot_ms=int(scenario_s * 1000) & 0xFFFFFFFF,
                lat=int(HOME_LAT * 1e7),
                lon=int(HOME_LON * 1e7),
                alt=int((584.0 + altitude) * 1000),
                relative_alt=int(altitude * 1000),
                vz=int(round(-phase.climb_rate_mps * 100)),
            ),
        ]

    def acknowledge(self, msg: MavMessage) -> List[MavMessage]:
        if isinstance(msg, CommandLong):
            result = MAV_RESULT_ACCEPTED if msg.command in SUPPORTED_COMMANDS else MAV_RESULT_UNSUPPORTED
            return [CommandAck(command=msg.command, result=result, target_system=255, target_component=190)]
        if isinstance(msg, ParamSet):
            return [ParamValue(param_id=msg.param_id, param_value=msg.param_value, param_type=msg.param_type)]
        if isinstance(msg, MissionCount):
            self.mission_count = msg.count
            if msg.count == 0:
                return [MissionAck(target_system=255, target_component=190, mission_type=msg.mission_type)]
        if isinstance(msg, MissionItemInt) and self.mission_count is not None and msg.seq == self.mission_count - 1:
            return [MissionAck(target_system=255, target_component=190, mission_type=msg.mission_type)]
        return []

    def _send(self, msg: MavMessage, address: Tuple[str, int]) -> None:
        frame = frame_encode(msg, self._seq, 1, 1)
        self._seq = (self._seq + 1) & 0xFF
        try:
            self.sock.sendto(frame, address)
        except OSError as e:
            logger.debug("FCS simulator send failed: %s", e)

    def _run(self) -> None:
        next_telemetry = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            if now >= next_telemetry:
                for msg in self.telemetry((now - self._started) * self.speedup):
                    self._send(msg, self.peer)
                self.telemetry_sent += 1
                next_telemetry += self.telemetry_period
            self.sock.settimeout(max(next_telemetry - time.monotonic(), 0.0005))
            try:
                data, sender = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                continue
            received_ns = time.perf_counter_ns()
            for frame in scan_frames(data).frames:
                self.received.append((frame, received_ns))
                if not self.auto_ack:
                    continue
                try:
                    _, msg = decode_frame_bytes(frame)
                except FrameError:
                    continue
                for reply in self.acknowledge(msg):
                    self.acks_sent += 1
                    self._send(reply, sender)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(2.0)
        self.sock.close()
