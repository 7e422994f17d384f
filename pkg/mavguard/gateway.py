"""The two partition proxies and the gateway that wires them together.

net-ingress (untrusted) owns the GCS-facing socket, the uplink producer and
the downlink consumer. fcs-ingress (trusted) owns the FCS-facing socket, the
uplink consumer, the downlink producer and the attestor. The only state the
two threads share is the pair of rings and the stop event; each partition
counts into its own :class:`Counters`, summed by :attr:`Gateway.counters`.
"""
import asyncio
import logging
import os
import socket
import threading
import time
from collections import deque
from typing import Callable, Deque, Iterable, List, Optional, Tuple

from pydantic import BaseModel, Field

from mavguard.attestor import Attestor, Decision, Verdict
from mavguard.channel import Backoff, Consumer, Producer, PushResult, ring_create
from mavguard.codec import FrameError, UnknownMsgId, decode_frame_bytes, frame_encode, scan_frames
from mavguard.config import GATEWAY_MODES, GatewayConfig, format_address
from mavguard.dsl import EMPTY_SPEC, ProtocolSpec
from mavguard.messages import (
    MAV_RESULT_DENIED,
    MAV_SEVERITY_WARNING,
    CommandAck,
    CommandLong,
    MavMessage,
    StatusText,
)
from mavguard.utils import JsonlWriter, read_jsonl, save_json

logger = logging.getLogger("mavguard")

RECV_BUFFER_BYTES = 4 * 1024 * 1024
MAX_DATAGRAM = 65535
# frames moved per loop iteration before the loop looks at its other input
BATCH = 64


class Counters(BaseModel):
    datagrams_in: int = 0
    malformed_datagrams: int = 0
    junk_bytes: int = 0
    bad_frames: int = 0
    uplink_frames: int = 0
    ring_full_retries: int = 0
    accepted: int = 0
    rejected: int = 0
    forwarded: int = 0
    feedback_sent: int = 0
    integrity_alarms: int = 0
    downlink_frames: int = 0
    downlink_sent: int = 0
    downlink_dropped: int = 0
    socket_errors: int = 0

    def merged(self, other: "Counters") -> "Counters":
        return Counters(**{name: getattr(self, name) + getattr(other, name) for name in type(self).model_fields})


class GatewayLogs:
    """In-memory log buffers, flushed to JSON Lines files by :meth:`flush`."""

    def __init__(self, log_dir: str, record_capture: bool = True):
        self.log_dir = log_dir
        self.verdicts = JsonlWriter(os.path.join(log_dir, "verdicts.jsonl"))
        self.forwarded = JsonlWriter(os.path.join(log_dir, "forwarded.jsonl"))
        self.capture = JsonlWriter(os.path.join(log_dir, "capture.jsonl")) if record_capture else None
        self.counters_path = os.path.join(log_dir, "counters.json")

    def writers(self) -> List[JsonlWriter]:
        return [w for w in (self.verdicts, self.forwarded, self.capture) if w is not None]

    def clear(self) -> None:
        """Remove log files left by an earlier run in the same directory."""
        for writer in self.writers():
            if os.path.exists(writer.path):
                os.remove(writer.path)

    async def flush(self, counters: Counters) -> None:
        for writer in self.writers():
            await writer.flush()
        await save_json(self.counters_path, counters.model_dump())

    def verdict_records(self) -> List[dict]:
        """Flushed verdict records, without session events."""
        return [r for r in self.verdicts.read() if "decision" in r]


def open_udp_socket(address: Tuple[str, int]) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, RECV_BUFFER_BYTES)
    except OSError:
        logger.debug("Could not enlarge the receive buffer")
    sock.bind(address)
    sock.setblocking(False)
    return sock


def _recv(sock: socket.socket, counters: Counters):
    try:
        return sock.recvfrom(MAX_DATAGRAM)
    except BlockingIOError:
        return None
    except OSError as e:
        # e.g. ICMP port unreachable reported on the next recv
        counters.socket_errors += 1
        logger.debug("recvfrom failed: %s", e)
        return None


def _send(sock: socket.socket, data: bytes, address, counters: Counters) -> bool:
    try:
        sock.sendto(data, address)
        return True
    except OSError as e:
        counters.socket_errors += 1
        logger.warning("sendto %s failed: %s", address, e)
        return False


def _drain_pending(pending: Deque[bytes], producer: Producer, counters: Counters) -> bool:
    moved = False
    while pending:
        if producer.push(pending[0]) is PushResult.FULL:
            counters.ring_full_retries += 1
            break
        pending.popleft()
        moved = True
    return moved


def run_net_ingress(
    config: GatewayConfig,
    uplink: Producer,
    downlink: Consumer,
    stop: threading.Event,
    sock: socket.socket,
    counters: Counters,
) -> None:
    """Untrusted partition: GCS datagrams to whole frames on the uplink ring and back.

    Frames are checked for framing only; payloads are never interpreted here.
    """
    backoff = Backoff(config.backoff_spins, config.backoff_sleep_us)
    gcs_address = None
    pending: Deque[bytes] = deque()
    logger.info("net-ingress listening on %s", format_address(sock.getsockname()))
    while not stop.is_set():
        busy = _drain_pending(pending, uplink, counters)
        # new datagrams wait until the backlog is queued, keeping uplink order
        received = _recv(sock, counters) if not pending else None
        if received is not None:
            busy = True
            data, gcs_address = received
            counters.datagrams_in += 1
            scan = scan_frames(data)
            if scan.malformed:
                counters.malformed_datagrams += 1
                counters.junk_bytes += scan.junk_bytes
                counters.bad_frames += scan.bad_frames
                logger.warning("Malformed datagram from %s: %d junk bytes", gcs_address, scan.junk_bytes)
            for frame in scan.frames:
                counters.uplink_frames += 1
                if pending or uplink.push(frame) is PushResult.FULL:
                    pending.append(frame)
        for _ in range(BATCH):
            frame = downlink.pop()
            if frame is None:
                break
            busy = True
            if gcs_address is None:
                counters.downlink_dropped += 1
            elif _send(sock, frame, gcs_address, counters):
                counters.downlink_sent += 1
        if busy:
            backoff.reset()
        else:
            backoff.wait()
    logger.info("net-ingress stopped")


def rejection_feedback(
    msg: Optional[MavMessage], verdict: Verdict, config: GatewayConfig, sysid: int, compid: int
) -> List[MavMessage]:
    """Messages sent back to the GCS for a rejected uplink message."""
    replies: List[MavMessage] = []
    if isinstance(msg, CommandLong) and config.ack_rejected_commands:
        replies.append(
            CommandAck(command=msg.command, result=MAV_RESULT_DENIED, target_system=sysid, target_component=compid)
        )
    if config.statustext_on_reject:
        name = msg.NAME if msg is not None else verdict.message
        text = f"Rejected {name}: {verdict.reason}".encode("latin-1", "replace")[:50].decode("latin-1")
        replies.append(StatusText(severity=MAV_SEVERITY_WARNING, text=text.replace("\x00", "")))
    return replies


class FcsIngress:
    """Trusted partition: uplink ring, attestor and FCS socket."""

    def __init__(
        self,
        config: GatewayConfig,
        uplink: Consumer,
        downlink: Producer,
        monitor: Attestor,
        sock: socket.socket,
        counters: Counters,
        logs: GatewayLogs,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.uplink = uplink
        self.downlink = downlink
        self.monitor = monitor
        self.sock = sock
        self.counters = counters
        self.logs = logs
        self.clock = clock
        self.fcs_address = config.address("fcs_target")
        self.pending: Deque[bytes] = deque()
        self.uplink_index = 0
        self.feedback_seq = 0
        self.started = clock()

    def _capture(self, direction: str, frame: bytes) -> None:
        if self.logs.capture is not None:
            self.logs.capture.append({"t": self.clock() - self.started, "dir": direction, "frame": frame.hex()})

    def handle_uplink(self, frame: bytes) -> Verdict:
        index = self.uplink_index
        self.uplink_index += 1
        self._capture("up", frame)
        msg = None
        sysid = compid = 0
        try:
            parsed, msg = decode_frame_bytes(frame)
            sysid, compid = parsed.sysid, parsed.compid
        except UnknownMsgId as e:
            verdict = self.monitor.attest_unknown(e.msgid)
        except FrameError as e:
            self.counters.integrity_alarms += 1
            logger.error("Integrity alarm: frame from the uplink ring failed to decode: %s", e)
            verdict = Verdict(decision=Decision.REJECT, rule_name="integrity", reason=str(e), timestamp=self.clock())
        else:
            verdict = self.monitor.attest(msg)
        for event in self.monitor.drain_events():
            self.logs.verdicts.append(event)
        self.logs.verdicts.append(verdict.to_record(index))
        if verdict.accepted:
            self.counters.accepted += 1
            if _send(self.sock, frame, self.fcs_address, self.counters):
                self.counters.forwarded += 1
                self.logs.forwarded.append(
                    {"index": index, "msgid": verdict.msgid, "seq": frame[4], "checksum": frame[-2:].hex()}
                )
        else:
            self.counters.rejected += 1
            for reply in rejection_feedback(msg, verdict, self.config, sysid, compid):
                self.queue_downlink(
                    frame_encode(reply, self.feedback_seq, self.config.feedback_sysid, self.config.feedback_compid)
                )
                self.feedback_seq = (self.feedback_seq + 1) & 0xFF
                self.counters.feedback_sent += 1
        return verdict

    def handle_downlink(self, data: bytes) -> None:
        scan = scan_frames(data)
        if scan.malformed:
            self.counters.junk_bytes += scan.junk_bytes
            logger.warning("Malformed datagram from the FCS: %d junk bytes", scan.junk_bytes)
        for frame in scan.frames:
            self.counters.downlink_frames += 1
            self._capture("down", frame)
            try:
                _, msg = decode_frame_bytes(frame)
            except FrameError:
                pass
            else:
                self.monitor.observe(msg)
            self.queue_downlink(frame)

    def queue_downlink(self, frame: bytes) -> None:
        if self.pending or self.downlink.push(frame) is PushResult.FULL:
            self.pending.append(frame)

    def poll(self) -> bool:
        """One loop iteration; True if any work was done."""
        busy = _drain_pending(self.pending, self.downlink, self.counters)
        for _ in range(BATCH):
            frame = self.uplink.pop()
            if frame is None:
                break
            busy = True
            self.handle_uplink(frame)
        received = _recv(self.sock, self.counters)
        if received is not None:
            busy = True
            self.handle_downlink(received[0])
        return busy


def run_fcs_ingress(
    config: GatewayConfig,
    uplink: Consumer,
    downlink: Producer,
    monitor: Attestor,
    stop: threading.Event,
    sock: socket.socket,
    counters: Counters,
    logs: GatewayLogs,
) -> None:
    ingress = FcsIngress(config, uplink, downlink, monitor, sock, counters, logs)
    backoff = Backoff(config.backoff_spins, config.backoff_sleep_us)
    logger.info("fcs-ingress forwarding to %s", config.fcs_target)
    while not stop.is_set():
        if ingress.poll():
            backoff.reset()
        else:
            backoff.wait()
    logger.info("fcs-ingress stopped")


def run_passthrough(
    config: GatewayConfig,
    stop: threading.Event,
    gcs_sock: socket.socket,
    fcs_sock: socket.socket,
    counters: Counters,
) -> None:
    """Baseline relay: datagrams copied between GCS and FCS with no rings and no attestor."""
    backoff = Backoff(config.backoff_spins, config.backoff_sleep_us)
    fcs_address = config.address("fcs_target")
    gcs_address = None
    while not stop.is_set():
        busy = False
        received = _recv(gcs_sock, counters)
        if received is not None:
            busy = True
            data, gcs_address = received
            counters.datagrams_in += 1
            if _send(fcs_sock, data, fcs_address, counters):
                counters.forwarded += 1
        received = _recv(fcs_sock, counters)
        if received is not None:
            busy = True
            counters.downlink_frames += 1
            if gcs_address is not None and _send(gcs_sock, received[0], gcs_address, counters):
                counters.downlink_sent += 1
        if busy:
            backoff.reset()
        else:
            backoff.wait()


class Gateway:
    """Both partitions of one gateway, each on its own thread.

    ``mode`` is ``"passthrough"`` (direct relay), ``"gateway"`` (rings and an
    attestor with an empty spec) or ``"gateway+spec"``.
    """

    def __init__(self, config: GatewayConfig, spec: Optional[ProtocolSpec] = None, mode: str = "gateway+spec"):
        if mode not in GATEWAY_MODES:
            raise ValueError(f"unknown gateway mode {mode!r}, expected one of {GATEWAY_MODES}")
        self.config = config
        self.mode = mode
        self.spec = spec if (spec is not None and mode == "gateway+spec") else EMPTY_SPEC
        self.net_counters = Counters()
        self.fcs_counters = Counters()
        self.logs = GatewayLogs(config.log_dir, config.record_capture and mode != "passthrough")
        self.monitor = Attestor(
            self.spec,
            default_deny=config.default_deny and mode == "gateway+spec",
            stale_after_s=config.stale_after_s,
            session_timeout_s=config.session_timeout_s,
        )
        self.stop_event = threading.Event()
        self.threads: List[threading.Thread] = []
        self.gcs_sock: Optional[socket.socket] = None
        self.fcs_sock: Optional[socket.socket] = None

    @property
    def counters(self) -> Counters:
        return self.net_counters.merged(self.fcs_counters)

    @property
    def gcs_address(self) -> Tuple[str, int]:
        return self.gcs_sock.getsockname()

    @property
    def fcs_side_address(self) -> Tuple[str, int]:
        return self.fcs_sock.getsockname()

    def start(self) -> "Gateway":
        self.gcs_sock = open_udp_socket(self.config.address("gcs_listen"))
        self.fcs_sock = open_udp_socket(self.config.address("fcs_listen"))
        if self.mode == "passthrough":
            targets = [
                ("passthrough", run_passthrough, (self.config, self.stop_event, self.gcs_sock, self.fcs_sock, self.net_counters))
            ]
        else:
            uplink_producer, uplink_consumer = ring_create(self.config.ring_capacity, self.config.slot_size)
            downlink_producer, downlink_consumer = ring_create(self.config.ring_capacity, self.config.slot_size)
            targets = [
                (
                    "net-ingress",
                    run_net_ingress,
                    (self.config, uplink_producer, downlink_consumer, self.stop_event, self.gcs_sock, self.net_counters),
                ),
                (
                    "fcs-ingress",
                    run_fcs_ingress,
                    (
                        self.config,
                        uplink_consumer,
                        downlink_producer,
                        self.monitor,
                        self.stop_event,
                        self.fcs_sock,
                        self.fcs_counters,
                        self.logs,
                    ),
                ),
            ]
        for name, target, args in targets:
            thread = threading.Thread(target=target, args=args, name=name, daemon=True)
            thread.start()
            self.threads.append(thread)
        logger.info("Gateway started in %s mode on %s", self.mode, format_address(self.gcs_address))
        return self

    def stop(self, timeout: float = 5.0) -> None:
        self.stop_event.set()
        for thread in self.threads:
            thread.join(timeout)
        for sock in (self.gcs_sock, self.fcs_sock):
            if sock is not None:
                sock.close()
        logger.info("Gateway stopped: %s", self.counters.model_dump())

    async def flush_logs(self) -> None:
        await self.logs.flush(self.counters)

    async def serve(self) -> None:
        """Run until cancelled, flushing logs periodically."""
        self.start()
        try:
            while True:
                await asyncio.sleep(self.config.flush_interval_s)
                await self.flush_logs()
        finally:
            self.stop()
            await self.flush_logs()


class AuditResult(BaseModel):
    forwarded_without_accept: List[int] = Field(default_factory=list)
    accepted_not_forwarded: List[int] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.forwarded_without_accept and not self.accepted_not_forwarded


def audit_non_bypass(verdicts: Iterable[dict], forwarded: Iterable[dict]) -> AuditResult:
    """Compare the forwarded-frame log with the Accept verdicts, by uplink index."""
    accepted = {v["index"] for v in verdicts if v.get("decision") == Decision.ACCEPT.value and "index" in v}
    sent = {f["index"] for f in forwarded}
    return AuditResult(
        forwarded_without_accept=sorted(sent - accepted),
        accepted_not_forwarded=sorted(accepted - sent),
    )


def replay_capture(
    records: Iterable[dict], spec: ProtocolSpec, config: Optional[GatewayConfig] = None
) -> List[Verdict]:
    """Run a capture through a fresh attestor, using the recorded times as its clock."""
    config = config or GatewayConfig()
    now = [0.0]
    monitor = Attestor(
        spec,
        clock=lambda: now[0],
        default_deny=config.default_deny,
        stale_after_s=config.stale_after_s,
        session_timeout_s=config.session_timeout_s,
    )
    verdicts = []
    for record in records:
        now[0] = float(record["t"])
        frame = bytes.fromhex(record["frame"])
        if record["dir"] == "down":
            try:
                _, msg = decode_frame_bytes(frame)
            except FrameError:
                continue
            monitor.observe(msg)
            continue
        try:
            _, msg = decode_frame_bytes(frame)
        except UnknownMsgId as e:
            verdicts.append(monitor.attest_unknown(e.msgid))
        except FrameError as e:
            verdicts.append(Verdict(decision=Decision.REJECT, rule_name="integrity", reason=str(e), timestamp=now[0]))
        else:
            verdicts.append(monitor.attest(msg))
    return verdicts


def load_capture(path: str) -> List[dict]:
    return list(read_jsonl(path))
