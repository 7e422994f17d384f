"""Runtime monitor that decides, message by message, what may reach the FCS.

Checks run in a fixed order: refinement rules, static parameter bounds, then
bounded-iteration sessions. State and session updates are committed only when
every check accepts, so a rejected message leaves the monitor unchanged.
"""
import logging
import time
from enum import Enum
from typing import Callable, Dict, List, Optional, Set

from pydantic import BaseModel, Field

from mavguard.dsl import IterationDecl, ProtocolSpec, Requirement, Rule
from mavguard.expressions import Bindings, EvalError, Value, format_expr, message_fields, uses_telemetry
from mavguard.messages import MavMessage, ParamSet, message_name
from mavguard.utils import get_flight_modes
from mavguard.vehicle_state import VehicleState, state_init

logger = logging.getLogger("mavguard")


class Decision(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


class Verdict(BaseModel):
    decision: Decision = Field(..., description="Accept or reject.")
    rule_name: Optional[str] = Field(None, description="Rule, iteration or check that decided.")
    reason: str = Field(..., description="Human readable reason.")
    timestamp: float = Field(..., description="Monitor clock at decision time.")
    msgid: Optional[int] = Field(None, description="MAVLink message id.")
    message: Optional[str] = Field(None, description="Message name.")

    @property
    def accepted(self) -> bool:
        return self.decision == Decision.ACCEPT

    def to_record(self, index: Optional[int] = None) -> dict:
        record = {"index": index} if index is not None else {}
        record.update(self.model_dump(mode="json"))
        return record


class SessionStatus(str, Enum):
    IDLE = "idle"
    UPLOADING = "uploading"
    COMPLETE = "complete"


class MissionSession(BaseModel):
    """Progress of one bounded iteration (a mission upload for the shipped spec)."""

    iteration: str
    status: SessionStatus = SessionStatus.IDLE
    expected_count: int = 0
    received_seqs: Set[int] = Field(default_factory=set)
    opened_at: Optional[float] = None
    last_activity: Optional[float] = None
    binders: Dict[str, Value] = Field(default_factory=dict)


class _Rejected(Exception):
    def __init__(self, rule_name: Optional[str], reason: str):
        super().__init__(reason)
        self.rule_name = rule_name
        self.reason = reason


class Attestor:
    def __init__(
        self,
        spec: ProtocolSpec,
        clock: Callable[[], float] = time.monotonic,
        default_deny: bool = False,
        stale_after_s: Optional[float] = 5.0,
        session_timeout_s: Optional[float] = 10.0,
    ):
        self.spec = spec
        self.clock = clock
        self.default_deny = default_deny
        self.stale_after_s = stale_after_s
        self.session_timeout_s = session_timeout_s
        self.consts = spec.const_values
        self.modes = get_flight_modes()
        self.state: VehicleState
        self.sessions: Dict[str, MissionSession]
        self.events: List[dict] = []
        self.reset()

    def reset(self) -> None:
        self.state = state_init(self.spec)
        self.sessions = {it.name: MissionSession(iteration=it.name) for it in self.spec.iterations}

    def observe(self, msg: MavMessage) -> None:
        """Feed a downlink (FCS-originated) message into the state mirror."""
        self.state.apply_telemetry(msg, self.clock())

    def expire_sessions(self, now: Optional[float] = None) -> List[MissionSession]:
        if self.session_timeout_s is None:
            return []
        now = self.clock() if now is None else now
        expired = []
        for name, session in self.sessions.items():
            if session.status != SessionStatus.UPLOADING:
                continue
            if now - session.last_activity <= self.session_timeout_s:
                continue
            logger.warning(
                "Session %s timed out with %d of %d items", name, len(session.received_seqs), session.expected_count
            )
            self.events.append(
                {
                    "event": "session_expired",
                    "iteration": name,
                    "timestamp": now,
                    "received": len(session.received_seqs),
                    "expected": session.expected_count,
                }
            )
            expired.append(session)
            self.sessions[name] = MissionSession(iteration=name)
        return expired

    def drain_events(self) -> List[dict]:
        events, self.events = self.events, []
        return events

    def attest(self, msg: MavMessage) -> Verdict:
        now = self.clock()
        self.expire_sessions(now)
        commits: List[Callable[[], None]] = []
        decided_by: List[str] = []
        try:
            self._check_rules(msg, now, decided_by)
            self._check_bounds(msg, decided_by)
            self._check_iterations(msg, now, decided_by, commits)
            if not decided_by and self.default_deny:
                raise _Rejected("default-deny", "no rule matches")
        except _Rejected as e:
            logger.warning("Rejected %s: %s (%s)", msg.NAME, e.reason, e.rule_name)
            return Verdict(
                decision=Decision.REJECT,
                rule_name=e.rule_name,
                reason=e.reason,
                timestamp=now,
                msgid=msg.MSG_ID,
                message=msg.NAME,
            )
        for commit in commits:
            commit()
        self.state.apply_accepted_command(msg)
        return Verdict(
            decision=Decision.ACCEPT,
            rule_name=",".join(decided_by) or None,
            reason="accepted" if decided_by else "no rule matches",
            timestamp=now,
            msgid=msg.MSG_ID,
            message=msg.NAME,
        )

    def attest_unknown(self, msgid: int) -> Verdict:
        """Verdict for a frame whose msgid the codec does not know."""
        now = self.clock()
        if self.default_deny:
            decision, rule_name, reason = Decision.REJECT, "default-deny", "unknown message"
        else:
            decision, rule_name, reason = Decision.ACCEPT, None, "unknown message forwarded opaquely"
        return Verdict(
            decision=decision,
            rule_name=rule_name,
            reason=reason,
            timestamp=now,
            msgid=msgid,
            message=message_name(msgid),
        )

    def _bindings(self, msg: MavMessage, binders: Dict[str, Value], iteration=None) -> Bindings:
        return Bindings(
            fields=message_fields(msg),
            binders=binders,
            consts=self.consts,
            state=self.state.lookup,
            iteration=iteration,
            modes=self.modes,
        )

    def _require(self, name: str, requirements, env: Bindings) -> None:
        for req in requirements:
            if _holds(name, req, env) is not True:
                raise _Rejected(name, req.reason or f"requirement failed: {format_expr(req.expr)}")

    def _check_rules(self, msg: MavMessage, now: float, decided_by: List[str]) -> None:
        for rule in self.spec.rules_for(msg.NAME):
            binders = rule.trigger.match(msg)
            if binders is None:
                continue
            decided_by.append(rule.name)
            stale = rule.uses_telemetry and self.state.is_stale(now, self.stale_after_s)
            env = self._bindings(msg, binders)
            branch = _select_branch(rule, env, stale)
            if stale and any(r.uses_telemetry for r in branch.requirements):
                raise _Rejected(rule.name, "stale state")
            self._require(rule.name, branch.requirements, env)

    def _check_bounds(self, msg: MavMessage, decided_by: List[str]) -> None:
        if not isinstance(msg, ParamSet):
            return
        entry = self.state.params.get(msg.param_id)
        if entry is None or not entry.declared:
            return
        decided_by.append("bounds")
        if not entry.in_bounds(msg.param_value):
            raise _Rejected("bounds", f"{msg.param_id}={msg.param_value} outside [{entry.min}, {entry.max}]")

    def _check_iterations(
        self, msg: MavMessage, now: float, decided_by: List[str], commits: List[Callable[[], None]]
    ) -> None:
        for it in self.spec.iterations:
            binders = it.open_pattern.match(msg)
            if binders is not None:
                decided_by.append(it.name)
                self._open_session(it, msg, binders, now, commits)
            binders = it.item_pattern.match(msg)
            if binders is not None:
                decided_by.append(it.name)
                self._accept_item(it, msg, binders, now, commits)

    def _open_session(self, it: IterationDecl, msg, binders, now, commits) -> None:
        if self.sessions[it.name].status == SessionStatus.UPLOADING:
            raise _Rejected(it.name, "session already open")
        count = int(getattr(msg, it.count_field))
        session = MissionSession(
            iteration=it.name,
            status=SessionStatus.COMPLETE if count == 0 else SessionStatus.UPLOADING,
            expected_count=count,
            opened_at=now,
            last_activity=now,
            binders=binders,
        )

        def commit():
            logger.info("Session %s opened for %d items", it.name, count)
            self.sessions[it.name] = session

        commits.append(commit)

    def _accept_item(self, it: IterationDecl, msg, binders, now, commits) -> None:
        session = self.sessions[it.name]
        if session.status != SessionStatus.UPLOADING:
            raise _Rejected(it.name, "no matching session")
        index = int(getattr(msg, it.index_field))
        if index >= session.expected_count:
            raise _Rejected(it.name, f"item {index} outside 0..{session.expected_count - 1}")
        if index in session.received_seqs:
            raise _Rejected(it.name, f"item {index} already received")
        iteration = {
            "index": float(index),
            "count": float(session.expected_count),
            "received": float(len(session.received_seqs)),
        }
        env = self._bindings(msg, {**session.binders, **binders}, iteration)
        self._require(it.name, it.item_requirements, env)

        def commit():
            session.received_seqs.add(index)
            session.last_activity = now
            if len(session.received_seqs) == session.expected_count:
                session.status = SessionStatus.COMPLETE
                logger.info("Session %s complete", it.name)

        commits.append(commit)


def _holds(rule_name: str, req: Requirement, env: Bindings) -> Value:
    try:
        return req.expr.evaluate(env)
    except EvalError as e:
        raise _Rejected(rule_name, f"evaluation error: {e.kind}")


def _select_branch(rule: Rule, env: Bindings, stale: bool = False):
    """First branch whose guard holds; rejects with "no branch" if none does.

    A guard that reads telemetry is not evaluated against stale state.
    """
    for branch in rule.branches:
        if branch.guard is None:
            return branch
        if stale and uses_telemetry(branch.guard):
            raise _Rejected(rule.name, "stale state")
        try:
            taken = branch.guard.evaluate(env)
        except EvalError as e:
            raise _Rejected(rule.name, f"evaluation error: {e.kind}")
        if not isinstance(taken, bool):
            raise _Rejected(rule.name, "evaluation error: type mismatch")
        if taken:
            return branch
    raise _Rejected(rule.name, "no branch")
