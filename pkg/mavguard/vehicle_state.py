import logging
from typing import Dict, Optional

from pydantic import BaseModel, Field

from mavguard.dsl import ProtocolSpec
from mavguard.expressions import EvalError, Value
from mavguard.messages import (
    MAV_AUTOPILOT_INVALID,
    MAV_MODE_FLAG_SAFETY_ARMED,
    MAV_TYPE_GCS,
    GlobalPositionInt,
    Heartbeat,
    MavMessage,
    ParamSet,
)
from mavguard.utils import get_flight_modes, mode_name

logger = logging.getLogger("mavguard")


class ParamEntry(BaseModel):
    value: float = Field(..., description="Current mirrored value.")
    default: float = Field(..., description="Value before any accepted PARAM_SET.")
    min: Optional[float] = Field(None, description="Static lower bound, if declared.")
    max: Optional[float] = Field(None, description="Static upper bound, if declared.")
    declared: bool = Field(True, description="False for parameters the spec does not declare.")

    def in_bounds(self, value: float) -> bool:
        # written so NaN is never in bounds
        if self.min is not None and not value >= self.min:
            return False
        if self.max is not None and not value <= self.max:
            return False
        return True


class VehicleState(BaseModel):
    """Trusted-side mirror of the vehicle, consulted by refinements."""

    params: Dict[str, ParamEntry] = Field(default_factory=dict)
    armed: bool = False
    flight_mode: int = Field(0, description="ArduPilot Copter custom_mode; 0 is STABILIZE.")
    altitude_m: float = Field(0.0, description="Metres above home.")
    climb_rate_mps: float = Field(0.0, description="Metres per second, positive up.")
    last_update: Optional[float] = Field(None, description="Monotonic time of the last telemetry update.")

    def apply_telemetry(self, msg: MavMessage, now: Optional[float] = None) -> "VehicleState":
        """Update from a downlink message; anything but HEARTBEAT and GLOBAL_POSITION_INT is ignored."""
        if isinstance(msg, Heartbeat):
            if msg.type == MAV_TYPE_GCS or msg.autopilot == MAV_AUTOPILOT_INVALID:
                return self
            self.armed = bool(msg.base_mode & MAV_MODE_FLAG_SAFETY_ARMED)
            self.flight_mode = msg.custom_mode
        elif isinstance(msg, GlobalPositionInt):
            self.altitude_m = msg.relative_alt / 1000.0
            self.climb_rate_mps = -msg.vz / 100.0
        else:
            return self
        if now is not None:
            self.last_update = now
        return self

    def apply_accepted_command(self, msg: MavMessage) -> "VehicleState":
        if not isinstance(msg, ParamSet):
            return self
        value = float(msg.param_value)
        entry = self.params.get(msg.param_id)
        if entry is None:
            logger.warning("Mirroring undeclared parameter %s=%s without bounds", msg.param_id, value)
            self.params[msg.param_id] = ParamEntry(value=value, default=value, declared=False)
            return self
        if not entry.declared:
            logger.warning("Mirroring undeclared parameter %s=%s without bounds", msg.param_id, value)
        entry.value = value
        return self

    def lookup(self, name: str) -> Value:
        """Resolve ``state.NAME`` for the expression evaluator."""
        if name == "armed":
            return self.armed
        if name == "flight_mode":
            return float(self.flight_mode)
        if name == "altitude_m":
            return self.altitude_m
        if name == "climb_rate_mps":
            return self.climb_rate_mps
        entry = self.params.get(name)
        if entry is None:
            raise EvalError("unbound name", f"state.{name}")
        return entry.value

    def is_stale(self, now: float, window: Optional[float]) -> bool:
        if window is None:
            return False
        return self.last_update is None or now - self.last_update > window

    @property
    def flight_mode_name(self) -> str:
        return mode_name(self.flight_mode)


def state_init(spec: ProtocolSpec) -> VehicleState:
    params = {
        decl.name: ParamEntry(value=decl.default, default=decl.default, min=decl.min, max=decl.max)
        for decl in spec.state_decls
    }
    return VehicleState(params=params, flight_mode=get_flight_modes()["STABILIZE"])
