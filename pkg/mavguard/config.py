import logging
import math
import os
from typing import Dict, Iterable, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, field_validator

from mavguard.utils import DEFAULT_LOG_DIR

logger = logging.getLogger("mavguard")

GATEWAY_MODES = ("passthrough", "gateway", "gateway+spec")


def parse_address(text: str) -> Tuple[str, int]:
    """Split ``host:port``; the port must be in 0..65535 (0 picks a free port)."""
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    try:
        number = int(port)
    except ValueError:
        raise ValueError(f"invalid port in {text!r}") from None
    if not 0 <= number <= 0xFFFF:
        raise ValueError(f"port out of range in {text!r}")
    return host.strip("[]"), number


def format_address(address: Tuple[str, int]) -> str:
    return f"{address[0]}:{address[1]}"


def parse_defines(items: Optional[Iterable[str]]) -> Dict[str, float]:
    """Turn ``["m1=10", "m3=0.5"]`` into ``{"m1": 10.0, "m3": 0.5}``."""
    defines = {}
    for item in items or []:
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or not name.isidentifier():
            raise ValueError(f"expected NAME=NUMBER, got {item!r}")
        try:
            number = float(value)
        except ValueError:
            raise ValueError(f"value of {name} is not a number: {value!r}") from None
        if not math.isfinite(number):
            raise ValueError(f"value of {name} is not finite: {value!r}")
        defines[name] = number
    return defines


class GatewayConfig(BaseModel):
    """Settings of both partitions, their rings and the attestor."""

    gcs_listen: str = Field("127.0.0.1:14550", description="Address net-ingress listens on for the GCS.")
    fcs_listen: str = Field("127.0.0.1:14551", description="Address fcs-ingress sends from and receives FCS traffic on.")
    fcs_target: str = Field("127.0.0.1:14560", description="Address of the FCS endpoint.")
    spec_path: Optional[str] = Field(None, description="Refinement spec file; None runs without a spec.")
    defines: Dict[str, float] = Field(default_factory=dict, description="Overrides for spec constants.")
    ring_capacity: int = Field(1024, description="Slots per ring, a power of two.")
    slot_size: int = Field(300, description="Maximum frame bytes per slot.")
    backoff_spins: int = Field(1000, ge=0, description="Idle polls before sleeping.")
    backoff_sleep_us: float = Field(50, ge=0, description="Sleep per idle poll after spinning, microseconds.")
    stale_after_s: Optional[float] = Field(5.0, description="Telemetry age after which state-reading rules reject.")
    session_timeout_s: Optional[float] = Field(10.0, description="Idle time after which an open session is dropped.")
    climb_tolerance_mps: float = Field(0.0, description="Bound into specs as the constant climb_tolerance.")
    ack_rejected_commands: bool = Field(True, description="Answer rejected COMMAND_LONG with COMMAND_ACK(DENIED).")
    statustext_on_reject: bool = Field(False, description="Send a STATUSTEXT to the GCS for every rejection.")
    feedback_sysid: int = Field(1, ge=0, le=255, description="System id used for feedback frames.")
    feedback_compid: int = Field(1, ge=0, le=255, description="Component id used for feedback frames.")
    default_deny: bool = Field(False, description="Reject messages no rule or iteration matches.")
    record_capture: bool = Field(True, description="Record uplink and downlink frames for offline replay.")
    log_dir: str = Field(DEFAULT_LOG_DIR, description="Directory for verdict, forwarded, capture and counter logs.")
    flush_interval_s: float = Field(0.5, gt=0, description="How often logs are flushed to disk.")

    @field_validator("gcs_listen", "fcs_listen", "fcs_target")
    @classmethod
    def _check_address(cls, value: str) -> str:
        parse_address(value)
        return value

    @field_validator("ring_capacity")
    @classmethod
    def _check_capacity(cls, value: int) -> int:
        if value < 2 or value & (value - 1):
            raise ValueError("ring_capacity must be a power of two >= 2")
        return value

    def address(self, name: str) -> Tuple[str, int]:
        return parse_address(getattr(self, name))

    def spec_defines(self) -> Dict[str, float]:
        return {"climb_tolerance": self.climb_tolerance_mps, **self.defines}


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> GatewayConfig:
    """Defaults, then the YAML file, then environment, then explicit overrides."""
    data = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.load(f, Loader=yaml.SafeLoader) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path} must contain a mapping")
    log_dir = os.environ.get("MAVGUARD_LOG_DIR")
    if log_dir:
        data["log_dir"] = log_dir
    spec_path = os.environ.get("MAVGUARD_SPEC")
    if spec_path:
        data["spec_path"] = spec_path
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "defines":
            data["defines"] = {**data.get("defines", {}), **value}
        else:
            data[key] = value
    config = GatewayConfig(**data)
    logger.info("Gateway config: %s", config.model_dump(exclude_defaults=True))
    return config
