"""Typed models for the MAVLink v2 common-dialect messages the gateway understands.

Each model lists its fields in wire order (``WIRE``), which is the order the
common dialect serialises them in: base fields sorted by type size, then
extension fields in declaration order.
"""
import struct
from typing import Annotated, ClassVar, Dict, Literal, Tuple, Type, Union

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, TypeAdapter


def _float32(value: float) -> float:
    try:
        return struct.unpack("<f", struct.pack("<f", value))[0]
    except OverflowError as e:
        raise ValueError(f"{value} does not fit a 32-bit float") from e


def _char_array(size: int):
    def check(value: str) -> str:
        if "\x00" in value:
            raise ValueError("embedded NUL in char field")
        if len(value.encode("latin-1")) > size:
            raise ValueError(f"at most {size} bytes allowed")
        return value

    return AfterValidator(check)


U8 = Annotated[int, Field(ge=0, le=0xFF)]
U16 = Annotated[int, Field(ge=0, le=0xFFFF)]
U32 = Annotated[int, Field(ge=0, le=0xFFFFFFFF)]
I16 = Annotated[int, Field(ge=-0x8000, le=0x7FFF)]
I32 = Annotated[int, Field(ge=-0x80000000, le=0x7FFFFFFF)]
F32 = Annotated[float, AfterValidator(_float32)]
Char16 = Annotated[str, _char_array(16)]
Char50 = Annotated[str, _char_array(50)]

# MAV_PARAM_TYPE_REAL32
PARAM_TYPE_REAL32 = 9
# MAV_CMD ids used by the shipped specs and scenarios
MAV_CMD_NAV_WAYPOINT = 16
MAV_CMD_NAV_TAKEOFF = 22
MAV_CMD_DO_SET_MODE = 176
MAV_CMD_DO_PARACHUTE = 208
MAV_CMD_MISSION_START = 300
MAV_CMD_COMPONENT_ARM_DISARM = 400
# MAV_RESULT
MAV_RESULT_ACCEPTED = 0
MAV_RESULT_DENIED = 2
MAV_RESULT_UNSUPPORTED = 3
# MAV_MODE_FLAG
MAV_MODE_FLAG_SAFETY_ARMED = 0x80
MAV_MODE_FLAG_CUSTOM_MODE_ENABLED = 0x01
# MAV_TYPE / MAV_AUTOPILOT values that mark a ground station
MAV_TYPE_GCS = 6
MAV_AUTOPILOT_INVALID = 8
MAV_SEVERITY_WARNING = 4


class MavMessage(BaseModel):
    """Base class of all supported messages."""

    model_config = ConfigDict(frozen=True)

    NAME: ClassVar[str]
    MSG_ID: ClassVar[int]
    CRC_EXTRA: ClassVar[int]
    # (field name, struct format code) in wire order
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]]

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(name for name, _ in cls.WIRE)

    @classmethod
    def field_kind(cls, name: str) -> str:
        """Return ``"int"``, ``"float"`` or ``"str"`` for a wire field."""
        code = dict(cls.WIRE)[name]
        if code.endswith("s"):
            return "str"
        if code == "f":
            return "float"
        return "int"

    @classmethod
    def field_code(cls, name: str) -> str:
        return dict(cls.WIRE)[name]


class Heartbeat(MavMessage):
    """The heartbeat message shows that a system or component is present and responding."""

    NAME: ClassVar[str] = "HEARTBEAT"
    MSG_ID: ClassVar[int] = 0
    CRC_EXTRA: ClassVar[int] = 50
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("custom_mode", "I"),
        ("type", "B"),
        ("autopilot", "B"),
        ("base_mode", "B"),
        ("system_status", "B"),
        ("mavlink_version", "B"),
    )

    mavpackettype: Literal["HEARTBEAT"] = "HEARTBEAT"
    custom_mode: U32 = Field(0, description="Autopilot-specific flight mode id.")
    type: U8 = Field(0, description="MAV_TYPE of the sender.")
    autopilot: U8 = Field(0, description="MAV_AUTOPILOT of the sender.")
    base_mode: U8 = Field(0, description="MAV_MODE_FLAG bitmap.")
    system_status: U8 = Field(0, description="MAV_STATE.")
    mavlink_version: U8 = Field(3, description="MAVLink version, not writable by the user.")


class ParamValue(MavMessage):
    """Emit the value of an onboard parameter."""

    NAME: ClassVar[str] = "PARAM_VALUE"
    MSG_ID: ClassVar[int] = 22
    CRC_EXTRA: ClassVar[int] = 220
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("param_value", "f"),
        ("param_count", "H"),
        ("param_index", "H"),
        ("param_id", "16s"),
        ("param_type", "B"),
    )

    mavpackettype: Literal["PARAM_VALUE"] = "PARAM_VALUE"
    param_value: F32 = Field(..., description="Onboard parameter value.")
    param_count: U16 = Field(1, description="Total number of onboard parameters.")
    param_index: U16 = Field(0xFFFF, description="Index of this onboard parameter.")
    param_id: Char16 = Field(..., description="Onboard parameter id.")
    param_type: U8 = Field(PARAM_TYPE_REAL32, description="MAV_PARAM_TYPE.")


class ParamSet(MavMessage):
    """Set a parameter value."""

    NAME: ClassVar[str] = "PARAM_SET"
    MSG_ID: ClassVar[int] = 23
    CRC_EXTRA: ClassVar[int] = 168
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("param_value", "f"),
        ("target_system", "B"),
        ("target_component", "B"),
        ("param_id", "16s"),
        ("param_type", "B"),
    )

    mavpackettype: Literal["PARAM_SET"] = "PARAM_SET"
    param_value: F32 = Field(..., description="Onboard parameter value.")
    target_system: U8 = Field(1, description="System ID.")
    target_component: U8 = Field(1, description="Component ID.")
    param_id: Char16 = Field(..., description="Onboard parameter id.")
    param_type: U8 = Field(PARAM_TYPE_REAL32, description="MAV_PARAM_TYPE.")


class GlobalPositionInt(MavMessage):
    """The filtered global position."""

    NAME: ClassVar[str] = "GLOBAL_POSITION_INT"
    MSG_ID: ClassVar[int] = 33
    CRC_EXTRA: ClassVar[int] = 104
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("time_boot_ms", "I"),
        ("lat", "i"),
        ("lon", "i"),
        ("alt", "i"),
        ("relative_alt", "i"),
        ("vx", "h"),
        ("vy", "h"),
        ("vz", "h"),
        ("hdg", "H"),
    )

    mavpackettype: Literal["GLOBAL_POSITION_INT"] = "GLOBAL_POSITION_INT"
    time_boot_ms: U32 = Field(0, description="Timestamp (time since system boot), ms.")
    lat: I32 = Field(0, description="Latitude, degE7.")
    lon: I32 = Field(0, description="Longitude, degE7.")
    alt: I32 = Field(0, description="Altitude (MSL), mm.")
    relative_alt: I32 = Field(0, description="Altitude above home, mm.")
    vx: I16 = Field(0, description="Ground X speed (latitude, positive north), cm/s.")
    vy: I16 = Field(0, description="Ground Y speed (longitude, positive east), cm/s.")
    vz: I16 = Field(0, description="Ground Z speed (altitude, positive down), cm/s.")
    hdg: U16 = Field(0xFFFF, description="Vehicle heading, cdeg; UINT16_MAX if unknown.")


class MissionCount(MavMessage):
    """Announce the number of mission items the GCS is about to send."""

    NAME: ClassVar[str] = "MISSION_COUNT"
    MSG_ID: ClassVar[int] = 44
    CRC_EXTRA: ClassVar[int] = 221
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("count", "H"),
        ("target_system", "B"),
        ("target_component", "B"),
        ("mission_type", "B"),
    )

    mavpackettype: Literal["MISSION_COUNT"] = "MISSION_COUNT"
    count: U16 = Field(..., description="Number of mission items in the sequence.")
    target_system: U8 = Field(1, description="System ID.")
    target_component: U8 = Field(1, description="Component ID.")
    mission_type: U8 = Field(0, description="MAV_MISSION_TYPE.")


class MissionAck(MavMessage):
    """Acknowledgment message during waypoint handling."""

    NAME: ClassVar[str] = "MISSION_ACK"
    MSG_ID: ClassVar[int] = 47
    CRC_EXTRA: ClassVar[int] = 153
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("target_system", "B"),
        ("target_component", "B"),
        ("type", "B"),
        ("mission_type", "B"),
    )

    mavpackettype: Literal["MISSION_ACK"] = "MISSION_ACK"
    target_system: U8 = Field(1, description="System ID.")
    target_component: U8 = Field(1, description="Component ID.")
    type: U8 = Field(0, description="MAV_MISSION_RESULT.")
    mission_type: U8 = Field(0, description="MAV_MISSION_TYPE.")


class MissionItemInt(MavMessage):
    """A mission item with integer-scaled latitude and longitude."""

    NAME: ClassVar[str] = "MISSION_ITEM_INT"
    MSG_ID: ClassVar[int] = 73
    CRC_EXTRA: ClassVar[int] = 38
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("param1", "f"),
        ("param2", "f"),
        ("param3", "f"),
        ("param4", "f"),
        ("x", "i"),
        ("y", "i"),
        ("z", "f"),
        ("seq", "H"),
        ("command", "H"),
        ("target_system", "B"),
        ("target_component", "B"),
        ("frame", "B"),
        ("current", "B"),
        ("autocontinue", "B"),
        ("mission_type", "B"),
    )

    mavpackettype: Literal["MISSION_ITEM_INT"] = "MISSION_ITEM_INT"
    param1: F32 = 0.0
    param2: F32 = 0.0
    param3: F32 = 0.0
    param4: F32 = 0.0
    x: I32 = Field(0, description="Latitude, degE7.")
    y: I32 = Field(0, description="Longitude, degE7.")
    z: F32 = Field(0.0, description="Altitude, m (frame dependent).")
    seq: U16 = Field(..., description="Waypoint sequence number.")
    command: U16 = Field(MAV_CMD_NAV_WAYPOINT, description="MAV_CMD of the item.")
    target_system: U8 = Field(1, description="System ID.")
    target_component: U8 = Field(1, description="Component ID.")
    frame: U8 = Field(6, description="MAV_FRAME of the coordinates.")
    current: U8 = Field(0, description="1 if this is the current item.")
    autocontinue: U8 = Field(1, description="Autocontinue to next waypoint.")
    mission_type: U8 = Field(0, description="MAV_MISSION_TYPE.")


class CommandLong(MavMessage):
    """Send a command with up to seven parameters to the MAV."""

    NAME: ClassVar[str] = "COMMAND_LONG"
    MSG_ID: ClassVar[int] = 76
    CRC_EXTRA: ClassVar[int] = 152
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("param1", "f"),
        ("param2", "f"),
        ("param3", "f"),
        ("param4", "f"),
        ("param5", "f"),
        ("param6", "f"),
        ("param7", "f"),
        ("command", "H"),
        ("target_system", "B"),
        ("target_component", "B"),
        ("confirmation", "B"),
    )

    mavpackettype: Literal["COMMAND_LONG"] = "COMMAND_LONG"
    param1: F32 = 0.0
    param2: F32 = 0.0
    param3: F32 = 0.0
    param4: F32 = 0.0
    param5: F32 = 0.0
    param6: F32 = 0.0
    param7: F32 = 0.0
    command: U16 = Field(..., description="MAV_CMD id.")
    target_system: U8 = Field(1, description="System which should execute the command.")
    target_component: U8 = Field(1, description="Component which should execute the command.")
    confirmation: U8 = Field(0, description="0: first transmission; 1-255: confirmations.")


class CommandAck(MavMessage):
    """Report status of a command."""

    NAME: ClassVar[str] = "COMMAND_ACK"
    MSG_ID: ClassVar[int] = 77
    CRC_EXTRA: ClassVar[int] = 143
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("command", "H"),
        ("result", "B"),
        ("progress", "B"),
        ("result_param2", "i"),
        ("target_system", "B"),
        ("target_component", "B"),
    )

    mavpackettype: Literal["COMMAND_ACK"] = "COMMAND_ACK"
    command: U16 = Field(..., description="MAV_CMD id.")
    result: U8 = Field(MAV_RESULT_ACCEPTED, description="MAV_RESULT.")
    progress: U8 = 0
    result_param2: I32 = 0
    target_system: U8 = 0
    target_component: U8 = 0


class StatusText(MavMessage):
    """Status text message."""

    NAME: ClassVar[str] = "STATUSTEXT"
    MSG_ID: ClassVar[int] = 253
    CRC_EXTRA: ClassVar[int] = 83
    WIRE: ClassVar[Tuple[Tuple[str, str], ...]] = (
        ("severity", "B"),
        ("text", "50s"),
        ("id", "H"),
        ("chunk_seq", "B"),
    )

    mavpackettype: Literal["STATUSTEXT"] = "STATUSTEXT"
    severity: U8 = Field(6, description="MAV_SEVERITY.")
    text: Char50 = Field("", description="Status text, not NUL terminated when 50 bytes long.")
    id: U16 = 0
    chunk_seq: U8 = 0


MESSAGE_TYPES: Tuple[Type[MavMessage], ...] = (
    Heartbeat,
    ParamValue,
    ParamSet,
    GlobalPositionInt,
    MissionCount,
    MissionAck,
    MissionItemInt,
    CommandLong,
    CommandAck,
    StatusText,
)
MESSAGES_BY_ID: Dict[int, Type[MavMessage]] = {cls.MSG_ID: cls for cls in MESSAGE_TYPES}
MESSAGES_BY_NAME: Dict[str, Type[MavMessage]] = {cls.NAME: cls for cls in MESSAGE_TYPES}

AnyMessage = Annotated[
    Union[
        Heartbeat,
        ParamValue,
        ParamSet,
        GlobalPositionInt,
        MissionCount,
        MissionAck,
        MissionItemInt,
        CommandLong,
        CommandAck,
        StatusText,
    ],
    Field(discriminator="mavpackettype"),
]
_message_adapter = TypeAdapter(AnyMessage)


def message_from_dict(data: dict) -> MavMessage:
    """Build a message from a ``{"mavpackettype": ..., field: value}`` mapping."""
    return _message_adapter.validate_python(data)


def message_name(msgid: int) -> str:
    cls = MESSAGES_BY_ID.get(msgid)
    return cls.NAME if cls else f"UNKNOWN_{msgid}"
