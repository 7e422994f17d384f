"""MAVLink v2 framing: checksum, encode, decode and datagram scanning.

Only unsigned v2 frames are accepted. Payloads are truncated of trailing zero
bytes on encode (keeping at least one byte) and zero-extended on decode.
"""
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Tuple, Type

from mavguard.messages import MESSAGES_BY_ID, MavMessage

MAGIC_V2 = 0xFD
HEADER_LEN = 10
CHECKSUM_LEN = 2
MAX_PAYLOAD_LEN = 255
MAX_FRAME_LEN = HEADER_LEN + MAX_PAYLOAD_LEN + CHECKSUM_LEN
INCOMPAT_FLAG_SIGNED = 0x01

_HEADER = struct.Struct("<BBBBBBB")


class FrameError(ValueError):
    """Base class of decode failures; ``consumed`` bytes may be skipped."""

    def __init__(self, message: str, consumed: int):
        super().__init__(message)
        self.consumed = consumed


class NeedMoreData(FrameError):
    def __init__(self):
        super().__init__("incomplete frame", consumed=0)


class JunkBytes(FrameError):
    """Bytes before the next v2 magic byte (includes MAVLink v1 traffic)."""

    def __init__(self, consumed: int):
        super().__init__(f"{consumed} bytes before next frame start", consumed=consumed)


class UnsupportedFrame(FrameError):
    """Signed frames or unknown incompatibility flags."""

    def __init__(self, incompat_flags: int):
        kind = "signed frame" if incompat_flags & INCOMPAT_FLAG_SIGNED else "unsupported frame"
        super().__init__(f"{kind}, incompat_flags 0x{incompat_flags:02x}", consumed=1)
        self.incompat_flags = incompat_flags

    @property
    def signed(self) -> bool:
        return bool(self.incompat_flags & INCOMPAT_FLAG_SIGNED)


class BadChecksum(FrameError):
    # Only the magic byte is consumed so a corrupted length byte cannot swallow
    # the frames that follow.
    def __init__(self, expected: int, actual: int):
        super().__init__(f"checksum 0x{actual:04x} != 0x{expected:04x}", consumed=1)
        self.expected = expected
        self.actual = actual


class UnknownMsgId(FrameError):
    def __init__(self, msgid: int, frame: bytes):
        super().__init__(f"unknown msgid {msgid}", consumed=len(frame))
        self.msgid = msgid
        self.frame = frame


def crc16_mcrf4xx(data: bytes, seed: int = 0xFFFF) -> int:
    """CRC-16/MCRF4XX (the X.25 accumulation MAVLink uses)."""
    crc = seed
    for byte in data:
        tmp = (byte ^ crc) & 0xFF
        tmp = (tmp ^ (tmp << 4)) & 0xFF
        crc = ((crc >> 8) ^ (tmp << 8) ^ (tmp << 3) ^ (tmp >> 4)) & 0xFFFF
    return crc


@dataclass(frozen=True)
class Frame:
    """A framed MAVLink v2 packet whose framing (not payload) has been validated."""

    payload_len: int
    incompat_flags: int
    compat_flags: int
    seq: int
    sysid: int
    compid: int
    msgid: int
    payload: bytes
    checksum: int
    raw: bytes = field(repr=False)

    @property
    def magic(self) -> int:
        return MAGIC_V2


@lru_cache(maxsize=None)
def _layout(cls: Type[MavMessage]) -> struct.Struct:
    return struct.Struct("<" + "".join(code for _, code in cls.WIRE))


def _truncate(payload: bytes) -> bytes:
    end = len(payload)
    while end > 1 and payload[end - 1] == 0:
        end -= 1
    return payload[:end]


def encode_payload(msg: MavMessage) -> bytes:
    values = []
    for name, code in msg.WIRE:
        value = getattr(msg, name)
        values.append(value.encode("latin-1") if code.endswith("s") else value)
    return _truncate(_layout(type(msg)).pack(*values))


def decode_payload(cls: Type[MavMessage], payload: bytes) -> MavMessage:
    layout = _layout(cls)
    if len(payload) < layout.size:
        payload = payload + bytes(layout.size - len(payload))
    values = layout.unpack_from(payload)
    fields = {}
    for (name, code), value in zip(cls.WIRE, values):
        if code.endswith("s"):
            value = value.split(b"\x00", 1)[0].decode("latin-1")
        fields[name] = value
    return cls(**fields)


def frame_checksum(header_and_payload: bytes, crc_extra: int) -> int:
    """Checksum over the bytes after the magic byte, then ``crc_extra``."""
    crc = crc16_mcrf4xx(header_and_payload[1:])
    return crc16_mcrf4xx(bytes((crc_extra,)), crc)


def frame_encode(msg: MavMessage, seq: int, sysid: int, compid: int) -> bytes:
    payload = encode_payload(msg)
    body = (
        _HEADER.pack(MAGIC_V2, len(payload), 0, 0, seq & 0xFF, sysid & 0xFF, compid & 0xFF)
        + msg.MSG_ID.to_bytes(3, "little")
        + payload
    )
    return body + struct.pack("<H", frame_checksum(body, msg.CRC_EXTRA))


def read_frame(buf: bytes) -> Frame:
    """Validate the framing of the frame at the start of ``buf``.

    Raises a :class:`FrameError` subclass describing how many bytes to skip.
    """
    if not buf:
        raise NeedMoreData()
    if buf[0] != MAGIC_V2:
        start = bytes(buf).find(MAGIC_V2, 1)
        raise JunkBytes(start if start > 0 else len(buf))
    if len(buf) < HEADER_LEN:
        raise NeedMoreData()
    _, payload_len, incompat, compat, seq, sysid, compid = _HEADER.unpack_from(buf)
    if incompat != 0:
        raise UnsupportedFrame(incompat)
    total = HEADER_LEN + payload_len + CHECKSUM_LEN
    if len(buf) < total:
        raise NeedMoreData()
    raw = bytes(buf[:total])
    msgid = int.from_bytes(raw[7:10], "little")
    cls = MESSAGES_BY_ID.get(msgid)
    if cls is None:
        raise UnknownMsgId(msgid, raw)
    (checksum,) = struct.unpack_from("<H", raw, total - CHECKSUM_LEN)
    expected = frame_checksum(raw[: total - CHECKSUM_LEN], cls.CRC_EXTRA)
    if checksum != expected:
        raise BadChecksum(expected, checksum)
    return Frame(
        payload_len=payload_len,
        incompat_flags=incompat,
        compat_flags=compat,
        seq=seq,
        sysid=sysid,
        compid=compid,
        msgid=msgid,
        payload=raw[HEADER_LEN : HEADER_LEN + payload_len],
        checksum=checksum,
        raw=raw,
    )


def frame_decode(buf: bytes) -> Tuple[MavMessage, int]:
    """Decode the frame at the start of ``buf`` into ``(message, consumed_bytes)``."""
    frame = read_frame(buf)
    return decode_payload(MESSAGES_BY_ID[frame.msgid], frame.payload), len(frame.raw)


def decode_frame_bytes(raw: bytes) -> Tuple[Frame, MavMessage]:
    """Decode a buffer that must hold exactly one supported frame."""
    frame = read_frame(raw)
    if len(frame.raw) != len(raw):
        raise FrameError(f"{len(raw) - len(frame.raw)} trailing bytes after frame", consumed=len(raw))
    return frame, decode_payload(MESSAGES_BY_ID[frame.msgid], frame.payload)


@dataclass
class ScanResult:
    frames: List[bytes] = field(default_factory=list)
    junk_bytes: int = 0
    bad_frames: int = 0

    @property
    def malformed(self) -> bool:
        return self.junk_bytes > 0 or self.bad_frames > 0


def scan_frames(datagram: bytes) -> ScanResult:
    """Split a complete datagram into whole frames, skipping anything malformed.

    Frames with unknown msgids cannot be checksum-verified, so they are only
    kept when they end exactly at the datagram end or at another magic byte.
    """
    result = ScanResult()
    pos = 0
    end = len(datagram)
    while pos < end:
        try:
            frame = read_frame(datagram[pos:])
        except UnknownMsgId as e:
            stop = pos + e.consumed
            if stop == end or datagram[stop] == MAGIC_V2:
                result.frames.append(e.frame)
                pos = stop
            else:
                result.bad_frames += 1
                result.junk_bytes += 1
                pos += 1
            continue
        except NeedMoreData:
            # the datagram is complete, so a truncated header is junk
            result.junk_bytes += 1
            pos += 1
            continue
        except JunkBytes as e:
            result.junk_bytes += e.consumed
            pos += e.consumed
            continue
        except FrameError as e:
            result.bad_frames += 1
            result.junk_bytes += e.consumed
            pos += e.consumed
            continue
        result.frames.append(frame.raw)
        pos += len(frame.raw)
    return result
