"""Framed messages between the fuzzer and an in-target agent.

Each frame is ``"SPOT" | type:u8 | length:u32le | payload``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

MAGIC = b"SPOT"
HEADER = struct.Struct("<4sBI")
MAX_PAYLOAD = 1 << 24


class FrameType(enum.IntEnum):
    HELLO = 0x01
    EXEC_BEGIN = 0x02
    EXEC_END = 0x03
    CRASH = 0x04
    HEARTBEAT = 0x05
    SHUTDOWN = 0x06


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


@dataclass(frozen=True)
class AgentFrame:
    type: FrameType
    payload: bytes = b""


@dataclass(frozen=True)
class CrashInfo:
    exception_code: int
    fault_address: int
    module: str = ""


def agent_encode(frame: AgentFrame) -> bytes:
    return HEADER.pack(MAGIC, int(frame.type), len(frame.payload)) + frame.payload


def parse_header(head: bytes) -> tuple[FrameType, int]:
    if len(head) < HEADER.size:
        raise Truncated(f"frame header needs {HEADER.size} bytes, got {len(head)}")
    magic, kind, length = HEADER.unpack_from(head)
    if magic != MAGIC:
        raise BadMagic(f"bad frame magic {magic!r}")
    try:
        ftype = FrameType(kind)
    except ValueError:
        raise UnknownType(f"unknown frame type {kind:#04x}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} exceeds limit")
    return ftype, length


def agent_decode(data: bytes) -> tuple[AgentFrame, int]:
    """Decode one frame from the front of ``data``; returns it and the bytes consumed."""
    ftype, length = parse_header(data)
    end = HEADER.size + length
    if len(data) < end:
        raise Truncated(f"payload needs {length} bytes, got {len(data) - HEADER.size}")
    return AgentFrame(ftype, bytes(data[HEADER.size:end])), end


def decode_exact(data: bytes) -> AgentFrame:
    frame, used = agent_decode(data)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} trailing bytes after frame")
    return frame


# payload helpers

def exec_end(status: int = 0) -> AgentFrame:
    return AgentFrame(FrameType.EXEC_END, struct.pack("<I", status))


def exec_status(frame: AgentFrame) -> int:
    if len(frame.payload) != 4:
        raise Truncated("EXEC_END payload must be 4 bytes")
    return struct.unpack("<I", frame.payload)[0]


def crash(info: CrashInfo) -> AgentFrame:
    name = info.module.encode()
    return AgentFrame(FrameType.CRASH, struct.pack("<IQI", info.exception_code, info.fault_address, len(name)) + name)


def crash_info(frame: AgentFrame) -> CrashInfo:
    p = frame.payload
    if len(p) < 16:
        raise Truncated("CRASH payload shorter than 16 bytes")
    code, addr, n = struct.unpack_from("<IQI", p)
    if len(p) != 16 + n:
        raise Truncated("CRASH module name length mismatch")
    return CrashInfo(code, addr, p[16:].decode("utf-8", "replace"))


def hello(pid: int, name: str = "") -> AgentFrame:
    return AgentFrame(FrameType.HELLO, struct.pack("<I", pid) + name.encode())


class FrameReader:
    """Incremental decoder for a byte stream."""

    def __init__(self) -> None:
        self.buf = bytearray()

    def feed(self, data: bytes) -> None:
        self.buf += data

    def next(self) -> Optional[AgentFrame]:
        if len(self.buf) < HEADER.size:
            return None
        ftype, length = parse_header(bytes(self.buf[:HEADER.size]))
        if len(self.buf) < HEADER.size + length:
            return None
        frame = AgentFrame(ftype, bytes(self.buf[HEADER.size:HEADER.size + length]))
        del self.buf[:HEADER.size + length]
        return frame
