"""Binary frame codec for federation messages.

Frame layout (all integers little-endian)::

    u32 magic 0x50464831 ("PFH1")
    u8  kind
    u32 round
    u32 env_id
    u32 payload length n (number of float64 values)
    f64 x n payload
    u32 CRC32 over every preceding byte of the frame
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = 0x50464831
_HEADER = struct.Struct("<IBIII")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size
TRAILER_SIZE = _CRC.size
MAX_PAYLOAD = 1 << 27


class CodecError(ValueError):
    pass


class BadMagicError(CodecError):
    pass


class TruncatedFrameError(CodecError):
    pass


class ChecksumError(CodecError):
    pass


class MessageKind(enum.IntEnum):
    PARAMS_DOWN = 1
    DELTA_UP = 2
    REGISTER = 3
    ACK = 4


@dataclass(frozen=True, eq=False)
class RoundMessage:
    """One wire-level message.

    The only data a message can carry is a vector of model parameters or
    parameter deltas (or, for ``REGISTER``, the client's parameter count).
    """

    kind: MessageKind
    round: int
    env_id: int
    payload: np.ndarray

    def __post_init__(self) -> None:
        kind = MessageKind(self.kind)
        payload = np.array(self.payload, dtype="<f8", copy=True).reshape(-1)
        payload.setflags(write=False)
        for name in ("round", "env_id"):
            v = getattr(self, name)
            if not 0 <= v < 2**32:
                raise CodecError(f"{name} {v} does not fit in u32")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "payload", payload)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoundMessage):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.round == other.round
            and self.env_id == other.env_id
            and self.payload.tobytes() == other.payload.tobytes()
        )

    @property
    def checksum(self) -> int:
        return zlib.crc32(_body(self))


def _body(msg: RoundMessage) -> bytes:
    header = _HEADER.pack(MAGIC, int(msg.kind), msg.round, msg.env_id, msg.payload.shape[0])
    return header + msg.payload.tobytes()


def encode(msg: RoundMessage) -> bytes:
    body = _body(msg)
    return body + _CRC.pack(zlib.crc32(body))


def frame_length(header: bytes) -> int:
    """Total frame size implied by a frame header."""
    if len(header) < HEADER_SIZE:
        raise TruncatedFrameError(f"header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, _, _, _, n = _HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:08x}")
    if n > MAX_PAYLOAD:
        raise CodecError(f"payload length {n} exceeds limit")
    return HEADER_SIZE + 8 * n + TRAILER_SIZE


def decode(data: bytes) -> RoundMessage:
    """Decode exactly one frame.

    The CRC is checked before the header is trusted, so a damaged magic or
    length field is reported as a checksum failure rather than as foreign or
    truncated data.
    """
    data = bytes(data)
    if len(data) >= HEADER_SIZE + TRAILER_SIZE:
        (crc,) = _CRC.unpack_from(data, len(data) - TRAILER_SIZE)
        if zlib.crc32(data[:-TRAILER_SIZE]) != crc:
            raise _classify_damage(data)
    msg, used = decode_prefix(data)
    if used != len(data):
        raise CodecError(f"{len(data) - used} trailing bytes after frame")
    return msg


def _classify_damage(data: bytes) -> CodecError:
    """Error for a buffer whose trailing CRC does not match."""
    magic, kind, rnd, env_id, n = _HEADER.unpack_from(data)
    payload_bytes = len(data) - HEADER_SIZE - TRAILER_SIZE
    if payload_bytes % 8 == 0:
        fixed = _HEADER.pack(MAGIC, kind, rnd, env_id, payload_bytes // 8) + data[HEADER_SIZE:-TRAILER_SIZE]
        (crc,) = _CRC.unpack_from(data, len(data) - TRAILER_SIZE)
        if fixed != data[:-TRAILER_SIZE] and zlib.crc32(fixed) == crc:
            return ChecksumError("CRC32 mismatch (damaged header)")
    if magic != MAGIC:
        return BadMagicError(f"bad magic 0x{magic:08x}")
    total = HEADER_SIZE + 8 * n + TRAILER_SIZE
    if total > len(data):
        return TruncatedFrameError(f"frame needs {total} bytes, got {len(data)}")
    if total < len(data):
        body = data[: total - TRAILER_SIZE]
        if zlib.crc32(body) == _CRC.unpack_from(data, total - TRAILER_SIZE)[0]:
            return CodecError(f"{len(data) - total} trailing bytes after frame")
    return ChecksumError("CRC32 mismatch")


def decode_prefix(data: bytes) -> tuple[RoundMessage, int]:
    """Decode the first frame in ``data``; returns the message and bytes consumed."""
    data = bytes(data)
    if len(data) >= 4 and struct.unpack_from("<I", data)[0] != MAGIC:
        raise BadMagicError(f"bad magic 0x{struct.unpack_from('<I', data)[0]:08x}")
    total = frame_length(data)
    if len(data) < total:
        raise TruncatedFrameError(f"frame needs {total} bytes, got {len(data)}")
    body = data[: total - TRAILER_SIZE]
    (crc,) = _CRC.unpack_from(data, total - TRAILER_SIZE)
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch")
    _, kind, rnd, env_id, n = _HEADER.unpack_from(body)
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise CodecError(f"unknown message kind {kind}") from None
    payload = np.frombuffer(body, dtype="<f8", count=n, offset=HEADER_SIZE).copy()
    return RoundMessage(kind, rnd, env_id, payload), total


def decode_stream(data: bytes) -> list[RoundMessage]:
    out, pos = [], 0
    while pos < len(data):
        msg, used = decode_prefix(data[pos:])
        out.append(msg)
        pos += used
    return out
