"""Classical messages of the private-query protocol and their byte framing.

A frame is a 4-byte big-endian payload length, a 1-byte message type, then
the payload. Bit vectors inside payloads are packed MSB-first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..bits import pack_bits, unpack_bits

MAX_PAYLOAD = 1 << 28
HEADER = struct.Struct(">IB")


class MessageType(IntEnum):
    HELLO = 0
    PULSE = 1
    DETECT_REPORT = 2
    STATE_DISCLOSURE = 3
    BLOCK_MAP = 4
    SYNDROMES = 5
    SHIFT = 6
    ENCRYPTED_DATABASE = 7
    ABORT = 255


class AbortReason(IntEnum):
    PARAM_MISMATCH = 1
    PROTOCOL_VIOLATION = 2
    FRAMING = 3
    CHANNEL_EXHAUSTED = 4
    CHEAT_DETECTED = 5
    TOO_MANY_FAILURES = 6


class FramingError(ValueError):
    """Bytes that do not form a valid frame or payload."""


class ProtocolViolation(RuntimeError):
    def __init__(self, message: str, reason: AbortReason = AbortReason.PROTOCOL_VIOLATION):
        super().__init__(message)
        self.reason = reason


class SessionAborted(RuntimeError):
    def __init__(self, reason: AbortReason, detail: str = ""):
        super().__init__(f"{reason.name}: {detail}" if detail else reason.name)
        self.reason = reason
        self.detail = detail


@dataclass(frozen=True)
class Message:
    type: MessageType
    payload: bytes = b""

    def frame(self) -> bytes:
        if len(self.payload) > MAX_PAYLOAD:
            raise FramingError("payload too large")
        return HEADER.pack(len(self.payload), int(self.type)) + self.payload


class FrameDecoder:
    """Incremental frame parser; bytes in, messages out.

    A malformed header raises :class:`FramingError` and leaves the decoder
    unusable, so no partial message ever reaches a protocol state machine.
    """

    def __init__(self):
        self._buf = bytearray()
        self._broken = False

    def feed(self, data: bytes) -> list[Message]:
        if self._broken:
            raise FramingError("decoder already rejected the stream")
        self._buf.extend(data)
        out = []
        while len(self._buf) >= HEADER.size:
            length, mtype = HEADER.unpack_from(self._buf)
            try:
                kind = MessageType(mtype)
            except ValueError:
                self._broken = True
                raise FramingError(f"unknown message type {mtype}") from None
            if length > MAX_PAYLOAD:
                self._broken = True
                raise FramingError(f"frame length {length} exceeds limit")
            if len(self._buf) < HEADER.size + length:
                break
            payload = bytes(self._buf[HEADER.size:HEADER.size + length])
            del self._buf[:HEADER.size + length]
            out.append(Message(kind, payload))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def decode_stream(data: bytes) -> list[Message]:
    dec = FrameDecoder()
    msgs = dec.feed(data)
    if dec.pending:
        raise FramingError("trailing bytes after last frame")
    return msgs


# --------------------------------------------------------------------------
# Payload codecs
# --------------------------------------------------------------------------

def _need(payload: bytes, n: int, what: str):
    if len(payload) < n:
        raise FramingError(f"{what} payload truncated")


def _counted_bits(payload: bytes, what: str) -> np.ndarray:
    _need(payload, 4, what)
    (n,) = struct.unpack_from(">I", payload)
    body = payload[4:]
    if len(body) != (n + 7) // 8:
        raise FramingError(f"{what} payload has wrong length for {n} bits")
    return unpack_bits(body, n)


def hello(digest: bytes) -> Message:
    return Message(MessageType.HELLO, digest)


def pulse(states: np.ndarray) -> Message:
    states = np.asarray(states, dtype=np.uint8)
    return Message(MessageType.PULSE, struct.pack(">I", states.size) + states.tobytes())


def parse_pulse(payload: bytes) -> np.ndarray:
    _need(payload, 4, "Pulse")
    (n,) = struct.unpack_from(">I", payload)
    if len(payload) != 4 + n:
        raise FramingError("Pulse payload has wrong length")
    states = np.frombuffer(payload[4:], dtype=np.uint8).copy()
    if states.size and states.max() > 5:
        raise FramingError("Pulse carries an unknown state code")
    return states


def bit_message(kind: MessageType, bits) -> Message:
    bits = np.asarray(bits, dtype=np.uint8)
    return Message(kind, struct.pack(">I", bits.size) + pack_bits(bits))


def parse_bits(payload: bytes, kind: MessageType) -> np.ndarray:
    return _counted_bits(payload, kind.name)


def block_map(N: int, k: int, order: np.ndarray | None = None) -> Message:
    """Block layout; ``order=None`` announces contiguous blocks in sifted order."""
    head = struct.pack(">IHB", N, k, 0 if order is None else 1)
    if order is None:
        return Message(MessageType.BLOCK_MAP, head)
    order = np.asarray(order, dtype=">u4")
    return Message(MessageType.BLOCK_MAP, head + order.tobytes())


def parse_block_map(payload: bytes) -> tuple[int, int, np.ndarray | None]:
    _need(payload, 7, "BlockMap")
    N, k, layout = struct.unpack_from(">IHB", payload)
    body = payload[7:]
    if layout == 0:
        if body:
            raise FramingError("contiguous BlockMap carries extra bytes")
        return N, k, None
    if layout != 1 or len(body) != 4 * N * k:
        raise FramingError("malformed explicit BlockMap")
    order = np.frombuffer(body, dtype=">u4").astype(np.int64)
    if not np.array_equal(np.sort(order), np.arange(N * k)):
        raise FramingError("BlockMap is not a permutation of the sifted key")
    return N, k, order


def syndromes(syn: np.ndarray) -> Message:
    syn = np.asarray(syn, dtype=np.uint8)
    n, r = syn.shape
    return Message(MessageType.SYNDROMES, struct.pack(">IH", n, r) + pack_bits(syn.ravel()))


def parse_syndromes(payload: bytes) -> np.ndarray:
    _need(payload, 6, "Syndromes")
    n, r = struct.unpack_from(">IH", payload)
    body = payload[6:]
    if len(body) != (n * r + 7) // 8:
        raise FramingError("Syndromes payload has wrong length")
    return unpack_bits(body, n * r).reshape(n, r)


SHIFT_OK, SHIFT_FAILURE = 0, 1


def shift(s: int | None) -> Message:
    if s is None:
        return Message(MessageType.SHIFT, struct.pack(">BI", SHIFT_FAILURE, 0))
    return Message(MessageType.SHIFT, struct.pack(">BI", SHIFT_OK, s))


def parse_shift(payload: bytes) -> int | None:
    if len(payload) != 5:
        raise FramingError("Shift payload must be 5 bytes")
    status, s = struct.unpack(">BI", payload)
    if status == SHIFT_FAILURE:
        return None
    if status != SHIFT_OK:
        raise FramingError(f"unknown Shift status {status}")
    return s


def abort(reason: AbortReason, detail: str = "") -> Message:
    return Message(MessageType.ABORT, bytes([int(reason)]) + detail.encode("utf-8"))


def parse_abort(payload: bytes) -> tuple[AbortReason, str]:
    _need(payload, 1, "Abort")
    try:
        reason = AbortReason(payload[0])
    except ValueError:
        raise FramingError(f"unknown abort reason {payload[0]}") from None
    return reason, payload[1:].decode("utf-8", errors="replace")
