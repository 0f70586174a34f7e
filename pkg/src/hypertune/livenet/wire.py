"""Length-prefixed binary frames between coordinator and workers.

Frame: ``>I`` payload length, ``>B`` message type, payload. Integers are
big-endian, reals are IEEE-754 doubles, strings are a ``>H`` byte count
followed by UTF-8, lists are a ``>I`` element count followed by elements.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

from ..errors import ProtocolError, ValidationError

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IB")
MAX_PAYLOAD = 16 * 1024 * 1024


class MsgType(IntEnum):
    HELLO = 1
    BENCH_REQUEST = 2
    BENCH_RESULT = 3
    PLAN = 4
    STEP_BEGIN = 5
    STEP_REPORT = 6
    RETUNE_NOTICE = 7
    EPOCH_END = 8
    SHUTDOWN = 9


@dataclass(frozen=True)
class Hello:
    node_id: str
    core_count: int
    node_class: str
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class BenchRequest:
    batch_sizes: tuple[int, ...]
    steps_per_probe: int


@dataclass(frozen=True)
class BenchResult:
    points: tuple[tuple[int, float], ...]
    normal_cpu: float


@dataclass(frozen=True)
class PlanEntry:
    node_id: str
    batch_size: int
    offset: int
    length: int


@dataclass(frozen=True)
class Plan:
    generation: int
    steps_per_epoch: int
    entries: tuple[PlanEntry, ...]


@dataclass(frozen=True)
class StepBegin:
    generation: int
    step: int


@dataclass(frozen=True)
class StepReportMsg:
    node_id: str
    generation: int
    step_index: int
    measured_throughput: float
    cpu_utilization: float
    wall_time: float


@dataclass(frozen=True)
class RetuneNotice:
    generation: int


@dataclass(frozen=True)
class EpochEnd:
    epoch: int


@dataclass(frozen=True)
class Shutdown:
    pass


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v):
        self.parts.append(struct.pack(">B", v))

    def u16(self, v):
        self.parts.append(struct.pack(">H", v))

    def u32(self, v):
        self.parts.append(struct.pack(">I", v))

    def u64(self, v):
        self.parts.append(struct.pack(">Q", v))

    def f64(self, v):
        self.parts.append(struct.pack(">d", v))

    def str(self, s):
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ProtocolError("string too long for frame")
        self.u16(len(raw))
        self.parts.append(raw)

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ProtocolError("truncated payload")
        (v,) = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return v

    def u8(self):
        return self._take(">B")

    def u16(self):
        return self._take(">H")

    def u32(self):
        return self._take(">I")

    def u64(self):
        return self._take(">Q")

    def f64(self):
        return self._take(">d")

    def str(self):
        n = self.u16()
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated string")
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("string is not valid UTF-8") from exc

    def count(self, min_item_bytes: int) -> int:
        n = self.u32()
        if n * min_item_bytes > len(self.data) - self.pos:
            raise ProtocolError("list count exceeds payload")
        return n

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing payload bytes")


def _encode_payload(msg) -> tuple[MsgType, bytes]:
    w = _Writer()
    if isinstance(msg, Hello):
        w.u16(msg.version)
        w.str(msg.node_id)
        w.u32(msg.core_count)
        w.str(msg.node_class)
        t = MsgType.HELLO
    elif isinstance(msg, BenchRequest):
        w.u32(len(msg.batch_sizes))
        for b in msg.batch_sizes:
            w.u32(b)
        w.u32(msg.steps_per_probe)
        t = MsgType.BENCH_REQUEST
    elif isinstance(msg, BenchResult):
        w.u32(len(msg.points))
        for b, s in msg.points:
            w.u32(b)
            w.f64(s)
        w.f64(msg.normal_cpu)
        t = MsgType.BENCH_RESULT
    elif isinstance(msg, Plan):
        w.u32(msg.generation)
        w.u32(msg.steps_per_epoch)
        w.u32(len(msg.entries))
        for e in msg.entries:
            w.str(e.node_id)
            w.u32(e.batch_size)
            w.u64(e.offset)
            w.u64(e.length)
        t = MsgType.PLAN
    elif isinstance(msg, StepBegin):
        w.u32(msg.generation)
        w.u32(msg.step)
        t = MsgType.STEP_BEGIN
    elif isinstance(msg, StepReportMsg):
        w.str(msg.node_id)
        w.u32(msg.generation)
        w.u32(msg.step_index)
        w.f64(msg.measured_throughput)
        w.f64(msg.cpu_utilization)
        w.f64(msg.wall_time)
        t = MsgType.STEP_REPORT
    elif isinstance(msg, RetuneNotice):
        w.u32(msg.generation)
        t = MsgType.RETUNE_NOTICE
    elif isinstance(msg, EpochEnd):
        w.u32(msg.epoch)
        t = MsgType.EPOCH_END
    elif isinstance(msg, Shutdown):
        t = MsgType.SHUTDOWN
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return t, w.bytes()


def encode(msg) -> bytes:
    """Full frame (header and payload) for ``msg``."""
    try:
        t, payload = _encode_payload(msg)
    except struct.error as exc:
        raise ProtocolError(f"field out of range in {type(msg).__name__}: {exc}") from exc
    return HEADER.pack(len(payload), t) + payload


def decode_payload(msg_type: int, payload: bytes):
    try:
        t = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None
    r = _Reader(payload)
    if t is MsgType.HELLO:
        version = r.u16()
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        msg = Hello(r.str(), r.u32(), r.str(), version)
    elif t is MsgType.BENCH_REQUEST:
        n = r.count(4)
        sizes = tuple(r.u32() for _ in range(n))
        msg = BenchRequest(sizes, r.u32())
    elif t is MsgType.BENCH_RESULT:
        n = r.count(12)
        points = tuple((r.u32(), r.f64()) for _ in range(n))
        msg = BenchResult(points, r.f64())
    elif t is MsgType.PLAN:
        gen, steps = r.u32(), r.u32()
        n = r.count(22)
        entries = tuple(PlanEntry(r.str(), r.u32(), r.u64(), r.u64()) for _ in range(n))
        msg = Plan(gen, steps, entries)
    elif t is MsgType.STEP_BEGIN:
        msg = StepBegin(r.u32(), r.u32())
    elif t is MsgType.STEP_REPORT:
        msg = StepReportMsg(r.str(), r.u32(), r.u32(), r.f64(), r.f64(), r.f64())
    elif t is MsgType.RETUNE_NOTICE:
        msg = RetuneNotice(r.u32())
    elif t is MsgType.EPOCH_END:
        msg = EpochEnd(r.u32())
    else:
        msg = Shutdown()
    r.done()
    return msg


def decode(frame: bytes):
    """Inverse of :func:`encode` for one complete frame."""
    if len(frame) < HEADER.size:
        raise ProtocolError("frame shorter than header")
    length, t = HEADER.unpack_from(frame)
    if length != len(frame) - HEADER.size:
        raise ProtocolError(f"length field {length} but {len(frame) - HEADER.size} payload bytes")
    return decode_payload(t, frame[HEADER.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return bytes(buf)


def recv_message(sock: socket.socket):
    """Read one frame; ConnectionError on EOF, ProtocolError on a bad frame."""
    length, t = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return decode_payload(t, _recv_exact(sock, length))


def send_message(sock: socket.socket, msg) -> None:
    sock.sendall(encode(msg))


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValidationError(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)
