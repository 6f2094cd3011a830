"""Binary wire protocol: framing, primitives, and every message kind.

One codec serves both planes. A frame is a 4-byte big-endian length
prefix (counting the kind byte plus the body), one kind byte, then a
kind-specific body built from a small set of primitives:

    u8 / u32 / u64      unsigned big-endian integers
    str                 u16 length + UTF-8 bytes
    blob                u32 length + raw bytes
    list                u32 count + elements

Decoding is strict: truncated input, trailing bytes, unknown kinds, and
out-of-range enum values all raise ProtocolError rather than guessing.
Servers turn that into an error reply; they never crash on hostile bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

from .errors import ProtocolError

MAX_FRAME = 1 << 26  # 64 MiB: generous for bulk cell traffic, refuses nonsense

POLICY_FIFO = 0
POLICY_TOKEN_BALANCED = 1

BATCH_OK = 0
BATCH_NOT_READY = 1
BATCH_EXHAUSTED = 2


class Writer:
    """Append-only big-endian primitive encoder."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def u8(self, value: int) -> None:
        if not 0 <= value <= 0xFF:
            raise ProtocolError(f"u8 out of range: {value}")
        self._buf.append(value)

    def u32(self, value: int) -> None:
        if not 0 <= value <= 0xFFFFFFFF:
            raise ProtocolError(f"u32 out of range: {value}")
        self._buf += struct.pack(">I", value)

    def u64(self, value: int) -> None:
        if not 0 <= value <= 0xFFFFFFFFFFFFFFFF:
            raise ProtocolError(f"u64 out of range: {value}")
        self._buf += struct.pack(">Q", value)

    def string(self, value: str) -> None:
        raw = value.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ProtocolError(f"string too long: {len(raw)} bytes")
        self._buf += struct.pack(">H", len(raw))
        self._buf += raw

    def blob(self, value: bytes) -> None:
        self.u32(len(value))
        self._buf += value

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class Reader:
    """Bounds-checked big-endian primitive decoder."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def _take(self, n: int) -> bytes:
        if self.remaining < n:
            raise ProtocolError(
                f"truncated frame: wanted {n} bytes, {self.remaining} left"
            )
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def string(self) -> str:
        length = struct.unpack(">H", self._take(2))[0]
        try:
            return self._take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8 in string: {exc}") from None

    def blob(self) -> bytes:
        return self._take(self.u32())

    def count(self, min_element_size: int) -> int:
        """List length header, sanity-checked against the bytes left."""
        n = self.u32()
        if n * min_element_size > self.remaining:
            raise ProtocolError(
                f"list count {n} impossible with {self.remaining} bytes left"
            )
        return n

    def expect_end(self) -> None:
        if self.remaining:
            raise ProtocolError(f"{self.remaining} trailing bytes after message")


def _write_rows(w: Writer, rows: tuple[int, ...]) -> None:
    w.u32(len(rows))
    for row in rows:
        w.u64(row)


def _read_rows(r: Reader) -> tuple[int, ...]:
    return tuple(r.u64() for _ in range(r.count(8)))


def _write_strings(w: Writer, items: tuple[str, ...]) -> None:
    w.u32(len(items))
    for item in items:
        w.string(item)


def _read_strings(r: Reader) -> tuple[str, ...]:
    return tuple(r.string() for _ in range(r.count(2)))


def _write_groups(w: Writer, groups: tuple) -> None:
    w.u32(len(groups))
    for rows, columns in groups:
        _write_rows(w, tuple(rows))
        _write_strings(w, tuple(columns))


def _read_groups(r: Reader) -> tuple:
    return tuple(
        (_read_rows(r), _read_strings(r)) for _ in range(r.count(8))
    )


# --------------------------------------------------------------------------
# message kinds


@dataclass(frozen=True)
class Put:
    KIND = 0x01
    entries: tuple[tuple[int, str, bytes], ...]

    def encode_body(self, w: Writer) -> None:
        w.u32(len(self.entries))
        for row, column, value in self.entries:
            w.u64(row)
            w.string(column)
            w.blob(value)

    @classmethod
    def decode_body(cls, r: Reader) -> "Put":
        return cls(
            tuple(
                (r.u64(), r.string(), r.blob())
                for _ in range(r.count(14))
            )
        )


@dataclass(frozen=True)
class Get:
    KIND = 0x02
    rows: tuple[int, ...]
    columns: tuple[str, ...]

    def encode_body(self, w: Writer) -> None:
        _write_rows(w, self.rows)
        _write_strings(w, self.columns)

    @classmethod
    def decode_body(cls, r: Reader) -> "Get":
        return cls(_read_rows(r), _read_strings(r))


@dataclass(frozen=True)
class RegisterController:
    KIND = 0x03
    endpoint: str

    def encode_body(self, w: Writer) -> None:
        w.string(self.endpoint)

    @classmethod
    def decode_body(cls, r: Reader) -> "RegisterController":
        return cls(r.string())


@dataclass(frozen=True)
class ResetStorageEpoch:
    KIND = 0x04
    epoch: int
    owned_rows: tuple[int, ...]

    def encode_body(self, w: Writer) -> None:
        w.u64(self.epoch)
        _write_rows(w, self.owned_rows)

    @classmethod
    def decode_body(cls, r: Reader) -> "ResetStorageEpoch":
        return cls(r.u64(), _read_rows(r))


@dataclass(frozen=True)
class Notify:
    KIND = 0x05
    unit_id: int
    epoch: int
    groups: tuple[tuple[tuple[int, ...], tuple[str, ...]], ...]

    def encode_body(self, w: Writer) -> None:
        w.u32(self.unit_id)
        w.u64(self.epoch)
        _write_groups(w, self.groups)

    @classmethod
    def decode_body(cls, r: Reader) -> "Notify":
        return cls(r.u32(), r.u64(), _read_groups(r))


@dataclass(frozen=True)
class RequestBatch:
    KIND = 0x06
    task: str
    consumer: str
    micro_batch: int
    policy: int = POLICY_FIFO
    token_counts: tuple[tuple[int, int], ...] = ()

    def encode_body(self, w: Writer) -> None:
        w.string(self.task)
        w.string(self.consumer)
        w.u32(self.micro_batch)
        w.u8(self.policy)
        w.u32(len(self.token_counts))
        for row, count in self.token_counts:
            w.u64(row)
            w.u64(count)

    @classmethod
    def decode_body(cls, r: Reader) -> "RequestBatch":
        task = r.string()
        consumer = r.string()
        micro_batch = r.u32()
        policy = r.u8()
        if policy not in (POLICY_FIFO, POLICY_TOKEN_BALANCED):
            raise ProtocolError(f"unknown packing policy byte {policy}")
        counts = tuple((r.u64(), r.u64()) for _ in range(r.count(16)))
        if policy == POLICY_FIFO and counts:
            raise ProtocolError("token counts present on a fifo request")
        return cls(task, consumer, micro_batch, policy, counts)


@dataclass(frozen=True)
class ResetControllerEpoch:
    KIND = 0x07
    task: str
    epoch: int
    total_rows: int

    def encode_body(self, w: Writer) -> None:
        w.string(self.task)
        w.u64(self.epoch)
        w.u64(self.total_rows)

    @classmethod
    def decode_body(cls, r: Reader) -> "ResetControllerEpoch":
        return cls(r.string(), r.u64(), r.u64())


@dataclass(frozen=True)
class PutPrompts:
    KIND = 0x08
    prompts: tuple[bytes, ...]

    def encode_body(self, w: Writer) -> None:
        w.u32(len(self.prompts))
        for prompt in self.prompts:
            w.blob(prompt)

    @classmethod
    def decode_body(cls, r: Reader) -> "PutPrompts":
        return cls(tuple(r.blob() for _ in range(r.count(4))))


@dataclass(frozen=True)
class GetExperience:
    KIND = 0x09
    task: str
    consumer: str
    micro_batch: int

    def encode_body(self, w: Writer) -> None:
        w.string(self.task)
        w.string(self.consumer)
        w.u32(self.micro_batch)

    @classmethod
    def decode_body(cls, r: Reader) -> "GetExperience":
        return cls(r.string(), r.string(), r.u32())


@dataclass(frozen=True)
class WriteBack:
    KIND = 0x0A
    task: str
    column: str
    rows: tuple[int, ...]
    values: tuple[bytes, ...]

    def encode_body(self, w: Writer) -> None:
        w.string(self.task)
        w.string(self.column)
        _write_rows(w, self.rows)
        w.u32(len(self.values))
        for value in self.values:
            w.blob(value)

    @classmethod
    def decode_body(cls, r: Reader) -> "WriteBack":
        task = r.string()
        column = r.string()
        rows = _read_rows(r)
        values = tuple(r.blob() for _ in range(r.count(4)))
        return cls(task, column, rows, values)


@dataclass(frozen=True)
class WeightSync:
    KIND = 0x0B
    version: int
    payload: bytes

    def encode_body(self, w: Writer) -> None:
        w.u64(self.version)
        w.blob(self.payload)

    @classmethod
    def decode_body(cls, r: Reader) -> "WeightSync":
        return cls(r.u64(), r.blob())


@dataclass(frozen=True)
class TransferComplete:
    KIND = 0x0C

    def encode_body(self, w: Writer) -> None:
        pass

    @classmethod
    def decode_body(cls, r: Reader) -> "TransferComplete":
        return cls()


@dataclass(frozen=True)
class MaySwap:
    KIND = 0x0D
    instance: str

    def encode_body(self, w: Writer) -> None:
        w.string(self.instance)

    @classmethod
    def decode_body(cls, r: Reader) -> "MaySwap":
        return cls(r.string())


@dataclass(frozen=True)
class SwapFinished:
    KIND = 0x0E
    instance: str

    def encode_body(self, w: Writer) -> None:
        w.string(self.instance)

    @classmethod
    def decode_body(cls, r: Reader) -> "SwapFinished":
        return cls(r.string())


@dataclass(frozen=True)
class CoordStatus:
    KIND = 0x0F

    def encode_body(self, w: Writer) -> None:
        pass

    @classmethod
    def decode_body(cls, r: Reader) -> "CoordStatus":
        return cls()


@dataclass(frozen=True)
class Ack:
    KIND = 0x81
    count: int = 0

    def encode_body(self, w: Writer) -> None:
        w.u64(self.count)

    @classmethod
    def decode_body(cls, r: Reader) -> "Ack":
        return cls(r.u64())


@dataclass(frozen=True)
class Cells:
    KIND = 0x82
    cells: tuple[tuple[int, str, bytes], ...]

    def encode_body(self, w: Writer) -> None:
        w.u32(len(self.cells))
        for row, column, value in self.cells:
            w.u64(row)
            w.string(column)
            w.blob(value)

    @classmethod
    def decode_body(cls, r: Reader) -> "Cells":
        return cls(
            tuple(
                (r.u64(), r.string(), r.blob())
                for _ in range(r.count(14))
            )
        )


@dataclass(frozen=True)
class Snapshot:
    KIND = 0x83
    groups: tuple[tuple[tuple[int, ...], tuple[str, ...]], ...]

    def encode_body(self, w: Writer) -> None:
        _write_groups(w, self.groups)

    @classmethod
    def decode_body(cls, r: Reader) -> "Snapshot":
        return cls(_read_groups(r))


@dataclass(frozen=True)
class BatchGrant:
    KIND = 0x84
    status: int
    epoch: int = 0
    task: str = ""
    rows: tuple[int, ...] = ()
    columns: tuple[str, ...] = ()
    locations: tuple[tuple[int, int], ...] = ()
    issued_to: str = ""

    def encode_body(self, w: Writer) -> None:
        w.u8(self.status)
        if self.status == BATCH_OK:
            w.u64(self.epoch)
            w.string(self.task)
            _write_rows(w, self.rows)
            _write_strings(w, self.columns)
            w.u32(len(self.locations))
            for row, unit in self.locations:
                w.u64(row)
                w.u32(unit)
            w.string(self.issued_to)

    @classmethod
    def decode_body(cls, r: Reader) -> "BatchGrant":
        status = r.u8()
        if status not in (BATCH_OK, BATCH_NOT_READY, BATCH_EXHAUSTED):
            raise ProtocolError(f"unknown batch status byte {status}")
        if status != BATCH_OK:
            return cls(status)
        epoch = r.u64()
        task = r.string()
        rows = _read_rows(r)
        columns = _read_strings(r)
        locations = tuple((r.u64(), r.u32()) for _ in range(r.count(12)))
        issued_to = r.string()
        return cls(status, epoch, task, rows, columns, locations, issued_to)


@dataclass(frozen=True)
class ErrorReply:
    KIND = 0x85
    code: str
    message: str

    def encode_body(self, w: Writer) -> None:
        w.string(self.code)
        w.string(self.message)

    @classmethod
    def decode_body(cls, r: Reader) -> "ErrorReply":
        return cls(r.string(), r.string())


@dataclass(frozen=True)
class Experience:
    KIND = 0x86
    status: int
    epoch: int = 0
    rows: tuple[int, ...] = ()
    columns: tuple[str, ...] = ()
    cells: tuple[tuple[int, str, bytes], ...] = ()

    def encode_body(self, w: Writer) -> None:
        w.u8(self.status)
        if self.status == BATCH_OK:
            w.u64(self.epoch)
            _write_rows(w, self.rows)
            _write_strings(w, self.columns)
            w.u32(len(self.cells))
            for row, column, value in self.cells:
                w.u64(row)
                w.string(column)
                w.blob(value)

    @classmethod
    def decode_body(cls, r: Reader) -> "Experience":
        status = r.u8()
        if status not in (BATCH_OK, BATCH_NOT_READY, BATCH_EXHAUSTED):
            raise ProtocolError(f"unknown experience status byte {status}")
        if status != BATCH_OK:
            return cls(status)
        epoch = r.u64()
        rows = _read_rows(r)
        columns = _read_strings(r)
        cells = tuple(
            (r.u64(), r.string(), r.blob()) for _ in range(r.count(14))
        )
        return cls(status, epoch, rows, columns, cells)


@dataclass(frozen=True)
class BoolReply:
    KIND = 0x87
    value: bool

    def encode_body(self, w: Writer) -> None:
        w.u8(1 if self.value else 0)

    @classmethod
    def decode_body(cls, r: Reader) -> "BoolReply":
        raw = r.u8()
        if raw not in (0, 1):
            raise ProtocolError(f"bool byte must be 0 or 1, got {raw}")
        return cls(bool(raw))


@dataclass(frozen=True)
class CoordStatusReply:
    KIND = 0x88
    trainer_version: int
    instance_versions: tuple[tuple[str, int], ...]

    def encode_body(self, w: Writer) -> None:
        w.u64(self.trainer_version)
        w.u32(len(self.instance_versions))
        for instance, version in self.instance_versions:
            w.string(instance)
            w.u64(version)

    @classmethod
    def decode_body(cls, r: Reader) -> "CoordStatusReply":
        trainer = r.u64()
        pairs = tuple((r.string(), r.u64()) for _ in range(r.count(10)))
        return cls(trainer, pairs)


MESSAGE_TYPES = {
    cls.KIND: cls
    for cls in (
        Put,
        Get,
        RegisterController,
        ResetStorageEpoch,
        Notify,
        RequestBatch,
        ResetControllerEpoch,
        PutPrompts,
        GetExperience,
        WriteBack,
        WeightSync,
        TransferComplete,
        MaySwap,
        SwapFinished,
        CoordStatus,
        Ack,
        Cells,
        Snapshot,
        BatchGrant,
        ErrorReply,
        Experience,
        BoolReply,
        CoordStatusReply,
    )
}

Message = (
    Put
    | Get
    | RegisterController
    | ResetStorageEpoch
    | Notify
    | RequestBatch
    | ResetControllerEpoch
    | PutPrompts
    | GetExperience
    | WriteBack
    | WeightSync
    | TransferComplete
    | MaySwap
    | SwapFinished
    | CoordStatus
    | Ack
    | Cells
    | Snapshot
    | BatchGrant
    | ErrorReply
    | Experience
    | BoolReply
    | CoordStatusReply
)


def encode_frame(message: Message) -> bytes:
    w = Writer()
    message.encode_body(w)
    body = w.getvalue()
    length = 1 + len(body)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME} cap")
    return struct.pack(">I", length) + bytes([message.KIND]) + body


def decode_message(kind: int, body: bytes) -> Message:
    cls = MESSAGE_TYPES.get(kind)
    if cls is None:
        raise ProtocolError(f"unknown message kind 0x{kind:02x}")
    reader = Reader(body)
    message = cls.decode_body(reader)
    reader.expect_end()
    return message


def decode_frame(data: bytes) -> Message:
    """Decode one complete frame (prefix included); strict about length."""
    if len(data) < 5:
        raise ProtocolError(f"frame too short: {len(data)} bytes")
    (length,) = struct.unpack(">I", data[:4])
    if length != len(data) - 4:
        raise ProtocolError(
            f"length prefix {length} does not match {len(data) - 4} framed bytes"
        )
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME} cap")
    return decode_message(data[4], data[5:])


def read_frame(stream) -> Message:
    """Read one frame from a file-like stream; None at clean EOF."""
    prefix = stream.read(4)
    if not prefix:
        return None
    if len(prefix) < 4:
        raise ProtocolError("connection closed mid-prefix")
    (length,) = struct.unpack(">I", prefix)
    if length < 1:
        raise ProtocolError("frame length must cover the kind byte")
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME} cap")
    payload = stream.read(length)
    if len(payload) < length:
        raise ProtocolError("connection closed mid-frame")
    return decode_message(payload[0], payload[1:])


def write_frame(stream, message: Message) -> None:
    stream.write(encode_frame(message))
    stream.flush()


def message_to_tuple(message: Message) -> tuple:
    """Stable structural form, handy for golden-file manifests."""
    return (
        type(message).__name__,
        tuple(
            (f.name, getattr(message, f.name)) for f in fields(message)
        ),
    )
