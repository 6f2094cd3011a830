"""Frame codec: round-trips, strict-decode rejections, hostile input."""

import io
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowline import wire
from flowline.errors import ProtocolError

SAMPLES = [
    wire.Put(((0, "prompt", b"hello"), (7, "response", b"\x00\xff" * 9))),
    wire.Put(()),
    wire.Get((3, 1, 2), ("prompt", "response")),
    wire.RegisterController("127.0.0.1:9001"),
    wire.ResetStorageEpoch(4, (0, 2, 4)),
    wire.Notify(1, 3, (((5, 6), ("response",)), ((7,), ("response", "ref")))),
    wire.RequestBatch("train", "train/0", 8),
    wire.RequestBatch(
        "train", "train/1", 4, wire.POLICY_TOKEN_BALANCED, ((0, 120), (1, 64))
    ),
    wire.ResetControllerEpoch("rollout", 2, 256),
    wire.PutPrompts((b"p0", b"", b"p2")),
    wire.GetExperience("train", "api/0", 16),
    wire.WriteBack("rollout", "response", (0, 1), (b"a", b"bb")),
    wire.WeightSync(3, b"v3-weights"),
    wire.TransferComplete(),
    wire.MaySwap("rollout-0"),
    wire.SwapFinished("rollout-1"),
    wire.CoordStatus(),
    wire.Ack(42),
    wire.Cells(((9, "prompt", b"x"),)),
    wire.Snapshot((((0, 1, 2, 3), ("prompt",)),)),
    wire.BatchGrant(wire.BATCH_NOT_READY),
    wire.BatchGrant(wire.BATCH_EXHAUSTED),
    wire.BatchGrant(
        wire.BATCH_OK,
        epoch=2,
        task="train",
        rows=(4, 9),
        columns=("prompt", "response"),
        locations=((4, 0), (9, 1)),
        issued_to="train/0",
    ),
    wire.ErrorReply("WRITE_CONFLICT", "cell (3, 'response') already written"),
    wire.Experience(wire.BATCH_NOT_READY),
    wire.Experience(
        wire.BATCH_OK,
        epoch=1,
        rows=(0, 1),
        columns=("prompt",),
        cells=((0, "prompt", b"a"), (1, "prompt", b"b")),
    ),
    wire.BoolReply(True),
    wire.BoolReply(False),
    wire.CoordStatusReply(5, (("rollout-0", 5), ("rollout-1", 4))),
]


@pytest.mark.parametrize(
    "message", SAMPLES, ids=lambda m: type(m).__name__ + str(SAMPLES.index(m))
)
def test_round_trip(message):
    frame = wire.encode_frame(message)
    assert wire.decode_frame(frame) == message


def test_every_kind_has_a_sample():
    covered = {type(m).KIND for m in SAMPLES}
    assert covered == set(wire.MESSAGE_TYPES)


def test_frame_layout():
    frame = wire.encode_frame(wire.Ack(7))
    (length,) = struct.unpack(">I", frame[:4])
    assert length == len(frame) - 4
    assert frame[4] == wire.Ack.KIND
    assert frame[5:] == struct.pack(">Q", 7)


def test_stream_round_trip_multiple_frames():
    buf = io.BytesIO()
    for message in SAMPLES:
        wire.write_frame(buf, message)
    buf.seek(0)
    out = []
    while (message := wire.read_frame(buf)) is not None:
        out.append(message)
    assert out == SAMPLES


class TestStrictDecode:
    def test_unknown_kind(self):
        with pytest.raises(ProtocolError, match="unknown message kind"):
            wire.decode_message(0x7E, b"")

    def test_truncated_body(self):
        frame = wire.encode_frame(wire.WeightSync(3, b"abcdef"))
        with pytest.raises(ProtocolError):
            wire.decode_message(frame[4], frame[5:-2])

    def test_trailing_bytes(self):
        frame = wire.encode_frame(wire.Ack(1))
        with pytest.raises(ProtocolError, match="trailing"):
            wire.decode_message(frame[4], frame[5:] + b"\x00")

    def test_length_prefix_mismatch(self):
        frame = bytearray(wire.encode_frame(wire.Ack(1)))
        frame[3] += 1
        with pytest.raises(ProtocolError, match="length prefix"):
            wire.decode_frame(bytes(frame))

    def test_zero_length_frame(self):
        with pytest.raises(ProtocolError, match="kind byte"):
            wire.read_frame(io.BytesIO(struct.pack(">I", 0)))

    def test_oversized_length_refused_before_reading(self):
        stream = io.BytesIO(struct.pack(">I", wire.MAX_FRAME + 1))
        with pytest.raises(ProtocolError, match="cap"):
            wire.read_frame(stream)

    def test_clean_eof_is_none(self):
        assert wire.read_frame(io.BytesIO(b"")) is None

    def test_eof_mid_prefix(self):
        with pytest.raises(ProtocolError, match="mid-prefix"):
            wire.read_frame(io.BytesIO(b"\x00\x00"))

    def test_eof_mid_frame(self):
        frame = wire.encode_frame(wire.MaySwap("rollout-0"))
        with pytest.raises(ProtocolError, match="mid-frame"):
            wire.read_frame(io.BytesIO(frame[:-1]))

    def test_bad_status_byte(self):
        with pytest.raises(ProtocolError, match="status byte"):
            wire.decode_message(wire.BatchGrant.KIND, b"\x09")

    def test_bad_policy_byte(self):
        body = wire.Writer()
        wire.RequestBatch("t", "t/0", 1).encode_body(body)
        raw = bytearray(body.getvalue())
        # policy byte sits right after two strings and a u32
        raw[2 + 1 + 2 + 3 + 4] = 9
        with pytest.raises(ProtocolError, match="policy byte"):
            wire.decode_message(wire.RequestBatch.KIND, bytes(raw))

    def test_fifo_with_token_counts(self):
        w = wire.Writer()
        w.string("t")
        w.string("t/0")
        w.u32(4)
        w.u8(wire.POLICY_FIFO)
        w.u32(1)
        w.u64(0)
        w.u64(10)
        with pytest.raises(ProtocolError, match="fifo"):
            wire.decode_message(wire.RequestBatch.KIND, w.getvalue())

    def test_bad_bool_byte(self):
        with pytest.raises(ProtocolError, match="bool byte"):
            wire.decode_message(wire.BoolReply.KIND, b"\x02")

    def test_bad_utf8_string(self):
        body = struct.pack(">H", 2) + b"\xff\xfe"
        with pytest.raises(ProtocolError, match="UTF-8"):
            wire.decode_message(wire.MaySwap.KIND, body)

    def test_absurd_list_count(self):
        body = struct.pack(">I", 0xFFFFFFFF)
        with pytest.raises(ProtocolError, match="impossible"):
            wire.decode_message(wire.PutPrompts.KIND, body)

    def test_string_too_long_to_encode(self):
        w = wire.Writer()
        with pytest.raises(ProtocolError, match="too long"):
            w.string("x" * 70000)

    def test_u32_range_enforced_on_encode(self):
        w = wire.Writer()
        with pytest.raises(ProtocolError, match="out of range"):
            w.u32(-1)


rows_st = st.lists(
    st.integers(min_value=0, max_value=2**64 - 1), max_size=6
).map(tuple)
cols_st = st.lists(st.text(max_size=8), max_size=4).map(tuple)
blob_st = st.binary(max_size=64)


@st.composite
def messages(draw):
    pick = draw(st.integers(min_value=0, max_value=5))
    if pick == 0:
        entries = draw(
            st.lists(
                st.tuples(
                    st.integers(min_value=0, max_value=2**64 - 1),
                    st.text(max_size=8),
                    blob_st,
                ),
                max_size=5,
            ).map(tuple)
        )
        return wire.Put(entries)
    if pick == 1:
        return wire.Get(draw(rows_st), draw(cols_st))
    if pick == 2:
        groups = draw(
            st.lists(st.tuples(rows_st, cols_st), max_size=3).map(tuple)
        )
        return wire.Notify(
            draw(st.integers(min_value=0, max_value=2**32 - 1)),
            draw(st.integers(min_value=0, max_value=2**64 - 1)),
            groups,
        )
    if pick == 3:
        return wire.WeightSync(
            draw(st.integers(min_value=0, max_value=2**64 - 1)), draw(blob_st)
        )
    if pick == 4:
        counts = draw(
            st.lists(
                st.tuples(
                    st.integers(min_value=0, max_value=2**64 - 1),
                    st.integers(min_value=0, max_value=2**64 - 1),
                ),
                min_size=1,
                max_size=4,
            ).map(tuple)
        )
        return wire.RequestBatch(
            draw(st.text(max_size=8)),
            draw(st.text(max_size=8)),
            draw(st.integers(min_value=0, max_value=2**32 - 1)),
            wire.POLICY_TOKEN_BALANCED,
            counts,
        )
    return wire.ErrorReply(draw(st.text(max_size=12)), draw(st.text(max_size=40)))


@given(messages())
@settings(max_examples=200, deadline=None)
def test_property_round_trip(message):
    assert wire.decode_frame(wire.encode_frame(message)) == message


def test_fuzz_decode_never_crashes():
    """Garbage in, ProtocolError (or a valid message) out; nothing else."""
    rng = random.Random(4242)
    for _ in range(500):
        blob = rng.randbytes(rng.randrange(0, 64))
        try:
            wire.decode_message(
                rng.randrange(0, 256), blob
            )
        except ProtocolError:
            pass


def test_fuzz_mutated_real_frames():
    rng = random.Random(99)
    for _ in range(500):
        frame = bytearray(wire.encode_frame(rng.choice(SAMPLES)))
        for _ in range(rng.randrange(1, 4)):
            frame[rng.randrange(len(frame))] = rng.randrange(256)
        try:
            wire.decode_frame(bytes(frame))
        except ProtocolError:
            pass


def test_message_to_tuple_is_stable():
    first = wire.message_to_tuple(SAMPLES[2])
    assert first == ("Get", (("rows", (3, 1, 2)), ("columns", ("prompt", "response"))))
