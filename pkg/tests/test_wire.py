import pytest
from hypothesis import given, strategies as st

from gradmirror.errors import ProtocolError
from gradmirror.fabric import wire as W


frames = st.builds(
    W.WireFrame,
    msg_type=st.sampled_from([W.MsgType.DATA, W.MsgType.CTRL, W.MsgType.ACK]),
    flags=st.just(int(W.Flags.TAGGED)),
    dp_group=st.integers(0, 2**16 - 1), src_rank=st.integers(0, 2**16 - 1),
    channel_id=st.integers(0, 2**16 - 1), iteration=st.integers(0, 2**64 - 1),
    bucket_id=st.integers(0, 2**32 - 1), chunk_id=st.integers(0, 2**32 - 1),
    round=st.integers(0, 2**16 - 1), shadow_shard=st.integers(0, 254),
    inner_seq=st.integers(0, 2**64 - 1), byte_offset=st.integers(0, 2**32 - 1),
    payload=st.binary(max_size=300),
)


def test_header_is_48_bytes():
    assert W.HEADER_LEN == 48
    assert len(W.encode(W.WireFrame())) == 48


@given(frames)
def test_roundtrip(frame):
    assert W.decode(W.encode(frame)) == frame


def test_credit_frame_carries_count_in_length():
    raw = W.encode(W.credit_frame(17))
    assert len(raw) == 48
    assert W.decode(raw).credits == 17


def test_little_endian_magic():
    assert W.encode(W.WireFrame())[:4] == bytes.fromhex("544d4b43")


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"\0\0\0\0" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x09" + b[5:], "version"),
    (lambda b: b[:5] + b"\x07" + b[6:], "msg_type"),
    (lambda b: b[:20], "short"),
    (lambda b: b + b"x", "length"),
])
def test_decode_rejects(mutate, msg):
    raw = W.encode(W.WireFrame(payload=b"abc"))
    with pytest.raises(ProtocolError, match=msg):
        W.decode(mutate(raw))


def test_untagged_data_needs_sentinel():
    with pytest.raises(ProtocolError):
        W.encode(W.WireFrame(shadow_shard=0))


@given(st.lists(frames, max_size=8), st.lists(st.integers(1, 97), min_size=1, max_size=10))
def test_stream_reader_any_split(fs, cuts):
    blob = b"".join(W.encode(f) for f in fs)
    reader, out, i, k = W.FrameReader(), [], 0, 0
    while i < len(blob):
        step = cuts[k % len(cuts)]
        out += reader.feed(blob[i:i + step])
        i += step
        k += 1
    assert out == fs and reader.pending == 0
