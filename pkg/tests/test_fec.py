import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbra.fec import (
    BlockLengthOutOfRange,
    FecBlockState,
    IntervalOutOfRange,
    NonConsecutiveSequence,
    encode_block,
    fec_bitrate,
    try_recover,
)
from fbra.types import FecPacket, MediaPacket, seq_add

from .oracles import xor_fold


def packets(payloads, base=100, ssrc=1):
    return [MediaPacket(ssrc, seq_add(base, i), p) for i, p in enumerate(payloads)]


def block_without(pkts, fec, drop, deadline=10**9):
    state = FecBlockState.for_fec(fec, deadline)
    for i, p in enumerate(pkts):
        if i not in drop:
            state.add(p)
    return state


def test_identical_payloads_give_zero_parity():
    fec = encode_block(packets([b"\x5a\x17\x99"] * 2))
    assert fec.parity_payload == bytes(3)
    assert fec.length_field == 0


def test_parity_and_length_field():
    fec = encode_block(packets([b"\x01", b"\x02\x03"]))
    assert fec.parity_payload == b"\x03\x03"
    assert fec.length_field == 1 ^ 2
    assert fec.base_seq == 100 and fec.block_len == 2


@pytest.mark.parametrize("n", [0, 1, 15])
def test_block_length_bounds(n):
    with pytest.raises(BlockLengthOutOfRange):
        encode_block(packets([b"x"] * n))


def test_non_consecutive_sequence():
    pkts = [MediaPacket(1, 5, b"a"), MediaPacket(1, 7, b"b")]
    with pytest.raises(NonConsecutiveSequence):
        encode_block(pkts)


def test_block_may_wrap():
    pkts = packets([b"ab", b"c", b"def"], base=65535)
    fec = encode_block(pkts)
    assert [p.seq for p in pkts] == [65535, 0, 1]
    assert try_recover(block_without(pkts, fec, {1}), 0) == pkts[1]


def test_recover_middle_packet():
    pkts = packets([b"first", b"second!", b"3rd"])
    fec = encode_block(pkts)
    rebuilt = try_recover(block_without(pkts, fec, {1}), 0)
    assert rebuilt == pkts[1]


def test_two_erasures_are_not_recovered():
    pkts = packets([b"one", b"two", b"three"])
    fec = encode_block(pkts)
    assert try_recover(block_without(pkts, fec, {1, 2}), 0) is None


def test_complete_block_needs_no_recovery():
    pkts = packets([b"one", b"two", b"three"])
    assert try_recover(block_without(pkts, encode_block(pkts), set()), 0) is None


def test_no_recovery_after_deadline():
    pkts = packets([b"one", b"two", b"three"])
    state = block_without(pkts, encode_block(pkts), {0}, deadline=1_000)
    assert try_recover(state, 1_000) is not None
    assert try_recover(state, 1_001) is None


def test_block_state_rejects_foreign_packet():
    pkts = packets([b"a", b"b"])
    state = FecBlockState.for_fec(encode_block(pkts), 0)
    with pytest.raises(ValueError):
        state.add(MediaPacket(1, 300, b"z"))


@given(st.lists(st.binary(min_size=1, max_size=300), min_size=2, max_size=14))
def test_parity_matches_fold_oracle(payloads):
    fec = encode_block(packets(payloads))
    assert fec.parity_payload == xor_fold(payloads)
    length = 0
    for p in payloads:
        length ^= len(p)
    assert fec.length_field == length


@settings(max_examples=300)
@given(
    st.lists(st.binary(min_size=1, max_size=1472), min_size=2, max_size=14),
    st.integers(min_value=0, max_value=65535),
    st.data(),
)
def test_single_erasure_round_trip(payloads, base, data):
    pkts = packets(payloads, base=base)
    fec = encode_block(pkts)
    lost = data.draw(st.integers(min_value=0, max_value=len(pkts) - 1))
    assert try_recover(block_without(pkts, fec, {lost}), 0) == pkts[lost]


def test_round_trip_survives_the_wire():
    rng = random.Random(4)
    pkts = [MediaPacket.build(1, 10 + i, rng.randint(24, 1488), 3, 0, 77) for i in range(6)]
    fec = encode_block(pkts, send_ts=77)
    wire = FecPacket.from_bytes(fec.to_bytes())
    rebuilt = try_recover(block_without(pkts, wire, {4}), 0)
    assert MediaPacket.from_payload(1, rebuilt.seq, rebuilt.payload) == pkts[4]


def test_fec_bitrate_examples():
    assert fec_bitrate(140_000, 14, 1000) == 10_160
    assert fec_bitrate(100_000, 2, 484) == 100_000 * 500 // 968
    assert fec_bitrate(0, 7, 500) == 0


@pytest.mark.parametrize("interval", [1, 15])
def test_fec_bitrate_interval_bounds(interval):
    with pytest.raises(IntervalOutOfRange):
        fec_bitrate(100_000, interval, 500)
