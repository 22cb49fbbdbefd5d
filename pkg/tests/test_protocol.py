import struct
from pathlib import Path

import numpy as np
import pytest

from hvactrade.agent import LocalAgent
from hvactrade.coordinator import run
from hvactrade.errors import (
    DecodeError,
    ProtocolViolation,
    SynchronizationTimeout,
)
from hvactrade.model import Tariff, UserParams
from hvactrade.protocol import (
    MAX_FRAME,
    TAG_BROADCAST,
    TAG_PROPOSAL,
    CoordinatorBroadcast,
    InProcTransport,
    TradeProposal,
    barrier_collect,
    decode,
    encode,
    run_agent_loop,
    split_frames,
)
from hvactrade.scenario import load_scenario

FIXTURES = Path(__file__).resolve().parent.parent / "scenarios"


def proposal(uid=1, iteration=1, trades=None):
    if trades is None:
        trades = {2: np.array([0.5, -0.25])}
    return TradeProposal(uid, iteration, trades)


def broadcast(iteration=1, ids=(2,), h=2, rho=1.0, done=False):
    aux = {j: np.full(h, 0.125 * j) for j in ids}
    dual = {j: np.full(h, -0.5 * j) for j in ids}
    return CoordinatorBroadcast(iteration, aux, dual, rho, done)


# --- serialization -------------------------------------------------------

def test_proposal_roundtrip_is_bit_exact():
    msg = TradeProposal(7, 3, {
        2: np.array([0.1, -2.5, 1e-9, 0.0]),
        9: np.array([1.0 / 3.0, -0.0, 7e300, 5e-324]),
    })
    back = decode(encode(msg))
    assert isinstance(back, TradeProposal)
    assert back.user_id == 7 and back.iteration == 3
    assert set(back.trades) == {2, 9}
    for j in (2, 9):
        assert back.trades[j].dtype == np.float64
        assert np.array_equal(back.trades[j], msg.trades[j])


def test_broadcast_roundtrip_is_bit_exact():
    msg = CoordinatorBroadcast(
        iteration=5,
        aux_row={1: np.array([0.25, -0.125]), 4: np.array([1e-16, 3.5])},
        dual_row={1: np.array([-1.0, 0.0]), 4: np.array([2.0, -0.3])},
        rho=1.0 / 3.0,
        done=True)
    back = decode(encode(msg))
    assert isinstance(back, CoordinatorBroadcast)
    assert back.iteration == 5 and back.done is True
    assert back.rho == msg.rho
    for j in (1, 4):
        assert np.array_equal(back.aux_row[j], msg.aux_row[j])
        assert np.array_equal(back.dual_row[j], msg.dual_row[j])


def test_proposal_byte_layout():
    """Little-endian header, one tag byte, id-sorted rows of doubles."""
    msg = TradeProposal(1, 1, {2: np.array([1.5, -0.25])})
    payload = (struct.pack("<IIII", 1, 1, 1, 2)
               + struct.pack("<I", 2)
               + np.array([1.5, -0.25]).astype("<f8").tobytes())
    expected = (struct.pack("<I", 1 + len(payload))
                + struct.pack("<B", TAG_PROPOSAL) + payload)
    assert encode(msg) == expected
    assert len(expected) == 41


@pytest.mark.parametrize("h", [1, 2, 4, 24])
@pytest.mark.parametrize("p", [1, 2, 3])
def test_proposal_frame_size_formula(h, p):
    # size depends only on the counterparty count and horizon
    trades = {j + 2: np.full(h, float(j)) for j in range(p)}
    frame = encode(TradeProposal(1, 9, trades))
    assert len(frame) == 4 + 1 + 16 + p * (4 + 8 * h)


def test_empty_proposal_frame_is_header_only():
    frame = encode(TradeProposal(1, 1, {}))
    assert len(frame) == 21
    back = decode(frame)
    assert back.trades == {}


@pytest.mark.parametrize("h", [1, 6, 24])
@pytest.mark.parametrize("p", [1, 4])
def test_broadcast_frame_size_formula(h, p):
    msg = broadcast(ids=tuple(range(2, 2 + p)), h=h)
    assert len(encode(msg)) == 4 + 1 + 21 + p * (4 + 16 * h)


def test_rows_serialize_in_id_order():
    a = encode(TradeProposal(1, 1, {5: np.ones(1), 2: np.zeros(1)}))
    b = encode(TradeProposal(1, 1, {2: np.zeros(1), 5: np.ones(1)}))
    assert a == b


# --- decode failure modes -------------------------------------------------

def test_decode_rejects_short_frame():
    with pytest.raises(DecodeError, match="header"):
        decode(b"\x01\x00")


def test_decode_rejects_length_mismatch():
    frame = bytearray(encode(proposal()))
    frame[0] ^= 0x01
    with pytest.raises(DecodeError, match="does not match"):
        decode(bytes(frame))


def test_decode_rejects_oversize_length_prefix():
    frame = struct.pack("<I", MAX_FRAME + 1) + b"\x01" + b"\x00" * 8
    with pytest.raises(DecodeError, match="exceeds"):
        decode(frame)


def test_decode_rejects_unknown_tag():
    body = struct.pack("<B", 9) + b"\x00" * 4
    frame = struct.pack("<I", len(body)) + body
    with pytest.raises(DecodeError, match="tag 9"):
        decode(frame)


def test_decode_names_truncation_offset():
    # header promises two rows but the payload carries one
    payload = (struct.pack("<IIII", 1, 1, 2, 2)
               + struct.pack("<I", 2) + b"\x00" * 16)
    body = struct.pack("<B", TAG_PROPOSAL) + payload
    frame = struct.pack("<I", len(body)) + body
    with pytest.raises(DecodeError, match="offset 41"):
        decode(frame)


def test_decode_rejects_trailing_bytes():
    good = encode(proposal())
    body = good[4:] + b"\xde\xad"
    frame = struct.pack("<I", len(body)) + body
    with pytest.raises(DecodeError, match="trailing"):
        decode(frame)


def test_decode_rejects_repeated_counterparty():
    row = struct.pack("<I", 2) + b"\x00" * 8
    payload = struct.pack("<IIII", 1, 1, 2, 1) + row + row
    body = struct.pack("<B", TAG_PROPOSAL) + payload
    frame = struct.pack("<I", len(body)) + body
    with pytest.raises(DecodeError, match="repeated counterparty 2"):
        decode(frame)


def test_decode_rejects_self_trade():
    payload = (struct.pack("<IIII", 2, 1, 1, 1)
               + struct.pack("<I", 2) + b"\x00" * 8)
    body = struct.pack("<B", TAG_PROPOSAL) + payload
    frame = struct.pack("<I", len(body)) + body
    with pytest.raises(DecodeError):
        decode(frame)


@pytest.mark.parametrize("template", ["proposal", "broadcast"])
def test_single_byte_corruption_never_escapes_decode(template):
    """Any one-byte corruption either still parses or raises DecodeError;
    no other exception may escape."""
    frame = encode(proposal() if template == "proposal"
                   else broadcast(ids=(2, 3)))
    for pos in range(len(frame)):
        mutated = bytearray(frame)
        mutated[pos] ^= 0xFF
        try:
            decode(bytes(mutated))
        except DecodeError:
            pass


# --- stream splitting -----------------------------------------------------

def test_split_frames_separates_messages_and_tail():
    f1, f2 = encode(proposal()), encode(broadcast())
    tail = f1[:7]
    frames, rest = split_frames(f1 + f2 + tail)
    assert frames == [f1, f2]
    assert rest == tail


def test_split_frames_keeps_incomplete_header():
    frames, rest = split_frames(b"\x01\x02")
    assert frames == [] and rest == b"\x01\x02"
    assert split_frames(b"") == ([], b"")


def test_split_frames_rejects_oversize_prefix():
    with pytest.raises(DecodeError, match="exceeds"):
        split_frames(struct.pack("<I", MAX_FRAME + 1) + b"\x00" * 16)


# --- in-process transport --------------------------------------------------

def test_inproc_transport_routes_and_records():
    tr = InProcTransport((1, 2))
    ch1 = tr.channel(1)
    ch1.send(proposal(uid=1))
    got = tr.poll(0.1)
    assert got.user_id == 1
    assert tr.poll(0.0) is None

    reply = broadcast(ids=(2,))
    tr.send_to(1, reply)
    back = ch1.recv(timeout=1.0)
    assert np.array_equal(back.aux_row[2], reply.aux_row[2])
    assert len(tr.wire_frames) == 2


def test_inproc_rerequest_replays_last_broadcast():
    tr = InProcTransport((1, 2))
    assert tr.rerequest(1) is False
    tr.send_to(1, broadcast(ids=(2,)))
    tr.channel(1).recv(timeout=1.0)
    assert tr.rerequest(1) is True
    again = tr.channel(1).recv(timeout=1.0)
    assert again.iteration == 1


def test_inproc_poll_rejects_broadcast_frames():
    tr = InProcTransport((1, 2))
    tr.channel(1).send(broadcast(ids=(2,)))
    with pytest.raises(ProtocolViolation, match="proposal"):
        tr.poll(0.1)


def test_inproc_unknown_channel_rejected():
    with pytest.raises(ProtocolViolation, match="unknown"):
        InProcTransport((1, 2)).channel(5)


# --- collection barrier -----------------------------------------------------

class ScriptedTransport:
    """Feeds a fixed poll script; records rerequests."""

    def __init__(self, script, expected_ids=(1, 2), allow_rerequest=True):
        self.script = list(script)
        self.expected_ids = tuple(expected_ids)
        self.rerequests = []
        self.allow_rerequest = allow_rerequest

    def poll(self, timeout):
        return self.script.pop(0) if self.script else None

    def rerequest(self, user_id):
        self.rerequests.append(user_id)
        return self.allow_rerequest


def p_for(uid, iteration):
    return TradeProposal(uid, iteration, {3 - uid: np.zeros(1)})


def test_barrier_sorts_by_user_id():
    tr = ScriptedTransport([p_for(2, 1), p_for(1, 1)])
    got = barrier_collect(tr, 2, 1, timeout=1.0)
    assert [m.user_id for m in got] == [1, 2]


def test_barrier_flags_duplicates():
    tr = ScriptedTransport([p_for(1, 1), p_for(1, 1)])
    with pytest.raises(ProtocolViolation, match="duplicate"):
        barrier_collect(tr, 2, 1, timeout=1.0)


def test_barrier_retries_stale_sender_once():
    tr = ScriptedTransport([p_for(1, 1), p_for(2, 2), p_for(1, 2)])
    got = barrier_collect(tr, 2, 2, timeout=1.0)
    assert tr.rerequests == [1]
    assert [m.iteration for m in got] == [2, 2]


def test_barrier_second_stale_message_is_fatal():
    tr = ScriptedTransport([p_for(1, 1), p_for(1, 1)])
    with pytest.raises(ProtocolViolation, match="round 1"):
        barrier_collect(tr, 2, 2, timeout=1.0)
    assert tr.rerequests == [1]


def test_barrier_stale_without_replay_is_fatal():
    tr = ScriptedTransport([p_for(1, 1)], allow_rerequest=False)
    with pytest.raises(ProtocolViolation, match="tagged for round 1"):
        barrier_collect(tr, 2, 2, timeout=1.0)


def test_barrier_timeout_names_silent_users():
    tr = ScriptedTransport([p_for(1, 1)])
    with pytest.raises(SynchronizationTimeout) as exc:
        barrier_collect(tr, 2, 1, timeout=0.05)
    assert exc.value.missing == (2,)
    assert "users [2]" in str(exc.value)


# --- agent loop -------------------------------------------------------------

class ScriptedChannel:
    def __init__(self, replies):
        self.replies = list(replies)
        self.sent = []

    def send(self, message):
        self.sent.append(message)

    def recv(self, timeout: float = 300.0):
        return self.replies.pop(0)


def loop_agent():
    h = 2
    params = UserParams(
        id=1, thermal_capacitance=3.3, thermal_resistance=1.35,
        hvac_efficiency=2.5, comfort_weight=0.1, temp_ref=22.0,
        temp_min=20.0, temp_max=24.0, grid_cap=6.0,
        renewable_avail=np.zeros(h), inflexible_load=np.full(h, 1.0),
        outdoor_temp=np.full(h, 22.0))
    tariff = Tariff(0.25, 0.5, np.full(h, 0.1))
    return LocalAgent(params, tariff, partner_ids=(2,))


def test_agent_loop_resends_on_duplicate_broadcast():
    final = broadcast(iteration=1, ids=(2,), h=2, rho=0.5, done=True)
    stale = broadcast(iteration=0, ids=(2,), h=2)
    channel = ScriptedChannel([stale, final])
    agent = run_agent_loop(loop_agent(), channel, rho1=2.0)
    # the stale echo triggered one re-send of the same round-1 proposal
    assert [m.iteration for m in channel.sent] == [1, 1]
    assert np.array_equal(channel.sent[0].trades[2], channel.sent[1].trades[2])
    assert agent.rho == 0.5


def test_agent_loop_rejects_broadcast_from_the_future():
    channel = ScriptedChannel([broadcast(iteration=7, ids=(2,), h=2)])
    with pytest.raises(ProtocolViolation, match="round 7"):
        run_agent_loop(loop_agent(), channel, rho1=1.0)


def test_agent_loop_advances_until_done():
    replies = [broadcast(iteration=1, ids=(2,), h=2, rho=1.0),
               broadcast(iteration=2, ids=(2,), h=2, rho=0.5),
               broadcast(iteration=3, ids=(2,), h=2, rho=0.25, done=True)]
    channel = ScriptedChannel(replies)
    agent = run_agent_loop(loop_agent(), channel, rho1=1.0)
    assert [m.iteration for m in channel.sent] == [1, 2, 3]
    assert agent.iteration == 3
    assert agent.rho == 0.25


# --- transport equivalence ---------------------------------------------------

def test_socket_run_matches_inproc_run():
    """The negotiated outcome must not depend on the wire."""
    import json

    scenario = load_scenario(FIXTURES / "two_user_complementary.yaml")
    a = run(scenario, transport="inproc")
    b = run(scenario, transport="socket")
    dump = lambda r: json.dumps(r.to_dict(), sort_keys=True)
    assert dump(a) == dump(b)
    assert a.iterations == b.iterations
