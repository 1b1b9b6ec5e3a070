import random

import pytest

from lldc.crypto import SharedSecret
from lldc.dcnet import (CELL_HEADER_BYTES, CONTROL_CONN, Chunk, DownstreamFlags, DownstreamMessage,
                        DownstreamQueues, RoundAccumulator, StreamReassembler, UpstreamCell,
                        UpstreamQueue, assemble_downstream, client_cipher, data_capacity,
                        frame_packet, guard_cipher, open_chunks, relay_combine, seal_cell)
from lldc.errors import CellOverflow, FrameError

CELL_BITS = 1024
CELL_BYTES = CELL_BITS // 8


def secret_matrix(n, m, rng):
    return [[SharedSecret(rng.randbytes(32), f"client-{i}", f"guard-{j}") for j in range(m)]
            for i in range(n)]


def test_combine_recovers_owner_cell_for_every_shape():
    for n in range(2, 7):
        for m in range(1, 4):
            rng = random.Random(n * 10 + m)
            secrets = secret_matrix(n, m, rng)
            for rnd in range(1000):
                owner = rng.randrange(n)
                payload = rng.randbytes(rng.randrange(data_capacity(CELL_BYTES) + 1))
                cell = seal_cell(rng.randrange(1, CONTROL_CONN), payload, b"r" * 32)
                clients = [client_cipher(secrets[i], rnd, i == owner, cell, CELL_BITS).bits
                           for i in range(n)]
                guards = [guard_cipher([secrets[i][j] for i in range(n)], rnd, CELL_BITS).bits
                          for j in range(m)]
                assert relay_combine(guards, clients) == cell.encode(CELL_BYTES)


def test_idle_round_combines_to_zero(rng):
    secrets = secret_matrix(3, 2, rng)
    clients = [client_cipher(secrets[i], 5, i == 0, None, CELL_BITS).bits for i in range(3)]
    guards = [guard_cipher([secrets[i][j] for i in range(3)], 5, CELL_BITS).bits for j in range(2)]
    out = relay_combine(guards, clients)
    assert out == bytes(CELL_BYTES)
    assert UpstreamCell.decode(out).is_zero


def test_cell_layout_and_strict_padding():
    cell = seal_cell(0x1234, b"payload", b"k" * 32)
    raw = cell.encode(CELL_BYTES)
    assert len(raw) == CELL_BYTES
    assert UpstreamCell.decode(raw) == cell
    assert raw[CELL_HEADER_BYTES + len(b"payload"):] == bytes(CELL_BYTES - CELL_HEADER_BYTES - 7)

    dirty = bytearray(raw)
    dirty[-1] = 1
    with pytest.raises(FrameError):
        UpstreamCell.decode(bytes(dirty))

    zero_conn = bytearray(raw)
    zero_conn[0:4] = bytes(4)
    with pytest.raises(FrameError):
        UpstreamCell.decode(bytes(zero_conn))


def test_cell_overflow():
    with pytest.raises(CellOverflow):
        UpstreamCell(1, bytes(32), bytes(CELL_BYTES)).encode(CELL_BYTES)
    with pytest.raises(CellOverflow):
        client_cipher([SharedSecret(b"s" * 32)], 0, True, bytes(CELL_BYTES - 1), CELL_BITS)


def test_data_capacity_leaves_room_for_a_retransmission():
    assert data_capacity(CELL_BYTES) == CELL_BYTES - 38 - 48


def test_accumulator_folds_and_forgets():
    acc = RoundAccumulator(4)
    assert acc.add(1, b"\x01\x00\x00\x00") == 1
    assert acc.add(1, b"\x03\x00\x00\x00") == 2
    acc.add(2, b"\xff\xff\xff\xff")
    assert acc.value(1) == b"\x02\x00\x00\x00"
    assert acc.rounds() == [1, 2]
    assert acc.pop(1) == b"\x02\x00\x00\x00"
    assert acc.count(1) == 0 and len(acc) == 1
    with pytest.raises(FrameError):
        acc.add(3, b"\x00")


def test_reassembler_splits_and_caps():
    r = StreamReassembler(cap=64)
    stream = frame_packet(b"hello") + frame_packet(b"world!")
    assert r.feed(7, stream[:3]) == []
    assert r.feed(7, stream[3:12]) == [b"hello"]
    assert r.feed(7, stream[12:]) == [b"world!"]
    assert r.pending(7) == 0
    with pytest.raises(FrameError):
        r.feed(8, frame_packet(bytes(100)))


def test_upstream_queue_round_robin():
    q = UpstreamQueue()
    q.push(1, b"aaaa")
    q.push(2, b"bb")
    first = q.take(3)
    second = q.take(100)
    assert first[0] == 1 and second[0] == 2
    assert q.take(100) == (1, frame_packet(b"aaaa")[3:])
    assert not q.has_data()
    assert q.take(10) is None


def test_downstream_message_encoding_is_exact():
    msg = DownstreamMessage(9, DownstreamFlags(retransmit_required=True, load_request=True), 4, 2,
                            (Chunk(5, b"abc"), Chunk(6, b"")))
    raw = msg.encode()
    assert DownstreamMessage.decode(raw) == msg
    assert DownstreamMessage.decode(DownstreamMessage(1).encode()).flags == DownstreamFlags()
    with pytest.raises(FrameError):
        DownstreamMessage.decode(raw + b"\x00")
    with pytest.raises(FrameError):
        DownstreamMessage.decode(raw[:-2])


def test_downstream_reaches_only_the_pseudonym_holder(toy, rng):
    base = toy.power(11)
    x1, x2 = 5, 9
    queues = DownstreamQueues()
    queues.bind(100, toy.exp(base, x1))
    queues.bind(200, toy.exp(base, x2))
    queues.push(100, b"reply-1")
    queues.push(200, b"reply-2")
    msg = assemble_downstream(3, queues, 4096, toy, base, rng)
    assert not queues.has_pending()
    mine = open_chunks(msg, [100, 200], toy, x1)
    assert mine == [(100, frame_packet(b"reply-1"))]
    with pytest.raises(FrameError):
        queues.push(300, b"unbound")


def test_downstream_respects_the_cap(toy, rng):
    queues = DownstreamQueues()
    queues.bind(1, toy.power(3))
    queues.push(1, bytes(500))
    msg = assemble_downstream(0, queues, 200, toy, toy.generator, rng)
    assert msg.body_length <= 200
    assert queues.pending_bytes() > 0
