import random
from dataclasses import replace

import pytest

from lldc.dcnet import UpstreamCell, seal_cell
from lldc.disruption import (EXCLUDED, UNTRACEABLE, BlameContext, HonestResponder, RetransmitRecord,
                             apply_premask, check_secret_reveal, find_flipped_zero, make_evidence,
                             sign_request, verify_trap)
from lldc.equivocation import EquivocationResponder
from lldc.errors import FrameError
from lldc.harness import build_drill_world, drill_round

CELL_BITS = 1024


@pytest.fixture(scope="module")
def world():
    return build_drill_world(3, 2, seed=42)


def test_trap_accepts_sealed_and_zero_cells():
    cell = seal_cell(9, b"data", b"r" * 32)
    assert verify_trap(cell, b"r" * 32)
    assert verify_trap(UpstreamCell(), b"r" * 32)
    assert not verify_trap(cell, b"s" * 32)
    assert not verify_trap(replace(cell, payload=b"dato"), b"r" * 32)


def test_find_flipped_zero():
    assert find_flipped_zero(b"\x00\x00", b"\x00\x00") is None
    assert find_flipped_zero(b"\xff\x00", b"\x7f\x00") is None
    assert find_flipped_zero(b"\x80\x00", b"\xc0\x01") == 1
    assert find_flipped_zero(b"\x00\x00", b"\x00\x01") == 15
    with pytest.raises(FrameError):
        find_flipped_zero(b"\x00", b"\x00\x00")


def test_premask_is_an_involution():
    x = bytes(64)
    masked = apply_premask(x, b"r" * 32, 3)
    assert masked != x
    assert apply_premask(masked, b"r" * 32, 3) == x
    assert apply_premask(x, b"r" * 32, 4) != masked


def test_retransmit_record_rebuilds_the_cell():
    cell = seal_cell(77, b"resend me", b"r" * 32)
    rec = RetransmitRecord(12, b"\x05", cell.mac_input())
    back = RetransmitRecord.decode(rec.encode())
    assert back == rec
    assert back.rebuild(b"r" * 32) == cell
    assert RetransmitRecord(3, b"", UpstreamCell().mac_input()).rebuild(b"r" * 32).is_zero
    with pytest.raises(FrameError):
        RetransmitRecord.decode(b"Xjunk-payload-bytes")


@pytest.mark.parametrize("faulty", ["client-1", "client-2", "guard-0", "guard-1"])
@pytest.mark.parametrize("strategy", ["truthful", "consistent-lie", "refuse", "forged-signature"])
def test_flipped_zero_convicts_the_disruptor(world, faulty, strategy):
    tr, hits_zero = drill_round(world, faulty, "flip0", 4, CELL_BITS, random.Random(5),
                                strategy=strategy)
    assert hits_zero
    assert (tr.verdict.kind, tr.verdict.entity) == (EXCLUDED, faulty)


def test_consistent_lie_goes_through_the_pair_stage(world):
    tr, _ = drill_round(world, "guard-1", "flip0", 4, CELL_BITS, random.Random(6),
                        strategy="consistent-lie")
    assert tr.pair is not None and "guard-1" in tr.pair
    assert len(tr.secret_reveals) == 2
    assert tr.to_dict()["verdict"]["entity"] == "guard-1"


def test_one_to_zero_flips_are_untraceable(world):
    tr, hits_zero = drill_round(world, "client-1", "flip1", 4, CELL_BITS, random.Random(7), flips=3)
    assert not hits_zero
    assert tr.verdict.kind == UNTRACEABLE
    assert tr.position is None


def test_premask_lets_a_blind_flip_be_traced(world):
    hits = 0
    for seed in range(40):
        tr, hit = drill_round(world, "client-2", "blind", 4, CELL_BITS, random.Random(seed),
                              premask=True, flips=1)
        if hit:
            hits += 1
            assert tr.verdict.entity == "client-2"
        else:
            assert tr.verdict.kind == UNTRACEABLE
    assert 8 <= hits <= 32


def test_responders_ignore_forged_requests(world):
    g = world.group
    cid = world.client_ids[0]
    responder = EquivocationResponder(
        g, cid, "client", world.long_term[cid], world.ephemerals[cid].private,
        [(gid, kp.public) for gid, kp in world.guard_keys.items()], world.client_side[0],
        world.relay.public, 0, random.Random(1), cell_bits=CELL_BITS)
    request = sign_request(g, world.relay, 4, 10)
    assert responder.bit_reveal(request) is not None
    assert responder.bit_reveal(replace(request, position=11)) is None

    # evidence naming no mismatch is refused
    reveal = responder.bit_reveal(request)
    gid = world.guard_ids[0]
    guard = EquivocationResponder(
        g, gid, "guard", world.guard_keys[gid], world.guard_keys[gid].private,
        [(c, e.public) for c, e in world.ephemerals.items()], world.guard_secrets(0),
        world.relay.public, 0, random.Random(2), cell_bits=CELL_BITS)
    evidence = relay_evidence(world, request, reveal, guard.bit_reveal(request))
    assert responder.pair_answer(evidence, world.roster_keys()) is None


def relay_evidence(world, request, client_reveal, guard_reveal):
    ctx = BlameContext(world.group, world.relay, world.roster_keys(), [], [], {}, {}, CELL_BITS)
    return make_evidence(ctx, request.round, request.position, client_reveal, guard_reveal)


def test_secret_reveal_needs_a_valid_proof(world):
    g = world.group
    cid, gid = world.client_ids[0], world.guard_ids[0]
    eph, guard = world.ephemerals[cid], world.guard_keys[gid]
    responder = HonestResponder(g, cid, "client", world.long_term[cid], eph.private,
                                [(gid, guard.public)], world.client_side[0][:1], world.relay.public,
                                0, random.Random(3))
    ctx = BlameContext(g, world.relay, world.roster_keys(), [(cid, eph.public)], [(gid, guard.public)],
                       {}, {}, CELL_BITS)
    reveal = responder.secret_reveal(gid)
    secret = check_secret_reveal(ctx, reveal, cid, eph.public, guard.public)
    assert secret is not None and secret.seed == world.client_side[0][0].seed
    bad_proof = bytes(len(reveal.proof))
    assert check_secret_reveal(ctx, replace(reveal, proof=bad_proof), cid, eph.public, guard.public) is None
    assert check_secret_reveal(ctx, None, cid, eph.public, guard.public) is None
    assert check_secret_reveal(ctx, reveal, gid, guard.public, eph.public) is None
