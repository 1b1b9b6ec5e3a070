import random
from dataclasses import replace

import pytest

from lldc import crypto
from lldc.errors import (BadSignature, NoTrustedSignature, SetupFailed, TooFewClients,
                         TranscriptTampered, UnknownClient)
from lldc.setup_phase import (AuthMessage, Roster, Schedule, ShuffleTranscript, client_accept_schedule,
                              client_authenticate, client_slot_secret, derive_all_secrets,
                              guard_shuffle, guard_verify_and_sign, relay_accept_auth,
                              relay_setup_orchestrate, setup_with_retry)


class LocalConnections:
    """Clients and guards in the same process."""

    def __init__(self, group, roster, long_term, guard_keys, rng, tamper=None, absent=()):
        self.group = group
        self.roster = roster
        self.long_term = long_term
        self.guard_keys = guard_keys
        self.rng = rng
        self.tamper = tamper
        self.absent = set(absent)
        self.ephemerals = {}
        self.secrets = {}
        self.produced = {}
        self.result = None

    def authenticate(self, cid):
        if cid in self.absent:
            return None
        eph, msg = client_authenticate(self.group, self.roster, self.long_term[cid], self.rng)
        self.ephemerals[cid] = eph
        return msg

    def shuffle(self, gid, keys, base):
        link, secret = guard_shuffle(self.group, keys, base, gid, self.rng)
        self.secrets[gid] = secret
        self.produced[gid] = link
        return link

    def sign_transcript(self, gid, transcript):
        if self.tamper is not None:
            transcript = self.tamper(transcript)
        s = self.secrets[gid]
        return guard_verify_and_sign(self.group, transcript, gid, self.guard_keys[gid], s.blinding,
                                     s.permutation, self.produced[gid])

    def distribute(self, result):
        self.result = result


def distinct_keys(group, count, rng):
    out, seen = [], set()
    while len(out) < count:
        kp = crypto.keygen(group, rng)
        if kp.public not in seen:
            seen.add(kp.public)
            out.append(kp)
    return out


def make_world(group, n, m, rng):
    keys = distinct_keys(group, 1 + n + m, rng)
    relay = keys[0]
    long_term = {f"client-{i}": keys[1 + i] for i in range(n)}
    guard_keys = {f"guard-{j}": keys[1 + n + j] for j in range(m)}
    roster = Roster(tuple((c, k.public) for c, k in long_term.items()),
                    tuple((g, k.public) for g, k in guard_keys.items()), relay.public)
    return roster, long_term, guard_keys


def test_schedule_is_a_blinded_permutation_of_submitted_keys(toy):
    for seed in range(100):
        rng = random.Random(seed)
        n, m = 2 + seed % 4, 1 + seed % 3
        roster, long_term, guard_keys = make_world(toy, n, m, rng)
        conns = LocalConnections(toy, roster, long_term, guard_keys, rng)
        result = relay_setup_orchestrate(toy, roster, conns, epoch=1, rng=rng)
        blind = toy.dlog(result.schedule.base)
        submitted = sorted(toy.dlog(e.public) * blind % toy.order_q for e in conns.ephemerals.values())
        announced = sorted(toy.dlog(k) for k in result.schedule.slots)
        assert announced == submitted
        assert set(result.transcript.signatures) == set(roster.guard_ids)


def _alter_first_output(transcript: ShuffleTranscript, group) -> ShuffleTranscript:
    link = transcript.links[0]
    keys = list(link.output_keys)
    keys[0] = group.mul(keys[0], group.generator)
    bad = replace(link, output_keys=tuple(keys))
    return replace(transcript, links=(bad,), final_schedule=tuple(keys))


def test_tampered_transcript_is_rejected_by_the_affected_guard(toy):
    for seed in range(100):
        rng = random.Random(seed)
        roster, long_term, guard_keys = make_world(toy, 2 + seed % 3, 1, rng)
        conns = LocalConnections(toy, roster, long_term, guard_keys, rng,
                                 tamper=lambda t: _alter_first_output(t, toy))
        with pytest.raises(SetupFailed):
            relay_setup_orchestrate(toy, roster, conns, epoch=1, rng=rng)


def test_broken_chain_is_rejected(toy, rng):
    keys = tuple(toy.power(k) for k in (3, 5, 7))
    l1, s1 = guard_shuffle(toy, keys, toy.generator, "guard-0", rng)
    l2, s2 = guard_shuffle(toy, keys, toy.generator, "guard-1", rng)  # should have taken l1's output
    t = ShuffleTranscript((l1, l2), l2.output_keys, l2.output_base)
    guard = crypto.keygen(toy, rng)
    with pytest.raises(TranscriptTampered):
        guard_verify_and_sign(toy, t, "guard-1", guard, s2.blinding, s2.permutation)


def test_shuffle_needs_two_keys(toy, rng):
    with pytest.raises(TooFewClients):
        guard_shuffle(toy, (toy.power(3),), toy.generator, "guard-0", rng)


def test_full_setup_on_p256(p256):
    rng = random.Random(7)
    roster, long_term, guard_keys = make_world(p256, 3, 2, rng)
    conns = LocalConnections(p256, roster, long_term, guard_keys, rng)
    result = relay_setup_orchestrate(p256, roster, conns, epoch=1, rng=rng)
    slots = set()
    for cid, eph in conns.ephemerals.items():
        slot = client_accept_schedule(p256, result.schedule, result.transcript.signatures, roster, eph)
        slots.add(slot)
        assert client_slot_secret(p256, eph, slot, result.encrypted_secrets) == result.slot_secrets[slot]
    assert slots == {0, 1, 2}


def test_absent_clients_are_skipped(toy):
    rng = random.Random(3)
    roster, long_term, guard_keys = make_world(toy, 4, 1, rng)
    conns = LocalConnections(toy, roster, long_term, guard_keys, rng, absent={"client-1"})
    result = relay_setup_orchestrate(toy, roster, conns, epoch=1, rng=rng)
    assert result.participants == ["client-0", "client-2", "client-3"]
    assert result.rejected == ["client-1"]

    conns = LocalConnections(toy, roster, long_term, guard_keys, rng,
                             absent={"client-0", "client-1", "client-2"})
    with pytest.raises(TooFewClients):
        relay_setup_orchestrate(toy, roster, conns, epoch=2, rng=rng)


def test_auth_rejections(toy, rng):
    roster, long_term, _ = make_world(toy, 2, 1, rng)
    stranger = crypto.keygen(toy, rng)
    while stranger.public in [k for _, k in roster.clients]:
        stranger = crypto.keygen(toy, rng)
    with pytest.raises(UnknownClient):
        client_authenticate(toy, roster, stranger, rng)
    eph, msg = client_authenticate(toy, roster, long_term["client-0"], rng)
    assert relay_accept_auth(toy, roster, msg) == "client-0"
    forged = AuthMessage(msg.long_term_public, msg.ephemeral_public, bytes(len(msg.signature)))
    with pytest.raises(BadSignature):
        relay_accept_auth(toy, roster, forged)


def test_schedule_without_trusted_signature(toy, rng):
    roster, _, _ = make_world(toy, 2, 1, rng)
    eph = crypto.keygen(toy, rng)
    schedule = Schedule((eph.public, toy.power(9)), toy.generator, 1)
    with pytest.raises(NoTrustedSignature):
        client_accept_schedule(toy, schedule, {"guard-0": b"\x00" * 33}, roster, eph)


def test_secret_matrix_is_symmetric(toy, rng):
    ephemerals = {f"client-{i}": crypto.keygen(toy, rng) for i in range(3)}
    guards = {f"guard-{j}": crypto.keygen(toy, rng) for j in range(2)}
    client_side, guard_side = derive_all_secrets(toy, ephemerals, guards)
    for i in range(3):
        for j in range(2):
            assert client_side[i][j].seed == guard_side[i][j].seed


def test_roster_text_round_trip(toy, rng):
    roster, _, _ = make_world(toy, 3, 2, rng)
    assert Roster.from_text(roster.to_text(toy), toy) == roster
    with pytest.raises(ValueError):
        Roster.from_text("guard g0\n", toy)


def test_setup_retry_backs_off_then_succeeds():
    delays = []
    calls = []

    def attempt(n):
        calls.append(n)
        if n < 2:
            raise SetupFailed("guard timed out")
        return "ok"

    assert setup_with_retry(attempt, retries=3, timeout_s=1.0, on_backoff=delays.append) == "ok"
    assert calls == [0, 1, 2]
    assert delays == [1.0, 2.0]

    with pytest.raises(SetupFailed):
        setup_with_retry(lambda n: (_ for _ in ()).throw(SetupFailed("down")), retries=1, timeout_s=0.5)
