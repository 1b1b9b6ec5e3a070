"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/disruption.py
VERSION:    2.4 (Signed reveals + DLEQ-backed secret reveal + premask)
================================================================================

ABSTRACT:
    Accountability for upstream disruption.

    1. Trap: every data cell carries HMAC(r_iR, ...) keyed by the slot secret.
       A failing trap sets the retransmit flag; the owner re-sends the cell
       (and its blinding key) in its next slot.
    2. With ground truth in hand the relay looks for the first bit that went
       0 -> 1, asks every client and guard to reveal (signed) their pad bits at
       that position, and isolates either a self-inconsistent entity or a
       (client, guard) pair that disagrees.
    3. The pair reveals their DH element with a discrete-log-equality proof;
       the relay recomputes the pad bit and excludes whoever lied.

    Optional premask: the owner XORs a stream keyed by r_iR over the whole cell
    so any flip hits a 0 with probability 1/2 per flipped bit.

    Everything here is pure: entities are reached through `BlameParties`, so
    the same runner drives the simulated network and the in-process drills.
================================================================================
"""
from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

from cryptography.hazmat.primitives import constant_time

from lldc import crypto
from lldc.crypto import Element, GroupParams, KeyPair, SharedSecret
from lldc.dcnet import UpstreamCell, seal_cell
from lldc.errors import BlameInconsistent, FrameError

logger = logging.getLogger(__name__)

REQUEST_LABEL = b"lldc/blame-request"
REVEAL_LABEL = b"lldc/bit-reveal"
EVIDENCE_LABEL = b"lldc/pair-evidence"
SECRET_LABEL = b"lldc/secret-reveal"

EXCLUDED = "Excluded"
UNTRACEABLE = "Untraceable"
NO_FAULT = "NoFault"
HISTORY_MISMATCH = "HistoryMismatch"


# =============================================================================
# TYPES
# =============================================================================
@dataclass(frozen=True)
class SlotSecret:
    slot: int
    r: bytes


@dataclass(frozen=True)
class Verdict:
    kind: str
    entity: str | None = None
    reason: str = ""

    @property
    def convicting(self) -> bool:
        return self.kind == EXCLUDED

    def __str__(self) -> str:
        return f"{self.kind}({self.entity})" if self.entity else self.kind


@dataclass(frozen=True)
class BlameRequest:
    round: int
    position: int
    signature: bytes


@dataclass(frozen=True)
class BitReveal:
    entity: str
    round: int
    position: int
    bits: tuple[int, ...]
    signature: bytes


@dataclass(frozen=True)
class PairEvidence:
    round: int
    position: int
    client_reveal: BitReveal
    guard_reveal: BitReveal
    relay_signature: bytes


@dataclass(frozen=True)
class SecretReveal:
    entity: str
    peer: str
    element: bytes
    proof: bytes
    signature: bytes


@dataclass
class BlameTranscript:
    trigger_round: int
    original: bytes
    disrupted: bytes
    position: int | None = None
    reveals: list[BitReveal] = field(default_factory=list)
    pair: tuple[str, str] | None = None
    secret_reveals: list[SecretReveal] = field(default_factory=list)
    hash_reveals: list = field(default_factory=list)
    verdict: Verdict = field(default_factory=lambda: Verdict(NO_FAULT))
    kind: str = "disruption"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "trigger_round": self.trigger_round,
            "original": self.original.hex(),
            "disrupted": self.disrupted.hex(),
            "position": self.position,
            "reveals": [{"entity": r.entity, "bits": list(r.bits), "signature": r.signature.hex()}
                        for r in self.reveals],
            "hash_reveals": [{"entity": r.entity, "hashes": [h.hex() for h in r.hashes],
                              "history": r.history.hex()} for r in self.hash_reveals],
            "pair": list(self.pair) if self.pair else None,
            "secret_reveals": [{"entity": s.entity, "peer": s.peer, "element": s.element.hex(),
                                "proof": s.proof.hex()} for s in self.secret_reveals],
            "verdict": {"kind": self.verdict.kind, "entity": self.verdict.entity,
                        "reason": self.verdict.reason},
        }


# =============================================================================
# TRAP / PREMASK / RETRANSMISSION
# =============================================================================
def verify_trap(cell: UpstreamCell, slot_secret: bytes) -> bool:
    if cell.is_zero:
        return True
    expect = crypto.hmac_tag(slot_secret, cell.mac_input())
    return constant_time.bytes_eq(expect, cell.hmac)


def premask_stream(r: bytes, round: int, nbytes: int) -> bytes:
    return crypto.keystream(r, b"lldc/mask", round, nbytes)


def apply_premask(x: bytes, r: bytes, round: int) -> bytes:
    return crypto.xor_bytes(x, premask_stream(r, round, len(x)))


@dataclass(frozen=True)
class RetransmitRecord:
    """Owner's re-send of a flagged round: its blinding key and the cell's
    MAC input (conn_id | len | payload). The relay re-seals it with r."""
    round: int
    key: bytes
    cell_input: bytes

    MARK = b"R"

    def encode(self) -> bytes:
        return self.MARK + struct.pack("<QB", self.round, len(self.key)) + self.key + self.cell_input

    @classmethod
    def decode(cls, payload: bytes) -> "RetransmitRecord":
        if not payload.startswith(cls.MARK) or len(payload) < 10:
            raise FrameError("not a retransmission record")
        rnd, klen = struct.unpack_from("<QB", payload, 1)
        if len(payload) < 10 + klen + 6:
            raise FrameError("truncated retransmission record")
        return cls(rnd, bytes(payload[10: 10 + klen]), bytes(payload[10 + klen:]))

    def rebuild(self, slot_secret: bytes) -> UpstreamCell:
        conn_id, length = struct.unpack_from("<IH", self.cell_input)
        payload = self.cell_input[6:]
        if len(payload) != length:
            raise FrameError("retransmitted cell length mismatch")
        if conn_id == 0:
            if payload:
                raise FrameError("retransmitted zero cell carries data")
            return UpstreamCell()
        return seal_cell(conn_id, payload, slot_secret)


# =============================================================================
# FLIPPED BIT
# =============================================================================
def find_flipped_zero(x: bytes, x_bar: bytes) -> int | None:
    """Smallest k with x_k = 0 and x_bar_k = 1 (MSB-first bit order)."""
    if len(x) != len(x_bar):
        raise FrameError("original and disrupted plaintexts differ in length")
    nbits = 8 * len(x)
    mask = (1 << nbits) - 1
    d = (~int.from_bytes(x, "big") & mask) & int.from_bytes(x_bar, "big")
    if d == 0:
        return None
    return nbits - d.bit_length()


# =============================================================================
# SIGNED MESSAGES
# =============================================================================
def request_message(round: int, position: int) -> bytes:
    return REQUEST_LABEL + struct.pack("<QI", round, position)


def sign_request(group: GroupParams, relay: KeyPair, round: int, position: int) -> BlameRequest:
    return BlameRequest(round, position, crypto.sign(group, relay.private, request_message(round, position)))


def reveal_message(entity: str, round: int, position: int, bits: Sequence[int]) -> bytes:
    return (REVEAL_LABEL + entity.encode() + b"\x00" + struct.pack("<QI", round, position)
            + bytes(bits))


def make_bit_reveal(group: GroupParams, entity: str, private: int, request: BlameRequest,
                    bits: Sequence[int]) -> BitReveal:
    bits = tuple(int(b) for b in bits)
    sig = crypto.sign(group, private, reveal_message(entity, request.round, request.position, bits))
    return BitReveal(entity, request.round, request.position, bits, sig)


def verify_bit_reveal(group: GroupParams, public: Element, reveal: BitReveal) -> bool:
    return crypto.verify(group, public, reveal_message(reveal.entity, reveal.round, reveal.position,
                                                       reveal.bits), reveal.signature)


def evidence_message(client_reveal: BitReveal, guard_reveal: BitReveal) -> bytes:
    return EVIDENCE_LABEL + client_reveal.signature + guard_reveal.signature


def secret_message(entity: str, peer: str, element: bytes, proof: bytes) -> bytes:
    return SECRET_LABEL + entity.encode() + b"\x00" + peer.encode() + b"\x00" + element + proof


# =============================================================================
# ENTITY SIDE
# =============================================================================
class HonestResponder:
    """Answers blame requests for one client or guard.

    A client holds its ephemeral private key and pads against every guard; a
    guard holds its long-term key and pads against every client.
    `index_in_peer` is this entity's position in its peers' reveal lists.
    """

    def __init__(self, group: GroupParams, entity: str, role: str, signing_key: KeyPair,
                 dh_private: int, peers: Sequence[tuple[str, Element]],
                 secrets: Sequence[SharedSecret], relay_public: Element, index_in_peer: int,
                 rng: random.Random):
        self.group = group
        self.entity = entity
        self.role = role
        self.signing_key = signing_key
        self.dh_private = dh_private
        self.peers = list(peers)
        self.secrets = list(secrets)
        self.relay_public = relay_public
        self.index_in_peer = index_in_peer
        self.rng = rng

    def peer_index(self, peer: str) -> int:
        return [p for p, _ in self.peers].index(peer)

    def true_bits(self, round: int, position: int) -> list[int]:
        return [crypto.pad_bit(s, round, position) for s in self.secrets]

    def request_valid(self, request: BlameRequest) -> bool:
        return crypto.verify(self.group, self.relay_public,
                             request_message(request.round, request.position), request.signature)

    def bit_reveal(self, request: BlameRequest) -> BitReveal | None:
        if not self.request_valid(request):
            return None
        return make_bit_reveal(self.group, self.entity, self.signing_key.private, request,
                               self.true_bits(request.round, request.position))

    def evidence_valid(self, evidence: PairEvidence, roster_keys: Mapping[str, Element]) -> str | None:
        """Peer named by the evidence, or None when it is forged or names no mismatch."""
        g = self.group
        cr, gr = evidence.client_reveal, evidence.guard_reveal
        if not crypto.verify(g, self.relay_public, evidence_message(cr, gr), evidence.relay_signature):
            return None
        if not (verify_bit_reveal(g, roster_keys[cr.entity], cr)
                and verify_bit_reveal(g, roster_keys[gr.entity], gr)):
            return None
        mine, other = (cr, gr) if self.role == "client" else (gr, cr)
        if mine.entity != self.entity:
            return None
        j = self.peer_index(other.entity)
        if mine.bits[j] == other.bits[self.index_in_peer]:
            logger.warning("no mismatch in pair evidence; aborting", extra={"entity": self.entity})
            return None
        return other.entity

    def pair_answer(self, evidence: PairEvidence, roster_keys: Mapping[str, Element]) -> SecretReveal | None:
        peer = self.evidence_valid(evidence, roster_keys)
        return None if peer is None else self.secret_reveal(peer)

    def secret_reveal(self, peer: str) -> SecretReveal:
        g = self.group
        peer_pub = self.peers[self.peer_index(peer)][1]
        el = g.encode(g.exp(peer_pub, self.dh_private))
        proof = crypto.dleq_prove(g, self.dh_private, g.generator, peer_pub, self.rng)
        sig = crypto.sign(g, self.signing_key.private, secret_message(self.entity, peer, el, proof))
        return SecretReveal(self.entity, peer, el, proof, sig)



# =============================================================================
# RELAY SIDE
# =============================================================================
class BlameParties(Protocol):
    def bit_reveal(self, entity: str, request: BlameRequest) -> BitReveal | None: ...

    def pair_answer(self, entity: str, evidence: Any) -> SecretReveal | None: ...


@dataclass
class BlameContext:
    group: GroupParams
    relay: KeyPair
    roster_keys: Mapping[str, Element]
    clients: Sequence[tuple[str, Element]]
    guards: Sequence[tuple[str, Element]]
    client_ciphers: Mapping[str, bytes]
    guard_ciphers: Mapping[str, bytes]
    cell_bits: int
    requery: int = 1

    @property
    def client_ids(self) -> list[str]:
        return [c for c, _ in self.clients]

    @property
    def guard_ids(self) -> list[str]:
        return [g for g, _ in self.guards]


def collect_reveals(ctx: BlameContext, parties: BlameParties, request: BlameRequest
                    ) -> tuple[dict[str, BitReveal], list[str]]:
    """One verified reveal per entity; silent or forging entities are
    re-queried `ctx.requery` times, then listed as convicted."""
    n, m = len(ctx.clients), len(ctx.guards)
    expected = {c: m for c in ctx.client_ids} | {g: n for g in ctx.guard_ids}
    reveals: dict[str, BitReveal] = {}
    convicted: list[str] = []
    for entity, count in expected.items():
        ok = None
        for attempt in range(ctx.requery + 1):
            r = parties.bit_reveal(entity, request)
            if (r is not None and r.entity == entity and r.round == request.round
                    and r.position == request.position and len(r.bits) == count
                    and verify_bit_reveal(ctx.group, ctx.roster_keys[entity], r)):
                ok = r
                break
            logger.warning("invalid or missing reveal from %s (attempt %d)", entity, attempt + 1,
                           extra={"entity": entity, "round": request.round})
        if ok is None:
            convicted.append(entity)
        else:
            reveals[entity] = ok
    return reveals, convicted


def _xor_bits(bits: Sequence[int]) -> int:
    acc = 0
    for b in bits:
        acc ^= b
    return acc


def isolate_mismatch(ctx: BlameContext, reveals: Mapping[str, BitReveal], k: int
                     ) -> Verdict | tuple[str, str]:
    for cid in ctx.client_ids:
        if _xor_bits(reveals[cid].bits) != crypto.bit_at(ctx.client_ciphers[cid], k):
            return Verdict(EXCLUDED, cid, "revealed bits do not match its ciphertext")
    for gid in ctx.guard_ids:
        if _xor_bits(reveals[gid].bits) != crypto.bit_at(ctx.guard_ciphers[gid], k):
            return Verdict(EXCLUDED, gid, "revealed bits do not match its ciphertext")
    for i, cid in enumerate(ctx.client_ids):
        for j, gid in enumerate(ctx.guard_ids):
            if reveals[cid].bits[j] != reveals[gid].bits[i]:
                return cid, gid
    raise BlameInconsistent(f"no mismatch at bit {k}")


def make_evidence(ctx: BlameContext, round: int, k: int, client_reveal: BitReveal,
                  guard_reveal: BitReveal) -> PairEvidence:
    sig = crypto.sign(ctx.group, ctx.relay.private, evidence_message(client_reveal, guard_reveal))
    return PairEvidence(round, k, client_reveal, guard_reveal, sig)


def check_secret_reveal(ctx: BlameContext, reveal: SecretReveal | None, entity: str,
                        own_dh_public: Element, peer_dh_public: Element) -> SharedSecret | None:
    """Returns the shared secret when the reveal is signed and proven."""
    g = ctx.group
    if reveal is None or reveal.entity != entity:
        return None
    if not crypto.verify(g, ctx.roster_keys[entity], secret_message(reveal.entity, reveal.peer,
                                                                    reveal.element, reveal.proof),
                         reveal.signature):
        return None
    try:
        E = g.decode(reveal.element)
    except FrameError:
        return None
    if not crypto.dleq_verify(g, g.generator, own_dh_public, peer_dh_public, E, reveal.proof):
        return None
    return crypto.secret_from_element(g, E)


def resolve_pair(ctx: BlameContext, parties: BlameParties, cid: str, gid: str,
                 evidence: Any, claims: tuple[object, object],
                 recompute: Callable[[SharedSecret], object],
                 transcript: BlameTranscript | None = None) -> Verdict:
    """`claims` = (client's claim, guard's claim) about the pad; the relay
    recomputes the truth from the proven secret."""
    client_pub = dict(ctx.clients)[cid]
    guard_pub = dict(ctx.guards)[gid]
    c_ans = parties.pair_answer(cid, evidence)
    g_ans = parties.pair_answer(gid, evidence)
    if transcript is not None:
        transcript.secret_reveals.extend(a for a in (c_ans, g_ans) if a is not None)
    c_secret = check_secret_reveal(ctx, c_ans, cid, client_pub, guard_pub)
    g_secret = check_secret_reveal(ctx, g_ans, gid, guard_pub, client_pub)
    if c_secret is None:
        return Verdict(EXCLUDED, cid, "refused or failed the secret reveal")
    if g_secret is None:
        return Verdict(EXCLUDED, gid, "refused or failed the secret reveal")
    truth = recompute(c_secret)
    if claims[0] != truth:
        return Verdict(EXCLUDED, cid, "revealed pad contradicts the shared secret")
    if claims[1] != truth:
        return Verdict(EXCLUDED, gid, "revealed pad contradicts the shared secret")
    raise BlameInconsistent(f"pair {cid}/{gid} agrees with the recomputed pad")


def run_disruption_blame(ctx: BlameContext, parties: BlameParties, round: int, original: bytes,
                         disrupted: bytes) -> BlameTranscript:
    """`original`/`disrupted` are the DC-net level plaintexts of `round`."""
    tr = BlameTranscript(round, original, disrupted)
    k = find_flipped_zero(original, disrupted)
    tr.position = k
    if k is None:
        tr.verdict = Verdict(UNTRACEABLE, reason="only 1->0 flips")
        return tr
    request = sign_request(ctx.group, ctx.relay, round, k)
    reveals, silent = collect_reveals(ctx, parties, request)
    tr.reveals = list(reveals.values())
    if silent:
        tr.verdict = Verdict(EXCLUDED, silent[0], "no valid reveal before timeout")
        return tr
    found = isolate_mismatch(ctx, reveals, k)
    if isinstance(found, Verdict):
        tr.verdict = found
        return tr
    cid, gid = found
    tr.pair = found
    i, j = ctx.client_ids.index(cid), ctx.guard_ids.index(gid)
    evidence = make_evidence(ctx, round, k, reveals[cid], reveals[gid])
    claims = (reveals[cid].bits[j], reveals[gid].bits[i])
    tr.verdict = resolve_pair(ctx, parties, cid, gid, evidence, claims,
                              lambda s: crypto.pad_bit(s, round, k), tr)
    return tr
