"""
MODULE:      Equivocation protection
FILE:        src/lldc/equivocation.py
DESCRIPTION: Downstream history, owner blinding, kappa/sigma tags, relay key
             recovery and the hash-reveal blame for corrupted tags.

The owner blinds its DC-net plaintext with a fresh key k. Each client folds
F1(h_i)^{e_i} into its tag (the owner also F1(k)); guards cancel the exponent
with sigma. The relay gets F1(k) back only when every client saw the same
downstream history it did.
"""
from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Protocol, Sequence

from lldc import crypto
from lldc.crypto import Element, GroupParams, Pad
from lldc.disruption import (EXCLUDED, HISTORY_MISMATCH, NO_FAULT, BlameContext,
                             BlameParties, BlameTranscript, HonestResponder, SecretReveal,
                             Verdict, resolve_pair)
from lldc.errors import HistoryMismatch, MapRangeError

logger = logging.getLogger(__name__)

BLIND_LABEL = b"lldc/blind"
HASH_REQUEST_LABEL = b"lldc/hash-request"
HASH_REVEAL_LABEL = b"lldc/hash-reveal"
HASH_EVIDENCE_LABEL = b"lldc/hash-evidence"

CLIENT_KAPPA = "kappa"
GUARD_SIGMA = "sigma"


# =============================================================================
# HISTORY
# =============================================================================
@dataclass(frozen=True)
class DownstreamHistory:
    digest: bytes = bytes(crypto.HASH_BYTES)
    length: int = 0


def history_update(h: DownstreamHistory, z: bytes) -> DownstreamHistory:
    return DownstreamHistory(crypto.H(h.digest, z), h.length + 1)


class HistoryLog:
    """Digest per absorbed round, so tags for pipelined rounds can use the
    snapshot covering rounds <= t - W."""

    def __init__(self, window: int):
        self.window = window
        self.current = DownstreamHistory()
        self._after: dict[int, bytes] = {}

    def absorb(self, round: int, z: bytes) -> DownstreamHistory:
        self.current = history_update(self.current, z)
        self._after[round] = self.current.digest
        return self.current

    def snapshot(self, round: int) -> bytes:
        src = round - self.window
        if src < 0:
            return bytes(crypto.HASH_BYTES)
        if src not in self._after:
            raise KeyError(f"no history for round {src}")
        return self._after[src]

    def prune(self, below: int) -> None:
        for r in [r for r in self._after if r < below]:
            del self._after[r]

    def reset(self) -> None:
        self.current = DownstreamHistory()
        self._after.clear()


# =============================================================================
# BLINDING
# =============================================================================
@dataclass(frozen=True)
class BlindedCell:
    x_prime: bytes
    k: bytes


def blind_stream(k: bytes, nbytes: int) -> bytes:
    return crypto.keystream(k, BLIND_LABEL, 0, nbytes)


def apply_keystream(x: bytes, stream: bytes) -> bytes:
    return crypto.xor_bytes(x, stream)


def owner_blind(x: bytes, group: GroupParams, rng: random.Random,
                k: bytes | None = None) -> tuple[BlindedCell, bytes]:
    k = group.random_embeddable(rng) if k is None else k
    return BlindedCell(apply_keystream(x, blind_stream(k, len(x))), k), k


def unblind(x_prime: bytes, k: bytes) -> bytes:
    return apply_keystream(x_prime, blind_stream(k, len(x_prime)))


# =============================================================================
# TAGS
# =============================================================================
@dataclass(frozen=True)
class EquivocationTag:
    kind: str
    value: Any

    def encode(self, group: GroupParams) -> bytes:
        if self.kind == CLIENT_KAPPA:
            return group.encode(self.value)
        return group.encode_scalar(self.value)

    @classmethod
    def decode(cls, group: GroupParams, kind: str, data: bytes) -> "EquivocationTag":
        if kind == CLIENT_KAPPA:
            return cls(kind, group.decode(data))
        return cls(kind, group.decode_scalar(data))


def pad_hash(pad: Pad | bytes) -> bytes:
    return crypto.H(pad.bits if isinstance(pad, Pad) else pad)


def exponent(group: GroupParams, hashes: Sequence[bytes]) -> int:
    return sum(crypto.f2_map(group, h) for h in hashes) % group.order_q


def history_base(group: GroupParams, digest: bytes) -> Element:
    return group.f1_map(group.embed_digest(digest))


def kappa_from_hashes(group: GroupParams, hashes: Sequence[bytes], history: bytes,
                      k: bytes | None = None) -> Element:
    kappa = group.exp(history_base(group, history), exponent(group, hashes))
    return kappa if k is None else group.mul(group.f1_map(k), kappa)


def sigma_from_hashes(group: GroupParams, hashes: Sequence[bytes]) -> int:
    return (-exponent(group, hashes)) % group.order_q


def client_tag(group: GroupParams, pads: Sequence[Pad | bytes], history: DownstreamHistory | bytes,
               is_owner: bool, k: bytes | None = None) -> EquivocationTag:
    digest = history.digest if isinstance(history, DownstreamHistory) else history
    if is_owner and k is None:
        raise ValueError("owner tag needs the blinding key")
    kappa = kappa_from_hashes(group, [pad_hash(p) for p in pads], digest, k if is_owner else None)
    return EquivocationTag(CLIENT_KAPPA, kappa)


def guard_tag(group: GroupParams, pads: Sequence[Pad | bytes]) -> EquivocationTag:
    return EquivocationTag(GUARD_SIGMA, sigma_from_hashes(group, [pad_hash(p) for p in pads]))


def relay_recover_key(group: GroupParams, history: DownstreamHistory | bytes,
                      sigmas: Sequence[int], kappas: Sequence[Element]) -> bytes:
    digest = history.digest if isinstance(history, DownstreamHistory) else history
    K = group.exp(history_base(group, digest), sum(sigmas) % group.order_q)
    for kappa in kappas:
        K = group.mul(K, kappa)
    try:
        return group.f1_inv(K)
    except MapRangeError as e:
        raise HistoryMismatch("recovered key is outside the embeddable range") from e


# =============================================================================
# BLAME
# =============================================================================
@dataclass(frozen=True)
class HashRequest:
    round: int
    signature: bytes


@dataclass(frozen=True)
class HashReveal:
    entity: str
    round: int
    hashes: tuple[bytes, ...]
    history: bytes
    signature: bytes


@dataclass(frozen=True)
class HashEvidence:
    round: int
    client_reveal: HashReveal
    guard_reveal: HashReveal
    relay_signature: bytes


def hash_request_message(round: int) -> bytes:
    return HASH_REQUEST_LABEL + struct.pack("<Q", round)


def hash_reveal_message(entity: str, round: int, hashes: Sequence[bytes], history: bytes) -> bytes:
    return (HASH_REVEAL_LABEL + entity.encode() + b"\x00" + struct.pack("<QH", round, len(hashes))
            + b"".join(hashes) + history)


def hash_evidence_message(client_reveal: HashReveal, guard_reveal: HashReveal) -> bytes:
    return HASH_EVIDENCE_LABEL + client_reveal.signature + guard_reveal.signature


def make_hash_reveal(group: GroupParams, entity: str, private: int, round: int,
                     hashes: Sequence[bytes], history: bytes = b"") -> HashReveal:
    hashes = tuple(hashes)
    sig = crypto.sign(group, private, hash_reveal_message(entity, round, hashes, history))
    return HashReveal(entity, round, hashes, history, sig)


def verify_hash_reveal(group: GroupParams, public: Element, r: HashReveal) -> bool:
    return crypto.verify(group, public, hash_reveal_message(r.entity, r.round, r.hashes, r.history),
                         r.signature)


class EquivocationResponder(HonestResponder):
    """Adds hash reveals; `history_for(t)` is the client's snapshot for round t."""

    def __init__(self, *args, cell_bits: int, history_for: Callable[[int], bytes] | None = None,
                 **kw):
        super().__init__(*args, **kw)
        self.cell_bits = cell_bits
        self.history_for = history_for

    def pad_hashes(self, round: int) -> list[bytes]:
        return [pad_hash(crypto.prg_pad(s, round, self.cell_bits)) for s in self.secrets]

    def hash_reveal(self, request: HashRequest) -> HashReveal | None:
        if not crypto.verify(self.group, self.relay_public, hash_request_message(request.round),
                             request.signature):
            return None
        history = self.history_for(request.round) if self.history_for else b""
        return make_hash_reveal(self.group, self.entity, self.signing_key.private, request.round,
                                self.pad_hashes(request.round), history)

    def pair_answer(self, evidence: Any, roster_keys: Mapping[str, Element]) -> SecretReveal | None:
        if not isinstance(evidence, HashEvidence):
            return super().pair_answer(evidence, roster_keys)
        g = self.group
        cr, gr = evidence.client_reveal, evidence.guard_reveal
        if not crypto.verify(g, self.relay_public, hash_evidence_message(cr, gr), evidence.relay_signature):
            return None
        if not (verify_hash_reveal(g, roster_keys[cr.entity], cr)
                and verify_hash_reveal(g, roster_keys[gr.entity], gr)):
            return None
        mine, other = (cr, gr) if self.role == "client" else (gr, cr)
        if mine.entity != self.entity:
            return None
        if mine.hashes[self.peer_index(other.entity)] == other.hashes[self.index_in_peer]:
            return None
        return self.secret_reveal(other.entity)


class EquivocationParties(BlameParties, Protocol):
    def hash_reveal(self, entity: str, request: HashRequest) -> HashReveal | None: ...


def collect_hash_reveals(ctx: BlameContext, parties: EquivocationParties, request: HashRequest
                         ) -> tuple[dict[str, HashReveal], list[str]]:
    n, m = len(ctx.clients), len(ctx.guards)
    expected = {c: m for c in ctx.client_ids} | {g: n for g in ctx.guard_ids}
    reveals: dict[str, HashReveal] = {}
    silent: list[str] = []
    for entity, count in expected.items():
        got = None
        for _ in range(ctx.requery + 1):
            r = parties.hash_reveal(entity, request)
            if (r is not None and r.entity == entity and r.round == request.round
                    and len(r.hashes) == count
                    and all(len(h) == crypto.HASH_BYTES for h in r.hashes)
                    and verify_hash_reveal(ctx.group, ctx.roster_keys[entity], r)):
                got = r
                break
        if got is None:
            silent.append(entity)
        else:
            reveals[entity] = got
    return reveals, silent


def equivocation_blame(ctx: BlameContext, reveals: Mapping[str, HashReveal], history: bytes,
                       kappas: Mapping[str, Element], sigmas: Mapping[str, int],
                       owner_key: bytes) -> Verdict | tuple[str, str]:
    """Checks tags against revealed hashes. Returns a verdict, or the first
    (client, guard) pair whose hashes disagree.

    `owner_key` is the blinding key from the owner's retransmission; empty
    bytes mean the owner sent the round unblinded, so every kappa must take
    the non-owner form."""
    if owner_key is None:
        raise ValueError("equivocation blame needs the owner's retransmitted key (b'' if unblinded)")
    g = ctx.group
    if any(reveals[c].history != history for c in ctx.client_ids):
        return Verdict(HISTORY_MISMATCH, reason="client history differs from the relay's")
    for gid in ctx.guard_ids:
        if sigma_from_hashes(g, reveals[gid].hashes) != sigmas[gid] % g.order_q:
            return Verdict(EXCLUDED, gid, "sigma does not match revealed hashes")
    owner_form = g.f1_map(owner_key) if owner_key else None
    for cid in ctx.client_ids:
        plain = kappa_from_hashes(g, reveals[cid].hashes, history)
        if kappas[cid] == plain:
            continue
        if owner_form is not None and kappas[cid] == g.mul(owner_form, plain):
            continue
        return Verdict(EXCLUDED, cid, "kappa does not match revealed hashes")
    for i, cid in enumerate(ctx.client_ids):
        for j, gid in enumerate(ctx.guard_ids):
            if reveals[cid].hashes[j] != reveals[gid].hashes[i]:
                return cid, gid
    return Verdict(NO_FAULT)


def run_equivocation_blame(ctx: BlameContext, parties: EquivocationParties, round: int,
                           original: bytes, history: bytes, kappas: Mapping[str, Element],
                           sigmas: Mapping[str, int], owner_key: bytes) -> BlameTranscript:
    if owner_key is None:
        raise ValueError("equivocation blame needs the owner's retransmitted key (b'' if unblinded)")
    tr =BlameTranscript(round, original, original, kind="equivocation")
    request = HashRequest(round, crypto.sign(ctx.group, ctx.relay.private, hash_request_message(round)))
    reveals, silent = collect_hash_reveals(ctx, parties, request)
    tr.hash_reveals = list(reveals.values())
    if silent:
        tr.verdict = Verdict(EXCLUDED, silent[0], "no valid hash reveal before timeout")
        return tr
    found = equivocation_blame(ctx, reveals, history, kappas, sigmas, owner_key)
    if isinstance(found, Verdict):
        tr.verdict = found
        return tr
    cid, gid = found
    tr.pair = found
    i, j = ctx.client_ids.index(cid), ctx.guard_ids.index(gid)
    cr, gr = reveals[cid], reveals[gid]
    evidence = HashEvidence(round, cr, gr, crypto.sign(ctx.group, ctx.relay.private,
                                                       hash_evidence_message(cr, gr)))
    tr.verdict = resolve_pair(ctx, parties, cid, gid, evidence, (cr.hashes[j], gr.hashes[i]),
                              lambda s: pad_hash(crypto.prg_pad(s, round, ctx.cell_bits)), tr)
    logger.info("equivocation blame for round %d: %s", round, tr.verdict)
    return tr
