"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/setup_phase.py
VERSION:    1.6 (Own-link transcript checks + retry with backoff)
================================================================================

ABSTRACT:
    Epoch setup. Clients authenticate with a fresh ephemeral key, the guards
    blind-and-permute the key list one after the other, every guard checks
    that its own link made it into the transcript unchanged and signs the
    final schedule, clients locate their slot, and both sides derive the
    client/guard shared secrets. The relay also hands every slot a trap
    secret encrypted under that slot's pseudonym key.

    Key Features:
    - Roster file I/O (`role id base64-public-key`).
    - Relay orchestration as one sequential state machine driven through a
      `SetupConnections` object, so the same code runs in-process and over
      the simulated network.
================================================================================
"""
from __future__ import annotations

import base64
import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence, TypeVar

from lldc import crypto
from lldc.crypto import Element, GroupParams, KeyPair, SharedSecret
from lldc.errors import (BadSignature, NoTrustedSignature, ProtocolError,
                         SetupFailed, SlotNotFound, TooFewClients, TranscriptTampered,
                         UnknownClient)

logger = logging.getLogger(__name__)

AUTH_LABEL = b"lldc/auth"
SCHEDULE_LABEL = b"lldc/schedule"


# =============================================================================
# ROSTER
# =============================================================================
@dataclass(frozen=True)
class Roster:
    clients: tuple[tuple[str, Element], ...]
    guards: tuple[tuple[str, Element], ...]
    relay_public: Element
    relay_id: str = "relay"

    def __post_init__(self):
        ids = [c for c, _ in self.clients] + [g for g, _ in self.guards] + [self.relay_id]
        if len(ids) != len(set(ids)):
            raise ValueError("roster ids must be unique")
        if not self.guards:
            raise ValueError("roster needs at least one guard")

    @property
    def client_ids(self) -> list[str]:
        return [c for c, _ in self.clients]

    @property
    def guard_ids(self) -> list[str]:
        return [g for g, _ in self.guards]

    def client_key(self, client_id: str) -> Element:
        for c, k in self.clients:
            if c == client_id:
                return k
        raise UnknownClient(f"{client_id} not in roster", entity=client_id)

    def guard_key(self, guard_id: str) -> Element:
        for g, k in self.guards:
            if g == guard_id:
                return k
        raise KeyError(guard_id)

    def entity_key(self, entity: str) -> Element:
        if entity == self.relay_id:
            return self.relay_public
        try:
            return self.guard_key(entity)
        except KeyError:
            return self.client_key(entity)

    def without(self, entities: Iterable[str]) -> "Roster":
        drop = set(entities)
        return Roster(tuple(c for c in self.clients if c[0] not in drop),
                      tuple(g for g in self.guards if g[0] not in drop),
                      self.relay_public, self.relay_id)

    def with_clients(self, clients: Iterable[tuple[str, Element]]) -> "Roster":
        return Roster(tuple(clients), self.guards, self.relay_public, self.relay_id)

    def to_text(self, group: GroupParams) -> str:
        def line(role, eid, key):
            return f"{role} {eid} {base64.b64encode(group.encode(key)).decode()}"
        rows = [line("relay", self.relay_id, self.relay_public)]
        rows += [line("guard", g, k) for g, k in self.guards]
        rows += [line("client", c, k) for c, k in self.clients]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, group: GroupParams) -> "Roster":
        clients, guards, relay = [], [], None
        relay_id = "relay"
        for n, raw in enumerate(text.splitlines(), start=1):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split()
            if len(parts) != 3:
                raise ValueError(f"roster line {n}: expected `role id base64-key`")
            role, eid, b64 = parts
            key = group.decode(base64.b64decode(b64))
            if role == "client":
                clients.append((eid, key))
            elif role == "guard":
                guards.append((eid, key))
            elif role == "relay":
                relay, relay_id = key, eid
            else:
                raise ValueError(f"roster line {n}: unknown role {role!r}")
        if relay is None:
            raise ValueError("roster has no relay line")
        return cls(tuple(clients), tuple(guards), relay, relay_id)


# =============================================================================
# AUTHENTICATION
# =============================================================================
@dataclass(frozen=True)
class AuthMessage:
    long_term_public: Element
    ephemeral_public: Element
    signature: bytes


def auth_payload(group: GroupParams, ephemeral_public: Element) -> bytes:
    return AUTH_LABEL + group.encode(ephemeral_public)


def client_authenticate(group: GroupParams, roster: Roster, long_term: KeyPair,
                        rng: random.Random) -> tuple[KeyPair, AuthMessage]:
    if long_term.public not in [k for _, k in roster.clients]:
        raise UnknownClient("long-term key not in roster")
    ephemeral = crypto.keygen(group, rng)
    sig = crypto.sign(group, long_term.private, auth_payload(group, ephemeral.public))
    return ephemeral, AuthMessage(long_term.public, ephemeral.public, sig)


def relay_accept_auth(group: GroupParams, roster: Roster, msg: AuthMessage) -> str:
    """Returns the authenticated client id."""
    client_id = next((c for c, k in roster.clients if k == msg.long_term_public), None)
    if client_id is None:
        raise UnknownClient("long-term key not in roster")
    if msg.ephemeral_public is None or group.is_identity(msg.ephemeral_public):
        raise BadSignature("degenerate ephemeral key", entity=client_id)
    if not crypto.verify(group, msg.long_term_public, auth_payload(group, msg.ephemeral_public),
                         msg.signature):
        raise BadSignature("auth signature does not verify", entity=client_id)
    return client_id


# =============================================================================
# SHUFFLE
# =============================================================================
@dataclass(frozen=True)
class ShuffleLink:
    guard_id: str
    input_keys: tuple[Element, ...]
    output_keys: tuple[Element, ...]
    input_base: Element
    output_base: Element


@dataclass(frozen=True)
class GuardShuffleSecret:
    """Never leaves the guard."""
    blinding: int
    permutation: tuple[int, ...]


@dataclass(frozen=True)
class ShuffleTranscript:
    links: tuple[ShuffleLink, ...]
    final_schedule: tuple[Element, ...]
    final_base: Element
    signatures: Mapping[str, bytes] = field(default_factory=dict)
    # extension point for a zero-knowledge shuffle proof per link
    proofs: Mapping[str, bytes] = field(default_factory=dict)


@dataclass(frozen=True)
class Schedule:
    slots: tuple[Element, ...]
    base: Element
    epoch: int

    @property
    def n(self) -> int:
        return len(self.slots)


def generate_permutation(n: int, rng: random.Random) -> tuple[int, ...]:
    perm = list(range(n))
    rng.shuffle(perm)
    return tuple(perm)


def apply_link(group: GroupParams, keys: Sequence[Element], base: Element,
               secret: GuardShuffleSecret) -> tuple[tuple[Element, ...], Element]:
    blinded = [group.exp(k, secret.blinding) for k in keys]
    return tuple(blinded[i] for i in secret.permutation), group.exp(base, secret.blinding)


def guard_shuffle(group: GroupParams, keys: Sequence[Element], base: Element, guard_id: str,
                  rng: random.Random, blinding: int | None = None
                  ) -> tuple[ShuffleLink, GuardShuffleSecret]:
    if len(keys) < 2:
        raise TooFewClients(f"shuffle needs >= 2 keys, got {len(keys)}", entity=guard_id)
    b = group.random_scalar(rng) if blinding is None else blinding
    secret = GuardShuffleSecret(b, generate_permutation(len(keys), rng))
    out_keys, out_base = apply_link(group, keys, base, secret)
    return ShuffleLink(guard_id, tuple(keys), out_keys, base, out_base), secret


def schedule_message(group: GroupParams, slots: Sequence[Element], base: Element) -> bytes:
    return SCHEDULE_LABEL + b"".join(group.encode(k) for k in slots) + group.encode(base)


def check_chain(transcript: ShuffleTranscript) -> None:
    links = transcript.links
    if not links:
        raise TranscriptTampered("transcript has no links")
    for prev, nxt in zip(links, links[1:]):
        if prev.output_keys != nxt.input_keys or prev.output_base != nxt.input_base:
            raise TranscriptTampered(f"chain broken between {prev.guard_id} and {nxt.guard_id}")
    for link in links:
        if len(link.input_keys) != len(link.output_keys):
            raise TranscriptTampered("link changes the key count", entity=link.guard_id)
    if tuple(transcript.final_schedule) != links[-1].output_keys or transcript.final_base != links[-1].output_base:
        raise TranscriptTampered("final schedule differs from the last link")
    if len(transcript.final_schedule) < 2:
        raise TooFewClients("schedule has fewer than 2 slots")


def guard_verify_and_sign(group: GroupParams, transcript: ShuffleTranscript, guard_id: str,
                          guard: KeyPair, own_blinding: int, own_permutation: Sequence[int],
                          produced: ShuffleLink | None = None) -> bytes:
    check_chain(transcript)
    mine = [link for link in transcript.links if link.guard_id == guard_id]
    if len(mine) != 1:
        raise TranscriptTampered("own link missing or duplicated", entity=guard_id)
    link = mine[0]
    if produced is not None and (link.input_keys != produced.input_keys
                                 or link.input_base != produced.input_base):
        raise TranscriptTampered("own link input differs from what was received", entity=guard_id)
    expect_keys, expect_base = apply_link(
        group, link.input_keys, link.input_base,
        GuardShuffleSecret(own_blinding, tuple(own_permutation)))
    if expect_keys != link.output_keys or expect_base != link.output_base:
        raise TranscriptTampered("own link output altered", entity=guard_id)
    return crypto.sign(group, guard.private,
                       schedule_message(group, transcript.final_schedule, transcript.final_base))


# =============================================================================
# SCHEDULE ACCEPTANCE / SECRETS
# =============================================================================
def client_accept_schedule(group: GroupParams, schedule: Schedule, signatures: Mapping[str, bytes],
                           roster: Roster, ephemeral: KeyPair,
                           trusted_guards: Iterable[str] = ()) -> int:
    if schedule.n < 2:
        raise TooFewClients("schedule has fewer than 2 slots")
    trusted = set(trusted_guards) or set(roster.guard_ids)
    msg = schedule_message(group, schedule.slots, schedule.base)
    valid = []
    for gid, sig in signatures.items():
        if gid not in roster.guard_ids:
            continue
        if crypto.verify(group, roster.guard_key(gid), msg, sig):
            valid.append(gid)
        else:
            logger.warning("schedule signature from %s does not verify", gid,
                           extra={"epoch": schedule.epoch, "entity": gid})
    if not trusted.intersection(valid):
        raise NoTrustedSignature("no trusted guard signed the schedule", epoch=schedule.epoch)
    mine = group.exp(schedule.base, ephemeral.private)
    for i, slot in enumerate(schedule.slots):
        if slot == mine:
            return i
    raise SlotNotFound("own pseudonym key not in the schedule", epoch=schedule.epoch)


def client_secrets(group: GroupParams, client_id: str, ephemeral_private: int,
                   guards: Sequence[tuple[str, Element]]) -> list[SharedSecret]:
    return [crypto.dh_derive(group, ephemeral_private, key, client_id, gid) for gid, key in guards]


def guard_secrets(group: GroupParams, guard_id: str, guard_private: int,
                  ephemerals: Sequence[tuple[str, Element]]) -> list[SharedSecret]:
    return [crypto.dh_derive(group, guard_private, key, cid, guard_id) for cid, key in ephemerals]


def derive_all_secrets(group: GroupParams, ephemerals: Mapping[str, KeyPair],
                       guards: Mapping[str, KeyPair]
                       ) -> tuple[list[list[SharedSecret]], list[list[SharedSecret]]]:
    """Both sides of the n x m matrix, indexed [client][guard]."""
    guard_pubs = [(gid, kp.public) for gid, kp in guards.items()]
    eph_pubs = [(cid, kp.public) for cid, kp in ephemerals.items()]
    client_side = [client_secrets(group, cid, kp.private, guard_pubs) for cid, kp in ephemerals.items()]
    columns = [guard_secrets(group, gid, kp.private, eph_pubs) for gid, kp in guards.items()]
    guard_side = [[columns[j][i] for j in range(len(columns))] for i in range(len(eph_pubs))]
    return client_side, guard_side


# =============================================================================
# RELAY ORCHESTRATION
# =============================================================================
class SetupConnections(Protocol):
    """What the relay needs from the outside world during setup.

    Methods raise `TimeoutError` when the peer does not answer in time.
    """

    def authenticate(self, client_id: str) -> AuthMessage | None: ...

    def shuffle(self, guard_id: str, keys: tuple[Element, ...], base: Element) -> ShuffleLink: ...

    def sign_transcript(self, guard_id: str, transcript: ShuffleTranscript) -> bytes: ...

    def distribute(self, result: "SetupResult") -> None: ...


@dataclass
class SetupResult:
    schedule: Schedule
    transcript: ShuffleTranscript
    slot_secrets: list[bytes]
    encrypted_secrets: list[bytes]
    ephemerals: list[tuple[str, Element]]
    rejected: list[str] = field(default_factory=list)

    @property
    def participants(self) -> list[str]:
        return [cid for cid, _ in self.ephemerals]


def relay_setup_orchestrate(group: GroupParams, roster: Roster, connections: SetupConnections,
                            epoch: int, rng: random.Random) -> SetupResult:
    ctx = {"epoch": epoch}
    ephemerals: list[tuple[str, Element]] = []
    rejected: list[str] = []
    for cid in roster.client_ids:
        try:
            msg = connections.authenticate(cid)
        except TimeoutError:
            msg = None
        if msg is None:
            rejected.append(cid)
            continue
        try:
            accepted = relay_accept_auth(group, roster, msg)
        except (UnknownClient, BadSignature) as e:
            logger.warning("auth rejected: %s", e, extra={**ctx, "entity": cid})
            rejected.append(cid)
            continue
        ephemerals.append((accepted, msg.ephemeral_public))
    if len(ephemerals) < 2:
        raise TooFewClients(f"only {len(ephemerals)} clients authenticated", epoch=epoch)

    keys = tuple(k for _, k in ephemerals)
    base = group.generator
    links = []
    for gid in roster.guard_ids:
        try:
            link = connections.shuffle(gid, keys, base)
        except TimeoutError as e:
            raise SetupFailed(f"guard {gid} did not shuffle in time", epoch=epoch, entity=gid) from e
        if link.input_keys != keys or link.input_base != base or len(link.output_keys) != len(keys):
            raise SetupFailed(f"guard {gid} returned a malformed link", epoch=epoch, entity=gid)
        links.append(link)
        keys, base = link.output_keys, link.output_base

    transcript = ShuffleTranscript(tuple(links), keys, base)
    msg = schedule_message(group, keys, base)
    signatures = {}
    for gid in roster.guard_ids:
        try:
            sig = connections.sign_transcript(gid, transcript)
        except TimeoutError as e:
            raise SetupFailed(f"guard {gid} did not sign in time", epoch=epoch, entity=gid) from e
        except TranscriptTampered as e:
            raise SetupFailed(f"guard {gid} refused the transcript: {e}", epoch=epoch, entity=gid) from e
        if not crypto.verify(group, roster.guard_key(gid), msg, sig):
            raise SetupFailed(f"guard {gid} signature does not verify", epoch=epoch, entity=gid)
        signatures[gid] = sig
    transcript = ShuffleTranscript(tuple(links), keys, base, signatures)
    schedule = Schedule(keys, base, epoch)

    slot_secrets = [rng.randbytes(crypto.SECRET_BYTES) for _ in schedule.slots]
    encrypted = [crypto.pke_encrypt(group, slot, r, rng, base=schedule.base)
                 for slot, r in zip(schedule.slots, slot_secrets)]
    result = SetupResult(schedule, transcript, slot_secrets, encrypted, ephemerals, rejected)
    connections.distribute(result)
    logger.info("setup complete: %d slots, %d guards", schedule.n, len(links), extra=ctx)
    return result


def client_slot_secret(group: GroupParams, ephemeral: KeyPair, slot: int,
                       encrypted: Sequence[bytes]) -> bytes:
    return crypto.pke_decrypt(group, ephemeral.private, encrypted[slot])


T = TypeVar("T")


def setup_with_retry(attempt: Callable[[int], T], retries: int, timeout_s: float,
                     on_backoff: Callable[[float], None] | None = None) -> T:
    """Runs `attempt(n)` until it succeeds; waits timeout*2^n between tries."""
    last: ProtocolError | None = None
    for n in range(retries + 1):
        try:
            return attempt(n)
        except SetupFailed as e:
            last = e
            delay = timeout_s * (2 ** n)
            logger.warning("setup attempt %d failed (%s); backing off %.1fs", n + 1, e, delay)
            if on_backoff and n < retries:
                on_backoff(delay)
    assert last is not None
    raise last


__all__ = [
    "AuthMessage", "GuardShuffleSecret", "Roster", "Schedule", "SetupConnections",
    "SetupResult", "ShuffleLink", "ShuffleTranscript", "client_accept_schedule", "client_authenticate",
    "client_secrets", "client_slot_secret", "derive_all_secrets", "guard_secrets", "guard_shuffle",
    "guard_verify_and_sign", "relay_accept_auth", "relay_setup_orchestrate", "setup_with_retry",
]
