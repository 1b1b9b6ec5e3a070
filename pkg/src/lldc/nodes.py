"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/nodes.py
VERSION:    4.2 (Pipelined rounds + load tuning + churn plans + scripted faults)
================================================================================

ABSTRACT:
    Client, guard and relay state machines running on the simulated network.

    EPOCH LIFECYCLE
        Setup (RPC-style exchanges charged on the simulated clock) ->
        Anonymize rounds -> churn / blame / timeout -> Setup of a new epoch.

    ROUNDS
        Downstream message z_s carries the output of round s and opens round
        s + W (its owner slot is named in the message). Clients absorb z_s into
        their history, then answer round s + W. Guards pre-stream their
        ciphers ahead of the relay under credit-based flow control.

    LOAD TUNING
        Every L rounds z carries a load request and the next pass gives every
        slot one round; a zero cell or "C" closes the slot, anything else keeps
        it open. Only active clients carry workload traffic, so idle slots
        close. With every slot closed the relay sleeps, then probes. Every
        trap-failed round waits for its owner's retransmission.

    FAULTS
        `FaultSpec` scripts one misbehaving entity per spec. Faults that must
        hit a 0 (or a 1) bit read the round's DC-net plaintext from the
        simulation's `PlaintextOracle`.

FRAMING (all node links, little-endian):
    [magic:2][version:1][type:1][epoch:4][round:8][length:4][body]
================================================================================
"""
from __future__ import annotations

import json
import logging
import random
import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any, Callable, Mapping, Sequence

import pandas as pd

from lldc import crypto
from lldc.crypto import Element, KeyPair, SharedSecret
from lldc.dcnet import (CONTROL_CONN, Chunk, DownstreamFlags, DownstreamMessage, DownstreamQueues,
                        RoundAccumulator, StreamReassembler, UpstreamCell, UpstreamQueue,
                        assemble_downstream, client_cipher, data_capacity, guard_cipher,
                        open_chunks, pads_for, seal_cell)
from lldc.disruption import (EXCLUDED, HISTORY_MISMATCH, UNTRACEABLE, BitReveal, BlameContext,
                             BlameRequest, BlameTranscript, RetransmitRecord, SecretReveal, Verdict,
                             apply_premask, make_bit_reveal, run_disruption_blame, verify_trap)
from lldc.equivocation import (EquivocationResponder, HashReveal, HashRequest, HistoryLog,
                               apply_keystream, blind_stream, client_tag, guard_tag, owner_blind,
                               relay_recover_key, run_equivocation_blame, unblind)
from lldc.errors import (BlameInconsistent, ConfigError, FrameError, GuardBufferFull,
                         HistoryMismatch, ProtocolError, RoundTimeout, SetupFailed, TooFewClients)
from lldc.lib.config import Settings
from lldc.setup_phase import (AuthMessage, GuardShuffleSecret, Roster, Schedule, SetupResult,
                              ShuffleLink, ShuffleTranscript, client_accept_schedule,
                              client_authenticate, client_secrets, client_slot_secret,
                              guard_secrets, guard_shuffle, guard_verify_and_sign,
                              relay_setup_orchestrate, setup_with_retry)
from lldc.simnet import EXIT, RELAY, US_PER_MS, ChurnEvent, Simulator, Topology

logger = logging.getLogger(__name__)

MAGIC = 0x4C44
VERSION = 1
FRAME_HEADER = struct.Struct("<HBBIQI")
CIPHER_TAG_LEN = struct.Struct("<H")
EXIT_HEADER = struct.Struct("<I")
PING = struct.Struct("<4sIQ")
PING_MAGIC = b"PING"

MIN_ROUND_TIMEOUT_US = 50 * US_PER_MS
DEFAULT_FAULT_ROUND = 4


# =============================================================================
# FRAMING
# =============================================================================
class MsgType(IntEnum):
    CIPHER = 1
    DOWNSTREAM = 2
    OPEN = 3
    CREDIT = 4
    EXIT = 5
    SETUP = 6
    BLAME = 7


@dataclass(frozen=True)
class Frame:
    type: MsgType
    epoch: int
    round: int
    body: bytes


def encode_frame(msg_type: MsgType, epoch: int, round: int, body: bytes) -> bytes:
    return FRAME_HEADER.pack(MAGIC, VERSION, int(msg_type), epoch, round, len(body)) + body


def decode_frame(data: bytes) -> Frame:
    if len(data) < FRAME_HEADER.size:
        raise FrameError("frame shorter than its header")
    magic, version, mtype, epoch, rnd, length = FRAME_HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic:#06x}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if len(data) != FRAME_HEADER.size + length:
        raise FrameError("frame length field does not match")
    try:
        t = MsgType(mtype)
    except ValueError as e:
        raise FrameError(f"unknown frame type {mtype}") from e
    return Frame(t, epoch, rnd, bytes(data[FRAME_HEADER.size:]))


def json_body(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def parse_json_body(body: bytes) -> Any:
    try:
        return json.loads(body.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"bad JSON body: {e}") from e


def cipher_body(bits: bytes, tag: bytes = b"") -> bytes:
    return bits + CIPHER_TAG_LEN.pack(len(tag)) + tag


def split_cipher_body(body: bytes, cell_bytes: int) -> tuple[bytes, bytes]:
    if len(body) < cell_bytes + CIPHER_TAG_LEN.size:
        raise FrameError("cipher body too short")
    (tlen,) = CIPHER_TAG_LEN.unpack_from(body, cell_bytes)
    tag = body[cell_bytes + CIPHER_TAG_LEN.size:]
    if len(tag) != tlen:
        raise FrameError("cipher tag length mismatch")
    return body[:cell_bytes], tag


def derive_rng(seed: int, label: str) -> random.Random:
    return random.Random(int.from_bytes(crypto.H(str(seed).encode(), b"/", label.encode())[:8], "big"))


# =============================================================================
# FAULTS
# =============================================================================
FAULTS = ("flip0", "flip1", "flip-bit", "random-cipher", "bad-kappa", "bad-sigma",
          "equivocate-z", "withhold")
REVEAL_STRATEGIES = ("truthful", "consistent-lie", "refuse", "forged-signature")
PLAINTEXT_FAULTS = ("flip0", "flip1")


@dataclass(frozen=True)
class FaultSpec:
    entity: str
    fault: str
    round: int | None = None
    bit: int | None = None
    strategy: str = "truthful"

    @classmethod
    def parse(cls, text: str, clients: Sequence[str] = (), guards: Sequence[str] = (),
              strategy: str = "truthful") -> "FaultSpec":
        """`entity:fault[@round]`, fault `flip-bit=K` takes a bit index.
        Aliases: disrupt-guard (first guard), disrupt-client (last client)."""
        try:
            entity, rest = text.split(":", 1)
        except ValueError as e:
            raise ConfigError(f"fault spec {text!r} must be entity:fault[@round]") from e
        rnd = None
        if "@" in rest:
            rest, r = rest.split("@", 1)
            try:
                rnd = int(r)
            except ValueError as e:
                raise ConfigError(f"bad fault round {r!r}") from e
        bit = None
        if rest.startswith("flip-bit="):
            try:
                bit = int(rest.split("=", 1)[1])
            except ValueError as e:
                raise ConfigError(f"bad bit index in {rest!r}") from e
            rest = "flip-bit"
        if rest not in FAULTS:
            raise ConfigError(f"unknown fault {rest!r} (known: {', '.join(FAULTS)})")
        if strategy not in REVEAL_STRATEGIES:
            raise ConfigError(f"unknown reveal strategy {strategy!r}")
        if entity == "disrupt-guard":
            if not guards:
                raise ConfigError("disrupt-guard needs at least one guard")
            entity = guards[0]
        elif entity == "disrupt-client":
            if not clients:
                raise ConfigError("disrupt-client needs at least one client")
            entity = clients[-1]
        return cls(entity, rest, rnd, bit, strategy)

    @property
    def fire_round(self) -> int:
        return DEFAULT_FAULT_ROUND if self.round is None else self.round

    def hits(self, round: int) -> bool:
        if self.fault == "withhold":
            return round >= self.fire_round
        return round == self.fire_round


def flip_bit(data: bytes, k: int) -> bytes:
    b = bytearray(data)
    b[k >> 3] ^= 0x80 >> (k & 7)
    return bytes(b)


def corrupt_bits(spec: FaultSpec, bits: bytes, plain: bytes | None, rng: random.Random) -> bytes:
    if spec.fault == "random-cipher":
        return rng.randbytes(len(bits))
    if spec.fault == "flip-bit":
        return flip_bit(bits, (spec.bit or 0) % (8 * len(bits)))
    if spec.fault in PLAINTEXT_FAULTS:
        want = 0 if spec.fault == "flip0" else 1
        candidates = [k for k in range(8 * len(bits)) if crypto.bit_at(plain, k) == want]
        if not candidates:
            return bits
        return flip_bit(bits, rng.choice(candidates))
    return bits


class PlaintextOracle:
    """DC-net level plaintext per (epoch, round), posted by the owner.
    Only scripted faults read it."""

    def __init__(self):
        self._x: dict[tuple[int, int], bytes] = {}
        self._waiting: dict[tuple[int, int], list[Callable[[bytes], None]]] = defaultdict(list)

    def post(self, epoch: int, round: int, x: bytes) -> None:
        self._x[(epoch, round)] = x
        for fn in self._waiting.pop((epoch, round), []):
            fn(x)

    def when(self, epoch: int, round: int, fn: Callable[[bytes], None]) -> None:
        if (epoch, round) in self._x:
            fn(self._x[(epoch, round)])
        else:
            self._waiting[(epoch, round)].append(fn)

    def get(self, epoch: int, round: int) -> bytes | None:
        return self._x.get((epoch, round))


class ScriptedResponder(EquivocationResponder):
    """Blame answers of a faulty entity, per reveal strategy."""

    def __init__(self, *args, strategy: str, sent_bits: Mapping[int, bytes], **kw):
        super().__init__(*args, **kw)
        self.strategy = strategy
        self.sent_bits = sent_bits

    def _sign_bits(self, request: BlameRequest, bits: Sequence[int]) -> BitReveal:
        return make_bit_reveal(self.group, self.entity, self.signing_key.private, request, bits)

    def bit_reveal(self, request: BlameRequest) -> BitReveal | None:
        if self.strategy == "refuse":
            return None
        r = super().bit_reveal(request)
        if r is None:
            return None
        if self.strategy == "forged-signature":
            return replace(r, signature=bytes(len(r.signature)))
        if self.strategy == "consistent-lie":
            sent = self.sent_bits.get(request.round)
            parity = 0
            for b in r.bits:
                parity ^= b
            if sent is not None and parity != crypto.bit_at(sent, request.position):
                bits = list(r.bits)
                bits[0] ^= 1
                return self._sign_bits(request, bits)
        return r

    def hash_reveal(self, request: HashRequest) -> HashReveal | None:
        if self.strategy == "refuse":
            return None
        r = super().hash_reveal(request)
        if r is not None and self.strategy == "forged-signature":
            return replace(r, signature=bytes(len(r.signature)))
        return r

    def pair_answer(self, evidence: Any, roster_keys: Mapping[str, Element]) -> SecretReveal | None:
        if self.strategy == "refuse":
            return None
        return super().pair_answer(evidence, roster_keys)


# =============================================================================
# STATE TYPES
# =============================================================================
@dataclass
class EpochState:
    epoch: int
    roster: Roster
    schedule: Schedule
    participants: list[str]
    open_slots: set[int]
    # Setup, Anonymize, Blame or Halted
    phase: str = "Anonymize"


@dataclass
class RoundContext:
    round: int
    owner_slot: int
    window: int
    history: bytes
    opened_us: int
    deadline_us: int


class GuardBuffer:
    """Pre-streamed guard ciphers: one folded value per buffered round plus a
    digest per guard for blame re-submission."""

    def __init__(self, cell_bytes: int, depth: int):
        self.depth = depth
        self._acc = RoundAccumulator(cell_bytes)
        self._sigma: dict[int, int] = {}
        self._digests: dict[int, dict[str, bytes]] = defaultdict(dict)

    def add(self, guard: str, round: int, bits: bytes, sigma: int | None, order_q: int) -> int:
        if guard in self._digests.get(round, {}):
            raise FrameError(f"duplicate cipher from {guard} for round {round}")
        if len(self._acc) >= self.depth and round not in self._acc.rounds():
            raise GuardBufferFull(f"guard buffer holds {self.depth} rounds")
        n = self._acc.add(round, bits)
        if sigma is not None:
            self._sigma[round] = (self._sigma.get(round, 0) + sigma) % order_q
        self._digests[round][guard] = guard_digest(bits, sigma)
        return n

    def count(self, round: int) -> int:
        return self._acc.count(round)

    def senders(self, round: int) -> set[str]:
        return set(self._digests.get(round, {}))

    def pop(self, round: int) -> tuple[bytes, int, dict[str, bytes]]:
        return self._acc.pop(round), self._sigma.pop(round, 0), self._digests.pop(round, {})

    def __len__(self) -> int:
        return len(self._acc)


def guard_digest(bits: bytes, sigma: int | None) -> bytes:
    return crypto.H(bits, b"" if sigma is None else sigma.to_bytes(32, "big"))


@dataclass
class FailedRound:
    round: int
    slot: int
    y_prime: bytes
    history: bytes
    client_bits: dict[str, bytes]
    kappas: dict[str, Element]
    guard_digests: dict[str, bytes]
    tries: int = 0


# =============================================================================
# CHURN PLAN
# =============================================================================
@dataclass(frozen=True)
class ChurnPlan:
    halt: bool
    background_setup: bool


def churn_handler(event: str, mode: str) -> ChurnPlan:
    if mode not in ("naive", "abrupt", "graceful"):
        raise ConfigError(f"unknown churn mode {mode!r}")
    if event not in ("join", "leave"):
        raise ConfigError(f"unknown churn event {event!r}")
    if mode == "naive" or (mode == "abrupt" and event == "leave"):
        return ChurnPlan(halt=True, background_setup=False)
    return ChurnPlan(halt=False, background_setup=True)


# =============================================================================
# WORKLOAD
# =============================================================================
WORKLOADS = ("ping", "cbr", "idle", "scripted")


@dataclass(frozen=True)
class Workload:
    kind: str = "ping"
    active_fraction: float = 0.05
    interval_ms: float = 50.0
    payload_bytes: int = 16
    messages: tuple[tuple[str, bytes], ...] = ()

    def __post_init__(self):
        if self.kind not in WORKLOADS:
            raise ConfigError(f"workload must be one of {WORKLOADS} (got {self.kind!r})")
        if not 0.0 <= self.active_fraction <= 1.0:
            raise ConfigError("active fraction must be in [0, 1]")


def pick_active(clients: Sequence[str], workload: Workload, rng: random.Random) -> set[str]:
    if workload.kind == "idle":
        return set()
    if workload.kind == "scripted":
        return {c for c, _ in workload.messages}
    k = max(1, round(workload.active_fraction * len(clients)))
    return set(rng.sample(list(clients), min(k, len(clients))))


# =============================================================================
# CLIENT
# =============================================================================
@dataclass
class ClientEpoch:
    epoch: int
    ephemeral: KeyPair
    slot: int
    r: bytes
    secrets: list[SharedSecret]
    schedule: Schedule
    index: int
    guards: list[tuple[str, Element]]
    history: HistoryLog
    sent: dict[int, tuple[bytes, bytes | None]] = field(default_factory=dict)
    pending_rt: set[int] = field(default_factory=set)
    answered_rt: set[int] = field(default_factory=set)


class ClientNode:
    def __init__(self, session: "Session", cid: str, long_term: KeyPair):
        self.s = session
        self.id = cid
        self.long_term = long_term
        self.rng = derive_rng(session.seed, cid)
        self.state: ClientEpoch | None = None
        self._pending_ephemeral: KeyPair | None = None
        self._next: ClientEpoch | None = None
        self.queue = UpstreamQueue()
        self.reassembler = StreamReassembler(session.settings.reassembly_cap)
        self.conn_id = self.rng.randrange(1, CONTROL_CONN)
        self.active = False
        self.leaving = False
        self.present = True
        self.sent_bits: dict[int, bytes] = {}
        self.responder: EquivocationResponder | None = None
        self._ping_seq = 0
        self._ping_outstanding: int | None = None
        session.sim.register(cid, self.on_message)

    # --- setup ---------------------------------------------------------------
    def authenticate(self, roster: Roster) -> AuthMessage:
        eph, msg = client_authenticate(self.s.group, roster, self.long_term, self.rng)
        self._pending_ephemeral = eph
        return msg

    def accept_setup(self, result: SetupResult, roster: Roster) -> None:
        g, st = self.s.group, self.s.settings
        eph = self._pending_ephemeral
        if eph is None or self.id not in result.participants:
            self._next = None
            return
        try:
            slot = client_accept_schedule(g, result.schedule, result.transcript.signatures, roster, eph,
                                          st.trusted_guards)
            r = client_slot_secret(g, eph, slot, result.encrypted_secrets)
        except ProtocolError as e:
            logger.error("%s rejects the schedule: %s", self.id, e, extra={**e.context, "entity": self.id})
            self._next = None
            return
        guards = list(roster.guards)
        self._next = ClientEpoch(result.schedule.epoch, eph, slot, r,
                                 client_secrets(g, self.id, eph.private, guards), result.schedule,
                                 result.participants.index(self.id), guards, HistoryLog(st.window))

    def activate(self, epoch: int) -> None:
        nxt = self._next
        self._next = None
        self.sent_bits = {}
        if nxt is None or nxt.epoch != epoch:
            self.state = None
            self.responder = None
            return
        self.state = nxt
        self.reassembler.clear()
        self.responder = self._make_responder()
        if self._ping_outstanding is not None:
            # lost with the old epoch
            self._ping_outstanding = None
            self.s.sim.after(0, self._ping)

    def _make_responder(self) -> EquivocationResponder:
        st = self.state
        s = self.s
        args = (s.group, self.id, "client", self.long_term, st.ephemeral.private, st.guards,
                st.secrets, s.relay_keys.public, st.index, self.rng)
        kw = {"cell_bits": s.settings.cell_bits, "history_for": st.history.snapshot}
        fault = s.fault_for(self.id)
        if fault is not None:
            return ScriptedResponder(*args, strategy=fault.strategy, sent_bits=self.sent_bits, **kw)
        return EquivocationResponder(*args, **kw)

    def depart(self) -> None:
        self.present = False
        self.leaving = False
        self.state = None
        self.queue.clear()
        self._ping_outstanding = None

    # --- workload ------------------------------------------------------------
    def start_workload(self, workload: Workload) -> None:
        if workload.kind == "ping":
            self.s.sim.after(0, self._ping)
        elif workload.kind == "cbr":
            self.s.sim.after(0, self._cbr, workload)
        elif workload.kind == "scripted":
            for cid, data in workload.messages:
                if cid == self.id:
                    self.queue.push(self.conn_id, data)

    def _ping(self) -> None:
        if not self.present or self._ping_outstanding is not None:
            return
        self._ping_seq += 1
        self._ping_outstanding = self._ping_seq
        body = PING.pack(PING_MAGIC, self._ping_seq, self.s.sim.now)
        self.queue.push(self.conn_id, body + bytes(max(0, self.s.workload.payload_bytes - PING.size)))

    def _cbr(self, workload: Workload) -> None:
        if not self.present:
            return
        self.queue.push(self.conn_id, self.rng.randbytes(workload.payload_bytes))
        self.s.sim.after(int(workload.interval_ms * US_PER_MS), self._cbr, workload)

    def _on_packet(self, packet: bytes) -> None:
        if len(packet) >= PING.size and packet[:4] == PING_MAGIC:
            _, seq, sent_us = PING.unpack_from(packet)
            if seq != self._ping_outstanding:
                return
            self._ping_outstanding = None
            rtt_ms = (self.s.sim.now - sent_us) / US_PER_MS
            self.s.sim.record("ping_rtt", entity=self.id, value=rtt_ms, round=seq,
                              epoch=self.state.epoch if self.state else None)
            self.s.sim.after(int(self.s.workload.interval_ms * US_PER_MS), self._ping)

    # --- messages ------------------------------------------------------------
    def on_message(self, src: str, data: bytes) -> None:
        st = self.state
        if st is None or not self.present:
            return
        try:
            frame = decode_frame(data)
        except FrameError as e:
            logger.warning("%s dropped a frame: %s", self.id, e)
            return
        if frame.epoch != st.epoch:
            return
        if frame.type == MsgType.OPEN:
            body = parse_json_body(frame.body)
            for i, owner in enumerate(body["owners"]):
                self.contribute(body["start"] + i, owner)
        elif frame.type == MsgType.DOWNSTREAM:
            self._on_downstream(frame.body)

    def _on_downstream(self, raw: bytes) -> None:
        st = self.state
        try:
            z = DownstreamMessage.decode(raw)
        except FrameError as e:
            logger.warning("%s: bad downstream message: %s", self.id, e)
            return
        st.history.absorb(z.round, raw)
        st.history.prune(z.round - 4 * self.s.settings.window - 8)
        for conn, data in open_chunks(z, [self.conn_id], self.s.group, st.ephemeral.private):
            try:
                packets = self.reassembler.feed(conn, data)
            except FrameError as e:
                logger.warning("%s: %s", self.id, e)
                continue
            for p in packets:
                self._on_packet(p)
        if z.flags.retransmit_required and z.retransmit_round in st.sent \
                and z.retransmit_round not in st.answered_rt:
            st.pending_rt.add(z.retransmit_round)
        if z.owner_slot >= 0:
            self.contribute(z.round + self.s.settings.window, z.owner_slot)

    def _next_cell(self, round: int) -> tuple[UpstreamCell, bool]:
        st = self.state
        if st.pending_rt:
            rt = min(st.pending_rt)
            st.pending_rt.discard(rt)
            st.answered_rt.add(rt)
            cell_input, k = st.sent[rt]
            rec = RetransmitRecord(rt, k or b"", cell_input)
            return seal_cell(CONTROL_CONN, rec.encode(), st.r), False
        if self.leaving:
            return seal_cell(CONTROL_CONN, b"C", st.r), True
        nxt = self.queue.take(data_capacity(self.s.settings.cell_bytes))
        if nxt is not None:
            return seal_cell(nxt[0], nxt[1], st.r), True
        if self.active:
            return seal_cell(CONTROL_CONN, b"O", st.r), True
        return UpstreamCell(), True

    def contribute(self, round: int, owner_slot: int) -> None:
        st, s = self.state, self.s
        cfg = s.settings
        fault = s.fault_for(self.id)
        if fault is not None and fault.fault == "withhold" and fault.hits(round):
            return
        is_owner = owner_slot == st.slot
        pads = pads_for(st.secrets, round, cfg.cell_bits)
        x = None
        k = None
        if is_owner:
            cell, blind = self._next_cell(round)
            x = cell.encode(cfg.cell_bytes)
            if cfg.premask:
                x = apply_premask(x, st.r, round)
            if cfg.equivocation and blind:
                blinded, k = owner_blind(x, s.group, self.rng)
                x = blinded.x_prime
            st.sent[round] = (cell.mac_input(), k)
            for old in [t for t in st.sent if t < round - 8 * cfg.window - 32]:
                del st.sent[old]
            s.oracle.post(st.epoch, round, x)
        bits = client_cipher(st.secrets, round, is_owner, x, cfg.cell_bits, self.id, pads=pads).bits
        tag = b""
        if cfg.equivocation:
            kappa = client_tag(s.group, pads, st.history.snapshot(round), k is not None, k).value
            if fault is not None and fault.fault == "bad-kappa" and fault.hits(round):
                kappa = s.group.mul(kappa, s.group.generator)
            tag = s.group.encode(kappa)
        if fault is not None and fault.fault in ("flip0", "flip1", "flip-bit", "random-cipher") \
                and fault.hits(round):
            epoch = st.epoch

            def send_corrupted(plain: bytes | None) -> None:
                if self.state is None or self.state.epoch != epoch:
                    return
                self._send_cipher(round, corrupt_bits(fault, bits, plain, self.rng), tag)

            if fault.fault in PLAINTEXT_FAULTS:
                s.oracle.when(epoch, round, send_corrupted)
            else:
                send_corrupted(None)
            return
        self._send_cipher(round, bits, tag)

    def _send_cipher(self, round: int, bits: bytes, tag: bytes) -> None:
        st = self.state
        if self.s.fault_for(self.id) is not None:
            self.sent_bits[round] = bits
        self.s.sim.send(self.id, RELAY, encode_frame(MsgType.CIPHER, st.epoch, round, cipher_body(bits, tag)),
                        kind="cipher", epoch=st.epoch, round=round)


# =============================================================================
# GUARD
# =============================================================================
@dataclass
class GuardEpoch:
    epoch: int
    secrets: list[SharedSecret]
    clients: list[tuple[str, Element]]
    next_round: int = 0
    credit: int = -1
    sent: dict[int, tuple[bytes, int | None]] = field(default_factory=dict)


class GuardNode:
    def __init__(self, session: "Session", gid: str, keys: KeyPair, index: int):
        self.s = session
        self.id = gid
        self.keys = keys
        self.index = index
        self.rng = derive_rng(session.seed, gid)
        self.state: GuardEpoch | None = None
        self._next: GuardEpoch | None = None
        self._shuffle: tuple[ShuffleLink, GuardShuffleSecret] | None = None
        self.sent_bits: dict[int, bytes] = {}
        self.responder: EquivocationResponder | None = None
        session.sim.register(gid, self.on_message)

    # --- setup ---------------------------------------------------------------
    def shuffle(self, keys: tuple[Element, ...], base: Element) -> ShuffleLink:
        link, secret = guard_shuffle(self.s.group, keys, base, self.id, self.rng)
        self._shuffle = (link, secret)
        return link

    def sign_transcript(self, transcript: ShuffleTranscript) -> bytes:
        link, secret = self._shuffle
        return guard_verify_and_sign(self.s.group, transcript, self.id, self.keys, secret.blinding,
                                     secret.permutation, produced=link)

    def accept_setup(self, result: SetupResult) -> None:
        eph = list(result.ephemerals)
        self._next = GuardEpoch(result.schedule.epoch,
                                guard_secrets(self.s.group, self.id, self.keys.private, eph), eph)

    def activate(self, epoch: int) -> None:
        nxt, self._next = self._next, None
        self.sent_bits = {}
        if nxt is None or nxt.epoch != epoch:
            self.state = None
            return
        self.state = nxt
        s = self.s
        args = (s.group, self.id, "guard", self.keys, self.keys.private, nxt.clients, nxt.secrets,
                s.relay_keys.public, self.index, self.rng)
        kw = {"cell_bits": s.settings.cell_bits}
        fault = s.fault_for(self.id)
        if fault is not None:
            self.responder = ScriptedResponder(*args, strategy=fault.strategy, sent_bits=self.sent_bits, **kw)
        else:
            self.responder = EquivocationResponder(*args, **kw)

    def resubmit(self, round: int) -> tuple[bytes, int | None] | None:
        return self.state.sent.get(round) if self.state else None

    # --- rounds --------------------------------------------------------------
    def on_message(self, src: str, data: bytes) -> None:
        st = self.state
        if st is None:
            return
        try:
            frame = decode_frame(data)
        except FrameError as e:
            logger.warning("%s dropped a frame: %s", self.id, e)
            return
        if frame.epoch != st.epoch or frame.type != MsgType.CREDIT:
            return
        st.credit = max(st.credit, int(parse_json_body(frame.body)["upto"]))
        while st.next_round <= st.credit:
            self.produce(st.next_round)
            st.next_round += 1

    def produce(self, round: int) -> None:
        st, s = self.state, self.s
        cfg = s.settings
        fault = s.fault_for(self.id)
        if fault is not None and fault.fault == "withhold" and fault.hits(round):
            return
        pads = pads_for(st.secrets, round, cfg.cell_bits)
        bits = guard_cipher(st.secrets, round, cfg.cell_bits, self.id, pads=pads).bits
        sigma = guard_tag(s.group, pads).value if cfg.equivocation else None
        if sigma is not None and fault is not None and fault.fault == "bad-sigma" and fault.hits(round):
            sigma = (sigma + 1) % s.group.order_q
        if fault is not None and fault.fault in ("flip0", "flip1", "flip-bit", "random-cipher") \
                and fault.hits(round):
            epoch = st.epoch

            def send_corrupted(plain: bytes | None) -> None:
                if self.state is None or self.state.epoch != epoch:
                    return
                self._send(round, corrupt_bits(fault, bits, plain, self.rng), sigma)

            if fault.fault in PLAINTEXT_FAULTS:
                s.oracle.when(epoch, round, send_corrupted)
            else:
                send_corrupted(None)
            return
        self._send(round, bits, sigma)

    def _send(self, round: int, bits: bytes, sigma: int | None) -> None:
        st = self.state
        st.sent[round] = (bits, sigma)
        for old in [t for t in st.sent if t < round - 2 * self.s.settings.effective_guard_depth - 64]:
            del st.sent[old]
        if self.s.fault_for(self.id) is not None:
            self.sent_bits[round] = bits
        tag = b"" if sigma is None else self.s.group.encode_scalar(sigma)
        self.s.sim.send(self.id, RELAY, encode_frame(MsgType.CIPHER, st.epoch, round, cipher_body(bits, tag)),
                        kind="guard_cipher", epoch=st.epoch, round=round)


# =============================================================================
# EXIT
# =============================================================================
class ExitNode:
    """Stands in for the Internet: echoes (or sinks) every upstream packet."""

    def __init__(self, session: "Session", echo: bool = True):
        self.s = session
        self.echo = echo
        session.sim.register(EXIT, self.on_message)

    def on_message(self, src: str, data: bytes) -> None:
        frame = decode_frame(data)
        (conn,) = EXIT_HEADER.unpack_from(frame.body)
        packet = frame.body[EXIT_HEADER.size:]
        self.s.sim.record("exit_packet", entity=f"{conn:08x}", bytes=len(packet), detail=packet.hex(),
                          epoch=frame.epoch)
        if self.echo:
            self.s.sim.send(EXIT, RELAY, data, kind="exit")


# =============================================================================
# RELAY
# =============================================================================
@dataclass
class RelayEpoch:
    state: EpochState
    setup: SetupResult
    guards: list[str]
    client_acc: RoundAccumulator
    guard_buf: GuardBuffer
    history: HistoryLog
    reassembler: StreamReassembler
    kappa: dict[int, Element] = field(default_factory=dict)
    held: dict[int, dict[str, tuple[bytes, Element | None]]] = field(default_factory=lambda: defaultdict(dict))
    rounds: dict[int, RoundContext] = field(default_factory=dict)
    next_finish: int = 0
    last_owner: int = -1
    pass_queue: list[int] = field(default_factory=list)
    pass_rounds: dict[int, int] = field(default_factory=dict)
    pass_answers: dict[int, bool] = field(default_factory=dict)
    failed: dict[int, FailedRound] = field(default_factory=dict)
    paused_until: int = 0
    sleeping: bool = False

    @property
    def epoch(self) -> int:
        return self.state.epoch

    @property
    def participants(self) -> list[str]:
        return self.state.participants


class RelayNode:
    def __init__(self, session: "Session", keys: KeyPair):
        self.s = session
        self.keys = keys
        self.ep: RelayEpoch | None = None
        self.downstream = DownstreamQueues()
        self.rng = derive_rng(session.seed, RELAY)
        session.sim.register(RELAY, self.on_message)

    # --- epoch ---------------------------------------------------------------
    def activate(self, result: SetupResult, roster: Roster) -> None:
        cfg = self.s.settings
        n = result.schedule.n
        st = EpochState(result.schedule.epoch, roster, result.schedule, result.participants,
                        set(range(n)))
        self.ep = RelayEpoch(st, result, roster.guard_ids, RoundAccumulator(cfg.cell_bytes),
                             GuardBuffer(cfg.cell_bytes, cfg.effective_guard_depth + cfg.window),
                             HistoryLog(cfg.window), StreamReassembler(cfg.reassembly_cap))
        self.downstream.clear()
        self._credit(cfg.effective_guard_depth - 1)
        self._open_batch(0, cfg.window)

    def halt(self) -> None:
        if self.ep is not None:
            self.ep.state.phase = "Halted"
        self.ep = None

    @property
    def active(self) -> bool:
        return self.ep is not None

    def _credit(self, upto: int) -> None:
        ep = self.ep
        self.s.sim.broadcast(RELAY, ep.guards,
                             encode_frame(MsgType.CREDIT, ep.epoch, max(upto, 0), json_body({"upto": upto})),
                             kind="credit", epoch=ep.epoch)

    def _round_timeout_us(self) -> int:
        topo = self.s.topology
        rtt = topo.max_rtt_us([*self.ep.participants, *self.ep.guards])
        return max(self.s.settings.round_timeout_rtt * rtt, MIN_ROUND_TIMEOUT_US)

    def _register_round(self, round: int, owner: int) -> None:
        ep = self.ep
        snap = ep.history.snapshot(round)
        ctx = RoundContext(round, owner, self.s.settings.window, snap, self.s.sim.now,
                           self.s.sim.now + self._round_timeout_us())
        ep.rounds[round] = ctx
        self.s.sim.at(ctx.deadline_us, self._check_deadline, ep.epoch, round)

    def _open_batch(self, start: int, count: int) -> None:
        """OPEN frame: first rounds of an epoch, or the probe after sleeping."""
        ep = self.ep
        owners = []
        for i in range(count):
            owner = self._next_owner(start + i)
            if owner is None:
                break
            owners.append(owner)
            self._register_round(start + i, owner)
        if not owners:
            return
        self.s.sim.broadcast(RELAY, ep.participants,
                             encode_frame(MsgType.OPEN, ep.epoch, start,
                                          json_body({"start": start, "owners": owners})),
                             kind="open", epoch=ep.epoch, round=start)

    def _next_owner(self, round: int) -> int | None:
        ep = self.ep
        if ep.pass_queue:
            slot = ep.pass_queue.pop(0)
            ep.pass_rounds[round] = slot
            return slot
        if not ep.state.open_slots:
            return None
        ordered = sorted(ep.state.open_slots)
        slot = next((s for s in ordered if s > ep.last_owner), ordered[0])
        ep.last_owner = slot
        return slot

    # --- inbound -------------------------------------------------------------
    def on_message(self, src: str, data: bytes) -> None:
        try:
            frame = decode_frame(data)
        except FrameError as e:
            logger.warning("relay dropped a frame from %s: %s", src, e)
            return
        if frame.type == MsgType.EXIT:
            self._on_exit(frame)
            return
        ep = self.ep
        if ep is None or frame.epoch != ep.epoch or frame.type != MsgType.CIPHER:
            return
        if frame.round < ep.next_finish:
            return
        cfg = self.s.settings
        try:
            bits, tag = split_cipher_body(frame.body, cfg.cell_bytes)
            if src in ep.guards:
                sigma = self.s.group.decode_scalar(tag) if cfg.equivocation else None
                ep.guard_buf.add(src, frame.round, bits, sigma, self.s.group.order_q)
            elif src in ep.participants:
                if src in ep.held[frame.round]:
                    raise FrameError(f"duplicate cipher from {src}")
                kappa = self.s.group.decode(tag) if cfg.equivocation else None
                ep.client_acc.add(frame.round, bits)
                if kappa is not None:
                    prev = ep.kappa.get(frame.round)
                    ep.kappa[frame.round] = kappa if prev is None else self.s.group.mul(prev, kappa)
                ep.held[frame.round][src] = (bits, kappa)
            else:
                return
        except (FrameError, GuardBufferFull) as e:
            logger.warning("relay rejected cipher from %s: %s", src, e,
                           extra={"epoch": ep.epoch, "round": frame.round, "entity": src})
            return
        self._try_finish()

    def _on_exit(self, frame: Frame) -> None:
        (conn,) = EXIT_HEADER.unpack_from(frame.body)
        try:
            self.downstream.push(conn, frame.body[EXIT_HEADER.size:])
        except FrameError as e:
            logger.warning("relay: %s", e)

    def _complete(self, round: int) -> bool:
        ep = self.ep
        return (round in ep.rounds and len(ep.held.get(round, {})) == len(ep.participants)
                and ep.guard_buf.count(round) == len(ep.guards))

    def _try_finish(self) -> None:
        while self.ep is not None and self._complete(self.ep.next_finish):
            t = self.ep.next_finish
            self.ep.next_finish += 1
            self._finish(t)

    # --- round completion ----------------------------------------------------
    def _open_cell(self, round: int, history: bytes, x_dc: bytes, sigma: int,
                   kappa: Element | None, r: bytes) -> UpstreamCell | None:
        cfg, g = self.s.settings, self.s.group
        candidates = []
        if cfg.equivocation:
            try:
                k = relay_recover_key(g, history, [sigma], [kappa])
                candidates.append(unblind(x_dc, k))
            except HistoryMismatch:
                pass
        # retransmission rounds travel unblinded
        candidates.append(x_dc)
        for y in candidates:
            if cfg.premask:
                y = apply_premask(y, r, round)
            try:
                cell = UpstreamCell.decode(y)
            except FrameError:
                continue
            if verify_trap(cell, r):
                return cell
        return None

    def _finish(self, round: int) -> None:
        ep, s = self.ep, self.s
        ctx = ep.rounds.pop(round)
        guard_bits, sigma, digests = ep.guard_buf.pop(round)
        client_bits = ep.client_acc.pop(round)
        kappa = ep.kappa.pop(round, None)
        held = ep.held.pop(round, {})
        x_dc = crypto.xor_bytes(guard_bits, client_bits)
        slot = ctx.owner_slot
        r = ep.setup.slot_secrets[slot]
        cell = self._open_cell(round, ctx.history, x_dc, sigma, kappa, r)
        s.sim.record("round_done", epoch=ep.epoch, round=round, entity=str(slot),
                     value=(s.sim.now - ctx.opened_us) / US_PER_MS,
                     detail="ok" if cell is not None else "trap_failed")
        if cell is None:
            logger.warning("trap failed for round %d", round, extra={"epoch": ep.epoch, "round": round})
            # queued; retransmission requests go out oldest first
            ep.failed[round] = FailedRound(round, slot, x_dc, ctx.history,
                                           {c: b for c, (b, _) in held.items()},
                                           {c: k for c, (_, k) in held.items()}, digests)
            self._pass_answer(round, slot, True)
        else:
            self._handle_cell(round, slot, cell)
        if self.ep is not ep:
            return
        s.on_round_done(ep.epoch, round)
        if self.ep is not ep:
            return
        if s.sim.now < ep.paused_until:
            s.sim.at(ep.paused_until, self._issue, ep.epoch, round)
        else:
            self._issue(ep.epoch, round)

    def _pass_answer(self, round: int, slot: int, open_: bool) -> None:
        ep = self.ep
        if round not in ep.pass_rounds:
            return
        del ep.pass_rounds[round]
        ep.pass_answers[slot] = open_
        if not ep.pass_rounds and not ep.pass_queue:
            ep.state.open_slots = {sl for sl, o in ep.pass_answers.items() if o}
            ep.pass_answers = {}
            self.s.sim.record("load_state", epoch=ep.epoch, round=round, value=len(ep.state.open_slots))

    def _handle_cell(self, round: int, slot: int, cell: UpstreamCell) -> None:
        ep, s = self.ep, self.s
        closing = cell.is_zero or (cell.is_control and cell.payload[:1] == b"C")
        self._pass_answer(round, slot, not closing)
        record = None
        if cell.is_control and cell.payload[:1] == RetransmitRecord.MARK:
            try:
                record = RetransmitRecord.decode(cell.payload)
            except FrameError as e:
                logger.warning("bad retransmission record: %s", e)
        elif not cell.is_zero and not cell.is_control:
            key = ep.setup.schedule.slots[slot]
            try:
                packets = ep.reassembler.feed(cell.conn_id, cell.payload)
            except FrameError as e:
                logger.warning("relay: %s", e, extra={"epoch": ep.epoch, "round": round})
                packets = []
            self.downstream.bind(cell.conn_id, key)
            for p in packets:
                s.sim.send(RELAY, EXIT, encode_frame(MsgType.EXIT, ep.epoch, round,
                                                     EXIT_HEADER.pack(cell.conn_id) + p), kind="exit")
        for f in list(ep.failed.values()):
            if f.slot != slot:
                continue
            if record is not None:
                if record.round == f.round:
                    del ep.failed[f.round]
                    self._on_retransmission(f, record)
                    return
                continue
            if round - s.settings.window < f.round:
                # opened before the flag went out
                continue
            f.tries += 1
            if f.tries >= s.settings.retransmit_limit:
                del ep.failed[f.round]
                s.record_verdict(BlameTranscript(f.round, f.y_prime, f.y_prime,
                                                 verdict=Verdict(UNTRACEABLE, reason="no retransmission")),
                                 duration_us=0, epoch=ep.epoch)

    def _on_retransmission(self, f: FailedRound, record: RetransmitRecord) -> None:
        ep, cfg = self.ep, self.s.settings
        r = ep.setup.slot_secrets[f.slot]
        try:
            cell = record.rebuild(r)
        except FrameError as e:
            logger.warning("unusable retransmission: %s", e)
            return
        x = cell.encode(cfg.cell_bytes)
        if cfg.premask:
            x = apply_premask(x, r, f.round)
        if cfg.equivocation and record.key:
            x = apply_keystream(x, blind_stream(record.key, len(x)))
        self.s.run_blame(f, x, record.key)

    def _issue(self, epoch: int, round: int) -> None:
        ep, s = self.ep, self.s
        if ep is None or ep.epoch != epoch:
            return
        cfg = s.settings
        load = round > 0 and round % cfg.load_period == 0
        if load and not ep.pass_queue:
            ep.pass_queue = list(range(ep.state.schedule.n))
            ep.pass_answers = {}
        new_round = round + cfg.window
        owner = self._next_owner(new_round)
        pending = min(ep.failed) if ep.failed else None
        flags = DownstreamFlags(retransmit_required=pending is not None, load_request=load)
        z = assemble_downstream(round, self.downstream, cfg.downstream_cap, s.group,
                                ep.setup.schedule.base, self.rng, flags, pending,
                                owner if owner is not None else -1)
        raw = z.encode()
        ep.history.absorb(round, raw)
        ep.history.prune(round - 4 * cfg.window - 8)
        if owner is not None:
            self._register_round(new_round, owner)
        payloads: bytes | dict[str, bytes] = raw
        fault = s.fault_for(RELAY)
        if fault is not None and fault.fault == "equivocate-z" and fault.hits(round):
            victim = ep.participants[-1]
            dummy = Chunk(self.rng.randrange(1, CONTROL_CONN), self.rng.randbytes(48))
            forged = replace(z, chunks=z.chunks + (dummy,))
            payloads = {c: raw for c in ep.participants}
            payloads[victim] = forged.encode()
            logger.info("relay equivocates on round %d towards %s", round, victim)
        frames = (encode_frame(MsgType.DOWNSTREAM, ep.epoch, round, payloads)
                  if isinstance(payloads, bytes)
                  else {c: encode_frame(MsgType.DOWNSTREAM, ep.epoch, round, p) for c, p in payloads.items()})
        s.sim.broadcast(RELAY, ep.participants, frames, kind="downstream", epoch=ep.epoch, round=round)
        self._credit(round + cfg.effective_guard_depth)
        if owner is None and not ep.rounds:
            self._sleep(round + 1)

    def _sleep(self, next_round: int) -> None:
        ep, s = self.ep, self.s
        if ep.sleeping:
            return
        ep.sleeping = True
        s.sim.record("sleep", epoch=ep.epoch, round=next_round, value=s.settings.sleep_ms)
        s.sim.after(s.settings.sleep_ms * US_PER_MS, self._wake, ep.epoch, next_round)

    def _wake(self, epoch: int, next_round: int) -> None:
        ep = self.ep
        if ep is None or ep.epoch != epoch:
            return
        ep.sleeping = False
        ep.pass_queue = list(range(ep.state.schedule.n))
        ep.pass_answers = {}
        ep.next_finish = next_round
        self._open_batch(next_round, min(self.s.settings.window, ep.state.schedule.n))

    def _check_deadline(self, epoch: int, round: int) -> None:
        ep = self.ep
        if ep is None or ep.epoch != epoch or round not in ep.rounds:
            return
        if self.s.sim.now < ep.paused_until:
            self.s.sim.at(ep.paused_until + self._round_timeout_us(), self._check_deadline, epoch, round)
            return
        if round > ep.next_finish:
            # waits behind an earlier round
            self.s.sim.after(self._round_timeout_us(), self._check_deadline, epoch, round)
            return
        held = ep.held.get(round, {})
        sent = ep.guard_buf.senders(round)
        missing = [c for c in ep.participants if c not in held] + [g for g in ep.guards if g not in sent]
        err = RoundTimeout(f"round {round} incomplete", missing=tuple(missing), epoch=epoch, round=round)
        logger.warning("%s; missing %s", err, ", ".join(missing), extra=err.context)
        self.s.sim.record("round_timeout", epoch=epoch, round=round, detail=",".join(missing))
        self.s.on_withheld(missing)


# =============================================================================
# SETUP / BLAME ADAPTERS (simulated time)
# =============================================================================
class SimSetupConnections:
    """`SetupConnections` over the simulator: exchanges run synchronously and
    their cost is charged to the simulated clock (`finish_us`)."""

    def __init__(self, session: "Session", roster: Roster, present: set[str]):
        self.s = session
        self.roster = roster
        self.present = present
        self.start_us = session.sim.now
        self.finish_us = self.start_us
        self._phase = ""
        self._phase_start = self.start_us

    def _enter(self, phase: str) -> int:
        if phase != self._phase:
            self._phase = phase
            self._phase_start = self.finish_us
        return self._phase_start

    def _exchange(self, peer: str, out_bytes: int, back_bytes: int, phase: str, start: int | None = None) -> None:
        sim = self.s.sim
        begin = self._enter(phase) if start is None else start
        there = sim.account(RELAY, peer, out_bytes, kind=f"setup_{phase}", start_us=begin)
        back = sim.account(peer, RELAY, back_bytes, kind=f"setup_{phase}", start_us=there)
        self.finish_us = max(self.finish_us, back)

    @property
    def elapsed_us(self) -> int:
        return self.finish_us - self.start_us

    def authenticate(self, client_id: str) -> AuthMessage | None:
        if client_id not in self.present:
            return None
        eb = self.s.group.element_bytes
        self._exchange(client_id, FRAME_HEADER.size + 8, FRAME_HEADER.size + 2 * eb + 64, "auth")
        return self.s.clients[client_id].authenticate(self.roster)

    def shuffle(self, guard_id: str, keys: tuple[Element, ...], base: Element) -> ShuffleLink:
        eb = self.s.group.element_bytes
        size = FRAME_HEADER.size + (len(keys) + 1) * eb
        # sequential: each guard shuffles the previous output
        self._enter("shuffle")
        self._exchange(guard_id, size, size, "shuffle", start=self.finish_us)
        return self.s.guards[guard_id].shuffle(keys, base)

    def sign_transcript(self, guard_id: str, transcript: ShuffleTranscript) -> bytes:
        eb = self.s.group.element_bytes
        size = FRAME_HEADER.size + len(transcript.links) * 2 * (len(transcript.final_schedule) + 1) * eb
        self._exchange(guard_id, size, FRAME_HEADER.size + 64, "sign")
        return self.s.guards[guard_id].sign_transcript(transcript)

    def distribute(self, result: SetupResult) -> None:
        g = self.s.group
        size = (FRAME_HEADER.size + result.schedule.n * g.element_bytes
                + sum(len(c) for c in result.encrypted_secrets) + 64 * len(result.transcript.signatures))
        begin = self._enter("distribute")
        for cid in result.participants:
            self._exchange(cid, size, FRAME_HEADER.size, "distribute", start=begin)
        for gid in self.roster.guard_ids:
            self._exchange(gid, FRAME_HEADER.size + result.schedule.n * g.element_bytes,
                           FRAME_HEADER.size, "distribute", start=begin)
            self.s.guards[gid].accept_setup(result)
        for cid in result.participants:
            self.s.clients[cid].accept_setup(result, self.roster)


class SimBlameParties:
    """Routes blame queries to node responders and charges each exchange."""

    def __init__(self, session: "Session"):
        self.s = session
        self.start_us = session.sim.now
        self.finish_us = self.start_us
        self._phase = ""
        self._phase_start = self.start_us

    def _charge(self, entity: str, phase: str, out_bytes: int, back_bytes: int) -> None:
        if phase != self._phase:
            self._phase = phase
            self._phase_start = self.finish_us
        sim = self.s.sim
        there = sim.account(RELAY, entity, FRAME_HEADER.size + out_bytes, kind=f"blame_{phase}",
                            start_us=self._phase_start)
        back = sim.account(entity, RELAY, FRAME_HEADER.size + back_bytes, kind=f"blame_{phase}",
                           start_us=there)
        self.finish_us = max(self.finish_us, back)

    def _responder(self, entity: str):
        node = self.s.clients.get(entity) or self.s.guards.get(entity)
        return node.responder if node is not None else None

    def bit_reveal(self, entity: str, request: BlameRequest) -> BitReveal | None:
        r = self._responder(entity)
        out = r.bit_reveal(request) if r is not None else None
        self._charge(entity, "bits", 96, 96 + (len(out.bits) if out else 0))
        return out

    def hash_reveal(self, entity: str, request: HashRequest) -> HashReveal | None:
        r = self._responder(entity)
        out = r.hash_reveal(request) if r is not None else None
        self._charge(entity, "hashes", 96, 128 + 32 * (len(out.hashes) if out else 0))
        return out

    def pair_answer(self, entity: str, evidence: Any) -> SecretReveal | None:
        r = self._responder(entity)
        out = r.pair_answer(evidence, self.s.roster_keys()) if r is not None else None
        self._charge(entity, "pair", 256, 256)
        return out

    def resubmit(self, guard: str, round: int) -> tuple[bytes, int | None] | None:
        out = self.s.guards[guard].resubmit(round)
        self._charge(guard, "resubmit", 32, self.s.settings.cell_bytes + 40)
        return out

    @property
    def elapsed_us(self) -> int:
        return self.finish_us - self.start_us


# =============================================================================
# SESSION
# =============================================================================
@dataclass
class SessionConfig:
    settings: Settings
    topology: Topology
    workload: Workload = field(default_factory=Workload)
    rounds: int = 200
    duration_ms: float | None = None
    faults: tuple[FaultSpec, ...] = ()
    churn: tuple[ChurnEvent, ...] = ()
    present: frozenset[str] | None = None
    max_epochs: int | None = None
    exit_echo: bool = True


@dataclass
class SessionResult:
    log: pd.DataFrame
    transcripts: list[BlameTranscript]
    epochs: int
    setup_durations_ms: list[float]
    rounds_completed: int
    excluded: list[str]
    stop_reason: str

    @property
    def verdicts(self) -> list[Verdict]:
        return [t.verdict for t in self.transcripts]


class Session:
    """Wires every node onto one simulator and drives epochs."""

    def __init__(self, config: SessionConfig):
        cfg = config.settings
        self.config = config
        self.settings = cfg
        self.seed = cfg.seed
        self.topology = config.topology
        self.workload = config.workload
        self.group = crypto.get_group(cfg.group)
        self.sim = Simulator(config.topology, cfg.seed)
        self.oracle = PlaintextOracle()
        self._faults = {f.entity: f for f in config.faults}
        key_rng = derive_rng(cfg.seed, "keys")
        self.relay_keys = crypto.keygen(self.group, key_rng)
        client_keys = {c: crypto.keygen(self.group, key_rng) for c in config.topology.clients}
        guard_keys = {g: crypto.keygen(self.group, key_rng) for g in config.topology.guards}
        self.roster = Roster(tuple((c, k.public) for c, k in client_keys.items()),
                             tuple((g, k.public) for g, k in guard_keys.items()), self.relay_keys.public)
        self.relay = RelayNode(self, self.relay_keys)
        self.clients = {c: ClientNode(self, c, k) for c, k in client_keys.items()}
        self.guards = {g: GuardNode(self, g, k, j) for j, (g, k) in enumerate(guard_keys.items())}
        self.exit = ExitNode(self, echo=config.exit_echo)
        self.present = set(config.present if config.present is not None else config.topology.clients)
        for c, node in self.clients.items():
            node.present = c in self.present
        active = pick_active(sorted(self.present), config.workload, derive_rng(cfg.seed, "workload"))
        for c in active:
            self.clients[c].active = True
        self.epoch = 0
        self.rounds_completed = 0
        self.transcripts: list[BlameTranscript] = []
        self.setup_durations_ms: list[float] = []
        self.excluded: list[str] = []
        self.stop_reason = ""
        self._setup_pending = False
        self._resetup_needed = False
        self._halted_since: int | None = None
        self._leaving: set[str] = set()
        self._activated = False

    # --- helpers -------------------------------------------------------------
    def fault_for(self, entity: str) -> FaultSpec | None:
        f = self._faults.get(entity)
        # scripted faults belong to the first epoch only
        return f if f is not None and self.epoch <= 1 else None

    def roster_keys(self) -> dict[str, Element]:
        return {**dict(self.roster.clients), **dict(self.roster.guards)}

    def _stop(self, reason: str) -> None:
        if not self.stop_reason:
            self.stop_reason = reason
        self.sim.stop()

    # --- epochs --------------------------------------------------------------
    def start(self) -> None:
        self.begin_setup(halting=True, reason="start")
        for ev in self.config.churn:
            self.sim.at(int(ev.time_ms * US_PER_MS), self.on_churn, ev)
        # idle clients send nothing, so load passes close their slots
        for c in sorted(c for c in self.present if self.clients[c].active):
            self.clients[c].start_workload(self.workload)

    def begin_setup(self, halting: bool, reason: str) -> None:
        if self._setup_pending:
            self._resetup_needed = True
            if halting:
                self._halt()
            return
        if self.config.max_epochs is not None and self.epoch >= self.config.max_epochs:
            self._stop("epoch limit")
            return
        if halting:
            self._halt()
        eligible = {c for c in self.present if c in self.roster.client_ids and c not in self._leaving}
        self.epoch += 1
        epoch = self.epoch
        adapter = SimSetupConnections(self, self.roster, eligible)

        def attempt(n: int) -> SetupResult:
            return relay_setup_orchestrate(self.group, self.roster, adapter, epoch,
                                           derive_rng(self.seed, f"setup/{epoch}/{n}"))

        try:
            result = setup_with_retry(attempt, self.settings.setup_retries, self.settings.setup_timeout_s)
        except TooFewClients as e:
            logger.warning("setup for epoch %d impossible: %s", epoch, e, extra=e.context)
            self.sim.record("setup_failed", epoch=epoch, detail=str(e))
            self._halt()
            return
        except SetupFailed as e:
            logger.error("setup failed: %s", e, extra=e.context)
            self.sim.record("setup_failed", epoch=epoch, detail=str(e))
            self._halt()
            return
        d_us = adapter.elapsed_us
        self.setup_durations_ms.append(d_us / US_PER_MS)
        self.sim.record("setup", epoch=epoch, value=d_us / US_PER_MS, detail=reason,
                        entity=str(len(result.participants)))
        logger.info("epoch %d setup (%s): %d clients, D=%.1f ms", epoch, reason, len(result.participants),
                    d_us / US_PER_MS, extra={"epoch": epoch})
        self._setup_pending = True
        self.sim.at(adapter.finish_us, self._activate, result)

    def _halt(self) -> None:
        if self.relay.active:
            self.relay.halt()
        if self._halted_since is None:
            self._halted_since = self.sim.now

    def _activate(self, result: SetupResult) -> None:
        self._setup_pending = False
        epoch = result.schedule.epoch
        gone = [c for c in result.participants if c not in self.present]
        if gone:
            logger.warning("epoch %d lost %s during setup", epoch, ", ".join(gone), extra={"epoch": epoch})
            self._resetup_needed = False
            self.begin_setup(halting=True, reason="participants left during setup")
            return
        for gid, node in self.guards.items():
            node.activate(epoch)
        for cid, node in self.clients.items():
            node.activate(epoch)
        for cid in sorted(c for c in self._leaving if c not in result.participants):
            self._depart(cid)
        # the first setup is start-up, not an interruption
        detail = "initial" if not self._activated else ""
        self._activated = True
        if self._halted_since is not None:
            down = (self.sim.now - self._halted_since) / US_PER_MS
            self.sim.record("downtime", epoch=epoch, value=down, detail=detail)
            self._halted_since = None
        else:
            self.sim.record("downtime", epoch=epoch, value=0.0, detail=detail)
        self.relay.activate(result, self.roster)
        self.sim.record("epoch_start", epoch=epoch, value=float(len(result.participants)))
        if self._resetup_needed:
            self._resetup_needed = False
            self.begin_setup(halting=False, reason="coalesced churn")

    def _depart(self, cid: str) -> None:
        self._leaving.discard(cid)
        self.present.discard(cid)
        self.clients[cid].depart()

    # --- events from nodes ---------------------------------------------------
    def on_round_done(self, epoch: int, round: int) -> None:
        self.rounds_completed += 1
        if self.rounds_completed >= self.config.rounds:
            self._stop("round budget")

    def on_withheld(self, missing: Sequence[str]) -> None:
        guards = [e for e in missing if e in self.guards]
        if guards and len(guards) >= len(self.roster.guards):
            self._halt()
            self._stop("guard unavailable")
            return
        for e in missing:
            if e in self.clients:
                self._depart(e)
        if guards:
            self.roster = self.roster.without(guards)
            self.excluded.extend(guards)
        self.begin_setup(halting=True, reason="round timeout")

    def on_churn(self, ev: ChurnEvent) -> None:
        kind = "join" if ev.kind == "assoc" else "leave"
        cid = ev.device
        if cid not in self.clients:
            logger.warning("churn event for unknown client %s", cid)
            return
        if kind == "join" and cid in self.present and cid not in self._leaving:
            return
        if kind == "leave" and cid not in self.present:
            return
        plan = churn_handler(kind, self.settings.churn_mode)
        self.sim.record("churn", entity=cid, detail=f"{kind}:{'halt' if plan.halt else 'background'}",
                        epoch=self.epoch)
        if kind == "join":
            self._leaving.discard(cid)
            self.present.add(cid)
            node = self.clients[cid]
            node.present = True
            if node.active:
                node.start_workload(self.workload)
        elif plan.halt:
            self._depart(cid)
        else:
            self._leaving.add(cid)
            self.clients[cid].leaving = True
        self.begin_setup(halting=plan.halt, reason=f"churn {kind}")

    # --- blame ---------------------------------------------------------------
    def run_blame(self, failed: FailedRound, x_true: bytes, owner_key: bytes) -> None:
        ep = self.relay.ep
        parties = SimBlameParties(self)
        guard_bits: dict[str, bytes] = {}
        sigmas: dict[str, int] = {}
        verdict = None
        for gid in ep.guards:
            got = parties.resubmit(gid, failed.round)
            if got is None or guard_digest(*got) != failed.guard_digests.get(gid):
                verdict = Verdict(EXCLUDED, gid, "re-submitted cipher differs from the recorded digest")
                break
            guard_bits[gid], sig = got
            sigmas[gid] = sig or 0
        ctx = BlameContext(self.group, self.relay_keys, self.roster_keys(),
                           list(ep.setup.ephemerals),
                           [(g, dict(self.roster.guards)[g]) for g in ep.guards],
                           failed.client_bits, guard_bits, self.settings.cell_bits)
        if verdict is not None:
            tr = BlameTranscript(failed.round, x_true, failed.y_prime, verdict=verdict)
        else:
            try:
                if x_true != failed.y_prime:
                    tr = run_disruption_blame(ctx, parties, failed.round, x_true, failed.y_prime)
                elif self.settings.equivocation:
                    tr = run_equivocation_blame(ctx, parties, failed.round, x_true, failed.history,
                                                failed.kappas, sigmas, owner_key)
                else:
                    tr = BlameTranscript(failed.round, x_true, failed.y_prime)
            except BlameInconsistent as e:
                logger.error("blame inconsistent: %s", e, extra={"round": failed.round})
                tr = BlameTranscript(failed.round, x_true, failed.y_prime,
                                     verdict=Verdict(UNTRACEABLE, reason=str(e)))
        ep.paused_until = max(ep.paused_until, parties.finish_us)
        ep.state.phase = "Blame"
        self.record_verdict(tr, parties.elapsed_us, ep.epoch)
        self.sim.at(parties.finish_us, self._apply_verdict, ep.epoch, tr.verdict)

    def record_verdict(self, tr: BlameTranscript, duration_us: int, epoch: int | None = None) -> None:
        epoch = self.epoch if epoch is None else epoch
        self.transcripts.append(tr)
        v = tr.verdict
        self.sim.record("blame", epoch=epoch, round=tr.trigger_round, entity=v.entity,
                        detail=v.kind, value=duration_us / US_PER_MS)
        logger.info("blame verdict %s for round %d", v, tr.trigger_round,
                    extra={"epoch": epoch, "round": tr.trigger_round, "verdict": v.kind})

    def _apply_verdict(self, epoch: int, verdict: Verdict) -> None:
        ep = self.relay.ep
        if ep is None or ep.epoch != epoch:
            return
        ep.state.phase = "Anonymize"
        if verdict.kind == EXCLUDED and verdict.entity:
            self.excluded.append(verdict.entity)
            if verdict.entity in self.guards and len(self.roster.guards) <= 1:
                self._halt()
                self._stop("only guard excluded")
                return
            self.roster = self.roster.without([verdict.entity])
            if verdict.entity in self.clients:
                self._depart(verdict.entity)
            self.begin_setup(halting=True, reason=f"excluded {verdict.entity}")
        elif verdict.kind == HISTORY_MISMATCH:
            self.begin_setup(halting=True, reason="history mismatch")

    # --- run -----------------------------------------------------------------
    def run(self) -> SessionResult:
        self.start()
        until = int(self.config.duration_ms * US_PER_MS) if self.config.duration_ms else None
        self.sim.run(until_us=until)
        if not self.stop_reason:
            self.stop_reason = "duration" if until is not None else "idle"
        return SessionResult(self.sim.event_log(), self.transcripts, self.epoch,
                             self.setup_durations_ms, self.rounds_completed, self.excluded,
                             self.stop_reason)


def run_session(config: SessionConfig) -> SessionResult:
    return Session(config).run()


@dataclass
class EpochStats:
    epoch: int
    rounds: int
    round_latency_ms: list[float]
    bytes_up: int
    bytes_down: int
    setup_ms: float
    downtime_ms: float
    downtime_intervals: list[tuple[float, float]]
    stop_reason: str


def downtime_intervals(log: pd.DataFrame) -> list[tuple[float, float]]:
    """(start, end) in ms of every span the relay spent without an epoch."""
    down = log[log["event"] == "downtime"]
    return [((t - v * US_PER_MS) / US_PER_MS, t / US_PER_MS)
            for t, v in zip(down["time_us"].astype(int), down["value"].astype(float))]


def run_epoch(config: SessionConfig) -> EpochStats:
    """One Setup followed by Anonymize rounds until the round budget, the
    duration or the end of the epoch (churn, timeout or exclusion)."""
    res = run_session(replace(config, max_epochs=1))
    log = res.log
    rounds = log[(log["event"] == "round_done") & (log["epoch"] == 1)]
    sends = log[log["event"] == "send"]
    up = sends[sends["dst"] == RELAY]["bytes"].sum()
    down = sends[sends["src"] == RELAY]["bytes"].sum()
    intervals = downtime_intervals(log)
    return EpochStats(1, len(rounds), rounds["value"].astype(float).tolist(), int(up), int(down),
                      res.setup_durations_ms[0] if res.setup_durations_ms else 0.0,
                      sum(end - start for start, end in intervals), intervals, res.stop_reason)
