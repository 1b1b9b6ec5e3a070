"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/dcnet.py
VERSION:    3.1 (Cell codec + relay accumulator + downstream chunking)
================================================================================

ABSTRACT:
    The XOR core, independent of transport.

    Upstream cell layout (little-endian):
        [conn_id:4][hmac:32][len:2][payload:len][zero padding up to cell size]
    The all-zero cell means "nothing to send". Data cells keep the last
    RETRANSMIT_RESERVE bytes free so a retransmission record (round, blinding
    key and the original conn_id|len|payload) always fits into one slot.

    Downstream message layout (little-endian):
        [round:8][flags:1][retransmit_round:8 if flagged][owner_slot:4 signed]
        [n_chunks:2] n * ([conn_id:4][len:4][PKE ciphertext])

    Application packets are carried as a byte stream per connection, each
    packet prefixed with its length (4 bytes); `StreamReassembler` cuts the
    stream back into packets on both directions.
================================================================================
"""
from __future__ import annotations

import random
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from lldc import crypto
from lldc.crypto import Element, GroupParams, Pad, SharedSecret
from lldc.errors import CellOverflow, DecryptFailed, FrameError

CELL_HEADER = struct.Struct("<I32sH")
CELL_HEADER_BYTES = CELL_HEADER.size  # 38
RETRANSMIT_RESERVE = 48  # "R" + round(8) + klen(1) + key(<=32) + conn_id(4) + len(2)
CONTROL_CONN = 0xFFFFFFFF
PACKET_PREFIX = struct.Struct("<I")

FLAG_RETRANSMIT = 0x01
FLAG_SETUP = 0x02
FLAG_LOAD = 0x04
DOWN_HEADER = struct.Struct("<QB")
CHUNK_HEADER = struct.Struct("<II")


def data_capacity(cell_bytes: int) -> int:
    return cell_bytes - CELL_HEADER_BYTES - RETRANSMIT_RESERVE


def raw_capacity(cell_bytes: int) -> int:
    return cell_bytes - CELL_HEADER_BYTES


# =============================================================================
# CELLS
# =============================================================================
@dataclass(frozen=True)
class UpstreamCell:
    conn_id: int = 0
    hmac: bytes = bytes(32)
    payload: bytes = b""

    @property
    def is_zero(self) -> bool:
        return self.conn_id == 0 and not self.payload and self.hmac == bytes(32)

    @property
    def is_control(self) -> bool:
        return self.conn_id == CONTROL_CONN

    def mac_input(self) -> bytes:
        return struct.pack("<IH", self.conn_id, len(self.payload)) + self.payload

    def encode(self, cell_bytes: int) -> bytes:
        if self.is_zero:
            return bytes(cell_bytes)
        if len(self.payload) > raw_capacity(cell_bytes):
            raise CellOverflow(f"payload of {len(self.payload)} bytes exceeds cell")
        body = CELL_HEADER.pack(self.conn_id, self.hmac, len(self.payload)) + self.payload
        return body + bytes(cell_bytes - len(body))

    def prefix(self) -> bytes:
        """Encoding without the zero padding."""
        return CELL_HEADER.pack(self.conn_id, self.hmac, len(self.payload)) + self.payload

    @classmethod
    def decode(cls, raw: bytes) -> "UpstreamCell":
        if not any(raw):
            return cls()
        if len(raw) < CELL_HEADER_BYTES:
            raise FrameError("cell shorter than its header")
        conn_id, tag, length = CELL_HEADER.unpack_from(raw)
        end = CELL_HEADER_BYTES + length
        if conn_id == 0:
            raise FrameError("non-zero cell with connection id 0")
        if end > len(raw):
            raise FrameError("cell length field overruns the cell")
        if any(raw[end:]):
            raise FrameError("non-zero cell padding")
        return cls(conn_id, tag, bytes(raw[CELL_HEADER_BYTES:end]))

    @classmethod
    def from_prefix(cls, prefix: bytes) -> "UpstreamCell":
        conn_id, tag, length = CELL_HEADER.unpack_from(prefix)
        if CELL_HEADER_BYTES + length != len(prefix):
            raise FrameError("cell prefix length mismatch")
        return cls(conn_id, tag, bytes(prefix[CELL_HEADER_BYTES:]))


def seal_cell(conn_id: int, payload: bytes, slot_secret: bytes) -> UpstreamCell:
    unsigned = UpstreamCell(conn_id, bytes(32), payload)
    return UpstreamCell(conn_id, crypto.hmac_tag(slot_secret, unsigned.mac_input()), payload)


# =============================================================================
# CIPHERS
# =============================================================================
@dataclass(frozen=True)
class RoundCiphertext:
    round: int
    sender: str
    bits: bytes
    equivocation_tag: object | None = None


def pads_for(secrets: Sequence[SharedSecret], round: int, cell_bits: int) -> list[Pad]:
    return [crypto.prg_pad(s, round, cell_bits) for s in secrets]


def guard_cipher(secrets: Sequence[SharedSecret], round: int, cell_bits: int, sender: str = "",
                 pads: Sequence[Pad] | None = None) -> RoundCiphertext:
    pads = pads if pads is not None else pads_for(secrets, round, cell_bits)
    return RoundCiphertext(round, sender, crypto.xor_bytes(*(p.bits for p in pads)))


def client_cipher(secrets: Sequence[SharedSecret], round: int, is_owner: bool,
                  cell: UpstreamCell | bytes | None, cell_bits: int, sender: str = "",
                  pads: Sequence[Pad] | None = None) -> RoundCiphertext:
    """`cell` may be an UpstreamCell or an already prepared l-bit plaintext
    (masked and/or blinded by the layers above)."""
    pads = pads if pads is not None else pads_for(secrets, round, cell_bits)
    parts = [p.bits for p in pads]
    if is_owner:
        if isinstance(cell, UpstreamCell):
            x = cell.encode(cell_bits // 8)
        elif cell is None:
            x = bytes(cell_bits // 8)
        else:
            x = bytes(cell)
            if len(x) != cell_bits // 8:
                raise CellOverflow(f"plaintext is {len(x)} bytes, cell is {cell_bits // 8}")
        parts.append(x)
    return RoundCiphertext(round, sender, crypto.xor_bytes(*parts))


def relay_combine(guard_ciphers: Iterable[bytes], client_ciphers: Iterable[bytes]) -> bytes:
    parts = [bytes(c) for c in guard_ciphers] + [bytes(c) for c in client_ciphers]
    if not parts:
        raise FrameError("nothing to combine")
    return crypto.xor_bytes(*parts)


class RoundAccumulator:
    """One XOR accumulator per round. Contributions are folded on arrival;
    nothing per contributor is kept."""

    def __init__(self, cell_bytes: int):
        self.cell_bytes = cell_bytes
        self._acc: dict[int, int] = {}
        self._count: dict[int, int] = {}

    def add(self, round: int, bits: bytes) -> int:
        if len(bits) != self.cell_bytes:
            raise FrameError(f"cipher for round {round} has {len(bits)} bytes")
        self._acc[round] = self._acc.get(round, 0) ^ int.from_bytes(bits, "big")
        self._count[round] = self._count.get(round, 0) + 1
        return self._count[round]

    def count(self, round: int) -> int:
        return self._count.get(round, 0)

    def value(self, round: int) -> bytes:
        return self._acc.get(round, 0).to_bytes(self.cell_bytes, "big")

    def pop(self, round: int) -> bytes:
        v = self.value(round)
        self._acc.pop(round, None)
        self._count.pop(round, None)
        return v

    def rounds(self) -> list[int]:
        return sorted(self._acc)

    def __len__(self) -> int:
        return len(self._acc)


# =============================================================================
# STREAMS
# =============================================================================
def frame_packet(packet: bytes) -> bytes:
    return PACKET_PREFIX.pack(len(packet)) + packet


class StreamReassembler:
    def __init__(self, cap: int = 64 * 1024):
        self.cap = cap
        self._buffers: dict[int, bytearray] = {}

    def feed(self, conn_id: int, data: bytes) -> list[bytes]:
        buf = self._buffers.setdefault(conn_id, bytearray())
        buf += data
        if len(buf) > self.cap:
            del self._buffers[conn_id]
            raise FrameError(f"reassembly buffer for {conn_id:#x} over {self.cap} bytes")
        out = []
        while len(buf) >= PACKET_PREFIX.size:
            (n,) = PACKET_PREFIX.unpack_from(buf)
            if n + PACKET_PREFIX.size > self.cap:
                del self._buffers[conn_id]
                raise FrameError(f"packet of {n} bytes exceeds the reassembly cap")
            if len(buf) < PACKET_PREFIX.size + n:
                break
            out.append(bytes(buf[PACKET_PREFIX.size: PACKET_PREFIX.size + n]))
            del buf[: PACKET_PREFIX.size + n]
        if not buf:
            self._buffers.pop(conn_id, None)
        return out

    def pending(self, conn_id: int) -> int:
        return len(self._buffers.get(conn_id, b""))

    def clear(self) -> None:
        self._buffers.clear()


class UpstreamQueue:
    """Client-side multiplexing: round-robin over connections with data."""

    def __init__(self):
        self._streams: "OrderedDict[int, bytearray]" = OrderedDict()

    def push(self, conn_id: int, packet: bytes) -> None:
        self._streams.setdefault(conn_id, bytearray()).extend(frame_packet(packet))

    def has_data(self) -> bool:
        return any(self._streams.values())

    def pending_bytes(self) -> int:
        return sum(len(b) for b in self._streams.values())

    def take(self, capacity: int) -> tuple[int, bytes] | None:
        for conn_id in list(self._streams):
            buf = self._streams[conn_id]
            if not buf:
                continue
            chunk = bytes(buf[:capacity])
            del buf[:capacity]
            self._streams.move_to_end(conn_id)
            return conn_id, chunk
        return None

    def clear(self) -> None:
        self._streams.clear()


# =============================================================================
# DOWNSTREAM
# =============================================================================
@dataclass(frozen=True)
class DownstreamFlags:
    retransmit_required: bool = False
    setup_request: bool = False
    load_request: bool = False

    def to_byte(self) -> int:
        return ((FLAG_RETRANSMIT if self.retransmit_required else 0)
                | (FLAG_SETUP if self.setup_request else 0)
                | (FLAG_LOAD if self.load_request else 0))

    @classmethod
    def from_byte(cls, b: int) -> "DownstreamFlags":
        return cls(bool(b & FLAG_RETRANSMIT), bool(b & FLAG_SETUP), bool(b & FLAG_LOAD))


@dataclass(frozen=True)
class Chunk:
    conn_id: int
    ciphertext: bytes


@dataclass(frozen=True)
class DownstreamMessage:
    round: int
    flags: DownstreamFlags = field(default_factory=DownstreamFlags)
    retransmit_round: int | None = None
    owner_slot: int = -1
    chunks: tuple[Chunk, ...] = ()

    @property
    def body_length(self) -> int:
        return sum(CHUNK_HEADER.size + len(c.ciphertext) for c in self.chunks)

    def encode(self) -> bytes:
        out = [DOWN_HEADER.pack(self.round, self.flags.to_byte())]
        if self.flags.retransmit_required:
            out.append(struct.pack("<Q", self.retransmit_round or 0))
        out.append(struct.pack("<iH", self.owner_slot, len(self.chunks)))
        for c in self.chunks:
            out.append(CHUNK_HEADER.pack(c.conn_id, len(c.ciphertext)) + c.ciphertext)
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes) -> "DownstreamMessage":
        try:
            rnd, fb = DOWN_HEADER.unpack_from(data)
            off = DOWN_HEADER.size
            flags = DownstreamFlags.from_byte(fb)
            rt = None
            if flags.retransmit_required:
                (rt,) = struct.unpack_from("<Q", data, off)
                off += 8
            owner, n = struct.unpack_from("<iH", data, off)
            off += 6
            chunks = []
            for _ in range(n):
                conn_id, ln = CHUNK_HEADER.unpack_from(data, off)
                off += CHUNK_HEADER.size
                if off + ln > len(data):
                    raise FrameError("chunk overruns the message")
                chunks.append(Chunk(conn_id, bytes(data[off: off + ln])))
                off += ln
        except struct.error as e:
            raise FrameError(f"truncated downstream message: {e}") from e
        if off != len(data):
            raise FrameError("trailing bytes in downstream message")
        return cls(rnd, flags, rt, owner, tuple(chunks))


class DownstreamQueues:
    """Relay-side per-connection queues, each bound to the pseudonym key of
    the slot that opened the connection."""

    def __init__(self):
        self._keys: dict[int, Element] = {}
        self._streams: "OrderedDict[int, bytearray]" = OrderedDict()

    def bind(self, conn_id: int, slot_key: Element) -> None:
        self._keys.setdefault(conn_id, slot_key)

    def key_for(self, conn_id: int) -> Element | None:
        return self._keys.get(conn_id)

    def push(self, conn_id: int, packet: bytes) -> None:
        if conn_id not in self._keys:
            raise FrameError(f"no pseudonym key bound to connection {conn_id:#x}")
        self._streams.setdefault(conn_id, bytearray()).extend(frame_packet(packet))

    def has_pending(self) -> bool:
        return any(self._streams.values())

    def pending_bytes(self) -> int:
        return sum(len(b) for b in self._streams.values())

    def items(self):
        return [(c, b) for c, b in self._streams.items() if b]

    def take(self, conn_id: int, n: int) -> bytes:
        buf = self._streams[conn_id]
        out = bytes(buf[:n])
        del buf[:n]
        self._streams.move_to_end(conn_id)
        return out

    def clear(self) -> None:
        self._keys.clear()
        self._streams.clear()


def pke_overhead(group: GroupParams) -> int:
    return group.element_bytes + crypto.NONCE_BYTES + 16


def assemble_downstream(round: int, pending: DownstreamQueues, cap: int, group: GroupParams,
                        base: Element, rng: random.Random,
                        flags: DownstreamFlags | None = None, retransmit_round: int | None = None,
                        owner_slot: int = -1) -> DownstreamMessage:
    """Fills up to `cap` body bytes; remaining bytes wait for later rounds."""
    chunks = []
    used = 0
    overhead = CHUNK_HEADER.size + pke_overhead(group)
    for conn_id, buf in pending.items():
        room = cap - used - overhead
        if room <= 0:
            break
        data = pending.take(conn_id, min(room, len(buf)))
        ct = crypto.pke_encrypt(group, pending.key_for(conn_id), data, rng, base=base)
        chunks.append(Chunk(conn_id, ct))
        used += CHUNK_HEADER.size + len(ct)
    return DownstreamMessage(round, flags or DownstreamFlags(), retransmit_round, owner_slot, tuple(chunks))


def open_chunks(msg: DownstreamMessage, own_conns: Iterable[int], group: GroupParams,
                private: int) -> list[tuple[int, bytes]]:
    mine = set(own_conns)
    out = []
    for c in msg.chunks:
        if c.conn_id not in mine:
            continue
        try:
            out.append((c.conn_id, crypto.pke_decrypt(group, private, c.ciphertext)))
        except DecryptFailed:
            continue
    return out
