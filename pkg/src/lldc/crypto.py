"""
================================================================================
PROJECT:    lldc - LAN low-latency DC-net anonymizer
MODULE:     src/lldc/crypto.py
VERSION:    2.3 (P-256 + order-101 test group behind one interface)
================================================================================

ABSTRACT:
    Primitive layer. Two prime-order groups share one interface:

    - `p256`:   NIST P-256 (cofactor 1), pure-Python Jacobian arithmetic,
                SEC1 decoding validated through `cryptography`.
    - `toy101`: the order-101 subgroup of Z_607^*, generated by 64. Small
                enough that every discrete log is found by enumeration, which
                the test suite uses as an oracle.

    Key Features:
    - Hash-counter PRG, seekable per bit (blame needs single pad bits).
    - HKDF / HMAC / AES-GCM from `cryptography`.
    - Schnorr signatures and Chaum-Pedersen DLEQ proofs with full-width
      Fiat-Shamir challenges (no 1/q false accepts in the test group).
    - F1 (bytes <-> element) and F2 (bytes -> scalar) maps.

    All randomness comes from a caller-supplied `random.Random`-like source.

DEPENDENCIES:
    cryptography, hashlib
================================================================================
"""
from __future__ import annotations

import hashlib
import random
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives import hmac as _hmac
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from lldc.errors import DecryptFailed, DegenerateKey, FrameError, MapRangeError

Element = Any
SECRET_BYTES = 32  # lambda / 8
HASH_BYTES = 32
NONCE_BYTES = 12


def H(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


# =============================================================================
# GROUPS
# =============================================================================
class GroupParams(ABC):
    """Prime-order group. Elements are opaque; use the methods."""

    group_id: str
    order_q: int
    generator: Element
    identity: Element
    embed_bytes: int
    element_bytes: int

    @property
    def scalar_bytes(self) -> int:
        return (self.order_q.bit_length() + 7) // 8

    @property
    def f2_bits(self) -> int:
        return self.order_q.bit_length() - 1

    @abstractmethod
    def mul(self, a: Element, b: Element) -> Element: ...

    @abstractmethod
    def exp(self, a: Element, k: int) -> Element: ...

    @abstractmethod
    def inverse(self, a: Element) -> Element: ...

    @abstractmethod
    def is_valid(self, a: Element) -> bool: ...

    @abstractmethod
    def encode(self, a: Element) -> bytes: ...

    @abstractmethod
    def decode(self, data: bytes) -> Element: ...

    @abstractmethod
    def f1_map(self, data: bytes) -> Element: ...

    @abstractmethod
    def f1_inv(self, a: Element) -> bytes: ...

    @abstractmethod
    def embed_digest(self, data: bytes) -> bytes:
        """Reduces arbitrary bytes into the F1 domain."""

    @abstractmethod
    def random_embeddable(self, rng: random.Random) -> bytes: ...

    def power(self, k: int) -> Element:
        return self.exp(self.generator, k)

    def is_identity(self, a: Element) -> bool:
        return a == self.identity

    def random_scalar(self, rng: random.Random) -> int:
        x = rng.randrange(self.order_q)
        while x == 0:
            x = rng.randrange(self.order_q)
        return x

    def encode_scalar(self, k: int) -> bytes:
        return (k % self.order_q).to_bytes(self.scalar_bytes, "big")

    def decode_scalar(self, data: bytes) -> int:
        if len(data) != self.scalar_bytes:
            raise FrameError(f"scalar must be {self.scalar_bytes} bytes")
        k = int.from_bytes(data, "big")
        if k >= self.order_q:
            raise FrameError("scalar out of range")
        return k

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.group_id}>"


class ModPGroup(GroupParams):
    """Order-q subgroup of Z_p^*. F1 inverts by table lookup, so q stays tiny."""

    MAX_TABLE_ORDER = 1 << 16

    def __init__(self, group_id: str, p: int, q: int, g: int):
        if (p - 1) % q or q >= self.MAX_TABLE_ORDER:
            raise ValueError("q must divide p-1 and be small")
        self.group_id = group_id
        self.p = p
        self.order_q = q
        self.generator = g
        self.identity = 1
        self.element_bytes = (p.bit_length() + 7) // 8
        self.embed_bytes = 1 if q - 1 <= 256 else 2
        self._dlog = {}
        acc = 1
        for i in range(q):
            self._dlog[acc] = i
            acc = acc * g % p

    def dlog(self, a: int) -> int:
        return self._dlog[a]

    def mul(self, a, b):
        return a * b % self.p

    def exp(self, a, k):
        return pow(a, k % self.order_q, self.p)

    def inverse(self, a):
        return pow(a, -1, self.p)

    def is_valid(self, a) -> bool:
        return isinstance(a, int) and a in self._dlog

    def encode(self, a) -> bytes:
        return a.to_bytes(self.element_bytes, "big")

    def decode(self, data: bytes):
        if len(data) != self.element_bytes:
            raise FrameError("bad element length")
        a = int.from_bytes(data, "big")
        if not self.is_valid(a):
            raise FrameError("not a subgroup element")
        return a

    # F1: v in [0, q-1) <-> g^(v+1); the identity has no preimage
    def f1_map(self, data: bytes):
        v = int.from_bytes(data, "big")
        if len(data) != self.embed_bytes or v >= self.order_q - 1:
            raise MapRangeError(f"value {v} outside embeddable range")
        return pow(self.generator, v + 1, self.p)

    def f1_inv(self, a) -> bytes:
        i = self._dlog.get(a)
        if not i:
            raise MapRangeError("element has no F1 preimage")
        return (i - 1).to_bytes(self.embed_bytes, "big")

    def embed_digest(self, data: bytes) -> bytes:
        return (int.from_bytes(data, "big") % (self.order_q - 1)).to_bytes(self.embed_bytes, "big")

    def random_embeddable(self, rng) -> bytes:
        return rng.randrange(self.order_q - 1).to_bytes(self.embed_bytes, "big")


class P256Group(GroupParams):
    P = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
    A = P - 3
    B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
    N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
    GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
    GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5

    def __init__(self):
        self.group_id = "p256"
        self.order_q = self.N
        self.generator = (self.GX, self.GY)
        self.identity = None
        self.element_bytes = 65
        # x = data || counter byte, data < 2^240 keeps x < p
        self.embed_bytes = 30

    # --- Jacobian core ---
    def _jdouble(self, P1):
        if P1 is None:
            return None
        X, Y, Z = P1
        p = self.P
        if Y == 0:
            return None
        delta = Z * Z % p
        gamma = Y * Y % p
        beta = X * gamma % p
        alpha = 3 * (X - delta) * (X + delta) % p
        X3 = (alpha * alpha - 8 * beta) % p
        Z3 = ((Y + Z) * (Y + Z) - gamma - delta) % p
        Y3 = (alpha * (4 * beta - X3) - 8 * gamma * gamma) % p
        return (X3, Y3, Z3)

    def _jadd(self, P1, P2):
        if P1 is None:
            return P2
        if P2 is None:
            return P1
        p = self.P
        X1, Y1, Z1 = P1
        X2, Y2, Z2 = P2
        Z1Z1 = Z1 * Z1 % p
        Z2Z2 = Z2 * Z2 % p
        U1 = X1 * Z2Z2 % p
        U2 = X2 * Z1Z1 % p
        S1 = Y1 * Z2 * Z2Z2 % p
        S2 = Y2 * Z1 * Z1Z1 % p
        if U1 == U2:
            return self._jdouble(P1) if S1 == S2 else None
        Hh = (U2 - U1) % p
        I = (2 * Hh) * (2 * Hh) % p
        J = Hh * I % p
        r = 2 * (S2 - S1) % p
        V = U1 * I % p
        X3 = (r * r - J - 2 * V) % p
        Y3 = (r * (V - X3) - 2 * S1 * J) % p
        Z3 = ((Z1 + Z2) * (Z1 + Z2) - Z1Z1 - Z2Z2) * Hh % p
        return (X3, Y3, Z3)

    def _to_affine(self, J):
        if J is None:
            return None
        X, Y, Z = J
        if Z == 0:
            return None
        zi = pow(Z, -1, self.P)
        zi2 = zi * zi % self.P
        return (X * zi2 % self.P, Y * zi2 * zi % self.P)

    def mul(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        return self._to_affine(self._jadd((a[0], a[1], 1), (b[0], b[1], 1)))

    def exp(self, a, k):
        k %= self.N
        if a is None or k == 0:
            return None
        base = (a[0], a[1], 1)
        acc = None
        for bit in bin(k)[2:]:
            acc = self._jdouble(acc)
            if bit == "1":
                acc = self._jadd(acc, base)
        return self._to_affine(acc)

    def inverse(self, a):
        return None if a is None else (a[0], (-a[1]) % self.P)

    def _rhs(self, x: int) -> int:
        return (pow(x, 3, self.P) + self.A * x + self.B) % self.P

    def is_valid(self, a) -> bool:
        if a is None:
            return True
        x, y = a
        return 0 <= x < self.P and 0 <= y < self.P and (y * y - self._rhs(x)) % self.P == 0

    def encode(self, a) -> bytes:
        if a is None:
            return b"\x00"
        return b"\x04" + a[0].to_bytes(32, "big") + a[1].to_bytes(32, "big")

    def decode(self, data: bytes):
        if data == b"\x00":
            return None
        try:
            pub = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), bytes(data))
        except ValueError as e:
            raise FrameError(f"invalid P-256 point: {e}") from e
        nums = pub.public_numbers()
        return (nums.x, nums.y)

    # F1: try-and-increment with an 8-bit counter, canonical even y
    def f1_map(self, data: bytes):
        if len(data) != self.embed_bytes:
            raise MapRangeError(f"F1 input must be {self.embed_bytes} bytes")
        base = int.from_bytes(data, "big") << 8
        for ctr in range(256):
            x = base | ctr
            rhs = self._rhs(x)
            if rhs == 0 or pow(rhs, (self.P - 1) // 2, self.P) != 1:
                continue
            y = pow(rhs, (self.P + 1) // 4, self.P)
            if y & 1:
                y = self.P - y
            return (x, y)
        raise MapRangeError("no embedding counter found")

    def f1_inv(self, a) -> bytes:
        if a is None:
            raise MapRangeError("identity has no F1 preimage")
        x, y = a
        if y & 1:
            raise MapRangeError("non-canonical y")
        data = x >> 8
        if data >= 1 << (8 * self.embed_bytes):
            raise MapRangeError("x outside embeddable width")
        raw = data.to_bytes(self.embed_bytes, "big")
        if self.f1_map(raw) != a:
            raise MapRangeError("element is not the canonical embedding")
        return raw

    def embed_digest(self, data: bytes) -> bytes:
        return H(b"lldc/embed", data)[: self.embed_bytes]

    def random_embeddable(self, rng) -> bytes:
        return rng.randbytes(self.embed_bytes)


TOY_GROUP = ModPGroup("toy101", p=607, q=101, g=64)
P256_GROUP = P256Group()
GROUPS: dict[str, GroupParams] = {"toy101": TOY_GROUP, "p256": P256_GROUP}


def get_group(group_id: str) -> GroupParams:
    try:
        return GROUPS[group_id]
    except KeyError:
        raise ValueError(f"unknown group {group_id!r}") from None


# =============================================================================
# KEYS / DH
# =============================================================================
@dataclass(frozen=True)
class KeyPair:
    private: int
    public: Element


@dataclass(frozen=True)
class SharedSecret:
    seed: bytes
    client_id: str = ""
    guard_id: str = ""


def keygen(group: GroupParams, rng: random.Random) -> KeyPair:
    x = group.random_scalar(rng)
    return KeyPair(x, group.power(x))


def kdf(material: bytes, info: bytes = b"lldc/dh", length: int = SECRET_BYTES) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(material)


def dh_element(group: GroupParams, own_private: int, peer_public: Element) -> Element:
    if peer_public is None or group.is_identity(peer_public) or not group.is_valid(peer_public):
        raise DegenerateKey("peer public key is the identity or invalid")
    return group.exp(peer_public, own_private)


def secret_from_element(group: GroupParams, element: Element, client_id: str = "",
                        guard_id: str = "") -> SharedSecret:
    return SharedSecret(kdf(group.encode(element)), client_id, guard_id)


def dh_derive(group: GroupParams, own_private: int, peer_public: Element,
              client_id: str = "", guard_id: str = "") -> SharedSecret:
    return secret_from_element(group, dh_element(group, own_private, peer_public), client_id, guard_id)


# =============================================================================
# PRG
# =============================================================================
@dataclass(frozen=True)
class Pad:
    bits: bytes
    round: int
    pair: tuple[str, str]


def _block(seed: bytes, label: bytes, round: int, index: int) -> bytes:
    return H(label, seed, round.to_bytes(8, "little"), index.to_bytes(4, "little"))


def keystream(seed: bytes, label: bytes, round: int, nbytes: int) -> bytes:
    nblocks = -(-nbytes // HASH_BYTES)
    return b"".join(_block(seed, label, round, b) for b in range(nblocks))[:nbytes]


def prg_pad(secret: SharedSecret, round: int, length_bits: int) -> Pad:
    if length_bits % 8:
        raise ValueError("pad length must be a multiple of 8")
    bits = keystream(secret.seed, b"lldc/pad", round, length_bits // 8)
    return Pad(bits, round, (secret.client_id, secret.guard_id))


def bit_at(data: bytes, k: int) -> int:
    """Bit k, most significant bit of byte 0 first."""
    return (data[k >> 3] >> (7 - (k & 7))) & 1


def pad_bit(secret: SharedSecret, round: int, k: int) -> int:
    byte_index = k >> 3
    block = _block(secret.seed, b"lldc/pad", round, byte_index // HASH_BYTES)
    return (block[byte_index % HASH_BYTES] >> (7 - (k & 7))) & 1


def xor_bytes(*parts: bytes) -> bytes:
    if not parts:
        return b""
    n = len(parts[0])
    acc = 0
    for p in parts:
        if len(p) != n:
            raise FrameError("length mismatch in XOR")
        acc ^= int.from_bytes(p, "big")
    return acc.to_bytes(n, "big")


# =============================================================================
# MAPS
# =============================================================================
def f2_map(group: GroupParams, data: bytes) -> int:
    """Top f2_bits bits of the input, zero-extended when shorter."""
    w = group.f2_bits
    v = int.from_bytes(data, "big")
    nbits = 8 * len(data)
    return v >> (nbits - w) if nbits >= w else v << (w - nbits)


# =============================================================================
# MAC / SIGNATURES / PROOFS
# =============================================================================
def hmac_tag(key: bytes, message: bytes) -> bytes:
    h = _hmac.HMAC(key, hashes.SHA256())
    h.update(message)
    return h.finalize()


def _challenge(*parts: bytes) -> int:
    return int.from_bytes(H(*parts), "big")


def sign(group: GroupParams, private: int, message: bytes) -> bytes:
    public = group.power(private)
    k = _challenge(b"lldc/nonce", group.encode_scalar(private), message) % group.order_q or 1
    R = group.power(k)
    e = _challenge(b"lldc/sig", group.encode(R), group.encode(public), message)
    s = (k + e * private) % group.order_q
    return e.to_bytes(HASH_BYTES, "big") + group.encode_scalar(s)


def verify(group: GroupParams, public: Element, message: bytes, signature: bytes) -> bool:
    try:
        if len(signature) != HASH_BYTES + group.scalar_bytes:
            return False
        if public is None or group.is_identity(public) or not group.is_valid(public):
            return False
        e = int.from_bytes(signature[:HASH_BYTES], "big")
        s = group.decode_scalar(signature[HASH_BYTES:])
        R = group.mul(group.power(s), group.exp(public, -e))
        return _challenge(b"lldc/sig", group.encode(R), group.encode(public), message) == e
    except (FrameError, ValueError, TypeError):
        return False


def dleq_prove(group: GroupParams, x: int, base_a: Element, base_b: Element,
               rng: random.Random) -> bytes:
    """Proves log_{base_a}(A) = log_{base_b}(E) for A = base_a^x, E = base_b^x."""
    A, E = group.exp(base_a, x), group.exp(base_b, x)
    w = group.random_scalar(rng)
    t1, t2 = group.exp(base_a, w), group.exp(base_b, w)
    c = _challenge(b"lldc/dleq", *(group.encode(v) for v in (base_a, A, base_b, E, t1, t2)))
    s = (w - c * x) % group.order_q
    return c.to_bytes(HASH_BYTES, "big") + group.encode_scalar(s)


def dleq_verify(group: GroupParams, base_a: Element, A: Element, base_b: Element,
                E: Element, proof: bytes) -> bool:
    try:
        if len(proof) != HASH_BYTES + group.scalar_bytes:
            return False
        c = int.from_bytes(proof[:HASH_BYTES], "big")
        s = group.decode_scalar(proof[HASH_BYTES:])
        t1 = group.mul(group.exp(base_a, s), group.exp(A, c))
        t2 = group.mul(group.exp(base_b, s), group.exp(E, c))
        return _challenge(b"lldc/dleq", *(group.encode(v) for v in (base_a, A, base_b, E, t1, t2))) == c
    except (FrameError, ValueError, TypeError):
        return False


# =============================================================================
# PKE (hashed ElGamal + AES-GCM)
# =============================================================================
def pke_encrypt(group: GroupParams, public: Element, plaintext: bytes, rng: random.Random,
                base: Element | None = None) -> bytes:
    """`base` is the generator the recipient's key was formed over (the
    schedule base for pseudonym keys)."""
    base = group.generator if base is None else base
    y = group.random_scalar(rng)
    Y = group.exp(base, y)
    shared = group.exp(public, y)
    key = kdf(group.encode(shared) + group.encode(Y), info=b"lldc/pke")
    nonce = rng.randbytes(NONCE_BYTES)
    return group.encode(Y) + nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def pke_decrypt(group: GroupParams, private: int, ciphertext: bytes) -> bytes:
    eb = group.element_bytes
    if len(ciphertext) < eb + NONCE_BYTES + 16:
        raise DecryptFailed("ciphertext too short")
    try:
        Y = group.decode(ciphertext[:eb])
    except FrameError as e:
        raise DecryptFailed(str(e)) from e
    shared = group.exp(Y, private)
    key = kdf(group.encode(shared) + group.encode(Y), info=b"lldc/pke")
    nonce = ciphertext[eb: eb + NONCE_BYTES]
    try:
        return AESGCM(key).decrypt(nonce, ciphertext[eb + NONCE_BYTES:], None)
    except InvalidTag as e:
        raise DecryptFailed("authentication failed") from e


def system_rng() -> random.Random:
    return random.SystemRandom()
