import pytest

from lldc import crypto
from lldc.crypto import SharedSecret
from lldc.errors import DecryptFailed, DegenerateKey, FrameError, MapRangeError


# RFC 4231 test cases 1-3
@pytest.mark.parametrize("key, data, expected", [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
    (b"\xaa" * 20, b"\xdd" * 50,
     "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
])
def test_hmac_rfc4231(key, data, expected):
    assert crypto.hmac_tag(key, data).hex() == expected


def test_toy_group_has_order_101(toy):
    assert toy.exp(toy.generator, 101) == toy.identity
    assert all(toy.exp(toy.generator, k) != toy.identity for k in range(1, 101))


def test_toy_decode_rejects_non_members(toy):
    assert toy.decode(toy.encode(toy.power(5))) == toy.power(5)
    non_member = next(a for a in range(2, 607) if not toy.is_valid(a))
    with pytest.raises(FrameError):
        toy.decode(non_member.to_bytes(toy.element_bytes, "big"))


def test_toy_f1_maps_every_embeddable_value(toy):
    for v in range(toy.order_q - 1):
        data = v.to_bytes(toy.embed_bytes, "big")
        assert toy.f1_inv(toy.f1_map(data)) == data
    with pytest.raises(MapRangeError):
        toy.f1_map(bytes([toy.order_q - 1]))
    with pytest.raises(MapRangeError):
        toy.f1_inv(toy.identity)


def test_p256_f1_and_encoding(p256, rng):
    data = rng.randbytes(p256.embed_bytes)
    point = p256.f1_map(data)
    assert p256.is_valid(point)
    assert p256.f1_inv(point) == data
    raw = p256.encode(point)
    assert len(raw) == 65
    assert p256.decode(raw) == point
    with pytest.raises(FrameError):
        p256.decode(b"\x04" + bytes(64))


def test_dh_agrees_on_both_groups(toy, p256, rng):
    for group in (toy, p256):
        a, b = crypto.keygen(group, rng), crypto.keygen(group, rng)
        s1 = crypto.dh_derive(group, a.private, b.public)
        s2 = crypto.dh_derive(group, b.private, a.public)
        assert s1.seed == s2.seed
        assert len(s1.seed) == crypto.SECRET_BYTES


def test_dh_rejects_identity(toy, rng):
    a = crypto.keygen(toy, rng)
    with pytest.raises(DegenerateKey):
        crypto.dh_derive(toy, a.private, toy.identity)


def test_pad_bit_matches_full_pad():
    secret = SharedSecret(bytes(range(32)), "client-0", "guard-0")
    pad = crypto.prg_pad(secret, 7, 1024)
    assert len(pad.bits) == 128
    for k in (0, 1, 7, 8, 255, 256, 1023):
        assert crypto.pad_bit(secret, 7, k) == crypto.bit_at(pad.bits, k)
    assert crypto.prg_pad(secret, 8, 1024).bits != pad.bits


def test_bit_order_is_msb_first():
    assert crypto.bit_at(b"\x80\x00", 0) == 1
    assert crypto.bit_at(b"\x80\x00", 7) == 0
    assert crypto.bit_at(b"\x00\x01", 15) == 1


def test_xor_requires_equal_lengths():
    assert crypto.xor_bytes(b"\x0f", b"\xf0", b"\xff") == b"\x00"
    with pytest.raises(FrameError):
        crypto.xor_bytes(b"\x00", b"\x00\x00")


def test_signatures(toy, p256, rng):
    for group in (toy, p256):
        kp = crypto.keygen(group, rng)
        sig = crypto.sign(group, kp.private, b"schedule")
        assert crypto.verify(group, kp.public, b"schedule", sig)
        assert not crypto.verify(group, kp.public, b"schedule!", sig)
        assert not crypto.verify(group, kp.public, b"schedule", bytes(len(sig)))


def test_toy_signature_forgeries_never_verify(toy, rng):
    kp = crypto.keygen(toy, rng)
    other = crypto.keygen(toy, rng)
    sig = crypto.sign(toy, kp.private, b"m")
    assert not crypto.verify(toy, other.public, b"m", sig)
    # every s for the honest challenge except the right one fails
    e = sig[:crypto.HASH_BYTES]
    hits = sum(crypto.verify(toy, kp.public, b"m", e + toy.encode_scalar(s)) for s in range(toy.order_q))
    assert hits == 1


def test_dleq_honest_and_forged(toy, rng):
    x = toy.random_scalar(rng)
    b = toy.power(toy.random_scalar(rng))
    A, E = toy.power(x), toy.exp(b, x)
    proof = crypto.dleq_prove(toy, x, toy.generator, b, rng)
    assert crypto.dleq_verify(toy, toy.generator, A, b, E, proof)
    assert not crypto.dleq_verify(toy, toy.generator, A, b, toy.mul(E, toy.generator), proof)
    y = (x + 1) % toy.order_q or 1
    forged = crypto.dleq_prove(toy, y, toy.generator, b, rng)
    assert not crypto.dleq_verify(toy, toy.generator, A, b, toy.exp(b, y), forged)


def test_pke_round_trip_and_tamper(toy, rng):
    kp = crypto.keygen(toy, rng)
    ct = crypto.pke_encrypt(toy, kp.public, b"slot secret", rng)
    assert crypto.pke_decrypt(toy, kp.private, ct) == b"slot secret"
    bad = ct[:-1] + bytes([ct[-1] ^ 1])
    with pytest.raises(DecryptFailed):
        crypto.pke_decrypt(toy, kp.private, bad)
    with pytest.raises(DecryptFailed):
        crypto.pke_decrypt(toy, kp.private, b"short")


def test_pke_over_a_schedule_base(toy, rng):
    base = toy.power(17)
    x = toy.random_scalar(rng)
    public = toy.exp(base, x)
    ct = crypto.pke_encrypt(toy, public, b"r", rng, base=base)
    assert crypto.pke_decrypt(toy, x, ct) == b"r"


def test_f2_map_takes_top_bits(toy):
    assert crypto.f2_map(toy, b"\xff" * 32) == (1 << toy.f2_bits) - 1
    assert crypto.f2_map(toy, b"\x00" * 32) == 0


def test_get_group_unknown():
    assert crypto.get_group("toy101") is crypto.TOY_GROUP
    with pytest.raises(ValueError):
        crypto.get_group("p384")


def test_keystream_is_deterministic():
    a = crypto.keystream(b"seed", b"label", 3, 100)
    assert a == crypto.keystream(b"seed", b"label", 3, 100)
    assert len(a) == 100
    assert a != crypto.keystream(b"seed", b"label", 4, 100)
