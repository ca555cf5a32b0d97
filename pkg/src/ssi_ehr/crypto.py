"""Cryptographic primitives: Ed25519 signatures, SHA-256, ChaCha20-Poly1305,
hybrid (sealed) encryption to an Ed25519 identity, and 2-of-2 XOR key sharing.

Key material is kept as raw bytes so that wallets and whole simulated worlds
can be copied and serialized; library key objects are rebuilt on demand and
memoized.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ssi_ehr.errors import AuthenticationError, EntropyError, LengthMismatch, MalformedKey

SIGNATURE_SCHEME = "ed25519"
HASH_ALG = "sha256"
KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16

# Edwards25519 field prime, for the Ed25519 -> X25519 public key map.
_P = 2**255 - 19


class Entropy:
    """Random byte source.

    With a seed the stream is reproducible (simulation and golden tests);
    without one it reads the OS CSPRNG.
    """

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._rng = random.Random(seed) if seed is not None else None

    def bytes(self, n: int) -> bytes:
        if self._rng is not None:
            return self._rng.randbytes(n)
        try:
            return os.urandom(n)
        except NotImplementedError as exc:  # pragma: no cover
            raise EntropyError("no entropy source available") from exc


_SYSTEM = Entropy()


def _entropy(entropy: Entropy | None) -> Entropy:
    return entropy if entropy is not None else _SYSTEM


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes
    scheme_id: str = SIGNATURE_SCHEME

    def to_dict(self) -> dict:
        from ssi_ehr.encoding import b58

        return {
            "public_key": b58(self.public_key),
            "private_key": b58(self.private_key),
            "scheme_id": self.scheme_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyPair":
        from ssi_ehr.encoding import unb58

        return cls(unb58(d["public_key"]), unb58(d["private_key"]), d["scheme_id"])

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()[:16]}..., scheme_id={self.scheme_id!r})"


@dataclass(frozen=True)
class Digest:
    bytes: bytes
    alg_id: str = HASH_ALG

    def hex(self) -> str:
        return self.bytes.hex()


@dataclass(frozen=True)
class AeadCiphertext:
    nonce: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + self.body + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "AeadCiphertext":
        if len(data) < NONCE_LEN + TAG_LEN:
            raise AuthenticationError("ciphertext too short")
        return cls(data[:NONCE_LEN], data[NONCE_LEN:-TAG_LEN], data[-TAG_LEN:])


@dataclass(frozen=True)
class KeyShares:
    share_msp: bytes
    share_contacts: bytes


@lru_cache(maxsize=8192)
def _signing_key(private_key: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(private_key)


@lru_cache(maxsize=8192)
def _verify_key(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


def generate_keypair(entropy: Entropy | None = None) -> KeyPair:
    seed = _entropy(entropy).bytes(KEY_LEN)
    public = _signing_key(seed).public_key().public_bytes_raw()
    return KeyPair(public_key=public, private_key=seed)


def keypair_from_private(private_key: bytes) -> KeyPair:
    if len(private_key) != KEY_LEN:
        raise MalformedKey("Ed25519 private key must be 32 bytes")
    return KeyPair(_signing_key(private_key).public_key().public_bytes_raw(), private_key)


def sign(private_key: bytes, message: bytes) -> bytes:
    """Deterministic Ed25519 signature (64 bytes)."""
    if not isinstance(private_key, bytes) or len(private_key) != KEY_LEN:
        raise MalformedKey("Ed25519 private key must be 32 bytes")
    return _signing_key(private_key).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    if len(public_key) != KEY_LEN or len(signature) != 64:
        return False
    try:
        _verify_key(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def hash_data(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def aead_encrypt(
    key: bytes, plaintext: bytes, aad: bytes = b"", entropy: Entropy | None = None
) -> AeadCiphertext:
    if len(key) != KEY_LEN:
        raise MalformedKey("AEAD key must be 32 bytes")
    nonce = _entropy(entropy).bytes(NONCE_LEN)
    sealed = ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)
    return AeadCiphertext(nonce=nonce, body=sealed[:-TAG_LEN], tag=sealed[-TAG_LEN:])


def aead_decrypt(key: bytes, ct: AeadCiphertext, aad: bytes = b"") -> bytes:
    if len(key) != KEY_LEN:
        raise MalformedKey("AEAD key must be 32 bytes")
    if len(ct.nonce) != NONCE_LEN or len(ct.tag) != TAG_LEN:
        raise AuthenticationError("malformed nonce or tag")
    try:
        return ChaCha20Poly1305(key).decrypt(ct.nonce, ct.body + ct.tag, aad)
    except InvalidTag as exc:
        raise AuthenticationError("AEAD authentication failed") from exc


def _xor(a: bytes, b: bytes) -> bytes:
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(len(a), "big")


def split_key(secret: bytes, entropy: Entropy | None = None) -> KeyShares:
    """2-of-2 sharing: a uniform mask for the MSP, secret XOR mask for contacts."""
    if len(secret) != KEY_LEN:
        raise LengthMismatch("secret must be 32 bytes")
    mask = _entropy(entropy).bytes(len(secret))
    return KeyShares(share_msp=mask, share_contacts=_xor(secret, mask))


def combine_key(shares: KeyShares) -> bytes:
    if len(shares.share_msp) != len(shares.share_contacts):
        raise LengthMismatch("key shares differ in length")
    return _xor(shares.share_msp, shares.share_contacts)


# -- key agreement -----------------------------------------------------------


def ed25519_public_to_x25519(public_key: bytes) -> bytes:
    """Birational map from an Edwards point to its Montgomery u-coordinate."""
    if len(public_key) != KEY_LEN:
        raise MalformedKey("Ed25519 public key must be 32 bytes")
    y = int.from_bytes(public_key, "little") & ((1 << 255) - 1)
    if y >= _P or y == 1:
        raise MalformedKey("public key is not a usable curve point")
    u = (1 + y) * pow(1 - y, _P - 2, _P) % _P
    return u.to_bytes(KEY_LEN, "little")


def ed25519_private_to_x25519(private_key: bytes) -> bytes:
    # X25519 clamps internally, so the unclamped half of the expanded seed is fine.
    return hashlib.sha512(private_key).digest()[:KEY_LEN]


def _hkdf(secret: bytes, salt: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=salt, info=info).derive(secret)


def agree_key(my_keypair: KeyPair, their_public_key: bytes, context: bytes) -> bytes:
    """Static-static X25519 over two Ed25519 identities, expanded with HKDF.

    Symmetric: both sides derive the same key for the same ``context``.
    """
    mine = X25519PrivateKey.from_private_bytes(ed25519_private_to_x25519(my_keypair.private_key))
    theirs = X25519PublicKey.from_public_bytes(ed25519_public_to_x25519(their_public_key))
    shared = mine.exchange(theirs)
    salt = b"".join(sorted([my_keypair.public_key, their_public_key]))
    return _hkdf(shared, salt, b"ssi-ehr/agree/" + context)


@dataclass(frozen=True)
class SealedBox:
    """Payload encrypted under a fresh content key wrapped to a recipient."""

    ephemeral_public: bytes
    wrapped_key: AeadCiphertext
    payload: AeadCiphertext

    def to_bytes(self) -> bytes:
        return self.ephemeral_public + self.wrapped_key.to_bytes() + self.payload.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBox":
        wrapped_len = NONCE_LEN + KEY_LEN + TAG_LEN
        if len(data) < KEY_LEN + wrapped_len + NONCE_LEN + TAG_LEN:
            raise AuthenticationError("sealed box too short")
        eph = data[:KEY_LEN]
        wrapped = AeadCiphertext.from_bytes(data[KEY_LEN : KEY_LEN + wrapped_len])
        payload = AeadCiphertext.from_bytes(data[KEY_LEN + wrapped_len :])
        return cls(eph, wrapped, payload)


def seal(
    recipient_public_key: bytes,
    plaintext: bytes,
    aad: bytes = b"",
    entropy: Entropy | None = None,
) -> SealedBox:
    ent = _entropy(entropy)
    eph = X25519PrivateKey.from_private_bytes(ent.bytes(KEY_LEN))
    eph_public = eph.public_key().public_bytes_raw()
    recipient_x = ed25519_public_to_x25519(recipient_public_key)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_x))
    wrap_key = _hkdf(shared, eph_public + recipient_x, b"ssi-ehr/seal")
    content_key = ent.bytes(KEY_LEN)
    return SealedBox(
        ephemeral_public=eph_public,
        wrapped_key=aead_encrypt(wrap_key, content_key, eph_public, ent),
        payload=aead_encrypt(content_key, plaintext, aad, ent),
    )


def open_sealed(recipient: KeyPair, box: SealedBox, aad: bytes = b"") -> bytes:
    mine = X25519PrivateKey.from_private_bytes(ed25519_private_to_x25519(recipient.private_key))
    try:
        shared = mine.exchange(X25519PublicKey.from_public_bytes(box.ephemeral_public))
    except ValueError as exc:
        raise AuthenticationError("bad ephemeral key") from exc
    recipient_x = ed25519_public_to_x25519(recipient.public_key)
    wrap_key = _hkdf(shared, box.ephemeral_public + recipient_x, b"ssi-ehr/seal")
    content_key = aead_decrypt(wrap_key, box.wrapped_key, box.ephemeral_public)
    return aead_decrypt(content_key, box.payload, aad)


def derive_store_key(passphrase: str, salt: bytes, work_factor: int = 2**14) -> bytes:
    """Passphrase -> 32-byte wallet store key (scrypt)."""
    return hashlib.scrypt(
        passphrase.encode("utf-8"), salt=salt, n=work_factor, r=8, p=1, dklen=KEY_LEN
    )
