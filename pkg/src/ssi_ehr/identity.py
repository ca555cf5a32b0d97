"""Peer-style DIDs, their documents, and out-of-band (QR) invitations.

A DID's identifier is the base58 SHA-256 of its canonical genesis document,
so any party holding the document can check the binding without a registry.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from ssi_ehr.crypto import Entropy, KeyPair, generate_keypair, hash_data
from ssi_ehr.encoding import b58, canonical_json, load_json, unb58
from ssi_ehr.errors import (
    DuplicateAlias,
    IntegrityMismatch,
    MalformedPayload,
    MissingEndpoint,
    NoGrant,
    NotFound,
)

DID_METHOD = "peer"
INVITATION_VERSION = 1


class DidKind(str, Enum):
    ANYWISE = "anywise"
    PAIRWISE = "pairwise"


class ResolveSource(str, Enum):
    WALLET_LOCAL = "wallet"
    LEDGER = "ledger"


@dataclass(frozen=True)
class Did:
    id_string: str
    kind: DidKind
    method: str = DID_METHOD

    def __str__(self) -> str:
        return f"did:{self.method}:{self.id_string}"


@dataclass(frozen=True)
class DidDocument:
    did: Did
    verification_key: bytes
    mediator_endpoint: str
    created_at: int

    def genesis(self) -> dict:
        return {
            "kind": self.did.kind.value,
            "verification_key": b58(self.verification_key),
            "mediator_endpoint": self.mediator_endpoint,
            "created_at": self.created_at,
        }

    def to_dict(self) -> dict:
        return {"did": str(self.did), **self.genesis()}

    def is_bound(self) -> bool:
        """True when the identifier recomputes from the document contents."""
        return _derive_id(self.genesis()) == self.did.id_string

    @classmethod
    def from_dict(cls, d: dict) -> "DidDocument":
        """Parse and check the identifier binding; raises IntegrityMismatch."""
        try:
            method, id_string = _split_did(d["did"])
            doc = cls(
                did=Did(id_string, DidKind(d["kind"]), method),
                verification_key=unb58(d["verification_key"]),
                mediator_endpoint=d["mediator_endpoint"],
                created_at=int(d["created_at"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedPayload(f"bad DID document: {exc}") from exc
        if not doc.is_bound():
            raise IntegrityMismatch(f"document does not hash to {d['did']}")
        return doc


def _derive_id(genesis: dict) -> str:
    return b58(hash_data(canonical_json(genesis)).bytes)


def _split_did(text: str) -> tuple[str, str]:
    parts = text.split(":")
    if len(parts) != 3 or parts[0] != "did" or not parts[2]:
        raise MalformedPayload(f"not a DID: {text!r}")
    return parts[1], parts[2]


def create_did(
    kind: DidKind, keypair: KeyPair, mediator_endpoint: str, now: int = 0
) -> tuple[Did, DidDocument]:
    if not mediator_endpoint:
        raise MissingEndpoint("a DID document needs its controller's mediator endpoint")
    genesis = {
        "kind": DidKind(kind).value,
        "verification_key": b58(keypair.public_key),
        "mediator_endpoint": mediator_endpoint,
        "created_at": int(now),
    }
    did = Did(_derive_id(genesis), DidKind(kind))
    return did, DidDocument(did, keypair.public_key, mediator_endpoint, int(now))


def resolve_did(did, source: ResolveSource, *, wallet=None, ledger=None) -> DidDocument:
    """Look a DID up in a wallet (own DIDs and connection peers) or on the ledger."""
    did = str(did)
    if ResolveSource(source) is ResolveSource.LEDGER:
        if ledger is None:
            raise NotFound("no ledger to resolve against")
        return ledger.get_did(did)
    if wallet is None:
        raise NotFound("no wallet to resolve against")
    doc = wallet.lookup_doc(did)
    if doc is None:
        raise NotFound(f"{did} unknown to wallet {wallet.label!r}")
    if str(doc.did) != did or not doc.is_bound():
        raise IntegrityMismatch(f"stored document for {did} fails rehash")
    return doc


@dataclass(frozen=True)
class OobInvitation:
    inviter_did: str
    inviter_doc: DidDocument
    alias: str
    nonce: bytes

    def to_bytes(self) -> bytes:
        return canonical_json(
            {
                "v": INVITATION_VERSION,
                "did": self.inviter_did,
                "doc": self.inviter_doc.to_dict(),
                "alias": self.alias,
                "nonce_b58": b58(self.nonce),
            }
        )


def parse_invitation(data: bytes) -> OobInvitation:
    obj = load_json(data)
    if not isinstance(obj, dict) or obj.get("v") != INVITATION_VERSION:
        raise MalformedPayload("unsupported invitation version")
    try:
        doc = DidDocument.from_dict(obj["doc"])
        inv = OobInvitation(
            inviter_did=obj["did"],
            inviter_doc=doc,
            alias=str(obj["alias"]),
            nonce=unb58(obj["nonce_b58"]),
        )
    except KeyError as exc:
        raise MalformedPayload(f"invitation missing {exc}") from exc
    if inv.inviter_did != str(doc.did) or doc.did.kind is not DidKind.PAIRWISE:
        raise MalformedPayload("invitation DID does not match its document")
    if len(inv.nonce) != 16:
        raise MalformedPayload("invitation nonce must be 16 bytes")
    return inv


def make_invitation(
    wallet, alias: str, mediator, *, entropy: Entropy | None = None, now: int = 0
) -> OobInvitation:
    """Mint a fresh pairwise DID, get it mediated, and wrap it as a QR payload."""
    if not mediator.is_registered(wallet.label):
        raise NoGrant(f"{wallet.label!r} has no account at {mediator.endpoint}")
    if wallet.alias_in_use(alias):
        raise DuplicateAlias(f"alias {alias!r} already used in wallet {wallet.label!r}")
    keypair = generate_keypair(entropy)
    did, doc = create_did(DidKind.PAIRWISE, keypair, mediator.endpoint, now)
    mediator.request_mediation(str(did), agent=wallet.label, now=now)
    wallet.add_did(alias, keypair, doc)
    wallet.pending_invitations[str(did)] = alias
    nonce = (entropy.bytes(16) if entropy is not None else Entropy().bytes(16))
    return OobInvitation(str(did), doc, alias, nonce)
