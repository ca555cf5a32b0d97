"""Edge-agent wallets and the shared cloud agent (mediator).

The wallet holds keys, DIDs, connections and credentials, and serializes to
a single AEAD blob under a passphrase-derived key. Agents talk through
``Envelope`` objects: encrypted under a static X25519 agreement between the
two pairwise DID keys, signed by the sender, and sequence-numbered so that
re-delivery is rejected. The mediator only stores and forwards envelopes,
hosts presentations behind time-limited grants, and keeps encrypted backups.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Any

from ssi_ehr.credentials import VerifiableCredential, VerifiablePresentation
from ssi_ehr.crypto import (
    AeadCiphertext,
    Digest,
    Entropy,
    KeyPair,
    SealedBox,
    aead_decrypt,
    aead_encrypt,
    agree_key,
    derive_store_key,
    hash_data,
    open_sealed,
    seal,
    sign,
    verify,
)
from ssi_ehr.encoding import b58, canonical_json, load_json, unb58
from ssi_ehr.errors import (
    AccessDenied,
    AccessExpired,
    AccessRevoked,
    AuthenticationError,
    DigestMismatch,
    DuplicateGrant,
    MalformedPayload,
    NoGrant,
    NotFound,
    NotOwner,
    NotRegistered,
    ReplayError,
    UnknownConnection,
)
from ssi_ehr.identity import DidDocument
from ssi_ehr.ledger import Certificate, LedgerIdentity, Role
from ssi_ehr.revocation import RevocationRegistry

WALLET_MAGIC = b"SSIW1"
SALT_LEN = 16
ANYWISE_ALIAS = "@anywise"


class _DidIndex(dict):
    """alias -> item mapping that also finds aliases by DID in O(1).

    ``dids_of(item)`` names the DIDs an item answers to; a wallet's own and
    peer DIDs never collide, so one index serves both directions.
    """

    def __init__(self, dids_of, items=()):
        super().__init__()
        self._dids_of = dids_of
        self.by_did: dict[str, str] = {}
        for alias, item in dict(items).items():
            self[alias] = item

    def __setitem__(self, alias, item):
        if alias in self:
            del self[alias]
        super().__setitem__(alias, item)
        for did in self._dids_of(item):
            self.by_did[did] = alias

    def __delitem__(self, alias):
        item = super().pop(alias)
        for did in self._dids_of(item):
            if self.by_did.get(did) == alias:
                del self.by_did[did]

    def pop(self, alias, *default):
        if alias not in self:
            if default:
                return default[0]
            raise KeyError(alias)
        item = self[alias]
        del self[alias]
        return item

    def clear(self):
        super().clear()
        self.by_did.clear()

    def find(self, did: str):
        alias = self.by_did.get(did)
        return None if alias is None else self.get(alias)


@dataclass
class Connection:
    alias: str
    my_did: str
    their_did: str
    their_doc: DidDocument
    authenticated_peer: bool = False
    peer_anywise: str | None = None
    send_seq: int = 0
    recv_seq: int = 0

    def to_dict(self) -> dict:
        return {
            "alias": self.alias,
            "my_did": self.my_did,
            "their_did": self.their_did,
            "their_doc": self.their_doc.to_dict(),
            "authenticated_peer": self.authenticated_peer,
            "peer_anywise": self.peer_anywise,
            "send_seq": self.send_seq,
            "recv_seq": self.recv_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Connection":
        return cls(
            d["alias"],
            d["my_did"],
            d["their_did"],
            DidDocument.from_dict(d["their_doc"]),
            d["authenticated_peer"],
            d["peer_anywise"],
            d["send_seq"],
            d["recv_seq"],
        )


class Wallet:
    """Edge agent state; exactly one flow mutates a wallet at a time."""

    def __init__(self, label: str):
        self.label = label
        self.keys: dict[str, KeyPair] = {}
        self.dids = {}
        self.connections = {}
        self.credentials: dict[str, VerifiableCredential] = {}
        self.registries: dict[str, RevocationRegistry] = {}
        self.pending_invitations: dict[str, str] = {}
        self.certificate: Certificate | None = None
        self.role: Role | None = None
        self.channels: list[str] = []
        self.ledger_identity: LedgerIdentity | None = None
        self.identity_handle: str | None = None
        self.backup_keypair: KeyPair | None = None
        self.backup_seq = 0
        # trusted-contact side: patient DID -> contacts' key share
        self.held_shares: dict[str, bytes] = {}
        self.emergency_available = True
        self.inbox_log: list[dict] = []
        self.notices: list[dict] = []

    def __repr__(self) -> str:
        return f"Wallet({self.label!r}, dids={len(self.dids)}, vcs={len(self.credentials)})"

    # -- DIDs ------------------------------------------------------------------

    @property
    def dids(self) -> dict[str, DidDocument]:
        return self._dids

    @dids.setter
    def dids(self, value) -> None:
        self._dids = _DidIndex(lambda doc: (str(doc.did),), value)

    @property
    def connections(self) -> dict[str, Connection]:
        return self._connections

    @connections.setter
    def connections(self, value) -> None:
        self._connections = _DidIndex(lambda c: (c.my_did, c.their_did), value)

    @property
    def anywise_did(self) -> str | None:
        doc = self.dids.get(ANYWISE_ALIAS)
        return None if doc is None else str(doc.did)

    def anywise_keypair(self) -> KeyPair:
        did = self.anywise_did
        if did is None:
            raise NotFound(f"wallet {self.label!r} has no anywise DID")
        return self.keys[did]

    def add_did(self, alias: str, keypair: KeyPair, doc: DidDocument) -> None:
        self.keys[str(doc.did)] = keypair
        self.dids[alias] = doc

    def lookup_doc(self, did: str) -> DidDocument | None:
        doc = self.dids.find(did)
        if doc is not None:
            return doc
        conn = self.connections.find(did)
        if conn is not None and conn.their_did == did:
            return conn.their_doc
        return None

    def alias_in_use(self, alias: str) -> bool:
        return alias in self.dids or alias in self.connections

    # -- connections and credentials ---------------------------------------------

    def connection(self, alias: str) -> Connection:
        try:
            return self.connections[alias]
        except KeyError:
            raise UnknownConnection(f"{self.label!r} has no connection {alias!r}") from None

    def connection_for(self, my_did: str, their_did: str) -> Connection:
        conn = self.connections.find(my_did)
        if conn is not None and conn.my_did == my_did and conn.their_did == their_did:
            return conn
        raise UnknownConnection(f"{self.label!r}: no connection {my_did} <- {their_did}")

    def drop_connection(self, alias: str) -> None:
        conn = self.connections.pop(alias, None)
        doc = self.dids.pop(alias, None)
        if doc is not None:
            self.keys.pop(str(doc.did), None)
            self.pending_invitations.pop(str(doc.did), None)
        if conn is not None:
            self.keys.pop(conn.my_did, None)

    def store_credential(self, vc: VerifiableCredential) -> None:
        self.credentials[vc.cid_text] = vc

    def credential(self, ref: str | bytes) -> VerifiableCredential:
        key = b58(ref) if isinstance(ref, bytes) else ref
        try:
            return self.credentials[key]
        except KeyError:
            raise NotFound(f"{self.label!r} holds no credential {key}") from None

    def registry(self, registry_id: bytes | None = None) -> RevocationRegistry | None:
        if registry_id is not None:
            return self.registries.get(b58(registry_id))
        return next(iter(self.registries.values()), None)

    # -- serialization ------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "keys": {did: kp.to_dict() for did, kp in self.keys.items()},
            "dids": {alias: doc.to_dict() for alias, doc in self.dids.items()},
            "connections": {a: c.to_dict() for a, c in self.connections.items()},
            "credentials": {cid: vc.to_dict() for cid, vc in self.credentials.items()},
            "registries": {rid: r.to_dict() for rid, r in self.registries.items()},
            "pending_invitations": dict(self.pending_invitations),
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "role": None if self.role is None else self.role.value,
            "channels": list(self.channels),
            "identity_handle": self.identity_handle,
            "backup_keypair": None if self.backup_keypair is None else self.backup_keypair.to_dict(),
            "backup_seq": self.backup_seq,
            "held_shares": {did: b58(s) for did, s in self.held_shares.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Wallet":
        w = cls(d["label"])
        w.keys = {did: KeyPair.from_dict(kp) for did, kp in d["keys"].items()}
        w.dids = {alias: DidDocument.from_dict(doc) for alias, doc in d["dids"].items()}
        w.connections = {a: Connection.from_dict(c) for a, c in d["connections"].items()}
        w.credentials = {
            cid: VerifiableCredential.from_dict(vc) for cid, vc in d["credentials"].items()
        }
        w.registries = {rid: RevocationRegistry.from_dict(r) for rid, r in d["registries"].items()}
        w.pending_invitations = dict(d.get("pending_invitations", {}))
        if d.get("certificate"):
            w.certificate = Certificate.from_dict(d["certificate"])
        if d.get("role"):
            w.role = Role(d["role"])
            if w.anywise_did is not None:
                serial = w.certificate.serial if w.certificate else None
                w.ledger_identity = LedgerIdentity(w.anywise_did, w.role, serial)
        w.channels = list(d.get("channels", []))
        w.identity_handle = d.get("identity_handle")
        if d.get("backup_keypair"):
            w.backup_keypair = KeyPair.from_dict(d["backup_keypair"])
        w.backup_seq = int(d.get("backup_seq", 0))
        w.held_shares = {did: unb58(s) for did, s in d.get("held_shares", {}).items()}
        return w

    def export_backup(self) -> dict:
        """Backup payload: credentials and anywise identity, no pairwise material."""
        d = self.to_dict()
        anywise = self.anywise_did
        d["keys"] = {did: kp for did, kp in d["keys"].items() if did == anywise}
        d["dids"] = {a: doc for a, doc in d["dids"].items() if a == ANYWISE_ALIAS}
        d["connections"] = {}
        d["pending_invitations"] = {}
        return d

    def save(self, passphrase: str, *, entropy: Entropy | None = None, work_factor: int = 2**14) -> bytes:
        ent = entropy if entropy is not None else Entropy()
        salt = ent.bytes(SALT_LEN)
        key = derive_store_key(passphrase, salt, work_factor)
        ct = aead_encrypt(key, canonical_json(self.to_dict()), WALLET_MAGIC + salt, ent)
        return WALLET_MAGIC + salt + ct.to_bytes()

    @classmethod
    def load(cls, data: bytes, passphrase: str, *, work_factor: int = 2**14) -> "Wallet":
        if not data.startswith(WALLET_MAGIC) or len(data) < len(WALLET_MAGIC) + SALT_LEN:
            raise MalformedPayload("not a wallet file")
        salt = data[len(WALLET_MAGIC) : len(WALLET_MAGIC) + SALT_LEN]
        key = derive_store_key(passphrase, salt, work_factor)
        ct = AeadCiphertext.from_bytes(data[len(WALLET_MAGIC) + SALT_LEN :])
        return cls.from_dict(load_json(aead_decrypt(key, ct, WALLET_MAGIC + salt)))


# -- envelopes --------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    from_did: str
    to_did: str
    seq: int
    body: AeadCiphertext
    sender_signature: bytes = b""
    # Only on the first message of a connection, so the inviter learns the key.
    from_doc: DidDocument | None = None

    def header(self) -> bytes:
        return canonical_json({"from": self.from_did, "to": self.to_did, "seq": self.seq})

    def signing_payload(self) -> bytes:
        return canonical_json(
            {
                "from": self.from_did,
                "to": self.to_did,
                "seq": self.seq,
                "body": b58(self.body.to_bytes()),
                "from_doc": None if self.from_doc is None else self.from_doc.to_dict(),
            }
        )

    def to_dict(self) -> dict:
        return {
            "type": "envelope",
            "from": self.from_did,
            "to": self.to_did,
            "seq": self.seq,
            "body": b58(self.body.to_bytes()),
            "sig": b58(self.sender_signature),
            "from_doc": None if self.from_doc is None else self.from_doc.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Envelope":
        return cls(
            d["from"],
            d["to"],
            int(d["seq"]),
            AeadCiphertext.from_bytes(unb58(d["body"])),
            unb58(d["sig"]),
            None if d.get("from_doc") is None else DidDocument.from_dict(d["from_doc"]),
        )


@lru_cache(maxsize=4096)
def _connection_key(private_key: bytes, public_key: bytes, their_key: bytes, context: bytes) -> bytes:
    return agree_key(KeyPair(public_key, private_key), their_key, context)


def _channel_key(wallet: Wallet, conn: Connection) -> bytes:
    mine = wallet.keys[conn.my_did]
    context = "|".join(sorted([conn.my_did, conn.their_did])).encode()
    return _connection_key(mine.private_key, mine.public_key, conn.their_doc.verification_key, context)


def pack_envelope(
    wallet: Wallet,
    connection_alias: str,
    message: dict,
    *,
    entropy: Entropy | None = None,
    include_doc: bool = False,
) -> Envelope:
    conn = wallet.connection(connection_alias)
    seq = conn.send_seq + 1
    head = canonical_json({"from": conn.my_did, "to": conn.their_did, "seq": seq})
    body = aead_encrypt(_channel_key(wallet, conn), canonical_json(message), head, entropy)
    env = Envelope(
        conn.my_did,
        conn.their_did,
        seq,
        body,
        from_doc=wallet.lookup_doc(conn.my_did) if include_doc else None,
    )
    sig = sign(wallet.keys[conn.my_did].private_key, env.signing_payload())
    conn.send_seq = seq
    return Envelope(env.from_did, env.to_did, seq, body, sig, env.from_doc)


def unpack_envelope(wallet: Wallet, env: Envelope) -> dict:
    conn = wallet.connection_for(env.to_did, env.from_did)
    if not verify(conn.their_doc.verification_key, env.signing_payload(), env.sender_signature):
        raise AuthenticationError("envelope signature does not verify")
    if env.seq <= conn.recv_seq:
        raise ReplayError(f"sequence {env.seq} already seen (last {conn.recv_seq})")
    plaintext = aead_decrypt(_channel_key(wallet, conn), env.body, env.header())
    conn.recv_seq = env.seq
    message = load_json(plaintext)
    wallet.inbox_log.append({"from": env.from_did, "message": message})
    return message


# -- mediator ---------------------------------------------------------------------


@dataclass(frozen=True)
class MediationGrant:
    recipient_did: str
    queue_id: str
    granted_at: int


@dataclass(frozen=True)
class MediatorNotice:
    """Mediator-originated message (e.g. access termination); carries no claim data."""

    to_did: str
    kind: str
    body: dict

    def to_dict(self) -> dict:
        return {"type": "notice", "to": self.to_did, "kind": self.kind, "body": self.body}


@dataclass
class AccessGrant:
    vp_id: str
    grantee_did: str
    expires_at: int
    revoked: bool = False

    def allows(self, now: int) -> bool:
        return now < self.expires_at and not self.revoked


@dataclass
class HostedVp:
    vp: VerifiablePresentation | None
    owner_did: str


class Mediator:
    """Shared cloud agent: Coordinate Mediation, Message Pickup, hosted VPs, backups.

    Thread-safe; all state changes serialize through one lock.
    """

    def __init__(self, endpoint: str = "mediator://cloud-agent"):
        self.endpoint = endpoint
        self.agents: set[str] = set()
        self.grants: dict[str, MediationGrant] = {}
        self.queues: dict[str, deque] = {}
        self.hosted: dict[str, HostedVp] = {}
        self.access: dict[tuple[str, str], AccessGrant] = {}
        self.backups: dict[tuple[str, int], bytes] = {}
        self.audit_log: list[dict] = []
        self._lock = threading.RLock()

    def register_agent(self, label: str) -> str:
        with self._lock:
            self.agents.add(label)
        return self.endpoint

    def is_registered(self, label: str) -> bool:
        return label in self.agents

    # -- Coordinate Mediation / Message Pickup ------------------------------------

    def request_mediation(self, recipient_did: str, *, agent: str, now: int = 0) -> MediationGrant:
        with self._lock:
            if agent not in self.agents:
                raise NotRegistered(f"agent {agent!r} is not registered with {self.endpoint}")
            if recipient_did in self.grants:
                raise DuplicateGrant(f"{recipient_did} is already mediated")
            queue_id = f"q{len(self.grants):06d}"
            grant = MediationGrant(recipient_did, queue_id, now)
            self.grants[recipient_did] = grant
            self.queues[queue_id] = deque()
            return grant

    def _queue(self, did: str) -> deque:
        grant = self.grants.get(did)
        if grant is None:
            raise NoGrant(f"no mediation grant for {did}")
        return self.queues[grant.queue_id]

    def deliver(self, env: Envelope | MediatorNotice) -> None:
        to = env.to_did
        with self._lock:
            self._queue(to).append(env)

    def pickup(self, recipient_did: str, max_n: int | None = None) -> list:
        with self._lock:
            queue = self._queue(recipient_did)
            n = len(queue) if max_n is None else min(max_n, len(queue))
            return [queue.popleft() for _ in range(n)]

    def pending(self, recipient_did: str) -> list:
        with self._lock:
            return list(self._queue(recipient_did))

    # -- hosted presentations -------------------------------------------------------

    def host_vp(self, vp: VerifiablePresentation, owner_did: str) -> str:
        if vp.holder_did != owner_did:
            raise NotOwner(f"{owner_did} is not the holder of this presentation")
        with self._lock:
            self.hosted[vp.vp_id_text] = HostedVp(vp, owner_did)
        return vp.vp_id_text

    def _owned(self, vp_id: str, owner_did: str) -> HostedVp:
        hosted = self.hosted.get(vp_id)
        if hosted is None:
            raise NotFound(f"no hosted presentation {vp_id}")
        if hosted.owner_did != owner_did:
            raise NotOwner(f"{owner_did} does not own {vp_id}")
        return hosted

    def grant_access(
        self, vp_id: str, grantee_did: str, ttl: int, *, owner_did: str, now: int
    ) -> AccessGrant:
        with self._lock:
            self._owned(vp_id, owner_did)
            grant = AccessGrant(vp_id, grantee_did, now + int(ttl))
            self.access[(vp_id, grantee_did)] = grant
            return grant

    def revoke_access(self, vp_id: str, grantee_did: str, *, owner_did: str, now: int = 0) -> None:
        """Revoke one grant and queue a termination notice for the grantee."""
        with self._lock:
            self._owned(vp_id, owner_did)
            grant = self.access.get((vp_id, grantee_did))
            if grant is None:
                raise AccessDenied(f"{grantee_did} holds no grant on {vp_id}")
            grant.revoked = True
            self._notify_termination(vp_id, grantee_did, now)

    def remove_vp(self, vp_id: str, *, owner_did: str, now: int = 0) -> None:
        """Delete the hosted object and terminate every grant still active."""
        with self._lock:
            hosted = self._owned(vp_id, owner_did)
            hosted.vp = None
            for (vid, grantee), grant in self.access.items():
                if vid == vp_id and not grant.revoked:
                    grant.revoked = True
                    self._notify_termination(vp_id, grantee, now)

    def _notify_termination(self, vp_id: str, grantee_did: str, now: int) -> None:
        notice = MediatorNotice(grantee_did, "access-terminated", {"vp_id": vp_id, "at": now})
        if grantee_did in self.grants:
            self._queue(grantee_did).append(notice)

    def fetch_vp(self, vp_id: str, grantee_did: str, now: int) -> VerifiablePresentation:
        with self._lock:
            grant = self.access.get((vp_id, grantee_did))
            outcome = "ok"
            try:
                if grant is None:
                    outcome = "denied"
                    raise AccessDenied(f"{grantee_did} holds no grant on {vp_id}")
                if grant.revoked:
                    outcome = "revoked"
                    raise AccessRevoked(f"access to {vp_id} was revoked")
                if now >= grant.expires_at:
                    outcome = "expired"
                    raise AccessExpired(f"access to {vp_id} expired at {grant.expires_at}")
                hosted = self.hosted.get(vp_id)
                if hosted is None or hosted.vp is None:
                    outcome = "removed"
                    raise AccessRevoked(f"{vp_id} was removed by its owner")
                return hosted.vp
            finally:
                self.audit_log.append(
                    {"op": "fetch_vp", "vp_id": vp_id, "by": grantee_did, "at": now, "outcome": outcome}
                )

    # -- backups --------------------------------------------------------------------

    def store_backup(self, owner_did: str, sequence_no: int, blob: bytes) -> None:
        with self._lock:
            self.backups[(owner_did, sequence_no)] = blob

    def fetch_backup(self, owner_did: str, sequence_no: int, *, requester: str, now: int = 0) -> bytes:
        with self._lock:
            blob = self.backups.get((owner_did, sequence_no))
            self.audit_log.append(
                {
                    "op": "fetch_backup",
                    "owner": owner_did,
                    "seq": sequence_no,
                    "by": requester,
                    "at": now,
                    "outcome": "ok" if blob is not None else "missing",
                }
            )
            if blob is None:
                raise NotFound(f"no backup {sequence_no} for {owner_did}")
            return blob

    # -- export ---------------------------------------------------------------------

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "endpoint": self.endpoint,
                "agents": sorted(self.agents),
                "grants": {
                    did: {"queue_id": g.queue_id, "granted_at": g.granted_at}
                    for did, g in sorted(self.grants.items())
                },
                "queues": {qid: [m.to_dict() for m in q] for qid, q in sorted(self.queues.items())},
                "hosted": {
                    vid: {"owner": h.owner_did, "vp": None if h.vp is None else h.vp.to_dict()}
                    for vid, h in sorted(self.hosted.items())
                },
                "access": [
                    {"vp_id": g.vp_id, "grantee": g.grantee_did, "expires_at": g.expires_at, "revoked": g.revoked}
                    for g in self.access.values()
                ],
                "backups": {f"{did}#{seq}": b58(blob) for (did, seq), blob in sorted(self.backups.items())},
                "audit_log": list(self.audit_log),
            }

    def export_json(self) -> bytes:
        return canonical_json(self.snapshot())


# -- backup and restore -----------------------------------------------------------


def _backup_aad(did: str) -> bytes:
    return b"ssi-ehr/backup|" + did.encode()


def backup_wallet(
    wallet: Wallet,
    mediator: Mediator,
    backup_keypair: KeyPair,
    *,
    ledger,
    entropy: Entropy | None = None,
) -> tuple[int, Digest]:
    """Encrypt the wallet to the backup key, anchor its digest, then upload.

    Anchoring happens first; if it fails nothing is uploaded.
    """
    did = wallet.anywise_did
    payload = canonical_json(wallet.export_backup())
    blob = seal(backup_keypair.public_key, payload, _backup_aad(did), entropy).to_bytes()
    digest = hash_data(blob)
    seq = wallet.backup_seq + 1
    ledger.anchor_backup_hash(wallet.ledger_identity, digest, seq)
    mediator.store_backup(did, seq, blob)
    wallet.backup_seq = seq
    return seq, digest


def open_backup(blob: bytes, anchored_digest: bytes, backup_keypair: KeyPair, owner_did: str) -> dict:
    """Check the blob against its anchored digest, then decrypt it."""
    if hash_data(blob).bytes != anchored_digest:
        raise DigestMismatch("backup does not match the digest anchored on the ledger")
    return load_json(open_sealed(backup_keypair, SealedBox.from_bytes(blob), _backup_aad(owner_did)))


def restore_wallet(label: str, payload: dict[str, Any]) -> Wallet:
    wallet = Wallet.from_dict({**payload, "label": label})
    wallet.connections = {}
    wallet.pending_invitations = {}
    return wallet
