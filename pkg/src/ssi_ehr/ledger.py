"""Single-node simulation of the permissioned ledger.

The CA binds an anywise DID to a role claim with a signed certificate, the
MSP turns certificates into roles and channel assignments, and the ledger
keeps one append-only transaction log per channel. Channel state is a pure
function of its log, which ``verify_replay`` checks.

Role -> channel permissions::

    dids        read: every role      write-own: certificate roles
    backups     read: MSP             write-own: Patient
    registries  read: every role      write-own: Practitioner, Laboratory
    security    read: Admin           write:     MSP

"write-own" means every key written must live under the submitter's DID
(``"<did>/..."``).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from ssi_ehr.crypto import Entropy, KeyPair, generate_keypair, hash_data, sign, verify
from ssi_ehr.encoding import b58, canonical_json, load_json, unb58
from ssi_ehr.errors import (
    DidKeyMismatch,
    DuplicateDid,
    EpochGap,
    ExpiredCertificate,
    IntegrityMismatch,
    InvalidCertificate,
    NonMonotoneSequence,
    NotFound,
    PairwiseDidRejected,
    RoleRejected,
    SignatureMismatch,
    Unauthorized,
    UnauthorizedChannel,
    UnknownKey,
    WrongIssuer,
)
from ssi_ehr.identity import DidDocument, DidKind
from ssi_ehr.revocation import RegistryState

CERT_VALIDITY = 365 * 24 * 3600


class Role(str, Enum):
    PATIENT = "Patient"
    PRACTITIONER = "Practitioner"
    LABORATORY = "Laboratory"
    ADMIN = "Admin"
    # system principal of the membership service; never issued in a certificate
    MSP = "MSP"


CERT_ROLES = frozenset({Role.PATIENT, Role.PRACTITIONER, Role.LABORATORY, Role.ADMIN})
ALL_ROLES = CERT_ROLES | {Role.MSP}


@dataclass(frozen=True)
class ChannelRule:
    read: frozenset
    write: frozenset = frozenset()
    write_own: frozenset = frozenset()


CHANNEL_RULES: dict[str, ChannelRule] = {
    "dids": ChannelRule(read=ALL_ROLES, write_own=CERT_ROLES),
    "backups": ChannelRule(read=frozenset({Role.MSP}), write_own=frozenset({Role.PATIENT})),
    "registries": ChannelRule(
        read=ALL_ROLES, write_own=frozenset({Role.PRACTITIONER, Role.LABORATORY})
    ),
    "security": ChannelRule(read=frozenset({Role.ADMIN}), write=frozenset({Role.MSP})),
}
# Channels readable by any participant without presenting an identity.
PUBLIC_READ = frozenset({"dids", "registries"})


def permits(role: Role, channel_id: str, access: str) -> bool:
    """The whole authorization table: ``access`` is "read" or "write"."""
    rule = CHANNEL_RULES.get(channel_id)
    if rule is None:
        return False
    if access == "read":
        return role in rule.read
    if access == "write":
        return role in rule.write or role in rule.write_own
    return False


def channels_for(role: Role) -> list[str]:
    return [c for c in CHANNEL_RULES if permits(role, c, "read") or permits(role, c, "write")]


@dataclass(frozen=True)
class Certificate:
    subject_did: str
    subject_public_key: bytes
    role_claim: str
    issued_at: int
    expires_at: int
    serial: int
    ca_signature: bytes = b""

    def signing_payload(self) -> bytes:
        d = self.to_dict()
        del d["ca_signature"]
        return canonical_json(d)

    def to_dict(self) -> dict:
        return {
            "subject_did": self.subject_did,
            "subject_public_key": b58(self.subject_public_key),
            "role_claim": self.role_claim,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
            "serial": self.serial,
            "ca_signature": b58(self.ca_signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(
            d["subject_did"],
            unb58(d["subject_public_key"]),
            d["role_claim"],
            int(d["issued_at"]),
            int(d["expires_at"]),
            int(d["serial"]),
            unb58(d["ca_signature"]),
        )


@dataclass(frozen=True)
class CertificateRequest:
    subject_doc: DidDocument
    public_key: bytes
    role_claim: str
    identity_handle: str | None = None
    applicant_signature: bytes = b""

    def signing_payload(self) -> bytes:
        return canonical_json(
            {
                "subject_did": str(self.subject_doc.did),
                "public_key": b58(self.public_key),
                "role_claim": self.role_claim,
                "identity_handle": self.identity_handle,
            }
        )

    def signed(self, keypair: KeyPair) -> "CertificateRequest":
        return CertificateRequest(
            self.subject_doc,
            self.public_key,
            self.role_claim,
            self.identity_handle,
            sign(keypair.private_key, self.signing_payload()),
        )


class CertificateAuthority:
    """Trust root that signs role certificates after checking CSR key binding."""

    def __init__(self, name: str = "ca", entropy: Entropy | None = None):
        self.name = name
        self.root_keypair = generate_keypair(entropy)
        self._serial = 0
        # real-identity handle -> DID, kept for emergency identification
        self.identity_matches: dict[str, str] = {}

    @property
    def public_key(self) -> bytes:
        return self.root_keypair.public_key

    def issue_certificate(
        self, csr: CertificateRequest, now: int, validity: int = CERT_VALIDITY
    ) -> Certificate:
        if not verify(csr.public_key, csr.signing_payload(), csr.applicant_signature):
            raise SignatureMismatch("CSR signature does not verify under its public key")
        doc = csr.subject_doc
        if not doc.is_bound():
            raise IntegrityMismatch("CSR document does not hash to its DID")
        if doc.verification_key != csr.public_key:
            raise DidKeyMismatch("CSR key differs from the DID document key")
        self._serial += 1
        cert = Certificate(
            subject_did=str(doc.did),
            subject_public_key=csr.public_key,
            role_claim=csr.role_claim,
            issued_at=now,
            expires_at=now + validity,
            serial=self._serial,
        )
        sig = sign(self.root_keypair.private_key, cert.signing_payload())
        if csr.identity_handle:
            self.identity_matches[csr.identity_handle] = cert.subject_did
        return replace(cert, ca_signature=sig)

    def lookup_identity(self, identity_handle: str) -> str | None:
        return self.identity_matches.get(identity_handle)


@dataclass(frozen=True)
class LedgerIdentity:
    did: str
    role: Role
    cert_serial: int | None = None


@dataclass(frozen=True)
class Authorization:
    role: Role
    channels: list[str]
    identity: LedgerIdentity


class MembershipService:
    """Maps CA certificates to roles; the ledger trusts only identities it minted."""

    DEFAULT_ROLE_MAP = {
        "Patient": Role.PATIENT,
        "Practitioner": Role.PRACTITIONER,
        "Laboratory": Role.LABORATORY,
        "Admin": Role.ADMIN,
    }

    def __init__(self, ca: CertificateAuthority, msp_id: str = "msp"):
        self.ca = ca
        self.msp_id = msp_id
        self.role_map: dict[str, Role] = dict(self.DEFAULT_ROLE_MAP)
        self.identity = LedgerIdentity(f"msp:{msp_id}", Role.MSP)
        self._authorized: dict[str, Role] = {self.identity.did: Role.MSP}
        # patient DID -> TrustedContactSet / key share held for recovery and emergencies
        self.safekeeping: dict[str, Any] = {}

    def authorize(self, cert: Certificate, now: int) -> Authorization:
        if not verify(self.ca.public_key, cert.signing_payload(), cert.ca_signature):
            raise InvalidCertificate("certificate is not signed by the CA root")
        if now >= cert.expires_at or now < cert.issued_at:
            raise ExpiredCertificate(f"certificate valid {cert.issued_at}..{cert.expires_at}")
        role = self.role_map.get(cert.role_claim)
        if role is None:
            raise RoleRejected(f"no MSP rule for role claim {cert.role_claim!r}")
        identity = LedgerIdentity(cert.subject_did, role, cert.serial)
        self._authorized[cert.subject_did] = role
        return Authorization(role, channels_for(role), identity)

    def is_authorized(self, identity: LedgerIdentity) -> bool:
        return self._authorized.get(identity.did) is identity.role


class EmergencyOutcome(str, Enum):
    KEY_RELEASED = "KeyReleased"
    CONTACT_LIST_RELEASED = "ContactListReleased"
    DENIED = "Denied"


@dataclass(frozen=True)
class EmergencyRecord:
    patient_did: str | None
    requester_did: str
    msp_id: str
    contact_ack: str | None
    triggered_at: int
    outcome: EmergencyOutcome

    def to_dict(self) -> dict:
        return {
            "patient_did": self.patient_did,
            "requester_did": self.requester_did,
            "msp_id": self.msp_id,
            "contact_ack": self.contact_ack,
            "triggered_at": self.triggered_at,
            "outcome": self.outcome.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmergencyRecord":
        return cls(
            d["patient_did"],
            d["requester_did"],
            d["msp_id"],
            d["contact_ack"],
            int(d["triggered_at"]),
            EmergencyOutcome(d["outcome"]),
        )


@dataclass(frozen=True)
class Transaction:
    tx_id: bytes
    submitter_did: str
    channel_id: str
    op_name: str
    payload: bytes
    block_height: int
    timestamp: int

    def to_dict(self) -> dict:
        return {
            "tx_id": b58(self.tx_id),
            "submitter_did": self.submitter_did,
            "channel_id": self.channel_id,
            "op_name": self.op_name,
            "payload": self.payload.decode("utf-8"),
            "block_height": self.block_height,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(
            unb58(d["tx_id"]),
            d["submitter_did"],
            d["channel_id"],
            d["op_name"],
            d["payload"].encode("utf-8"),
            int(d["block_height"]),
            int(d["timestamp"]),
        )


@dataclass
class Channel:
    channel_id: str
    state: dict[str, Any] = field(default_factory=dict)
    tx_log: list[Transaction] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def allowed_roles(self) -> frozenset:
        rule = CHANNEL_RULES[self.channel_id]
        return rule.read | rule.write | rule.write_own


def _apply(state: dict, payload: bytes) -> None:
    for key, value in load_json(payload)["writes"].items():
        state[key] = value


class Ledger:
    def __init__(self, msp: MembershipService | None = None, clock=None):
        self.msp = msp
        self.clock = clock
        self.channels = {cid: Channel(cid) for cid in CHANNEL_RULES}
        self._height = 0
        self._height_lock = threading.Lock()

    def _now(self) -> int:
        return self.clock.now() if self.clock is not None else 0

    def _check_identity(self, identity: LedgerIdentity) -> None:
        if self.msp is not None and not self.msp.is_authorized(identity):
            raise Unauthorized(f"{identity.did} holds no MSP authorization as {identity.role}")

    # -- generic surface -----------------------------------------------------

    def submit_tx(
        self, identity: LedgerIdentity, channel_id: str, op_name: str, writes: dict[str, Any]
    ) -> Transaction:
        channel = self.channels.get(channel_id)
        if channel is None:
            raise UnknownKey(f"no channel {channel_id!r}")
        self._check_identity(identity)
        rule = CHANNEL_RULES[channel_id]
        if identity.role in rule.write:
            pass
        elif identity.role in rule.write_own:
            prefix = identity.did + "/"
            foreign = [k for k in writes if not k.startswith(prefix)]
            if foreign:
                raise UnauthorizedChannel(f"{identity.did} may only write its own keys: {foreign}")
        else:
            raise UnauthorizedChannel(f"{identity.role.value} cannot write to {channel_id!r}")
        payload = canonical_json({"writes": writes})
        with channel.lock:
            with self._height_lock:
                height = self._height
                self._height += 1
            header = canonical_json(
                {
                    "channel": channel_id,
                    "op": op_name,
                    "submitter": identity.did,
                    "height": height,
                    "payload": b58(hash_data(payload).bytes),
                }
            )
            tx = Transaction(
                tx_id=hash_data(header).bytes,
                submitter_did=identity.did,
                channel_id=channel_id,
                op_name=op_name,
                payload=payload,
                block_height=height,
                timestamp=self._now(),
            )
            _apply(channel.state, payload)
            channel.tx_log.append(tx)
        return tx

    def query(self, channel_id: str, key: str, reader: LedgerIdentity | None = None) -> Any:
        channel = self.channels.get(channel_id)
        if channel is None:
            raise UnknownKey(f"no channel {channel_id!r}")
        if reader is None:
            if channel_id not in PUBLIC_READ:
                raise UnauthorizedChannel(f"{channel_id!r} needs an authorized reader")
        else:
            self._check_identity(reader)
            if not permits(reader.role, channel_id, "read"):
                raise UnauthorizedChannel(f"{reader.role.value} cannot read {channel_id!r}")
        try:
            return channel.state[key]
        except KeyError:
            raise UnknownKey(f"{channel_id}:{key}") from None

    def _has(self, channel_id: str, key: str) -> bool:
        return key in self.channels[channel_id].state

    # -- DIDs -------------------------------------------------------------------

    def put_did(self, identity: LedgerIdentity, did, doc: DidDocument) -> Transaction:
        did = str(did)
        if doc.did.kind is not DidKind.ANYWISE:
            raise PairwiseDidRejected(f"{did} is pairwise; pairwise DIDs never go on-ledger")
        if str(doc.did) != did or not doc.is_bound():
            raise IntegrityMismatch(f"document does not hash to {did}")
        if identity.did != did:
            raise UnauthorizedChannel("a DID can only be registered by its controller")
        if self._has("dids", f"{did}/doc"):
            raise DuplicateDid(f"{did} already registered")
        return self.submit_tx(identity, "dids", "put_did", {f"{did}/doc": doc.to_dict()})

    def get_did(self, did) -> DidDocument:
        did = str(did)
        try:
            raw = self.query("dids", f"{did}/doc")
        except UnknownKey:
            raise NotFound(f"{did} is not on the ledger") from None
        doc = DidDocument.from_dict(raw)
        if str(doc.did) != did:
            raise IntegrityMismatch(f"ledger entry for {did} names {doc.did}")
        return doc

    def has_did(self, did) -> bool:
        return self._has("dids", f"{did}/doc")

    # -- backups ----------------------------------------------------------------

    def anchor_backup_hash(self, identity: LedgerIdentity, backup_digest, sequence_no: int):
        if identity.role is not Role.PATIENT:
            raise UnauthorizedChannel("only patients anchor backups")
        digest = getattr(backup_digest, "bytes", backup_digest)
        state = self.channels["backups"].state
        latest = state.get(f"{identity.did}/backup/latest")
        if latest is not None and sequence_no <= latest:
            raise NonMonotoneSequence(f"sequence {sequence_no} after {latest}")
        return self.submit_tx(
            identity,
            "backups",
            "anchor_backup_hash",
            {
                f"{identity.did}/backup/{sequence_no}": b58(digest),
                f"{identity.did}/backup/latest": sequence_no,
            },
        )

    def get_backup_hash(
        self, reader: LedgerIdentity, patient_did: str, sequence_no: int | None = None
    ) -> tuple[int, bytes]:
        if sequence_no is None:
            sequence_no = self.query("backups", f"{patient_did}/backup/latest", reader)
        digest = self.query("backups", f"{patient_did}/backup/{sequence_no}", reader)
        return sequence_no, unb58(digest)

    # -- revocation registries --------------------------------------------------------

    def anchor_registry_state(self, identity: LedgerIdentity, state: RegistryState):
        if identity.did != state.issuer_did:
            raise WrongIssuer(f"{identity.did} cannot anchor {state.issuer_did}'s registry")
        try:
            issuer_doc = self.get_did(identity.did)
        except NotFound:
            raise WrongIssuer(f"issuer {identity.did} is not on the ledger") from None
        if not state.signature_valid(issuer_doc.verification_key):
            raise WrongIssuer("registry state is not signed by its issuer")
        base = f"{identity.did}/registry/{b58(state.registry_id)}"
        latest = self.channels["registries"].state.get(f"{base}/latest")
        expected = 0 if latest is None else latest + 1
        if state.epoch != expected:
            raise EpochGap(f"expected epoch {expected}, got {state.epoch}")
        return self.submit_tx(
            identity,
            "registries",
            "anchor_registry_state",
            {f"{base}/{state.epoch}": state.to_dict(), f"{base}/latest": state.epoch},
        )

    def get_registry_state(
        self, issuer_did: str, registry_id: bytes, epoch: int | None = None
    ) -> RegistryState:
        base = f"{issuer_did}/registry/{b58(registry_id)}"
        try:
            if epoch is None:
                epoch = self.query("registries", f"{base}/latest")
            return RegistryState.from_dict(self.query("registries", f"{base}/{epoch}"))
        except UnknownKey:
            raise NotFound(f"no anchored state for registry {b58(registry_id)}") from None

    # -- emergency audit --------------------------------------------------------

    def record_emergency_access(self, identity: LedgerIdentity, rec: EmergencyRecord):
        self._check_identity(identity)
        if identity.role is not Role.MSP:
            raise Unauthorized("only the MSP records emergency access")
        n = len(self.channels["security"].tx_log)
        return self.submit_tx(
            identity, "security", "record_emergency_access", {f"emergency/{n:08d}": rec.to_dict()}
        )

    def emergency_records(self, reader: LedgerIdentity) -> list[EmergencyRecord]:
        self._check_identity(reader)
        if not permits(reader.role, "security", "read"):
            raise UnauthorizedChannel(f"{reader.role.value} cannot read the security channel")
        state = self.channels["security"].state
        return [EmergencyRecord.from_dict(state[k]) for k in sorted(state)]

    def count_emergency_records(self) -> int:
        """Audit count without reading record contents (harness use)."""
        return len(self.channels["security"].tx_log)

    # -- snapshots and replay -------------------------------------------------------

    def replay_state(self, channel_id: str) -> dict:
        state: dict = {}
        for tx in self.channels[channel_id].tx_log:
            _apply(state, tx.payload)
        return state

    def verify_replay(self) -> bool:
        return all(
            canonical_json(self.replay_state(cid)) == canonical_json(ch.state)
            for cid, ch in self.channels.items()
        )

    def snapshot(self) -> dict:
        return {
            "height": self._height,
            "channels": {
                cid: {"state": ch.state, "tx_log": [tx.to_dict() for tx in ch.tx_log]}
                for cid, ch in self.channels.items()
            },
        }

    def export_json(self) -> bytes:
        return canonical_json(self.snapshot())

    @classmethod
    def import_json(cls, data: bytes, msp: MembershipService | None = None, clock=None) -> "Ledger":
        snap = load_json(data)
        ledger = cls(msp, clock)
        ledger._height = int(snap["height"])
        for cid, body in snap["channels"].items():
            ch = ledger.channels[cid]
            ch.tx_log = [Transaction.from_dict(t) for t in body["tx_log"]]
            ch.state = ledger.replay_state(cid)
            if canonical_json(ch.state) != canonical_json(body["state"]):
                raise IntegrityMismatch(f"channel {cid} state does not match its log")
        return ledger

    def tx_count(self) -> int:
        return self._height
