"""Verifiable credentials with salted per-claim commitments, and audience-bound
presentations that disclose a chosen subset of claims.

A credential signs only the list of claim digests; the claims themselves
(name, value, salt) travel to the holder alongside it. A presentation copies
the signed envelope, reveals the selected claims with their salts, attaches a
fresh non-revocation proof per credential, and is signed by the holder over
audience and expiry so it cannot be replayed elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Mapping, Protocol

from ssi_ehr.crypto import Entropy, hash_data, sign, verify
from ssi_ehr.encoding import b58, canonical_json, unb58
from ssi_ehr.errors import (
    EmptyDisclosure,
    NotFound,
    RegistryUnavailable,
    SsiError,
    UnknownClaim,
    UnknownCid,
    UnregisteredIssuer,
)
from ssi_ehr.revocation import NonRevocationProof, register_credential, verify_non_revocation

CLAIM_SEP = b"\x1f"


@dataclass(frozen=True)
class Claim:
    name: str
    value: str
    salt: bytes

    def digest(self) -> bytes:
        return hash_data(
            self.name.encode("utf-8") + CLAIM_SEP + self.value.encode("utf-8") + CLAIM_SEP + self.salt
        ).bytes

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "salt": b58(self.salt)}

    @classmethod
    def from_dict(cls, d: dict) -> "Claim":
        return cls(d["name"], d["value"], unb58(d["salt"]))


@dataclass(frozen=True)
class VerifiableCredential:
    cid: bytes
    issuer_did: str
    issuer_key: bytes
    subject_did: str
    claim_digests: tuple[bytes, ...]
    registry_id: bytes
    issued_at: int
    signature: bytes = b""
    claims: tuple[Claim, ...] = ()

    def envelope(self) -> dict:
        """The signed part, without claims or signature."""
        return {
            "cid": b58(self.cid),
            "issuer_did": self.issuer_did,
            "issuer_key": b58(self.issuer_key),
            "subject_did": self.subject_did,
            "claim_digests": [b58(d) for d in self.claim_digests],
            "registry_id": b58(self.registry_id),
            "issued_at": self.issued_at,
        }

    def signing_payload(self) -> bytes:
        return canonical_json(self.envelope())

    def to_dict(self, with_claims: bool = True) -> dict:
        d = {**self.envelope(), "signature": b58(self.signature)}
        if with_claims:
            d["claims"] = [c.to_dict() for c in self.claims]
        return d

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "VerifiableCredential":
        return cls(
            cid=unb58(d["cid"]),
            issuer_did=d["issuer_did"],
            issuer_key=unb58(d["issuer_key"]),
            subject_did=d["subject_did"],
            claim_digests=tuple(unb58(x) for x in d["claim_digests"]),
            registry_id=unb58(d["registry_id"]),
            issued_at=int(d["issued_at"]),
            signature=unb58(d["signature"]),
            claims=tuple(Claim.from_dict(c) for c in d.get("claims", ())),
        )

    @property
    def cid_text(self) -> str:
        return b58(self.cid)

    def claim(self, name: str) -> Claim:
        for c in self.claims:
            if c.name == name:
                return c
        raise UnknownClaim(name)


@dataclass(frozen=True)
class Disclosure:
    credential: VerifiableCredential  # claims stripped
    claims: tuple[Claim, ...]

    def to_dict(self) -> dict:
        return {
            "credential": self.credential.to_dict(with_claims=False),
            "claims": [c.to_dict() for c in self.claims],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Disclosure":
        return cls(
            VerifiableCredential.from_dict(d["credential"]),
            tuple(Claim.from_dict(c) for c in d["claims"]),
        )


@dataclass(frozen=True)
class VerifiablePresentation:
    vp_id: bytes
    holder_did: str
    disclosed: tuple[Disclosure, ...]
    nonrev: tuple[NonRevocationProof, ...]
    audience_did: str
    created_at: int
    expires_at: int | None
    holder_signature: bytes = b""

    def signing_payload(self) -> bytes:
        d = self.to_dict()
        del d["holder_signature"]
        return canonical_json(d)

    def to_dict(self) -> dict:
        return {
            "vp_id": b58(self.vp_id),
            "holder_did": self.holder_did,
            "disclosed": [x.to_dict() for x in self.disclosed],
            "nonrev": [p.to_dict() for p in self.nonrev],
            "audience_did": self.audience_did,
            "created_at": self.created_at,
            "expires_at": self.expires_at,
            "holder_signature": b58(self.holder_signature),
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "VerifiablePresentation":
        return cls(
            vp_id=unb58(d["vp_id"]),
            holder_did=d["holder_did"],
            disclosed=tuple(Disclosure.from_dict(x) for x in d["disclosed"]),
            nonrev=tuple(NonRevocationProof.from_dict(p) for p in d["nonrev"]),
            audience_did=d["audience_did"],
            created_at=int(d["created_at"]),
            expires_at=d["expires_at"],
            holder_signature=unb58(d["holder_signature"]),
        )

    @property
    def vp_id_text(self) -> str:
        return b58(self.vp_id)


@dataclass
class VerificationReport:
    """Independent check results; ``None`` means the check could not run.

    ``valid`` requires every check that applies to be True and the
    presentation not to be expired.
    """

    signature_ok: bool | None = None
    issuer_known: bool | None = None
    not_revoked: bool | None = None
    digests_ok: bool | None = None
    holder_ok: bool | None = None
    audience_ok: bool | None = None
    expired: bool = False
    not_yet_valid: bool = False
    problems: list[str] = field(default_factory=list)

    _CHECKS = ("signature_ok", "issuer_known", "not_revoked", "digests_ok", "holder_ok", "audience_ok")

    @property
    def valid(self) -> bool:
        return (
            all(getattr(self, name) is not False for name in self._CHECKS)
            and self.signature_ok is True
            and self.issuer_known is True
            and self.not_revoked is True
            and not self.expired
            and not self.not_yet_valid
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["valid"] = self.valid
        return d


class Witness(Protocol):
    def prove(self, registry_id: bytes, cid: bytes) -> NonRevocationProof: ...


class RegistryWitness:
    """Issuer-side proof service: answers membership-path requests by registry id."""

    def __init__(self):
        self._registries: dict[bytes, object] = {}

    def add(self, registry) -> None:
        self._registries[registry.registry_id] = registry

    def prove(self, registry_id: bytes, cid: bytes) -> NonRevocationProof:
        registry = self._registries.get(registry_id)
        if registry is None:
            raise RegistryUnavailable(f"no witness for registry {b58(registry_id)}")
        return registry.prove(cid)


def issue_vc(
    issuer_wallet,
    subject_did: str,
    claims: Mapping[str, str] | Iterable[tuple[str, str]],
    *,
    ledger,
    now: int,
    entropy: Entropy | None = None,
    registry_id: bytes | None = None,
) -> VerifiableCredential:
    """Sign a credential from the issuer's anywise DID and mark it active.

    The new registry state is anchored on ``ledger`` before returning.
    """
    ent = entropy if entropy is not None else Entropy()
    issuer_did = issuer_wallet.anywise_did
    if issuer_did is None or not ledger.has_did(issuer_did):
        raise UnregisteredIssuer(f"issuer {issuer_did} is not registered on the ledger")
    registry = issuer_wallet.registry(registry_id)
    if registry is None:
        raise RegistryUnavailable(f"{issuer_wallet.label!r} has no revocation registry")
    pairs = list(claims.items()) if isinstance(claims, Mapping) else list(claims)
    names = [n for n, _ in pairs]
    if len(set(names)) != len(names):
        raise UnknownClaim(f"duplicate claim names in {names}")
    claim_objs = tuple(Claim(str(n), str(v), ent.bytes(16)) for n, v in pairs)
    keypair = issuer_wallet.anywise_keypair()
    vc = VerifiableCredential(
        cid=ent.bytes(16),
        issuer_did=issuer_did,
        issuer_key=keypair.public_key,
        subject_did=str(subject_did),
        claim_digests=tuple(c.digest() for c in claim_objs),
        registry_id=registry.registry_id,
        issued_at=now,
        claims=claim_objs,
    )
    register_credential(
        registry, vc.cid, keypair, ledger=ledger, identity=issuer_wallet.ledger_identity
    )
    return replace(vc, signature=sign(keypair.private_key, vc.signing_payload()))


def _issuer_status(vc: VerifiableCredential, ledger, report: VerificationReport) -> None:
    report.signature_ok = verify(vc.issuer_key, vc.signing_payload(), vc.signature)
    try:
        doc = ledger.get_did(vc.issuer_did)
    except (NotFound, SsiError):
        report.issuer_known = False
        report.problems.append(f"issuer {vc.issuer_did} unknown to ledger")
        return
    report.issuer_known = doc.verification_key == vc.issuer_key
    if not report.issuer_known:
        report.problems.append("credential key differs from the issuer's ledger key")


def _check_nonrev(vc: VerifiableCredential, proof: NonRevocationProof | None, ledger) -> bool:
    if proof is None or proof.cid != vc.cid or proof.registry_id != vc.registry_id:
        return False
    try:
        state = ledger.get_registry_state(vc.issuer_did, vc.registry_id)
    except NotFound:
        return False
    return verify_non_revocation(proof, state, vc.issuer_key)


def verify_vc(
    vc: VerifiableCredential,
    ledger,
    at_time: int | None = None,
    *,
    proof: NonRevocationProof | None = None,
    witness: Witness | None = None,
) -> VerificationReport:
    """Check signature, issuer registration and non-revocation independently.

    Revocation status comes from ``proof`` if given, else a fresh proof is
    requested from ``witness``; without either it stays unchecked (None).
    """
    report = VerificationReport()
    _issuer_status(vc, ledger, report)
    if vc.claims:
        report.digests_ok = tuple(c.digest() for c in vc.claims) == vc.claim_digests
    if at_time is not None and vc.issued_at > at_time:
        report.not_yet_valid = True
    if not report.issuer_known:
        return report
    if proof is None and witness is not None:
        try:
            proof = witness.prove(vc.registry_id, vc.cid)
        except (UnknownCid, RegistryUnavailable) as exc:
            report.not_revoked = False
            report.problems.append(str(exc))
            return report
    if proof is not None:
        report.not_revoked = _check_nonrev(vc, proof, ledger)
    return report


def create_vp(
    holder_wallet,
    vc_refs: Iterable[str | bytes],
    disclosed_claim_names: Iterable[str],
    audience_did: str,
    ttl: int | None,
    *,
    now: int,
    witness: Witness,
    entropy: Entropy | None = None,
) -> VerifiablePresentation:
    ent = entropy if entropy is not None else Entropy()
    names = list(dict.fromkeys(disclosed_claim_names))
    if not names:
        raise EmptyDisclosure("a presentation must disclose at least one claim")
    vcs = [holder_wallet.credential(ref) for ref in vc_refs]
    available = {c.name for vc in vcs for c in vc.claims}
    missing = [n for n in names if n not in available]
    if missing:
        raise UnknownClaim(f"claims {missing} not in the referenced credentials")
    wanted = set(names)
    disclosed = tuple(
        Disclosure(
            credential=_strip(vc),
            claims=tuple(c for c in vc.claims if c.name in wanted),
        )
        for vc in vcs
    )
    proofs = tuple(witness.prove(vc.registry_id, vc.cid) for vc in vcs)
    vp = VerifiablePresentation(
        vp_id=ent.bytes(16),
        holder_did=holder_wallet.anywise_did,
        disclosed=disclosed,
        nonrev=proofs,
        audience_did=str(audience_did),
        created_at=now,
        expires_at=None if ttl is None else now + int(ttl),
    )
    sig = sign(holder_wallet.anywise_keypair().private_key, vp.signing_payload())
    return replace(vp, holder_signature=sig)


def _strip(vc: VerifiableCredential) -> VerifiableCredential:
    return replace(vc, claims=())


def verify_vp(
    vp: VerifiablePresentation,
    ledger,
    expected_audience: str,
    now: int,
    *,
    holder_doc=None,
) -> VerificationReport:
    """Verify a presentation end to end; failures are report fields, never raised.

    The holder key comes from ``holder_doc`` when the verifier already has it,
    otherwise from the ledger.
    """
    report = VerificationReport()
    if holder_doc is None:
        try:
            holder_doc = ledger.get_did(vp.holder_did)
        except SsiError as exc:
            report.problems.append(f"holder unresolvable: {exc}")
    holder_ok = holder_doc is not None and str(holder_doc.did) == vp.holder_did
    holder_ok = holder_ok and verify(
        holder_doc.verification_key, vp.signing_payload(), vp.holder_signature
    )
    sig_ok = issuer_ok = digests_ok = nonrev_ok = True
    if not vp.disclosed:
        sig_ok = False
    proofs = {p.cid: p for p in vp.nonrev}
    for item in vp.disclosed:
        vc = item.credential
        sub = VerificationReport()
        _issuer_status(vc, ledger, sub)
        sig_ok &= bool(sub.signature_ok)
        issuer_ok &= bool(sub.issuer_known)
        report.problems.extend(sub.problems)
        committed = set(vc.claim_digests)
        if not all(c.digest() in committed for c in item.claims):
            digests_ok = False
            report.problems.append(f"disclosed claim not committed in {vc.cid_text}")
        if vc.subject_did != vp.holder_did:
            holder_ok = False
            report.problems.append(f"holder is not the subject of {vc.cid_text}")
        if not _check_nonrev(vc, proofs.get(vc.cid), ledger):
            nonrev_ok = False
            report.problems.append(f"no valid non-revocation proof for {vc.cid_text}")
    report.signature_ok = sig_ok
    report.issuer_known = issuer_ok
    report.digests_ok = digests_ok
    report.not_revoked = nonrev_ok
    report.holder_ok = holder_ok
    report.audience_ok = vp.audience_did == str(expected_audience)
    report.expired = vp.expires_at is not None and now >= vp.expires_at
    return report
