"""End-to-end protocols over wallets, mediator, ledger, credentials and registries.

Every flow takes the ``World`` it runs in (clock, entropy, CA/MSP, ledger,
mediator, wallets), records its steps as ``(actor, action, result)`` triples,
and raises ``SsiError`` subclasses on failure. With a seeded world, the same
sequence of flows yields the same steps byte for byte.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from ssi_ehr.agents import (
    ANYWISE_ALIAS,
    Connection,
    Envelope,
    Mediator,
    MediatorNotice,
    Wallet,
    backup_wallet,
    open_backup,
    pack_envelope,
    restore_wallet,
    unpack_envelope,
)
from ssi_ehr.credentials import (
    VerifiableCredential,
    VerifiablePresentation,
    create_vp,
    issue_vc,
    verify_vc,
    verify_vp,
)
from ssi_ehr.crypto import (
    Entropy,
    KeyShares,
    combine_key,
    generate_keypair,
    keypair_from_private,
    sign,
    split_key,
    verify,
)
from ssi_ehr.encoding import b58, canonical_json, load_json, unb58
from ssi_ehr.errors import (
    AuthenticationError,
    ChallengeFailure,
    DuplicateAlias,
    MalformedPayload,
    MissingShare,
    NoContacts,
    NotFound,
    RegistryUnavailable,
    SsiError,
    Unauthorized,
    UnknownConnection,
    VerificationFailed,
)
from ssi_ehr.identity import DidKind, create_did, make_invitation, parse_invitation
from ssi_ehr.ledger import (
    CertificateAuthority,
    CertificateRequest,
    EmergencyOutcome,
    EmergencyRecord,
    Ledger,
    MembershipService,
    Role,
)
from ssi_ehr.revocation import init_registry, revoke_credential

SIM_EPOCH = 1_700_000_000
CONTACT_TIMEOUT = 1


class SimClock:
    """Logical clock in whole seconds; only moves when told to."""

    def __init__(self, start: int = SIM_EPOCH):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance(self, seconds: int = 1) -> int:
        self._now += int(seconds)
        return self._now


class WallClock:
    def now(self) -> int:
        return int(time.time())

    def advance(self, seconds: int = 1) -> int:
        return self.now()


@dataclass
class TrustedContactSet:
    """What the MSP keeps for a patient's recovery and emergency loop."""

    patient_did: str
    contacts: list[str]
    registered_with_msp: bool = True
    share_msp: bytes | None = None
    share_list: bool = False


@dataclass
class FlowOutcome:
    flow_name: str
    steps: list[tuple[str, str, str]] = field(default_factory=list)
    success: bool = False
    data: dict[str, Any] = field(default_factory=dict)

    def step(self, actor: str, action: str, result: Any = "ok") -> None:
        self.steps.append((actor, action, str(result)))

    def to_dict(self) -> dict:
        return {
            "flow": self.flow_name,
            "success": self.success,
            "steps": [list(s) for s in self.steps],
            "data": _jsonable(self.data),
        }


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, bytes):
        return b58(obj)
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    return obj


class World:
    """One simulated deployment: a CA/MSP pair, the ledger, one shared mediator."""

    def __init__(self, seed: int | None = None, clock=None):
        self.seed = seed
        self.entropy = Entropy(seed)
        self.clock = clock if clock is not None else SimClock()
        self.ca = CertificateAuthority(entropy=self.entropy)
        self.msp = MembershipService(self.ca)
        self.ledger = Ledger(self.msp, self.clock)
        self.mediator = Mediator()
        self.wallets: dict[str, Wallet] = {}
        # last proof handed out per cid, i.e. what a holder has cached
        self.proof_cache: dict[bytes, Any] = {}
        # (party, share kind, patient DID, context) for every key-share hand-over
        self.custody: list[tuple[str, str, str, str]] = []

    def now(self) -> int:
        return self.clock.now()

    def wallet(self, name: str) -> Wallet:
        if name not in self.wallets:
            self.wallets[name] = Wallet(name)
        return self.wallets[name]

    def wallet_by_did(self, did: str) -> Wallet:
        for w in self.wallets.values():
            if w.anywise_did == did:
                return w
        raise NotFound(f"no wallet controls {did}")

    def prove(self, registry_id: bytes, cid: bytes):
        """Witness service: route a proof request to the issuing wallet's registry.

        Once a credential leaves the active set the holder can only offer the
        proof it cached earlier, which verifiers then reject as stale.
        """
        rid = b58(registry_id)
        for w in self.wallets.values():
            registry = w.registries.get(rid)
            if registry is None:
                continue
            if cid in registry:
                proof = registry.prove(cid)
                self.proof_cache[cid] = proof
                return proof
            if cid in self.proof_cache:
                return self.proof_cache[cid]
            return registry.prove(cid)
        raise RegistryUnavailable(f"no issuer holds registry {rid}")

    def hand_share(self, party: str, kind: str, patient_did: str, context: str = "custody") -> None:
        """Log a share transfer; ``context`` is custody, patient or emergency-release."""
        self.custody.append((party, kind, patient_did, context))

    def share_violations(self) -> list[str]:
        """Parties that held both shares of one key outside the permitted contexts.

        Holding both is allowed for the patient itself (recovery) and for the
        doctor at emergency release time.
        """
        held: dict[tuple[str, str], set[str]] = {}
        exempt: dict[tuple[str, str], bool] = {}
        for party, kind, patient, context in self.custody:
            key = (party, patient)
            held.setdefault(key, set()).add(kind)
            exempt[key] = exempt.get(key, True) and context != "custody"
        return sorted({party for (party, patient), kinds in held.items()
                       if len(kinds) > 1 and not exempt[(party, patient)]})


# -- messaging helpers ----------------------------------------------------------------


def link(a: Wallet, b: Wallet) -> tuple[str, str]:
    """Aliases of the connection between two wallets, as (a's alias, b's alias)."""
    for alias_a, conn_a in a.connections.items():
        alias_b = b.connections.by_did.get(conn_a.their_did)
        conn_b = b.connections.get(alias_b) if alias_b is not None else None
        if conn_b is not None and conn_b.my_did == conn_a.their_did and conn_b.their_did == conn_a.my_did:
            return alias_a, alias_b
    raise UnknownConnection(f"{a.label!r} and {b.label!r} are not connected")


def send(world: World, wallet: Wallet, alias: str, message: dict, include_doc: bool = False) -> Envelope:
    env = pack_envelope(wallet, alias, message, entropy=world.entropy, include_doc=include_doc)
    world.mediator.deliver(env)
    return env


def receive(world: World, wallet: Wallet, alias: str) -> list[dict]:
    """Pick up everything queued for a connection; notices land in ``wallet.notices``."""
    conn = wallet.connection(alias)
    messages = []
    for item in world.mediator.pickup(conn.my_did):
        if isinstance(item, MediatorNotice):
            wallet.notices.append({"kind": item.kind, **item.body})
        else:
            messages.append(unpack_envelope(wallet, item))
    return messages


def collect_notices(world: World, wallet: Wallet) -> list[dict]:
    for conn in wallet.connections.values():
        for item in world.mediator.pickup(conn.my_did):
            if isinstance(item, MediatorNotice):
                wallet.notices.append({"kind": item.kind, **item.body})
    return wallet.notices


def _expect(messages: list[dict], kind: str) -> dict:
    for m in messages:
        if m.get("type") == kind:
            return m
    raise MalformedPayload(f"expected a {kind!r} message, got {[m.get('type') for m in messages]}")


# -- certificate creation and authorization ---------------------------------------------


def flow_onboard(
    world: World, wallet: Wallet, role_claim: str, identity_handle: str | None = None
) -> FlowOutcome:
    out = FlowOutcome("onboard")
    now = world.now()
    me = wallet.label
    world.mediator.register_agent(me)
    if wallet.anywise_did is None:
        keypair = generate_keypair(world.entropy)
        did, doc = create_did(DidKind.ANYWISE, keypair, world.mediator.endpoint, now)
        wallet.add_did(ANYWISE_ALIAS, keypair, doc)
        out.step(me, "create_anywise_did", did)
    keypair = wallet.anywise_keypair()
    doc = wallet.dids[ANYWISE_ALIAS]
    csr = CertificateRequest(doc, keypair.public_key, role_claim, identity_handle).signed(keypair)
    cert = world.ca.issue_certificate(csr, now)
    out.step("ca", "issue_certificate", f"serial={cert.serial}")
    auth = world.msp.authorize(cert, now)
    out.step("msp", "authorize", f"{auth.role.value}:{','.join(auth.channels)}")
    tx = world.ledger.put_did(auth.identity, doc.did, doc)
    out.step(me, "put_did", f"height={tx.block_height}")
    wallet.certificate = cert
    wallet.role = auth.role
    wallet.channels = list(auth.channels)
    wallet.ledger_identity = auth.identity
    wallet.identity_handle = identity_handle
    if str(doc.did) not in world.mediator.grants:
        world.mediator.request_mediation(str(doc.did), agent=me, now=now)
        out.step(me, "request_mediation", "granted")
    if auth.role in (Role.PRACTITIONER, Role.LABORATORY) and not wallet.registries:
        registry, state = init_registry(
            wallet, ledger=world.ledger, identity=auth.identity, entropy=world.entropy
        )
        out.step(me, "init_registry", f"epoch={state.epoch}")
    out.success = True
    out.data = {"did": str(doc.did), "role": auth.role.value, "channels": auth.channels}
    return out


# -- mutual authentication ---------------------------------------------------------------


def _challenge_payload(nonce: bytes, challenger_did: str, prover_did: str) -> bytes:
    return canonical_json(
        {"nonce": b58(nonce), "challenger": challenger_did, "prover": prover_did}
    )


def _authenticate_peer(
    world: World, out: FlowOutcome, verifier: Wallet, v_alias: str, prover: Wallet, p_alias: str
) -> str:
    """Challenge the prover to sign with its ledger-registered anywise key."""
    v_conn = verifier.connection(v_alias)
    nonce = world.entropy.bytes(16)
    send(world, verifier, v_alias, {"type": "auth/challenge", "nonce": b58(nonce)})
    out.step(verifier.label, "send_challenge")
    challenge = _expect(receive(world, prover, p_alias), "auth/challenge")
    p_conn = prover.connection(p_alias)
    payload = _challenge_payload(unb58(challenge["nonce"]), p_conn.their_did, p_conn.my_did)
    answer = {
        "type": "auth/response",
        "anywise_did": prover.anywise_did,
        "signature": b58(sign(prover.anywise_keypair().private_key, payload)),
    }
    send(world, prover, p_alias, answer)
    out.step(prover.label, "answer_challenge")
    response = _expect(receive(world, verifier, v_alias), "auth/response")
    try:
        doc = world.ledger.get_did(response["anywise_did"])
    except SsiError as exc:
        raise ChallengeFailure(f"peer anywise DID not resolvable: {exc}") from exc
    expected = _challenge_payload(nonce, v_conn.my_did, v_conn.their_did)
    if not verify(doc.verification_key, expected, unb58(response["signature"])):
        raise ChallengeFailure("challenge signature does not match the ledger key")
    v_conn.authenticated_peer = True
    v_conn.peer_anywise = response["anywise_did"]
    out.step(verifier.label, "verify_challenge", "authenticated")
    return response["anywise_did"]


def flow_connect(
    world: World,
    inviter: Wallet,
    responder: Wallet,
    *,
    inviter_alias: str,
    responder_alias: str,
    authenticate_inviter: bool = False,
) -> FlowOutcome:
    """QR invitation, response through the mediator, then ledger-backed challenge.

    The inviter always authenticates the responder's anywise identity. The
    responder authenticates the inviter only when ``authenticate_inviter`` is
    set; otherwise the inviter's anywise DID never leaves its wallet.
    """
    out = FlowOutcome("connect")
    now = world.now()
    mediator = world.mediator
    inv = make_invitation(inviter, inviter_alias, mediator, entropy=world.entropy, now=now)
    qr = inv.to_bytes()
    out.step(inviter.label, "show_qr", inv.inviter_did)

    if responder.alias_in_use(responder_alias):
        inviter.drop_connection(inviter_alias)
        raise DuplicateAlias(f"alias {responder_alias!r} already used in {responder.label!r}")
    scanned = parse_invitation(qr)
    keypair = generate_keypair(world.entropy)
    did, doc = create_did(DidKind.PAIRWISE, keypair, mediator.endpoint, now)
    mediator.request_mediation(str(did), agent=responder.label, now=now)
    responder.add_did(responder_alias, keypair, doc)
    responder.connections[responder_alias] = Connection(
        responder_alias, str(did), scanned.inviter_did, scanned.inviter_doc
    )
    send(world, responder, responder_alias, {"type": "connection/response", "nonce": b58(scanned.nonce)}, include_doc=True)
    out.step(responder.label, "scan_and_respond", str(did))

    for item in mediator.pickup(inv.inviter_did):
        if not isinstance(item, Envelope) or item.from_doc is None:
            continue
        if str(item.from_doc.did) != item.from_did or not item.from_doc.is_bound():
            raise AuthenticationError("connection response carries a mismatched document")
        alias = inviter.pending_invitations.pop(item.to_did)
        inviter.connections[alias] = Connection(alias, item.to_did, item.from_did, item.from_doc)
        message = unpack_envelope(inviter, item)
        if message.get("type") != "connection/response" or unb58(message["nonce"]) != inv.nonce:
            raise AuthenticationError("connection response does not answer our invitation")
        out.step(inviter.label, "accept_response", item.from_did)
    if inviter_alias not in inviter.connections:
        raise UnknownConnection("no connection response reached the inviter")

    try:
        peer = _authenticate_peer(world, out, inviter, inviter_alias, responder, responder_alias)
        out.data["responder_anywise"] = peer
        if authenticate_inviter:
            peer = _authenticate_peer(world, out, responder, responder_alias, inviter, inviter_alias)
            out.data["inviter_anywise"] = peer
    except SsiError:
        inviter.drop_connection(inviter_alias)
        responder.drop_connection(responder_alias)
        out.step(inviter.label, "abort_connection", "dropped")
        raise
    out.success = True
    out.data.update(inviter_alias=inviter_alias, responder_alias=responder_alias)
    return out


# -- credential issuance ---------------------------------------------------------------------


def _deliver_credential(world: World, out: FlowOutcome, issuer: Wallet, holder: Wallet, vc) -> None:
    i_alias, h_alias = link(issuer, holder)
    send(world, issuer, i_alias, {"type": "credential/issue", "vc": vc.to_dict()})
    out.step(issuer.label, "send_credential", vc.cid_text)
    received = VerifiableCredential.from_dict(
        _expect(receive(world, holder, h_alias), "credential/issue")["vc"]
    )
    report = verify_vc(received, world.ledger, world.now(), witness=world)
    if not report.valid:
        raise VerificationFailed(f"holder rejected credential: {report.problems}")
    holder.store_credential(received)
    out.step(holder.label, "store_credential", received.cid_text)


def flow_prescription(
    world: World, doctor: Wallet, patient: Wallet, rx_claims: Mapping[str, str]
) -> FlowOutcome:
    out = FlowOutcome("prescription")
    vc = issue_vc(
        doctor, patient.anywise_did, rx_claims, ledger=world.ledger, now=world.now(), entropy=world.entropy
    )
    out.step(doctor.label, "issue_vc", vc.cid_text)
    _deliver_credential(world, out, doctor, patient, vc)
    out.success = True
    out.data = {"cid": vc.cid_text}
    return out


def flow_lab_result(
    world: World,
    lab: Wallet,
    patient: Wallet,
    prescription_cid: str,
    result_claims: Mapping[str, str],
) -> FlowOutcome:
    """Patient shows the prescription; the lab verifies it before issuing results."""
    out = FlowOutcome("lab_result")
    p_alias, l_alias = link(patient, lab)
    rx = patient.credential(prescription_cid)
    lab_did = patient.connection(p_alias).their_did
    vp = create_vp(
        patient, [rx.cid_text], [c.name for c in rx.claims], lab_did, None,
        now=world.now(), witness=world, entropy=world.entropy,
    )
    send(world, patient, p_alias, {"type": "presentation", "vp": vp.to_dict()})
    out.step(patient.label, "present_prescription", rx.cid_text)
    shown = VerifiablePresentation.from_dict(
        _expect(receive(world, lab, l_alias), "presentation")["vp"]
    )
    report = verify_vp(shown, world.ledger, lab.connection(l_alias).my_did, world.now())
    out.data["prescription_report"] = report.to_dict()
    if not report.valid:
        out.step(lab.label, "verify_prescription", "refused")
        raise VerificationFailed(f"lab refuses prescription: {report.problems}")
    out.step(lab.label, "verify_prescription", "valid")
    claims = [*dict(result_claims).items(), ("parent_cid", rx.cid_text)]
    vc = issue_vc(lab, patient.anywise_did, claims, ledger=world.ledger, now=world.now(), entropy=world.entropy)
    out.step(lab.label, "issue_vc", vc.cid_text)
    _deliver_credential(world, out, lab, patient, vc)
    out.success = True
    out.data["cid"] = vc.cid_text
    return out


def flow_revoke_vc(world: World, issuer: Wallet, cid: str) -> FlowOutcome:
    out = FlowOutcome("revoke_vc")
    raw = unb58(cid)
    registry = next((r for r in issuer.registries.values() if raw in r), None)
    if registry is None:
        raise NotFound(f"{issuer.label!r} has no active credential {cid}")
    state = revoke_credential(
        registry, raw, issuer.anywise_keypair(), ledger=world.ledger, identity=issuer.ledger_identity
    )
    out.step(issuer.label, "revoke_credential", f"epoch={state.epoch}")
    out.success = True
    out.data = {"epoch": state.epoch}
    return out


# -- information sharing ------------------------------------------------------------------------


def _select_credentials(patient: Wallet, claim_names: Iterable[str], cids) -> list[str]:
    if cids:
        return [patient.credential(c).cid_text for c in cids]
    wanted = set(claim_names)
    return [vc.cid_text for vc in patient.credentials.values() if wanted & {c.name for c in vc.claims}]


def flow_share_local(
    world: World,
    patient: Wallet,
    practitioner: Wallet,
    claim_names: list[str],
    *,
    cids: list[str] | None = None,
    ttl: int | None = None,
    scan_delay: int = 0,
) -> FlowOutcome:
    """In-person sharing: the VP travels as a QR payload, never via the mediator."""
    out = FlowOutcome("share_local")
    p_alias, d_alias = link(patient, practitioner)
    audience = patient.connection(p_alias).their_did
    chosen = _select_credentials(patient, claim_names, cids)
    vp = create_vp(
        patient, chosen, claim_names, audience, ttl, now=world.now(), witness=world, entropy=world.entropy
    )
    qr = vp.to_bytes()
    out.step(patient.label, "show_vp_qr", vp.vp_id_text)
    if scan_delay:
        world.clock.advance(scan_delay)
    scanned = VerifiablePresentation.from_dict(load_json(qr))
    report = verify_vp(scanned, world.ledger, practitioner.connection(d_alias).my_did, world.now())
    out.step(practitioner.label, "verify_vp", "valid" if report.valid else "invalid")
    out.success = report.valid
    out.data = {"vp_id": vp.vp_id_text, "report": report.to_dict()}
    return out


def flow_share_cloud(
    world: World,
    patient: Wallet,
    practitioner: Wallet,
    claim_names: list[str],
    ttl: int,
    *,
    cids: list[str] | None = None,
) -> FlowOutcome:
    """Remote sharing: host the VP at the mediator, grant timed access, notify."""
    out = FlowOutcome("share_cloud")
    p_alias, d_alias = link(patient, practitioner)
    grantee = patient.connection(p_alias).their_did
    chosen = _select_credentials(patient, claim_names, cids)
    vp = create_vp(
        patient, chosen, claim_names, grantee, ttl, now=world.now(), witness=world, entropy=world.entropy
    )
    vp_id = world.mediator.host_vp(vp, patient.anywise_did)
    out.step(patient.label, "host_vp", vp_id)
    world.mediator.grant_access(vp_id, grantee, ttl, owner_did=patient.anywise_did, now=world.now())
    out.step(patient.label, "grant_access", f"ttl={ttl}")
    send(world, patient, p_alias, {"type": "vp/access-granted", "vp_id": vp_id})
    granted = _expect(receive(world, practitioner, d_alias), "vp/access-granted")
    fetched = flow_fetch_shared(world, practitioner, patient, granted["vp_id"])
    out.steps.extend(fetched.steps)
    out.success = fetched.success
    out.data = {"vp_id": vp_id, "report": fetched.data["report"]}
    return out


def flow_fetch_shared(world: World, practitioner: Wallet, patient: Wallet, vp_id: str) -> FlowOutcome:
    out = FlowOutcome("fetch_shared")
    _, d_alias = link(patient, practitioner)
    conn = practitioner.connection(d_alias)
    vp = world.mediator.fetch_vp(vp_id, conn.my_did, world.now())
    out.step(practitioner.label, "fetch_vp", vp_id)
    report = verify_vp(vp, world.ledger, conn.my_did, world.now())
    out.step(practitioner.label, "verify_vp", "valid" if report.valid else "invalid")
    out.success = report.valid
    out.data = {"report": report.to_dict()}
    return out


def flow_revoke_access(world: World, patient: Wallet, practitioner: Wallet, vp_id: str) -> FlowOutcome:
    """Terminate a grant, remove the hosted VP, and let the grantee see the notice."""
    out = FlowOutcome("revoke_access")
    p_alias, _ = link(patient, practitioner)
    grantee = patient.connection(p_alias).their_did
    world.mediator.revoke_access(vp_id, grantee, owner_did=patient.anywise_did, now=world.now())
    out.step(patient.label, "revoke_access", vp_id)
    world.mediator.remove_vp(vp_id, owner_did=patient.anywise_did, now=world.now())
    out.step(patient.label, "remove_vp", vp_id)
    out.success = True
    return out


# -- recovery ------------------------------------------------------------------------------------


def flow_recovery_setup(
    world: World, patient: Wallet, contacts: list[Wallet], *, share_contact_list: bool = False
) -> FlowOutcome:
    """Create the backup key, split it between MSP and contacts, upload a first backup."""
    out = FlowOutcome("recovery_setup")
    if not contacts:
        raise NoContacts("recovery needs at least one trusted contact")
    did = patient.anywise_did
    contact_dids = []
    for c in contacts:
        if c.anywise_did is None:
            raise NotFound(f"contact {c.label!r} has no anywise DID")
        contact_dids.append(c.anywise_did)
    backup_keypair = generate_keypair(world.entropy)
    patient.backup_keypair = backup_keypair
    out.step(patient.label, "create_backup_keypair")
    shares = split_key(backup_keypair.private_key, world.entropy)
    world.msp.safekeeping[did] = TrustedContactSet(
        did, contact_dids, True, share_msp=shares.share_msp, share_list=share_contact_list
    )
    world.hand_share("msp", "msp", did)
    out.step(patient.label, "send_share_msp", f"contacts={len(contact_dids)}")
    for c in contacts:
        c.held_shares[did] = shares.share_contacts
        world.hand_share(c.label, "contacts", did)
        out.step(patient.label, "send_share_contact", c.label)
    seq, digest = backup_wallet(
        patient, world.mediator, backup_keypair, ledger=world.ledger, entropy=world.entropy
    )
    out.step(patient.label, "backup_wallet", f"seq={seq}")
    out.success = True
    out.data = {"sequence_no": seq, "digest": digest.hex(), "contacts": contact_dids}
    return out


def flow_backup(world: World, patient: Wallet) -> FlowOutcome:
    out = FlowOutcome("backup")
    if patient.backup_keypair is None:
        raise MissingShare("patient has not opted in to backups")
    seq, digest = backup_wallet(
        patient, world.mediator, patient.backup_keypair, ledger=world.ledger, entropy=world.entropy
    )
    out.step(patient.label, "backup_wallet", f"seq={seq}")
    out.success = True
    out.data = {"sequence_no": seq, "digest": digest.hex()}
    return out


def flow_register_contacts(world: World, patient: Wallet, contacts: list[Wallet]) -> FlowOutcome:
    """Contact list only (no backup): enables the emergency contact-list branch."""
    out = FlowOutcome("register_contacts")
    if not contacts:
        raise NoContacts("no contacts given")
    did = patient.anywise_did
    world.msp.safekeeping[did] = TrustedContactSet(
        did, [c.anywise_did for c in contacts], True, share_msp=None, share_list=True
    )
    out.step(patient.label, "register_contacts", f"contacts={len(contacts)}")
    out.success = True
    return out


def flow_recover_wallet(
    world: World, label: str, identity_handle: str, contact: Wallet
) -> tuple[FlowOutcome, Wallet]:
    """Rebuild a destroyed wallet from both key shares and the anchored backup.

    The MSP releases its share after identity proofing (modelled by the CA's
    identity match), the contact supplies the other, and the backup must hash
    to the ledger anchor before decryption. The restored anywise key then
    answers an MSP nonce and is re-certified. Connections are not restored.
    """
    out = FlowOutcome("recover_wallet")
    msp, now = world.msp, world.now()
    patient_did = world.ca.lookup_identity(identity_handle)
    if patient_did is None:
        raise NotFound("identity proofing failed: no DID matches this identity")
    profile = msp.safekeeping.get(patient_did)
    if profile is None or profile.share_msp is None:
        raise MissingShare("MSP holds no key share for this patient")
    seq, anchored = world.ledger.get_backup_hash(msp.identity, patient_did)
    nonce = world.entropy.bytes(16)
    world.hand_share(label, "msp", patient_did, "patient")
    out.step("msp", "release_share", f"seq={seq}")
    share_contacts = contact.held_shares.get(patient_did)
    if share_contacts is None:
        raise MissingShare(f"{contact.label!r} holds no share for this patient")
    world.hand_share(label, "contacts", patient_did, "patient")
    out.step(contact.label, "release_share")
    private = combine_key(KeyShares(profile.share_msp, share_contacts))
    backup_keypair = keypair_from_private(private)
    blob = world.mediator.fetch_backup(patient_did, seq, requester=patient_did, now=now)
    payload = open_backup(blob, anchored, backup_keypair, patient_did)
    out.step(label, "open_backup", f"seq={seq}")
    restored = restore_wallet(label, payload)
    restored.backup_keypair = backup_keypair
    restored.backup_seq = seq

    keypair = restored.anywise_keypair()
    doc = world.ledger.get_did(patient_did)
    answer = sign(keypair.private_key, b"recovery|" + nonce)
    if not verify(doc.verification_key, b"recovery|" + nonce, answer):
        raise ChallengeFailure("restored key does not control the registered DID")
    out.step("msp", "verify_recovery_challenge", "ok")
    csr = CertificateRequest(
        restored.dids[ANYWISE_ALIAS], keypair.public_key, restored.certificate.role_claim, identity_handle
    ).signed(keypair)
    cert = world.ca.issue_certificate(csr, now)
    auth = msp.authorize(cert, now)
    restored.certificate, restored.role = cert, auth.role
    restored.channels, restored.ledger_identity = list(auth.channels), auth.identity
    world.mediator.register_agent(label)
    out.step("ca", "reissue_certificate", f"serial={cert.serial}")
    world.wallets[label] = restored
    out.success = True
    out.data = {"credentials": sorted(restored.credentials), "connections": len(restored.connections)}
    return out, restored


# -- emergency loop -------------------------------------------------------------------------------


def flow_emergency_access(
    world: World, doctor: Wallet, patient_identity_ref: str, *, ping_budget: int | None = None
) -> FlowOutcome:
    """MSP-driven access for an unconscious patient; always leaves one audit record.

    (a) backup + key share on file: ping contacts in registration order until
        one acknowledges, record KeyReleased, then hand both shares and the
        backup location to the doctor, who decrypts the backup;
    (b) otherwise, if the patient allowed it, release the contact list;
    (c) otherwise deny.
    """
    out = FlowOutcome("emergency_access")
    msp, ledger = world.msp, world.ledger
    if doctor.role is not Role.PRACTITIONER:
        raise Unauthorized("only practitioners may start the emergency loop")
    out.step(doctor.label, "request_emergency", patient_identity_ref)
    patient_did = world.ca.lookup_identity(patient_identity_ref)
    profile = msp.safekeeping.get(patient_did) if patient_did else None

    def record(outcome: EmergencyOutcome, contact: str | None) -> None:
        rec = EmergencyRecord(patient_did, doctor.anywise_did, msp.msp_id, contact, world.now(), outcome)
        ledger.record_emergency_access(msp.identity, rec)
        out.step("msp", "record_emergency", outcome.value)

    anchor = None
    if profile is not None and profile.share_msp is not None:
        try:
            anchor = ledger.get_backup_hash(msp.identity, patient_did)
        except SsiError:
            anchor = None
    if anchor is not None:
        budget = len(profile.contacts) if ping_budget is None else ping_budget
        acked = None
        for contact_did in profile.contacts[:budget]:
            try:
                contact = world.wallet_by_did(contact_did)
            except NotFound:
                contact = None
            out.step("msp", "ping_contact", contact.label if contact else contact_did)
            if contact is not None and contact.emergency_available and patient_did in contact.held_shares:
                acked = contact
                out.step(contact.label, "ack", "share-ready")
                break
            world.clock.advance(CONTACT_TIMEOUT)
            out.step("msp", "ping_timeout", contact.label if contact else contact_did)
        if acked is not None:
            record(EmergencyOutcome.KEY_RELEASED, acked.anywise_did)
            seq, digest = anchor
            world.hand_share(doctor.label, "msp", patient_did, "emergency-release")
            out.step("msp", "release_share", f"seq={seq}")
            world.hand_share(doctor.label, "contacts", patient_did, "emergency-release")
            out.step(acked.label, "release_share", doctor.label)
            private = combine_key(KeyShares(profile.share_msp, acked.held_shares[patient_did]))
            backup_keypair = keypair_from_private(private)
            blob = world.mediator.fetch_backup(
                patient_did, seq, requester=doctor.anywise_did, now=world.now()
            )
            payload = open_backup(blob, digest, backup_keypair, patient_did)
            ehr = sorted(payload["credentials"])
            out.step(doctor.label, "decrypt_backup", f"credentials={len(ehr)}")
            out.success = True
            out.data = {
                "outcome": EmergencyOutcome.KEY_RELEASED.value,
                "contact_ack": acked.anywise_did,
                "credentials": ehr,
                "ehr": payload["credentials"],
            }
            return out
    if profile is not None and profile.share_list:
        record(EmergencyOutcome.CONTACT_LIST_RELEASED, None)
        out.success = True
        out.data = {"outcome": EmergencyOutcome.CONTACT_LIST_RELEASED.value, "contacts": list(profile.contacts)}
        return out
    record(EmergencyOutcome.DENIED, None)
    out.success = True
    out.data = {"outcome": EmergencyOutcome.DENIED.value}
    return out
