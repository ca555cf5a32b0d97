import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssi_ehr.crypto import generate_keypair, hash_data, verify
from ssi_ehr.errors import (
    DidKeyMismatch,
    DuplicateDid,
    ExpiredCertificate,
    IntegrityMismatch,
    InvalidCertificate,
    NonMonotoneSequence,
    RoleRejected,
    SignatureMismatch,
    Unauthorized,
    UnauthorizedChannel,
    UnknownKey,
)
from ssi_ehr.flows import SIM_EPOCH
from ssi_ehr.identity import DidKind, create_did
from ssi_ehr.ledger import (
    CertificateRequest,
    EmergencyOutcome,
    EmergencyRecord,
    Ledger,
    LedgerIdentity,
    Role,
)

NOW = SIM_EPOCH

# Independent copy of the permission table, as (role, channel) -> {"read", "write"}
TABLE = {
    ("Patient", "dids"): {"read", "write"},
    ("Practitioner", "dids"): {"read", "write"},
    ("Laboratory", "dids"): {"read", "write"},
    ("Admin", "dids"): {"read", "write"},
    ("MSP", "dids"): {"read"},
    ("Patient", "backups"): {"write"},
    ("MSP", "backups"): {"read"},
    ("Patient", "registries"): {"read"},
    ("Practitioner", "registries"): {"read", "write"},
    ("Laboratory", "registries"): {"read", "write"},
    ("Admin", "registries"): {"read"},
    ("MSP", "registries"): {"read"},
    ("Admin", "security"): {"read"},
    ("MSP", "security"): {"write"},
}


def enroll(ca, msp, ledger, role_claim, *, register=True, handle=None):
    kp = generate_keypair()
    did, doc = create_did(DidKind.ANYWISE, kp, "mediator://cloud-agent", NOW)
    csr = CertificateRequest(doc, kp.public_key, role_claim, handle).signed(kp)
    cert = ca.issue_certificate(csr, NOW)
    auth = msp.authorize(cert, NOW)
    if register:
        ledger.put_did(auth.identity, did, doc)
    return kp, doc, cert, auth


class TestCertificates:
    def test_well_formed_csr(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, cert, auth = enroll(ca, msp, ledger, "Patient", handle="passport:1")
        assert verify(ca.public_key, cert.signing_payload(), cert.ca_signature)
        assert cert.subject_did == str(doc.did)
        assert ca.lookup_identity("passport:1") == str(doc.did)

    def test_csr_signed_with_other_key(self, ledger_env):
        ca, *_ = ledger_env
        kp = generate_keypair()
        _, doc = create_did(DidKind.ANYWISE, kp, "m", NOW)
        csr = CertificateRequest(doc, kp.public_key, "Patient").signed(generate_keypair())
        with pytest.raises(SignatureMismatch):
            ca.issue_certificate(csr, NOW)

    def test_csr_key_not_in_document(self, ledger_env):
        ca, *_ = ledger_env
        kp, other = generate_keypair(), generate_keypair()
        _, doc = create_did(DidKind.ANYWISE, kp, "m", NOW)
        csr = CertificateRequest(doc, other.public_key, "Patient").signed(other)
        with pytest.raises(DidKeyMismatch):
            ca.issue_certificate(csr, NOW)

    @pytest.mark.parametrize(
        "role,channels",
        [
            ("Patient", ["dids", "backups", "registries"]),
            ("Practitioner", ["dids", "registries"]),
            ("Laboratory", ["dids", "registries"]),
            ("Admin", ["dids", "registries", "security"]),
        ],
    )
    def test_channel_assignment(self, ledger_env, role, channels):
        ca, msp, ledger, _ = ledger_env
        *_, auth = enroll(ca, msp, ledger, role)
        assert auth.role.value == role and auth.channels == channels

    def test_tampered_certificate(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, _, cert, _ = enroll(ca, msp, ledger, "Patient")
        with pytest.raises(InvalidCertificate):
            msp.authorize(replace(cert, role_claim="Admin"), NOW)

    def test_expired_certificate(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, _, cert, _ = enroll(ca, msp, ledger, "Patient")
        with pytest.raises(ExpiredCertificate):
            msp.authorize(cert, cert.expires_at)

    @pytest.mark.parametrize("claim", ["foreign patient", "MSP", "patient"])
    def test_unknown_role_claim_rejected(self, ledger_env, claim):
        ca, msp, ledger, _ = ledger_env
        with pytest.raises(RoleRejected):
            enroll(ca, msp, ledger, claim)

    def test_role_table_is_extensible(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        msp.role_map["foreign patient"] = Role.PATIENT
        *_, auth = enroll(ca, msp, ledger, "foreign patient")
        assert auth.role is Role.PATIENT

    def test_unminted_identity_refused(self, ledger_env):
        _, _, ledger, _ = ledger_env
        forged = LedgerIdentity("did:peer:nobody", Role.ADMIN)
        with pytest.raises(Unauthorized):
            ledger.submit_tx(forged, "dids", "put", {"did:peer:nobody/x": 1})


class TestChannels:
    def test_write_then_query(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, _, auth = enroll(ca, msp, ledger, "Practitioner")
        key = f"{doc.did}/note"
        ledger.submit_tx(auth.identity, "registries", "note", {key: "v"})
        assert ledger.query("registries", key) == "v"

    def test_lab_cannot_write_security(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, _, auth = enroll(ca, msp, ledger, "Laboratory")
        with pytest.raises(UnauthorizedChannel):
            ledger.submit_tx(auth.identity, "security", "x", {f"{doc.did}/k": 1})

    def test_write_own_enforced(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, _, _, auth = enroll(ca, msp, ledger, "Practitioner")
        with pytest.raises(UnauthorizedChannel):
            ledger.submit_tx(auth.identity, "registries", "x", {"did:peer:someone-else/k": 1})

    def test_unknown_key(self, ledger_env):
        _, _, ledger, _ = ledger_env
        with pytest.raises(UnknownKey):
            ledger.query("dids", "missing")

    def test_private_channel_needs_reader(self, ledger_env):
        _, _, ledger, _ = ledger_env
        with pytest.raises(UnauthorizedChannel):
            ledger.query("backups", "anything")

    def test_authorization_fuzz(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        ids = {}
        for role in ("Patient", "Practitioner", "Laboratory", "Admin"):
            _, doc, _, auth = enroll(ca, msp, ledger, role)
            ids[role] = auth.identity
        ids["MSP"] = msp.identity
        rng = random.Random(1000)
        channels = ["dids", "backups", "registries", "security"]
        for n in range(1000):
            role = rng.choice(sorted(ids))
            channel = rng.choice(channels)
            op = rng.choice(["read", "write"])
            identity = ids[role]
            allowed = op in TABLE.get((role, channel), set())
            key = f"{identity.did}/fuzz/{n}"
            try:
                if op == "write":
                    ledger.submit_tx(identity, channel, "fuzz", {key: n})
                else:
                    try:
                        ledger.query(channel, key, identity)
                    except UnknownKey:
                        pass
                granted = True
            except UnauthorizedChannel:
                granted = False
            assert granted == allowed, (role, channel, op)


class TestDidRegistry:
    def test_put_get(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, _, _ = enroll(ca, msp, ledger, "Patient")
        assert ledger.get_did(doc.did) == doc

    def test_duplicate(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, _, auth = enroll(ca, msp, ledger, "Patient")
        with pytest.raises(DuplicateDid):
            ledger.put_did(auth.identity, doc.did, doc)

    def test_document_must_hash_to_did(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, _, auth = enroll(ca, msp, ledger, "Patient", register=False)
        bad = replace(doc, mediator_endpoint="mediator://evil")
        with pytest.raises(IntegrityMismatch):
            ledger.put_did(auth.identity, doc.did, bad)

    def test_only_controller_registers(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, _, _, auth = enroll(ca, msp, ledger, "Patient")
        _, doc2, _, _ = enroll(ca, msp, ledger, "Patient", register=False)
        with pytest.raises(UnauthorizedChannel):
            ledger.put_did(auth.identity, doc2.did, doc2)


class TestBackupsAndSecurity:
    def test_monotone_backups(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        _, doc, _, auth = enroll(ca, msp, ledger, "Patient")
        ledger.anchor_backup_hash(auth.identity, hash_data(b"one"), 1)
        ledger.anchor_backup_hash(auth.identity, hash_data(b"two"), 2)
        assert ledger.get_backup_hash(msp.identity, str(doc.did), 1) == (1, hash_data(b"one").bytes)
        assert ledger.get_backup_hash(msp.identity, str(doc.did)) == (2, hash_data(b"two").bytes)
        with pytest.raises(NonMonotoneSequence):
            ledger.anchor_backup_hash(auth.identity, hash_data(b"old"), 1)

    def test_only_patients_anchor_backups(self, ledger_env):
        ca, msp, ledger, _ = ledger_env
        *_, auth = enroll(ca, msp, ledger, "Practitioner")
        with pytest.raises(UnauthorizedChannel):
            ledger.anchor_backup_hash(auth.identity, hash_data(b"x"), 1)

    def test_emergency_records_append_only_in_order(self, ledger_env):
        ca, msp, ledger, clock = ledger_env
        *_, admin = enroll(ca, msp, ledger, "Admin")
        *_, doctor = enroll(ca, msp, ledger, "Practitioner")
        recs = [
            EmergencyRecord("did:peer:p", "did:peer:d", "msp", None, NOW + i, outcome)
            for i, outcome in enumerate(EmergencyOutcome)
        ]
        for rec in recs:
            ledger.record_emergency_access(msp.identity, rec)
        assert ledger.emergency_records(admin.identity) == recs
        with pytest.raises(Unauthorized):
            ledger.record_emergency_access(doctor.identity, recs[0])
        with pytest.raises(UnauthorizedChannel):
            ledger.emergency_records(doctor.identity)


class TestReplay:
    def test_replay_and_export_roundtrip(self, clinic):
        ledger = clinic.ledger
        assert ledger.verify_replay()
        again = Ledger.import_json(ledger.export_json(), clinic.msp, clinic.clock)
        assert again.export_json() == ledger.export_json()
        assert again.tx_count() == ledger.tx_count()

    def test_import_detects_tampered_state(self, clinic):
        from ssi_ehr.encoding import canonical_json, load_json

        snap = load_json(clinic.ledger.export_json())
        key = next(iter(snap["channels"]["dids"]["state"]))
        snap["channels"]["dids"]["state"][key] = {"forged": True}
        with pytest.raises(IntegrityMismatch):
            Ledger.import_json(canonical_json(snap))

    def test_heights_are_global_order(self, clinic):
        heights = sorted(
            tx.block_height for ch in clinic.ledger.channels.values() for tx in ch.tx_log
        )
        assert heights == list(range(clinic.ledger.tx_count()))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1000)), max_size=40))
    def test_replay_property(self, writes):
        from ssi_ehr.flows import World, flow_onboard

        world = World(seed=0)
        w = world.wallet("p")
        flow_onboard(world, w, "Practitioner")
        for k, v in writes:
            world.ledger.submit_tx(w.ledger_identity, "registries", "w", {f"{w.anywise_did}/{k}": v})
        assert world.ledger.verify_replay()
        state = world.ledger.replay_state("registries")
        assert state == world.ledger.channels["registries"].state
