import pytest

from conftest import build_clinic
from ssi_ehr import flows
from ssi_ehr.agents import ANYWISE_ALIAS
from ssi_ehr.crypto import generate_keypair
from ssi_ehr.encoding import canonical_json
from ssi_ehr.errors import (
    AccessExpired,
    AccessRevoked,
    AuthenticationError,
    ChallengeFailure,
    DigestMismatch,
    DuplicateDid,
    NoContacts,
    Unauthorized,
    VerificationFailed,
)
from ssi_ehr.ledger import EmergencyRecord


def security_records(world):
    state = world.ledger.channels["security"].state
    return [EmergencyRecord.from_dict(state[k]) for k in sorted(state)]


# -- onboarding ---------------------------------------------------------------------


def test_onboard_twice_is_duplicate():
    world = flows.World(seed=5)
    w = world.wallet("p")
    flows.flow_onboard(world, w, "Patient")
    with pytest.raises(DuplicateDid):
        flows.flow_onboard(world, w, "Patient")


def test_onboard_lab_channels():
    world = flows.World(seed=5)
    out = flows.flow_onboard(world, world.wallet("lab"), "Laboratory")
    assert out.data["role"] == "Laboratory"
    assert set(out.data["channels"]) == {"dids", "registries"}
    assert world.wallet("lab").registries


def test_onboard_patient_publishes_did():
    world = flows.World(seed=5)
    out = flows.flow_onboard(world, world.wallet("p"), "Patient", "passport:p")
    assert world.ledger.has_did(out.data["did"])
    assert "backups" in out.data["channels"]
    assert world.ca.lookup_identity("passport:p") == out.data["did"]


# -- connections --------------------------------------------------------------------


def test_connect_symmetry(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    a, b = alice.connection("bob"), bob.connection("alice")
    assert a.my_did == b.their_did and a.their_did == b.my_did
    assert a.my_did != alice.anywise_did and b.my_did != bob.anywise_did


def test_connect_wrong_key_rejected():
    world = flows.World(seed=9)
    a, b = world.wallet("a"), world.wallet("b")
    flows.flow_onboard(world, a, "Patient")
    flows.flow_onboard(world, b, "Practitioner")
    # the responder's anywise DID now signs with a key the ledger does not know
    real = b.keys[b.anywise_did]
    b.keys[b.anywise_did] = generate_keypair(world.entropy)
    with pytest.raises(ChallengeFailure):
        flows.flow_connect(world, a, b, inviter_alias="b", responder_alias="a")
    assert a.connections == {} and b.connections == {}
    b.keys[b.anywise_did] = real


def test_inviter_anywise_not_disclosed_by_default():
    world = flows.World(seed=9)
    a, b = world.wallet("a"), world.wallet("b")
    flows.flow_onboard(world, a, "Patient")
    flows.flow_onboard(world, b, "Practitioner")
    out = flows.flow_connect(world, a, b, inviter_alias="b", responder_alias="a")
    assert out.data["responder_anywise"] == b.anywise_did
    assert "inviter_anywise" not in out.data
    text = canonical_json(b.to_dict()).decode() + canonical_json(out.to_dict()).decode()
    assert a.anywise_did not in text


def test_inviter_authenticated_on_request():
    world = flows.World(seed=9)
    a, b = world.wallet("a"), world.wallet("b")
    flows.flow_onboard(world, a, "Patient")
    flows.flow_onboard(world, b, "Practitioner")
    out = flows.flow_connect(world, a, b, inviter_alias="b", responder_alias="a", authenticate_inviter=True)
    assert out.data["inviter_anywise"] == a.anywise_did


def test_messages_flow_both_ways(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    flows.send(clinic, alice, "bob", {"type": "note", "n": 1})
    flows.send(clinic, bob, "alice", {"type": "note", "n": 2})
    assert flows.receive(clinic, bob, "alice") == [{"type": "note", "n": 1}]
    assert flows.receive(clinic, alice, "bob") == [{"type": "note", "n": 2}]


# -- credentials ----------------------------------------------------------------------


def test_prescription_lab_loop(clinic):
    alice, bob, lab = clinic.wallet("alice"), clinic.wallet("bob"), clinic.wallet("lab")
    rx = flows.flow_prescription(clinic, bob, alice, {"test": "CBC", "urgency": "routine"})
    res = flows.flow_lab_result(clinic, lab, alice, rx.data["cid"], {"hemoglobin": "13.5"})
    assert res.data["prescription_report"]["valid"]
    vc = alice.credential(res.data["cid"])
    assert vc.claim("parent_cid").value == rx.data["cid"]
    shared = flows.flow_share_local(clinic, alice, bob, ["hemoglobin"])
    assert shared.data["report"]["valid"]


def test_revoked_prescription_refused_by_lab(clinic):
    alice, bob, lab = clinic.wallet("alice"), clinic.wallet("bob"), clinic.wallet("lab")
    rx = flows.flow_prescription(clinic, bob, alice, {"test": "CBC"})
    # holder caches a proof before revocation
    flows.flow_share_local(clinic, alice, bob, ["test"])
    flows.flow_revoke_vc(clinic, bob, rx.data["cid"])
    with pytest.raises(VerificationFailed):
        flows.flow_lab_result(clinic, lab, alice, rx.data["cid"], {"hemoglobin": "13.5"})
    assert not any(c.name == "hemoglobin" for vc in alice.credentials.values() for c in vc.claims)


# -- sharing ----------------------------------------------------------------------------


def test_share_local_bypasses_mediator(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    flows.flow_prescription(clinic, bob, alice, {"blood_type": "B+", "allergy": "latex"})
    queues = {k: list(v) for k, v in clinic.mediator.queues.items()}
    out = flows.flow_share_local(clinic, alice, bob, ["blood_type"])
    report = out.data["report"]
    for key in ("signature_ok", "issuer_known", "not_revoked", "digests_ok", "holder_ok", "audience_ok"):
        assert report[key] is True, key
    assert report["valid"] and not report["expired"]
    assert {k: list(v) for k, v in clinic.mediator.queues.items()} == queues
    assert clinic.mediator.hosted == {}


def test_share_local_revoked_vc(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    rx = flows.flow_prescription(clinic, bob, alice, {"blood_type": "B+"})
    flows.flow_share_local(clinic, alice, bob, ["blood_type"])
    flows.flow_revoke_vc(clinic, bob, rx.data["cid"])
    out = flows.flow_share_local(clinic, alice, bob, ["blood_type"])
    assert out.data["report"]["not_revoked"] is False
    assert not out.success


def test_share_local_scan_after_ttl(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    flows.flow_prescription(clinic, bob, alice, {"blood_type": "B+"})
    out = flows.flow_share_local(clinic, alice, bob, ["blood_type"], ttl=30, scan_delay=31)
    assert out.data["report"]["expired"] is True and not out.success


def test_share_cloud_then_revoke(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    flows.flow_prescription(clinic, bob, alice, {"blood_type": "B+"})
    out = flows.flow_share_cloud(clinic, alice, bob, ["blood_type"], 3600)
    assert out.data["report"]["valid"]
    vp_id = out.data["vp_id"]
    assert flows.flow_fetch_shared(clinic, bob, alice, vp_id).success
    flows.flow_revoke_access(clinic, alice, bob, vp_id)
    with pytest.raises(AccessRevoked):
        flows.flow_fetch_shared(clinic, bob, alice, vp_id)
    notices = flows.collect_notices(clinic, bob)
    assert [n["kind"] for n in notices] == ["access-terminated"]
    assert notices[0]["vp_id"] == vp_id


def test_share_cloud_expiry(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    flows.flow_prescription(clinic, bob, alice, {"blood_type": "B+"})
    out = flows.flow_share_cloud(clinic, alice, bob, ["blood_type"], 60)
    clinic.clock.advance(61)
    with pytest.raises(AccessExpired):
        flows.flow_fetch_shared(clinic, bob, alice, out.data["vp_id"])


def test_share_cloud_discloses_only_requested(clinic):
    alice, bob = clinic.wallet("alice"), clinic.wallet("bob")
    flows.flow_prescription(clinic, bob, alice, {"blood_type": "B+", "hiv_status": "negative-xyz"})
    out = flows.flow_share_cloud(clinic, alice, bob, ["blood_type"], 60)
    hosted = clinic.mediator.hosted[out.data["vp_id"]].vp
    assert canonical_json(hosted.to_dict()).decode().count("negative-xyz") == 0


# -- recovery -----------------------------------------------------------------------------


def test_recovery_setup_two_contacts(clinic):
    alice = clinic.wallet("alice")
    carol, dave = clinic.wallet("carol"), clinic.wallet("dave")
    out = flows.flow_recovery_setup(clinic, alice, [carol, dave])
    did = alice.anywise_did
    assert carol.held_shares[did] == dave.held_shares[did]
    stored = clinic.msp.safekeeping[did]
    assert stored.contacts == [carol.anywise_did, dave.anywise_did]
    assert stored.registered_with_msp and stored.share_msp != carol.held_shares[did]
    assert out.data["sequence_no"] == 1
    seq, digest = clinic.ledger.get_backup_hash(clinic.msp.identity, did)
    assert (seq, digest.hex()) == (1, out.data["digest"])


def test_recovery_setup_needs_contacts(clinic):
    with pytest.raises(NoContacts):
        flows.flow_recovery_setup(clinic, clinic.wallet("alice"), [])


def _prepare_recovery(world):
    alice, bob = world.wallet("alice"), world.wallet("bob")
    flows.flow_prescription(world, bob, alice, {"blood_type": "AB+"})
    flows.flow_prescription(world, bob, alice, {"medication": "ibuprofen"})
    flows.flow_recovery_setup(world, alice, [world.wallet("carol")])
    return alice


def test_recover_wallet(clinic):
    alice = _prepare_recovery(clinic)
    before = {k: v.to_bytes() for k, v in alice.credentials.items()}
    del clinic.wallets["alice"]
    out, restored = flows.flow_recover_wallet(clinic, "alice", "passport:alice", clinic.wallet("carol"))
    assert {k: v.to_bytes() for k, v in restored.credentials.items()} == before
    assert restored.connections == {}
    assert restored.anywise_did == alice.anywise_did
    assert restored.dids[ANYWISE_ALIAS] == alice.dids[ANYWISE_ALIAS]
    assert clinic.wallet("alice") is restored
    assert restored.certificate.serial != alice.certificate.serial
    # recovered patient can reconnect and share again
    flows.flow_connect(clinic, restored, clinic.wallet("bob"), inviter_alias="bob2", responder_alias="alice2")
    assert flows.flow_share_local(clinic, restored, clinic.wallet("bob"), ["blood_type"]).success


def test_recover_corrupted_share(clinic):
    alice = _prepare_recovery(clinic)
    carol = clinic.wallet("carol")
    share = bytearray(carol.held_shares[alice.anywise_did])
    share[0] ^= 1
    carol.held_shares[alice.anywise_did] = bytes(share)
    with pytest.raises(AuthenticationError):
        flows.flow_recover_wallet(clinic, "alice2", "passport:alice", carol)


def test_recover_tampered_backup(clinic):
    alice = _prepare_recovery(clinic)
    key = (alice.anywise_did, 1)
    blob = bytearray(clinic.mediator.backups[key])
    blob[-1] ^= 1
    clinic.mediator.backups[key] = bytes(blob)
    with pytest.raises(DigestMismatch):
        flows.flow_recover_wallet(clinic, "alice2", "passport:alice", clinic.wallet("carol"))


def test_recover_uses_latest_backup(clinic):
    alice = _prepare_recovery(clinic)
    flows.flow_prescription(clinic, clinic.wallet("bob"), alice, {"note": "late"})
    assert flows.flow_backup(clinic, alice).data["sequence_no"] == 2
    _, restored = flows.flow_recover_wallet(clinic, "alice2", "passport:alice", clinic.wallet("carol"))
    assert len(restored.credentials) == 3


# -- emergency ------------------------------------------------------------------------------


def emergency_world(available):
    world = build_clinic(seed=4, contacts=("c1", "c2", "c3"))
    alice = world.wallet("alice")
    flows.flow_prescription(world, world.wallet("bob"), alice, {"blood_type": "O+", "allergy": "penicillin"})
    contacts = [world.wallet(n) for n in ("c1", "c2", "c3")]
    flows.flow_recovery_setup(world, alice, contacts)
    for c, ok in zip(contacts, available):
        c.emergency_available = ok
    return world


def test_emergency_second_contact_acks():
    world = emergency_world([False, True, True])
    start = world.now()
    out = flows.flow_emergency_access(world, world.wallet("bob"), "passport:alice")
    assert out.data["outcome"] == "KeyReleased"
    assert out.data["contact_ack"] == world.wallet("c2").anywise_did
    assert world.now() == start + flows.CONTACT_TIMEOUT
    recs = security_records(world)
    assert len(recs) == 1 and recs[0].contact_ack == world.wallet("c2").anywise_did
    actions = [s[1] for s in out.to_dict()["steps"]]
    assert actions.index("record_emergency") < actions.index("release_share")
    assert actions.count("ping_contact") == 2
    values = {c["value"] for vc in out.data["ehr"].values() for c in vc["claims"]}
    assert "penicillin" in values
    assert world.share_violations() == []


def test_emergency_ping_budget_escalates():
    world = emergency_world([False, True, True])
    out = flows.flow_emergency_access(world, world.wallet("bob"), "passport:alice", ping_budget=1)
    assert out.data["outcome"] == "Denied"
    assert len(security_records(world)) == 1


def test_emergency_contact_list_branch(clinic):
    alice = clinic.wallet("alice")
    flows.flow_register_contacts(clinic, alice, [clinic.wallet("carol")])
    out = flows.flow_emergency_access(clinic, clinic.wallet("bob"), "passport:alice")
    assert out.data == {"outcome": "ContactListReleased", "contacts": [clinic.wallet("carol").anywise_did]}
    assert [r.outcome.value for r in security_records(clinic)] == ["ContactListReleased"]


def test_emergency_denied(clinic):
    out = flows.flow_emergency_access(clinic, clinic.wallet("bob"), "passport:alice")
    assert out.data == {"outcome": "Denied"}
    recs = security_records(clinic)
    assert len(recs) == 1 and recs[0].contact_ack is None


def test_emergency_unknown_patient_denied(clinic):
    out = flows.flow_emergency_access(clinic, clinic.wallet("bob"), "passport:nobody")
    assert out.data["outcome"] == "Denied" and clinic.ledger.count_emergency_records() == 1


def test_emergency_requires_practitioner(clinic):
    with pytest.raises(Unauthorized):
        flows.flow_emergency_access(clinic, clinic.wallet("lab"), "passport:alice")
    assert clinic.ledger.count_emergency_records() == 0


def test_share_separation_holds_through_setup():
    world = emergency_world([True, True, True])
    custody = [(p, k) for p, k, _, ctx in world.custody if ctx == "custody"]
    assert ("msp", "msp") in custody
    assert all(k == "contacts" for p, k in custody if p != "msp")
    assert world.share_violations() == []
    world.hand_share("c1", "msp", world.wallet("alice").anywise_did)
    assert world.share_violations() == ["c1"]


# -- determinism --------------------------------------------------------------------------


def _episode(seed):
    world = build_clinic(seed=seed)
    alice, bob = world.wallet("alice"), world.wallet("bob")
    outs = [flows.flow_prescription(world, bob, alice, {"blood_type": "A-"})]
    outs.append(flows.flow_share_cloud(world, alice, bob, ["blood_type"], 60))
    outs.append(flows.flow_recovery_setup(world, alice, [world.wallet("carol")]))
    outs.append(flows.flow_emergency_access(world, bob, "passport:alice"))
    return [canonical_json(o.to_dict()) for o in outs], world.ledger.export_json()


def test_same_seed_same_transcript():
    assert _episode(17) == _episode(17)
    assert _episode(17)[0] != _episode(18)[0]
