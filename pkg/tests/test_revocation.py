import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ssi_ehr.crypto import generate_keypair
from ssi_ehr.encoding import b58, canonical_json
from ssi_ehr.errors import DuplicateCid, EpochGap, UnknownCid, WrongIssuer
from ssi_ehr.revocation import (
    EMPTY_ROOT,
    NonRevocationProof,
    RegistryState,
    RevocationRegistry,
    init_registry,
    prove_non_revocation,
    register_credential,
    revoke_credential,
    verify_non_revocation,
)


def cid(i: int) -> bytes:
    return hashlib.sha256(i.to_bytes(4, "big")).digest()[:16]


@pytest.fixture
def keyed_registry():
    kp = generate_keypair()
    return RevocationRegistry(b"r" * 16, "did:peer:issuer"), kp


def test_empty_root_marker():
    assert EMPTY_ROOT == hashlib.sha256(b"EMPTY_REGISTRY").digest()
    assert RevocationRegistry(b"r" * 16, "did:peer:x").root == EMPTY_ROOT


def test_single_insert_root_oracle(keyed_registry):
    reg, kp = keyed_registry
    state = register_credential(reg, cid(1), kp)
    assert state.root == hashlib.sha256(b"\x00" + cid(1)).digest()
    assert state.epoch == 1


def test_insertion_order_irrelevant():
    a = RevocationRegistry(b"a" * 16, "d")
    b = RevocationRegistry(b"b" * 16, "d")
    for c in (cid(1), cid(2), cid(3)):
        a.add(c)
    for c in (cid(3), cid(1), cid(2)):
        b.add(c)
    assert a.root == b.root == oracles.merkle_root([cid(1), cid(2), cid(3)])


def test_duplicate_and_unknown(keyed_registry):
    reg, kp = keyed_registry
    register_credential(reg, cid(1), kp)
    with pytest.raises(DuplicateCid):
        register_credential(reg, cid(1), kp)
    with pytest.raises(UnknownCid):
        revoke_credential(reg, cid(2), kp)
    with pytest.raises(UnknownCid):
        prove_non_revocation(reg, cid(2))


def test_revoke_single_returns_to_empty(keyed_registry):
    reg, kp = keyed_registry
    register_credential(reg, cid(1), kp)
    state = revoke_credential(reg, cid(1), kp)
    assert state.root == EMPTY_ROOT and state.epoch == 2


def test_unaffected_member_still_proves(keyed_registry):
    reg, kp = keyed_registry
    register_credential(reg, cid(1), kp)
    register_credential(reg, cid(2), kp)
    state = revoke_credential(reg, cid(1), kp)
    assert verify_non_revocation(prove_non_revocation(reg, cid(2)), state, kp.public_key)


def test_eight_members_path_length_three(keyed_registry):
    reg, kp = keyed_registry
    members = [cid(i) for i in range(8)]
    for c in members:
        reg.add(c)
    state = reg.signed_state(kp)
    assert state.root == oracles.merkle_root(members)
    for c in members:
        proof = reg.prove(c)
        assert len(proof.merkle_path) == 3
        assert list(proof.merkle_path) == oracles.merkle_path(members, c)
        assert verify_non_revocation(proof, state, kp.public_key)


def test_stale_epoch_fails(keyed_registry):
    reg, kp = keyed_registry
    register_credential(reg, cid(1), kp)
    old_proof = reg.prove(cid(1))
    old_state = reg.signed_state(kp)
    new_state = register_credential(reg, cid(2), kp)
    assert verify_non_revocation(old_proof, old_state, kp.public_key)
    assert not verify_non_revocation(old_proof, new_state, kp.public_key)


def test_revoked_proof_fails_new_state(keyed_registry):
    reg, kp = keyed_registry
    for i in range(5):
        reg.add(cid(i))
    proof = reg.prove(cid(3))
    state = revoke_credential(reg, cid(3), kp)
    assert not verify_non_revocation(proof, state, kp.public_key)
    # even re-pinned to the new epoch the old path no longer folds to the root
    repinned = NonRevocationProof(proof.cid, proof.registry_id, state.epoch, proof.merkle_path)
    assert not verify_non_revocation(repinned, state, kp.public_key)


def test_flipped_sibling_fails(keyed_registry):
    reg, kp = keyed_registry
    for i in range(6):
        reg.add(cid(i))
    state = reg.signed_state(kp)
    proof = reg.prove(cid(2))
    for k in range(len(proof.merkle_path)):
        path = list(proof.merkle_path)
        sib = bytearray(path[k][0])
        sib[0] ^= 0x80
        path[k] = (bytes(sib), path[k][1])
        bad = NonRevocationProof(proof.cid, proof.registry_id, proof.epoch, tuple(path))
        assert not verify_non_revocation(bad, state, kp.public_key)


def test_forged_state_signature(keyed_registry):
    reg, kp = keyed_registry
    reg.add(cid(1))
    state = reg.signed_state(generate_keypair())
    assert not verify_non_revocation(reg.prove(cid(1)), state, kp.public_key)


def test_proof_reveals_no_other_cid(keyed_registry):
    reg, _ = keyed_registry
    members = [cid(i) for i in range(20)]
    for c in members:
        reg.add(c)
    text = canonical_json(reg.prove(members[7]).to_dict()).decode()
    for other in members:
        if other != members[7]:
            assert b58(other) not in text


def test_state_is_constant_size(keyed_registry):
    reg, kp = keyed_registry
    sizes = set()
    for i in range(300):
        reg.add(cid(i))
        if i in (0, 9, 99, 299):
            sizes.add(len(canonical_json({k: v for k, v in reg.signed_state(kp).to_dict().items() if k != "epoch"})))
    assert len(sizes) == 1


def test_state_and_proof_serialization(keyed_registry):
    reg, kp = keyed_registry
    reg.add(cid(1))
    reg.add(cid(2))
    state = reg.signed_state(kp)
    proof = reg.prove(cid(2))
    assert RegistryState.from_dict(state.to_dict()) == state
    assert NonRevocationProof.from_dict(proof.to_dict()) == proof
    assert RevocationRegistry.from_dict(reg.to_dict()).root == reg.root


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 40)), max_size=120))
def test_random_sequences_match_oracle(ops):
    reg = RevocationRegistry(b"p" * 16, "d")
    active = set()
    for add, i in ops:
        c = cid(i)
        if add and c not in active:
            reg.add(c)
            active.add(c)
        elif not add and c in active:
            reg.remove(c)
            active.discard(c)
    assert reg.root == oracles.merkle_root(active)
    assert reg.active_cids == sorted(active)
    for c in active:
        proof = reg.prove(c)
        assert proof.fold() == reg.root
        assert len(proof.merkle_path) == oracles.expected_path_length(len(active))


def test_init_and_anchor(clinic):
    bob = clinic.wallet("bob")
    reg = bob.registry()
    anchored = clinic.ledger.get_registry_state(bob.anywise_did, reg.registry_id, 0)
    assert anchored.root == EMPTY_ROOT and anchored.signature_valid(bob.anywise_keypair().public_key)
    second, _ = init_registry(bob, ledger=clinic.ledger, entropy=clinic.entropy)
    assert second.registry_id != reg.registry_id


def test_anchor_epochs_and_gap(clinic):
    bob = clinic.wallet("bob")
    reg = bob.registry()
    kp = bob.anywise_keypair()
    for i in range(2):
        register_credential(reg, cid(i), kp, ledger=clinic.ledger, identity=bob.ledger_identity)
    assert clinic.ledger.get_registry_state(bob.anywise_did, reg.registry_id).epoch == 2
    reg.add(cid(10))  # epoch 3 never anchored
    reg.add(cid(11))
    with pytest.raises(EpochGap):
        clinic.ledger.anchor_registry_state(bob.ledger_identity, reg.signed_state(kp))


def test_anchor_wrong_issuer(clinic):
    bob, lab = clinic.wallet("bob"), clinic.wallet("lab")
    reg = bob.registry()
    reg.add(cid(1))
    forged = reg.signed_state(lab.anywise_keypair())
    with pytest.raises(WrongIssuer):
        clinic.ledger.anchor_registry_state(bob.ledger_identity, forged)
    with pytest.raises(WrongIssuer):
        clinic.ledger.anchor_registry_state(lab.ledger_identity, reg.signed_state(bob.anywise_keypair()))


def test_random_registry_many_members():
    rng = random.Random(4)
    reg = RevocationRegistry(b"q" * 16, "d")
    members = {rng.randbytes(16) for _ in range(1024)}
    for c in members:
        reg.add(c)
    assert reg.root == oracles.merkle_root(members)
    sample = rng.choice(sorted(members))
    assert len(reg.prove(sample).merkle_path) == 10
