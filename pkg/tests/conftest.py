import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssi_ehr import flows  # noqa: E402
from ssi_ehr.agents import Wallet  # noqa: E402
from ssi_ehr.ledger import CertificateAuthority, Ledger, MembershipService  # noqa: E402


@pytest.fixture
def ledger_env():
    """A bare CA/MSP/ledger triple without any wallets."""
    clock = flows.SimClock()
    ca = CertificateAuthority(entropy=None)
    msp = MembershipService(ca)
    return ca, msp, Ledger(msp, clock), clock


def build_clinic(seed=1, contacts=("carol", "dave")):
    """Patient alice, doctor bob, a lab, and trusted contacts, all onboarded.

    alice is connected to bob and to the lab.
    """
    world = flows.World(seed=seed)
    alice = world.wallet("alice")
    bob = world.wallet("bob")
    lab = world.wallet("lab")
    flows.flow_onboard(world, alice, "Patient", "passport:alice")
    flows.flow_onboard(world, bob, "Practitioner", "license:bob")
    flows.flow_onboard(world, lab, "Laboratory", "registry:lab")
    for name in contacts:
        flows.flow_onboard(world, world.wallet(name), "Patient", f"passport:{name}")
    flows.flow_connect(world, alice, bob, inviter_alias="bob", responder_alias="alice")
    flows.flow_connect(world, alice, lab, inviter_alias="lab", responder_alias="alice")
    return world


@pytest.fixture
def clinic():
    return build_clinic()


@pytest.fixture
def wallet_pair():
    """Two onboarded wallets with a live connection, for envelope tests."""
    world = flows.World(seed=3)
    a, b = world.wallet("alice"), world.wallet("bob")
    flows.flow_onboard(world, a, "Patient")
    flows.flow_onboard(world, b, "Practitioner")
    flows.flow_connect(world, a, b, inviter_alias="bob", responder_alias="alice")
    return world, a, b


def fresh_wallet(label: str) -> Wallet:
    return Wallet(label)
