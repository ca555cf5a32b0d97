"""Issuer-held revocation registry: a sorted Merkle set of active credential ids.

Leaves are ``H(0x00 || cid)``, internal nodes ``H(0x01 || left || right)``,
and a level with an odd node count duplicates its last node. The signed root
is the constant-size state anchored on the ledger; membership paths are the
non-revocation proofs.
"""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field

from ssi_ehr.crypto import Entropy, KeyPair, hash_data, sign, verify
from ssi_ehr.encoding import b58, canonical_json, unb58
from ssi_ehr.errors import DuplicateCid, UnknownCid

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
EMPTY_ROOT = hash_data(b"EMPTY_REGISTRY").bytes


# raw hashlib here: these run O(n) times per registry update
def leaf_hash(cid: bytes) -> bytes:
    return hashlib.sha256(LEAF_PREFIX + cid).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def _next_level(level: list[bytes], start: int = 0) -> list[bytes]:
    """Parent nodes of ``level`` from parent index ``start`` onward."""
    out = []
    n = len(level)
    for i in range(2 * start, n, 2):
        right = level[i + 1] if i + 1 < n else level[i]
        out.append(node_hash(level[i], right))
    return out


@dataclass(frozen=True)
class RegistryState:
    registry_id: bytes
    issuer_did: str
    epoch: int
    root: bytes
    issuer_signature: bytes

    def signing_payload(self) -> bytes:
        return state_payload(self.registry_id, self.epoch, self.root)

    def signature_valid(self, issuer_key: bytes) -> bool:
        return verify(issuer_key, self.signing_payload(), self.issuer_signature)

    def to_dict(self) -> dict:
        return {
            "registry_id": b58(self.registry_id),
            "issuer_did": self.issuer_did,
            "epoch": self.epoch,
            "root": b58(self.root),
            "signature": b58(self.issuer_signature),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistryState":
        return cls(
            unb58(d["registry_id"]),
            d["issuer_did"],
            int(d["epoch"]),
            unb58(d["root"]),
            unb58(d["signature"]),
        )


def state_payload(registry_id: bytes, epoch: int, root: bytes) -> bytes:
    return canonical_json(
        {"registry_id": b58(registry_id), "epoch": epoch, "root": b58(root)}
    )


@dataclass(frozen=True)
class NonRevocationProof:
    cid: bytes
    registry_id: bytes
    epoch: int
    # (sibling digest, side) with side 0 = sibling on the right, 1 = on the left
    merkle_path: tuple[tuple[bytes, int], ...]

    def fold(self) -> bytes:
        node = leaf_hash(self.cid)
        for sibling, side in self.merkle_path:
            node = node_hash(node, sibling) if side == 0 else node_hash(sibling, node)
        return node

    def to_dict(self) -> dict:
        return {
            "cid": b58(self.cid),
            "registry_id": b58(self.registry_id),
            "epoch": self.epoch,
            "path": [[b58(s), side] for s, side in self.merkle_path],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NonRevocationProof":
        return cls(
            unb58(d["cid"]),
            unb58(d["registry_id"]),
            int(d["epoch"]),
            tuple((unb58(s), int(side)) for s, side in d["path"]),
        )


@dataclass
class RevocationRegistry:
    registry_id: bytes
    issuer_did: str
    active_cids: list[bytes] = field(default_factory=list)
    epoch: int = 0
    _levels: list[list[bytes]] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self._rebuild(0)

    # Levels are recomputed only from the first changed leaf onward.
    def _rebuild(self, changed_from: int) -> None:
        leaves = self._levels[0] if self._levels else []
        if len(leaves) != len(self.active_cids) or changed_from == 0:
            leaves = [leaf_hash(c) for c in self.active_cids]
        levels = [leaves]
        start = changed_from
        old = self._levels
        depth = 0
        while len(levels[-1]) > 1:
            start //= 2
            prev_parent = old[depth + 1] if depth + 1 < len(old) else []
            parents = prev_parent[:start] + _next_level(levels[-1], start)
            levels.append(parents)
            depth += 1
        self._levels = levels

    @property
    def root(self) -> bytes:
        if not self.active_cids:
            return EMPTY_ROOT
        return self._levels[-1][0]

    def __contains__(self, cid: bytes) -> bool:
        i = bisect.bisect_left(self.active_cids, cid)
        return i < len(self.active_cids) and self.active_cids[i] == cid

    def add(self, cid: bytes) -> None:
        i = bisect.bisect_left(self.active_cids, cid)
        if i < len(self.active_cids) and self.active_cids[i] == cid:
            raise DuplicateCid(f"credential {b58(cid)} already registered")
        self.active_cids.insert(i, cid)
        self._levels[0] = self._levels[0][:i] + [leaf_hash(cid)] + self._levels[0][i:]
        self._rebuild(i)
        self.epoch += 1

    def remove(self, cid: bytes) -> None:
        i = bisect.bisect_left(self.active_cids, cid)
        if i >= len(self.active_cids) or self.active_cids[i] != cid:
            raise UnknownCid(f"credential {b58(cid)} is not active")
        del self.active_cids[i]
        self._levels[0] = self._levels[0][:i] + self._levels[0][i + 1 :]
        self._rebuild(i)
        self.epoch += 1

    def prove(self, cid: bytes) -> NonRevocationProof:
        i = bisect.bisect_left(self.active_cids, cid)
        if i >= len(self.active_cids) or self.active_cids[i] != cid:
            raise UnknownCid(f"credential {b58(cid)} is not active")
        path = []
        for level in self._levels[:-1]:
            if i % 2 == 0:
                sibling = level[i + 1] if i + 1 < len(level) else level[i]
                path.append((sibling, 0))
            else:
                path.append((level[i - 1], 1))
            i //= 2
        return NonRevocationProof(cid, self.registry_id, self.epoch, tuple(path))

    def signed_state(self, issuer_keypair: KeyPair) -> RegistryState:
        root = self.root
        sig = sign(issuer_keypair.private_key, state_payload(self.registry_id, self.epoch, root))
        return RegistryState(self.registry_id, self.issuer_did, self.epoch, root, sig)

    def to_dict(self) -> dict:
        return {
            "registry_id": b58(self.registry_id),
            "issuer_did": self.issuer_did,
            "active_cids": [b58(c) for c in self.active_cids],
            "epoch": self.epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RevocationRegistry":
        return cls(
            unb58(d["registry_id"]),
            d["issuer_did"],
            [unb58(c) for c in d["active_cids"]],
            int(d["epoch"]),
        )


def _anchor(state, ledger, identity):
    if ledger is not None:
        ledger.anchor_registry_state(identity, state)
    return state


def init_registry(
    issuer_wallet, *, ledger=None, identity=None, entropy: Entropy | None = None
) -> tuple[RevocationRegistry, RegistryState]:
    """Create an empty registry for the wallet's anywise DID and anchor epoch 0."""
    ent = entropy if entropy is not None else Entropy()
    keypair = issuer_wallet.anywise_keypair()
    registry = RevocationRegistry(ent.bytes(16), issuer_wallet.anywise_did)
    state = registry.signed_state(keypair)
    _anchor(state, ledger, identity if identity is not None else issuer_wallet.ledger_identity)
    issuer_wallet.registries[b58(registry.registry_id)] = registry
    return registry, state


def register_credential(
    registry: RevocationRegistry, cid: bytes, keypair: KeyPair, *, ledger=None, identity=None
) -> RegistryState:
    registry.add(cid)
    return _anchor(registry.signed_state(keypair), ledger, identity)


def revoke_credential(
    registry: RevocationRegistry, cid: bytes, keypair: KeyPair, *, ledger=None, identity=None
) -> RegistryState:
    registry.remove(cid)
    return _anchor(registry.signed_state(keypair), ledger, identity)


def prove_non_revocation(registry: RevocationRegistry, cid: bytes) -> NonRevocationProof:
    return registry.prove(cid)


def verify_non_revocation(
    proof: NonRevocationProof, state: RegistryState, issuer_key: bytes | None = None
) -> bool:
    """Check a membership path against a registry state.

    When ``issuer_key`` is given the state's signature is checked too; a
    proof pinned to any other epoch than the state's fails.
    """
    if issuer_key is not None and not state.signature_valid(issuer_key):
        return False
    if proof.registry_id != state.registry_id or proof.epoch != state.epoch:
        return False
    return proof.fold() == state.root
