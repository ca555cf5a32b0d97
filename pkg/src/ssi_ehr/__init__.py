"""Self-sovereign identity toolkit for patient-controlled health record access.

Modules, bottom up: ``crypto`` (primitives), ``identity`` (peer DIDs and
invitations), ``revocation`` (signed Merkle registries), ``ledger``
(permissioned channels, CA and MSP), ``credentials`` (VCs and VPs with
selective disclosure), ``agents`` (wallets and the mediator), ``flows``
(end-to-end protocols) and ``harness`` (scenario runner and benchmarks).
"""

__version__ = "0.1.0"
