"""Exception hierarchy shared by every layer of the stack.

Each class carries a short ``code`` so the scenario harness can match
expected failures without importing the classes.
"""


class SsiError(Exception):
    code = "error"


# crypto
class EntropyError(SsiError):
    code = "entropy-unavailable"


class MalformedKey(SsiError):
    code = "malformed-key"


class AuthenticationError(SsiError):
    code = "authentication-failure"


class LengthMismatch(SsiError):
    code = "length-mismatch"


# identity
class MissingEndpoint(SsiError):
    code = "missing-endpoint"


class NotFound(SsiError):
    code = "not-found"


class IntegrityMismatch(SsiError):
    code = "integrity-mismatch"


class MalformedPayload(SsiError):
    code = "malformed-payload"


class DuplicateAlias(SsiError):
    code = "duplicate-alias"


# credentials
class UnregisteredIssuer(SsiError):
    code = "unregistered-issuer"


class RegistryUnavailable(SsiError):
    code = "registry-unavailable"


class UnknownClaim(SsiError):
    code = "unknown-claim"


class EmptyDisclosure(SsiError):
    code = "empty-disclosure"


# revocation
class DuplicateCid(SsiError):
    code = "duplicate-cid"


class UnknownCid(SsiError):
    code = "unknown-cid"


# ledger
class SignatureMismatch(SsiError):
    code = "signature-mismatch"


class DidKeyMismatch(SsiError):
    code = "did-key-mismatch"


class InvalidCertificate(SsiError):
    code = "invalid-certificate"


class ExpiredCertificate(SsiError):
    code = "expired-certificate"


class RoleRejected(SsiError):
    code = "role-rejected"


class UnauthorizedChannel(SsiError):
    code = "unauthorized-channel"


class Unauthorized(SsiError):
    code = "unauthorized"


class UnknownKey(SsiError):
    code = "unknown-key"


class DuplicateDid(SsiError):
    code = "duplicate-did"


class PairwiseDidRejected(SsiError):
    code = "pairwise-did-rejected"


class NonMonotoneSequence(SsiError):
    code = "non-monotone-sequence"


class EpochGap(SsiError):
    code = "epoch-gap"


class WrongIssuer(SsiError):
    code = "wrong-issuer"


# agents
class UnknownConnection(SsiError):
    code = "unknown-connection"


class ReplayError(SsiError):
    code = "replay"


class DuplicateGrant(SsiError):
    code = "duplicate-grant"


class NoGrant(SsiError):
    code = "no-grant"


class NotRegistered(SsiError):
    code = "not-registered"


class NotOwner(SsiError):
    code = "not-owner"


class AccessDenied(SsiError):
    code = "access-denied"


class AccessExpired(SsiError):
    code = "expired"


class AccessRevoked(SsiError):
    code = "revoked"


class DigestMismatch(SsiError):
    code = "digest-mismatch"


# flows
class ChallengeFailure(SsiError):
    code = "challenge-failure"


class MissingShare(SsiError):
    code = "missing-share"


class NoContacts(SsiError):
    code = "no-contacts"


class VerificationFailed(SsiError):
    code = "verification-failed"


# harness
class ScenarioParseError(SsiError):
    code = "parse-error"
