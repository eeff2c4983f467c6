"""Exception hierarchy shared across the package."""

from __future__ import annotations


class OranAttestError(Exception):
    """Base class for every error raised by this package."""


class EmptyEvidenceSet(OranAttestError):
    pass


class IndexOutOfRange(OranAttestError, IndexError):
    pass


class TreeTooLarge(OranAttestError):
    pass


class DatastoreNotFound(OranAttestError):
    pass


class CollectionError(OranAttestError):
    def __init__(self, target: str, reason: str = "") -> None:
        self.target = target
        self.reason = reason
        super().__init__(f"{target}: {reason}" if reason else target)


class DuplicateEvidenceId(OranAttestError):
    pass


class PathViolation(OranAttestError):
    pass


class ManifestError(OranAttestError):
    pass


class UnknownEvidenceId(OranAttestError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class BackendError(OranAttestError):
    pass


class MalformedKey(OranAttestError, KeyError):
    """Raised for unparsable or wrong-type public keys in a trust store."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DecodeError(OranAttestError, ValueError):
    def __init__(self, message: str, position: int | str | None = None) -> None:
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class IncompleteEvidence(OranAttestError):
    def __init__(self, evidence_id: str) -> None:
        self.evidence_id = evidence_id
        super().__init__(f"no evidence available for leaf {evidence_id!r}")


class TransportError(OranAttestError):
    pass
