"""Exception types shared across the pipeline."""

from __future__ import annotations


class TripletMineError(Exception):
    """Base class for all pipeline errors."""


class BundleParseError(TripletMineError):
    """Raised when a prompt-bundle payload is not valid JSON.

    ``offset`` is the character offset into the payload where decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None, raw: str | None = None):
        super().__init__(message)
        self.offset = offset
        self.raw = raw


class BundleValidationError(TripletMineError):
    """Raised when a structurally valid payload violates the bundle contract.

    ``element`` names the offending array element, when known.
    """

    def __init__(self, message: str, element: int | None = None):
        super().__init__(message)
        self.element = element


class TransportError(TripletMineError):
    """Network or HTTP failure after the retry policy is exhausted."""


class ProtocolViolation(TripletMineError):
    """Endpoint replied with something outside its declared contract."""


class ScoreUnavailable(TripletMineError):
    """Validator response could not be parsed into a score pair."""


class InversionRefused(TripletMineError):
    """Inverter output violated the inverse-instruction constraints."""


class DimensionMismatch(TripletMineError):
    """Two images that must share dimensions do not."""


class ManifestError(TripletMineError):
    """Dataset manifest is corrupt or violates a record invariant."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class BlobIntegrityError(TripletMineError):
    """Stored image blob is missing or its content digest does not match."""
