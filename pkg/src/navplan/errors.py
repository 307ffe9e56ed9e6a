"""Exception types shared across the package.

Plain I/O failures (missing files, unwritable paths) are reported with the
builtin ``OSError`` family; everything domain-specific derives from
``NavplanError`` so callers can catch the whole family at the CLI boundary.
"""

from __future__ import annotations


class NavplanError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(NavplanError):
    """An argument violates a documented precondition."""


class InsufficientHistory(NavplanError):
    """Too few timestamped poses to derive an ego state."""


class SingularSystem(NavplanError):
    """The regularized normal equations are not positive definite."""


class SchemaError(NavplanError):
    """A record violates the expected schema.

    ``path`` points at the offending field, e.g. ``frames[3].timestamp``.
    """

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class MissingReasoning(NavplanError):
    """A clip lacks cached reasoning although the reason flag is set."""

    def __init__(self, clip_id: str):
        super().__init__(f"clip {clip_id} has no cached reasoning")
        self.clip_id = clip_id


class MissingControls(NavplanError):
    """A clip lacks fitted controls although action mode was requested."""

    def __init__(self, clip_id: str):
        super().__init__(f"clip {clip_id} has no fitted controls")
        self.clip_id = clip_id


class ParseError(NavplanError):
    """Base class for typed parser failures (never raised directly)."""


class WrongCount(ParseError):
    """The text held a different number of pairs than expected."""

    def __init__(self, found: int, expected: int):
        super().__init__(f"expected {expected} pairs, found {found}")
        self.found = found
        self.expected = expected


class MalformedNumber(ParseError):
    """A token at ``position`` (character offset) is not a finite number."""

    def __init__(self, position: int, token: str):
        super().__init__(f"malformed number {token!r} at offset {position}")
        self.position = position
        self.token = token


class OutOfRange(ParseError):
    """A parsed value violates its physical bound."""


class NoValidCandidate(NavplanError):
    """Every candidate of a prediction failed to parse."""


class TransientBackendError(NavplanError):
    """A retryable backend failure (timeout, 429, 5xx)."""

    def __init__(self, status: int | None, message: str = ""):
        super().__init__(message or f"transient backend failure (status {status})")
        self.status = status


class ExhaustedRetries(NavplanError):
    """All attempts against the backend failed with transient errors."""

    def __init__(self, attempts: int, last_status: int | None):
        super().__init__(f"gave up after {attempts} attempts (last status {last_status})")
        self.attempts = attempts
        self.last_status = last_status


class InvalidResponse(NavplanError):
    """The backend answered with something outside the wire schema."""


class ImageUnreadable(NavplanError):
    """An image part of a chat request could not be read."""

    def __init__(self, path: str):
        super().__init__(f"image not readable: {path}")
        self.path = path


class CacheCorrupt(NavplanError):
    """A cache entry could not be parsed; it has been quarantined."""

    def __init__(self, key: str):
        super().__init__(f"corrupt cache entry {key}")
        self.key = key


class UnknownRequest(NavplanError):
    """A replay backend saw a request it has no recording for."""

    def __init__(self, fingerprint: str):
        super().__init__(f"no recorded response for request {fingerprint}")
        self.fingerprint = fingerprint
