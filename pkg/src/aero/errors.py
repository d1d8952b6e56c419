"""Exception taxonomy shared by every subsystem.

Each error carries a ``category`` consumed by the flow engine's retry
classifier and an ``http_status`` used by the gateway when translating
errors into JSON responses. Categories are stable strings; the mapping
category -> transient/terminal lives in :mod:`aero.flows`.
"""

from __future__ import annotations


class AeroError(Exception):
    """Base class for all service errors."""

    category = "internal"
    http_status = 500

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__


# -- registry ---------------------------------------------------------------

class DuplicateName(AeroError):
    category = "validation-failure"
    http_status = 409


class InvalidUrl(AeroError):
    category = "validation-failure"
    http_status = 400


class UnknownAsset(AeroError):
    category = "unknown-asset"
    http_status = 404


class UnknownVersion(AeroError):
    category = "unknown-asset"
    http_status = 404


class MalformedChecksum(AeroError):
    category = "validation-failure"
    http_status = 400


class DuplicateFlow(AeroError):
    category = "validation-failure"
    http_status = 409


class UnknownFlow(AeroError):
    category = "unknown-asset"
    http_status = 404


class CyclicDependency(AeroError):
    """Registering the flow would let an asset feed its own inputs."""

    category = "validation-failure"
    http_status = 409


class StorageUnavailable(AeroError):
    category = "storage-unavailable"
    http_status = 503


# -- auth -------------------------------------------------------------------

class Unauthenticated(AeroError):
    category = "validation-failure"
    http_status = 401


class Forbidden(AeroError):
    category = "validation-failure"
    http_status = 403


# -- collection store -------------------------------------------------------

class UnknownKey(AeroError):
    category = "unknown-asset"
    http_status = 404


class UnknownCollection(AeroError):
    category = "unknown-asset"
    http_status = 404


class DiskFull(AeroError):
    category = "storage-unavailable"
    http_status = 503


# -- executor ---------------------------------------------------------------

class InvalidEntry(AeroError):
    category = "validation-failure"
    http_status = 400


class UnknownFunction(AeroError):
    category = "unknown-asset"
    http_status = 404


class UnknownEndpoint(AeroError):
    category = "unknown-asset"
    http_status = 404


class FunctionNotAllowed(AeroError):
    category = "validation-failure"
    http_status = 403


class EndpointUnavailable(AeroError):
    category = "endpoint-unavailable"
    http_status = 503


class UnknownTask(AeroError):
    category = "unknown-asset"
    http_status = 404


class PollTimeout(AeroError):
    category = "network-timeout"
    http_status = 504


class TaskFailed(AeroError):
    """User function exited nonzero or produced an invalid result file."""

    category = "function-domain-error"
    http_status = 502


# -- flow engine ------------------------------------------------------------

class FetchFailed(AeroError):
    """Transient failure talking to an external data source."""

    category = "network-timeout"
    http_status = 502


class MalformedSource(AeroError):
    """Source responded but the content is unusable (4xx, oversize, loops)."""

    category = "malformed-source"
    http_status = 502


# -- search / gateway -------------------------------------------------------

class MalformedFilter(AeroError):
    category = "validation-failure"
    http_status = 400


# -- bench ------------------------------------------------------------------

class EndpointTooSmall(AeroError):
    category = "validation-failure"
    http_status = 400


class ServerUnreachable(AeroError):
    category = "endpoint-unavailable"
    http_status = 503
