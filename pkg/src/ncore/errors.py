"""Engine exceptions.

Every error carries a stable machine code of the form ``<area>.<cause>`` and
the HTTP status the API maps it to. Codes are part of the public contract and
are listed in the README; never reuse one for a different meaning.
"""

from __future__ import annotations


class NCoreError(Exception):
    code = "engine.error"
    status = 500

    def __init__(self, message: str = "", handle: object | None = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.handle = handle

    def to_dict(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.handle is not None:
            out["handle"] = str(self.handle)
        return out


# -- objects -----------------------------------------------------------------


class NotFound(NCoreError):
    code = "object.not_found"
    status = 404


class InvariantViolation(NCoreError):
    code = "object.invariant"
    status = 422


class InvalidFormatKey(NCoreError):
    code = "object.invalid_format_key"
    status = 400


class AggregationNotEmpty(NCoreError):
    code = "object.aggregation_not_empty"
    status = 409


class ObjectDescribed(NCoreError):
    code = "object.described"
    status = 409


class WrongKind(NCoreError):
    code = "object.wrong_kind"
    status = 400


class ReadOnly(NCoreError):
    """Raised for any mutation attempted on a follower."""

    code = "journal.not_leader"
    status = 409


# -- graph -------------------------------------------------------------------


class EndpointNotFound(NCoreError):
    code = "graph.endpoint_not_found"
    status = 404


class RelationshipNotFound(NCoreError):
    code = "graph.not_found"
    status = 404


class CycleDetected(NCoreError):
    code = "graph.cycle"
    status = 409


class ProviderAlreadySet(NCoreError):
    code = "graph.provider_set"
    status = 409


class ProviderEdgeProtected(NCoreError):
    code = "graph.provider_edge_protected"
    status = 409


class UnboundPattern(NCoreError):
    code = "graph.unbound_pattern"
    status = 400


# -- policy ------------------------------------------------------------------


class NotAuthorized(NCoreError):
    code = "auth.forbidden"
    status = 403


class UnknownActor(NCoreError):
    code = "auth.unknown_agent"
    status = 401


class InactiveAgent(NCoreError):
    code = "auth.inactive_agent"
    status = 401


class AuthMissing(NCoreError):
    code = "auth.missing"
    status = 401


class BadSignature(NCoreError):
    code = "auth.bad_signature"
    status = 401


class StaleTimestamp(NCoreError):
    code = "auth.stale_timestamp"
    status = 401


class ReplayedNonce(NCoreError):
    code = "auth.replayed_nonce"
    status = 401


class MalformedKey(NCoreError):
    code = "agent.malformed_key"
    status = 400


class GrantNotFound(NCoreError):
    code = "grant.not_found"
    status = 404


# -- views -------------------------------------------------------------------


class ViewExists(NCoreError):
    code = "view.exists"
    status = 409


class ViewNotFound(NCoreError):
    code = "view.not_found"
    status = 404


# -- journal / replication ----------------------------------------------------


class ChecksumMismatch(NCoreError):
    code = "journal.checksum_mismatch"

    def __init__(self, seq: int, message: str = ""):
        super().__init__(message or f"checksum mismatch at seq {seq}")
        self.seq = seq


class GapDetected(NCoreError):
    code = "journal.gap"

    def __init__(self, expected: int, got: int):
        super().__init__(f"journal gap: expected seq {expected}, got {got}")
        self.expected = expected
        self.got = got


class HashMismatch(NCoreError):
    code = "snapshot.hash_mismatch"


class DivergenceDetected(NCoreError):
    code = "replication.divergence"

    def __init__(self, seq: int, ours: str, theirs: str):
        super().__init__(f"state hash diverged at seq {seq}: {ours} != {theirs}")
        self.seq = seq


class LoadIntoNonEmpty(NCoreError):
    code = "repo.not_empty"
    status = 409


# -- search ------------------------------------------------------------------


class QuerySyntaxError(NCoreError):
    code = "search.syntax"
    status = 400

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["position"] = self.position
        return out


class UnknownField(QuerySyntaxError):
    code = "search.unknown_field"

    def __init__(self, name: str, position: int):
        super().__init__(f"unknown field {name!r}", position)
        self.name = name

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["field"] = self.name
        return out


class FieldNotPropagatable(NCoreError):
    code = "search.field_not_propagatable"
    status = 400


class IndexUnavailable(NCoreError):
    code = "search.unavailable"
    status = 503


# -- oai / harvest -----------------------------------------------------------


class UnparseableURL(NCoreError):
    code = "url.unparseable"
    status = 400


class HarvestNetworkError(NCoreError):
    code = "harvest.network"
    status = 502


class WatermarkRegression(NCoreError):
    code = "harvest.watermark_regression"
    status = 409


class HarvestSourceExists(NCoreError):
    code = "harvest.source_exists"
    status = 409


class HarvestProtocolError(NCoreError):
    code = "harvest.protocol"
    status = 502


class ReplicationError(NCoreError):
    code = "replication.unavailable"
    status = 503


# -- api ---------------------------------------------------------------------


class BadRequest(NCoreError):
    code = "api.bad_request"
    status = 400


class NotPublic(NCoreError):
    code = "api.not_public"
    status = 403


class NoRoute(NCoreError):
    code = "api.no_route"
    status = 404


class MethodNotAllowed(NCoreError):
    code = "api.method_not_allowed"
    status = 405
