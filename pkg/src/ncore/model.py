"""The five digital-object kinds and their JSON export format.

Objects are immutable; every mutation swaps in a new instance. Readers that
hold a reference therefore hold a consistent version of the object, which the
OAI provider relies on for resumption-token snapshots.

Timestamps are integer microseconds since the Unix epoch (UTC) so replay and
hashing never touch floating point.
"""

from __future__ import annotations

import base64
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Mapping, Union

from .errors import InvalidFormatKey, InvariantViolation
from .handles import AGGREGATE_KINDS, Handle, Kind

FORMAT_KEY_RE = re.compile(r"[a-z0-9_]{1,64}\Z")
URN_MEDIA_TYPE = "application/x-ncore-urn"
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def utc_micros(dt: datetime) -> int:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - _EPOCH
    return (delta.days * 86400 + delta.seconds) * 1_000_000 + delta.microseconds


def from_micros(us: int) -> datetime:
    return _EPOCH + timedelta(microseconds=us)


def format_ts(us: int) -> str:
    """RFC 3339 with microseconds, always ``Z``."""
    return from_micros(us).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp without zone: {text!r}")
    return utc_micros(dt.astimezone(timezone.utc))


def check_format_key(key: str) -> None:
    if not isinstance(key, str) or not FORMAT_KEY_RE.match(key):
        raise InvalidFormatKey(f"invalid datastream format key {key!r}")


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


@dataclass(frozen=True)
class Resource:
    handle: Handle
    url: str | None
    payload: bytes | None
    media_type: str | None
    created: int
    modified: int
    deleted: bool = False

    kind = Kind.RESOURCE

    def validate(self) -> None:
        if (self.url is None) == (self.payload is None):
            raise InvariantViolation(
                "resource needs exactly one of url or inline payload", self.handle
            )
        if self.payload is not None and not self.media_type:
            raise InvariantViolation("inline payload requires a media type", self.handle)
        if self.modified < self.created:
            raise InvariantViolation("modified precedes created", self.handle)

    @property
    def identity(self) -> str | None:
        """Key used to find an existing resource when ingesting records."""
        if self.url is not None:
            return self.url
        if self.media_type == URN_MEDIA_TYPE and self.payload is not None:
            return self.payload.decode("utf-8", "replace")
        return None

    def to_json(self, include_payload: bool = True) -> dict:
        return {
            "handle": str(self.handle),
            "kind": self.kind.value,
            "url": self.url,
            "payload": b64(self.payload) if self.payload is not None and include_payload else None,
            "media_type": self.media_type,
            "created": format_ts(self.created),
            "modified": format_ts(self.modified),
            "deleted": self.deleted,
        }


@dataclass(frozen=True)
class Metadata:
    handle: Handle
    target: Handle
    datastreams: Mapping[str, bytes]
    created: int
    modified: int
    deleted: bool = False
    external_id: str | None = None

    kind = Kind.METADATA

    def validate(self) -> None:
        if self.target.kind not in (Kind.RESOURCE, Kind.AGGREGATION):
            raise InvariantViolation("metadata target must be a resource or aggregation", self.handle)
        if not self.deleted and not self.datastreams:
            raise InvariantViolation("metadata needs at least one datastream", self.handle)
        for key in self.datastreams:
            check_format_key(key)
        if self.modified < self.created:
            raise InvariantViolation("modified precedes created", self.handle)

    def to_json(self, include_payload: bool = True) -> dict:
        streams = {k: b64(v) for k, v in sorted(self.datastreams.items())} if include_payload else {}
        return {
            "handle": str(self.handle),
            "kind": self.kind.value,
            "target": str(self.target),
            "datastreams": streams,
            "created": format_ts(self.created),
            "modified": format_ts(self.modified),
            "deleted": self.deleted,
            "external_id": self.external_id,
        }


@dataclass(frozen=True)
class Aggregation:
    """Plain aggregations and metadata providers share this shape."""

    handle: Handle
    label: str
    owner: Handle
    created: int
    modified: int
    deleted: bool = False

    @property
    def kind(self) -> Kind:
        return self.handle.kind

    def validate(self) -> None:
        if self.handle.kind not in AGGREGATE_KINDS:
            raise InvariantViolation("aggregation handle has wrong kind", self.handle)
        if not isinstance(self.label, str) or not self.label.strip():
            raise InvariantViolation("aggregation label must be non-empty", self.handle)
        if self.owner.kind is not Kind.AGENT:
            raise InvariantViolation("aggregation owner must be an agent", self.handle)
        if self.modified < self.created:
            raise InvariantViolation("modified precedes created", self.handle)

    def to_json(self, include_payload: bool = True) -> dict:
        return {
            "handle": str(self.handle),
            "kind": self.kind.value,
            "label": self.label,
            "owner": str(self.owner),
            "created": format_ts(self.created),
            "modified": format_ts(self.modified),
            "deleted": self.deleted,
        }


@dataclass(frozen=True)
class Agent:
    handle: Handle
    display_name: str
    public_key: bytes
    active: bool
    created: int
    modified: int
    deleted: bool = False
    scheme: str = field(default="ed25519")

    kind = Kind.AGENT

    def validate(self) -> None:
        if self.active and not self.public_key:
            raise InvariantViolation("active agent needs a public key", self.handle)
        if self.modified < self.created:
            raise InvariantViolation("modified precedes created", self.handle)

    def to_json(self, include_payload: bool = True) -> dict:
        return {
            "handle": str(self.handle),
            "kind": self.kind.value,
            "display_name": self.display_name,
            "public_key": b64(self.public_key),
            "scheme": self.scheme,
            "active": self.active,
            "created": format_ts(self.created),
            "modified": format_ts(self.modified),
            "deleted": self.deleted,
        }


DigitalObject = Union[Resource, Metadata, Aggregation, Agent]


def object_from_json(doc: Mapping) -> DigitalObject:
    """Inverse of ``to_json``; used by load and by replication of load entries."""
    handle = Handle.parse(doc["handle"])
    created = parse_ts(doc["created"])
    modified = parse_ts(doc["modified"])
    deleted = bool(doc.get("deleted", False))
    kind = handle.kind
    if kind is Kind.RESOURCE:
        payload = doc.get("payload")
        obj: DigitalObject = Resource(
            handle,
            doc.get("url"),
            unb64(payload) if payload is not None else None,
            doc.get("media_type"),
            created,
            modified,
            deleted,
        )
    elif kind is Kind.METADATA:
        obj = Metadata(
            handle,
            Handle.parse(doc["target"]),
            {k: unb64(v) for k, v in sorted(doc.get("datastreams", {}).items())},
            created,
            modified,
            deleted,
            doc.get("external_id"),
        )
    elif kind in AGGREGATE_KINDS:
        obj = Aggregation(handle, doc["label"], Handle.parse(doc["owner"]), created, modified, deleted)
    else:
        obj = Agent(
            handle,
            doc["display_name"],
            unb64(doc["public_key"]),
            bool(doc["active"]),
            created,
            modified,
            deleted,
            doc.get("scheme", "ed25519"),
        )
    if doc.get("kind") not in (None, obj.kind.value):
        raise InvariantViolation(f"kind field {doc.get('kind')!r} disagrees with handle", handle)
    obj.validate()
    return obj
