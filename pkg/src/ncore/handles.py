"""Object handles: ``ncore:<kind-prefix>:<serial>``."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass


class Kind(str, enum.Enum):
    RESOURCE = "Resource"
    METADATA = "Metadata"
    AGGREGATION = "Aggregation"
    PROVIDER = "MetadataProvider"
    AGENT = "Agent"

    @property
    def prefix(self) -> str:
        return _PREFIX[self]

    @classmethod
    def parse(cls, value: str | Kind) -> Kind:
        if isinstance(value, Kind):
            return value
        low = value.lower()
        for kind in cls:
            if low in (kind.value.lower(), kind.prefix, kind.name.lower()):
                return kind
        raise ValueError(f"unknown object kind {value!r}")


_PREFIX = {
    Kind.RESOURCE: "res",
    Kind.METADATA: "md",
    Kind.AGGREGATION: "agg",
    Kind.PROVIDER: "mdp",
    Kind.AGENT: "agt",
}
_BY_PREFIX = {v: k for k, v in _PREFIX.items()}

AGGREGATE_KINDS = frozenset({Kind.AGGREGATION, Kind.PROVIDER})

_HANDLE_RE = re.compile(r"ncore:(res|md|agg|mdp|agt):(0|[1-9][0-9]{0,19})\Z")


@dataclass(frozen=True, order=True)
class Handle:
    """Serials are unique across all kinds, so ordering by serial is total."""

    serial: int
    kind: Kind

    def __post_init__(self) -> None:
        if not 0 <= self.serial < 2**64:
            raise ValueError("serial out of range")

    def __hash__(self) -> int:
        return self.serial

    def __str__(self) -> str:
        return f"ncore:{self.kind.prefix}:{self.serial}"

    def __repr__(self) -> str:
        return f"Handle({str(self)!r})"

    @property
    def is_aggregate(self) -> bool:
        return self.kind in AGGREGATE_KINDS

    @classmethod
    def parse(cls, text: str | Handle) -> Handle:
        if isinstance(text, Handle):
            return text
        m = _HANDLE_RE.match(text) if isinstance(text, str) else None
        if m is None:
            raise ValueError(f"malformed handle {text!r}")
        serial = int(m.group(2))
        if serial >= 2**64:
            raise ValueError(f"malformed handle {text!r}")
        return cls(serial, _BY_PREFIX[m.group(1)])
