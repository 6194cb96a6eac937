"""Library views: an "in" aggregation minus a "not in" aggregation.

An object under both aggregations is outside the view. Views may also filter
which metadata providers' records count as part of the library.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .errors import InvariantViolation, NotFound, WrongKind
from .graph import METADATA_FOR
from .handles import AGGREGATE_KINDS, Handle, Kind

if TYPE_CHECKING:
    from .repository import Repository


@dataclass(frozen=True)
class ViewSpec:
    name: str
    in_agg: Handle
    not_in_agg: Handle | None = None
    md_include: frozenset[Handle] | None = None
    md_exclude: frozenset[Handle] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.md_include is not None and not isinstance(self.md_include, frozenset):
            object.__setattr__(self, "md_include", frozenset(self.md_include))
        if not isinstance(self.md_exclude, frozenset):
            object.__setattr__(self, "md_exclude", frozenset(self.md_exclude))
        if self.md_include is not None and self.md_include & self.md_exclude:
            raise InvariantViolation("md_include and md_exclude must be disjoint")

    @property
    def filters_providers(self) -> bool:
        return self.md_include is not None or bool(self.md_exclude)

    def provider_allowed(self, provider: Handle | None) -> bool:
        if provider is None:
            return True
        if self.md_include is not None and provider not in self.md_include:
            return False
        return provider not in self.md_exclude

    @property
    def key(self) -> tuple:
        return (
            self.in_agg,
            self.not_in_agg,
            tuple(sorted(self.md_include)) if self.md_include is not None else None,
            tuple(sorted(self.md_exclude)),
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "in": str(self.in_agg),
            "not_in": str(self.not_in_agg) if self.not_in_agg is not None else None,
            "md_include": sorted(str(h) for h in self.md_include) if self.md_include is not None else None,
            "md_exclude": sorted(str(h) for h in self.md_exclude),
        }

    @classmethod
    def from_json(cls, doc: dict) -> ViewSpec:
        inc = doc.get("md_include")
        return cls(
            doc["name"],
            Handle.parse(doc["in"]),
            Handle.parse(doc["not_in"]) if doc.get("not_in") else None,
            frozenset(Handle.parse(h) for h in inc) if inc is not None else None,
            frozenset(Handle.parse(h) for h in doc.get("md_exclude") or ()),
        )


def _check_aggregate(repo: Repository, handle: Handle) -> None:
    repo.get_object(handle)
    if handle.kind not in AGGREGATE_KINDS:
        raise WrongKind(f"{handle} is not an aggregation", handle)


def resolve_view(repo: Repository, spec: ViewSpec) -> set[Handle]:
    with repo.read():
        _check_aggregate(repo, spec.in_agg)
        inside = set(repo.transitive_members(spec.in_agg))
        if spec.not_in_agg is not None:
            _check_aggregate(repo, spec.not_in_agg)
            inside -= repo.transitive_members(spec.not_in_agg)
        return {h for h in inside if not repo.get_object(h).deleted}


def is_in_view(repo: Repository, obj: Handle, spec: ViewSpec) -> bool:
    """Membership test via the object's ancestors; never materializes the view."""
    with repo.read():
        target = repo.get_object(obj)
        if target.deleted:
            return False
        ancestors = repo.ancestors(obj)
        if spec.in_agg not in ancestors:
            return False
        return spec.not_in_agg is None or spec.not_in_agg not in ancestors


def metadata_in_view(repo: Repository, resource: Handle, spec: ViewSpec) -> list[Handle]:
    with repo.read():
        repo.get_object(resource)
        out = []
        for md in repo.graph.subjects(METADATA_FOR, resource):
            obj = repo.get_object(md)
            if obj.deleted:
                continue
            if spec.provider_allowed(repo.provider_of(md)):
                out.append(md)
        return sorted(out)


def validate_spec(repo: Repository, spec: ViewSpec) -> None:
    for h in (spec.in_agg, spec.not_in_agg):
        if h is not None:
            try:
                _check_aggregate(repo, h)
            except NotFound:
                raise NotFound(f"view aggregation {h} does not exist", h) from None
    for p in (spec.md_include or frozenset()) | spec.md_exclude:
        repo.get_object(p)
        if p.kind is not Kind.PROVIDER:
            raise WrongKind(f"{p} is not a metadata provider", p)
