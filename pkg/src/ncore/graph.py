"""Typed relationships among handles and membership closure.

The graph itself is pure structure: existence, authorization and the
provider rule are checked by the repository before an edge reaches it.
"""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import InvariantViolation, UnboundPattern
from .handles import Handle, Kind

MEMBER_OF = "memberOf"
METADATA_FOR = "metadataFor"
ANNOTATES = "annotates"
BUILTIN_PREDICATES = (MEMBER_OF, METADATA_FOR, ANNOTATES)

_CUSTOM_RE = re.compile(r"[a-zA-Z][a-zA-Z0-9_]{0,63}\Z")


def check_predicate(name: str) -> str:
    if not isinstance(name, str) or not _CUSTOM_RE.match(name):
        raise InvariantViolation(f"invalid predicate name {name!r}")
    return name


@dataclass(frozen=True)
class Relationship:
    subject: Handle
    predicate: str
    object: Handle

    def __post_init__(self) -> None:
        check_predicate(self.predicate)

    @property
    def sort_key(self) -> tuple[int, str, int]:
        return (self.subject.serial, self.predicate, self.object.serial)

    def ntriple(self) -> str:
        return f"<{self.subject}> <{self.predicate}> <{self.object}> ."

    @classmethod
    def parse_ntriple(cls, line: str) -> Relationship:
        m = re.fullmatch(r"\s*<([^>]+)>\s+<([^>]+)>\s+<([^>]+)>\s*\.\s*", line)
        if m is None:
            raise ValueError(f"malformed triple line {line!r}")
        return cls(Handle.parse(m.group(1)), m.group(2), Handle.parse(m.group(3)))

    def to_json(self) -> dict:
        return {"s": str(self.subject), "p": self.predicate, "o": str(self.object)}


class RelationGraph:
    def __init__(self) -> None:
        self._out: dict[Handle, dict[str, set[Handle]]] = defaultdict(lambda: defaultdict(set))
        self._in: dict[Handle, dict[str, set[Handle]]] = defaultdict(lambda: defaultdict(set))
        self._by_pred: dict[str, set[tuple[Handle, Handle]]] = defaultdict(set)
        self._count = 0
        self._closure: dict[Handle, frozenset[Handle]] = {}

    def __len__(self) -> int:
        return self._count

    def __contains__(self, rel: Relationship) -> bool:
        return rel.object in self._out.get(rel.subject, {}).get(rel.predicate, ())

    def add(self, rel: Relationship) -> bool:
        if rel in self:
            return False
        self._out[rel.subject][rel.predicate].add(rel.object)
        self._in[rel.object][rel.predicate].add(rel.subject)
        self._by_pred[rel.predicate].add((rel.subject, rel.object))
        self._count += 1
        if rel.predicate == MEMBER_OF:
            self._invalidate(rel.object)
        return True

    def remove(self, rel: Relationship) -> bool:
        if rel not in self:
            return False
        self._out[rel.subject][rel.predicate].discard(rel.object)
        self._in[rel.object][rel.predicate].discard(rel.subject)
        self._by_pred[rel.predicate].discard((rel.subject, rel.object))
        self._count -= 1
        if rel.predicate == MEMBER_OF:
            self._invalidate(rel.object)
        return True

    # -- structural queries ---------------------------------------------------

    def direct_members(self, agg: Handle) -> set[Handle]:
        return set(self._in.get(agg, {}).get(MEMBER_OF, ()))

    def parents(self, obj: Handle) -> set[Handle]:
        return set(self._out.get(obj, {}).get(MEMBER_OF, ()))

    def objects(self, subject: Handle, predicate: str) -> set[Handle]:
        return set(self._out.get(subject, {}).get(predicate, ()))

    def subjects(self, predicate: str, obj: Handle) -> set[Handle]:
        return set(self._in.get(obj, {}).get(predicate, ()))

    def provider_edges(self, md: Handle) -> list[Handle]:
        return sorted(p for p in self._out.get(md, {}).get(MEMBER_OF, ()) if p.kind is Kind.PROVIDER)

    def touching(self, handle: Handle) -> list[Relationship]:
        """Every triple with ``handle`` at either end, sorted."""
        rels = []
        for pred, objs in self._out.get(handle, {}).items():
            rels.extend(Relationship(handle, pred, o) for o in objs)
        for pred, subs in self._in.get(handle, {}).items():
            rels.extend(Relationship(s, pred, handle) for s in subs if s != handle)
        return sorted(set(rels), key=lambda r: r.sort_key)

    def transitive_members(self, agg: Handle) -> frozenset[Handle]:
        """Least fixpoint of direct membership; ``agg`` itself is excluded."""
        cached = self._closure.get(agg)
        if cached is not None:
            return cached
        # iterative post-order so deep chains never hit the recursion limit
        stack: list[tuple[Handle, bool]] = [(agg, False)]
        while stack:
            node, expanded = stack.pop()
            if node in self._closure:
                continue
            members = self._in.get(node, {}).get(MEMBER_OF, ())
            children = [m for m in members if m.is_aggregate and m not in self._closure]
            if not expanded and children:
                stack.append((node, True))
                stack.extend((c, False) for c in children)
                continue
            acc: set[Handle] = set(members)
            for m in members:
                if m.is_aggregate:
                    acc |= self._closure[m]
            acc.discard(node)
            self._closure[node] = frozenset(acc)
        return self._closure[agg]

    def ancestors(self, obj: Handle) -> set[Handle]:
        seen: set[Handle] = set()
        frontier = list(self._out.get(obj, {}).get(MEMBER_OF, ()))
        while frontier:
            node = frontier.pop()
            if node in seen:
                continue
            seen.add(node)
            frontier.extend(self._out.get(node, {}).get(MEMBER_OF, ()))
        seen.discard(obj)
        return seen

    def would_cycle(self, subject: Handle, target: Handle) -> bool:
        """True if ``subject memberOf target`` would close a directed cycle."""
        if not subject.is_aggregate:
            return False
        return subject == target or subject in self.ancestors(target)

    def find(
        self,
        subject: Handle | None = None,
        predicate: str | None = None,
        object: Handle | None = None,
    ) -> list[Relationship]:
        if subject is None and predicate is None and object is None:
            raise UnboundPattern("at least one of subject, predicate, object must be bound")
        if subject is not None:
            preds = self._out.get(subject, {})
            items = (
                (subject, p, o)
                for p, objs in preds.items()
                if predicate is None or p == predicate
                for o in objs
                if object is None or o == object
            )
        elif object is not None:
            preds = self._in.get(object, {})
            items = (
                (s, p, object)
                for p, subs in preds.items()
                if predicate is None or p == predicate
                for s in subs
            )
        else:
            items = ((s, predicate, o) for s, o in self._by_pred.get(predicate, ()))
        rels = [Relationship(s, p, o) for s, p, o in items]
        rels.sort(key=lambda r: r.sort_key)
        return rels

    def triples(self) -> Iterator[Relationship]:
        for subject, preds in self._out.items():
            for pred, objs in preds.items():
                for obj in objs:
                    yield Relationship(subject, pred, obj)

    def sorted_triples(self) -> list[Relationship]:
        return sorted(self.triples(), key=lambda r: r.sort_key)

    def cached_aggregations(self) -> Iterable[Handle]:
        return list(self._closure)

    def _invalidate(self, agg: Handle) -> None:
        if not self._closure:
            return
        self._closure.pop(agg, None)
        for anc in self.ancestors(agg):
            self._closure.pop(anc, None)
