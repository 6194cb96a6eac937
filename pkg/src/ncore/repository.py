"""The repository engine.

Every mutation follows the same path: validate against current state, build a
journal entry carrying every engine-minted value (handles, timestamps), append
it, then apply it. Replay and replication run the very same ``_apply`` so a
journal fully determines the state.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

from lxml import etree

from . import journal as jr
from .errors import (
    AggregationNotEmpty,
    ChecksumMismatch,
    DivergenceDetected,
    EndpointNotFound,
    FieldNotPropagatable,
    GrantNotFound,
    HarvestSourceExists,
    HashMismatch,
    InactiveAgent,
    InvariantViolation,
    LoadIntoNonEmpty,
    NotAuthorized,
    NotFound,
    ObjectDescribed,
    ProviderAlreadySet,
    ProviderEdgeProtected,
    ReadOnly,
    RelationshipNotFound,
    UnknownActor,
    ViewExists,
    ViewNotFound,
    WatermarkRegression,
    WrongKind,
    CycleDetected,
)
from .graph import ANNOTATES, MEMBER_OF, METADATA_FOR, Relationship, RelationGraph
from .handles import AGGREGATE_KINDS, Handle, Kind
from .journal import JournalEntry, canonical_json
from .model import (
    Agent,
    Aggregation,
    DigitalObject,
    Metadata,
    Resource,
    b64,
    check_format_key,
    format_ts,
    object_from_json,
    unb64,
)
from .oai.source import HarvestSource
from .policy import Capability, Grant, load_public_key
from .urls import normalize_url
from .views import ViewSpec, validate_spec

log = logging.getLogger(__name__)

MAX_INLINE_BYTES = 16 * 1024 * 1024
CHECKPOINT_INTERVAL = 1000
PROPAGATABLE_FIELDS = ("subject", "audience", "educationLevel", "rights")

LEADER = "leader"
FOLLOWER = "follower"

_XML_PARSER = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=True)


def check_xml(payload: bytes) -> None:
    try:
        etree.fromstring(payload, _XML_PARSER)
    except etree.XMLSyntaxError as exc:
        raise InvariantViolation(f"nsdl_dc datastream is not well-formed XML: {exc}") from None


def system_clock() -> int:
    return time.time_ns() // 1000


@dataclass
class Stats:
    resources: int
    metadata: int
    aggregations: int
    providers: int
    agents: int
    triples: int
    last_seq: int
    tombstoned: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


class Repository:
    def __init__(
        self,
        journal: jr.Journal | None = None,
        role: str = LEADER,
        clock: Callable[[], int] = system_clock,
        max_inline_bytes: int = MAX_INLINE_BYTES,
        checkpoint_interval: int = CHECKPOINT_INTERVAL,
        propagatable_fields: Iterable[str] = PROPAGATABLE_FIELDS,
        data_dir: Path | None = None,
    ):
        self.journal = journal if journal is not None else jr.Journal()
        self.role = role
        self.clock = clock
        self.max_inline_bytes = max_inline_bytes
        self.checkpoint_interval = checkpoint_interval
        self.propagatable_fields = tuple(propagatable_fields)
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self._lock = threading.RLock()
        self._batch_depth = 0
        self._reset_state()

    def _reset_state(self) -> None:
        self.objects: dict[Handle, DigitalObject] = {}
        self.graph = RelationGraph()
        self.grants: dict[tuple[Handle, Handle, Capability], Grant] = {}
        self.admins: set[Handle] = set()
        self.views: dict[str, ViewSpec] = {}
        self.harvest_sources: dict[str, HarvestSource] = {}
        self.oai_sets: set[Handle] = set()
        self.propagation: dict[Handle, tuple[str, ...]] = {}
        self.provenance: dict[Handle, Handle] = {}  # metadata -> provider, kept past tombstoning
        self.next_serial = 1
        self.last_seq = 0
        self.last_ts = 0
        self.checkpoints: dict[int, str] = {}
        self._identity: dict[str, set[Handle]] = defaultdict(set)
        self._external: dict[tuple[Handle, str], Handle] = {}
        self._json_cache: dict[Handle, bytes] = {}
        self._listeners: list[Callable[[JournalEntry], None]] = []

    # -- construction ------------------------------------------------------------

    @classmethod
    def open(
        cls,
        data_dir: str | Path,
        fsync: bool = True,
        entries_per_segment: int = jr.ENTRIES_PER_SEGMENT,
        **kwargs,
    ) -> Repository:
        """Open a repository directory: restore the newest snapshot, replay the rest."""
        data_dir = Path(data_dir)
        journal = jr.FileJournal(data_dir / "journal", fsync=fsync, entries_per_segment=entries_per_segment)
        repo = cls(journal=journal, data_dir=data_dir, **kwargs)
        snap = repo._latest_snapshot()
        if snap is not None:
            repo._restore_blob(*snap)
        verifier_seq = repo.last_seq
        for rec in journal.recover():
            if rec.type == jr.ENTRY:
                if rec.seq > verifier_seq:
                    repo._apply(rec.entry())
            elif rec.seq == repo.last_seq:
                repo.checkpoints[rec.seq] = rec.state_hash()
        if journal.last_seq < repo.last_seq:
            raise ChecksumMismatch(journal.last_seq + 1, "snapshot is ahead of the journal")
        return repo

    @classmethod
    def in_memory(cls, **kwargs) -> Repository:
        return cls(journal=jr.Journal(), **kwargs)

    def close(self) -> None:
        self.journal.close()

    # -- locking -----------------------------------------------------------------

    @contextlib.contextmanager
    def read(self) -> Iterator[None]:
        with self._lock:
            yield

    @contextlib.contextmanager
    def batch(self) -> Iterator[None]:
        """Group commit: entries are flushed as usual, fsync happens once at exit."""
        with self._lock:
            self._batch_depth += 1
            try:
                yield
            finally:
                self._batch_depth -= 1
                if self._batch_depth == 0:
                    self.journal.sync()

    def add_listener(self, fn: Callable[[JournalEntry], None]) -> None:
        self._listeners.append(fn)

    # -- lookup ------------------------------------------------------------------

    def get_object(self, handle: Handle | str) -> DigitalObject:
        try:
            handle = Handle.parse(handle)
        except ValueError:
            raise NotFound(f"malformed handle {handle!r}") from None
        obj = self.objects.get(handle)
        if obj is None:
            raise NotFound(f"{handle} does not exist", handle)
        return obj

    def exists(self, handle: Handle) -> bool:
        return handle in self.objects

    def _live(self, handle: Handle, error=NotFound) -> DigitalObject:
        obj = self.objects.get(handle)
        if obj is None or obj.deleted:
            raise error(f"{handle} does not exist or is tombstoned", handle)
        return obj

    def provider_of(self, md: Handle) -> Handle | None:
        return self.provenance.get(md)

    def find_resource(self, identity: str) -> Handle | None:
        handles = self._identity.get(identity)
        return min(handles) if handles else None

    def find_metadata(self, provider: Handle, external_id: str) -> Handle | None:
        return self._external.get((provider, external_id))

    def objects_of_kind(self, kind: Kind, include_deleted: bool = False) -> list[DigitalObject]:
        with self._lock:
            return sorted(
                (o for h, o in self.objects.items() if h.kind is kind and (include_deleted or not o.deleted)),
                key=lambda o: o.handle.serial,
            )

    # -- relation queries ----------------------------------------------------------

    def _aggregate(self, handle: Handle) -> Aggregation:
        obj = self.get_object(handle)
        if handle.kind not in AGGREGATE_KINDS:
            raise WrongKind(f"{handle} is not an aggregation", handle)
        return obj

    def direct_members(self, agg: Handle) -> set[Handle]:
        with self._lock:
            self._aggregate(agg)
            return self.graph.direct_members(agg)

    def transitive_members(self, agg: Handle) -> frozenset[Handle]:
        with self._lock:
            self._aggregate(agg)
            return self.graph.transitive_members(agg)

    def ancestors(self, obj: Handle) -> set[Handle]:
        with self._lock:
            self.get_object(obj)
            return self.graph.ancestors(obj)

    def find(self, subject=None, predicate=None, object=None) -> list[Relationship]:
        with self._lock:
            return self.graph.find(subject, predicate, object)

    # -- authorization ----------------------------------------------------------------

    def _actor(self, actor: Handle) -> Agent:
        obj = self.objects.get(actor)
        if obj is None or actor.kind is not Kind.AGENT or obj.deleted:
            raise UnknownActor(f"{actor} is not a registered agent", actor)
        if not obj.active:
            raise InactiveAgent(f"{actor} is inactive", actor)
        return obj

    def is_admin(self, agent: Handle) -> bool:
        return agent in self.admins

    def authorize(self, agent: Handle, capability: Capability | str, scope: Handle) -> bool:
        with self._lock:
            capability = Capability(capability)
            obj = self.get_object(scope)
            if agent in self.admins:
                return True
            if isinstance(obj, Metadata):
                scope = self.provenance.get(scope, scope)
                obj = self.get_object(scope)
            if isinstance(obj, Aggregation) and obj.owner == agent:
                return True
            return (agent, scope, capability) in self.grants

    def _require(self, agent: Handle, capability: Capability, scope: Handle) -> None:
        if not self.authorize(agent, capability, scope):
            raise NotAuthorized(f"{agent} lacks {capability.value} on {scope}", scope)

    def _require_admin(self, agent: Handle) -> None:
        if agent not in self.admins:
            raise NotAuthorized(f"{agent} is not an administrator", agent)

    def _writable(self) -> None:
        if self.role != LEADER:
            raise ReadOnly("repository is a read-only follower")

    # -- commit path -------------------------------------------------------------------

    def _now(self) -> int:
        return max(self.clock(), self.last_ts)

    def _mint(self, kind: Kind, count: int = 1) -> list[Handle]:
        return [Handle(self.next_serial + i, kind) for i in range(count)]

    def _commit(self, op: str, actor: Handle | None, payload: dict, ts: int | None = None) -> JournalEntry:
        ts = self._now() if ts is None else ts
        seq = self.last_seq + 1
        entry = JournalEntry(seq, ts, actor, op, payload, prev_checksum=self.journal.last_checksum)
        raw, checksum = jr.encode_entry(entry)
        entry = replace(entry, checksum=checksum)
        self.journal.append(raw, jr.ENTRY, seq, checksum)
        if self._batch_depth == 0:
            self.journal.sync()
        self._apply(entry)
        if self.checkpoint_interval and seq % self.checkpoint_interval == 0:
            digest = self.state_hash()
            self.checkpoints[seq] = digest
            self.journal.append(jr.encode_checkpoint(seq, digest), jr.CHECKPOINT, seq)
        return entry

    # -- object lifecycle --------------------------------------------------------------

    def bootstrap(self, display_name: str, public_key: bytes, scheme: str = "ed25519") -> Handle:
        """Create the first agent, which holds the admin capability."""
        with self._lock:
            self._writable()
            if self.objects:
                raise InvariantViolation("repository is already initialized")
            load_public_key(public_key, scheme)
            (handle,) = self._mint(Kind.AGENT)
            ts = self._now()
            agent = Agent(handle, display_name, public_key, True, ts, ts, scheme=scheme)
            agent.validate()
            self._commit("bootstrap", None, {"object": agent.to_json()}, ts)
            return handle

    def create_object(self, kind: Kind | str, actor: Handle, init: Mapping | None = None, **kwargs) -> Handle:
        init = dict(init or {}, **kwargs)
        kind = Kind.parse(kind)
        if kind is Kind.RESOURCE:
            return self.create_resource(actor, **init)
        if kind is Kind.METADATA:
            return self.create_metadata(actor, **init)
        if kind in AGGREGATE_KINDS:
            return self.create_aggregation(actor, provider=kind is Kind.PROVIDER, **init)
        return self.register_agent(init.get("display_name", ""), init.get("public_key", b""), actor)

    def create_resource(
        self,
        actor: Handle,
        url: str | None = None,
        payload: bytes | None = None,
        media_type: str | None = None,
    ) -> Handle:
        with self._lock:
            self._writable()
            self._actor(actor)
            if url is not None:
                url = normalize_url(url)
            if payload is not None and len(payload) > self.max_inline_bytes:
                raise InvariantViolation(f"inline payload exceeds {self.max_inline_bytes} bytes")
            (handle,) = self._mint(Kind.RESOURCE)
            ts = self._now()
            obj = Resource(handle, url, payload, media_type if payload is not None else None, ts, ts)
            obj.validate()
            self._commit("create_object", actor, {"object": obj.to_json()}, ts)
            return handle

    def create_aggregation(
        self,
        actor: Handle,
        label: str,
        owner: Handle | None = None,
        provider: bool = False,
    ) -> Handle:
        with self._lock:
            self._writable()
            self._actor(actor)
            owner = actor if owner is None else Handle.parse(owner)
            if owner != actor:
                self._require_admin(actor)
                self._actor(owner)
            (handle,) = self._mint(Kind.PROVIDER if provider else Kind.AGGREGATION)
            ts = self._now()
            obj = Aggregation(handle, label, owner, ts, ts)
            obj.validate()
            self._commit("create_object", actor, {"object": obj.to_json()}, ts)
            return handle

    def create_metadata(
        self,
        actor: Handle,
        target: Handle,
        provider: Handle,
        datastreams: Mapping[str, bytes],
        external_id: str | None = None,
    ) -> Handle:
        with self._lock:
            self._writable()
            self._actor(actor)
            target, provider = Handle.parse(target), Handle.parse(provider)
            self._live(target, EndpointNotFound)
            self._live(provider, EndpointNotFound)
            if provider.kind is not Kind.PROVIDER:
                raise WrongKind(f"{provider} is not a metadata provider", provider)
            self._require(actor, Capability.WRITE_METADATA, provider)
            if not datastreams:
                raise InvariantViolation("metadata needs at least one datastream")
            for key, payload in datastreams.items():
                self._check_stream(key, payload)
            if external_id is not None:
                prior = self._external.get((provider, external_id))
                if prior is not None and not self.objects[prior].deleted:
                    raise InvariantViolation(f"{external_id!r} already ingested for {provider}", prior)
            (handle,) = self._mint(Kind.METADATA)
            ts = self._now()
            obj = Metadata(handle, target, dict(sorted(datastreams.items())), ts, ts, False, external_id)
            obj.validate()
            self._commit("create_object", actor, {"object": obj.to_json(), "provider": str(provider)}, ts)
            return handle

    def _check_stream(self, key: str, payload: bytes) -> None:
        check_format_key(key)
        if not isinstance(payload, (bytes, bytearray)):
            raise InvariantViolation("datastream payload must be bytes")
        if key == "nsdl_dc":
            check_xml(bytes(payload))

    def register_agent(self, display_name: str, public_key: bytes, actor: Handle, scheme: str = "ed25519") -> Handle:
        with self._lock:
            self._writable()
            self._actor(actor)
            self._require_admin(actor)
            load_public_key(public_key, scheme)
            (handle,) = self._mint(Kind.AGENT)
            ts = self._now()
            agent = Agent(handle, display_name, bytes(public_key), True, ts, ts, scheme=scheme)
            agent.validate()
            self._commit("register_agent", actor, {"object": agent.to_json()}, ts)
            return handle

    def set_agent_active(self, agent: Handle, active: bool, actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            self._require_admin(actor)
            obj = self._live(agent)
            if not isinstance(obj, Agent):
                raise WrongKind(f"{agent} is not an agent", agent)
            if obj.active == active:
                return
            self._commit("set_agent_active", actor, {"handle": str(agent), "active": bool(active)})

    def add_datastream(self, md: Handle, format_key: str, payload: bytes, actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            md = Handle.parse(md)
            obj = self._live(md)
            if not isinstance(obj, Metadata):
                raise WrongKind(f"{md} is not a metadata object", md)
            self._require(actor, Capability.WRITE_METADATA, md)
            self._check_stream(format_key, payload)
            self._commit(
                "add_datastream", actor, {"handle": str(md), "key": format_key, "payload": b64(bytes(payload))}
            )

    def tombstone_object(self, handle: Handle, actor: Handle) -> bool:
        """Mark an object deleted and retract every edge touching it, atomically."""
        with self._lock:
            self._writable()
            self._actor(actor)
            handle = Handle.parse(handle)
            obj = self.get_object(handle)
            if obj.deleted:
                return False
            if isinstance(obj, Metadata):
                self._require(actor, Capability.WRITE_METADATA, handle)
            elif isinstance(obj, Aggregation):
                if not (obj.owner == actor or actor in self.admins):
                    raise NotAuthorized(f"only the owner may tombstone {handle}", handle)
                if self.graph.direct_members(handle):
                    raise AggregationNotEmpty(f"{handle} still has members", handle)
            else:
                self._require_admin(actor)
            if isinstance(obj, Agent):
                owned = [o.handle for o in self.objects.values() if isinstance(o, Aggregation) and not o.deleted and o.owner == handle]
                if owned:
                    raise InvariantViolation(f"{handle} still owns {owned[0]}", handle)
            if not isinstance(obj, Metadata):
                describing = [m for m in self.graph.subjects(METADATA_FOR, handle) if not self.objects[m].deleted]
                if describing:
                    raise ObjectDescribed(f"{handle} is described by {min(describing)}", handle)
            retract = [r.to_json() for r in self.graph.touching(handle)]
            self._commit("tombstone", actor, {"handle": str(handle), "retract": retract})
            return True

    # -- relationships ------------------------------------------------------------------

    def assert_relationship(self, rel: Relationship, actor: Handle) -> bool:
        """Store a triple. Returns False (and journals nothing) for a duplicate."""
        with self._lock:
            self._writable()
            self._actor(actor)
            s, p, o = rel.subject, rel.predicate, rel.object
            self._live(s, EndpointNotFound)
            self._live(o, EndpointNotFound)
            if p == MEMBER_OF:
                if o.kind not in AGGREGATE_KINDS:
                    raise WrongKind(f"memberOf target {o} is not an aggregation", o)
                self._require(actor, Capability.MANAGE_MEMBERSHIP, o)
                if rel in self.graph:
                    return False
                if s.kind is Kind.METADATA and o.kind is Kind.PROVIDER and self.graph.provider_edges(s):
                    raise ProviderAlreadySet(f"{s} already belongs to {self.graph.provider_edges(s)[0]}", s)
                if self.graph.would_cycle(s, o):
                    raise CycleDetected(f"{s} memberOf {o} would create a cycle", s)
            elif p == METADATA_FOR:
                md = self.objects[s]
                if not isinstance(md, Metadata) or o.kind not in (Kind.RESOURCE, Kind.AGGREGATION):
                    raise WrongKind("metadataFor runs from a metadata object to a resource or aggregation")
                if md.target != o:
                    raise InvariantViolation(f"{s} describes {md.target}, not {o}", s)
                return False
            elif rel in self.graph:
                return False
            self._commit("assert", actor, rel.to_json())
            return True

    def retract_relationship(self, rel: Relationship, actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            if rel not in self.graph:
                raise RelationshipNotFound(f"no such triple: {rel.ntriple()}")
            if rel.predicate == MEMBER_OF:
                self._require(actor, Capability.MANAGE_MEMBERSHIP, rel.object)
                if rel.subject.kind is Kind.METADATA and rel.object.kind is Kind.PROVIDER:
                    raise ProviderEdgeProtected(
                        f"{rel.subject}'s provider edge can only be removed by tombstoning it", rel.subject
                    )
            elif rel.predicate == METADATA_FOR:
                raise ProviderEdgeProtected("metadataFor edges are removed only by tombstoning", rel.subject)
            self._commit("retract", actor, rel.to_json())

    # -- grants, ownership, registries -------------------------------------------------

    def grant(self, grantor: Handle, grantee: Handle, scope: Handle, capability: Capability | str) -> bool:
        with self._lock:
            self._writable()
            self._actor(grantor)
            capability = Capability(capability)
            agg = self._live(scope)
            if not isinstance(agg, Aggregation):
                raise WrongKind(f"{scope} is not an aggregation", scope)
            if agg.owner != grantor and grantor not in self.admins:
                raise NotAuthorized(f"{grantor} does not own {scope}", scope)
            self._actor(grantee)
            if (grantee, scope, capability) in self.grants:
                return False
            ts = self._now()
            g = Grant(grantor, grantee, scope, capability, ts)
            self._commit("grant", grantor, g.to_json(), ts)
            return True

    def revoke(self, grantor: Handle, grantee: Handle, scope: Handle, capability: Capability | str) -> None:
        with self._lock:
            self._writable()
            self._actor(grantor)
            capability = Capability(capability)
            agg = self.get_object(scope)
            if not isinstance(agg, Aggregation):
                raise WrongKind(f"{scope} is not an aggregation", scope)
            if agg.owner != grantor and grantor not in self.admins:
                raise NotAuthorized(f"{grantor} does not own {scope}", scope)
            if (grantee, scope, capability) not in self.grants:
                raise GrantNotFound(f"no {capability.value} grant for {grantee} on {scope}", scope)
            self._commit(
                "revoke", grantor, {"grantee": str(grantee), "scope": str(scope), "capability": capability.value}
            )

    def transfer_owner(self, agg: Handle, new_owner: Handle, actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            self._require_admin(actor)
            obj = self._live(agg)
            if not isinstance(obj, Aggregation):
                raise WrongKind(f"{agg} is not an aggregation", agg)
            self._actor(new_owner)
            self._commit("transfer_owner", actor, {"handle": str(agg), "owner": str(new_owner)})

    def register_view(self, spec: ViewSpec, actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            self._require_admin(actor)
            if spec.name in self.views:
                raise ViewExists(f"view {spec.name!r} already registered")
            validate_spec(self, spec)
            self._commit("register_view", actor, spec.to_json())

    def get_view(self, name: str) -> ViewSpec:
        try:
            return self.views[name]
        except KeyError:
            raise ViewNotFound(f"no view named {name!r}") from None

    def register_oai_set(self, agg: Handle, actor: Handle) -> bool:
        with self._lock:
            self._writable()
            self._actor(actor)
            obj = self._aggregate(agg)
            if obj.owner != actor and actor not in self.admins:
                raise NotAuthorized(f"only the owner may publish {agg} as a set", agg)
            if agg in self.oai_sets:
                return False
            self._commit("register_oai_set", actor, {"handle": str(agg)})
            return True

    def set_propagation(self, agg: Handle, fields: Iterable[str], actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            self._aggregate(agg)
            fields = tuple(dict.fromkeys(fields))
            bad = [f for f in fields if f not in self.propagatable_fields]
            if bad:
                raise FieldNotPropagatable(f"field {bad[0]!r} cannot be propagated", agg)
            self._require(actor, Capability.MANAGE_MEMBERSHIP, agg)
            if fields and not any(not self.objects[m].deleted for m in self.graph.subjects(METADATA_FOR, agg)):
                raise InvariantViolation(f"{agg} has no collection-level metadata to propagate", agg)
            self._commit("set_propagation", actor, {"handle": str(agg), "fields": list(fields)})

    def register_harvest_source(self, source: HarvestSource, actor: Handle) -> None:
        with self._lock:
            self._writable()
            self._actor(actor)
            self._require_admin(actor)
            for other in self.harvest_sources.values():
                if other.id == source.id or other.identity == source.identity:
                    raise HarvestSourceExists(f"harvest source {other.id!r} already covers this feed")
            for h in (source.provider, source.resource_agg, source.metadata_agg):
                self._aggregate(h)
            if source.provider.kind is not Kind.PROVIDER:
                raise WrongKind(f"{source.provider} is not a metadata provider", source.provider)
            self._commit("register_harvest_source", actor, source.to_json())

    def harvest_checkpoint(self, source_id: str, until: str, actor: Handle) -> bool:
        with self._lock:
            self._writable()
            self._actor(actor)
            source = self.harvest_sources[source_id]
            prior = source.last_successful_until
            if prior is not None and until < prior:
                raise WatermarkRegression(f"watermark would move back from {prior} to {until}")
            if prior == until:
                return False
            self._commit("harvest_checkpoint", actor, {"source": source_id, "until": until})
            return True

    # -- dump / load -------------------------------------------------------------------

    def load(self, dump: Mapping, chunk: int = 2000) -> None:
        """Rebuild state from a ``dump()`` document through ``load`` journal entries."""
        with self._lock:
            self._writable()
            if self.objects or self.last_seq:
                raise LoadIntoNonEmpty("load requires an empty repository")
            objects = list(dump.get("objects", []))
            triples = list(dump.get("triples", []))
            first = {k: dump.get(k) for k in ("grants", "admins", "views", "harvest_sources", "oai_sets", "propagation", "provenance")}
            for doc in objects:
                object_from_json(doc)
            with self.batch():
                for i in range(0, max(len(objects), 1), chunk):
                    part = {"objects": objects[i : i + chunk]}
                    self._commit("load", None, part, 0)
                for i in range(0, len(triples), chunk * 4):
                    self._commit("load", None, {"triples": triples[i : i + chunk * 4]}, 0)
                self._commit("load", None, {k: v for k, v in first.items() if v}, 0)

    def dump(self) -> dict:
        with self._lock:
            return json.loads(self.state_blob())

    # -- state hash / snapshots ------------------------------------------------------------

    def _object_json(self, handle: Handle) -> bytes:
        cached = self._json_cache.get(handle)
        if cached is None:
            cached = canonical_json(self.objects[handle].to_json())
            self._json_cache[handle] = cached
        return cached

    def state_blob(self) -> bytes:
        """Canonical serialization of the full state; objects and triples sorted."""
        with self._lock:
            parts = {
                "admins": canonical_json(sorted(str(a) for a in sorted(self.admins))),
                "grants": canonical_json([g.to_json() for _, g in sorted(self.grants.items(), key=lambda kv: (kv[0][0].serial, kv[0][1].serial, kv[0][2].value))]),
                "harvest_sources": canonical_json([s.to_json() for _, s in sorted(self.harvest_sources.items())]),
                "oai_sets": canonical_json([str(h) for h in sorted(self.oai_sets)]),
                "objects": b"[" + b",".join(self._object_json(h) for h in sorted(self.objects)) + b"]",
                "propagation": canonical_json({str(h): list(f) for h, f in self.propagation.items()}),
                "provenance": canonical_json({str(m): str(p) for m, p in self.provenance.items()}),
                "triples": canonical_json([r.ntriple() for r in self.graph.sorted_triples()]),
                "views": canonical_json([v.to_json() for _, v in sorted(self.views.items())]),
            }
            return b"{" + b",".join(canonical_json(k) + b":" + v for k, v in sorted(parts.items())) + b"}"

    def state_hash(self) -> str:
        return hashlib.sha256(self.state_blob()).hexdigest()

    def snapshot(self) -> Path:
        """Write ``snapshots/<seq>.snap``: a JSON header line then the state blob."""
        if self.data_dir is None:
            raise InvariantViolation("in-memory repositories cannot write snapshots")
        with self._lock:
            blob = self.state_blob()
            header = {"as_of_seq": self.last_seq, "last_ts": self.last_ts, "state_hash": hashlib.sha256(blob).hexdigest()}
            path = self.data_dir / "snapshots" / f"{self.last_seq:020d}.snap"
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(canonical_json(header) + b"\n" + blob)
            tmp.replace(path)
            return path

    def _latest_snapshot(self) -> tuple[dict, bytes] | None:
        if self.data_dir is None:
            return None
        snaps = sorted((self.data_dir / "snapshots").glob("*.snap"))
        if not snaps:
            return None
        return read_snapshot(snaps[-1])

    def restore(self, header: dict, blob: bytes) -> None:
        with self._lock:
            self._restore_blob(header, blob)

    def _restore_blob(self, header: dict, blob: bytes) -> None:
        if hashlib.sha256(blob).hexdigest() != header["state_hash"]:
            raise HashMismatch("snapshot blob does not match its recorded hash")
        self._reset_state()
        self._load_state(json.loads(blob))
        self.last_seq = header["as_of_seq"]
        self.last_ts = header.get("last_ts", 0)

    # -- apply (pure function of the entry) ------------------------------------------------------

    def _put(self, obj: DigitalObject) -> None:
        old = self.objects.get(obj.handle)
        if isinstance(old, Resource) and old.identity is not None:
            self._identity[old.identity].discard(old.handle)
        self.objects[obj.handle] = obj
        self._json_cache.pop(obj.handle, None)
        if isinstance(obj, Resource) and not obj.deleted and obj.identity is not None:
            self._identity[obj.identity].add(obj.handle)
        if obj.handle.serial >= self.next_serial:
            self.next_serial = obj.handle.serial + 1

    def _apply(self, entry: JournalEntry) -> None:
        if entry.seq <= self.last_seq:
            return
        handler = getattr(self, f"_apply_{entry.op}", None)
        if handler is None:
            raise InvariantViolation(f"unknown journal op {entry.op!r} at seq {entry.seq}")
        handler(entry.payload, entry.timestamp, entry.actor)
        self.last_seq = entry.seq
        self.last_ts = max(self.last_ts, entry.timestamp)
        for fn in self._listeners:
            fn(entry)

    def _apply_bootstrap(self, p: dict, ts: int, actor) -> None:
        obj = object_from_json(p["object"])
        self._put(obj)
        self.admins.add(obj.handle)

    def _apply_create_object(self, p: dict, ts: int, actor) -> None:
        obj = object_from_json(p["object"])
        self._put(obj)
        if isinstance(obj, Metadata):
            provider = Handle.parse(p["provider"])
            self.provenance[obj.handle] = provider
            if obj.external_id is not None:
                self._external[(provider, obj.external_id)] = obj.handle
            self.graph.add(Relationship(obj.handle, METADATA_FOR, obj.target))
            self.graph.add(Relationship(obj.handle, MEMBER_OF, provider))

    def _apply_register_agent(self, p: dict, ts: int, actor) -> None:
        self._put(object_from_json(p["object"]))

    def _apply_set_agent_active(self, p: dict, ts: int, actor) -> None:
        h = Handle.parse(p["handle"])
        self._put(replace(self.objects[h], active=p["active"], modified=max(ts, self.objects[h].modified)))

    def _apply_add_datastream(self, p: dict, ts: int, actor) -> None:
        h = Handle.parse(p["handle"])
        old = self.objects[h]
        streams = dict(old.datastreams)
        streams[p["key"]] = unb64(p["payload"])
        self._put(replace(old, datastreams=dict(sorted(streams.items())), modified=max(ts, old.modified)))

    def _apply_tombstone(self, p: dict, ts: int, actor) -> None:
        h = Handle.parse(p["handle"])
        for r in p["retract"]:
            self.graph.remove(Relationship(Handle.parse(r["s"]), r["p"], Handle.parse(r["o"])))
        old = self.objects[h]
        self._put(replace(old, deleted=True, modified=max(ts, old.modified)))
        self.propagation.pop(h, None)
        self.oai_sets.discard(h)

    def _apply_assert(self, p: dict, ts: int, actor) -> None:
        self.graph.add(Relationship(Handle.parse(p["s"]), p["p"], Handle.parse(p["o"])))

    def _apply_retract(self, p: dict, ts: int, actor) -> None:
        self.graph.remove(Relationship(Handle.parse(p["s"]), p["p"], Handle.parse(p["o"])))

    def _apply_grant(self, p: dict, ts: int, actor) -> None:
        g = _grant_from_json(p)
        self.grants[g.key] = g

    def _apply_revoke(self, p: dict, ts: int, actor) -> None:
        key = (Handle.parse(p["grantee"]), Handle.parse(p["scope"]), Capability(p["capability"]))
        self.grants.pop(key, None)

    def _apply_transfer_owner(self, p: dict, ts: int, actor) -> None:
        h = Handle.parse(p["handle"])
        old = self.objects[h]
        self._put(replace(old, owner=Handle.parse(p["owner"]), modified=max(ts, old.modified)))

    def _apply_register_view(self, p: dict, ts: int, actor) -> None:
        spec = ViewSpec.from_json(p)
        self.views[spec.name] = spec

    def _apply_register_oai_set(self, p: dict, ts: int, actor) -> None:
        self.oai_sets.add(Handle.parse(p["handle"]))

    def _apply_set_propagation(self, p: dict, ts: int, actor) -> None:
        h = Handle.parse(p["handle"])
        if p["fields"]:
            self.propagation[h] = tuple(p["fields"])
        else:
            self.propagation.pop(h, None)

    def _apply_register_harvest_source(self, p: dict, ts: int, actor) -> None:
        src = HarvestSource.from_json(p)
        self.harvest_sources[src.id] = src

    def _apply_harvest_checkpoint(self, p: dict, ts: int, actor) -> None:
        src = self.harvest_sources[p["source"]]
        self.harvest_sources[src.id] = src.with_watermark(p["until"])

    def _apply_load(self, p: dict, ts: int, actor) -> None:
        self._load_state(p)

    def _load_state(self, doc: Mapping) -> None:
        for o in doc.get("objects") or ():
            self._put(object_from_json(o))
        for line in doc.get("triples") or ():
            self.graph.add(Relationship.parse_ntriple(line))
        for g in doc.get("grants") or ():
            grant = _grant_from_json(g)
            self.grants[grant.key] = grant
        self.admins.update(Handle.parse(a) for a in doc.get("admins") or ())
        for v in doc.get("views") or ():
            spec = ViewSpec.from_json(v)
            self.views[spec.name] = spec
        for s in doc.get("harvest_sources") or ():
            src = HarvestSource.from_json(s)
            self.harvest_sources[src.id] = src
        self.oai_sets.update(Handle.parse(h) for h in doc.get("oai_sets") or ())
        for h, fields in (doc.get("propagation") or {}).items():
            self.propagation[Handle.parse(h)] = tuple(fields)
        for m, prov in (doc.get("provenance") or {}).items():
            md, provider = Handle.parse(m), Handle.parse(prov)
            self.provenance[md] = provider
            obj = self.objects.get(md)
            if isinstance(obj, Metadata) and obj.external_id is not None:
                key = (provider, obj.external_id)
                if key not in self._external or self._external[key] < md:
                    self._external[key] = md

    # -- follower path ----------------------------------------------------------------------

    def apply_replicated(self, raw_batch: bytes) -> int:
        """Append and apply records shipped from the leader; returns the new last seq.

        Entries at or below our last seq are skipped, so re-delivery after a
        reconnect is harmless. A checkpoint whose hash disagrees with ours
        raises ``DivergenceDetected``.
        """
        with self._lock:
            verifier = jr.ChainVerifier(self.journal.last_seq, self.journal.last_checksum)
            for rec in jr.decode_records(raw_batch, self.last_seq + 1):
                if rec.type == jr.ENTRY:
                    if rec.seq <= self.last_seq:
                        continue
                    verifier.check(rec)
                    self.journal.append(rec.raw, jr.ENTRY, rec.seq, rec.checksum)
                    self._apply(rec.entry())
                elif rec.seq == self.last_seq and rec.seq not in self.checkpoints:
                    ours = self.state_hash()
                    theirs = rec.state_hash()
                    if ours != theirs:
                        raise DivergenceDetected(rec.seq, ours, theirs)
                    self.checkpoints[rec.seq] = ours
                    self.journal.append(rec.raw, jr.CHECKPOINT, rec.seq)
            self.journal.sync()
            return self.last_seq

    def promote(self) -> None:
        with self._lock:
            self.role = LEADER

    # -- validation & stats ------------------------------------------------------------------

    def validate(self) -> list[str]:
        """Full-repository invariant check; returns human-readable violations."""
        problems: list[str] = []
        with self._lock:
            for h, obj in self.objects.items():
                try:
                    obj.validate()
                except InvariantViolation as exc:
                    problems.append(f"{h}: {exc.message}")
                if isinstance(obj, Aggregation):
                    owner = self.objects.get(obj.owner)
                    if not isinstance(owner, Agent):
                        problems.append(f"{h}: owner {obj.owner} is not an agent")
                if isinstance(obj, Metadata) and not obj.deleted:
                    providers = self.graph.provider_edges(h)
                    if len(providers) != 1:
                        problems.append(f"{h}: has {len(providers)} provider edges")
                    if Relationship(h, METADATA_FOR, obj.target) not in self.graph:
                        problems.append(f"{h}: missing metadataFor edge")
            for rel in self.graph.triples():
                for end in (rel.subject, rel.object):
                    obj = self.objects.get(end)
                    if obj is None or obj.deleted:
                        problems.append(f"dangling edge {rel.ntriple()}")
                if rel.predicate == MEMBER_OF and rel.object.kind not in AGGREGATE_KINDS:
                    problems.append(f"memberOf into non-aggregation {rel.ntriple()}")
            problems.extend(self._cycle_problems())
        return problems

    def _cycle_problems(self) -> list[str]:
        color: dict[Handle, int] = {}
        aggs = [h for h in self.objects if h.kind in AGGREGATE_KINDS]
        for root in aggs:
            if root in color:
                continue
            stack = [(root, iter(sorted(p for p in self.graph.parents(root))))]
            color[root] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[node] = 2
                    stack.pop()
                    continue
                state = color.get(nxt, 0)
                if state == 1:
                    return [f"membership cycle through {nxt}"]
                if state == 0:
                    color[nxt] = 1
                    stack.append((nxt, iter(sorted(self.graph.parents(nxt)))))
        return []

    def stats(self) -> Stats:
        with self._lock:
            counts = dict.fromkeys(Kind, 0)
            tomb = 0
            for h, obj in self.objects.items():
                if obj.deleted:
                    tomb += 1
                else:
                    counts[h.kind] += 1
            return Stats(
                counts[Kind.RESOURCE],
                counts[Kind.METADATA],
                counts[Kind.AGGREGATION],
                counts[Kind.PROVIDER],
                counts[Kind.AGENT],
                len(self.graph),
                self.last_seq,
                tomb,
            )


def _grant_from_json(p: Mapping) -> Grant:
    from .model import parse_ts

    return Grant(
        Handle.parse(p["grantor"]),
        Handle.parse(p["grantee"]),
        Handle.parse(p["scope"]),
        Capability(p["capability"]),
        parse_ts(p["created"]),
    )


def read_snapshot(path: Path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    head, _, blob = data.partition(b"\n")
    return json.loads(head), blob


def replay_journal(records: Iterable[jr.Record], **kwargs) -> Repository:
    """Build a fresh in-memory repository from a record stream."""
    repo = Repository.in_memory(**kwargs)
    repo.role = FOLLOWER
    jr.replay_records(records, repo._apply)
    return repo
