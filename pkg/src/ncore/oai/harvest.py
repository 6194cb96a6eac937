"""Harvest remote OAI-PMH feeds into providers, aggregations, resources and metadata.

Each source gets its own metadata provider and two aggregations (harvested
resources and harvested metadata records), all owned by the harvesting agent.
Records are upserted by their OAI identifier, so re-harvesting the same feed
is idempotent. The watermark advances only after a harvest completes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
import urllib.error
import urllib.request
import xml.parsers.expat
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable
from urllib.parse import urlencode

from croniter import croniter
from lxml import etree

from ..errors import (
    HarvestNetworkError,
    HarvestProtocolError,
    HarvestSourceExists,
    NCoreError,
    UnparseableURL,
    WatermarkRegression,
)
from ..graph import MEMBER_OF, Relationship
from ..handles import Handle
from ..model import URN_MEDIA_TYPE
from ..urls import normalize_url
from .provider import DC_NS, OAI_NS
from .source import HarvestSource

log = logging.getLogger(__name__)

Fetch = Callable[[str], bytes]
_PARSER = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=True)
_SOURCE_FIELDS = {"base_url", "metadata_prefix", "organization", "set_spec", "schedule", "id"}


def urllib_fetch(url: str, timeout: float = 60.0) -> bytes:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.read()
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise HarvestNetworkError(f"fetching {url} failed: {exc}") from None


def source_id_for(organization: str, base_url: str, set_spec: str | None) -> str:
    key = json.dumps([organization, base_url, set_spec])
    return hashlib.sha1(key.encode()).hexdigest()[:10]


def metadata_slices(body: bytes) -> list[bytes]:
    """Exact bytes of the child of every ``<metadata>`` element, in document order."""
    meta = f"{OAI_NS} metadata"
    parser = xml.parsers.expat.ParserCreate(namespace_separator=" ")
    out: list[bytes] = []
    depth = 0
    inside: int | None = None  # depth of the open <metadata>
    start = -1

    def on_start(name, attrs):
        nonlocal depth, inside, start
        depth += 1
        if inside is None and name == meta:
            inside = depth
        elif inside is not None and depth == inside + 1:
            start = parser.CurrentByteIndex

    def on_end(name):
        nonlocal depth, inside
        if inside is not None and depth == inside + 1:
            # for <x/> expat reports the offset just past the tag, else that of "</x>"
            idx = parser.CurrentByteIndex
            tag_end = _tag_end(body, start)
            if tag_end == idx and body[idx - 2 : idx] == b"/>":
                out.append(body[start:idx])
            else:
                out.append(body[start : body.index(b">", idx) + 1])
        elif inside is not None and depth == inside:
            inside = None
        depth -= 1

    parser.StartElementHandler = on_start
    parser.EndElementHandler = on_end
    try:
        parser.Parse(body, True)
    except xml.parsers.expat.ExpatError as exc:
        raise HarvestProtocolError(f"malformed OAI-PMH response: {exc}") from None
    return out


def _tag_end(body: bytes, start: int) -> int:
    """Offset just past the start tag at ``start``, skipping quoted attribute values."""
    quote = None
    i = start
    while True:
        c = body[i : i + 1]
        if quote:
            if c == quote:
                quote = None
        elif c in (b'"', b"'"):
            quote = c
        elif c == b">":
            return i + 1
        i += 1


@dataclass
class HarvestRecord:
    identifier: str
    datestamp: str
    deleted: bool
    payload: bytes | None


@dataclass
class HarvestReport:
    source: str
    requests: int = 0
    created: int = 0
    updated: int = 0
    unchanged: int = 0
    deleted: int = 0
    skipped_deletions: int = 0
    watermark: str | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _q(tag: str) -> str:
    return f"{{{OAI_NS}}}{tag}"


def parse_page(body: bytes) -> tuple[str, list[HarvestRecord], str | None, str | None]:
    """(responseDate, records, resumption token, error code) for one response."""
    try:
        root = etree.fromstring(body, _PARSER)
    except etree.XMLSyntaxError as exc:
        raise HarvestProtocolError(f"malformed OAI-PMH response: {exc}") from None
    if root.tag != _q("OAI-PMH"):
        raise HarvestProtocolError(f"not an OAI-PMH response: root is {root.tag}")
    response_date = (root.findtext(_q("responseDate")) or "").strip()
    err = root.find(_q("error"))
    if err is not None:
        return response_date, [], None, err.get("code") or "unknown"
    body_el = root.find(_q("ListRecords"))
    if body_el is None:
        raise HarvestProtocolError("response has no ListRecords element")
    slices = iter(metadata_slices(body))
    records = []
    for rec in body_el.iterfind(_q("record")):
        header = rec.find(_q("header"))
        if header is None:
            raise HarvestProtocolError("record without header")
        ident = (header.findtext(_q("identifier")) or "").strip()
        stamp = (header.findtext(_q("datestamp")) or "").strip()
        deleted = header.get("status") == "deleted"
        payload = None
        if rec.find(_q("metadata")) is not None:
            payload = next(slices, None)
            if payload is None:
                raise HarvestProtocolError(f"empty metadata element in {ident}")
        if not deleted and payload is None:
            raise HarvestProtocolError(f"record {ident} has no metadata")
        records.append(HarvestRecord(ident, stamp, deleted, payload))
    tok = body_el.find(_q("resumptionToken"))
    token = tok.text.strip() if tok is not None and tok.text and tok.text.strip() else None
    return response_date, records, token, None


def _stamp_key(stamp: str) -> str:
    """Comparable form of a day- or second-granularity datestamp."""
    return stamp if "T" in stamp else stamp + "T00:00:00Z"


class Harvester:
    _locks: dict[str, threading.Lock] = {}
    _locks_guard = threading.Lock()

    def __init__(self, repo, actor: Handle, fetch: Fetch | None = None):
        self.repo = repo
        self.actor = actor
        self.fetch = fetch or urllib_fetch

    # -- sources ---------------------------------------------------------------------

    def add_source(
        self,
        base_url: str,
        metadata_prefix: str,
        organization: str,
        set_spec: str | None = None,
        schedule: str = "0 2 * * *",
        id: str | None = None,
    ) -> HarvestSource:
        if not croniter.is_valid(schedule):
            raise NCoreError(f"invalid cron schedule {schedule!r}")
        identity = (organization, base_url, set_spec)
        sid = id or source_id_for(*identity)
        for other in self.repo.harvest_sources.values():
            if other.id == sid or other.identity == identity:
                raise HarvestSourceExists(f"harvest source {other.id!r} already covers this feed")
        repo, actor = self.repo, self.actor
        with repo.batch():
            provider = repo.create_aggregation(actor, f"{organization} (harvested metadata provider)", provider=True)
            resources = repo.create_aggregation(actor, f"{organization} harvested resources")
            records = repo.create_aggregation(actor, f"{organization} harvested records")
            source = HarvestSource(sid, base_url, metadata_prefix, organization, provider, resources, records, set_spec, schedule)
            repo.register_harvest_source(source, actor)
        return source

    def sync_config(self, path: str | Path) -> list[HarvestSource]:
        """Register every source listed in a JSON config file that is not yet known."""
        added = []
        for doc in load_source_config(path):
            identity = (doc["organization"], doc["base_url"], doc.get("set_spec"))
            if any(s.identity == identity for s in self.repo.harvest_sources.values()):
                continue
            added.append(self.add_source(**doc))
        return added

    @classmethod
    def _lock_for(cls, source_id: str) -> threading.Lock:
        with cls._locks_guard:
            return cls._locks.setdefault(source_id, threading.Lock())

    # -- harvesting ---------------------------------------------------------------------

    def harvest(self, source_id: str, until: str | None = None, full: bool = False) -> HarvestReport:
        """Incremental from the watermark, or from scratch with ``full``."""
        lock = self._lock_for(source_id)
        if not lock.acquire(blocking=False):
            raise NCoreError(f"harvest of {source_id!r} is already running")
        try:
            return self._harvest(self.repo.harvest_sources[source_id], until, full)
        finally:
            lock.release()

    def _harvest(self, source: HarvestSource, until: str | None, full: bool) -> HarvestReport:
        report = HarvestReport(source.id)
        prior = source.last_successful_until
        watermark = prior
        params = {"verb": "ListRecords", "metadataPrefix": source.metadata_prefix}
        if source.set_spec:
            params["set"] = source.set_spec
        if prior and not full:
            params["from"] = prior
        if until:
            params["until"] = until
        while True:
            body = self.fetch(f"{source.base_url}?{urlencode(params)}")
            report.requests += 1
            response_date, records, token, error = parse_page(body)
            if prior and response_date and _stamp_key(response_date) < _stamp_key(prior):
                raise WatermarkRegression(f"source clock {response_date} is behind watermark {prior}")
            if error == "noRecordsMatch":
                break
            if error is not None:
                raise HarvestProtocolError(f"source answered with OAI error {error}")
            with self.repo.batch():
                for rec in records:
                    self._ingest(source, rec, report)
                    if watermark is None or _stamp_key(rec.datestamp) > _stamp_key(watermark):
                        watermark = rec.datestamp
            if token is None:
                break
            params = {"verb": "ListRecords", "resumptionToken": token}
        report.watermark = watermark
        if watermark is not None and watermark != prior:
            self.repo.harvest_checkpoint(source.id, watermark, self.actor)
        return report

    def _resource_for(self, rec: HarvestRecord) -> Handle:
        repo, actor = self.repo, self.actor
        for url in _identifier_urls(rec.payload):
            found = repo.find_resource(url)
            if found is not None:
                return found
            return repo.create_resource(actor, url=url)
        urn = f"urn:oai-record:{rec.identifier}"
        found = repo.find_resource(urn)
        if found is not None:
            return found
        return repo.create_resource(actor, payload=urn.encode(), media_type=URN_MEDIA_TYPE)

    def _ingest(self, source: HarvestSource, rec: HarvestRecord, report: HarvestReport) -> None:
        repo, actor = self.repo, self.actor
        existing = repo.find_metadata(source.provider, rec.identifier)
        live = existing is not None and not repo.objects[existing].deleted
        if rec.deleted:
            if live:
                repo.tombstone_object(existing, actor)
                report.deleted += 1
            else:
                report.skipped_deletions += 1
            return
        resource = self._resource_for(rec)
        key = source.metadata_prefix
        if live and repo.objects[existing].target != resource:
            repo.tombstone_object(existing, actor)
            live = False
        if live:
            md = existing
            if repo.objects[md].datastreams.get(key) == rec.payload:
                report.unchanged += 1
            else:
                repo.add_datastream(md, key, rec.payload, actor)
                report.updated += 1
        else:
            md = repo.create_metadata(actor, resource, source.provider, {key: rec.payload}, external_id=rec.identifier)
            report.created += 1
        repo.assert_relationship(Relationship(resource, MEMBER_OF, source.resource_agg), actor)
        repo.assert_relationship(Relationship(md, MEMBER_OF, source.metadata_agg), actor)


def _identifier_urls(payload: bytes) -> Iterable[str]:
    try:
        root = etree.fromstring(payload, _PARSER)
    except etree.XMLSyntaxError:
        return
    for el in root.iter(f"{{{DC_NS}}}identifier"):
        text = (el.text or "").strip()
        if text.lower().startswith(("http://", "https://")):
            try:
                yield normalize_url(text)
            except UnparseableURL:
                continue


def load_source_config(path: str | Path) -> list[dict]:
    """Read a JSON list of harvest source definitions."""
    docs = json.loads(Path(path).read_text())
    if not isinstance(docs, list):
        raise NCoreError("harvest config must be a JSON list")
    out = []
    for i, doc in enumerate(docs):
        if not isinstance(doc, dict):
            raise NCoreError(f"harvest config entry {i} is not an object")
        missing = {"base_url", "metadata_prefix", "organization"} - set(doc)
        unknown = set(doc) - _SOURCE_FIELDS
        if missing or unknown:
            raise NCoreError(f"harvest config entry {i}: missing {sorted(missing)}, unknown {sorted(unknown)}")
        out.append(dict(doc))
    return out


@dataclass
class HarvestScheduler:
    """Runs each source on its cron schedule; a missed window runs once on startup."""

    harvester: Harvester
    state_path: Path
    clock: Callable[[], float] = time.time
    last_run: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.state_path = Path(self.state_path)
        if self.state_path.exists():
            self.last_run = {k: float(v) for k, v in json.loads(self.state_path.read_text()).items()}

    def _save(self) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.last_run, sort_keys=True))
        tmp.replace(self.state_path)

    def due(self, now: float | None = None) -> list[str]:
        now = self.clock() if now is None else now
        out = []
        for sid, source in sorted(self.harvester.repo.harvest_sources.items()):
            last = self.last_run.get(sid)
            if last is None:
                out.append(sid)
                continue
            start = datetime.fromtimestamp(last, timezone.utc)
            if croniter(source.schedule, start).get_next(float) <= now:
                out.append(sid)
        return out

    def run_pending(self) -> dict[str, HarvestReport | Exception]:
        results: dict[str, HarvestReport | Exception] = {}
        for sid in self.due():
            now = self.clock()
            try:
                results[sid] = self.harvester.harvest(sid)
            except NCoreError as exc:
                log.warning("harvest of %s failed: %s", sid, exc)
                results[sid] = exc
            self.last_run[sid] = now
            self._save()
        return results

    def run_forever(self, stop: threading.Event, poll: float = 30.0) -> None:
        while not stop.is_set():
            self.run_pending()
            stop.wait(poll)
