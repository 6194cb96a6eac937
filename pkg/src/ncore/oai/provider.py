"""OAI-PMH 2.0 data provider over repository metadata objects.

Each metadata object is one OAI item: identifier ``oai:<repo-id>:<handle>``,
one metadata format per XML datastream (plus ``oai_dc`` derived from
``nsdl_dc``), tombstones as deleted records. Published aggregations are sets.

Datastream payloads are spliced into the response verbatim (only an XML
prolog is dropped), so a harvester can recover them byte for byte. The
envelope uses an ``oai:`` prefix rather than a default namespace so that
spliced payloads never inherit a namespace they did not declare.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Mapping
from urllib.parse import parse_qs

from lxml import etree

from ..graph import METADATA_FOR
from ..handles import Handle, Kind
from ..model import Metadata

OAI_NS = "http://www.openarchives.org/OAI/2.0/"
XSI_NS = "http://www.w3.org/2001/XMLSchema-instance"
OAI_DC_NS = "http://www.openarchives.org/OAI/2.0/oai_dc/"
DC_NS = "http://purl.org/dc/elements/1.1/"
SCHEMA_LOCATION = f"{OAI_NS} http://www.openarchives.org/OAI/2.0/OAI-PMH.xsd"
GRANULARITY = "YYYY-MM-DDThh:mm:ssZ"

KNOWN_FORMATS = {
    "oai_dc": ("http://www.openarchives.org/OAI/2.0/oai_dc.xsd", OAI_DC_NS),
    "nsdl_dc": ("http://ns.nsdl.org/schemas/nsdl_dc/nsdl_dc_v1.02.xsd", "http://ns.nsdl.org/nsdl_dc_v1.02/"),
}

VERBS = {
    "Identify": (set(), set()),
    "ListMetadataFormats": (set(), {"identifier"}),
    "ListSets": (set(), set()),
    "GetRecord": ({"identifier", "metadataPrefix"}, set()),
    "ListIdentifiers": ({"metadataPrefix"}, {"from", "until", "set"}),
    "ListRecords": ({"metadataPrefix"}, {"from", "until", "set"}),
}
RESUMABLE = {"ListIdentifiers", "ListRecords", "ListSets"}

_DAY_RE = re.compile(r"\d{4}-\d{2}-\d{2}\Z")
_SECOND_RE = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z\Z")
_PARSER = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=True)


class OaiError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def datestamp(us: int) -> str:
    return datetime.fromtimestamp(us // 1_000_000, timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_datestamp(text: str, end_of_day: bool = False) -> tuple[int, str]:
    """Seconds since the epoch plus granularity (``day`` or ``second``)."""
    if _DAY_RE.match(text):
        try:
            dt = datetime.strptime(text, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        except ValueError:
            raise OaiError("badArgument", f"invalid date {text!r}") from None
        secs = int(dt.timestamp())
        return (secs + 86399 if end_of_day else secs), "day"
    if _SECOND_RE.match(text):
        try:
            dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
        except ValueError:
            raise OaiError("badArgument", f"invalid datestamp {text!r}") from None
        return int(dt.timestamp()), "second"
    raise OaiError("badArgument", f"invalid datestamp {text!r}")


def set_spec(h: Handle) -> str:
    return str(h).replace(":", "_")


def parse_set_spec(spec: str) -> Handle | None:
    try:
        return Handle.parse(spec.replace("_", ":"))
    except ValueError:
        return None


def _root_text(payload: bytes) -> str | None:
    """The payload's root element as text, or None if it is not XML."""
    try:
        root = etree.fromstring(payload, _PARSER)
    except (etree.XMLSyntaxError, ValueError):
        return None
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError:
        return etree.tostring(root, encoding="unicode")
    body = text.strip()
    if body.startswith("<?") or body.startswith("<!") or body.startswith("﻿"):
        return etree.tostring(root, encoding="unicode")
    return body


def derive_oai_dc(nsdl_dc: bytes) -> str:
    """Simple Dublin Core view of an nsdl_dc record: its dc:* elements only."""
    src = etree.fromstring(nsdl_dc, _PARSER)
    dc = etree.Element(f"{{{OAI_DC_NS}}}dc", nsmap={"oai_dc": OAI_DC_NS, "dc": DC_NS, "xsi": XSI_NS})
    dc.set(f"{{{XSI_NS}}}schemaLocation", f"{OAI_DC_NS} {KNOWN_FORMATS['oai_dc'][0]}")
    for el in src.iter(f"{{{DC_NS}}}*"):
        child = etree.SubElement(dc, el.tag)
        child.text = "".join(el.itertext())
    return etree.tostring(dc, encoding="unicode")


@dataclass(frozen=True)
class _Item:
    obj: Metadata
    sets: tuple[str, ...]
    stamp: str


@dataclass
class _Listing:
    verb: str
    prefix: str
    filters: dict
    items: list
    seq: int
    expires: float


class OaiProvider:
    def __init__(
        self,
        repo,
        repo_id: str,
        base_url: str = "http://localhost/oai",
        admin_email: str = "admin@example.org",
        repository_name: str | None = None,
        batch_size: int = 100,
        token_ttl: float = 24 * 3600,
        clock: Callable[[], float] = time.time,
        max_cached_lists: int = 256,
    ):
        self.repo = repo
        self.repo_id = repo_id
        self.base_url = base_url
        self.admin_email = admin_email
        self.repository_name = repository_name or f"NCore repository {repo_id}"
        self.batch_size = batch_size
        self.token_ttl = token_ttl
        self.clock = clock
        self.max_cached_lists = max_cached_lists
        self._lists: OrderedDict[str, _Listing] = OrderedDict()
        self._lock = threading.Lock()
        self._xml_ok: dict[tuple[Handle, str, int], str | None] = {}

    # -- entry points --------------------------------------------------------------

    def handle_query(self, query: str) -> bytes:
        return self.handle(parse_qs(query, keep_blank_values=True))

    def handle(self, params: Mapping[str, str | list[str]]) -> bytes:
        args: dict[str, str] = {}
        repeated = False
        for k, v in params.items():
            values = [v] if isinstance(v, str) else list(v)
            if len(values) != 1:
                repeated = True
            args[k] = values[0] if values else ""
        verb = args.get("verb")
        resp = _Response(self, args)
        try:
            if repeated:
                raise OaiError("badArgument", "repeated argument")
            if verb not in VERBS:
                raise OaiError("badVerb", f"illegal OAI verb {verb!r}")
            self._check_args(verb, args)
            getattr(self, f"_{verb}")(args, resp)
        except OaiError as exc:
            resp.error(exc.code, exc.message)
        return resp.serialize()

    def _check_args(self, verb: str, args: dict[str, str]) -> None:
        required, optional = VERBS[verb]
        given = set(args) - {"verb"}
        if "resumptionToken" in given:
            if verb not in RESUMABLE or given != {"resumptionToken"}:
                raise OaiError("badArgument", "resumptionToken is an exclusive argument")
            return
        unknown = given - required - optional
        if unknown:
            raise OaiError("badArgument", f"illegal argument {sorted(unknown)[0]!r}")
        missing = required - given
        if missing:
            raise OaiError("badArgument", f"missing argument {sorted(missing)[0]!r}")

    # -- helpers -------------------------------------------------------------------------

    def identifier(self, md: Handle) -> str:
        return f"oai:{self.repo_id}:{md}"

    def _lookup(self, identifier: str) -> Metadata:
        prefix = f"oai:{self.repo_id}:"
        if identifier.startswith(prefix):
            try:
                h = Handle.parse(identifier[len(prefix) :])
            except ValueError:
                h = None
            if h is not None and h.kind is Kind.METADATA:
                obj = self.repo.objects.get(h)
                if obj is not None:
                    return obj
        raise OaiError("idDoesNotExist", f"unknown identifier {identifier!r}")

    def payload(self, obj: Metadata, prefix: str) -> str | None:
        """Root-element text of ``obj`` in format ``prefix``, or None."""
        key = (obj.handle, prefix, obj.modified)
        if key in self._xml_ok:
            return self._xml_ok[key]
        text = None
        if prefix in obj.datastreams:
            text = _root_text(obj.datastreams[prefix])
        elif prefix == "oai_dc" and "nsdl_dc" in obj.datastreams and _root_text(obj.datastreams["nsdl_dc"]):
            text = derive_oai_dc(obj.datastreams["nsdl_dc"])
        if len(self._xml_ok) > 100_000:
            self._xml_ok.clear()
        self._xml_ok[key] = text
        return text

    def formats_of(self, obj: Metadata) -> list[str]:
        keys = [k for k in obj.datastreams if self.payload(obj, k) is not None]
        if "oai_dc" not in keys and self.payload(obj, "oai_dc") is not None:
            keys.append("oai_dc")
        return sorted(keys)

    def _format_info(self, prefix: str, sample: Metadata | None) -> tuple[str, str]:
        if prefix in KNOWN_FORMATS:
            return KNOWN_FORMATS[prefix]
        ns = f"urn:ncore:format:{prefix}"
        if sample is not None and prefix in sample.datastreams:
            try:
                root = etree.fromstring(sample.datastreams[prefix], _PARSER)
                ns = etree.QName(root).namespace or ns
            except etree.XMLSyntaxError:
                pass
        return f"urn:ncore:schema:{prefix}", ns

    def _sets_of(self, repo, obj: Metadata) -> tuple[str, ...]:
        live_sets = {s for s in repo.oai_sets if not repo.objects[s].deleted}
        if not live_sets:
            return ()
        graph = repo.graph
        # a tombstone has lost its own memberOf edges; only its target's remain
        anc = set(graph.ancestors(obj.target))
        if not obj.deleted:
            anc |= graph.ancestors(obj.handle)
        return tuple(sorted(set_spec(s) for s in anc & live_sets))

    def _earliest(self) -> str:
        stamps = [o.modified for h, o in self.repo.objects.items() if h.kind is Kind.METADATA]
        if stamps:
            return datestamp(min(stamps))
        return datestamp(self.repo.last_ts or 0)

    # -- verbs -----------------------------------------------------------------------------

    def _Identify(self, args, resp) -> None:
        with self.repo.read():
            earliest = self._earliest()
        el = resp.verb_element("Identify")
        for tag, text in (
            ("repositoryName", self.repository_name),
            ("baseURL", self.base_url),
            ("protocolVersion", "2.0"),
            ("adminEmail", self.admin_email),
            ("earliestDatestamp", earliest),
            ("deletedRecord", "persistent"),
            ("granularity", GRANULARITY),
        ):
            resp.sub(el, tag, text)

    def _ListMetadataFormats(self, args, resp) -> None:
        with self.repo.read():
            if "identifier" in args:
                obj = self._lookup(args["identifier"])
                samples = {p: obj for p in self.formats_of(obj)}
            else:
                samples = {}
                for h, obj in sorted(self.repo.objects.items()):
                    if h.kind is Kind.METADATA:
                        for p in self.formats_of(obj):
                            samples.setdefault(p, obj)
        if not samples:
            raise OaiError("noMetadataFormats", "no metadata formats available")
        el = resp.verb_element("ListMetadataFormats")
        for prefix in sorted(samples):
            schema, ns = self._format_info(prefix, samples[prefix])
            fmt = resp.sub(el, "metadataFormat")
            resp.sub(fmt, "metadataPrefix", prefix)
            resp.sub(fmt, "schema", schema)
            resp.sub(fmt, "metadataNamespace", ns)

    def _ListSets(self, args, resp) -> None:
        if "resumptionToken" in args:
            raise OaiError("badResumptionToken", "ListSets is never paged")
        with self.repo.read():
            sets = sorted(s for s in self.repo.oai_sets if not self.repo.objects[s].deleted)
            labels = {s: self.repo.objects[s].label for s in sets}
        if not sets:
            raise OaiError("noSetHierarchy", "this repository has no sets")
        el = resp.verb_element("ListSets")
        for s in sets:
            node = resp.sub(el, "set")
            resp.sub(node, "setSpec", set_spec(s))
            resp.sub(node, "setName", labels[s])

    def _GetRecord(self, args, resp) -> None:
        prefix = args["metadataPrefix"]
        with self.repo.read():
            obj = self._lookup(args["identifier"])
            if prefix not in self.formats_of(obj):
                raise OaiError("cannotDisseminateFormat", f"{prefix!r} is not available for this item")
            item = _Item(obj, self._sets_of(self.repo, obj), datestamp(obj.modified))
        el = resp.verb_element("GetRecord")
        resp.record(el, item, prefix)

    def _ListIdentifiers(self, args, resp) -> None:
        self._list("ListIdentifiers", args, resp)

    def _ListRecords(self, args, resp) -> None:
        self._list("ListRecords", args, resp)

    def _select(self, repo, prefix: str, filters: dict) -> list[_Item]:
        frm, until, set_arg = filters.get("from"), filters.get("until"), filters.get("set")
        lo = hi = None
        gran = set()
        if frm is not None:
            lo, g = parse_datestamp(frm)
            gran.add(g)
        if until is not None:
            hi, g = parse_datestamp(until, end_of_day=True)
            gran.add(g)
        if len(gran) > 1:
            raise OaiError("badArgument", "from and until have different granularities")
        if set_arg is not None:
            target = parse_set_spec(set_arg)
            if target is None or target not in repo.oai_sets:
                raise OaiError("noRecordsMatch", f"no set {set_arg!r}")
        items = []
        known_prefix = False
        for h, obj in sorted(repo.objects.items()):
            if h.kind is not Kind.METADATA:
                continue
            if self.payload(obj, prefix) is None:
                continue
            known_prefix = True
            secs = obj.modified // 1_000_000
            if (lo is not None and secs < lo) or (hi is not None and secs > hi):
                continue
            sets = self._sets_of(repo, obj)
            if set_arg is not None and set_arg not in sets:
                continue
            items.append(_Item(obj, sets, datestamp(obj.modified)))
        if not items:
            if not known_prefix and prefix not in KNOWN_FORMATS:
                raise OaiError("cannotDisseminateFormat", f"unknown metadata format {prefix!r}")
            raise OaiError("noRecordsMatch", "no records match the request")
        return items

    def _list(self, verb: str, args, resp) -> None:
        if "resumptionToken" in args:
            listing, cursor, token_id = self._resume(verb, args["resumptionToken"])
        else:
            prefix = args["metadataPrefix"]
            filters = {k: args[k] for k in ("from", "until", "set") if k in args}
            with self.repo.read():
                items = self._select(self.repo, prefix, filters)
                seq = self.repo.last_seq
            listing = _Listing(verb, prefix, filters, items, seq, self.clock() + self.token_ttl)
            cursor, token_id = 0, None
        page = listing.items[cursor : cursor + self.batch_size]
        el = resp.verb_element(verb)
        for item in page:
            if verb == "ListRecords":
                resp.record(el, item, listing.prefix)
            else:
                resp.header(el, item)
        nxt = cursor + len(page)
        if nxt < len(listing.items) or cursor > 0:
            token = ""
            if nxt < len(listing.items):
                token_id = token_id or self._remember(listing)
                token = self._encode_token(token_id, nxt, listing)
            rt = resp.sub(el, "resumptionToken", token)
            rt.set("completeListSize", str(len(listing.items)))
            rt.set("cursor", str(cursor))
            if token:
                rt.set("expirationDate", datestamp(int(listing.expires * 1_000_000)))

    # -- resumption tokens ----------------------------------------------------------------------

    def _remember(self, listing: _Listing) -> str:
        token_id = uuid.uuid4().hex[:16]
        with self._lock:
            self._lists[token_id] = listing
            now = self.clock()
            for k in [k for k, v in self._lists.items() if v.expires < now]:
                del self._lists[k]
            while len(self._lists) > self.max_cached_lists:
                self._lists.popitem(last=False)
        return token_id

    @staticmethod
    def _encode_token(token_id: str, cursor: int, listing: _Listing) -> str:
        doc = {
            "id": token_id,
            "c": cursor,
            "seq": listing.seq,
            "v": listing.verb,
            "p": listing.prefix,
            "f": listing.filters,
            "e": int(listing.expires),
        }
        raw = json.dumps(doc, separators=(",", ":"), sort_keys=True).encode()
        return base64.urlsafe_b64encode(raw).decode().rstrip("=")

    @staticmethod
    def _decode_token(token: str) -> dict:
        try:
            raw = base64.urlsafe_b64decode(token + "=" * (-len(token) % 4))
            doc = json.loads(raw)
            if not isinstance(doc, dict):
                raise ValueError
            if not all(isinstance(doc.get(k), int) for k in ("c", "seq", "e")):
                raise ValueError
            if not all(isinstance(doc.get(k), str) for k in ("id", "v", "p")):
                raise ValueError
            f = doc.get("f")
            if not isinstance(f, dict) or set(f) - {"from", "until", "set"}:
                raise ValueError
            if not all(isinstance(v, str) for v in f.values()):
                raise ValueError
            return doc
        except (ValueError, TypeError, UnicodeDecodeError):
            raise OaiError("badResumptionToken", "malformed resumption token") from None

    def _resume(self, verb: str, token: str) -> tuple[_Listing, int, str]:
        doc = self._decode_token(token)
        if doc["v"] != verb:
            raise OaiError("badResumptionToken", "token was issued for a different verb")
        if doc["e"] < self.clock():
            raise OaiError("badResumptionToken", "resumption token has expired")
        with self._lock:
            listing = self._lists.get(doc["id"])
        if listing is None:
            listing = self._rebuild_listing(doc)
            with self._lock:
                self._lists[doc["id"]] = listing
        if not 0 < doc["c"] < len(listing.items):
            raise OaiError("badResumptionToken", "cursor out of range")
        return listing, doc["c"], doc["id"]

    def _rebuild_listing(self, doc: dict) -> _Listing:
        """Recompute a list that fell out of the cache, as of the token's seq."""
        from ..journal import ENTRY
        from ..repository import replay_journal

        seq = doc["seq"]
        with self.repo.read():
            if seq > self.repo.last_seq:
                raise OaiError("badResumptionToken", "token refers to an unknown state")
            if seq == self.repo.last_seq:
                past = self.repo
            else:
                records = [r for r in self.repo.journal.iter_records() if r.seq <= seq and r.type == ENTRY]
                past = None
            try:
                if past is None:
                    past = replay_journal(records)
                items = self._select(past, doc["p"], doc["f"])
            except OaiError:
                raise OaiError("badResumptionToken", "token no longer matches any records") from None
        return _Listing(doc["v"], doc["p"], doc["f"], items, seq, float(doc["e"]))


class _Response:
    """Builds one OAI-PMH response; payloads are spliced in at serialization."""

    def __init__(self, provider: OaiProvider, args: dict[str, str]):
        self.provider = provider
        self.args = args
        self.root = etree.Element(self.q("OAI-PMH"), nsmap={"oai": OAI_NS, "xsi": XSI_NS})
        self.root.set(f"{{{XSI_NS}}}schemaLocation", SCHEMA_LOCATION)
        self.sub(self.root, "responseDate", datestamp(int(provider.clock() * 1_000_000)))
        self.request = self.sub(self.root, "request", provider.base_url)
        self.errors: list[tuple[str, str]] = []
        self.body = None
        self.marker = "NCOREPAYLOAD" + uuid.uuid4().hex
        self.payloads: list[str] = []

    @staticmethod
    def q(tag: str) -> str:
        return f"{{{OAI_NS}}}{tag}"

    def sub(self, parent, tag: str, text: str | None = None):
        el = etree.SubElement(parent, self.q(tag))
        if text is not None:
            el.text = text
        return el

    def verb_element(self, verb: str):
        self.body = self.sub(self.root, verb)
        return self.body

    def error(self, code: str, message: str) -> None:
        self.errors.append((code, message))

    def header(self, parent, item: _Item):
        h = self.sub(parent, "header")
        if item.obj.deleted:
            h.set("status", "deleted")
        self.sub(h, "identifier", self.provider.identifier(item.obj.handle))
        self.sub(h, "datestamp", item.stamp)
        for s in item.sets:
            self.sub(h, "setSpec", s)
        return h

    def record(self, parent, item: _Item, prefix: str) -> None:
        rec = self.sub(parent, "record")
        self.header(rec, item)
        if not item.obj.deleted:
            text = self.provider.payload(item.obj, prefix)
            self.sub(rec, "metadata", f"{self.marker}{len(self.payloads)}X")
            self.payloads.append(text)

    def serialize(self) -> bytes:
        if self.errors:
            if self.body is not None:
                self.root.remove(self.body)
            for code, message in self.errors:
                el = self.sub(self.root, "error", message)
                el.set("code", code)
        codes = {c for c, _ in self.errors}
        if not codes & {"badVerb", "badArgument"}:
            for k, v in sorted(self.args.items()):
                self.request.set(k, v)
        text = etree.tostring(self.root, xml_declaration=True, encoding="UTF-8").decode("utf-8")
        for i, payload in enumerate(self.payloads):
            text = text.replace(f"{self.marker}{i}X", payload, 1)
        return text.encode("utf-8")
