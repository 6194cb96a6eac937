"""Resource-oriented HTTP interface over a repository.

``Api.handle`` is a pure function from ``Request`` to ``Response`` so the
routing, auth and error mapping can be exercised without sockets; ``serve``
puts it behind a threaded stdlib HTTP server.

Mutations need a signed request. Reads are open for anything inside the
configured public view; signed reads see everything.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping
from urllib.parse import parse_qs, urlsplit

from .atom import render_feed
from .errors import (
    AuthMissing,
    BadRequest,
    GrantNotFound,
    MethodNotAllowed,
    NCoreError,
    NoRoute,
    NotFound,
    NotPublic,
    RelationshipNotFound,
    UnknownActor,
)
from .graph import METADATA_FOR, Relationship
from .handles import AGGREGATE_KINDS, Handle, Kind
from .model import unb64
from .policy import HEADER_AGENT, NonceCache, SignedRequest, verify_request
from .replication import LAST_SEQ_HEADER, serve_entries
from .views import ViewSpec, is_in_view, metadata_in_view, resolve_view

log = logging.getLogger(__name__)

JSON = "application/json"
MAX_BODY = 64 * 1024 * 1024
MAX_PAGE_SIZE = 100


@dataclass
class Request:
    method: str
    path: str
    query: dict[str, list[str]] = field(default_factory=dict)
    headers: Mapping[str, str] = field(default_factory=dict)
    body: bytes = b""
    target: str = ""  # path plus query string, as signed by the client

    @classmethod
    def build(cls, method: str, target: str, headers: Mapping[str, str] | None = None, body: bytes = b"") -> Request:
        parts = urlsplit(target)
        query = parse_qs(parts.query, keep_blank_values=True)
        return cls(method.upper(), parts.path, query, dict(headers or {}), body, target)

    def arg(self, name: str, default: str | None = None) -> str | None:
        values = self.query.get(name)
        return values[0] if values else default

    def json(self) -> dict:
        try:
            doc = json.loads(self.body or b"{}")
        except (ValueError, UnicodeDecodeError) as exc:
            raise BadRequest(f"request body is not JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise BadRequest("request body must be a JSON object")
        return doc


@dataclass
class Response:
    status: int
    body: bytes
    content_type: str = JSON
    headers: dict[str, str] = field(default_factory=dict)

    @classmethod
    def of(cls, doc, status: int = 200) -> Response:
        return cls(status, json.dumps(doc, sort_keys=True).encode())

    def json(self):
        return json.loads(self.body)


def _handle(text: str) -> Handle:
    try:
        return Handle.parse(text)
    except (ValueError, TypeError):
        raise NotFound(f"malformed handle {text!r}") from None


def _field(doc: Mapping, name: str) -> str:
    value = doc.get(name)
    if not isinstance(value, str):
        raise BadRequest(f"field {name!r} is required and must be a string")
    return value


def _bool(text: str | None) -> bool:
    if text in (None, "", "false", "0"):
        return False
    if text in ("true", "1"):
        return True
    raise BadRequest(f"expected a boolean, got {text!r}")


def _int(text: str | None, name: str, default: int) -> int:
    if text is None:
        return default
    try:
        return int(text)
    except ValueError:
        raise BadRequest(f"{name} must be an integer") from None


_ROUTES: list[tuple[str, re.Pattern, str]] = []


def route(method: str, pattern: str):
    regex = re.compile("^" + re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", pattern) + "$")

    def deco(fn):
        _ROUTES.append((method, regex, fn.__name__))
        return fn

    return deco


class Api:
    def __init__(
        self,
        repo,
        index=None,
        public_view: str | None = None,
        oai=None,
        follower=None,
        base_url: str = "",
        clock: Callable[[], float] = time.time,
    ):
        self.repo = repo
        self.index = index
        self.public_view = public_view
        self.oai = oai
        self.follower = follower
        self.base_url = base_url
        self.clock = clock
        self.nonces = NonceCache()

    # -- dispatch --------------------------------------------------------------------

    def handle(self, req: Request) -> Response:
        try:
            if req.path == "/oai" and self.oai is not None and req.method in ("GET", "POST"):
                params = req.query if req.method == "GET" else parse_qs(req.body.decode("utf-8", "replace"), keep_blank_values=True)
                return Response(200, self.oai.handle(params), "text/xml; charset=utf-8")
            allowed = []
            for method, regex, name in _ROUTES:
                m = regex.match(req.path)
                if m is None:
                    continue
                if method != req.method:
                    allowed.append(method)
                    continue
                return getattr(self, name)(req, **m.groupdict())
            if allowed:
                raise MethodNotAllowed(f"{req.method} not allowed on {req.path}")
            raise NoRoute(f"no endpoint {req.path}")
        except NCoreError as exc:
            return Response.of(exc.to_dict(), exc.status)
        except Exception:
            log.exception("unhandled error for %s %s", req.method, req.path)
            return Response.of({"code": "engine.error", "message": "internal error"}, 500)

    # -- auth and visibility -------------------------------------------------------------

    def authenticate(self, req: Request, required: bool) -> Handle | None:
        """The verified agent behind ``req``, or None for an anonymous read."""
        if not any(k.lower() == HEADER_AGENT.lower() for k in req.headers):
            if required:
                raise AuthMissing("this endpoint requires a signed request")
            return None
        signed = SignedRequest.from_headers(req.headers)
        agent = self.repo.objects.get(signed.agent)
        if agent is None or signed.agent.kind is not Kind.AGENT or agent.deleted:
            raise UnknownActor(f"unknown agent {signed.agent}", signed.agent)
        verify_request(signed, req.method, req.target or req.path, req.body, agent.public_key, self.nonces, clock=self.clock)
        return signed.agent

    def _view(self) -> ViewSpec | None:
        return self.repo.get_view(self.public_view) if self.public_view else None

    def _public(self, h: Handle) -> bool:
        spec = self._view()
        if spec is None or h not in self.repo.objects or self.repo.objects[h].deleted:
            return False
        if h == spec.in_agg:
            return True
        if h.kind is Kind.METADATA:
            md = self.repo.objects[h]
            return spec.provider_allowed(self.repo.provider_of(h)) and self._public(md.target)
        return is_in_view(self.repo, h, spec)

    def _check_visible(self, agent: Handle | None, h: Handle) -> None:
        self.repo.get_object(h)
        if agent is None and not self._public(h):
            raise NotPublic(f"{h} is not publicly readable", h)

    def _filter(self, agent: Handle | None, handles) -> list[Handle]:
        if agent is not None:
            return sorted(handles)
        return sorted(h for h in handles if self._public(h))

    # -- objects -------------------------------------------------------------------------

    @route("POST", "/objects")
    def create_object(self, req: Request) -> Response:
        agent = self.authenticate(req, True)
        doc = req.json()
        kind = Kind.parse(_field(doc, "kind"))
        if kind is Kind.RESOURCE:
            payload = doc.get("payload")
            h = self.repo.create_resource(
                agent, url=doc.get("url"), payload=unb64(payload) if payload is not None else None, media_type=doc.get("media_type")
            )
        elif kind in AGGREGATE_KINDS:
            owner = doc.get("owner")
            h = self.repo.create_aggregation(agent, _field(doc, "label"), owner=owner, provider=kind is Kind.PROVIDER)
        elif kind is Kind.METADATA:
            streams = doc.get("datastreams")
            if not isinstance(streams, dict):
                raise BadRequest("metadata needs a datastreams object")
            h = self.repo.create_metadata(
                agent,
                _handle(_field(doc, "target")),
                _handle(_field(doc, "provider")),
                {k: unb64(v) for k, v in streams.items()},
                external_id=doc.get("external_id"),
            )
        else:
            raise BadRequest("create agents through POST /agents")
        return Response.of(self.repo.get_object(h).to_json(), 201)

    @route("GET", "/objects/{handle}")
    def get_object(self, req: Request, handle: str) -> Response:
        agent = self.authenticate(req, False)
        h = _handle(handle)
        with self.repo.read():
            self._check_visible(agent, h)
            obj = self.repo.get_object(h)
            return Response.of(obj.to_json(include_payload=not obj.deleted))

    @route("DELETE", "/objects/{handle}")
    def delete_object(self, req: Request, handle: str) -> Response:
        agent = self.authenticate(req, True)
        changed = self.repo.tombstone_object(_handle(handle), agent)
        return Response.of({"code": "object.tombstoned" if changed else "object.idempotent", "handle": handle})

    @route("PUT", "/objects/{handle}/datastreams/{key}")
    def put_datastream(self, req: Request, handle: str, key: str) -> Response:
        agent = self.authenticate(req, True)
        h = _handle(handle)
        self.repo.add_datastream(h, key, req.body, agent)
        return Response.of(self.repo.get_object(h).to_json())

    @route("GET", "/objects/{handle}/ancestors")
    def ancestors(self, req: Request, handle: str) -> Response:
        agent = self.authenticate(req, False)
        h = _handle(handle)
        with self.repo.read():
            self._check_visible(agent, h)
            return Response.of({"handle": handle, "ancestors": [str(a) for a in self._filter(agent, self.repo.ancestors(h))]})

    # -- relationships -------------------------------------------------------------------

    def _rel(self, req: Request) -> Relationship:
        doc = req.json()
        try:
            return Relationship(_handle(_field(doc, "s")), _field(doc, "p"), _handle(_field(doc, "o")))
        except NotFound as exc:
            raise BadRequest(exc.message) from None

    @route("POST", "/relationships")
    def assert_relationship(self, req: Request) -> Response:
        agent = self.authenticate(req, True)
        rel = self._rel(req)
        if self.repo.assert_relationship(rel, agent):
            return Response.of({"code": "graph.asserted", **rel.to_json()}, 201)
        return Response.of({"code": "graph.idempotent", **rel.to_json()})

    @route("DELETE", "/relationships")
    def retract_relationship(self, req: Request) -> Response:
        agent = self.authenticate(req, True)
        rel = self._rel(req)
        try:
            self.repo.retract_relationship(rel, agent)
        except RelationshipNotFound:
            return Response.of({"code": "graph.idempotent", **rel.to_json()})
        return Response.of({"code": "graph.retracted", **rel.to_json()})

    @route("GET", "/aggregations/{handle}/members")
    def members(self, req: Request, handle: str) -> Response:
        agent = self.authenticate(req, False)
        h = _handle(handle)
        transitive = _bool(req.arg("transitive"))
        with self.repo.read():
            self._check_visible(agent, h)
            found = self.repo.transitive_members(h) if transitive else self.repo.direct_members(h)
            return Response.of({"handle": handle, "transitive": transitive, "members": [str(m) for m in self._filter(agent, found)]})

    @route("GET", "/find")
    def find(self, req: Request) -> Response:
        agent = self.authenticate(req, False)
        s, p, o = req.arg("s") or None, req.arg("p") or None, req.arg("o") or None
        with self.repo.read():
            triples = self.repo.find(_handle(s) if s else None, p, _handle(o) if o else None)
            if agent is None:
                triples = [t for t in triples if self._public(t.subject) and self._public(t.object)]
            triples.sort(key=lambda t: t.sort_key)
            return Response.of({"triples": [t.to_json() for t in triples]})

    # -- views ---------------------------------------------------------------------------------

    def _named_view(self, agent: Handle | None, name: str) -> ViewSpec:
        spec = self.repo.get_view(name)
        if agent is None and name != self.public_view:
            raise NotPublic(f"view {name!r} is not public")
        return spec

    @route("GET", "/views/{name}/resolve")
    def resolve(self, req: Request, name: str) -> Response:
        agent = self.authenticate(req, False)
        with self.repo.read():
            spec = self._named_view(agent, name)
            return Response.of({"view": name, "members": [str(h) for h in sorted(resolve_view(self.repo, spec))]})

    @route("GET", "/views/{name}/contains/{handle}")
    def contains(self, req: Request, name: str, handle: str) -> Response:
        agent = self.authenticate(req, False)
        with self.repo.read():
            spec = self._named_view(agent, name)
            return Response.of({"view": name, "handle": handle, "contains": is_in_view(self.repo, _handle(handle), spec)})

    @route("GET", "/resources/{handle}/metadata")
    def resource_metadata(self, req: Request, handle: str) -> Response:
        agent = self.authenticate(req, False)
        h = _handle(handle)
        name = req.arg("view")
        with self.repo.read():
            self._check_visible(agent, h)
            if name:
                mds = metadata_in_view(self.repo, h, self._named_view(agent, name))
            elif agent is None and self._view() is not None:
                mds = metadata_in_view(self.repo, h, self._view())
            else:
                mds = sorted(m for m in self.repo.graph.subjects(METADATA_FOR, h) if not self.repo.objects[m].deleted)
            return Response.of({"handle": handle, "metadata": [self.repo.objects[m].to_json() for m in mds]})

    @route("GET", "/aggregations/{handle}/feed.atom")
    def feed(self, req: Request, handle: str) -> Response:
        agent = self.authenticate(req, False)
        h = _handle(handle)
        page = _int(req.arg("page"), "page", 1)
        if page < 1:
            raise BadRequest("page must be >= 1")
        with self.repo.read():
            self._check_visible(agent, h)
            if h.kind not in AGGREGATE_KINDS:
                raise NotFound(f"{h} is not an aggregation", h)
            if self.repo.objects[h].deleted:
                raise NotFound(f"{h} is tombstoned", h)
            body = render_feed(self.repo, h, self.base_url, page)
        return Response(200, body, "application/atom+xml; charset=utf-8")

    # -- search ---------------------------------------------------------------------------------

    @route("GET", "/search")
    def search(self, req: Request) -> Response:
        from .errors import IndexUnavailable

        agent = self.authenticate(req, False)
        if self.index is None:
            raise IndexUnavailable("no search index is configured")
        q = req.arg("q")
        if not q:
            raise BadRequest("parameter q is required")
        page = _int(req.arg("page"), "page", 1)
        size = _int(req.arg("page_size"), "page_size", 10)
        if page < 1:
            raise BadRequest("page must be >= 1")
        if not 1 <= size <= MAX_PAGE_SIZE:
            raise BadRequest(f"page_size must be between 1 and {MAX_PAGE_SIZE}")
        name = req.arg("view") or (self.public_view if agent is None else None)
        spec = self._named_view(agent, name) if name else None
        agg = req.arg("agg")
        result = self.index.query(q, filter_agg=_handle(agg) if agg else None, view=spec, limit=size, offset=(page - 1) * size)
        doc = result.to_json()
        doc.update(page=page, page_size=size, view=name)
        return Response.of(doc)

    # -- agents and grants ----------------------------------------------------------------------

    @route("POST", "/agents")
    def create_agent(self, req: Request) -> Response:
        agent = self.authenticate(req, True)
        doc = req.json()
        h = self.repo.register_agent(_field(doc, "display_name"), unb64(_field(doc, "public_key")), agent, doc.get("scheme", "ed25519"))
        return Response.of(self.repo.get_object(h).to_json(), 201)

    def _grant_args(self, req: Request) -> tuple[Handle, Handle, str]:
        doc = req.json()
        return _handle(_field(doc, "grantee")), _handle(_field(doc, "scope")), _field(doc, "capability")

    @route("POST", "/grants")
    def grant(self, req: Request) -> Response:
        agent = self.authenticate(req, True)
        grantee, scope, cap = self._grant_args(req)
        try:
            changed = self.repo.grant(agent, grantee, scope, cap)
        except ValueError:
            raise BadRequest(f"unknown capability {cap!r}") from None
        body = {"code": "grant.created" if changed else "grant.idempotent", "grantee": str(grantee), "scope": str(scope), "capability": cap}
        return Response.of(body, 201 if changed else 200)

    @route("DELETE", "/grants")
    def revoke(self, req: Request) -> Response:
        agent = self.authenticate(req, True)
        grantee, scope, cap = self._grant_args(req)
        body = {"grantee": str(grantee), "scope": str(scope), "capability": cap}
        try:
            self.repo.revoke(agent, grantee, scope, cap)
        except GrantNotFound:
            return Response.of({"code": "grant.idempotent", **body})
        except ValueError:
            raise BadRequest(f"unknown capability {cap!r}") from None
        return Response.of({"code": "grant.revoked", **body})

    # -- status and replication -------------------------------------------------------------------

    @route("GET", "/status")
    def status(self, req: Request) -> Response:
        stats = self.repo.stats()
        doc = {
            "role": self.repo.role,
            "last_seq": self.repo.last_seq,
            "lag": self.follower.lag if self.follower is not None else 0,
            "counts": stats.to_json(),
        }
        if self.follower is not None:
            doc["replication"] = self.follower.status()
        return Response.of(doc)

    @route("GET", "/replication/entries")
    def replication_entries(self, req: Request) -> Response:
        start = _int(req.arg("from"), "from", 1)
        try:
            wait = min(30.0, max(0.0, float(req.arg("wait", "0"))))
        except ValueError:
            raise BadRequest("wait must be a number") from None
        limit = max(1, min(10_000, _int(req.arg("max"), "max", 1000)))
        raw, last = serve_entries(self.repo, start, wait, limit)
        return Response(200, raw, "application/octet-stream", {LAST_SEQ_HEADER: str(last)})

    @route("GET", "/replication/checkpoint")
    def replication_checkpoint(self, req: Request) -> Response:
        with self.repo.read():
            return Response.of({"seq": self.repo.last_seq, "state_hash": self.repo.state_hash()})


# -- server ----------------------------------------------------------------------------------


def make_handler(api: Api):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "ncore"

        def _serve(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                resp = Response.of({"code": "api.too_large", "message": "request body too large"}, 413)
                self.close_connection = True
            else:
                body = self.rfile.read(length) if length else b""
                resp = api.handle(Request.build(self.command, self.path, dict(self.headers.items()), body))
            self.send_response(resp.status)
            self.send_header("Content-Type", resp.content_type)
            self.send_header("Content-Length", str(len(resp.body)))
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(resp.body)

        do_GET = do_POST = do_PUT = do_DELETE = _serve

        def log_message(self, fmt, *args) -> None:
            log.info("%s %s", self.address_string(), fmt % args)

    return Handler


def serve(api: Api, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Bind and start serving in a background thread; call ``shutdown()`` to stop."""
    server = ThreadingHTTPServer((host, port), make_handler(api))
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, name="ncore-http", daemon=True).start()
    return server
