from __future__ import annotations

import base64
import copy
import json
import urllib.request
from pathlib import Path

import pytest
from lxml import etree

from ncore.api import Api, Request, serve
from ncore.atom import ATOM_NS
from ncore.graph import MEMBER_OF, Relationship
from ncore.handles import Handle
from ncore.oai.provider import OaiProvider
from ncore.policy import generate_keypair, sign_request
from ncore.replication import Follower, HttpTransport
from ncore.repository import FOLLOWER, Repository, replay_journal
from ncore.search.index import SearchIndex
from ncore.views import ViewSpec

from conftest import T0, FakeClock, build_reference_graph, dc

ATOM = etree.RelaxNG(etree.parse(str(Path(__file__).parent / "data" / "atom.rng")))
NOW = T0 / 1e6 + 3600


class Client:
    def __init__(self, api: Api, keys: dict):
        self.api = api
        self.keys = keys

    def __call__(self, method: str, target: str, body=None, agent: Handle | None = None, raw: bytes | None = None):
        data = raw if raw is not None else (json.dumps(body).encode() if body is not None else b"")
        headers = {}
        if agent is not None:
            headers = sign_request(self.keys[agent], agent, method, target, data, now=NOW)
        return self.api.handle(Request.build(method, target, headers, data))


def setup(clock=None):
    f = build_reference_graph(clock or FakeClock())
    repo = f.repo
    repo.register_view(ViewSpec("public", f.nsdl), f.admin)
    prov = repo.create_aggregation(f.admin, "Main provider", provider=True)
    for i, r in enumerate((f.r1, f.r2, f.r3, f.r4)):
        repo.create_metadata(f.admin, r, prov, {"nsdl_dc": dc(f"Ocean article {i}", "oceans tides")})
    index = SearchIndex(repo)
    index.rebuild()
    api = Api(repo, index=index, public_view="public", oai=OaiProvider(repo, "t"), clock=lambda: NOW)
    return f, prov, api, Client(api, f.keys)


@pytest.fixture
def env():
    return setup()


def test_public_read(env):
    f, prov, api, call = env
    resp = call("GET", f"/objects/{f.r1}")
    assert resp.status == 200
    assert resp.json()["handle"] == str(f.r1)


def test_private_object_needs_auth(env):
    f, prov, api, call = env
    outside = f.repo.create_resource(f.admin, url="http://example.org/private")
    resp = call("GET", f"/objects/{outside}")
    assert resp.status == 403 and resp.json()["code"] == "api.not_public"
    assert call("GET", f"/objects/{outside}", agent=f.admin).status == 200


def test_mutation_without_auth(env):
    f, prov, api, call = env
    resp = call("POST", "/relationships", {"s": str(f.r3), "p": "memberOf", "o": str(f.wbr)})
    assert resp.status == 401 and resp.json()["code"] == "auth.missing"


def test_cycle_is_409(env):
    f, prov, api, call = env
    resp = call("POST", "/relationships", {"s": str(f.nsdl), "p": "memberOf", "o": str(f.issue42)}, agent=f.admin)
    assert resp.status == 409 and resp.json()["code"] == "graph.cycle"


def test_idempotent_codes(env):
    f, prov, api, call = env
    rel = {"s": str(f.r1), "p": "memberOf", "o": str(f.issue42)}
    resp = call("POST", "/relationships", rel, agent=f.director)
    assert resp.status == 200 and resp.json()["code"] == "graph.idempotent"
    grant = {"grantee": str(f.carol), "scope": str(f.issue42), "capability": "manage_membership"}
    resp = call("DELETE", "/grants", grant, agent=f.director)
    assert resp.status == 200 and resp.json()["code"] == "grant.idempotent"
    assert call("POST", "/grants", grant, agent=f.director).status == 201
    assert call("POST", "/grants", grant, agent=f.director).json()["code"] == "grant.idempotent"
    assert call("DELETE", "/grants", grant, agent=f.director).json()["code"] == "grant.revoked"


def test_signature_checks(env):
    f, prov, api, call = env
    body = json.dumps({"s": str(f.r3), "p": "memberOf", "o": str(f.wbr)}).encode()
    headers = sign_request(f.keys[f.director], f.director, "POST", "/relationships", body, now=NOW)
    tampered = body.replace(b"memberOf", b"annotates")
    resp = api.handle(Request.build("POST", "/relationships", headers, tampered))
    assert resp.status == 401 and resp.json()["code"] == "auth.bad_signature"
    assert api.handle(Request.build("POST", "/relationships", headers, body)).status == 201
    resp = api.handle(Request.build("POST", "/relationships", headers, body))
    assert resp.json()["code"] == "auth.replayed_nonce"
    stale = sign_request(f.keys[f.director], f.director, "GET", "/status", b"", now=NOW - 3600)
    assert api.handle(Request.build("GET", f"/objects/{f.r1}", stale)).status == 401


def test_routing_errors(env):
    f, prov, api, call = env
    assert call("GET", "/nowhere").json()["code"] == "api.no_route"
    assert call("PATCH", "/status").status == 405
    assert call("GET", "/objects/garbage").status == 404
    resp = api.handle(Request.build("POST", "/objects", sign_request(f.keys[f.admin], f.admin, "POST", "/objects", b"[1", now=NOW), b"[1"))
    assert resp.status == 400


def test_tombstoned_payload_hidden(env):
    f, prov, api, call = env
    r = f.repo.create_resource(f.admin, payload=b"secret", media_type="text/plain")
    call("POST", "/relationships", {"s": str(r), "p": "memberOf", "o": str(f.pathways)}, agent=f.editor)
    assert call("DELETE", f"/objects/{r}", agent=f.admin).json()["code"] == "object.tombstoned"
    assert call("DELETE", f"/objects/{r}", agent=f.admin).json()["code"] == "object.idempotent"
    assert call("GET", f"/objects/{r}").status == 403
    doc = call("GET", f"/objects/{r}", agent=f.admin).json()
    assert doc["deleted"] and "payload" not in json.dumps(doc).replace('"payload": null', "")


def test_read_endpoints_filter_to_public_view(env):
    f, prov, api, call = env
    extra = f.repo.create_aggregation(f.admin, "Hidden")
    f.repo.assert_relationship(Relationship(f.r4, MEMBER_OF, extra), f.admin)
    anc = call("GET", f"/objects/{f.r4}/ancestors").json()["ancestors"]
    assert str(extra) not in anc and str(f.pathways) in anc and str(f.carol_blog) not in anc
    anc = call("GET", f"/objects/{f.r4}/ancestors", agent=f.admin).json()["ancestors"]
    assert str(extra) in anc
    members = call("GET", f"/aggregations/{f.nsdl}/members?transitive=true").json()["members"]
    assert set(members) == {str(h) for h in (f.wbr, f.pathways, f.issue42, f.r1, f.r2, f.r3, f.r4)}
    direct = call("GET", f"/aggregations/{f.issue42}/members").json()["members"]
    assert direct == [str(f.r1), str(f.r2)]
    triples = call("GET", f"/find?p=memberOf&o={f.issue42}").json()["triples"]
    assert {t["s"] for t in triples} == {str(f.r1), str(f.r2)}
    assert call("GET", "/views/public/resolve").status == 200
    assert call("GET", f"/views/public/contains/{f.r1}").json()["contains"] is True
    mds = call("GET", f"/resources/{f.r1}/metadata?view=public").json()["metadata"]
    assert len(mds) == 1


def test_feed(env):
    f, prov, api, call = env
    resp = call("GET", f"/aggregations/{f.issue42}/feed.atom")
    assert resp.status == 200 and resp.content_type.startswith("application/atom+xml")
    doc = etree.fromstring(resp.body)
    ATOM.assertValid(doc)
    ids = [e.findtext(f"{{{ATOM_NS}}}id") for e in doc.iter(f"{{{ATOM_NS}}}entry")]
    assert sorted(ids) == sorted([str(f.r1), str(f.r2)])
    updated = [e.findtext(f"{{{ATOM_NS}}}updated") for e in doc.iter(f"{{{ATOM_NS}}}entry")]
    assert updated == sorted(updated, reverse=True)


def test_empty_feed_and_paging(env):
    f, prov, api, call = env
    empty = f.repo.create_aggregation(f.editor, "Empty")
    f.repo.assert_relationship(Relationship(empty, MEMBER_OF, f.nsdl), f.editor)
    doc = etree.fromstring(call("GET", f"/aggregations/{empty}/feed.atom").body)
    ATOM.assertValid(doc)
    assert doc.find(f"{{{ATOM_NS}}}entry") is None
    with f.repo.batch():
        for i in range(250):
            r = f.repo.create_resource(f.editor, url=f"http://example.org/many/{i}")
            f.repo.assert_relationship(Relationship(r, MEMBER_OF, empty), f.editor)
    seen = []
    for page in (1, 2, 3, 4):
        doc = etree.fromstring(call("GET", f"/aggregations/{empty}/feed.atom?page={page}").body)
        ATOM.assertValid(doc)
        seen += [e.findtext(f"{{{ATOM_NS}}}id") for e in doc.iter(f"{{{ATOM_NS}}}entry")]
        rels = {l.get("rel") for l in doc.iter(f"{{{ATOM_NS}}}link")}
        assert ("next" in rels) == (page < 3)
    assert len(seen) == len(set(seen)) == 250


def test_search_endpoint(env):
    f, prov, api, call = env
    resp = call("GET", "/search?q=oceans&page_size=2")
    doc = resp.json()
    assert resp.status == 200 and doc["total"] == 4 and len(doc["results"]) == 2
    assert call("GET", "/search?q=oceans&page_size=2").body == resp.body
    far = call("GET", "/search?q=oceans&page=9&page_size=2").json()
    assert far["results"] == [] and far["total"] == 4
    assert call("GET", "/search?q=oceans&page_size=0").status == 400
    bad = call("GET", "/search?q=title:%22open")
    assert bad.status == 400 and bad.json()["code"] == "search.syntax"
    assert "position" in bad.json() or "pos" in json.dumps(bad.json())
    scoped = call("GET", f"/search?q=oceans&agg={f.issue42}").json()
    assert {h["handle"] for h in scoped["results"]} == {str(f.r1), str(f.r2)}


def test_search_without_index():
    f, prov, api, call = setup()
    api.index = None
    assert call("GET", "/search?q=x").status == 503


def test_status(env):
    f, prov, api, call = env
    doc = call("GET", "/status").json()
    assert doc["role"] == "leader" and doc["last_seq"] == f.repo.last_seq and doc["lag"] == 0
    assert doc["counts"]["resources"] == 4 and doc["counts"]["agents"] == 4


def test_oai_endpoint(env):
    f, prov, api, call = env
    resp = call("GET", "/oai?verb=Identify")
    assert resp.status == 200 and b"<oai:Identify>" in resp.body


def _script(call, f):
    """A fixed sequence of mutations, returned as (method, target, body, agent)."""
    priv, pub = generate_keypair()
    return [
        ("POST", "/objects", {"kind": "resource", "url": "http://example.org/new"}, f.editor),
        ("POST", "/objects", {"kind": "aggregation", "label": "Fresh"}, f.carol),
        ("POST", "/relationships", {"s": str(f.r3), "p": "memberOf", "o": str(f.carol_blog)}, f.carol),
        ("POST", "/grants", {"grantee": str(f.carol), "scope": str(f.wbr), "capability": "manage_membership"}, f.director),
        ("POST", "/agents", {"display_name": "Dave", "public_key": base64.b64encode(pub).decode()}, f.admin),
        ("DELETE", "/relationships", {"s": str(f.r4), "p": "memberOf", "o": str(f.carol_blog)}, f.carol),
        ("DELETE", "/relationships", {"s": str(f.r3), "p": "memberOf", "o": str(f.carol_blog)}, f.carol),
        ("DELETE", "/grants", {"grantee": str(f.carol), "scope": str(f.wbr), "capability": "manage_membership"}, f.director),
        ("DELETE", f"/objects/{f.carol_blog}", None, f.carol),
    ], pub


def test_endpoints_are_thin_adapters():
    f, _, api, call = setup(FakeClock())
    # fork an identical twin (same keys, same clock position) before any mutation
    r2 = replay_journal(f.repo.journal.iter_records(), clock=copy.deepcopy(f.repo.clock))
    r2.promote()
    script, pub = _script(call, f)
    for method, target, body, agent in script:
        resp = call(method, target, body, agent=agent)
        assert resp.status in (200, 201), resp.json()
    # the same operations straight against the engine
    r2.create_resource(f.editor, url="http://example.org/new")
    r2.create_aggregation(f.carol, "Fresh")
    r2.assert_relationship(Relationship(f.r3, MEMBER_OF, f.carol_blog), f.carol)
    r2.grant(f.director, f.carol, f.wbr, "manage_membership")
    r2.register_agent("Dave", pub, f.admin)
    r2.retract_relationship(Relationship(f.r4, MEMBER_OF, f.carol_blog), f.carol)
    r2.retract_relationship(Relationship(f.r3, MEMBER_OF, f.carol_blog), f.carol)
    r2.revoke(f.director, f.carol, f.wbr, "manage_membership")
    r2.tombstone_object(f.carol_blog, f.carol)
    assert r2.last_seq == f.repo.last_seq
    assert f.repo.state_hash() == r2.state_hash()


def test_follower_rejects_mutations():
    f, prov, api, call = setup()
    follower = Repository.in_memory(role=FOLLOWER)
    follower.apply_replicated(b"".join(f.repo.journal.read_raw(1, 10_000)))
    fapi = Api(follower, clock=lambda: NOW)
    resp = Client(fapi, f.keys)("POST", "/objects", {"kind": "aggregation", "label": "x"}, agent=f.admin)
    assert resp.status == 409 and resp.json()["code"] == "journal.not_leader"


def test_over_real_http():
    f, prov, api, call = setup()
    api.clock = __import__("time").time
    server = serve(api, "127.0.0.1", 0)
    base = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        with urllib.request.urlopen(f"{base}/status") as resp:
            assert json.loads(resp.read())["role"] == "leader"
        body = json.dumps({"kind": "aggregation", "label": "via http"}).encode()
        headers = sign_request(f.keys[f.editor], f.editor, "POST", "/objects", body)
        req = urllib.request.Request(f"{base}/objects", data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req) as resp:
            assert resp.status == 201
        follower = Follower(Repository.in_memory(role=FOLLOWER), HttpTransport(base, max_entries=5), poll_wait=0)
        follower.catch_up(timeout=10)
        assert follower.repo.state_hash() == f.repo.state_hash()
        assert HttpTransport(base).checkpoint()["state_hash"] == f.repo.state_hash()
    finally:
        server.shutdown()
