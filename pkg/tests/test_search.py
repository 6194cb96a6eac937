from __future__ import annotations

import random

import pytest

from conftest import dc, new_repo
from corpus import VOCAB, build_corpus, oracle_docs
from oracles import bm25
from ncore.errors import FieldNotPropagatable, IndexUnavailable, InvariantViolation, QuerySyntaxError
from ncore.graph import MEMBER_OF, Relationship
from ncore.search.index import SearchIndex, extract_dc, propagate_fields, tokenize
from ncore.views import ViewSpec, resolve_view


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(600, seed=42)


@pytest.fixture(scope="module")
def index(corpus):
    idx = SearchIndex(corpus.repo)
    idx.rebuild()
    return idx


def ranked(result):
    return [(h.handle, h.score) for h in result.hits]


def oracle_rank(scores):
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].serial))


def test_extract_dc_fields():
    payload = dc("Ocean Currents", ["tides", "waves"], "http://x.org/", educationLevel="High School")
    got = extract_dc(payload)
    assert got == {
        "title": ["Ocean Currents"],
        "subject": ["tides", "waves"],
        "identifier": ["http://x.org/"],
        "educationLevel": ["High School"],
    }
    assert tokenize("Plate-Tectonics, 101!") == ("plate", "tectonics", "101")


def test_empty_index():
    a = new_repo()
    idx = SearchIndex(a.repo)
    with pytest.raises(IndexUnavailable):
        idx.query("ocean")
    idx.rebuild()
    res = idx.query("ocean")
    assert res.total == 0 and res.hits == []


@pytest.mark.parametrize("seed", range(5))
def test_single_field_term_matches_oracle(corpus, index, seed):
    rng = random.Random(seed)
    field = rng.choice(["title", "subject", "description"])
    term = rng.choice(VOCAB)
    res = index.query(f"{field}:{term}", limit=None)
    expected = bm25(oracle_docs(corpus, corpus.resources), [(field, term)])
    got = ranked(res)
    assert [h for h, _ in got] == [h for h, _ in oracle_rank(expected)]
    for h, s in got:
        assert s == pytest.approx(expected[h], abs=1e-9)


def test_bare_term_spans_default_fields(corpus, index):
    res = index.query("volcano", limit=None)
    expected = bm25(oracle_docs(corpus, corpus.resources), [(f, "volcano") for f in ("title", "description", "subject")])
    assert [(h, pytest.approx(s, abs=1e-9)) for h, s in oracle_rank(expected)] == ranked(res)


def test_boolean_semantics(corpus, index):
    docs = oracle_docs(corpus, corpus.resources)
    has = lambda f, t: {r for r, d in docs.items() if t in d.get(f, ())}
    res = index.query("title:ocean AND NOT subject:geology", limit=None)
    assert {h.handle for h in res.hits} == has("title", "ocean") - has("subject", "geology")
    res = index.query("title:ocean OR title:river", limit=None)
    assert {h.handle for h in res.hits} == has("title", "ocean") | has("title", "river")


def test_phrase_query(corpus, index):
    docs = {}
    for r, per in corpus.truth.items():
        for fields in per.values():
            for v in fields["description"]:
                docs.setdefault(r, []).append(tokenize(v))
    res = index.query('description:"ocean currents"', limit=None)
    expect = {
        r for r, vals in docs.items() for toks in vals for i in range(len(toks) - 1) if toks[i : i + 2] == ("ocean", "currents")
    }
    assert {h.handle for h in res.hits} == expect


@pytest.mark.parametrize("i", range(6))
def test_filter_equality(corpus, index, i):
    agg = corpus.aggs[i * 4]
    closure = corpus.repo.transitive_members(agg)
    full = index.query("title:ocean OR subject:climate", limit=None)
    filtered = index.query("title:ocean OR subject:climate", filter_agg=agg, limit=None)
    assert ranked(filtered) == [(h, s) for h, s in ranked(full) if h in closure]
    assert filtered.total == len([1 for h, _ in ranked(full) if h in closure])


def test_view_filtering_matches_per_view_brute_force(corpus, index):
    p0, p1, _ = corpus.providers
    for spec in (
        ViewSpec("in", corpus.aggs[0], md_include=frozenset({p1})),
        ViewSpec("ex", corpus.aggs[0], md_exclude=frozenset({p0})),
        ViewSpec("not", corpus.aggs[0], corpus.aggs[3]),
    ):
        universe = [r for r in resolve_view(corpus.repo, spec) if r in corpus.truth]
        docs = oracle_docs(corpus, universe, spec.provider_allowed)
        for term in ("ocean", "fossil", "storm"):
            expected = bm25(docs, [("subject", term)])
            got = ranked(index.query(f"subject:{term}", view=spec, limit=None))
            assert [h for h, _ in got] == [h for h, _ in oracle_rank(expected)]
            for h, s in got:
                assert s == pytest.approx(expected[h], abs=1e-9)


def test_two_provider_view_fixture():
    a = new_repo()
    r = a.repo
    p1 = r.create_aggregation(a.admin, "P1", provider=True)
    p2 = r.create_aggregation(a.admin, "P2", provider=True)
    lib = r.create_aggregation(a.admin, "Library")
    res = r.create_resource(a.admin, url="http://e.org/rock")
    r.assert_relationship(Relationship(res, MEMBER_OF, lib), a.admin)
    r.create_metadata(a.admin, res, p1, {"nsdl_dc": dc("Rocks", "minerals")})
    r.create_metadata(a.admin, res, p2, {"nsdl_dc": dc("Rocks", "geology")})
    idx = SearchIndex(r)
    idx.rebuild()
    assert idx.query("subject:geology", view=ViewSpec("x", lib, md_exclude={p2})).total == 0
    assert idx.query("subject:geology", view=ViewSpec("i", lib, md_include={p2})).total == 1
    assert idx.query("subject:geology", view=ViewSpec("all", lib)).total == 1


def _propagation_fixture():
    a = new_repo()
    r = a.repo
    p = r.create_aggregation(a.admin, "P", provider=True)
    coll = r.create_aggregation(a.admin, "Geo collection")
    coll2 = r.create_aggregation(a.admin, "Audience collection")
    res = r.create_resource(a.admin, url="http://e.org/x")
    r.create_metadata(a.admin, res, p, {"nsdl_dc": dc("Rocks")})
    r.assert_relationship(Relationship(res, MEMBER_OF, coll), a.admin)
    r.create_metadata(a.admin, coll, p, {"nsdl_dc": dc("Geo", "geoscience", audience="teachers")})
    r.create_metadata(a.admin, coll2, p, {"nsdl_dc": dc("Aud", "astronomy")})
    return a, r, coll, coll2, res


def test_propagation_add_and_remove():
    a, r, coll, coll2, res = _propagation_fixture()
    idx = SearchIndex(r)
    idx.rebuild()
    assert idx.query("subject:geoscience").total == 0
    propagate_fields(r, coll, ["subject"], a.admin)
    idx.update_from_journal()
    assert [h.handle for h in idx.query("subject:geoscience").hits] == [res]
    assert idx.query("audience:teachers").total == 0
    assert idx.docs[res].propagated == {"subject"}
    # a second propagating parent accumulates
    propagate_fields(r, coll2, ["subject"], a.admin)
    r.assert_relationship(Relationship(res, MEMBER_OF, coll2), a.admin)
    idx.update_from_journal()
    assert idx.query("subject:astronomy").total == 1 and idx.query("subject:geoscience").total == 1
    r.retract_relationship(Relationship(res, MEMBER_OF, coll), a.admin)
    idx.update_from_journal()
    assert idx.query("subject:geoscience").total == 0
    assert idx.query("subject:astronomy").total == 1


def test_propagation_rules():
    a, r, coll, coll2, res = _propagation_fixture()
    with pytest.raises(FieldNotPropagatable):
        propagate_fields(r, coll, ["title"], a.admin)
    bare = r.create_aggregation(a.admin, "no collection metadata")
    with pytest.raises(InvariantViolation):
        propagate_fields(r, bare, ["subject"], a.admin)


def test_incremental_equals_rebuild():
    rng = random.Random(9)
    c = build_corpus(150, seed=9)
    repo = c.repo
    inc = SearchIndex(repo)
    inc.rebuild()
    queries = ["ocean", "title:river OR subject:fossil", "NOT description:storm", 'description:"plate tectonics"']
    for step in range(8):
        for _ in range(15):
            choice = rng.random()
            r = rng.choice(c.resources)
            if choice < 0.3:
                p = rng.choice(c.providers)
                repo.create_metadata(c.admin, r, p, {"nsdl_dc": dc(" ".join(rng.sample(VOCAB, 3)))})
            elif choice < 0.5:
                agg = rng.choice(c.aggs)
                rel = Relationship(r, MEMBER_OF, agg)
                if rel in repo.graph:
                    repo.retract_relationship(rel, c.admin)
                else:
                    repo.assert_relationship(rel, c.admin)
            elif choice < 0.65:
                mds = [m for m in repo.graph.subjects("metadataFor", r) if not repo.get_object(m).deleted]
                if mds:
                    repo.tombstone_object(min(mds), c.admin)
            elif choice < 0.8:
                mds = [m for m in repo.graph.subjects("metadataFor", r) if not repo.get_object(m).deleted]
                if mds:
                    repo.add_datastream(min(mds), "nsdl_dc", dc(rng.choice(VOCAB), rng.choice(VOCAB)), c.admin)
            else:
                agg = rng.choice(c.aggs)
                if not any(True for _ in repo.graph.subjects("metadataFor", agg)):
                    repo.create_metadata(c.admin, agg, c.providers[0], {"nsdl_dc": dc("c", rng.choice(VOCAB))})
                propagate_fields(repo, agg, ["subject"], c.admin)
        inc.update_from_journal()
        fresh = SearchIndex(repo)
        fresh.rebuild()
        for q in queries:
            for spec in (None, ViewSpec("v", c.aggs[0], md_exclude={c.providers[1]})):
                a = ranked(inc.query(q, view=spec, limit=None))
                b = ranked(fresh.query(q, view=spec, limit=None))
                assert [h for h, _ in a] == [h for h, _ in b]
                assert all(abs(x - y) <= 1e-9 for (_, x), (_, y) in zip(a, b))


def test_update_noop_and_partial_cursor():
    c = build_corpus(20, seed=1)
    idx = SearchIndex(c.repo)
    idx.rebuild()
    cur = idx.cursor
    assert idx.update_from_journal() == cur
    r = c.repo.create_resource(c.admin, url="http://e.org/new")
    c.repo.create_metadata(c.admin, r, c.providers[0], {"nsdl_dc": dc("zebra")})
    assert idx.update_from_journal(cur + 1) == cur + 1
    assert idx.update_from_journal() == c.repo.last_seq
    assert idx.query("zebra").total == 1


def test_tombstoned_resource_disappears():
    a = new_repo()
    r = a.repo
    p = r.create_aggregation(a.admin, "P", provider=True)
    res = r.create_resource(a.admin, url="http://e.org/x")
    md = r.create_metadata(a.admin, res, p, {"nsdl_dc": dc("unicorn")})
    idx = SearchIndex(r)
    idx.rebuild()
    assert idx.query("unicorn").total == 1
    r.tombstone_object(md, a.admin)
    r.tombstone_object(res, a.admin)
    idx.update_from_journal()
    assert idx.query("unicorn").total == 0 and res not in idx.docs


def test_text_payload_indexed_as_body():
    a = new_repo()
    r = a.repo
    t = r.create_resource(a.admin, payload=b"Photosynthesis in leaves", media_type="text/plain")
    r.create_resource(a.admin, payload=b"Photosynthesis", media_type="application/octet-stream")
    idx = SearchIndex(r)
    idx.rebuild()
    assert [h.handle for h in idx.query("body:photosynthesis").hits] == [t]


def test_paging_and_determinism(index):
    full = index.query("ocean OR river", limit=None)
    assert full.total > 20
    page = index.query("ocean OR river", limit=10, offset=10)
    assert page.hits == full.hits[10:20] and page.total == full.total
    beyond = index.query("ocean OR river", limit=10, offset=10_000)
    assert beyond.hits == [] and beyond.total == full.total
    assert index.query("ocean OR river", limit=None).to_json() == full.to_json()


def test_bad_query_propagates(index):
    with pytest.raises(QuerySyntaxError):
        index.query("title:")


def test_save_and_load(tmp_path):
    c = build_corpus(30, seed=3)
    idx = SearchIndex(c.repo, tmp_path / "index")
    idx.rebuild()
    idx.save()
    r = c.repo.create_resource(c.admin, url="http://e.org/late")
    c.repo.create_metadata(c.admin, r, c.providers[0], {"nsdl_dc": dc("latecomer")})
    again = SearchIndex(c.repo, tmp_path / "index").open()
    assert again.cursor == c.repo.last_seq
    assert again.query("latecomer").total == 1
    idx.update_from_journal()
    assert ranked(again.query("ocean", limit=None)) == ranked(idx.query("ocean", limit=None))
