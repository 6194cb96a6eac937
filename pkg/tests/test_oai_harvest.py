from __future__ import annotations

import json
from urllib.parse import urlsplit

import pytest

from ncore.errors import HarvestNetworkError, HarvestProtocolError, HarvestSourceExists, WatermarkRegression
from ncore.graph import MEMBER_OF
from ncore.handles import Kind
from ncore.oai.harvest import HarvestScheduler, Harvester, metadata_slices
from ncore.oai.provider import OaiProvider

from conftest import T0, FakeClock, dc, new_repo

BASE = "http://a.example/oai"


class Remote:
    """Routes harvester requests to an in-process provider and counts them."""

    def __init__(self, provider: OaiProvider, fail_on: int | None = None):
        self.provider = provider
        self.calls: list[str] = []
        self.fail_on = fail_on

    def __call__(self, url: str) -> bytes:
        self.calls.append(url)
        if self.fail_on is not None and len(self.calls) == self.fail_on:
            raise HarvestNetworkError("connection reset")
        parts = urlsplit(url)
        assert f"{parts.scheme}://{parts.netloc}{parts.path}" == BASE
        return self.provider.handle_query(parts.query)


def build_source_repo(n: int):
    a = new_repo(FakeClock())
    prov = a.repo.create_aggregation(a.admin, "A provider", provider=True)
    mds = []
    with a.repo.batch():
        for i in range(n):
            r = a.repo.create_resource(a.admin, url=f"http://example.org/res/{i}")
            mds.append(a.repo.create_metadata(a.admin, r, prov, {"nsdl_dc": dc(f"title {i}", "x", f"http://example.org/res/{i}")}))
    clock = [T0 / 1e6 + 10 * 86400]
    provider = OaiProvider(a.repo, "a.example", base_url=BASE, clock=lambda: clock[0])
    return a, prov, mds, provider, clock


def harvester_repo():
    b = new_repo(FakeClock(T0 + 50 * 86400 * 10**6))
    return b


def test_metadata_slices_are_exact():
    body = (
        b'<?xml version="1.0"?><r xmlns="http://www.openarchives.org/OAI/2.0/">'
        b'<record><metadata>  <x:a xmlns:x="urn:x" b=\'q/>"\'>t&amp;<x:c/></x:a>\n</metadata></record>'
        b'<record><metadata><e xmlns="urn:e" v="a>b"/></metadata></record></r>'
    )
    assert metadata_slices(body) == [b'<x:a xmlns:x="urn:x" b=\'q/>"\'>t&amp;<x:c/></x:a>', b'<e xmlns="urn:e" v="a>b"/>']


def test_full_harvest_pages_and_round_trips_payloads():
    a, prov, mds, provider, _ = build_source_repo(250)
    b = harvester_repo()
    remote = Remote(provider)
    h = Harvester(b.repo, b.admin, fetch=remote)
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    report = h.harvest(src.id)
    assert report.requests == 3 and len(remote.calls) == 3
    assert report.created == 250
    for md in mds:
        got = b.repo.find_metadata(src.provider, provider.identifier(md))
        assert b.repo.get_object(got).datastreams["nsdl_dc"] == a.repo.get_object(md).datastreams["nsdl_dc"]
        target = b.repo.get_object(got).target
        assert b.repo.get_object(target).url == a.repo.get_object(a.repo.get_object(md).target).url
    assert len(b.repo.direct_members(src.resource_agg)) == 250
    assert len(b.repo.direct_members(src.metadata_agg)) == 250
    assert b.repo.harvest_sources[src.id].last_successful_until == report.watermark


def test_reharvest_is_a_state_no_op():
    a, prov, mds, provider, _ = build_source_repo(30)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    h.harvest(src.id)
    before = (b.repo.state_hash(), b.repo.last_seq)
    report = h.harvest(src.id)
    assert report.created == 0 and report.unchanged >= 1
    assert (b.repo.state_hash(), b.repo.last_seq) == before


def test_incremental_updates_and_deletions():
    a, prov, mds, provider, clock = build_source_repo(20)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    h.harvest(src.id)
    a.repo.add_datastream(mds[3], "nsdl_dc", dc("changed", "y", "http://example.org/res/3"), a.admin)
    a.repo.tombstone_object(mds[5], a.admin)
    report = h.harvest(src.id)
    assert report.updated == 1 and report.deleted == 1
    b3 = b.repo.find_metadata(src.provider, provider.identifier(mds[3]))
    assert b.repo.get_object(b3).datastreams["nsdl_dc"] == a.repo.get_object(mds[3]).datastreams["nsdl_dc"]
    b5 = b.repo.find_metadata(src.provider, provider.identifier(mds[5]))
    assert b.repo.get_object(b5).deleted


def test_unknown_deletion_is_skipped():
    a, prov, mds, provider, _ = build_source_repo(3)
    a.repo.tombstone_object(mds[0], a.admin)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    report = h.harvest(src.id)
    assert report.skipped_deletions == 1 and report.created == 2
    assert b.repo.find_metadata(src.provider, provider.identifier(mds[0])) is None


def test_record_without_url_gets_urn_resource():
    a = new_repo(FakeClock())
    prov = a.repo.create_aggregation(a.admin, "P", provider=True)
    r = a.repo.create_resource(a.admin, url="http://example.org/nourl")
    md = a.repo.create_metadata(a.admin, r, prov, {"nsdl_dc": dc("no identifier")})
    provider = OaiProvider(a.repo, "a.example", base_url=BASE)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    h.harvest(src.id)
    got = b.repo.get_object(b.repo.find_metadata(src.provider, provider.identifier(md)))
    res = b.repo.get_object(got.target)
    assert res.identity == f"urn:oai-record:{provider.identifier(md)}"


def test_network_failure_keeps_watermark():
    a, prov, mds, provider, _ = build_source_repo(250)
    b = harvester_repo()
    remote = Remote(provider, fail_on=2)
    h = Harvester(b.repo, b.admin, fetch=remote)
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    with pytest.raises(HarvestNetworkError):
        h.harvest(src.id)
    assert b.repo.harvest_sources[src.id].last_successful_until is None
    remote.fail_on = None
    report = h.harvest(src.id)
    assert report.created == 150 and report.unchanged == 100


def test_watermark_regression():
    a, prov, mds, provider, clock = build_source_repo(5)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    h.harvest(src.id)
    clock[0] = T0 / 1e6 - 86400  # source clock now far behind its own records
    with pytest.raises(WatermarkRegression):
        h.harvest(src.id)


def test_protocol_errors():
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=lambda url: b"<html>nope</html>")
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    with pytest.raises(HarvestProtocolError):
        h.harvest(src.id)
    a, prov, mds, provider, _ = build_source_repo(2)
    h.fetch = Remote(provider)
    bad = h.add_source(BASE, "marc", "Org B")
    with pytest.raises(HarvestProtocolError):
        h.harvest(bad.id)


def test_duplicate_source_is_refused():
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=lambda url: b"")
    h.add_source(BASE, "nsdl_dc", "Org A", set_spec="s1")
    h.add_source(BASE, "nsdl_dc", "Org A", set_spec="s2")
    with pytest.raises(HarvestSourceExists):
        h.add_source(BASE, "nsdl_dc", "Org A", set_spec="s1")
    assert len(b.repo.objects_of_kind(Kind.PROVIDER)) == 2


def test_config_and_scheduler(tmp_path):
    a, prov, mds, provider, _ = build_source_repo(5)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    cfg = tmp_path / "sources.json"
    cfg.write_text(json.dumps([{"base_url": BASE, "metadata_prefix": "nsdl_dc", "organization": "Org A", "schedule": "0 * * * *"}]))
    (src,) = h.sync_config(cfg)
    assert h.sync_config(cfg) == []
    now = [1_800_000_000.0]
    sched = HarvestScheduler(h, tmp_path / "harvest_state.json", clock=lambda: now[0])
    assert sched.due() == [src.id]  # never run: due at startup
    assert src.id in sched.run_pending()
    assert sched.due() == []
    now[0] += 3600
    assert sched.due() == [src.id]
    # a restarted scheduler sees the persisted state and runs the missed window once
    again = HarvestScheduler(h, tmp_path / "harvest_state.json", clock=lambda: now[0] + 5 * 3600)
    assert again.due() == [src.id]
    again.run_pending()
    assert again.due() == []


def test_membership_edges_created():
    a, prov, mds, provider, _ = build_source_repo(2)
    b = harvester_repo()
    h = Harvester(b.repo, b.admin, fetch=Remote(provider))
    src = h.add_source(BASE, "nsdl_dc", "Org A")
    h.harvest(src.id)
    for md in b.repo.direct_members(src.metadata_agg):
        assert b.repo.find(md, MEMBER_OF, src.metadata_agg)
