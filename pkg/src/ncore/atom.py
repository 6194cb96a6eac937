"""Atom 1.0 feeds of an aggregation's direct members, newest first, paged."""

from __future__ import annotations

import math

from lxml import etree

from .graph import METADATA_FOR
from .handles import Handle, Kind
from .model import format_ts

ATOM_NS = "http://www.w3.org/2005/Atom"
PAGE_SIZE = 100


def _a(tag: str) -> str:
    return f"{{{ATOM_NS}}}{tag}"


def _rfc3339(us: int) -> str:
    # Atom dates allow fractional seconds; second precision keeps feeds tidy
    return format_ts(us)[:19] + "Z"


def entry_title(repo, h: Handle) -> str:
    """Best human label: a dc:title from live metadata, else the URL or label."""
    from .search.index import extract_dc

    obj = repo.objects[h]
    if h.kind in (Kind.RESOURCE, Kind.AGGREGATION):
        for md in sorted(repo.graph.subjects(METADATA_FOR, h)):
            mobj = repo.objects[md]
            if mobj.deleted or "nsdl_dc" not in mobj.datastreams:
                continue
            titles = extract_dc(mobj.datastreams["nsdl_dc"]).get("title")
            if titles:
                return titles[0]
    if h.kind is Kind.RESOURCE:
        return obj.url or (obj.identity or str(h))
    if h.kind in (Kind.AGGREGATION, Kind.PROVIDER):
        return obj.label
    return str(h)


def render_feed(repo, agg: Handle, base_url: str = "", page: int = 1, page_size: int = PAGE_SIZE) -> bytes:
    """Feed page ``page`` (1-based). Pages past the end are valid and empty."""
    with repo.read():
        owner_obj = repo.objects[agg]
        members = [repo.objects[m] for m in repo.graph.direct_members(agg)]
        members = [m for m in members if not m.deleted]
        members.sort(key=lambda o: (-o.modified, o.handle.serial))
        last_page = max(1, math.ceil(len(members) / page_size))
        chunk = members[(page - 1) * page_size : page * page_size]
        titles = {o.handle: entry_title(repo, o.handle) for o in chunk}
        owner = repo.objects.get(owner_obj.owner)
        author = owner.display_name if owner is not None and owner.display_name else str(owner_obj.owner)
    updated = max([owner_obj.modified] + [m.modified for m in members])
    feed_url = f"{base_url}/aggregations/{agg}/feed.atom"

    feed = etree.Element(_a("feed"), nsmap={None: ATOM_NS})
    etree.SubElement(feed, _a("id")).text = str(agg)
    etree.SubElement(feed, _a("title")).text = owner_obj.label
    etree.SubElement(feed, _a("updated")).text = _rfc3339(updated)
    etree.SubElement(etree.SubElement(feed, _a("author")), _a("name")).text = author

    def link(rel: str, n: int) -> None:
        href = feed_url if n == 1 else f"{feed_url}?page={n}"
        etree.SubElement(feed, _a("link"), rel=rel, href=href, type="application/atom+xml")

    link("self", page)
    link("first", 1)
    link("last", last_page)
    if page > 1:
        link("previous", min(page - 1, last_page))
    if page < last_page:
        link("next", page + 1)

    for obj in chunk:
        entry = etree.SubElement(feed, _a("entry"))
        etree.SubElement(entry, _a("id")).text = str(obj.handle)
        etree.SubElement(entry, _a("title")).text = titles[obj.handle]
        etree.SubElement(entry, _a("updated")).text = _rfc3339(obj.modified)
        etree.SubElement(entry, _a("link"), rel="alternate", href=f"{base_url}/objects/{obj.handle}", type="application/json")
        if obj.handle.kind is Kind.RESOURCE and obj.url:
            etree.SubElement(entry, _a("link"), rel="related", href=obj.url)
        etree.SubElement(entry, _a("category"), term=obj.handle.kind.value)
    return etree.tostring(feed, xml_declaration=True, encoding="UTF-8")
