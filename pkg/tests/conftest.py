from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import pytest

from ncore.graph import MEMBER_OF, Relationship
from ncore.handles import Handle
from ncore.policy import generate_keypair
from ncore.repository import Repository

T0 = 1_700_000_000_000_000  # 2023-11-14T22:13:20Z in microseconds


class FakeClock:
    """Deterministic microsecond clock; each read advances by ``step``."""

    def __init__(self, start: int = T0, step: int = 1_000_000):
        self.now = start
        self.step = step

    def __call__(self) -> int:
        value = self.now
        self.now += self.step
        return value

    def seconds(self) -> float:
        return self.now / 1e6


def dc(title: str = "", subject: str = "", identifier: str = "", **extra: str) -> bytes:
    """A small nsdl_dc document."""
    parts = []
    for name, value in (("title", title), ("subject", subject), ("identifier", identifier), *extra.items()):
        for v in ([value] if isinstance(value, str) else value):
            if v:
                prefix = "dct" if name in ("educationLevel", "audience") else "dc"
                parts.append(f"<{prefix}:{name}>{escape(v)}</{prefix}:{name}>")
    return (
        '<nsdl_dc xmlns="http://ns.nsdl.org/nsdl_dc_v1.02/" xmlns:dc="http://purl.org/dc/elements/1.1/" '
        'xmlns:dct="http://purl.org/dc/terms/">' + "".join(parts) + "</nsdl_dc>"
    ).encode()


@dataclass
class Actors:
    repo: Repository
    admin: Handle
    keys: dict = field(default_factory=dict)

    def agent(self, name: str) -> Handle:
        priv, pub = generate_keypair()
        h = self.repo.register_agent(name, pub, self.admin)
        self.keys[h] = priv
        return h


def new_repo(clock=None, **kwargs) -> Actors:
    repo = Repository.in_memory(clock=clock or FakeClock(), **kwargs)
    priv, pub = generate_keypair()
    admin = repo.bootstrap("admin", pub)
    actors = Actors(repo, admin)
    actors.keys[admin] = priv
    return actors


@dataclass
class RefGraph:
    repo: Repository
    admin: Handle
    editor: Handle  # NSDL editor-in-chief, owns NSDLColl
    director: Handle  # communication director, owns WhiteboardReport and Issue42
    carol: Handle  # owns CarolBlog
    nsdl: Handle
    wbr: Handle
    issue42: Handle
    pathways: Handle  # second direct member of NSDLColl
    carol_blog: Handle
    r1: Handle
    r2: Handle
    r3: Handle
    r4: Handle
    keys: dict


def build_reference_graph(clock=None) -> RefGraph:
    a = new_repo(clock)
    repo = a.repo
    editor, director, carol = a.agent("editor-in-chief"), a.agent("comm director"), a.agent("Carol")
    nsdl = repo.create_aggregation(editor, "NSDL Collection")
    wbr = repo.create_aggregation(director, "Whiteboard Report")
    issue42 = repo.create_aggregation(director, "Issue 42")
    pathways = repo.create_aggregation(editor, "Pathways")
    carol_blog = repo.create_aggregation(carol, "Carol's Blog")
    r1 = repo.create_resource(director, url="http://example.org/r1")
    r2 = repo.create_resource(director, url="http://example.org/r2")
    r3 = repo.create_resource(editor, url="http://example.org/r3")
    r4 = repo.create_resource(carol, url="http://example.org/r4")

    def member(x, agg, who):
        assert repo.assert_relationship(Relationship(x, MEMBER_OF, agg), who)

    member(r1, issue42, director)
    member(r2, issue42, director)
    member(issue42, wbr, director)
    member(wbr, nsdl, editor)
    member(pathways, nsdl, editor)
    member(r3, pathways, editor)
    member(r4, pathways, editor)
    member(r4, carol_blog, carol)
    return RefGraph(repo, a.admin, editor, director, carol, nsdl, wbr, issue42, pathways, carol_blog, r1, r2, r3, r4, a.keys)


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def actors(clock) -> Actors:
    return new_repo(clock)


@pytest.fixture
def ref(clock) -> RefGraph:
    return build_reference_graph(clock)
