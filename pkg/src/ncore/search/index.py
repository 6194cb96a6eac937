"""Resource-level inverted index with per-provider field provenance.

Each indexed resource keeps the field values it received from every source:
the ``nsdl_dc`` datastream of each live metadata record describing it, the
collection-level metadata of ancestor aggregations that propagate fields,
and inline ``text/*`` content (field ``body``, no provider). A view that
filters metadata providers simply ignores the contributions of excluded
providers, so one index serves every view.

Scoring is BM25 over per-field statistics. The collection those statistics
are taken over is the query's universe: all indexed resources, or the
resources inside the view. An aggregation filter only removes hits and never
changes scores.
"""

from __future__ import annotations

import logging
import math
import pickle
import re
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from lxml import etree

from .. import journal as jr
from ..errors import IndexUnavailable
from ..graph import MEMBER_OF, METADATA_FOR
from ..handles import AGGREGATE_KINDS, Handle, Kind
from ..model import Metadata, Resource
from ..views import ViewSpec
from .query import DEFAULT_FIELDS, FIELDS, And, Not, Or, Phrase, QueryAst, Term, parse_query, positive_leaves

log = logging.getLogger(__name__)

K1 = 1.2
B = 0.75
INDEXED_FIELDS = frozenset(FIELDS) - {"body"}
_TOKEN_RE = re.compile(r"\w+")
_PARSER = etree.XMLParser(resolve_entities=False, no_network=True, huge_tree=True)


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(_TOKEN_RE.findall(text.lower()))


def extract_dc(payload: bytes) -> dict[str, list[str]]:
    """Field values of an nsdl_dc document, keyed by element local name."""
    root = etree.fromstring(payload, _PARSER)
    out: dict[str, list[str]] = defaultdict(list)
    for el in root.iter():
        if not isinstance(el.tag, str):
            continue
        name = etree.QName(el).localname
        if name in INDEXED_FIELDS:
            text = " ".join("".join(el.itertext()).split())
            if text:
                out[name].append(text)
    return dict(out)


@dataclass(frozen=True)
class Contribution:
    provider: Handle | None
    field: str
    values: tuple[str, ...]
    tokens: tuple[tuple[str, ...], ...]
    propagated: bool = False

    @property
    def length(self) -> int:
        return sum(len(t) for t in self.tokens)


@dataclass
class IndexDoc:
    resource: Handle
    contributions: list[Contribution]
    ancestors: frozenset[Handle]
    indexed_seq: int
    failed: bool = False

    @property
    def providers(self) -> set[Handle]:
        return {c.provider for c in self.contributions if c.provider is not None}

    @property
    def propagated(self) -> set[str]:
        return {c.field for c in self.contributions if c.propagated}

    def fields(self, spec: ViewSpec | None = None) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for c in self.contributions:
            if spec is None or spec.provider_allowed(c.provider):
                out[c.field].extend(c.values)
        return dict(out)


@dataclass(frozen=True)
class Hit:
    handle: Handle
    score: float
    fields: dict = field(compare=False, hash=False, default_factory=dict)

    def to_json(self) -> dict:
        return {"handle": str(self.handle), "score": self.score, "fields": self.fields}


@dataclass(frozen=True)
class SearchResult:
    total: int
    hits: list[Hit]

    def to_json(self) -> dict:
        return {"total": self.total, "results": [h.to_json() for h in self.hits]}


@dataclass
class _Stats:
    n: int
    avg: dict[str, float]
    df: dict[tuple[str, str], int] = field(default_factory=dict)


class SearchIndex:
    """Inverted index tailing a repository journal."""

    def __init__(self, repo, path: Path | None = None):
        self.repo = repo
        self.path = Path(path) if path is not None else None
        self.docs: dict[Handle, IndexDoc] = {}
        # (field, term) -> resource -> [(provider, tf)]
        self.postings: dict[tuple[str, str], dict[Handle, list[tuple[Handle | None, int]]]] = defaultdict(dict)
        self.cursor = 0
        self.generation = 0
        self.ready = False
        self._lock = threading.RLock()
        self._stats: dict[tuple, _Stats] = {}
        self._tailer: threading.Thread | None = None
        self._stop = threading.Event()

    # -- extraction ---------------------------------------------------------------

    def _extract(self, r: Handle, seq: int) -> IndexDoc | None:
        repo = self.repo
        obj = repo.objects.get(r)
        if not isinstance(obj, Resource) or obj.deleted:
            return None
        contribs: list[Contribution] = []
        failed = False
        graph = repo.graph
        for md in sorted(graph.subjects(METADATA_FOR, r)):
            try:
                contribs.extend(self._from_metadata(md, None))
            except etree.XMLSyntaxError:
                log.warning("cannot extract fields from %s", md)
                failed = True
        ancestors = frozenset(graph.ancestors(r))
        for agg in sorted(a for a in repo.propagation if a in ancestors):
            allowed = set(repo.propagation[agg])
            for md in sorted(graph.subjects(METADATA_FOR, agg)):
                try:
                    contribs.extend(self._from_metadata(md, allowed))
                except etree.XMLSyntaxError:
                    failed = True
        if obj.payload is not None and (obj.media_type or "").startswith("text/"):
            text = obj.payload.decode("utf-8", "replace")
            contribs.append(Contribution(None, "body", (text,), (tokenize(text),)))
        return IndexDoc(r, contribs, ancestors, seq, failed)

    def _from_metadata(self, md: Handle, only: set[str] | None) -> list[Contribution]:
        obj = self.repo.objects[md]
        if not isinstance(obj, Metadata) or obj.deleted or "nsdl_dc" not in obj.datastreams:
            return []
        provider = self.repo.provider_of(md)
        out = []
        for name, values in sorted(extract_dc(obj.datastreams["nsdl_dc"]).items()):
            if only is not None and name not in only:
                continue
            out.append(Contribution(provider, name, tuple(values), tuple(tokenize(v) for v in values), only is not None))
        return out

    # -- postings maintenance ---------------------------------------------------------

    def _remove_doc(self, r: Handle) -> None:
        doc = self.docs.pop(r, None)
        if doc is None:
            return
        for key in {(c.field, t) for c in doc.contributions for toks in c.tokens for t in toks}:
            plist = self.postings.get(key)
            if plist is not None:
                plist.pop(r, None)
                if not plist:
                    del self.postings[key]

    def _add_doc(self, doc: IndexDoc) -> None:
        self.docs[doc.resource] = doc
        per_key: dict[tuple[str, str], list[tuple[Handle | None, int]]] = defaultdict(list)
        for c in doc.contributions:
            counts = Counter(t for toks in c.tokens for t in toks)
            for term, tf in counts.items():
                per_key[(c.field, term)].append((c.provider, tf))
        for key, entries in per_key.items():
            self.postings[key][doc.resource] = entries

    def _reindex(self, resources: Iterable[Handle], seq: int) -> None:
        for r in resources:
            self._remove_doc(r)
            doc = self._extract(r, seq)
            if doc is not None:
                self._add_doc(doc)

    # -- building -----------------------------------------------------------------------

    def rebuild(self) -> None:
        """Index every live resource from scratch at the repository's current seq."""
        with self.repo.read(), self._lock:
            self.docs.clear()
            self.postings = defaultdict(dict)
            seq = self.repo.last_seq
            for h, obj in self.repo.objects.items():
                if h.kind is Kind.RESOURCE and not obj.deleted:
                    doc = self._extract(h, seq)
                    if doc is not None:
                        self._add_doc(doc)
            self.cursor = seq
            self._bump()
            self.ready = True

    def _bump(self) -> None:
        self.generation += 1
        self._stats.clear()

    def _resources_under(self, h: Handle) -> set[Handle]:
        graph = self.repo.graph
        out = {h} if h.kind is Kind.RESOURCE else set()
        if h.kind in AGGREGATE_KINDS:
            out.update(m for m in graph.transitive_members(h) if m.kind is Kind.RESOURCE)
        return out

    def _dirty_for(self, entry: jr.JournalEntry) -> set[Handle] | None:
        """Resources whose documents an entry may change; ``None`` means all."""
        repo, p, op = self.repo, entry.payload, entry.op
        if op == "load":
            return None
        if op == "create_object":
            h = Handle.parse(p["object"]["handle"])
            if h.kind is Kind.METADATA:
                return self._resources_under(Handle.parse(p["object"]["target"]))
            return {h} if h.kind is Kind.RESOURCE else set()
        if op == "add_datastream":
            md = repo.objects.get(Handle.parse(p["handle"]))
            return self._resources_under(md.target) if isinstance(md, Metadata) else set()
        if op == "tombstone":
            h = Handle.parse(p["handle"])
            dirty: set[Handle] = set()
            obj = repo.objects.get(h)
            if isinstance(obj, Metadata):
                dirty |= self._resources_under(obj.target)
            elif h.kind is Kind.RESOURCE:
                dirty.add(h)
            for r in p["retract"]:
                if r["p"] == MEMBER_OF:
                    dirty |= self._resources_under(Handle.parse(r["s"]))
            return dirty
        if op in ("assert", "retract"):
            if p["p"] != MEMBER_OF:
                return set()
            return self._resources_under(Handle.parse(p["s"]))
        if op == "set_propagation":
            return self._resources_under(Handle.parse(p["handle"]))
        return set()

    def update_from_journal(self, upto: int | None = None) -> int:
        """Apply journal entries in (cursor, upto] and return the new cursor.

        Affected documents are re-extracted from the repository's current
        state, so the index is exact whenever ``upto`` is the committed seq.
        """
        with self.repo.read(), self._lock:
            if not self.ready:
                self.rebuild()
                return self.cursor
            target = self.repo.last_seq if upto is None else min(upto, self.repo.last_seq)
            if target <= self.cursor:
                return self.cursor
            dirty: set[Handle] = set()
            full = False
            seq = self.cursor + 1
            while seq <= target and not full:
                raws = self.repo.journal.read_raw(seq, 1000)
                if not raws:
                    break
                for rec in jr.decode_records(b"".join(raws), seq):
                    if rec.type != jr.ENTRY or rec.seq > target:
                        continue
                    d = self._dirty_for(rec.entry())
                    if d is None:
                        full = True
                        break
                    dirty |= d
                    seq = rec.seq + 1
            if full:
                self.rebuild()
                return self.cursor
            self._reindex(sorted(dirty), target)
            self.cursor = target
            self._bump()
            return self.cursor

    # -- querying --------------------------------------------------------------------------

    def _in_universe(self, doc: IndexDoc, spec: ViewSpec | None) -> bool:
        if spec is None:
            return True
        if spec.in_agg not in doc.ancestors:
            return False
        return spec.not_in_agg is None or spec.not_in_agg not in doc.ancestors

    def _universe(self, spec: ViewSpec | None) -> set[Handle]:
        if spec is None:
            return set(self.docs)
        return {h for h, d in self.docs.items() if self._in_universe(d, spec)}

    def _stats_for(self, spec: ViewSpec | None, universe: set[Handle]) -> _Stats:
        key = spec.key if spec is not None else None
        st = self._stats.get(key)
        if st is None:
            totals: Counter = Counter()
            for h in universe:
                for c in self.docs[h].contributions:
                    if spec is None or spec.provider_allowed(c.provider):
                        totals[c.field] += c.length
            n = len(universe)
            st = _Stats(n, {f: totals[f] / n for f in totals} if n else {})
            self._stats[key] = st
        return st

    def _tf(self, entries: list[tuple[Handle | None, int]], spec: ViewSpec | None) -> int:
        if spec is None or not spec.filters_providers:
            return sum(tf for _, tf in entries)
        return sum(tf for p, tf in entries if spec.provider_allowed(p))

    def _df(self, fld: str, term: str, spec: ViewSpec | None, universe: set[Handle], st: _Stats) -> int:
        df = st.df.get((fld, term))
        if df is None:
            plist = self.postings.get((fld, term), {})
            df = sum(1 for h, e in plist.items() if h in universe and self._tf(e, spec) > 0)
            st.df[(fld, term)] = df
        return df

    def _doc_len(self, doc: IndexDoc, fld: str, spec: ViewSpec | None) -> int:
        return sum(
            c.length for c in doc.contributions if c.field == fld and (spec is None or spec.provider_allowed(c.provider))
        )

    def _phrase_tf(self, doc: IndexDoc, fld: str, terms: tuple[str, ...], spec: ViewSpec | None) -> int:
        k = len(terms)
        count = 0
        for c in doc.contributions:
            if c.field != fld or (spec is not None and not spec.provider_allowed(c.provider)):
                continue
            for toks in c.tokens:
                for i in range(len(toks) - k + 1):
                    if toks[i : i + k] == terms:
                        count += 1
        return count

    def _leaf_tfs(self, fld: str, terms: tuple[str, ...], spec, universe) -> dict[Handle, int]:
        """tf per matching resource for a term (one token) or phrase (several)."""
        if not terms:
            return {}
        plist = self.postings.get((fld, terms[0]), {})
        if len(terms) == 1:
            out = {}
            for h, entries in plist.items():
                if h in universe:
                    tf = self._tf(entries, spec)
                    if tf:
                        out[h] = tf
            return out
        candidates = [h for h in plist if h in universe]
        for t in terms[1:]:
            other = self.postings.get((fld, t), {})
            candidates = [h for h in candidates if h in other]
        out = {}
        for h in candidates:
            tf = self._phrase_tf(self.docs[h], fld, terms, spec)
            if tf:
                out[h] = tf
        return out

    def _leaf_fields(self, leaf: Term | Phrase) -> tuple[str, ...]:
        return (leaf.field,) if leaf.field else DEFAULT_FIELDS

    def _match(self, node: QueryAst, spec, universe, cache) -> set[Handle]:
        if isinstance(node, (Term, Phrase)):
            hits: set[Handle] = set()
            terms = tokenize(node.text)
            for fld in self._leaf_fields(node):
                tfs = self._leaf_tfs(fld, terms, spec, universe)
                cache[(node, fld)] = tfs
                hits.update(tfs)
            return hits
        if isinstance(node, Not):
            return universe - self._match(node.child, spec, universe, cache)
        sets = [self._match(c, spec, universe, cache) for c in node.children]
        if isinstance(node, And):
            return set.intersection(*sets)
        return set.union(*sets)

    def _score(self, leaves, matched, spec, universe, st, cache) -> dict[Handle, float]:
        scores = dict.fromkeys(matched, 0.0)
        for leaf in leaves:
            terms = tokenize(leaf.text)
            for fld in self._leaf_fields(leaf):
                tfs = cache.get((leaf, fld)) or {}
                if not tfs:
                    continue
                idf = sum(self._idf(self._df(fld, t, spec, universe, st), st.n) for t in terms)
                avg = st.avg.get(fld, 0.0)
                for h, tf in tfs.items():
                    if h not in scores:
                        continue
                    dl = self._doc_len(self.docs[h], fld, spec)
                    norm = K1 * (1 - B + B * dl / avg) if avg else K1
                    scores[h] += idf * tf * (K1 + 1) / (tf + norm)
        return scores

    @staticmethod
    def _idf(df: int, n: int) -> float:
        return math.log(1 + (n - df + 0.5) / (df + 0.5))

    def query(
        self,
        q: QueryAst | str,
        filter_agg: Handle | None = None,
        view: ViewSpec | None = None,
        limit: int = 10,
        offset: int = 0,
    ) -> SearchResult:
        """Ranked resources matching ``q``; ties break by handle serial."""
        ast = parse_query(q) if isinstance(q, str) else q
        with self._lock:
            if not self.ready:
                raise IndexUnavailable("search index has not been built")
            universe = self._universe(view)
            st = self._stats_for(view, universe)
            cache: dict = {}
            matched = self._match(ast, view, universe, cache)
            if filter_agg is not None:
                matched = {h for h in matched if filter_agg in self.docs[h].ancestors}
            scores = self._score(positive_leaves(ast), matched, view, universe, st, cache)
            ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].serial))
            page = ranked[offset : offset + limit] if limit is not None else ranked[offset:]
            hits = [Hit(h, s, self._snippet(self.docs[h], view)) for h, s in page]
            return SearchResult(len(ranked), hits)

    def _snippet(self, doc: IndexDoc, spec: ViewSpec | None) -> dict:
        fields = doc.fields(spec)
        return {k: fields[k] for k in ("title", "subject") if k in fields}

    # -- persistence and tailing ----------------------------------------------------------

    def save(self) -> None:
        if self.path is None:
            return
        with self._lock:
            self.path.mkdir(parents=True, exist_ok=True)
            tmp = self.path / "index.pkl.tmp"
            with open(tmp, "wb") as fh:
                pickle.dump({"cursor": self.cursor, "docs": self.docs}, fh, protocol=pickle.HIGHEST_PROTOCOL)
            tmp.replace(self.path / "index.pkl")

    def load(self) -> bool:
        """Restore a saved index; returns False if none is usable."""
        if self.path is None or not (self.path / "index.pkl").exists():
            return False
        with open(self.path / "index.pkl", "rb") as fh:
            state = pickle.load(fh)
        if state["cursor"] > self.repo.last_seq:
            return False
        with self._lock:
            self.docs = {}
            self.postings = defaultdict(dict)
            for doc in state["docs"].values():
                self._add_doc(doc)
            self.cursor = state["cursor"]
            self.ready = True
            self._bump()
        return True

    def open(self) -> SearchIndex:
        if not self.load():
            self.rebuild()
        self.update_from_journal()
        return self

    def start_tailer(self, interval: float = 1.0) -> None:
        """Keep the index within ``interval`` seconds of the journal."""

        def run() -> None:
            while not self._stop.is_set():
                self.repo.journal.wait_for(self.cursor + 1, interval)
                if self._stop.is_set():
                    break
                try:
                    self.update_from_journal()
                except Exception:
                    log.exception("index update failed")
                    self._stop.wait(interval)

        self._stop.clear()
        self._tailer = threading.Thread(target=run, name="index-tailer", daemon=True)
        self._tailer.start()

    def stop(self) -> None:
        self._stop.set()
        if self._tailer is not None:
            self._tailer.join(timeout=5)


def propagate_fields(repo, agg: Handle, fields: Iterable[str], actor: Handle) -> None:
    """Propagate collection-level ``fields`` of ``agg`` onto its member resources."""
    repo.set_propagation(agg, fields, actor)
