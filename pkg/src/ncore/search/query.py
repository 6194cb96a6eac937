"""Boolean fielded query language.

Grammar::

    query := or
    or    := and ("OR" and)*
    and   := unary ("AND" unary | unary)*
    unary := "NOT" unary | atom
    atom  := "(" query ")" | field ":" value | value
    value := word | quoted-phrase

Adjacent terms are AND-ed. Keywords are upper-case only. A field name must be
followed directly by ":" and its value, with no spaces. Inside a phrase,
``\\"`` and ``\\\\`` escape a quote and a backslash.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from ..errors import QuerySyntaxError, UnknownField

FIELDS = (
    "title",
    "description",
    "subject",
    "identifier",
    "language",
    "audience",
    "format",
    "type",
    "date",
    "creator",
    "publisher",
    "rights",
    "educationLevel",
    "body",
)
DEFAULT_FIELDS = ("title", "description", "subject")
KEYWORDS = frozenset({"AND", "OR", "NOT"})
MAX_QUERY_BYTES = 4096
MAX_DEPTH = 128

WORD_RE = re.compile(r'[^\s()":]+')


@dataclass(frozen=True)
class Term:
    field: str | None
    text: str


@dataclass(frozen=True)
class Phrase:
    field: str | None
    text: str


@dataclass(frozen=True)
class Not:
    child: QueryAst


@dataclass(frozen=True)
class And:
    children: tuple[QueryAst, ...]


@dataclass(frozen=True)
class Or:
    children: tuple[QueryAst, ...]


QueryAst = Union[Term, Phrase, Not, And, Or]


@dataclass(frozen=True)
class _Tok:
    kind: str  # "(", ")", ":", "word", "phrase", "end"
    text: str
    pos: int
    glued: bool = False  # no whitespace between this token and the previous one


def _lex(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    i, n = 0, len(text)
    prev_end = -1
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        glued = i == prev_end
        if c in "():":
            toks.append(_Tok(c, c, i, glued))
            i += 1
        elif c == '"':
            start = i
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise QuerySyntaxError("unterminated phrase", start)
                c = text[i]
                if c == "\\" and i + 1 < n and text[i + 1] in '"\\':
                    buf.append(text[i + 1])
                    i += 2
                elif c == '"':
                    i += 1
                    break
                else:
                    buf.append(c)
                    i += 1
            toks.append(_Tok("phrase", "".join(buf), start, glued))
        else:
            m = WORD_RE.match(text, i)
            toks.append(_Tok("word", m.group(), i, glued))
            i = m.end()
        prev_end = i
    toks.append(_Tok("end", "", n, n == prev_end))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.i = 0
        self.depth = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _keyword(self, word: str) -> bool:
        t = self.tok
        return t.kind == "word" and t.text == word

    def _enter(self) -> None:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise QuerySyntaxError("query nested too deeply", self.tok.pos)

    def parse(self) -> QueryAst:
        if self.tok.kind == "end":
            raise QuerySyntaxError("empty query", 0)
        node = self._or()
        if self.tok.kind != "end":
            raise QuerySyntaxError(f"unexpected {self.tok.text!r}", self.tok.pos)
        return node

    def _or(self) -> QueryAst:
        items = [self._and()]
        while self._keyword("OR"):
            self.i += 1
            items.append(self._and())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def _starts_unary(self) -> bool:
        t = self.tok
        if t.kind in ("(", "phrase"):
            return True
        return t.kind == "word" and t.text not in ("AND", "OR")

    def _and(self) -> QueryAst:
        items = [self._unary()]
        while True:
            if self._keyword("AND"):
                self.i += 1
                items.append(self._unary())
            elif self._starts_unary():
                items.append(self._unary())
            else:
                break
        return items[0] if len(items) == 1 else And(tuple(items))

    def _unary(self) -> QueryAst:
        self._enter()
        try:
            if self._keyword("NOT"):
                self.i += 1
                return Not(self._unary())
            return self._atom()
        finally:
            self.depth -= 1

    def _atom(self) -> QueryAst:
        t = self.tok
        if t.kind == "(":
            self.i += 1
            node = self._or()
            if self.tok.kind != ")":
                raise QuerySyntaxError("expected ')'", self.tok.pos)
            self.i += 1
            return node
        if t.kind == "phrase":
            self.i += 1
            return Phrase(None, t.text)
        if t.kind == "word":
            nxt = self.toks[self.i + 1]
            if nxt.kind == ":" and nxt.glued:
                return self._fielded(t)
            if t.text in KEYWORDS:
                raise QuerySyntaxError(f"unexpected keyword {t.text}", t.pos)
            self.i += 1
            return Term(None, t.text)
        if t.kind == "end":
            raise QuerySyntaxError("unexpected end of query", t.pos)
        raise QuerySyntaxError(f"unexpected {t.text!r}", t.pos)

    def _fielded(self, name: _Tok) -> QueryAst:
        if name.text not in FIELDS:
            raise UnknownField(name.text, name.pos)
        self.i += 2
        v = self.tok
        if not v.glued or v.kind not in ("word", "phrase"):
            raise QuerySyntaxError(f"expected a value after '{name.text}:'", v.pos)
        self.i += 1
        if v.kind == "phrase":
            return Phrase(name.text, v.text)
        return Term(name.text, v.text)


def parse_query(text: str) -> QueryAst:
    """Parse ``text`` into an AST or raise ``QuerySyntaxError``/``UnknownField``."""
    if not isinstance(text, str):
        raise QuerySyntaxError("query must be a string", 0)
    if len(text.encode("utf-8", "surrogatepass")) > MAX_QUERY_BYTES:
        raise QuerySyntaxError(f"query longer than {MAX_QUERY_BYTES} bytes", MAX_QUERY_BYTES)
    return _Parser(text).parse()


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def print_query(node: QueryAst) -> str:
    """Render an AST in a form ``parse_query`` maps back to the same AST."""
    if isinstance(node, Term):
        return f"{node.field}:{node.text}" if node.field else node.text
    if isinstance(node, Phrase):
        return f"{node.field}:{_quote(node.text)}" if node.field else _quote(node.text)
    if isinstance(node, Not):
        return "NOT " + _nested(node.child)
    sep = " AND " if isinstance(node, And) else " OR "
    return sep.join(_nested(c) for c in node.children)


def _nested(node: QueryAst) -> str:
    text = print_query(node)
    return f"({text})" if isinstance(node, (And, Or)) else text


def positive_leaves(node: QueryAst) -> list[Term | Phrase]:
    """Leaves that can contribute to a score (i.e. not under a NOT)."""
    if isinstance(node, (Term, Phrase)):
        return [node]
    if isinstance(node, Not):
        return []
    out: list[Term | Phrase] = []
    for c in node.children:
        out.extend(positive_leaves(c))
    return out
