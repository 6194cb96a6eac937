"""Canonical form for resource URLs, so one web resource maps to one handle."""

from __future__ import annotations

from urllib.parse import parse_qsl, quote, unquote, urlencode, urlsplit, urlunsplit

from .errors import UnparseableURL

_DEFAULT_PORTS = {"http": 80, "https": 443}
# RFC 3986 unreserved characters are decoded; everything else stays encoded
_SAFE_PATH = "/:@!$&'()*+,;="


def _normalize_component(text: str, safe: str) -> str:
    return quote(unquote(text), safe=safe)


def normalize_url(raw: str) -> str:
    try:
        parts = urlsplit(raw.strip())
        port = parts.port
    except (ValueError, AttributeError) as exc:
        raise UnparseableURL(f"cannot parse URL {raw!r}: {exc}") from None
    scheme = parts.scheme.lower()
    if scheme not in _DEFAULT_PORTS or not parts.hostname:
        raise UnparseableURL(f"not an absolute http(s) URL: {raw!r}")
    host = parts.hostname.lower()
    if ":" in host:
        host = f"[{host}]"
    netloc = host
    if parts.username is not None:
        userinfo = parts.username + (f":{parts.password}" if parts.password is not None else "")
        netloc = f"{userinfo}@{host}"
    if port is not None and port != _DEFAULT_PORTS[scheme]:
        netloc += f":{port}"
    path = _normalize_component(parts.path or "/", _SAFE_PATH)
    query = ""
    if parts.query:
        pairs = parse_qsl(parts.query, keep_blank_values=True)
        query = urlencode(sorted(pairs), quote_via=quote, safe="")
    return urlunsplit((scheme, netloc, path, query, ""))
