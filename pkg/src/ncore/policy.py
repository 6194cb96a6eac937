"""Agents, grants and signed-request authentication."""

from __future__ import annotations

import base64
import enum
import hashlib
import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .errors import (
    AuthMissing,
    BadSignature,
    MalformedKey,
    ReplayedNonce,
    StaleTimestamp,
)
from .handles import Handle
from .model import format_ts, parse_ts

DEFAULT_SCHEME = "ed25519"
CLOCK_SKEW_S = 300
NONCE_WINDOW_S = 600

HEADER_AGENT = "X-NCore-Agent"
HEADER_TIMESTAMP = "X-NCore-Timestamp"
HEADER_NONCE = "X-NCore-Nonce"
HEADER_SIGNATURE = "X-NCore-Signature"
HEADER_SCHEME = "X-NCore-Signature-Scheme"


class Capability(str, enum.Enum):
    MANAGE_MEMBERSHIP = "manage_membership"
    WRITE_METADATA = "write_metadata"


@dataclass(frozen=True)
class Grant:
    grantor: Handle
    grantee: Handle
    scope: Handle
    capability: Capability
    created: int

    @property
    def key(self) -> tuple[Handle, Handle, Capability]:
        return (self.grantee, self.scope, self.capability)

    def to_json(self) -> dict:
        return {
            "grantor": str(self.grantor),
            "grantee": str(self.grantee),
            "scope": str(self.scope),
            "capability": self.capability.value,
            "created": format_ts(self.created),
        }


# -- keys ----------------------------------------------------------------------


def load_public_key(raw: bytes, scheme: str = DEFAULT_SCHEME) -> Ed25519PublicKey:
    if scheme != DEFAULT_SCHEME:
        raise MalformedKey(f"unsupported signature scheme {scheme!r}")
    try:
        return Ed25519PublicKey.from_public_bytes(raw)
    except (ValueError, TypeError) as exc:
        raise MalformedKey(f"not a raw ed25519 public key: {exc}") from None


def parse_public_key_file(data: bytes) -> bytes:
    """Accept PEM, base64 or raw 32-byte public keys; return raw bytes."""
    text = data.strip()
    if text.startswith(b"-----BEGIN"):
        try:
            key = serialization.load_pem_public_key(text)
        except ValueError as exc:
            raise MalformedKey(str(exc)) from None
        if not isinstance(key, Ed25519PublicKey):
            raise MalformedKey("PEM key is not ed25519")
        return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    if len(data) == 32:
        return data
    try:
        raw = base64.b64decode(text, validate=True)
    except ValueError:
        raise MalformedKey("unrecognised public key encoding") from None
    load_public_key(raw)
    return raw


def generate_keypair() -> tuple[Ed25519PrivateKey, bytes]:
    key = Ed25519PrivateKey.generate()
    pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return key, pub


def private_key_pem(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def load_private_key(pem: bytes) -> Ed25519PrivateKey:
    key = serialization.load_pem_private_key(pem, password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise MalformedKey("private key is not ed25519")
    return key


# -- signed requests -------------------------------------------------------------


def payload_digest(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()


def signing_string(method: str, path: str, timestamp: str, nonce: str, digest_hex: str) -> bytes:
    return f"{method}\n{path}\n{timestamp}\n{nonce}\n{digest_hex}".encode("utf-8")


@dataclass(frozen=True)
class SignedRequest:
    agent: Handle
    timestamp: str
    nonce: str
    signature: bytes
    scheme: str = DEFAULT_SCHEME

    @classmethod
    def from_headers(cls, headers: Mapping[str, str]) -> SignedRequest:
        lower = {k.lower(): v for k, v in headers.items()}
        names = (HEADER_AGENT, HEADER_TIMESTAMP, HEADER_NONCE, HEADER_SIGNATURE)
        missing = [h for h in names if h.lower() not in lower]
        if missing:
            raise AuthMissing(f"missing auth headers: {', '.join(missing)}")
        try:
            agent = Handle.parse(lower[HEADER_AGENT.lower()])
            signature = base64.b64decode(lower[HEADER_SIGNATURE.lower()], validate=True)
        except ValueError:
            raise BadSignature("malformed auth headers") from None
        nonce = lower[HEADER_NONCE.lower()]
        if len(nonce) != 32 or any(c not in "0123456789abcdef" for c in nonce.lower()):
            raise BadSignature("nonce must be 32 hex characters")
        return cls(
            agent,
            lower[HEADER_TIMESTAMP.lower()],
            nonce.lower(),
            signature,
            lower.get(HEADER_SCHEME.lower(), DEFAULT_SCHEME),
        )


def sign_request(
    key: Ed25519PrivateKey,
    agent: Handle,
    method: str,
    path: str,
    body: bytes = b"",
    now: float | None = None,
    nonce: str | None = None,
) -> dict[str, str]:
    """Headers for a request signed by ``key``; used by clients and tests."""
    ts = format_ts(int((time.time() if now is None else now) * 1_000_000))
    ts = ts[:19] + "Z"
    nonce = nonce or os.urandom(16).hex()
    sig = key.sign(signing_string(method, path, ts, nonce, payload_digest(body)))
    return {
        HEADER_AGENT: str(agent),
        HEADER_TIMESTAMP: ts,
        HEADER_NONCE: nonce,
        HEADER_SIGNATURE: base64.b64encode(sig).decode("ascii"),
    }


class NonceCache:
    """Remembers (agent, nonce) pairs for ``window`` seconds; thread-safe."""

    def __init__(self, window: float = NONCE_WINDOW_S):
        self.window = window
        self._seen: dict[tuple[Handle, str], float] = {}
        self._lock = threading.Lock()

    def check_and_add(self, agent: Handle, nonce: str, now: float) -> None:
        with self._lock:
            if len(self._seen) > 4096:
                cutoff = now - self.window
                self._seen = {k: t for k, t in self._seen.items() if t >= cutoff}
            key = (agent, nonce)
            seen_at = self._seen.get(key)
            if seen_at is not None and now - seen_at <= self.window:
                raise ReplayedNonce(f"nonce replayed for {agent}", agent)
            self._seen[key] = now


def verify_request(
    req: SignedRequest,
    method: str,
    path: str,
    body: bytes,
    public_key: bytes,
    nonces: NonceCache,
    clock: Callable[[], float] = time.time,
    skew: float = CLOCK_SKEW_S,
) -> None:
    """Check signature, clock window and nonce freshness, in that order.

    The nonce is only recorded once the signature verifies, so forged
    requests cannot burn a legitimate client's nonces.
    """
    try:
        ts_us = parse_ts(req.timestamp)
    except ValueError:
        raise StaleTimestamp("unparseable timestamp", req.agent) from None
    key = load_public_key(public_key, req.scheme)
    message = signing_string(method, path, req.timestamp, req.nonce, payload_digest(body))
    try:
        key.verify(req.signature, message)
    except InvalidSignature:
        raise BadSignature("signature does not verify", req.agent) from None
    now = clock()
    if abs(now - ts_us / 1_000_000) > skew:
        raise StaleTimestamp("request timestamp outside the allowed window", req.agent)
    nonces.check_and_add(req.agent, req.nonce, now)
