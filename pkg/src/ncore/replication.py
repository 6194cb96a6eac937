"""Journal shipping from a leader to read-only followers.

A follower repeatedly asks the leader for records after its own last seq
(long-polling when there is nothing new), appends and applies them, and
compares state hashes at every shipped checkpoint. Transport failures back
off exponentially; a hash mismatch halts the follower for good.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Protocol

from .errors import DivergenceDetected, NCoreError, ReplicationError

log = logging.getLogger(__name__)

LAST_SEQ_HEADER = "X-NCore-Last-Seq"


def serve_entries(repo, from_seq: int, wait: float = 0.0, max_entries: int = 1000) -> tuple[bytes, int]:
    """Leader side: raw records from ``from_seq`` on, waiting up to ``wait`` seconds for any."""
    journal = repo.journal
    if wait > 0 and journal.last_seq < from_seq:
        journal.wait_for(from_seq, wait)
    return b"".join(journal.read_raw(from_seq, max_entries)), journal.last_seq


class Transport(Protocol):
    def fetch(self, from_seq: int, wait: float) -> tuple[bytes, int]: ...


@dataclass
class LocalTransport:
    """Reads straight from an in-process leader."""

    leader: object
    max_entries: int = 1000

    def fetch(self, from_seq: int, wait: float) -> tuple[bytes, int]:
        return serve_entries(self.leader, from_seq, wait, self.max_entries)


@dataclass
class HttpTransport:
    """Talks to a leader's ``/replication/entries`` endpoint."""

    base_url: str
    max_entries: int = 1000
    timeout: float = 30.0

    def fetch(self, from_seq: int, wait: float) -> tuple[bytes, int]:
        url = f"{self.base_url.rstrip('/')}/replication/entries?from={from_seq}&wait={wait}&max={self.max_entries}"
        try:
            with urllib.request.urlopen(url, timeout=self.timeout + wait) as resp:
                return resp.read(), int(resp.headers.get(LAST_SEQ_HEADER, "0"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ReplicationError(f"cannot reach leader at {self.base_url}: {exc}") from None

    def checkpoint(self) -> dict:
        with urllib.request.urlopen(f"{self.base_url.rstrip('/')}/replication/checkpoint", timeout=self.timeout) as resp:
            return json.loads(resp.read())


class Follower:
    def __init__(
        self,
        repo,
        transport: Transport,
        poll_wait: float = 1.0,
        min_backoff: float = 0.05,
        max_backoff: float = 5.0,
    ):
        self.repo = repo
        self.transport = transport
        self.poll_wait = poll_wait
        self.min_backoff = min_backoff
        self.max_backoff = max_backoff
        self.leader_seq = 0
        self.halted: DivergenceDetected | None = None
        self.last_error: str | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    @property
    def lag(self) -> int:
        return max(0, self.leader_seq - self.repo.last_seq)

    def step(self, wait: float | None = None) -> int:
        """Pull and apply one batch; returns how many entries were applied."""
        if self.halted is not None:
            raise self.halted
        before = self.repo.last_seq
        raw, leader_seq = self.transport.fetch(before + 1, self.poll_wait if wait is None else wait)
        self.leader_seq = max(self.leader_seq, leader_seq)
        if raw:
            try:
                self.repo.apply_replicated(raw)
            except DivergenceDetected as exc:
                self.halted = exc
                log.error("follower halted: %s", exc)
                raise
        return self.repo.last_seq - before

    def catch_up(self, timeout: float = 60.0) -> int:
        """Pull until no lag remains; returns the final seq."""
        deadline = time.monotonic() + timeout
        while True:
            self.step(wait=0)
            if self.lag == 0:
                return self.repo.last_seq
            if time.monotonic() > deadline:
                raise ReplicationError(f"follower still {self.lag} entries behind after {timeout}s")

    def run(self) -> None:
        backoff = self.min_backoff
        while not self._stop.is_set():
            try:
                self.step()
                self.last_error = None
                backoff = self.min_backoff
            except DivergenceDetected:
                return
            except NCoreError as exc:
                self.last_error = str(exc)
                log.warning("replication error, retrying in %.2fs: %s", backoff, exc)
                self._stop.wait(backoff)
                backoff = min(self.max_backoff, backoff * 2)

    def start(self) -> None:
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, name="ncore-follower", daemon=True)
        self._thread.start()

    def stop(self, timeout: float | None = None) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    def status(self) -> dict:
        return {
            "role": self.repo.role,
            "last_seq": self.repo.last_seq,
            "leader_seq": self.leader_seq,
            "lag": self.lag,
            "halted": self.halted is not None,
            "error": str(self.halted) if self.halted else self.last_error,
        }
