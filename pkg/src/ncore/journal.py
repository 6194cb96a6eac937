"""Append-only, checksum-chained mutation journal.

On-disk record (all integers little-endian)::

    u32  length    bytes that follow, up to and including the checksum
    u8   type      1 = entry, 2 = checkpoint
    u64  seq
    u32  prev      checksum of entry seq-1 (0 for seq 1 and for checkpoints)
    ...  body      canonical JSON
    u32  checksum  CRC-32C over type..body

Segments hold ``ENTRIES_PER_SEGMENT`` entries and are named by their first
seq (``00000000000000000001.log``). Checkpoint records carry the state hash
after the entry with the same seq and sit directly after it; they are not
part of the checksum chain. The replication wire format is a plain
concatenation of these records.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import crc32c

from .errors import ChecksumMismatch, GapDetected
from .handles import Handle

ENTRY = 1
CHECKPOINT = 2
ENTRIES_PER_SEGMENT = 1 << 20

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BQI")
_CRC = struct.Struct("<I")
_MIN_LEN = _HEAD.size + _CRC.size


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass(frozen=True)
class JournalEntry:
    seq: int
    timestamp: int
    actor: Handle | None
    op: str
    payload: dict = field(compare=False)
    prev_checksum: int = 0
    checksum: int = 0

    def body(self) -> bytes:
        return canonical_json(
            {
                "actor": str(self.actor) if self.actor is not None else None,
                "op": self.op,
                "payload": self.payload,
                "ts": self.timestamp,
            }
        )


@dataclass(frozen=True)
class Record:
    type: int
    seq: int
    prev: int
    body: bytes
    checksum: int
    raw: bytes

    def entry(self) -> JournalEntry:
        doc = json.loads(self.body)
        actor = Handle.parse(doc["actor"]) if doc["actor"] is not None else None
        return JournalEntry(self.seq, doc["ts"], actor, doc["op"], doc["payload"], self.prev, self.checksum)

    def state_hash(self) -> str:
        return json.loads(self.body)["state_hash"]


def encode_record(rtype: int, seq: int, prev: int, body: bytes) -> tuple[bytes, int]:
    head = _HEAD.pack(rtype, seq, prev)
    checksum = crc32c.crc32c(head + body)
    rest = head + body + _CRC.pack(checksum)
    return _LEN.pack(len(rest)) + rest, checksum


def encode_entry(entry: JournalEntry) -> tuple[bytes, int]:
    return encode_record(ENTRY, entry.seq, entry.prev_checksum, entry.body())


def encode_checkpoint(seq: int, state_hash: str) -> bytes:
    return encode_record(CHECKPOINT, seq, 0, canonical_json({"state_hash": state_hash}))[0]


class TornRecord(Exception):
    """A record was cut short at the end of the stream (crash mid-write)."""


def decode_records(data: bytes, expected_seq: int = 1) -> Iterator[Record]:
    """Decode a run of records, verifying each checksum.

    Raises ``ChecksumMismatch`` naming the seq the bad record should have
    carried, and ``TornRecord`` if the buffer ends inside a record.
    """
    pos = 0
    n = len(data)
    while pos < n:
        if n - pos < _LEN.size:
            raise TornRecord(pos)
        (length,) = _LEN.unpack_from(data, pos)
        if length < _MIN_LEN:
            raise ChecksumMismatch(expected_seq, f"corrupt record length at seq {expected_seq}")
        end = pos + _LEN.size + length
        if end > n:
            raise TornRecord(pos)
        start = pos + _LEN.size
        rtype, seq, prev = _HEAD.unpack_from(data, start)
        body = data[start + _HEAD.size : end - _CRC.size]
        (checksum,) = _CRC.unpack_from(data, end - _CRC.size)
        if crc32c.crc32c(data[start : end - _CRC.size]) != checksum or rtype not in (ENTRY, CHECKPOINT):
            raise ChecksumMismatch(expected_seq)
        if rtype == ENTRY:
            expected_seq = seq + 1
        yield Record(rtype, seq, prev, body, checksum, data[pos:end])
        pos = end


class ChainVerifier:
    """Checks gapless seqs and the prev-checksum chain over entry records."""

    def __init__(self, last_seq: int = 0, last_checksum: int = 0):
        self.last_seq = last_seq
        self.last_checksum = last_checksum

    def check(self, rec: Record) -> None:
        if rec.type != ENTRY:
            return
        if rec.seq != self.last_seq + 1:
            raise GapDetected(self.last_seq + 1, rec.seq)
        if rec.prev != self.last_checksum:
            raise ChecksumMismatch(rec.seq, f"broken checksum chain at seq {rec.seq}")
        self.last_seq = rec.seq
        self.last_checksum = rec.checksum


class Journal:
    """In-memory journal; the base for the file-backed one."""

    def __init__(self) -> None:
        self.last_seq = 0
        self.last_checksum = 0
        self._lock = threading.Condition()
        self._records: list[bytes] = []
        self._entry_index: list[int] = []  # entry seq-1 -> position in _records

    # writer side

    def append(self, raw: bytes, rec_type: int, seq: int, checksum: int | None = None) -> None:
        with self._lock:
            self._store(raw)
            if rec_type == ENTRY:
                self._entry_index.append(len(self._records) - 1)
                self.last_seq = seq
                self.last_checksum = checksum if checksum is not None else 0
            self._lock.notify_all()

    def _store(self, raw: bytes) -> None:
        self._records.append(raw)

    def sync(self) -> None:
        pass

    def close(self) -> None:
        pass

    # reader side

    def read_raw(self, from_seq: int, max_entries: int = 1000) -> list[bytes]:
        """Records for entries ``>= from_seq`` plus interleaved checkpoints."""
        with self._lock:
            if from_seq < 1:
                from_seq = 1
            if from_seq > self.last_seq:
                return []
            start = self._entry_index[from_seq - 1]
            out: list[bytes] = []
            entries = 0
            for raw in self._iter_from(start):
                if raw[4] == ENTRY:
                    if entries >= max_entries:
                        break
                    entries += 1
                out.append(raw)
            return out

    def _iter_from(self, position: int) -> Iterable[bytes]:
        return self._records[position:]

    def wait_for(self, seq: int, timeout: float) -> bool:
        with self._lock:
            return self._lock.wait_for(lambda: self.last_seq >= seq, timeout=timeout)

    def iter_records(self) -> Iterator[Record]:
        with self._lock:
            blob = b"".join(self._records)
        yield from decode_records(blob)


class FileJournal(Journal):
    def __init__(self, directory: Path, fsync: bool = True, entries_per_segment: int = ENTRIES_PER_SEGMENT):
        super().__init__()
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.per_segment = entries_per_segment
        self._fh = None
        self._segment_first = 0
        self._offsets: list[tuple[int, int]] = []  # entry seq-1 -> (segment first seq, offset)
        self._sizes: dict[int, int] = {}

    def segments(self) -> list[Path]:
        return sorted(self.dir.glob("*.log"))

    def _segment_for(self, seq: int) -> int:
        return ((seq - 1) // self.per_segment) * self.per_segment + 1

    def _path(self, first: int) -> Path:
        return self.dir / f"{first:020d}.log"

    def recover(self, truncate_torn: bool = True) -> Iterator[Record]:
        """Scan every segment, yielding verified records in order.

        A torn final record is cut off (crash mid-append). A corrupt record
        stops the scan with ``ChecksumMismatch`` after all earlier records
        have been yielded.
        """
        verifier = ChainVerifier()
        segments = self.segments()
        for i, path in enumerate(segments):
            data = path.read_bytes()
            first = int(path.stem)
            pos = 0
            try:
                for rec in decode_records(data, verifier.last_seq + 1):
                    verifier.check(rec)
                    if rec.type == ENTRY:
                        self._offsets.append((first, pos))
                        self.last_seq = rec.seq
                        self.last_checksum = rec.checksum
                    pos += len(rec.raw)
                    yield rec
            except TornRecord:
                if i != len(segments) - 1 or not truncate_torn:
                    raise ChecksumMismatch(verifier.last_seq + 1, "torn record inside the journal") from None
                with open(path, "r+b") as fh:
                    fh.truncate(pos)
            self._sizes[first] = pos

    def _open_for_append(self, seq: int) -> None:
        first = self._segment_for(seq)
        if self._fh is not None and self._segment_first == first:
            return
        if self._fh is not None:
            self._fh.close()
        self._fh = open(self._path(first), "ab")
        self._segment_first = first
        self._sizes.setdefault(first, self._fh.tell())

    def append(self, raw: bytes, rec_type: int, seq: int, checksum: int | None = None) -> None:
        with self._lock:
            self._open_for_append(seq)
            offset = self._sizes[self._segment_first]
            self._fh.write(raw)
            self._fh.flush()
            self._sizes[self._segment_first] = offset + len(raw)
            if rec_type == ENTRY:
                self._offsets.append((self._segment_first, offset))
                self.last_seq = seq
                self.last_checksum = checksum if checksum is not None else 0
            self._lock.notify_all()

    def sync(self) -> None:
        with self._lock:
            if self._fh is not None and self.fsync:
                os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
                self._fh.close()
                self._fh = None

    def read_raw(self, from_seq: int, max_entries: int = 1000) -> list[bytes]:
        with self._lock:
            if from_seq < 1:
                from_seq = 1
            if from_seq > self.last_seq:
                return []
            first, offset = self._offsets[from_seq - 1]
            sizes = dict(self._sizes)
        out: list[bytes] = []
        entries = 0
        while first in sizes:
            with open(self._path(first), "rb") as fh:
                fh.seek(offset)
                data = fh.read(sizes[first] - offset)
            for rec in decode_records(data, from_seq):
                if rec.type == ENTRY:
                    if entries >= max_entries:
                        return out
                    entries += 1
                out.append(rec.raw)
            first += self.per_segment
            offset = 0
        return out

    def iter_records(self) -> Iterator[Record]:
        for path in self.segments():
            yield from decode_records(path.read_bytes())


def replay_records(records: Iterable[Record], apply_entry, on_checkpoint=None, verifier: ChainVerifier | None = None) -> int:
    """Apply entry records in order through ``apply_entry``; return last seq.

    Stops at the first corrupt record by letting ``ChecksumMismatch``
    propagate, so everything before it has already been applied.
    """
    verifier = verifier or ChainVerifier()
    for rec in records:
        verifier.check(rec)
        if rec.type == ENTRY:
            apply_entry(rec.entry())
        elif on_checkpoint is not None:
            on_checkpoint(rec.seq, rec.state_hash())
    return verifier.last_seq
