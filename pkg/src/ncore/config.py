"""Node configuration, stored as JSON next to the data it describes."""

from __future__ import annotations

import fcntl
import json
import os
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import NCoreError

CONFIG_FILE = "config.json"
ADMIN_KEY_FILE = "admin.key"
LOCK_FILE = "lock"
_REPO_ID_RE = re.compile(r"[a-z0-9.-]+\Z")


class ConfigError(NCoreError):
    code = "config.invalid"
    status = 400


class RepositoryLocked(OSError):
    """Another process holds the data directory."""


@dataclass
class Config:
    data_dir: str
    repo_id: str
    listen_addr: str = "127.0.0.1:8080"
    role: str = "leader"
    leader_addr: str | None = None
    public_view: str | None = None
    signature_scheme: str = "ed25519"
    base_url: str | None = None
    admin_email: str = "admin@example.org"
    oai_batch_size: int = 100
    oai_token_ttl: float = 24 * 3600
    checkpoint_interval: int = 1000
    index_interval: float = 1.0
    fsync: bool = True

    def validate(self) -> None:
        if not _REPO_ID_RE.match(self.repo_id or ""):
            raise ConfigError(f"repo_id {self.repo_id!r} must match [a-z0-9.-]+")
        if self.role not in ("leader", "follower"):
            raise ConfigError(f"role must be leader or follower, not {self.role!r}")
        if self.role == "follower" and not self.leader_addr:
            raise ConfigError("a follower needs leader_addr")
        if self.signature_scheme != "ed25519":
            raise ConfigError(f"unsupported signature scheme {self.signature_scheme!r}")
        self.host_port()
        if self.oai_batch_size < 1 or self.oai_token_ttl <= 0 or self.checkpoint_interval < 0:
            raise ConfigError("batch size, token TTL and checkpoint interval must be positive")

    def host_port(self) -> tuple[str, int]:
        host, sep, port = self.listen_addr.rpartition(":")
        if not sep or not port.isdigit():
            raise ConfigError(f"listen_addr {self.listen_addr!r} is not host:port")
        return host or "127.0.0.1", int(port)

    @property
    def path(self) -> Path:
        return Path(self.data_dir)

    @property
    def public_base_url(self) -> str:
        if self.base_url:
            return self.base_url.rstrip("/")
        host, port = self.host_port()
        return f"http://{host}:{port}"

    def save(self, path: Path | None = None) -> Path:
        path = path or self.path / CONFIG_FILE
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> Config:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{path}: unknown settings {sorted(unknown)}")
        if "data_dir" not in doc or "repo_id" not in doc:
            raise ConfigError(f"{path}: data_dir and repo_id are required")
        cfg = cls(**doc)
        if not Path(cfg.data_dir).is_absolute():
            cfg.data_dir = str((path.parent / cfg.data_dir).resolve())
        cfg.validate()
        return cfg


class DirLock:
    """Exclusive advisory lock on a data directory for the life of a process."""

    def __init__(self, data_dir: str | Path):
        self.path = Path(data_dir) / LOCK_FILE
        self._fd: int | None = None

    def __enter__(self) -> DirLock:
        fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise RepositoryLocked(f"{self.path.parent} is in use by another process") from None
        os.ftruncate(fd, 0)
        os.write(fd, str(os.getpid()).encode())
        self._fd = fd
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            fcntl.flock(self._fd, fcntl.LOCK_UN)
            os.close(self._fd)
            self._fd = None
