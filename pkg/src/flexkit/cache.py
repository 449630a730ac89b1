"""Persistent on-disk LRU cache for retrieval results.

Layout under the cache directory::

    manifest.json             {"version": 1, "order": [key, ...]}  (LRU first)
    entries/ab/cd/<key>.json  {"key": key, "value": ...}
    .lock                     inter-process writer lock

Entries and the manifest are written to a temporary file and renamed into
place.  An entry is written before the manifest mentions it, so a crash in
between leaves an orphan file; orphans that parse are adopted as the most
recently used entries when the cache is next opened, and unreadable ones
are deleted.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import unicodedata
import uuid
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from filelock import FileLock

MANIFEST_VERSION = 1
CACHE_ENV = "FLEXKIT_CACHE_DIR"


class CacheError(Exception):
    pass


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "flexkit"


def normalize_query(query: str) -> str:
    """NFC, trimmed, internal whitespace collapsed.  Case is kept."""
    return " ".join(unicodedata.normalize("NFC", query).split())


def cache_key(fingerprint: str, query: str, k: int) -> str:
    h = hashlib.blake2b(digest_size=16)
    for part in (fingerprint, normalize_query(query), str(int(k))):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{uuid.uuid4().hex}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class QueryCache:
    def __init__(self, directory: str | os.PathLike | None = None, capacity: int = 10_000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.directory = Path(directory) if directory is not None else default_cache_dir()
        self.capacity = capacity
        self.hits = 0
        self.misses = 0
        try:
            (self.directory / "entries").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CacheError(f"cache directory {self.directory} is not usable: {exc}") from None
        if not os.access(self.directory, os.W_OK):
            raise CacheError(f"cache directory {self.directory} is not writable")
        self._manifest = self.directory / "manifest.json"
        self._flock = FileLock(str(self.directory / ".lock"))
        self._tlock = threading.Lock()
        with self._locked():
            self._reconcile()

    # -- locking and manifest -------------------------------------------

    @contextmanager
    def _locked(self):
        # thread lock first: FileLock is re-entrant within one process
        with self._tlock, self._flock:
            yield

    def _read_order(self) -> list[str]:
        try:
            data = json.loads(self._manifest.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return []
        except (OSError, ValueError):
            return []  # rebuilt from entry files by _reconcile
        if data.get("version") != MANIFEST_VERSION or not isinstance(data.get("order"), list):
            return []
        return [k for k in data["order"] if isinstance(k, str)]

    def _write_order(self, order: list[str]) -> None:
        payload = json.dumps({"version": MANIFEST_VERSION, "order": order}, separators=(",", ":"))
        _atomic_write(self._manifest, payload.encode("utf-8"))

    def entry_path(self, key: str) -> Path:
        return self.directory / "entries" / key[:2] / key[2:4] / f"{key}.json"

    def _load_entry(self, key: str) -> tuple[bool, Any]:
        try:
            data = json.loads(self.entry_path(key).read_bytes())
        except (OSError, ValueError):
            return False, None
        if not isinstance(data, dict) or data.get("key") != key or "value" not in data:
            return False, None
        return True, data["value"]

    def _drop(self, key: str) -> None:
        try:
            self.entry_path(key).unlink()
        except FileNotFoundError:
            pass

    def _reconcile(self) -> None:
        order = self._read_order()
        listed = set(order)
        on_disk: list[tuple[float, str]] = []
        for p in (self.directory / "entries").rglob("*"):
            if p.name.endswith(".tmp"):
                p.unlink(missing_ok=True)
            elif p.suffix == ".json" and p == self.entry_path(p.stem):
                on_disk.append((p.stat().st_mtime, p.stem))
        present = {key for _, key in on_disk}
        order = [k for k in dict.fromkeys(order) if k in present]
        for _, key in sorted(on_disk):
            if key in listed:
                continue
            ok, _ = self._load_entry(key)
            if ok:
                order.append(key)
            else:
                self._drop(key)
        order = self._evict(order)
        self._write_order(order)

    def _evict(self, order: list[str]) -> list[str]:
        while len(order) > self.capacity:
            self._drop(order.pop(0))
        return order

    # -- public API -------------------------------------------------------

    def get(self, key: str) -> tuple[bool, Any]:
        """``(True, value)`` on a hit; ``(False, None)`` on a miss.

        A hit moves the key to the most-recently-used position.  A corrupt
        entry counts as a miss and is removed.
        """
        with self._locked():
            order = self._read_order()
            if key not in order:
                self.misses += 1
                return False, None
            ok, value = self._load_entry(key)
            order.remove(key)
            if ok:
                order.append(key)
            else:
                self._drop(key)
            self._write_order(order)
        if ok:
            self.hits += 1
        else:
            self.misses += 1
        return ok, value

    def put(self, key: str, value: Any) -> None:
        path = self.entry_path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = json.dumps({"key": key, "value": value}, sort_keys=True, separators=(",", ":"))
        with self._locked():
            _atomic_write(path, data.encode("utf-8"))
            order = [k for k in self._read_order() if k != key]
            order.append(key)
            self._write_order(self._evict(order))

    def keys(self) -> list[str]:
        """Keys in LRU order (least recently used first)."""
        with self._locked():
            return self._read_order()

    def __len__(self) -> int:
        return len(self.keys())

    def __contains__(self, key: str) -> bool:
        return key in self.keys()

    def clear(self) -> None:
        with self._locked():
            for key in self._read_order():
                self._drop(key)
            self._write_order([])
