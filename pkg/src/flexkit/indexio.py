"""Index persistence helpers shared by the retriever and the CLI.

Index files are byte-deterministic for a fixed seed, so a build identity
cannot live inside them without breaking that property.  Each saved index
gets a ``<path>.build.json`` sidecar holding its ``build_id`` and the
SHA-256 of the index file.  Unseeded builds get a random UUID; seeded
builds get a UUID derived from the seed and the file content, so two
identical seeded builds share an identity and anything else does not.
"""

from __future__ import annotations

import hashlib
import json
import os
import uuid
from pathlib import Path

from .dense import FlatIndex, IvfPqIndex, load_dense
from .sparse import Bm25Index

_NAMESPACE = uuid.UUID("6f1d3c52-93a0-4a8e-9a2b-1f4f0d8b6c11")

AnyIndex = Bm25Index | FlatIndex | IvfPqIndex


class IndexLoadError(Exception):
    pass


def ensure_build_id(index) -> str:
    """Return the index's build id, assigning a fresh random one if unset."""
    if getattr(index, "build_id", None) is None:
        index.build_id = str(uuid.uuid4())
    return index.build_id


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".build.json")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def seeded_build_id(seed: int, content_sha256: str) -> str:
    return str(uuid.uuid5(_NAMESPACE, f"{seed}:{content_sha256}"))


def save_index(index: AnyIndex, path: str | os.PathLike, seed: int | None = None) -> str:
    """Write ``index`` and its sidecar; returns the build id recorded."""
    path = Path(path)
    index.save(path)
    digest = _sha256(path)
    if seed is not None:
        index.build_id = seeded_build_id(seed, digest)
    build_id = ensure_build_id(index)
    tmp = _sidecar(path).with_suffix(".tmp")
    tmp.write_text(json.dumps({"build_id": build_id, "content_sha256": digest}, sort_keys=True) + "\n")
    os.replace(tmp, _sidecar(path))
    return build_id


def load_index(path: str | os.PathLike, mmap: bool = True) -> AnyIndex:
    """Open a sparse (``FSI1``) or dense (``FDI1``) index file.

    Without a sidecar the build id falls back to the content hash.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise IndexLoadError(f"cannot open index {path}: {exc}") from None
    if magic == b"FSI1":
        index: AnyIndex = Bm25Index.load(path)
    elif magic == b"FDI1":
        index = load_dense(path, mmap=mmap)
    else:
        raise IndexLoadError(f"{path}: not a flexkit index (magic {magic!r})")
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
        index.build_id = meta["build_id"]
    else:
        index.build_id = "sha256:" + _sha256(path)
    return index
