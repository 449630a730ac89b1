"""Append-once, memory-mapped document store.

File layout (all integers little-endian)::

    "FCS1" | version u32 | record_count u64 | offset_table_pos u64
    schema: u16 count, then per name u16 len + UTF-8 bytes
    records: per record u32 len + canonical JSON payload
    offset table: record_count x u64 (absolute position of each length prefix)
    crc32 of the offset table: u32

The header's ``record_count`` and ``offset_table_pos`` are patched when the
writer is closed, so ingestion is a single sequential pass.  Readers map the
file and touch only the bytes of the record they are asked for.
"""

from __future__ import annotations

import json
import mmap
import os
import struct
import zlib
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FCS1"
VERSION = 1

_HEADER = struct.Struct("<4sIQQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class StoreError(Exception):
    """Raised for malformed store files and contract violations."""


@dataclass
class Document:
    doc_id: int
    fields: dict[str, str]
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def text(self) -> str:
        """All non-empty fields joined by newlines, in field order."""
        return "\n".join(v for v in self.fields.values() if v)


def serialize(doc: Document) -> bytes:
    """Canonical JSON bytes: sorted keys, UTF-8, no insignificant whitespace."""
    payload = {"doc_id": doc.doc_id, "fields": doc.fields, "metadata": doc.metadata}
    return json.dumps(
        payload, sort_keys=True, ensure_ascii=False, separators=(",", ":")
    ).encode("utf-8")


def deserialize(data: bytes | memoryview, schema: Sequence[str] | None = None) -> Document:
    obj = json.loads(bytes(data))
    fields = obj["fields"]
    if schema is not None:
        # restore schema order; canonical JSON stores keys sorted
        fields = {name: fields[name] for name in schema if name in fields}
    return Document(doc_id=obj["doc_id"], fields=fields, metadata=obj.get("metadata", {}))


def _pack_schema(schema: Sequence[str]) -> bytes:
    parts = [_U16.pack(len(schema))]
    for name in schema:
        raw = name.encode("utf-8")
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
    return b"".join(parts)


class StoreWriter:
    """Sequential writer; use :func:`create_store` to obtain one."""

    def __init__(self, path: Path, schema: Sequence[str], fh) -> None:
        self.path = path
        self.schema = tuple(schema)
        self._fh = fh
        self._offsets: list[int] = []
        self._closed = False
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, 0))
        fh.write(_pack_schema(self.schema))
        self._pos = fh.tell()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        return len(self._offsets)

    def append(
        self,
        fields: Mapping[str, str] | Document,
        metadata: Mapping[str, str] | None = None,
    ) -> int:
        """Append one document and return its sequential ``doc_id``.

        ``fields`` may also be a :class:`Document`, in which case its own
        metadata is used and its ``doc_id`` is ignored.
        """
        if self._closed:
            raise StoreError("writer is closed")
        if isinstance(fields, Document):
            metadata = fields.metadata if metadata is None else metadata
            fields = fields.fields
        unknown = [name for name in fields if name not in self.schema]
        if unknown:
            raise StoreError(f"unknown field(s) {unknown}; schema is {list(self.schema)}")
        for name, value in fields.items():
            if not isinstance(value, str):
                raise StoreError(f"field {name!r} must be a string")
        if not any(fields.values()):
            raise StoreError("document needs at least one non-empty field")
        meta = {str(k): str(v) for k, v in (metadata or {}).items()}

        doc_id = len(self._offsets)
        ordered = {name: fields[name] for name in self.schema if name in fields}
        payload = serialize(Document(doc_id, ordered, meta))
        self._fh.write(_U32.pack(len(payload)))
        self._fh.write(payload)
        self._offsets.append(self._pos)
        self._pos += 4 + len(payload)
        return doc_id

    def extend(self, docs: Iterable[Mapping[str, str] | Document]) -> list[int]:
        return [self.append(d) for d in docs]

    def close(self) -> None:
        if self._closed:
            return
        table = np.asarray(self._offsets, dtype="<u8").tobytes()
        table_pos = self._pos
        self._fh.write(table)
        self._fh.write(_U32.pack(zlib.crc32(table)))
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, VERSION, len(self._offsets), table_pos))
        self._fh.close()
        self._closed = True

    def __enter__(self) -> StoreWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def create_store(path: str | os.PathLike, schema: Sequence[str], *, overwrite: bool = False) -> StoreWriter:
    """Create an empty store at ``path`` with the given field schema."""
    schema = list(schema)
    if not schema:
        raise StoreError("schema must name at least one field")
    if len(set(schema)) != len(schema):
        raise StoreError(f"duplicate field names in schema {schema}")
    if any(not name for name in schema):
        raise StoreError("field names must be non-empty")
    path = Path(path)
    if path.exists() and not overwrite:
        raise StoreError(f"{path} exists; pass overwrite=True to replace it")
    fh = open(path, "wb")
    return StoreWriter(path, schema, fh)


class StoreReader:
    """Random access over a closed store file via ``mmap``.

    ``bytes_read`` counts every byte the reader has touched in the mapping,
    which lets tests assert that :meth:`get` stays local.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self.bytes_read = 0
        self._fh = open(self.path, "rb")
        size = os.fstat(self._fh.fileno()).st_size
        if size < _HEADER.size:
            self._fh.close()
            raise StoreError(f"{self.path}: file too small for a store header")
        self._mm = mmap.mmap(self._fh.fileno(), 0, access=mmap.ACCESS_READ)
        self._size = size
        try:
            self._parse_header()
        except Exception:
            self.close()
            raise

    def _read(self, pos: int, n: int) -> bytes:
        if pos < 0 or pos + n > self._size:
            raise StoreError(f"{self.path}: read of {n} bytes at {pos} runs past end of file")
        self.bytes_read += n
        return self._mm[pos : pos + n]

    def _parse_header(self) -> None:
        magic, version, count, table_pos = _HEADER.unpack(self._read(0, _HEADER.size))
        if magic != MAGIC:
            raise StoreError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise StoreError(f"{self.path}: unsupported version {version}")
        pos = _HEADER.size
        (n_fields,) = _U16.unpack(self._read(pos, 2))
        pos += 2
        schema = []
        for _ in range(n_fields):
            (n,) = _U16.unpack(self._read(pos, 2))
            pos += 2
            schema.append(self._read(pos, n).decode("utf-8"))
            pos += n
        self.schema: tuple[str, ...] = tuple(schema)
        self._data_start = pos

        if table_pos < pos or table_pos + 8 * count + 4 != self._size:
            raise StoreError(f"{self.path}: offset table position/size inconsistent (unclosed writer?)")
        table = self._read(table_pos, 8 * count)
        (crc,) = _U32.unpack(self._read(table_pos + 8 * count, 4))
        if zlib.crc32(table) != crc:
            raise StoreError(f"{self.path}: offset table checksum mismatch")
        self._count = count
        self._table_pos = table_pos

    def __len__(self) -> int:
        return self._count

    def offset(self, doc_id: int) -> int:
        if not 0 <= doc_id < self._count:
            raise IndexError(f"doc_id {doc_id} out of range for store of {self._count} records")
        (off,) = _U64.unpack(self._read(self._table_pos + 8 * doc_id, 8))
        return off

    def get_bytes(self, doc_id: int) -> bytes:
        """Raw canonical payload of one record."""
        off = self.offset(doc_id)
        (n,) = _U32.unpack(self._read(off, 4))
        if off + 4 + n > self._table_pos:
            raise StoreError(f"{self.path}: record {doc_id} truncated (length {n} exceeds data region)")
        return self._read(off + 4, n)

    def get(self, doc_id: int) -> Document:
        return deserialize(self.get_bytes(doc_id), self.schema)

    def __getitem__(self, doc_id: int) -> Document:
        return self.get(doc_id)

    def __iter__(self) -> Iterator[Document]:
        for i in range(self._count):
            yield self.get(i)

    def offsets(self) -> np.ndarray:
        return np.frombuffer(self._read(self._table_pos, 8 * self._count), dtype="<u8").astype(np.uint64)

    def close(self) -> None:
        mm = getattr(self, "_mm", None)
        if mm is not None:
            mm.close()
            self._mm = None
        self._fh.close()

    def __enter__(self) -> StoreReader:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_store(path: str | os.PathLike) -> StoreReader:
    return StoreReader(path)


def ingest_jsonl(
    jsonl_path: str | os.PathLike,
    store_path: str | os.PathLike,
    schema: Sequence[str],
    *,
    overwrite: bool = False,
) -> int:
    """Build a store from line-delimited JSON; returns the record count.

    Each line holds the schema fields as keys plus an optional ``metadata``
    object.  Keys outside the schema are rejected.
    """
    with create_store(store_path, schema, overwrite=overwrite) as writer, open(
        jsonl_path, encoding="utf-8"
    ) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            metadata = obj.pop("metadata", None) or {}
            try:
                writer.append(obj, metadata)
            except StoreError as exc:
                raise StoreError(f"{jsonl_path}:{lineno}: {exc}") from None
        return len(writer)
