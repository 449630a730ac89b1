"""BM25 inverted index over a single document field.

Scoring::

    idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
    score(q, d) = sum over distinct t in q of
                  idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))

Results are ordered by score descending, then doc_id ascending.
"""

from __future__ import annotations

import math
import os
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .text import analyze

MAGIC = b"FSI1"
VERSION = 1

_FLAG_STOPWORDS = 1
_FLAG_STEM = 2

# magic, version, flags, N, avgdl, k1, b, vocab size
_HEADER = struct.Struct("<4sIIQdddI")


class SparseIndexError(Exception):
    pass


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.5
    b: float = 0.75
    stopwords: bool = False
    stem: bool = False

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not 0 <= self.b <= 1:
            raise ValueError(f"b must be in [0, 1], got {self.b}")


class Bm25Index:
    """In-memory BM25 index; postings are parallel ``uint32`` arrays."""

    kind = "bm25"

    def __init__(
        self,
        params: Bm25Params,
        field: str,
        vocab: list[str],
        postings: list[tuple[np.ndarray, np.ndarray]],
        doc_lens: np.ndarray,
    ) -> None:
        self.params = params
        self.field = field
        self.vocab = vocab
        self.term_ids = {t: i for i, t in enumerate(vocab)}
        self.postings = postings
        self.doc_lens = np.asarray(doc_lens, dtype=np.uint32)
        self.N = len(self.doc_lens)
        self.avgdl = float(self.doc_lens.sum()) / self.N if self.N else 0.0
        self.build_id: str | None = None

    # -- construction -------------------------------------------------------

    @classmethod
    def from_texts(cls, texts, params: Bm25Params | None = None, field: str = "text") -> Bm25Index:
        params = params or Bm25Params()
        term_postings: dict[str, list[tuple[int, int]]] = {}
        doc_lens = []
        for doc_id, text in enumerate(texts):
            tokens = analyze(text or "", stopwords=params.stopwords, stem=params.stem)
            doc_lens.append(len(tokens))
            for term, tf in Counter(tokens).items():
                term_postings.setdefault(term, []).append((doc_id, tf))
        vocab = sorted(term_postings)
        postings = []
        for term in vocab:
            pairs = term_postings[term]
            postings.append(
                (
                    np.fromiter((d for d, _ in pairs), dtype=np.uint32, count=len(pairs)),
                    np.fromiter((tf for _, tf in pairs), dtype=np.uint32, count=len(pairs)),
                )
            )
        return cls(params, field, vocab, postings, np.asarray(doc_lens, dtype=np.uint32))

    # -- statistics ---------------------------------------------------------

    def df(self, term: str) -> int:
        tid = self.term_ids.get(term)
        return 0 if tid is None else len(self.postings[tid][0])

    def tf(self, term: str, doc_id: int) -> int:
        tid = self.term_ids.get(term)
        if tid is None:
            return 0
        ids, tfs = self.postings[tid]
        pos = np.searchsorted(ids, doc_id)
        return int(tfs[pos]) if pos < len(ids) and ids[pos] == doc_id else 0

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def query_terms(self, query: str) -> list[str]:
        """Analyzed query tokens, deduplicated in first-occurrence order."""
        return list(dict.fromkeys(analyze(query, stopwords=self.params.stopwords, stem=self.params.stem)))

    # -- search -------------------------------------------------------------

    def search(self, query: str, k: int = 10) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if self.N == 0:
            return []
        k1, b = self.params.k1, self.params.b
        scores = np.zeros(self.N, dtype=np.float64)
        touched = np.zeros(self.N, dtype=bool)
        # per-doc length normalisation, computed with the same operation order
        # as the scalar formula so scores match a naive scorer bit for bit
        norm = k1 * (1.0 - b + b * self.doc_lens.astype(np.float64) / self.avgdl) if self.avgdl else None
        for term in self.query_terms(query):
            tid = self.term_ids.get(term)
            if tid is None:
                continue
            ids, tfs = self.postings[tid]
            df = len(ids)
            idf = math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))
            tf = tfs.astype(np.float64)
            scores[ids] += idf * (tf * (k1 + 1.0)) / (tf + norm[ids])
            touched[ids] = True
        cand = np.flatnonzero(touched)
        if cand.size == 0:
            return []
        cand_scores = scores[cand]
        order = np.lexsort((cand, -cand_scores))[:k]
        return [(int(cand[i]), float(cand_scores[i])) for i in order]

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        p = self.params
        flags = (_FLAG_STOPWORDS if p.stopwords else 0) | (_FLAG_STEM if p.stem else 0)
        parts = [_HEADER.pack(MAGIC, VERSION, flags, self.N, self.avgdl, p.k1, p.b, len(self.vocab))]
        raw_field = self.field.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_field)) + raw_field)
        for term in self.vocab:
            raw = term.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
        for ids, tfs in self.postings:
            parts.append(struct.pack("<I", len(ids)))
            parts.append(ids.astype("<u4").tobytes())
            parts.append(tfs.astype("<u4").tobytes())
        parts.append(self.doc_lens.astype("<u4").tobytes())
        return b"".join(parts)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> Bm25Index:
        try:
            magic, version, flags, n, _avgdl, k1, b, n_terms = _HEADER.unpack_from(data, 0)
        except struct.error:
            raise SparseIndexError("truncated sparse index header") from None
        if magic != MAGIC:
            raise SparseIndexError(f"bad magic {magic!r}")
        if version != VERSION:
            raise SparseIndexError(f"unsupported version {version}")
        pos = _HEADER.size

        def string() -> str:
            nonlocal pos
            (length,) = struct.unpack_from("<H", data, pos)
            pos += 2
            s = data[pos : pos + length].decode("utf-8")
            pos += length
            return s

        field = string()
        vocab = [string() for _ in range(n_terms)]
        postings = []
        for _ in range(n_terms):
            (df,) = struct.unpack_from("<I", data, pos)
            pos += 4
            ids = np.frombuffer(data, dtype="<u4", count=df, offset=pos).astype(np.uint32)
            pos += 4 * df
            tfs = np.frombuffer(data, dtype="<u4", count=df, offset=pos).astype(np.uint32)
            pos += 4 * df
            postings.append((ids, tfs))
        doc_lens = np.frombuffer(data, dtype="<u4", count=n, offset=pos).astype(np.uint32)
        if pos + 4 * n != len(data):
            raise SparseIndexError("trailing or missing bytes in sparse index")
        params = Bm25Params(k1=k1, b=b, stopwords=bool(flags & _FLAG_STOPWORDS), stem=bool(flags & _FLAG_STEM))
        return cls(params, field, vocab, postings, doc_lens)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Bm25Index:
        return cls.from_bytes(Path(path).read_bytes())


def build_sparse(store, field: str, params: Bm25Params | None = None) -> Bm25Index:
    """Index ``field`` of every document in an open store."""
    if field not in store.schema:
        raise SparseIndexError(f"unknown field {field!r}; store schema is {list(store.schema)}")
    return Bm25Index.from_texts((doc.fields.get(field, "") for doc in store), params, field=field)


def search_sparse(index: Bm25Index, query_text: str, k: int) -> list[tuple[int, float]]:
    return index.search(query_text, k)
