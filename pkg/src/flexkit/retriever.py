"""Multi-field, multi-index retrieval with score fusion and query caching.

A :class:`RetrieverConfig` names one or more indexes, each built over one
field of the corpus.  :class:`FlexRetriever` queries every index for
``retrieve_k`` candidates, fuses the candidate union into one ranking,
optionally reranks it lexically and returns the top ``k`` as
:class:`RetrievedContext` records.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence

import numpy as np

from .cache import QueryCache, cache_key
from .dense import FlatIndex, IvfPqIndex
from .encoder import Encoder, EncoderSpec
from .indexio import ensure_build_id, load_index
from .refine import RefineSpec
from .sparse import Bm25Index
from .store import open_store
from .text import tokenize

log = logging.getLogger(__name__)

IndexType = Literal["sparse", "flat", "ivfpq", "remote"]
_INDEX_TYPES = ("sparse", "flat", "ivfpq", "remote")
_FUSIONS = ("rrf", "weighted_sum")


class RetrieverError(Exception):
    pass


class BatchRetrievalError(RetrieverError):
    def __init__(self, query_index: int, query: str, cause: BaseException) -> None:
        super().__init__(f"query #{query_index} ({query!r}) failed: {cause}")
        self.query_index = query_index
        self.query = query
        self.cause = cause


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class IndexEntry:
    name: str
    field: str
    type: IndexType
    path: str | None = None  # index file, or endpoint URL for "remote"
    nprobe: int | None = None  # ivfpq only; None keeps the built default

    def __post_init__(self) -> None:
        if self.type not in _INDEX_TYPES:
            raise RetrieverError(f"index {self.name!r}: unknown type {self.type!r}")
        if self.nprobe is not None and self.type != "ivfpq":
            raise RetrieverError(f"index {self.name!r}: nprobe only applies to ivfpq")

    @property
    def is_dense(self) -> bool:
        return self.type in ("flat", "ivfpq")


@dataclass(frozen=True)
class RetrieverConfig:
    indexes: tuple[IndexEntry, ...]
    fusion: Literal["rrf", "weighted_sum"] = "rrf"
    weights: tuple[float, ...] | None = None
    rrf_c: int = 60
    retrieve_k: int = 100
    final_k: int = 10
    reranker: Literal["lexical"] | None = None
    store: str | None = None
    encoder: EncoderSpec | None = None
    refine: RefineSpec | None = None

    def __post_init__(self) -> None:
        indexes = tuple(self.indexes)
        object.__setattr__(self, "indexes", indexes)
        if not indexes:
            raise RetrieverError("config needs at least one index")
        names = [e.name for e in indexes]
        if len(set(names)) != len(names):
            raise RetrieverError(f"duplicate index names in {names}")
        if self.fusion not in _FUSIONS:
            raise RetrieverError(f"unknown fusion {self.fusion!r}")
        weights = (1.0,) * len(indexes) if self.weights is None else tuple(float(w) for w in self.weights)
        if len(weights) != len(indexes):
            raise RetrieverError(f"{len(weights)} weights for {len(indexes)} indexes")
        if any(not w > 0 for w in weights):
            raise RetrieverError("weights must be > 0")
        object.__setattr__(self, "weights", weights)
        if self.rrf_c < 1:
            raise RetrieverError("rrf_c must be >= 1")
        if not 1 <= self.final_k <= self.retrieve_k:
            raise RetrieverError(f"need 1 <= final_k <= retrieve_k, got {self.final_k} and {self.retrieve_k}")
        if self.reranker not in (None, "lexical"):
            raise RetrieverError(f"unknown reranker {self.reranker!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RetrieverConfig:
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise RetrieverError(f"unknown config keys: {sorted(unknown)}")
        try:
            d["indexes"] = tuple(IndexEntry(**e) for e in d.get("indexes", ()))
        except TypeError as exc:
            raise RetrieverError(f"bad index entry: {exc}") from None
        if d.get("weights") is not None:
            d["weights"] = tuple(d["weights"])
        if d.get("encoder") is not None:
            d["encoder"] = EncoderSpec.from_dict(d["encoder"])
        if d.get("refine") is not None:
            d["refine"] = RefineSpec.from_dict(d["refine"])
        return cls(**d)

    def to_dict(self) -> dict:
        out = {
            "indexes": [asdict(e) for e in self.indexes],
            "fusion": self.fusion,
            "weights": list(self.weights),
            "rrf_c": self.rrf_c,
            "retrieve_k": self.retrieve_k,
            "final_k": self.final_k,
            "reranker": self.reranker,
            "store": self.store,
            "encoder": self.encoder.to_dict() if self.encoder else None,
            "refine": self.refine.to_dict() if self.refine else None,
        }
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def identity(self) -> dict:
        """Config content that determines results: file locations are left out."""
        d = self.to_dict()
        d.pop("store")
        for entry in d["indexes"]:
            if entry["type"] != "remote":
                entry.pop("path")
        return d


def config_fingerprint(config: RetrieverConfig, build_ids: Mapping[str, str]) -> str:
    """128-bit hex digest of the config identity plus each index's build id."""
    payload = {"config": config.identity(), "builds": {e.name: build_ids[e.name] for e in config.indexes}}
    data = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.blake2b(data.encode("utf-8"), digest_size=16).hexdigest()


# ----------------------------------------------------------------- results


@dataclass(frozen=True)
class RetrievedContext:
    doc_id: int
    per_index_scores: dict[str, float]
    fused_score: float
    rank: int
    source: tuple[str, ...]
    text: str = ""

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "per_index_scores": dict(self.per_index_scores),
            "fused_score": self.fused_score,
            "rank": self.rank,
            "source": list(self.source),
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RetrievedContext:
        return cls(
            doc_id=int(d["doc_id"]),
            per_index_scores={k: float(v) for k, v in d["per_index_scores"].items()},
            fused_score=float(d["fused_score"]),
            rank=int(d["rank"]),
            source=tuple(d["source"]),
            text=d.get("text", ""),
        )


# ------------------------------------------------------------------ fusion


def _min_max(hits: Sequence[tuple[int, float]]) -> dict[int, float]:
    if not hits:
        return {}
    scores = [s for _, s in hits]
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return {d: 1.0 for d, _ in hits}
    return {d: (s - lo) / (hi - lo) for d, s in hits}


def fuse(
    results: Mapping[str, Sequence[tuple[int, float]]],
    order: Sequence[str],
    fusion: str = "rrf",
    weights: Sequence[float] | None = None,
    rrf_c: int = 60,
) -> list[tuple[int, float]]:
    """Fuse per-index ranked lists into one ``(doc_id, fused)`` ranking.

    ``weighted_sum`` min-max normalises each list on its own (a constant
    list maps to 1.0) and sums weighted values, a missing doc contributing
    0.  ``rrf`` sums ``1 / (rrf_c + rank)`` over the lists containing the
    doc.  Lists are accumulated in ``order`` so float sums are reproducible.
    Ties go to the smaller doc_id.
    """
    weights = [1.0] * len(order) if weights is None else list(weights)
    fused: dict[int, float] = {}
    for name, w in zip(order, weights):
        hits = results.get(name, ())
        if fusion == "weighted_sum":
            contrib = {d: w * v for d, v in _min_max(hits).items()}
        elif fusion == "rrf":
            contrib = {d: 1.0 / (rrf_c + rank) for rank, (d, _) in enumerate(hits, start=1)}
        else:
            raise RetrieverError(f"unknown fusion {fusion!r}")
        for d, v in contrib.items():
            fused[d] = fused.get(d, 0.0) + v
    return sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))


def overlap_f1(query_tokens: Sequence[str], doc_tokens: Sequence[str]) -> float:
    if not query_tokens or not doc_tokens:
        return 0.0
    common = sum((Counter(query_tokens) & Counter(doc_tokens)).values())
    if common == 0:
        return 0.0
    p = common / len(doc_tokens)
    r = common / len(query_tokens)
    return 2 * p * r / (p + r)


def rerank_lexical(query: str, contexts: Sequence[RetrievedContext], top_n: int) -> list[RetrievedContext]:
    """Stable re-sort by query/document token-overlap F1.

    The rerank score replaces ``fused_score`` so scores stay non-increasing
    in rank; per-index scores are kept.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    q = tokenize(query)
    scored = [(overlap_f1(q, tokenize(c.text)), c) for c in contexts]
    scored.sort(key=lambda sc: -sc[0])
    return [
        RetrievedContext(c.doc_id, c.per_index_scores, s, rank, c.source, c.text)
        for rank, (s, c) in enumerate(scored[:top_n], start=1)
    ]


# ------------------------------------------------------------ remote index


class RemoteSearchClient:
    """Generic JSON search endpoint: POST ``{"query", "k"}`` -> ``{"hits": [{"doc_id", "score"}]}``."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0, retries: int = 3, backoff_s: float = 0.5) -> None:
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.build_id = f"remote:{endpoint}"

    def search(self, query: str, k: int) -> list[tuple[int, float]]:
        body = json.dumps({"query": query, "k": k}).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
            req = urllib.request.Request(
                self.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                    payload = resp.read()
            except urllib.error.HTTPError as exc:
                if exc.code >= 500 or exc.code == 429:
                    last = exc
                    continue
                raise RetrieverError(f"search endpoint {self.endpoint} returned HTTP {exc.code}") from None
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last = exc
                continue
            try:
                hits = json.loads(payload)["hits"]
                return [(int(h["doc_id"]), float(h["score"])) for h in hits][:k]
            except (ValueError, KeyError, TypeError) as exc:
                raise RetrieverError(f"malformed response from {self.endpoint}: {exc}") from None
        raise RetrieverError(f"search endpoint {self.endpoint} unreachable after {self.retries} attempts: {last}")


# --------------------------------------------------------------- retriever


class FlexRetriever:
    """Loaded indexes plus the config that fuses them.

    ``probe_count`` counts index queries and is what the cache tests use to
    confirm a hit touched no index.
    """

    def __init__(
        self,
        config: RetrieverConfig,
        indexes: Mapping[str, Any],
        store=None,
        encoder: Encoder | None = None,
    ) -> None:
        self.config = config
        self.indexes = dict(indexes)
        self.store = store
        if encoder is None and config.encoder is not None:
            encoder = Encoder(config.encoder)
        self.encoder = encoder
        for entry in config.indexes:
            if entry.name not in self.indexes:
                raise RetrieverError(f"unknown index_ref {entry.name!r}")
            index = self.indexes[entry.name]
            if entry.is_dense:
                if encoder is None:
                    raise RetrieverError(f"dense index {entry.name!r} needs an encoder")
                if index.dimension != encoder.dimension:
                    raise RetrieverError(
                        f"index {entry.name!r} has dimension {index.dimension}, encoder produces {encoder.dimension}"
                    )
        build_ids = {e.name: ensure_build_id(self.indexes[e.name]) for e in config.indexes}
        self.fingerprint = config_fingerprint(config, build_ids)
        self.probe_count = 0
        self.max_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: RetrieverConfig, base_dir: str | Path | None = None) -> FlexRetriever:
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        indexes: dict[str, Any] = {}
        for entry in config.indexes:
            if entry.path is None:
                raise RetrieverError(f"index {entry.name!r} has no path")
            if entry.type == "remote":
                indexes[entry.name] = RemoteSearchClient(entry.path)
                continue
            index = load_index(base / entry.path)
            want = {"sparse": Bm25Index, "flat": FlatIndex, "ivfpq": IvfPqIndex}[entry.type]
            if not isinstance(index, want):
                raise RetrieverError(f"index {entry.name!r}: {entry.path} is not a {entry.type} index")
            indexes[entry.name] = index
        store = open_store(base / config.store) if config.store else None
        return cls(config, indexes, store=store)

    def close(self) -> None:
        if self.store is not None and hasattr(self.store, "close"):
            self.store.close()

    # -- querying ---------------------------------------------------------

    def _search_index(self, entry: IndexEntry, query: str, qvec: np.ndarray | None) -> list[tuple[int, float]]:
        with self._lock:
            self.probe_count += 1
        index = self.indexes[entry.name]
        k = self.config.retrieve_k
        if entry.type == "ivfpq":
            return index.search(qvec, k, nprobe=entry.nprobe)
        if entry.is_dense:
            return index.search(qvec, k)
        return index.search(query, k)

    def _text(self, doc_id: int) -> str:
        if self.store is None:
            return ""
        return self.store[doc_id].text

    def retrieve(self, query: str, k: int | None = None) -> list[RetrievedContext]:
        k = self.config.final_k if k is None else k
        if not 1 <= k <= self.config.retrieve_k:
            raise RetrieverError(f"k must be in [1, retrieve_k={self.config.retrieve_k}], got {k}")
        with self._lock:
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        try:
            return self._retrieve(query, k)
        finally:
            with self._lock:
                self._in_flight -= 1

    def _retrieve(self, query: str, k: int) -> list[RetrievedContext]:
        cfg = self.config
        qvec = None
        if any(e.is_dense for e in cfg.indexes):
            qvec = self.encoder.encode(query)
        results = {e.name: self._search_index(e, query, qvec) for e in cfg.indexes}
        order = [e.name for e in cfg.indexes]
        fused = fuse(results, order, cfg.fusion, cfg.weights, cfg.rrf_c)
        keep = cfg.retrieve_k if cfg.reranker else k
        per_index = {name: dict(hits) for name, hits in results.items()}
        contexts = []
        for rank, (doc, score) in enumerate(fused[:keep], start=1):
            scores = {n: per_index[n][doc] for n in order if doc in per_index[n]}
            contexts.append(RetrievedContext(doc, scores, score, rank, tuple(scores), self._text(doc)))
        if cfg.reranker == "lexical":
            contexts = rerank_lexical(query, contexts, k)
        return contexts

    def cached_retrieve(self, cache: QueryCache, query: str, k: int | None = None) -> tuple[list[RetrievedContext], bool]:
        k = self.config.final_k if k is None else k
        key = cache_key(self.fingerprint, query, k)
        hit, value = cache.get(key)
        if hit:
            return [RetrievedContext.from_dict(d) for d in value], True
        out = self.retrieve(query, k)
        cache.put(key, [c.to_dict() for c in out])
        return out, False

    def retrieve_batch(
        self, queries: Sequence[str], k: int | None = None, concurrency: int = 1
    ) -> list[list[RetrievedContext]]:
        """Results in query order, identical to calling :meth:`retrieve` per query.

        At most ``concurrency`` queries run at once.  The error of the
        lowest-numbered failing query is raised as :class:`BatchRetrievalError`.
        """
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")

        def one(item: tuple[int, str]) -> list[RetrievedContext]:
            i, q = item
            try:
                return self.retrieve(q, k)
            except Exception as exc:
                raise BatchRetrievalError(i, q, exc) from exc

        items = list(enumerate(queries))
        if concurrency == 1 or len(items) <= 1:
            return [one(it) for it in items]
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            return list(pool.map(one, items))

    async def aretrieve(self, query: str, k: int | None = None) -> list[RetrievedContext]:
        return await asyncio.to_thread(self.retrieve, query, k)

    async def aretrieve_batch(
        self, queries: Sequence[str], k: int | None = None, concurrency: int = 1
    ) -> list[list[RetrievedContext]]:
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        sem = asyncio.Semaphore(concurrency)

        async def one(i: int, q: str):
            async with sem:
                try:
                    return await self.aretrieve(q, k)
                except Exception as exc:
                    raise BatchRetrievalError(i, q, exc) from exc

        results = await asyncio.gather(*(one(i, q) for i, q in enumerate(queries)), return_exceptions=True)
        for r in results:
            if isinstance(r, BaseException):
                raise r
        return list(results)


# Function forms of the retriever operations.


def retrieve(retriever: FlexRetriever, query: str, k: int | None = None) -> list[RetrievedContext]:
    return retriever.retrieve(query, k)


def cached_retrieve(cache: QueryCache, retriever: FlexRetriever, query: str, k: int | None = None):
    return retriever.cached_retrieve(cache, query, k)


def retrieve_batch(retriever: FlexRetriever, queries: Sequence[str], k: int | None = None, concurrency: int = 1):
    return retriever.retrieve_batch(queries, k, concurrency)
