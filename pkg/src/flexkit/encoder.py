"""Dense text encoders.

``hashed_projection`` is a deterministic, model-free encoder: unigram and
bigram features are hashed into ``2*D`` signed buckets weighted by
``log(1 + tf)``, then projected to ``D`` dimensions through a seed-derived
+/-1 matrix and L2-normalised.  Texts sharing words land close together,
which is enough locality to exercise the dense index stack.

``remote`` posts batches to an embedding HTTP API of the common
``{"model", "input"} -> {"data": [{"embedding"}]}`` shape.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from .text import tokenize

log = logging.getLogger(__name__)


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    kind: Literal["hashed_projection", "remote"] = "hashed_projection"
    dimension: int = 256
    seed: int = 0
    endpoint: str | None = None
    model: str | None = None
    auth_env: str | None = None
    path: str = "/v1/embeddings"
    max_batch: int = 64
    max_connections: int = 4
    timeout_s: float = 30.0
    retries: int = 3
    backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("hashed_projection", "remote"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.dimension <= 0:
            raise ValueError(f"dimension must be positive, got {self.dimension}")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote encoder needs an endpoint")

    @classmethod
    def from_dict(cls, d: dict) -> EncoderSpec:
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Embedding:
    vector: np.ndarray
    norm_flag: bool


def _feature_hash(feature: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


@lru_cache(maxsize=8)
def _projection(seed: int, dim: int) -> np.ndarray:
    """The (2*dim, dim) +/-1 projection for ``seed``, rebuilt on demand from the seed."""
    rng = np.random.Generator(np.random.PCG64([seed, dim]))
    signs = rng.integers(0, 2, size=(2 * dim, dim), dtype=np.int8)
    m = (signs * 2 - 1).astype(np.float64)
    m.setflags(write=False)
    return m


def _hashed_features(text: str, seed: int, dim: int) -> dict[int, float]:
    tokens = tokenize(text)
    feats = Counter(tokens)
    feats.update(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
    buckets: dict[int, float] = {}
    for feat, tf in sorted(feats.items()):
        h = _feature_hash(feat, seed)
        bucket = h % (2 * dim)
        sign = 1.0 if (h >> 63) & 1 else -1.0
        buckets[bucket] = buckets.get(bucket, 0.0) + sign * math.log1p(tf)
    return buckets


def encode_hashed(text: str, spec: EncoderSpec) -> Embedding:
    if spec.dimension <= 0:
        raise ValueError("dimension must be positive")
    dim = spec.dimension
    buckets = _hashed_features(text, spec.seed, dim)
    if buckets:
        idx = np.fromiter(sorted(buckets), dtype=np.int64, count=len(buckets))
        weights = np.array([buckets[i] for i in idx.tolist()], dtype=np.float64)
        vec = weights @ _projection(spec.seed, dim)[idx]
    else:
        vec = np.zeros(dim, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return Embedding(vec.astype(np.float32), False)
    return Embedding((vec / norm).astype(np.float32), True)


# ------------------------------------------------------------------ remote


def _post_json(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, bytes]:
    req = urllib.request.Request(
        url,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json", **headers},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()


def _remote_batch(texts: list[str], spec: EncoderSpec) -> list[np.ndarray]:
    url = spec.endpoint.rstrip("/") + spec.path
    headers = {}
    if spec.auth_env:
        key = os.environ.get(spec.auth_env)
        if not key:
            raise EncoderError(f"environment variable {spec.auth_env} is not set")
        headers["Authorization"] = f"Bearer {key}"
    payload = {"model": spec.model, "input": texts}

    last_error: Exception | None = None
    for attempt in range(spec.retries):
        if attempt:
            time.sleep(spec.backoff_s * 2 ** (attempt - 1))
        try:
            status, body = _post_json(url, payload, headers, spec.timeout_s)
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            last_error = exc
            log.warning("embedding request to %s failed (attempt %d): %s", url, attempt + 1, exc)
            continue
        if status == 413 and len(texts) > 1:
            mid = len(texts) // 2
            return _remote_batch(texts[:mid], spec) + _remote_batch(texts[mid:], spec)
        if status >= 500 or status == 429:
            last_error = EncoderError(f"HTTP {status}: {body[:500].decode('utf-8', 'replace')}")
            continue
        if not 200 <= status < 300:
            raise EncoderError(f"HTTP {status} from {url}: {body[:500].decode('utf-8', 'replace')}")
        try:
            data = json.loads(body)["data"]
            vectors = [np.asarray(item["embedding"], dtype=np.float32) for item in data]
        except (ValueError, KeyError, TypeError) as exc:
            raise EncoderError(f"malformed embedding response from {url}: {exc}") from None
        if len(vectors) != len(texts):
            raise EncoderError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        for v in vectors:
            if v.shape != (spec.dimension,):
                raise EncoderError(f"dimension mismatch: expected {spec.dimension}, got {v.shape[0]}")
        return vectors
    raise EncoderError(f"embedding request to {url} failed after {spec.retries} attempts: {last_error}")


def encode_remote(texts: list[str], spec: EncoderSpec) -> list[Embedding]:
    if not texts:
        return []
    batches = [texts[i : i + spec.max_batch] for i in range(0, len(texts), spec.max_batch)]
    with ThreadPoolExecutor(max_workers=max(1, spec.max_connections)) as pool:
        results = list(pool.map(lambda b: _remote_batch(b, spec), batches))
    out = []
    for vectors in results:
        for v in vectors:
            n = float(np.linalg.norm(v))
            out.append(Embedding(v, abs(n - 1.0) <= 1e-5))
    return out


# ------------------------------------------------------------------ facade


class Encoder:
    """Callable wrapper used by the retriever and the CLI."""

    def __init__(self, spec: EncoderSpec) -> None:
        self.spec = spec

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    def encode(self, text: str) -> np.ndarray:
        return self.encode_batch([text])[0]

    def encode_batch(self, texts: list[str], workers: int = 1) -> np.ndarray:
        """Return an ``(n, D)`` float32 matrix.

        ``workers > 1`` spreads hashed encoding over processes; remote
        encoding is already concurrent per batch.
        """
        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float32)
        if self.spec.kind == "remote":
            return np.stack([e.vector for e in encode_remote(list(texts), self.spec)])
        if workers > 1 and len(texts) > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_encode_one, texts, [self.spec] * len(texts), chunksize=16))
        else:
            rows = [encode_hashed(t, self.spec).vector for t in texts]
        return np.stack(rows)


def _encode_one(text: str, spec: EncoderSpec) -> np.ndarray:
    return encode_hashed(text, spec).vector
