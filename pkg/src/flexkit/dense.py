"""Dense vector indexes: exact FLAT scan and IVF-PQ.

IVF-PQ partitions vectors with a coarse k-means quantizer, encodes each
vector's residual (vector minus its coarse centroid) with a product
quantizer, and answers queries by asymmetric distance computation (ADC):
per-subspace lookup tables of query/codeword partial scores summed over the
codes of every vector in the probed lists.

Both index kinds persist to one ``FDI1`` file whose array regions start on
4096-byte boundaries so they can be used in place through ``np.memmap``.
"""

from __future__ import annotations

import math
import os
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

Metric = Literal["inner_product", "l2"]

MAGIC = b"FDI1"
VERSION = 1
ALIGN = 4096
KIND_FLAT, KIND_IVFPQ = 0, 1
_METRICS = ("inner_product", "l2")

# magic version kind metric D N | nlist nprobe m nbits seed trained_on |
# centroids codebooks directory ids codes vectors (region offsets)
_HEADER = struct.Struct("<4sIIIIQ IIIIQQ QQQQQQ".replace(" ", ""))

_ASSIGN_CHUNK = 8192


class DenseIndexError(Exception):
    pass


# ----------------------------------------------------------------- sizing


@dataclass(frozen=True)
class IvfPqParams:
    nlist: int
    nprobe: int
    m: int
    nbits: int = 8
    metric: Metric = "inner_product"

    def validate(self, dimension: int, n_vectors: int | None = None) -> None:
        if self.nlist < 1:
            raise DenseIndexError(f"nlist must be >= 1, got {self.nlist}")
        if not 1 <= self.nprobe <= self.nlist:
            raise DenseIndexError(f"nprobe must be in [1, nlist={self.nlist}], got {self.nprobe}")
        if self.m < 1 or dimension % self.m:
            raise DenseIndexError(f"dimension {dimension} is not divisible by m={self.m}")
        if self.nbits not in (4, 8):
            raise DenseIndexError(f"nbits must be 4 or 8, got {self.nbits}")
        if self.metric not in _METRICS:
            raise DenseIndexError(f"unknown metric {self.metric!r}")
        if n_vectors is not None and n_vectors < self.nlist:
            raise DenseIndexError(f"need at least nlist={self.nlist} vectors, got {n_vectors}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def size_ivfpq(n_vectors: int, dimension: int, metric: Metric = "inner_product") -> IvfPqParams:
    """Parameter heuristic for IVF-PQ.

    ``nlist = clamp(round(4*sqrt(n)), 1, max(1, n // 39))`` keeps at least 39
    training points per coarse centroid; ``nprobe = clamp(round(nlist/8), 1,
    nlist)``; ``m`` is the largest divisor of ``dimension`` that is at most 64
    and leaves sub-vectors of at least 4 dimensions.
    """
    if n_vectors < 1:
        raise ValueError("n_vectors must be >= 1")
    nlist = min(max(_round_half_up(4 * math.sqrt(n_vectors)), 1), max(1, n_vectors // 39))
    nprobe = min(max(_round_half_up(nlist / 8), 1), nlist)
    divisors = [m for m in range(1, min(64, dimension) + 1) if dimension % m == 0 and dimension // m >= 4]
    m = max(divisors) if divisors else 1
    return IvfPqParams(nlist=nlist, nprobe=nprobe, m=m, nbits=8, metric=metric)


# ----------------------------------------------------------------- k-means


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (squared L2) for every row of ``x``."""
    # ||x||^2 is constant per row, so argmin only needs ||c||^2 - 2 x.c
    c_sq = (centroids * centroids).sum(1)
    ct = np.ascontiguousarray(centroids.T)
    out = np.empty(len(x), dtype=np.int64)
    for lo in range(0, len(x), _ASSIGN_CHUNK):
        d = x[lo : lo + _ASSIGN_CHUNK] @ ct
        d *= -2.0
        d += c_sq
        out[lo : lo + _ASSIGN_CHUNK] = d.argmin(1)
    return out


def _objective(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    diff = x.astype(np.float64) - centroids[assign].astype(np.float64)
    return float((diff * diff).sum())


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    x_sq = np.einsum("ij,ij->i", x, x).astype(np.float64)

    def sq_dist_to(i: int) -> np.ndarray:
        d = x_sq - 2.0 * (x @ x[i]).astype(np.float64) + x_sq[i]
        return np.maximum(d, 0.0, out=d)

    chosen = [int(rng.integers(n))]
    d2 = sq_dist_to(chosen[0])
    for _ in range(1, k):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total <= 0.0:
            # all remaining mass is zero (duplicates): pick an unused point
            mask = np.ones(n, dtype=bool)
            mask[chosen] = False
            idx = int(rng.choice(np.flatnonzero(mask)))
        else:
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        np.minimum(d2, sq_dist_to(idx), out=d2)
    return x[chosen].copy()


def kmeans(
    vectors: np.ndarray,
    k: int,
    max_iter: int = 25,
    seed: int = 0,
    tol: float = 1e-4,
    return_history: bool = False,
):
    """Lloyd's k-means with k-means++ seeding.

    Returns ``centroids`` (float32, shape ``(k, d)``), or ``(centroids,
    objective_history)`` when ``return_history`` is set.  The history holds
    the sum of squared distances after each assignment step and never
    increases.  An empty cluster is re-seeded with the point of the largest
    cluster that lies farthest from that cluster's centroid.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history: list[float] = []
    for _ in range(max_iter):
        assign = _assign(x, centroids)
        obj = _objective(x, centroids, assign)
        history.append(obj)
        if obj == 0.0 or (len(history) > 1 and history[-2] - obj < tol * history[-2]):
            break
        centroids = _update(x, assign, k, centroids)
    return (centroids, history) if return_history else centroids


def _update(x: np.ndarray, assign: np.ndarray, k: int, old: np.ndarray) -> np.ndarray:
    counts = np.bincount(assign, minlength=k)
    sums = np.empty((k, x.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        sums[:, j] = np.bincount(assign, weights=x[:, j], minlength=k)
    new = old.astype(np.float64).copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    new = new.astype(np.float32)
    taken: set[int] = set()
    for empty in np.flatnonzero(~nonempty):
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        members = members[[i not in taken for i in members.tolist()]]
        if len(members) <= 1:
            continue
        far = members[int(((x[members] - new[big]) ** 2).sum(1).argmax())]
        taken.add(int(far))
        new[empty] = x[far]
        counts[big] -= 1
    return new


# ------------------------------------------------------------------- FLAT


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    if len(ids) == 0:
        return []
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def _as_query(query, dimension: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != dimension:
        raise DenseIndexError(f"query dimension {q.shape[0]} does not match index dimension {dimension}")
    return q


class FlatIndex:
    kind = "flat"

    def __init__(self, vectors: np.ndarray, metric: Metric = "inner_product") -> None:
        if metric not in _METRICS:
            raise DenseIndexError(f"unknown metric {metric!r}")
        vectors = np.asanyarray(vectors)
        if vectors.ndim != 2:
            raise DenseIndexError("vectors must be a 2-D array")
        self.vectors = vectors if vectors.dtype == np.float32 else vectors.astype(np.float32)
        self.metric = metric
        self.build_id: str | None = None

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vectors)

    def scores(self, query) -> np.ndarray:
        q = _as_query(query, self.dimension)
        v = self.vectors.astype(np.float64)
        if self.metric == "inner_product":
            return v @ q
        diff = v - q
        return -(diff * diff).sum(1)

    def search(self, query, k: int = 10) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        s = self.scores(query)
        return _top_k(np.arange(len(s)), s, k)

    def save(self, path: str | os.PathLike) -> None:
        _write_file(path, self._header_fields(), {"vectors": self.vectors})

    def _header_fields(self) -> dict:
        return dict(kind=KIND_FLAT, metric=self.metric, dimension=self.dimension, n=len(self))


def build_flat(vectors, metric: Metric = "inner_product") -> FlatIndex:
    return FlatIndex(vectors, metric)


def search_flat(index: FlatIndex, query, k: int) -> list[tuple[int, float]]:
    return index.search(query, k)


# ------------------------------------------------------------------ IVF-PQ


def _pack4(codes: np.ndarray) -> np.ndarray:
    n, m = codes.shape
    if m % 2:
        codes = np.concatenate([codes, np.zeros((n, 1), dtype=np.uint8)], axis=1)
    return (codes[:, 0::2] | (codes[:, 1::2] << 4)).astype(np.uint8)


def _unpack4(packed: np.ndarray, m: int) -> np.ndarray:
    out = np.empty((len(packed), packed.shape[1] * 2), dtype=np.uint8)
    out[:, 0::2] = packed & 0x0F
    out[:, 1::2] = packed >> 4
    return out[:, :m]


def _train_codebook(sub: np.ndarray, ksub: int, seed: int) -> np.ndarray:
    uniq = np.unique(sub, axis=0)
    if len(uniq) == ksub:
        return uniq.astype(np.float32)
    if len(uniq) < ksub:
        # fewer distinct points than codewords: every point becomes a codeword
        warnings.warn(
            f"PQ training has {len(uniq)} distinct sub-vectors for {ksub} codewords; padding codebook",
            stacklevel=3,
        )
        pad = np.repeat(uniq[-1:], ksub - len(uniq), axis=0)
        return np.concatenate([uniq, pad]).astype(np.float32)
    return kmeans(sub, ksub, seed=seed)


class IvfPqIndex:
    kind = "ivfpq"

    def __init__(
        self,
        params: IvfPqParams,
        coarse: np.ndarray,
        codebooks: np.ndarray,
        list_offsets: np.ndarray,
        ids: np.ndarray,
        codes: np.ndarray,
        seed: int = 0,
        trained_on: int = 0,
    ) -> None:
        self.params = params
        self.coarse = coarse
        self.codebooks = codebooks  # (m, 2**nbits, dsub)
        self.list_offsets = list_offsets  # (nlist + 1,) row offsets into ids/codes
        self.ids = ids
        self.codes = codes  # (N, m) uint8, unpacked
        self.seed = seed
        self.trained_on = trained_on
        self.build_id: str | None = None

    @property
    def dimension(self) -> int:
        return self.coarse.shape[1]

    @property
    def metric(self) -> Metric:
        return self.params.metric

    def __len__(self) -> int:
        return len(self.ids)

    def list_ids(self, list_no: int) -> np.ndarray:
        lo, hi = self.list_offsets[list_no], self.list_offsets[list_no + 1]
        return np.asarray(self.ids[lo:hi])

    def list_sizes(self) -> np.ndarray:
        return np.diff(self.list_offsets)

    # -- encoding -------------------------------------------------------

    def _row_lists(self) -> np.ndarray:
        return np.repeat(np.arange(self.params.nlist), self.list_sizes())

    def reconstruct_rows(self, rows: np.ndarray | None = None) -> np.ndarray:
        """Decoded vectors for storage rows (all rows when ``rows`` is None)."""
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        codes = np.asarray(self.codes[rows])
        m = self.params.m
        parts = [self.codebooks[j][codes[:, j]] for j in range(m)]
        residual = np.concatenate(parts, axis=1)
        return self.coarse[self._row_lists()[rows]] + residual

    def reconstruct(self, doc_ids) -> np.ndarray:
        """Decoded vectors in doc_id order."""
        doc_ids = np.atleast_1d(np.asarray(doc_ids))
        row_of = np.empty(len(self), dtype=np.int64)
        row_of[np.asarray(self.ids, dtype=np.int64)] = np.arange(len(self))
        return self.reconstruct_rows(row_of[doc_ids])

    # -- search ---------------------------------------------------------

    def probe(self, query: np.ndarray, nprobe: int) -> np.ndarray:
        c = self.coarse.astype(np.float64)
        if self.metric == "inner_product":
            key = -(c @ query)
        else:
            diff = c - query
            key = (diff * diff).sum(1)
        return np.lexsort((np.arange(len(c)), key))[:nprobe]

    def adc_tables(self, query: np.ndarray, lists: np.ndarray) -> np.ndarray:
        """Lookup tables of shape ``(len(lists), m, 2**nbits)``.

        For inner product the entry is ``<q_j, codeword>`` (identical for
        every list; the coarse term is added per candidate).  For L2 it is
        ``||(q - coarse_l)_j - codeword||^2``.
        """
        m = self.params.m
        cb = self.codebooks.astype(np.float64)
        dsub = cb.shape[2]
        if self.metric == "inner_product":
            table = np.einsum("jd,jkd->jk", query.reshape(m, dsub), cb)
            return np.broadcast_to(table, (len(lists), *table.shape))
        resid = (query[None, :] - self.coarse[lists].astype(np.float64)).reshape(len(lists), m, dsub)
        cross = np.einsum("ljd,jkd->ljk", resid, cb)
        return (resid * resid).sum(2)[:, :, None] - 2.0 * cross + (cb * cb).sum(2)[None, :, :]

    def search(self, query, k: int = 10, nprobe: int | None = None) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _as_query(query, self.dimension)
        nprobe = self.params.nprobe if nprobe is None else int(nprobe)
        if not 1 <= nprobe <= self.params.nlist:
            raise DenseIndexError(f"nprobe must be in [1, {self.params.nlist}], got {nprobe}")
        lists = self.probe(q, nprobe)
        tables = self.adc_tables(q, lists)
        offs = self.list_offsets
        sizes = (offs[lists + 1] - offs[lists]).astype(np.int64)
        total = int(sizes.sum())
        if total == 0:
            return []
        rows = np.concatenate([np.arange(offs[l], offs[l + 1]) for l in lists])
        which = np.repeat(np.arange(len(lists)), sizes)
        codes = np.asarray(self.codes[rows]).astype(np.intp)
        m = self.params.m
        partial = tables[which[:, None], np.arange(m)[None, :], codes].sum(1)
        if self.metric == "inner_product":
            coarse_term = self.coarse[lists].astype(np.float64) @ q
            scores = coarse_term[which] + partial
        else:
            scores = -partial
        return _top_k(np.asarray(self.ids[rows], dtype=np.int64), scores, k)

    # -- persistence ----------------------------------------------------

    def _header_fields(self) -> dict:
        return dict(
            kind=KIND_IVFPQ,
            metric=self.metric,
            dimension=self.dimension,
            n=len(self),
            params=self.params,
            seed=self.seed,
            trained_on=self.trained_on,
        )

    def save(self, path: str | os.PathLike) -> None:
        codes = np.asarray(self.codes, dtype=np.uint8)
        if self.params.nbits == 4:
            codes = _pack4(codes)
        _write_file(
            path,
            self._header_fields(),
            {
                "centroids": self.coarse.astype(np.float32),
                "codebooks": self.codebooks.astype(np.float32),
                "directory": np.asarray(self.list_offsets, dtype=np.uint64),
                "ids": np.asarray(self.ids, dtype=np.uint32),
                "codes": codes,
            },
        )


def build_ivfpq(vectors, params: IvfPqParams, seed: int = 0, max_iter: int = 25) -> IvfPqIndex:
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    if x.ndim != 2:
        raise DenseIndexError("vectors must be a 2-D array")
    n, d = x.shape
    params.validate(d, n)
    rng = np.random.default_rng(seed)
    n_train = min(n, 256 * params.nlist)
    if n_train < 39 * params.nlist:
        warnings.warn(
            f"{n_train} training vectors for nlist={params.nlist}; at least {39 * params.nlist} recommended",
            stacklevel=2,
        )
    train_rows = np.arange(n) if n_train == n else np.sort(rng.choice(n, n_train, replace=False))
    train = x[train_rows]
    coarse_seed, pq_seed = (int(s) for s in rng.integers(0, 2**31, size=2))

    coarse = kmeans(train, params.nlist, max_iter=max_iter, seed=coarse_seed)
    assign = _assign(x, coarse)
    residuals = x - coarse[assign]

    m, ksub = params.m, 2**params.nbits
    dsub = d // m
    res_train = residuals[train_rows]
    codebooks = np.stack(
        [
            _train_codebook(np.ascontiguousarray(res_train[:, j * dsub : (j + 1) * dsub]), ksub, pq_seed + j)
            for j in range(m)
        ]
    )
    codes = np.empty((n, m), dtype=np.uint8)
    for j in range(m):
        codes[:, j] = _assign(np.ascontiguousarray(residuals[:, j * dsub : (j + 1) * dsub]), codebooks[j])

    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=params.nlist)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return IvfPqIndex(
        params,
        coarse,
        codebooks,
        offsets,
        order.astype(np.uint32),
        codes[order],
        seed=seed,
        trained_on=n_train,
    )


def search_ivfpq(index: IvfPqIndex, query, k: int, nprobe_override: int | None = None):
    return index.search(query, k, nprobe=nprobe_override)


# --------------------------------------------------------------- file I/O


def _aligned(pos: int) -> int:
    return (pos + ALIGN - 1) // ALIGN * ALIGN


_REGIONS = ("centroids", "codebooks", "directory", "ids", "codes", "vectors")


def _write_file(path, header: dict, regions: dict[str, np.ndarray]) -> None:
    params: IvfPqParams | None = header.get("params")
    offsets = {}
    pos = _aligned(_HEADER.size)
    for name in _REGIONS:
        if name in regions:
            offsets[name] = pos
            pos = _aligned(pos + regions[name].nbytes)
    head = _HEADER.pack(
        MAGIC,
        VERSION,
        header["kind"],
        _METRICS.index(header["metric"]),
        header["dimension"],
        header["n"],
        params.nlist if params else 0,
        params.nprobe if params else 0,
        params.m if params else 0,
        params.nbits if params else 0,
        header.get("seed", 0),
        header.get("trained_on", 0),
        *(offsets.get(name, 0) for name in _REGIONS),
    )
    with open(path, "wb") as fh:
        fh.write(head)
        for name in _REGIONS:
            if name in regions:
                fh.write(b"\0" * (offsets[name] - fh.tell()))
                arr = regions[name]
                fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        fh.write(b"\0" * (_aligned(fh.tell()) - fh.tell()))


def load_dense(path: str | os.PathLike, mmap: bool = True) -> FlatIndex | IvfPqIndex:
    """Open an ``FDI1`` file; array regions are memory-mapped when ``mmap``."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DenseIndexError(f"{path}: truncated header")
    (magic, version, kind, metric_no, d, n, nlist, nprobe, m, nbits, seed, trained_on, *offs) = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DenseIndexError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DenseIndexError(f"{path}: unsupported version {version}")
    metric = _METRICS[metric_no]
    off = dict(zip(_REGIONS, offs))

    def region(name, dtype, shape):
        count = int(np.prod(shape))
        if count == 0:
            return np.zeros(shape, dtype=dtype)
        if mmap:
            return np.memmap(path, dtype=dtype, mode="r", offset=off[name], shape=shape)
        with open(path, "rb") as fh:
            fh.seek(off[name])
            return np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype).reshape(shape)

    if kind == KIND_FLAT:
        return FlatIndex(region("vectors", "<f4", (n, d)), metric)
    if kind != KIND_IVFPQ:
        raise DenseIndexError(f"{path}: unknown index kind {kind}")
    params = IvfPqParams(nlist=nlist, nprobe=nprobe, m=m, nbits=nbits, metric=metric)
    ksub = 2**nbits
    coarse = np.asarray(region("centroids", "<f4", (nlist, d)))
    codebooks = np.asarray(region("codebooks", "<f4", (m, ksub, d // m)))
    directory = np.asarray(region("directory", "<u8", (nlist + 1,))).astype(np.int64)
    ids = region("ids", "<u4", (n,))
    if nbits == 8:
        codes = region("codes", "u1", (n, m))
    else:
        codes = _unpack4(np.asarray(region("codes", "u1", (n, (m + 1) // 2))), m)
    return IvfPqIndex(params, coarse, codebooks, directory, ids, codes, seed=seed, trained_on=trained_on)


def with_nprobe(index: IvfPqIndex, nprobe: int) -> IvfPqIndex:
    """Shallow copy of ``index`` with a different default ``nprobe``."""
    params = replace(index.params, nprobe=nprobe)
    params.validate(index.dimension)
    clone = IvfPqIndex(
        params, index.coarse, index.codebooks, index.list_offsets, index.ids, index.codes, index.seed, index.trained_on
    )
    clone.build_id = index.build_id
    return clone


def recall_at_k(approx: list[tuple[int, float]], exact: list[tuple[int, float]], k: int) -> float:
    """Fraction of the exact top-k ids present in the approximate top-k."""
    truth = {d for d, _ in exact[:k]}
    if not truth:
        return 1.0
    return len(truth & {d for d, _ in approx[:k]}) / len(truth)
