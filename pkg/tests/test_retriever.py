import asyncio
import json
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexkit.cache import QueryCache
from flexkit.dense import build_flat
from flexkit.encoder import Encoder, EncoderSpec
from flexkit.indexio import load_index, save_index
from flexkit.retriever import (
    BatchRetrievalError,
    FlexRetriever,
    IndexEntry,
    RemoteSearchClient,
    RetrievedContext,
    RetrieverConfig,
    RetrieverError,
    cached_retrieve,
    fuse,
    rerank_lexical,
    retrieve,
    retrieve_batch,
)
from flexkit.sparse import build_sparse
from flexkit.store import create_store, open_store

from httpfixtures import ScriptedServer, json_response
from oracles import ref_overlap_f1


class FixedIndex:
    """Returns a canned ranking regardless of the query."""

    def __init__(self, hits, build_id=None):
        self.hits = hits
        self.build_id = build_id

    def search(self, query, k):
        return self.hits[:k]


def sparse_cfg(*names, **kw):
    return RetrieverConfig(indexes=tuple(IndexEntry(n, "text", "sparse") for n in names), **kw)


class TestConfig:
    def test_validation(self):
        with pytest.raises(RetrieverError):
            RetrieverConfig(indexes=())
        with pytest.raises(RetrieverError):
            sparse_cfg("a", "a")
        with pytest.raises(RetrieverError):
            sparse_cfg("a", "b", fusion="weighted_sum", weights=(1.0,))
        with pytest.raises(RetrieverError):
            sparse_cfg("a", fusion="weighted_sum", weights=(0.0,))
        with pytest.raises(RetrieverError):
            sparse_cfg("a", final_k=20, retrieve_k=10)
        with pytest.raises(RetrieverError):
            sparse_cfg("a", fusion="max")
        with pytest.raises(RetrieverError):
            IndexEntry("a", "text", "hnsw")

    def test_json_round_trip(self):
        cfg = RetrieverConfig(
            indexes=(IndexEntry("bm25", "text", "sparse", "b.fsi"), IndexEntry("vec", "text", "ivfpq", "v.fdi", 4)),
            fusion="weighted_sum",
            weights=(0.3, 0.7),
            encoder=EncoderSpec(dimension=32, seed=3),
            refine=None,
        )
        again = RetrieverConfig.from_dict(json.loads(cfg.canonical_json()))
        assert again == cfg
        assert again.canonical_json() == cfg.canonical_json()

    def test_unknown_key(self):
        with pytest.raises(RetrieverError, match="unknown config keys"):
            RetrieverConfig.from_dict({"indexes": [{"name": "a", "field": "t", "type": "sparse"}], "topk": 3})

    def test_fingerprint_sensitivity(self):
        a = FixedIndex([(0, 1.0)], build_id="b1")
        base = FlexRetriever(sparse_cfg("a"), {"a": a}).fingerprint
        assert FlexRetriever(sparse_cfg("a"), {"a": a}).fingerprint == base
        assert FlexRetriever(sparse_cfg("a", rrf_c=61), {"a": a}).fingerprint != base
        assert FlexRetriever(sparse_cfg("a"), {"a": FixedIndex([], build_id="b2")}).fingerprint != base
        assert len(base) == 32

    def test_fingerprint_ignores_file_locations(self):
        a = FixedIndex([], build_id="b1")
        c1 = RetrieverConfig(indexes=(IndexEntry("a", "text", "sparse", "/x/a.fsi"),), store="/x/s.fcs")
        c2 = RetrieverConfig(indexes=(IndexEntry("a", "text", "sparse", "/y/a.fsi"),), store="/y/s.fcs")
        assert FlexRetriever(c1, {"a": a}).fingerprint == FlexRetriever(c2, {"a": a}).fingerprint


class TestFusion:
    def test_rrf_hand_table(self):
        # index A ranks 3,1,4,0 and index B ranks 1,2,3; c = 60
        results = {"A": [(3, 9.0), (1, 8.0), (4, 7.0), (0, 6.0)], "B": [(1, 0.9), (2, 0.8), (3, 0.7)]}
        table = {
            0: Fraction(1, 64),
            1: Fraction(1, 62) + Fraction(1, 61),
            2: Fraction(1, 62),
            3: Fraction(1, 61) + Fraction(1, 63),
            4: Fraction(1, 63),
        }
        want = sorted(table, key=lambda d: (-table[d], d))
        got = fuse(results, ["A", "B"], "rrf", rrf_c=60)
        assert [d for d, _ in got] == want == [1, 3, 2, 4, 0]
        for d, s in got:
            assert s == pytest.approx(float(table[d]), abs=1e-15)

    def test_rrf_both_first_and_one_first(self):
        got = dict(fuse({"A": [(7, 1.0)], "B": [(7, 5.0)]}, ["A", "B"], "rrf"))
        assert got[7] == pytest.approx(2 / 61)
        got = dict(fuse({"A": [(7, 1.0)], "B": []}, ["A", "B"], "rrf"))
        assert got[7] == pytest.approx(1 / 61)

    def test_weighted_sum_disjoint_singletons(self):
        got = fuse({"A": [(5, 3.0)], "B": [(2, 0.1)]}, ["A", "B"], "weighted_sum", [1.0, 1.0])
        assert got == [(2, 1.0), (5, 1.0)]

    def test_weighted_sum_values(self):
        got = dict(fuse({"A": [(0, 4.0), (1, 2.0), (2, 0.0)], "B": [(1, 1.0), (3, 0.5)]}, ["A", "B"], "weighted_sum", [2.0, 1.0]))
        assert got == {0: 2.0, 1: 1.0 + 1.0, 2: 0.0, 3: 0.0}

    @given(
        st.lists(st.tuples(st.integers(0, 30), st.floats(-100, 100)), min_size=1, max_size=15, unique_by=lambda t: t[0]),
        st.lists(st.tuples(st.integers(0, 30), st.floats(-100, 100)), min_size=1, max_size=15, unique_by=lambda t: t[0]),
        st.sampled_from([0.5, 2.0, 8.0]),
    )
    def test_weighted_sum_scale_invariance(self, a, b, factor):
        a = sorted(a, key=lambda t: -t[1])
        b = sorted(b, key=lambda t: -t[1])
        scaled = [(d, s * factor) for d, s in a]
        base = fuse({"A": a, "B": b}, ["A", "B"], "weighted_sum", [1.0, 1.0])
        again = fuse({"A": scaled, "B": b}, ["A", "B"], "weighted_sum", [1.0, 1.0])
        assert [s for _, s in base] == pytest.approx([s for _, s in again], abs=1e-9)

    @given(st.lists(st.lists(st.integers(0, 50), unique=True, max_size=20), min_size=1, max_size=4))
    def test_rrf_bounds(self, lists):
        results = {f"i{n}": [(d, 0.0) for d in docs] for n, docs in enumerate(lists)}
        for _, s in fuse(results, list(results), "rrf", rrf_c=60):
            assert 0 < s <= len(lists) / 61 + 1e-15


class TestRetrieve:
    def test_single_index_order_preserved(self):
        hits = [(4, 3.0), (2, 2.0), (9, 2.0), (1, 0.5)]
        r = FlexRetriever(sparse_cfg("a", final_k=4), {"a": FixedIndex(hits)})
        out = r.retrieve("q")
        assert [c.doc_id for c in out] == [4, 2, 9, 1]
        assert [c.rank for c in out] == [1, 2, 3, 4]
        assert out[0].per_index_scores == {"a": 3.0} and out[0].source == ("a",)

    def test_weighted_sum_single_index_order(self):
        hits = [(4, 3.0), (2, 2.0), (9, 1.0)]
        r = FlexRetriever(sparse_cfg("a", fusion="weighted_sum", final_k=3), {"a": FixedIndex(hits)})
        assert [c.doc_id for c in r.retrieve("q")] == [4, 2, 9]

    def test_missing_index_and_bad_k(self):
        with pytest.raises(RetrieverError, match="unknown index_ref"):
            FlexRetriever(sparse_cfg("a"), {"b": FixedIndex([])})
        r = FlexRetriever(sparse_cfg("a", retrieve_k=5, final_k=5), {"a": FixedIndex([])})
        with pytest.raises(RetrieverError):
            r.retrieve("q", 6)

    def test_prefix_property(self):
        hits = [(d, float(20 - d)) for d in range(20)]
        r = FlexRetriever(sparse_cfg("a", "b", retrieve_k=20), {"a": FixedIndex(hits), "b": FixedIndex(hits[::-1])})
        for k in range(1, 19):
            assert r.retrieve("q", k) == r.retrieve("q", k + 1)[:k]

    def test_dense_dimension_mismatch(self):
        cfg = RetrieverConfig(indexes=(IndexEntry("v", "text", "flat"),))
        index = build_flat(np.eye(4, dtype=np.float32))
        with pytest.raises(RetrieverError, match="dimension"):
            FlexRetriever(cfg, {"v": index}, encoder=Encoder(EncoderSpec(dimension=8)))
        with pytest.raises(RetrieverError, match="encoder"):
            FlexRetriever(cfg, {"v": index})


TEXTS = [
    "the cat sat on the mat",
    "dogs chase cats in the park",
    "a quick brown fox",
    "cats and dogs living together",
    "the mat was red",
    "foxes are quick and brown",
    "parks have trees",
    "the red cat",
    "brown dogs",
    "nothing relevant here",
]


class TestRerank:
    def test_single_context_unchanged(self):
        c = [RetrievedContext(3, {"a": 1.0}, 0.5, 1, ("a",), "xyz")]
        assert [x.doc_id for x in rerank_lexical("abc", c, 1)] == [3]

    def test_full_overlap_beats_none(self):
        c = [
            RetrievedContext(0, {}, 0.9, 1, (), "nothing here"),
            RetrievedContext(1, {}, 0.1, 2, (), "red cat on mat"),
        ]
        out = rerank_lexical("red cat", c, 2)
        assert [x.doc_id for x in out] == [1, 0] and [x.rank for x in out] == [1, 2]

    def test_ten_doc_fixture_vs_brute_force(self):
        query = "brown cat on the mat"
        contexts = [RetrievedContext(i, {}, 1.0 - i / 10, i + 1, (), t) for i, t in enumerate(TEXTS)]
        scores = [ref_overlap_f1(query, t) for t in TEXTS]
        want = sorted(range(10), key=lambda i: (-scores[i], i))
        out = rerank_lexical(query, contexts, 10)
        assert [c.doc_id for c in out] == want
        assert [c.fused_score for c in out] == pytest.approx([scores[i] for i in want])
        assert [c.doc_id for c in rerank_lexical(query, contexts, 3)] == want[:3]


@pytest.fixture()
def corpus(tmp_path):
    store_path = tmp_path / "c.fcs"
    with create_store(store_path, ["title", "text"]) as w:
        for i, t in enumerate(TEXTS * 5):
            w.append({"title": f"doc {i}", "text": t})
    spec = EncoderSpec(dimension=32, seed=1)
    with open_store(store_path) as store:
        save_index(build_sparse(store, "text"), tmp_path / "bm25.fsi")
        save_index(build_sparse(store, "title"), tmp_path / "title.fsi")
        vectors = Encoder(spec).encode_batch([d.fields["text"] for d in store])
    save_index(build_flat(vectors), tmp_path / "vec.fdi")
    cfg = RetrieverConfig(
        indexes=(
            IndexEntry("bm25", "text", "sparse", "bm25.fsi"),
            IndexEntry("title", "title", "sparse", "title.fsi"),
            IndexEntry("vec", "text", "flat", "vec.fdi"),
        ),
        retrieve_k=20,
        final_k=5,
        store="c.fcs",
        encoder=spec,
    )
    return tmp_path, cfg


class TestStack:
    def test_hybrid_end_to_end(self, corpus):
        base, cfg = corpus
        r = FlexRetriever.from_config(cfg, base)
        out = r.retrieve("brown fox")
        assert len(out) == 5
        assert [c.rank for c in out] == [1, 2, 3, 4, 5]
        assert all(a.fused_score >= b.fused_score for a, b in zip(out, out[1:]))
        assert "fox" in out[0].text
        assert r.probe_count == 3
        r.close()

    def test_multi_field(self, corpus):
        base, cfg = corpus
        title_only = RetrieverConfig(indexes=(cfg.indexes[1],), store=cfg.store, retrieve_k=5, final_k=1)
        r = FlexRetriever.from_config(title_only, base)
        assert r.retrieve("doc 17")[0].doc_id == 17

    def test_cache_hit_has_no_probes(self, corpus):
        base, cfg = corpus
        r = FlexRetriever.from_config(cfg, base)
        cache = QueryCache(base / "cache")
        first, hit1 = cached_retrieve(cache, r, "quick brown fox", 5)
        probes = r.probe_count
        second, hit2 = cached_retrieve(cache, r, "  quick   brown fox ", 5)
        assert (hit1, hit2) == (False, True)
        assert r.probe_count == probes
        assert second == first == retrieve(r, "quick brown fox", 5)
        assert json.dumps([c.to_dict() for c in second]) == json.dumps([c.to_dict() for c in first])

    def test_rebuild_invalidates(self, corpus):
        base, cfg = corpus
        cache = QueryCache(base / "cache")
        cached_retrieve(cache, FlexRetriever.from_config(cfg, base), "cats", 5)
        assert cached_retrieve(cache, FlexRetriever.from_config(cfg, base), "cats", 5)[1]
        with open_store(base / "c.fcs") as store:
            save_index(build_sparse(store, "text"), base / "bm25.fsi")
        _, hit = cached_retrieve(cache, FlexRetriever.from_config(cfg, base), "cats", 5)
        assert not hit

    def test_seeded_save_is_reproducible(self, corpus):
        base, _ = corpus
        with open_store(base / "c.fcs") as store:
            a = save_index(build_sparse(store, "text"), base / "s1.fsi", seed=3)
            b = save_index(build_sparse(store, "text"), base / "s2.fsi", seed=3)
            c = save_index(build_sparse(store, "text"), base / "s3.fsi", seed=4)
        assert a == b != c
        assert load_index(base / "s1.fsi").build_id == a

    def test_batch_matches_sequential(self, corpus):
        base, cfg = corpus
        r = FlexRetriever.from_config(cfg, base)
        queries = [f"{w} {v}" for w in ("cat", "dog", "fox", "mat", "park") for v in ("red", "brown", "quick", "trees")]
        seq = [r.retrieve(q) for q in queries]
        assert retrieve_batch(r, queries, concurrency=1) == seq
        assert retrieve_batch(r, queries, concurrency=8) == seq
        assert retrieve_batch(r, [], concurrency=8) == []
        assert asyncio.run(r.aretrieve_batch(queries, concurrency=4)) == seq

    def test_lexical_reranker_config(self, corpus):
        base, cfg = corpus
        cfg = RetrieverConfig(indexes=cfg.indexes, retrieve_k=20, final_k=3, store=cfg.store, encoder=cfg.encoder, reranker="lexical")
        out = FlexRetriever.from_config(cfg, base).retrieve("red cat")
        assert len(out) == 3 and out[0].fused_score >= out[-1].fused_score


class FailingIndex:
    build_id = "fail"

    def search(self, query, k):
        if "bad" in query:
            raise ValueError("boom")
        return [(0, 1.0)]


class SlowIndex:
    build_id = "slow"

    def search(self, query, k):
        time.sleep(0.01)
        return [(0, 1.0)]


def test_batch_error_carries_query_index():
    r = FlexRetriever(sparse_cfg("a"), {"a": FailingIndex()})
    with pytest.raises(BatchRetrievalError) as info:
        r.retrieve_batch(["ok", "ok", "bad one", "bad two"], concurrency=3)
    assert info.value.query_index == 2
    assert isinstance(info.value.cause, ValueError)


def test_in_flight_bounded():
    r = FlexRetriever(sparse_cfg("a"), {"a": SlowIndex()})
    r.retrieve_batch([str(i) for i in range(40)], concurrency=3)
    assert 1 < r.max_in_flight <= 3


def test_remote_search_client():
    def handler(method, path, body, n):
        req = json.loads(body)
        hits = [{"doc_id": i, "score": 1.0 / (i + 1)} for i in range(req["k"])]
        return 200, {}, json.dumps({"hits": hits, "query": req["query"]})

    with ScriptedServer({"/search": handler, "/broken": json_response({"nope": 1})}) as srv:
        client = RemoteSearchClient(srv.url("/search"))
        assert client.search("q", 3) == [(0, 1.0), (1, 0.5), (2, 1 / 3)]
        cfg = RetrieverConfig(indexes=(IndexEntry("web", "text", "remote", srv.url("/search")),), retrieve_k=4, final_k=2)
        out = FlexRetriever.from_config(cfg).retrieve("q")
        assert [c.doc_id for c in out] == [0, 1]
        with pytest.raises(RetrieverError, match="malformed"):
            RemoteSearchClient(srv.url("/broken")).search("q", 1)
