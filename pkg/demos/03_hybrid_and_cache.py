"""
Hybrid retrieval over several fields, with a persistent cache
=============================================================

Two BM25 indexes (title and text) and a dense index are fused with
reciprocal-rank fusion.  Results are cached on disk under a fingerprint of
the configuration and the index builds.
"""

# %%
import tempfile
from pathlib import Path

from flexkit.cache import QueryCache
from flexkit.dense import build_flat
from flexkit.encoder import Encoder, EncoderSpec
from flexkit.indexio import save_index
from flexkit.retriever import FlexRetriever, IndexEntry, RetrieverConfig
from flexkit.sparse import build_sparse
from flexkit.store import create_store, open_store
from flexkit.synthetic import qa_corpus

work = Path(tempfile.mkdtemp(prefix="flexkit-demo-"))
docs, questions = qa_corpus(500, 5, seed=2)
with create_store(work / "kb.fcs", ["title", "text"]) as w:
    for d in docs:
        w.append({"title": d.title, "text": d.text})

spec = EncoderSpec(dimension=128, seed=0)
with open_store(work / "kb.fcs") as store:
    save_index(build_sparse(store, "title"), work / "title.fsi", seed=0)
    save_index(build_sparse(store, "text"), work / "text.fsi", seed=0)
    save_index(build_flat(Encoder(spec).encode_batch([d.fields["text"] for d in store])), work / "text.fdi", seed=0)

# %%
config = RetrieverConfig.from_dict(
    {
        "indexes": [
            {"name": "title", "field": "title", "type": "sparse", "path": "title.fsi"},
            {"name": "text", "field": "text", "type": "sparse", "path": "text.fsi"},
            {"name": "dense", "field": "text", "type": "flat", "path": "text.fdi"},
        ],
        "fusion": "rrf",
        "retrieve_k": 50,
        "final_k": 3,
        "store": "kb.fcs",
        "encoder": spec.to_dict(),
    }
)
retriever = FlexRetriever.from_config(config, work)
q = questions[1]["question"]
print(q, "| gold:", questions[1]["answers"])
for c in retriever.retrieve(q):
    print(c.rank, c.doc_id, round(c.fused_score, 5), c.source, c.text.splitlines()[0])

# %%
# Weighted-sum fusion normalises each list to [0, 1] first, so BM25 and
# cosine scores can be mixed.
weighted = FlexRetriever.from_config(
    RetrieverConfig.from_dict({**config.to_dict(), "fusion": "weighted_sum", "weights": [0.5, 1.0, 2.0]}), work
)
print([c.doc_id for c in weighted.retrieve(q)])

# %%
# The cache key covers the config, the build ids and the query with its
# whitespace collapsed.
cache = QueryCache(work / "cache")
_, hit = retriever.cached_retrieve(cache, q)
probes = retriever.probe_count
again, hit2 = retriever.cached_retrieve(cache, "  " + q.replace(" ", "   ") + " ")
print("first:", hit, " second:", hit2, " extra probes:", retriever.probe_count - probes)

# %%
# Rebuilding an index without a seed gives it a new build id, so the old
# entries no longer match.
with open_store(work / "kb.fcs") as store:
    save_index(build_sparse(store, "text"), work / "text.fsi")
rebuilt = FlexRetriever.from_config(config, work)
print("fingerprint changed:", rebuilt.fingerprint != retriever.fingerprint)
print("hit after rebuild:", rebuilt.cached_retrieve(cache, q)[1])
