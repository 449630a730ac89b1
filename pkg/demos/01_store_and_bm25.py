"""
A document store and a BM25 index
=================================

Ingest a small corpus into the memory-mapped store, index one field with
BM25, and check a score by hand.
"""

# %%
import math
import tempfile
from pathlib import Path

from flexkit.sparse import Bm25Index, build_sparse
from flexkit.store import create_store, open_store
from flexkit.synthetic import qa_corpus

work = Path(tempfile.mkdtemp(prefix="flexkit-demo-"))
docs, questions = qa_corpus(n_docs=300, n_queries=5, seed=1)

# %%
# Every record gets a sequential doc_id.  Fields are named by the schema;
# metadata is free-form string pairs.
with create_store(work / "people.fcs", ["title", "text"]) as writer:
    for d in docs:
        writer.append({"title": d.title, "text": d.text}, {"job": d.job})

store = open_store(work / "people.fcs")
print(len(store), "records;", store[42].fields["title"], "->", store[42].metadata)

# %%
# Random access touches only the bytes of one record.
before = store.bytes_read
store.get(123)
print("bytes read for one get:", store.bytes_read - before)

# %%
# Index the text field and ask a question.
index = build_sparse(store, "text")
q = questions[0]["question"]
hits = index.search(q, k=3)
print(q)
for doc_id, score in hits:
    print(f"  {score:7.3f}  {store[doc_id].fields['text'][:70]}")

# %%
# The top score, recomputed from document frequencies and lengths.
doc_id, score = hits[0]
p = index.params
total = 0.0
for term in index.query_terms(q):
    tf = index.tf(term, doc_id)
    if tf:
        dl = index.doc_lens[doc_id]
        total += index.idf(term) * tf * (p.k1 + 1) / (tf + p.k1 * (1 - p.b + p.b * dl / index.avgdl))
print("recomputed:", total, "matches:", math.isclose(total, score, rel_tol=1e-12))

# %%
# Indexes are plain files and reload to identical results.
index.save(work / "people.fsi")
print(Bm25Index.load(work / "people.fsi").search(q, 3) == hits)
store.close()
