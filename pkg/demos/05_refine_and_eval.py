"""
Refining contexts and scoring answers
=====================================

Reorder and trim retrieved contexts before generation, then score a
pipeline.  Retrieval success does not depend on the generator.
"""

# %%
from flexkit.dense import build_flat
from flexkit.encoder import Encoder, EncoderSpec
from flexkit.eval import QaExample, evaluate_pipeline, exact_match, normalize_answer, token_f1
from flexkit.refine import RefineSpec, repack, squeeze, token_count
from flexkit.retriever import FlexRetriever, IndexEntry, RetrieverConfig
from flexkit.synthetic import qa_corpus

# %%
# Repacking changes the order; squeezing keeps a token budget.
ranked = ["first", "second", "third", "fourth", "fifth"]
for strategy in ("as_is", "reverse", "sandwich"):
    print(f"{strategy:9s}", repack(ranked, strategy))
texts = ["one two three four.", "five six seven.", "eight nine ten eleven twelve."]
cut = squeeze(texts, 8)
print(cut, [token_count(t) for t in cut])

# %%
print(normalize_answer("The  Eiffel-Tower!"), exact_match("eiffel tower", ["The Eiffel Tower"]))
print(round(token_f1("in Paris, France", ["Paris"]), 3))

# %%
docs, questions = qa_corpus(200, 50, seed=3)
spec = EncoderSpec(dimension=64, seed=3)


class Doc:
    def __init__(self, text):
        self.text = text


retriever = FlexRetriever(
    RetrieverConfig(indexes=(IndexEntry("dense", "text", "flat"),), retrieve_k=50, final_k=5, encoder=spec),
    {"dense": build_flat(Encoder(spec).encode_batch([d.text for d in docs]))},
    [Doc(d.text) for d in docs],
)
data = [QaExample(q["id"], q["question"], tuple(q["answers"])) for q in questions]


def last_word(question, contexts):
    return contexts[0].text.split()[-1].strip(".") if contexts else ""


def city_guess(question, contexts):
    words = contexts[0].text.split() if contexts else []
    return words[words.index("in") + 1] if "in" in words else ""


refine = RefineSpec("sandwich", token_budget=64)
for name, gen in {"nothing": lambda q, c: "", "last word": last_word, "city guess": city_guess}.items():
    agg = evaluate_pipeline(retriever, data, gen, k=5, refine=refine).aggregates
    print(f"{name:10s}  F1 {agg['f1']:5.1f}  EM {agg['em']:5.1f}  Succ {agg['succ']:5.1f}")
