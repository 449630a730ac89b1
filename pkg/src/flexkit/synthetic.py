"""Seeded synthetic data for demos and tests: a small QA corpus of invented
biographies, clustered Gaussian vectors, and Zipfian text corpora."""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

_SYLLABLES = "ka lo mi ren ta vos u bri del fen gor hal ix jun kel mar nor pel quin sar tor vel wyn zed".split()
_JOBS = ["cartographer", "glassblower", "astronomer", "beekeeper", "luthier", "archivist", "ferryman", "tanner"]
_INSTRUMENTS = ["oboe", "zither", "cello", "harp", "bagpipe", "lute", "viola", "marimba"]


def _name(rng: random.Random, parts: int) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(parts)).capitalize()


@dataclass(frozen=True)
class Biography:
    doc_id: int
    person: str
    city: str
    year: int
    job: str
    instrument: str

    @property
    def title(self) -> str:
        return self.person

    @property
    def text(self) -> str:
        return (
            f"{self.person} was born in {self.city} in {self.year}. "
            f"By trade {self.person} was a {self.job}, and in the evenings played the {self.instrument}."
        )


def qa_corpus(n_docs: int = 200, n_queries: int = 50, seed: int = 0):
    """Return ``(biographies, questions)``; questions are dicts with
    ``id``, ``question`` and ``answers`` keys and each targets one biography."""
    rng = random.Random(seed)
    people: set[str] = set()
    docs: list[Biography] = []
    cities = [_name(rng, 3) for _ in range(max(8, n_docs // 4))]
    while len(docs) < n_docs:
        person = f"{_name(rng, 2)} {_name(rng, 3)}"
        if person in people:
            continue
        people.add(person)
        docs.append(
            Biography(len(docs), person, rng.choice(cities), rng.randint(1700, 1950), rng.choice(_JOBS), rng.choice(_INSTRUMENTS))
        )
    templates = [
        ("Where was {p} born?", "city"),
        ("In which year was {p} born?", "year"),
        ("What was the trade of {p}?", "job"),
        ("Which instrument did {p} play?", "instrument"),
    ]
    questions = []
    for i, doc in enumerate(rng.sample(docs, n_queries)):
        template, attr = templates[i % len(templates)]
        questions.append({"id": f"q{i:03d}", "question": template.format(p=doc.person), "answers": [str(getattr(doc, attr))]})
    return docs, questions


def clustered_gaussians(
    n: int, dimension: int, n_clusters: int, sigma: float, seed: int = 0, n_queries: int = 0, normalize: bool = True
):
    """Isotropic Gaussian mixture with standard-normal centres.

    Returns ``vectors`` or ``(vectors, queries)`` when ``n_queries`` is set;
    queries are fresh draws from the same mixture.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, dimension))

    def draw(m: int) -> np.ndarray:
        x = centers[rng.integers(n_clusters, size=m)] + sigma * rng.normal(size=(m, dimension))
        if normalize:
            x /= np.linalg.norm(x, axis=1, keepdims=True)
        return x.astype(np.float32)

    vectors = draw(n)
    return (vectors, draw(n_queries)) if n_queries else vectors


def zipf_corpus(n_docs: int, vocab_size: int, seed: int = 0, max_len: int = 40, exponent: float = 1.0):
    """Documents of random length over ``w0..wN`` drawn with Zipfian weights."""
    rng = random.Random(seed)
    vocab = [f"w{i}" for i in range(vocab_size)]
    weights = [1.0 / (i + 1) ** exponent for i in range(vocab_size)]
    docs = [" ".join(rng.choices(vocab, weights, k=rng.randint(0, max_len))) for _ in range(n_docs)]
    return docs, vocab
