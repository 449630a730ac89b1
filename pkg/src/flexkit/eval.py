"""QA evaluation: answer metrics (EM, F1), retrieval success and run reports.

Answers are compared after SQuAD-style normalisation.  ``Succ`` for a
question is 1 when a normalised gold answer occurs inside one of the
normalised top-k context texts, so it depends on retrieval alone and not on
whatever generates the final answer.
"""

from __future__ import annotations

import json
import math
import string
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLES = frozenset({"a", "an", "the"})


class EvalError(Exception):
    pass


# ------------------------------------------------------------------ metrics


def normalize_answer(s: str) -> str:
    """Lowercase, strip ASCII punctuation, drop articles, collapse whitespace."""
    s = s.lower().translate(_PUNCT_TABLE)
    return " ".join(w for w in s.split() if w not in _ARTICLES)


def _check_golds(golds: Sequence[str]) -> None:
    if isinstance(golds, str) or not golds:
        raise EvalError("golds must be a non-empty list of strings")


def exact_match(pred: str, golds: Sequence[str]) -> int:
    _check_golds(golds)
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    _check_golds(golds)
    p = normalize_answer(pred).split()
    return max(_f1(p, normalize_answer(g).split()) for g in golds)


def _text(ctx) -> str:
    return ctx if isinstance(ctx, str) else ctx.text


def _gold_hits(contexts: Sequence, golds: Sequence[str], k: int) -> tuple[int | None, set[str]]:
    """First 1-based rank whose text holds a gold, and the set of golds found."""
    norm_golds = {g for g in (normalize_answer(x) for x in golds) if g}
    first: int | None = None
    found: set[str] = set()
    for rank, ctx in enumerate(contexts[:k], start=1):
        text = normalize_answer(_text(ctx))
        here = {g for g in norm_golds if g in text}
        if here and first is None:
            first = rank
        found |= here
    return first, found


def success_rate(contexts: Sequence, golds: Sequence[str], k: int) -> int:
    """1 if a normalised gold answer is a substring of a normalised top-k text.

    A gold that normalises to the empty string never matches.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_golds(golds)
    return int(_gold_hits(contexts, golds, k)[0] is not None)


# ------------------------------------------------------------------ data


@dataclass(frozen=True)
class QaExample:
    id: str
    question: str
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.answers:
            raise EvalError(f"example {self.id!r} has no gold answers")


def _read_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise EvalError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise EvalError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_dataset(path: str | Path) -> list[QaExample]:
    """Read ``{"id", "question", "answers": [...]}`` lines."""
    out: list[QaExample] = []
    seen: set[str] = set()
    for lineno, obj in _read_jsonl(path):
        try:
            ex = QaExample(str(obj["id"]), str(obj["question"]), tuple(str(a) for a in obj["answers"]))
        except KeyError as exc:
            raise EvalError(f"{path}:{lineno}: missing field {exc}") from None
        except EvalError as exc:
            raise EvalError(f"{path}:{lineno}: {exc}") from None
        if ex.id in seen:
            raise EvalError(f"{path}:{lineno}: duplicate id {ex.id!r}")
        seen.add(ex.id)
        out.append(ex)
    if not out:
        raise EvalError(f"{path}: dataset is empty")
    return out


def load_predictions(path: str | Path) -> dict[str, str]:
    """Read ``{"id", "prediction"}`` lines."""
    out: dict[str, str] = {}
    for lineno, obj in _read_jsonl(path):
        try:
            out[str(obj["id"])] = str(obj["prediction"])
        except KeyError as exc:
            raise EvalError(f"{path}:{lineno}: missing field {exc}") from None
    return out


# ------------------------------------------------------------------ reports


def _mean_pct(values: Sequence[float]) -> float:
    return 100.0 * math.fsum(values) / len(values)


_LABELS = {"f1": "F1", "em": "EM", "succ": "Succ", "recall_at_k": "Recall@k", "mrr": "MRR"}


@dataclass
class EvalReport:
    kind: str
    examples: list[dict[str, Any]]
    aggregates: dict[str, float]
    fingerprint: str | None = None
    k: int | None = None
    timing: dict[str, float] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(cls, kind: str, examples: list[dict], metrics: Sequence[str], **kw) -> EvalReport:
        if not examples:
            raise EvalError("cannot report on an empty dataset")
        aggregates = {m: _mean_pct([float(e[m]) for e in examples]) for m in metrics}
        return cls(kind, examples, aggregates, **kw)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "aggregates": self.aggregates,
            "fingerprint": self.fingerprint,
            "k": self.k,
            "count": len(self.examples),
            "examples": self.examples,
            "meta": self.meta,
        }
        if self.timing is not None:
            d["timing"] = self.timing
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvalReport:
        return cls(
            kind=d["kind"],
            examples=list(d["examples"]),
            aggregates=dict(d["aggregates"]),
            fingerprint=d.get("fingerprint"),
            k=d.get("k"),
            timing=d.get("timing"),
            meta=dict(d.get("meta", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def to_table(self) -> str:
        names = [_LABELS.get(m, m) for m in self.aggregates]
        widths = [max(len(n), 6) for n in names]
        head = "  ".join(n.rjust(w) for n, w in zip(names, widths))
        vals = "  ".join(f"{v:.2f}".rjust(w) for v, w in zip(self.aggregates.values(), widths))
        lines = [f"{self.kind} evaluation over {len(self.examples)} examples" + (f" (k={self.k})" if self.k else ""), head, vals]
        return "\n".join(lines) + "\n"


def _retrieval_record(ex: QaExample, contexts: Sequence, k: int) -> dict:
    first, found = _gold_hits(contexts, ex.answers, k)
    golds = {g for g in (normalize_answer(a) for a in ex.answers) if g}
    return {
        "id": ex.id,
        "succ": int(first is not None),
        "hit_rank": first,
        "recall_at_k": len(found) / len(golds) if golds else 0.0,
        "mrr": 1.0 / first if first else 0.0,
        "doc_ids": [getattr(c, "doc_id", None) for c in contexts[:k]],
    }


def evaluate_retrieval(retriever, dataset: Sequence[QaExample], k: int = 10, record_timing: bool = False) -> EvalReport:
    """Retrieve for every question and score the top-k contexts.

    Timing is left out unless ``record_timing`` so that reports for a fixed
    config are byte-identical across runs.
    """
    if not dataset:
        raise EvalError("dataset is empty")
    start = time.perf_counter()
    records = [_retrieval_record(ex, retriever.retrieve(ex.question, k), k) for ex in dataset]
    timing = {"total_s": time.perf_counter() - start} if record_timing else None
    return EvalReport.build(
        "retrieval",
        records,
        ("succ", "recall_at_k", "mrr"),
        fingerprint=getattr(retriever, "fingerprint", None),
        k=k,
        timing=timing,
    )


def evaluate_generation(predictions: Mapping[str, str] | str | Path, dataset: Sequence[QaExample]) -> EvalReport:
    if not isinstance(predictions, Mapping):
        predictions = load_predictions(predictions)
    if not dataset:
        raise EvalError("dataset is empty")
    missing = [ex.id for ex in dataset if ex.id not in predictions]
    if missing:
        raise EvalError(f"no prediction for ids: {', '.join(missing[:10])}" + (" ..." if len(missing) > 10 else ""))
    records = []
    for ex in dataset:
        pred = predictions[ex.id]
        records.append({"id": ex.id, "prediction": pred, "em": exact_match(pred, ex.answers), "f1": token_f1(pred, ex.answers)})
    return EvalReport.build("generation", records, ("f1", "em"))


Generator = Callable[[str, Sequence], str]


def evaluate_pipeline(
    retriever,
    dataset: Sequence[QaExample],
    generator: Generator,
    k: int = 10,
    refine=None,
) -> EvalReport:
    """Retrieve, optionally refine, generate, then score F1/EM/Succ.

    Succ is measured on the retrieved top-k before refinement, so changing
    ``generator`` or ``refine`` cannot change it.
    """
    if not dataset:
        raise EvalError("dataset is empty")
    records = []
    for ex in dataset:
        contexts = retriever.retrieve(ex.question, k)
        fed = refine.apply(contexts) if refine is not None else contexts
        pred = generator(ex.question, fed)
        rec = _retrieval_record(ex, contexts, k)
        rec.update(prediction=pred, em=exact_match(pred, ex.answers), f1=token_f1(pred, ex.answers))
        records.append(rec)
    return EvalReport.build(
        "pipeline", records, ("f1", "em", "succ"), fingerprint=getattr(retriever, "fingerprint", None), k=k
    )
