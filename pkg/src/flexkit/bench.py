"""Resource-overhead benchmark for a retriever.

Four numbers per run: mean wall-clock milliseconds per query, total process
CPU seconds, and mean and peak resident memory of this process.  Memory is
sampled by a background thread; the peak also takes the kernel's own
high-water mark into account where the platform reports one.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import psutil

METRICS = ("avg_wall_clock_ms_per_query", "total_cpu_time_s", "avg_memory_bytes", "peak_memory_bytes")


class BenchError(Exception):
    pass


def query_digest(queries: Sequence[str]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for q in queries:
        h.update(q.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


@dataclass
class ResourceReport:
    avg_wall_clock_ms_per_query: float
    total_cpu_time_s: float
    avg_memory_bytes: float
    peak_memory_bytes: int
    batch_size: int
    query_count: int
    config_fingerprint: str | None
    query_digest: str
    completed_queries: int
    memory_samples: int
    tokenizer_parallelism: bool
    valid: bool = True
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ResourceReport:
        names = {f.name for f in fields(cls)}
        missing = names - set(d) - {"valid", "error"}
        if missing:
            raise BenchError(f"report is missing fields {sorted(missing)}")
        return cls(**{k: d[k] for k in names if k in d})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ResourceReport:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise BenchError(f"cannot read report {path}: {exc}") from None


def _os_peak_rss() -> int:
    """Lifetime resident high-water mark in bytes, or 0 where unavailable."""
    try:
        import resource
    except ImportError:  # Windows
        return 0
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return int(peak if sys.platform == "darwin" else peak * 1024)


class _RssSampler(threading.Thread):
    def __init__(self, interval_s: float) -> None:
        super().__init__(daemon=True)
        self.interval_s = interval_s
        self.samples: list[int] = []
        self._proc = psutil.Process()
        self._halt = threading.Event()

    def sample(self) -> None:
        self.samples.append(self._proc.memory_info().rss)

    def run(self) -> None:
        while not self._halt.wait(self.interval_s):
            self.sample()

    def stop(self) -> None:
        self._halt.set()
        self.join()
        self.sample()


def run_bench(
    retriever,
    queries: Sequence[str],
    batch_size: int = 1,
    sample_interval_ms: float = 50.0,
    k: int | None = None,
    tokenizer_parallelism: bool = True,
    return_results: bool = False,
):
    """Run ``queries`` through ``retriever.retrieve_batch`` in batches.

    Each batch is handed to the retriever at once; with
    ``tokenizer_parallelism`` the batch is processed with concurrency equal
    to ``batch_size``, otherwise one query at a time.  The query cache is
    never consulted.  A retrieval error stops the run and yields a report
    with ``valid=False`` covering the queries completed so far.

    Returns the report, or ``(report, results)`` with ``return_results``.
    """
    queries = list(queries)
    if not queries:
        raise BenchError("no queries to benchmark")
    if batch_size < 1:
        raise BenchError("batch_size must be >= 1")
    if sample_interval_ms <= 0:
        raise BenchError("sample_interval_ms must be > 0")
    concurrency = batch_size if tokenizer_parallelism else 1

    sampler = _RssSampler(sample_interval_ms / 1000)
    sampler.sample()
    sampler.start()
    results: list = []
    error: str | None = None
    cpu0 = time.process_time()
    t0 = time.perf_counter()
    try:
        for lo in range(0, len(queries), batch_size):
            results.extend(retriever.retrieve_batch(queries[lo : lo + batch_size], k, concurrency))
    except Exception as exc:  # reported, not raised: the partial run is still informative
        error = f"{type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - t0
    cpu = time.process_time() - cpu0
    sampler.stop()

    done = len(results)
    samples = sampler.samples
    report = ResourceReport(
        avg_wall_clock_ms_per_query=1000.0 * elapsed / done if done else 0.0,
        total_cpu_time_s=cpu,
        avg_memory_bytes=math.fsum(samples) / len(samples),
        peak_memory_bytes=max(max(samples), _os_peak_rss()),
        batch_size=batch_size,
        query_count=len(queries),
        config_fingerprint=getattr(retriever, "fingerprint", None),
        query_digest=query_digest(queries),
        completed_queries=done,
        memory_samples=len(samples),
        tokenizer_parallelism=tokenizer_parallelism,
        valid=error is None,
        error=error,
    )
    return (report, results) if return_results else report


@dataclass
class Comparison:
    rows: dict[str, dict[str, float | None]]
    a_label: str = "a"
    b_label: str = "b"

    def to_dict(self) -> dict:
        return {"a": self.a_label, "b": self.b_label, "metrics": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_markdown(self) -> str:
        lines = [
            f"| metric | {self.a_label} | {self.b_label} | {self.a_label}/{self.b_label} |",
            "|---|---:|---:|---:|",
        ]
        for name, row in self.rows.items():
            ratio = "n/a" if row["ratio"] is None else f"{row['ratio']:.3f}"
            lines.append(f"| {name} | {row['a']:.6g} | {row['b']:.6g} | {ratio} |")
        return "\n".join(lines) + "\n"


def _ratio(a: float, b: float) -> float | None:
    if b == 0:
        return 1.0 if a == 0 else None
    return a / b


def compare_reports(a: ResourceReport, b: ResourceReport, a_label: str = "a", b_label: str = "b") -> Comparison:
    """Per-metric ratios ``a / b`` for two runs over the same queries."""
    if a.query_digest != b.query_digest or a.query_count != b.query_count:
        raise BenchError("reports were produced from different query sets")
    if a.batch_size != b.batch_size:
        raise BenchError(f"batch sizes differ: {a.batch_size} vs {b.batch_size}")
    rows = {}
    for m in METRICS:
        va, vb = float(getattr(a, m)), float(getattr(b, m))
        rows[m] = {"a": va, "b": vb, "ratio": _ratio(va, vb)}
    return Comparison(rows, a_label, b_label)
