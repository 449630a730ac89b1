"""``flexkit`` command line.

Results go to stdout and diagnostics to stderr.  Exit status is 0 on
success, 1 for usage errors and 2 when a command fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench, dense, eval as evaluation, preprocess, sparse, store, web
from .config import ConfigError, configure_logging, load_config
from .encoder import Encoder, EncoderSpec
from .indexio import save_index

log = logging.getLogger("flexkit")

_COMMANDS = "preprocess,store,encode,index,search,web,eval,bench"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from None


# ------------------------------------------------------------------ commands


_SUFFIXES = {"html": {".html", ".htm"}, "markdown": {".md", ".markdown"}, "plain": {".txt", ".text"}}


def _input_documents(path: Path, fmt: str) -> list[preprocess.ParsedDocument]:
    if path.is_file() and path.suffix == ".jsonl":
        # pages written by `web fetch`
        return [
            preprocess.ParsedDocument(p["url"], preprocess.normalize_text(p["text"]), p.get("title"), "plain")
            for p in _read_jsonl(path)
        ]
    if path.is_file():
        return [preprocess.parse(path.read_bytes(), fmt, path.name)]
    if not path.is_dir():
        raise FileNotFoundError(f"input not found: {path}")
    files = sorted(p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in _SUFFIXES[fmt])
    if not files:
        raise FileNotFoundError(f"no {fmt} files under {path}")
    return [preprocess.parse(p.read_bytes(), fmt, p.relative_to(path).as_posix()) for p in files]


def cmd_preprocess(args) -> int:
    docs = _input_documents(Path(args.input), args.format)
    if args.rules:
        docs = preprocess.knowledge_preprocess(docs, args.rules)
    n_chunks = 0
    with open(args.output, "w", encoding="utf-8") as out:
        for doc in docs:
            for chunk in preprocess.chunk_document(doc, args.chunker, args.size, args.overlap):
                row = {
                    "title": doc.title or "",
                    "text": chunk.text,
                    "metadata": {
                        "source": chunk.parent_uri,
                        "chunk_index": chunk.chunk_index,
                        "token_span": f"{chunk.token_span[0]}:{chunk.token_span[1]}",
                    },
                }
                out.write(json.dumps(row, ensure_ascii=False) + "\n")
                n_chunks += 1
    summary = {"documents": len(docs), "chunks": n_chunks, "output": args.output}
    _emit(summary) if args.json else print(f"wrote {n_chunks} chunks from {len(docs)} documents to {args.output}")
    return 0


def cmd_store_ingest(args) -> int:
    schema = [s for s in args.schema.split(",") if s]
    n = store.ingest_jsonl(args.input, args.output, schema, overwrite=args.overwrite)
    _emit({"records": n, "output": args.output}) if args.json else print(f"stored {n} records in {args.output}")
    return 0


def _field_texts(path: Path, field: str) -> list[str]:
    with open(path, "rb") as fh:
        is_store = fh.read(4) == b"FCS1"
    if is_store:
        with store.open_store(path) as reader:
            return [doc.fields.get(field, "") for doc in reader]
    return [str(row.get(field, "")) for row in _read_jsonl(path)]


def cmd_encode(args) -> int:
    spec = EncoderSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    if args.seed is not None:
        spec = EncoderSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    texts = _field_texts(Path(args.input), args.field)
    matrix = Encoder(spec).encode_batch(texts, workers=args.workers)
    matrix.astype("<f4").tofile(args.output)
    summary = {"rows": len(texts), "dimension": spec.dimension, "output": args.output}
    _emit(summary) if args.json else print(f"encoded {len(texts)} rows of dimension {spec.dimension} to {args.output}")
    return 0


def _load_embeddings(path: str, dim: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if dim < 1 or raw.size % dim:
        raise ValueError(f"{path}: {raw.size} floats is not a whole number of rows of dimension {dim}")
    return raw.reshape(-1, dim)


def cmd_index_build(args) -> int:
    kind = "sparse" if args.type in ("bm25", "sparse") else args.type
    paths = args.paths
    if kind == "sparse":
        if len(paths) != 2:
            raise _UsageError("index build --type bm25 needs STORE and OUT")
        with store.open_store(paths[0]) as reader:
            index = sparse.build_sparse(reader, args.field)
        detail = {"documents": index.N}
    else:
        if len(paths) != 1 or not args.emb or not args.dim:
            raise _UsageError(f"index build --type {kind} needs --emb, --dim and OUT")
        vectors = _load_embeddings(args.emb, args.dim)
        if kind == "flat":
            index = dense.build_flat(vectors, args.metric)
            detail = {"vectors": len(vectors)}
        else:
            if args.auto_size:
                params = dense.size_ivfpq(len(vectors), args.dim, args.metric)
            elif args.nlist and args.m:
                nprobe = args.nprobe or max(1, min(args.nlist, round(args.nlist / 8)))
                params = dense.IvfPqParams(args.nlist, nprobe, args.m, args.nbits, args.metric)
            else:
                raise _UsageError("index build --type ivfpq needs --auto-size or both --nlist and --m")
            index = dense.build_ivfpq(vectors, params, seed=0 if args.seed is None else args.seed)
            detail = {"vectors": len(vectors), "nlist": params.nlist, "nprobe": params.nprobe, "m": params.m, "nbits": params.nbits}
    out = paths[-1]
    build_id = save_index(index, out, seed=args.seed)
    summary = {"type": kind, "output": out, "build_id": build_id, **detail}
    if args.json:
        _emit(summary)
    else:
        print(f"built {kind} index {out} (build {build_id}): " + ", ".join(f"{k}={v}" for k, v in detail.items()))
    return 0


def _pipeline(args):
    cfg = load_config(args.config)
    if args.log_level is None:
        configure_logging(cfg.log_level)
    return cfg


def cmd_search(args) -> int:
    cfg = _pipeline(args)
    retriever = cfg.build_retriever()
    try:
        cache = None if args.no_cache else cfg.open_cache()
        hit = False
        if cache is not None:
            contexts, hit = retriever.cached_retrieve(cache, args.query, args.k)
            log.info("cache %s", "hit" if hit else "miss")
        else:
            contexts = retriever.retrieve(args.query, args.k)
        if cfg.retriever.refine is not None and not args.no_refine:
            contexts = cfg.retriever.refine.apply(contexts)
    finally:
        retriever.close()
    if args.json:
        _emit({"query": args.query, "fingerprint": retriever.fingerprint, "cache_hit": hit, "results": [c.to_dict() for c in contexts]})
        return 0
    for c in contexts:
        snippet = " ".join(c.text.split())[:100]
        print(f"{c.rank:>3}  doc {c.doc_id:<8} {c.fused_score:.6f}  {snippet}")
    return 0


def cmd_web_fetch(args) -> int:
    policy = web.DownloadPolicy(
        timeout_ms=args.timeout_ms,
        retries=args.retries,
        max_bytes=args.max_bytes,
        rate_per_host=args.rate if args.rate > 0 else None,
        respect_robots=not args.ignore_robots,
    )
    retriever = web.SimpleWebRetriever(web.load_seeker(args.seeker), web.Downloader(policy), args.concurrency)
    contexts, failures = retriever.retrieve_with_log(args.query, args.k)
    with open(args.out, "w", encoding="utf-8") as fh:
        for c in contexts:
            row = {"url": c.url, "title": c.title, "text": c.text, "rank": c.rank, "seek_rank": c.seek_rank}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    for f in failures:
        print(f"skipped {f.url}: {f.error}", file=sys.stderr)
    summary = {"pages": len(contexts), "failed": len(failures), "output": args.out}
    _emit(summary) if args.json else print(f"wrote {len(contexts)} pages to {args.out} ({len(failures)} failed)")
    return 0


def _finish_report(report: evaluation.EvalReport, args) -> int:
    if args.report:
        report.save(args.report)
    sys.stdout.write(report.to_json() if args.json else report.to_table())
    return 0


def cmd_eval_retrieval(args) -> int:
    cfg = _pipeline(args)
    dataset = evaluation.load_dataset(args.dataset)
    retriever = cfg.build_retriever()
    try:
        report = evaluation.evaluate_retrieval(retriever, dataset, args.k, record_timing=args.timing)
    finally:
        retriever.close()
    return _finish_report(report, args)


def cmd_eval_generation(args) -> int:
    report = evaluation.evaluate_generation(args.pred, evaluation.load_dataset(args.dataset))
    return _finish_report(report, args)


def _read_queries(path: str) -> list[str]:
    out = []
    for row in _read_jsonl(path):
        if isinstance(row, str):
            out.append(row)
        elif isinstance(row, dict) and ("query" in row or "question" in row):
            out.append(str(row.get("query", row.get("question"))))
        else:
            raise ValueError(f"{path}: each line must be a string or have a 'query' or 'question' key")
    return out


def cmd_bench(args) -> int:
    cfg = _pipeline(args)
    queries = _read_queries(args.queries)
    retriever = cfg.build_retriever()
    try:
        report = bench.run_bench(
            retriever,
            queries,
            args.batch_size,
            args.sample_interval_ms,
            k=args.k,
            tokenizer_parallelism=args.tokenizer_parallelism == "on",
        )
    finally:
        retriever.close()
    if args.report:
        report.save(args.report)
    if args.json:
        sys.stdout.write(report.to_json())
    else:
        print(
            f"{report.completed_queries}/{report.query_count} queries, batch {report.batch_size}: "
            f"{report.avg_wall_clock_ms_per_query:.3f} ms/query, cpu {report.total_cpu_time_s:.3f} s, "
            f"mem avg {report.avg_memory_bytes / 2**20:.1f} MiB, peak {report.peak_memory_bytes / 2**20:.1f} MiB"
        )
    if not report.valid:
        print(f"error: benchmark aborted: {report.error}", file=sys.stderr)
        return 2
    return 0


def cmd_bench_compare(args) -> int:
    a, b = bench.ResourceReport.load(args.a), bench.ResourceReport.load(args.b)
    cmp = bench.compare_reports(a, b, Path(args.a).stem, Path(args.b).stem)
    if args.out:
        Path(args.out).write_text(cmp.to_json(), encoding="utf-8")
    sys.stdout.write(cmp.to_json() if args.json else cmp.to_markdown())
    return 0


# ------------------------------------------------------------------ parser


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--seed", type=int, default=None, help="seed for reproducible builds")
    common.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), default=None)

    parser = _Parser(prog="flexkit", description="Retrieval toolkit: ingest, index, search, evaluate and benchmark.")
    sub = parser.add_subparsers(dest="command", metavar=f"{{{_COMMANDS}}}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("preprocess", parents=[common], help="parse and chunk raw documents into JSONL")
    p.add_argument("--input", required=True, help="directory or file (a .jsonl of fetched web pages is accepted)")
    p.add_argument("--format", choices=preprocess.FORMATS, default="plain")
    p.add_argument("--chunker", choices=("fixed", "sentence"), default="sentence")
    p.add_argument("--size", type=_positive, default=128)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--rules", nargs="*", default=[], help="e.g. dedupe_exact drop_if_shorter_than:5")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("store", help="document store operations")
    ssub = p.add_subparsers(dest="store_command", metavar="{ingest}", parser_class=_Parser)
    ssub.required = True
    p = ssub.add_parser("ingest", parents=[common], help="build a store from JSONL")
    p.add_argument("--schema", default="title,text", help="comma-separated field names")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_store_ingest)

    p = sub.add_parser("encode", parents=[common], help="embed one field of a corpus")
    p.add_argument("--spec", required=True, help="encoder spec JSON")
    p.add_argument("--input", required=True, help="corpus JSONL or store file")
    p.add_argument("--field", default="text")
    p.add_argument("--output", required=True, help="raw little-endian float32 rows")
    p.add_argument("--workers", type=_positive, default=1)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="index operations")
    isub = p.add_subparsers(dest="index_command", metavar="{build}", parser_class=_Parser)
    isub.required = True
    p = isub.add_parser("build", parents=[common], help="build a sparse or dense index")
    p.add_argument("--type", required=True, choices=("bm25", "sparse", "flat", "ivfpq"))
    p.add_argument("--field", default="text", help="store field for bm25")
    p.add_argument("--emb", help="embedding file for dense indexes")
    p.add_argument("--dim", type=_positive)
    p.add_argument("--metric", choices=("inner_product", "l2"), default="inner_product")
    p.add_argument("--auto-size", action="store_true", help="derive IVF-PQ parameters from the data size")
    p.add_argument("--nlist", type=_positive)
    p.add_argument("--nprobe", type=_positive)
    p.add_argument("--m", type=_positive)
    p.add_argument("--nbits", type=int, choices=(4, 8), default=8)
    p.add_argument("paths", nargs="+", metavar="[STORE] OUT")
    p.set_defaults(func=cmd_index_build)

    p = sub.add_parser("search", parents=[common], help="query a configured retriever")
    p.add_argument("--config", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=_positive, default=None)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--no-refine", action="store_true", help="skip the config's repack/squeeze step")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("web", help="web retrieval")
    wsub = p.add_subparsers(dest="web_command", metavar="{fetch}", parser_class=_Parser)
    wsub.required = True
    p = wsub.add_parser("fetch", parents=[common], help="seek, download and read web pages")
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=_positive, default=5)
    p.add_argument("--seeker", required=True, help="fixture map or search-API description (JSON)")
    p.add_argument("--out", required=True)
    p.add_argument("--timeout-ms", type=_positive, default=10_000)
    p.add_argument("--retries", type=_positive, default=3)
    p.add_argument("--max-bytes", type=int, default=5_000_000)
    p.add_argument("--rate", type=float, default=1.0, help="requests per second per host; 0 disables")
    p.add_argument("--concurrency", type=_positive, default=4)
    p.add_argument("--ignore-robots", action="store_true")
    p.set_defaults(func=cmd_web_fetch)

    p = sub.add_parser("eval", help="evaluation")
    esub = p.add_subparsers(dest="eval_command", metavar="{retrieval,generation}", parser_class=_Parser)
    esub.required = True
    p = esub.add_parser("retrieval", parents=[common], help="Succ, recall and MRR of a retriever")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("-k", type=_positive, default=10)
    p.add_argument("--report")
    p.add_argument("--timing", action="store_true", help="include wall-clock timing in the report")
    p.set_defaults(func=cmd_eval_retrieval)
    p = esub.add_parser("generation", parents=[common], help="EM and F1 of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval_generation)

    p = sub.add_parser("bench", parents=[common], help="resource benchmark (`bench compare A B` to compare)")
    p.add_argument("--config", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--batch-size", type=_positive, default=1)
    p.add_argument("--sample-interval-ms", type=float, default=50.0)
    p.add_argument("--tokenizer-parallelism", choices=("on", "off"), default="on")
    p.add_argument("-k", type=_positive, default=None)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)
    return parser


def _compare_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flexkit bench compare", description="Compare two bench reports (ratios a/b).")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="also write the JSON comparison here")
    p.add_argument("--json", action="store_true")
    p.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"), default=None)
    p.set_defaults(func=cmd_bench_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv[:2] == ["bench", "compare"]:
            args = _compare_parser().parse_args(argv[2:])
        else:
            args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    if args.log_level:
        configure_logging(args.log_level)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"flexkit: error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: invalid config {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every other failure is a runtime error
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
