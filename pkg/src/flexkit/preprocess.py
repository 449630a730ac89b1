"""Document parsing, chunking and corpus-level filtering.

The pipeline runs parse -> chunk -> knowledge_preprocess.  Token counts use
:func:`flexkit.text.tokenize`, the same tokenizer as the BM25 index.
"""

from __future__ import annotations

import dataclasses
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from html.parser import HTMLParser
from typing import Any, Literal

from .text import token_spans, tokenize

Format = Literal["html", "markdown", "plain"]
FORMATS = ("html", "markdown", "plain")


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class ParsedDocument:
    source_uri: str
    text: str
    title: str | None = None
    format: Format = "plain"


@dataclass(frozen=True)
class Chunk:
    parent_uri: str
    chunk_index: int
    text: str
    token_span: tuple[int, int]


# --------------------------------------------------------------------- parsing

_DROP_TAGS = frozenset(
    {"script", "style", "nav", "noscript", "template", "footer", "aside", "iframe", "svg", "head"}
)
_BLOCK_TAGS = frozenset(
    """
    address article blockquote body br caption dd details div dl dt fieldset
    figcaption figure form h1 h2 h3 h4 h5 h6 header hr html li main ol p pre
    section summary table tbody td tfoot th thead tr ul
    """.split()
)
_VOID_TAGS = frozenset(
    {"area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "source", "track", "wbr"}
)


class _TextExtractor(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.lines: list[str] = []
        self._current: list[str] = []
        self._drop_depth = 0
        self._in_title = False
        self._title: list[str] = []
        self._pre_depth = 0

    def _flush(self) -> None:
        line = "".join(self._current)
        if self._pre_depth:
            for part in line.split("\n"):
                if part.strip():
                    self.lines.append(part.rstrip())
        else:
            line = " ".join(line.split())
            if line:
                self.lines.append(line)
        self._current = []

    def handle_starttag(self, tag: str, attrs) -> None:
        if tag == "title":
            self._in_title = True
            return
        if tag in _DROP_TAGS:
            if tag not in _VOID_TAGS:
                self._drop_depth += 1
            return
        if self._drop_depth:
            return
        if tag in _BLOCK_TAGS:
            self._flush()
        if tag == "pre":
            self._pre_depth += 1

    def handle_startendtag(self, tag: str, attrs) -> None:
        if not self._drop_depth and tag in _BLOCK_TAGS:
            self._flush()

    def handle_endtag(self, tag: str) -> None:
        if tag == "title":
            self._in_title = False
            return
        if tag in _DROP_TAGS:
            self._drop_depth = max(0, self._drop_depth - 1)
            return
        if self._drop_depth:
            return
        if tag in _BLOCK_TAGS:
            self._flush()
        if tag == "pre":
            self._pre_depth = max(0, self._pre_depth - 1)

    def handle_data(self, data: str) -> None:
        if self._in_title:
            self._title.append(data)
        elif not self._drop_depth:
            self._current.append(data)

    def close(self) -> None:
        super().close()
        self._flush()

    @property
    def title(self) -> str | None:
        title = " ".join("".join(self._title).split())
        return title or None


def extract_html(html: str) -> tuple[str, str | None]:
    """Return ``(text, title)`` for an HTML string.

    Blocks become lines, inline whitespace is collapsed, and script, style,
    navigation and footer subtrees are dropped along with ``<head>``.
    """
    parser = _TextExtractor()
    parser.feed(html)
    parser.close()
    return "\n".join(parser.lines), parser.title


_EXCESS_BLANKS = re.compile(r"\n(?:[ \t]*\n){3,}")


def normalize_text(text: str) -> str:
    """CRLF/CR to LF, collapse runs of more than two blank lines, strip ends."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    text = _EXCESS_BLANKS.sub("\n\n", text)
    return text.strip()


def _markdown_title(text: str) -> str | None:
    for line in text.splitlines():
        m = re.match(r"#\s+(.+?)\s*#*\s*$", line)
        if m:
            return m.group(1)
    return None


def parse(data: bytes | str, format: str, source_uri: str = "") -> ParsedDocument:
    if format not in FORMATS:
        raise ParseError(f"unsupported format {format!r}; expected one of {FORMATS}")
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{source_uri or 'input'} is not valid UTF-8: {exc}") from None
    else:
        text = data
    text = text.removeprefix("\ufeff")

    title = None
    if format == "html":
        text, title = extract_html(text)
    elif format == "markdown":
        title = _markdown_title(text)
    text = normalize_text(text)
    if not text:
        raise ParseError(f"{source_uri or 'input'}: no text content")
    return ParsedDocument(source_uri=source_uri, text=text, title=title, format=format)


# -------------------------------------------------------------------- chunking


def chunk_fixed(text: str, size: int, overlap: int = 0, parent_uri: str = "") -> list[Chunk]:
    """Windows of ``size`` tokens advancing by ``size - overlap``.

    >>> [c.token_span for c in chunk_fixed("a b c d e f g h i j", 4, 1)]
    [(0, 4), (3, 7), (6, 10)]
    """
    if size <= 0:
        raise ValueError("size must be positive")
    if not 0 <= overlap < size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < size, got {overlap} with size {size}")
    spans = token_spans(text)
    return _fixed_windows(text, spans, 0, len(spans), size, overlap, parent_uri, 0)


def _fixed_windows(text, spans, lo, hi, size, overlap, parent_uri, first_index) -> list[Chunk]:
    chunks = []
    stride = size - overlap
    start = lo
    while start < hi:
        end = min(start + size, hi)
        chunks.append(
            Chunk(
                parent_uri=parent_uri,
                chunk_index=first_index + len(chunks),
                text=text[spans[start][0] : spans[end - 1][1]],
                token_span=(start, end),
            )
        )
        if end == hi:
            break
        start += stride
    return chunks


_SENTENCE_BREAK = re.compile(r"(?<=[.!?])\s+|\n\s+")


def _sentences(text: str) -> list[tuple[int, int]]:
    out, pos = [], 0
    for m in _SENTENCE_BREAK.finditer(text):
        if m.start() > pos:
            out.append((pos, m.start()))
        pos = m.end()
    if pos < len(text):
        out.append((pos, len(text)))
    return out


def chunk_sentence(text: str, max_tokens: int, parent_uri: str = "") -> list[Chunk]:
    """Greedily pack whole sentences into chunks of at most ``max_tokens``.

    A sentence longer than ``max_tokens`` is cut with :func:`chunk_fixed`
    windows (no overlap) after flushing the chunk being packed.
    """
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    spans = token_spans(text)
    chunks: list[Chunk] = []
    # pending pack: tokens [lo, hi), characters [c_lo, c_hi)
    lo = hi = 0
    c_lo = c_hi = 0

    def flush() -> None:
        if hi > lo:
            chunks.append(Chunk(parent_uri, len(chunks), text[c_lo:c_hi], (lo, hi)))

    tok = 0
    for s_start, s_end in _sentences(text):
        n = 0
        while tok + n < len(spans) and spans[tok + n][0] < s_end:
            n += 1
        if n == 0:
            # punctuation-only fragment; glue it to the pending pack
            if hi > lo:
                c_hi = s_end
            continue
        if n > max_tokens:
            flush()
            chunks.extend(
                _fixed_windows(text, spans, tok, tok + n, max_tokens, 0, parent_uri, len(chunks))
            )
            tok += n
            lo = hi = tok
            continue
        if hi - lo + n > max_tokens:
            flush()
            lo = hi
        if hi == lo:
            c_lo = s_start
        tok += n
        hi = tok
        c_hi = s_end
    flush()
    return chunks


def chunk_document(doc: ParsedDocument, chunker: str, size: int, overlap: int = 0) -> list[Chunk]:
    if chunker == "fixed":
        return chunk_fixed(doc.text, size, overlap, parent_uri=doc.source_uri)
    if chunker == "sentence":
        return chunk_sentence(doc.text, size, parent_uri=doc.source_uri)
    raise ValueError(f"unknown chunker {chunker!r}")


# ---------------------------------------------------------------- knowledge

RULES = ("drop_if_shorter_than", "dedupe_exact", "strip_boilerplate_lines")


def parse_rule(rule: str | tuple[str, Any]) -> tuple[str, int | None]:
    """Accept ``"name"``, ``"name:arg"`` or ``(name, arg)``."""
    if isinstance(rule, str):
        name, _, arg = rule.partition(":")
        value: int | None = int(arg) if arg else None
    else:
        name, value = rule[0], (int(rule[1]) if len(rule) > 1 and rule[1] is not None else None)
    if name not in RULES:
        raise ValueError(f"unknown rule {name!r}; expected one of {RULES}")
    if name != "dedupe_exact" and value is None:
        raise ValueError(f"rule {name!r} needs an integer argument")
    return name, value


def _with_text(item, text: str):
    if isinstance(item, dict):
        return {**item, "text": text}
    return dataclasses.replace(item, text=text)


def _text_of(item) -> str:
    return item["text"] if isinstance(item, dict) else item.text


def knowledge_preprocess(documents: Iterable, rules: Sequence) -> list:
    """Apply filtering rules in order to items carrying a ``text``.

    Items may be dataclasses (:class:`ParsedDocument`, :class:`Chunk`) or
    dicts with a ``"text"`` key.  Order is otherwise preserved.
    """
    parsed = [parse_rule(r) for r in rules]
    docs = list(documents)
    for name, arg in parsed:
        if name == "drop_if_shorter_than":
            docs = [d for d in docs if len(tokenize(_text_of(d))) >= arg]
        elif name == "dedupe_exact":
            seen: set[str] = set()
            kept = []
            for d in docs:
                t = _text_of(d)
                if t not in seen:
                    seen.add(t)
                    kept.append(d)
            docs = kept
        else:
            line_df: Counter[str] = Counter()
            for d in docs:
                line_df.update({ln.strip() for ln in _text_of(d).splitlines() if ln.strip()})
            boiler = {ln for ln, c in line_df.items() if c >= arg}
            stripped = []
            for d in docs:
                lines = [ln for ln in _text_of(d).splitlines() if ln.strip() not in boiler]
                text = "\n".join(lines).strip()
                if text:
                    stripped.append(_with_text(d, text))
            docs = stripped
    return docs
