"""Web retrieval in three roles: a seeker finds URLs for a query, a
downloader fetches them politely, and a reader turns pages into text.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
import urllib.robotparser
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from email.message import Message
from pathlib import Path
from typing import Literal, Mapping, Protocol, Sequence

from .preprocess import ParsedDocument, ParseError, parse

log = logging.getLogger(__name__)


class WebError(Exception):
    pass


class SeekError(WebError):
    pass


class DownloadError(WebError):
    pass


@dataclass(frozen=True)
class SeekResult:
    url: str
    snippet: str | None
    rank: int


@dataclass(frozen=True)
class WebResource:
    url: str
    status_code: int
    content_type: str
    body_bytes: bytes
    fetched_at: float
    truncated: bool = False
    final_url: str | None = None

    @property
    def ok(self) -> bool:
        return 200 <= self.status_code < 300


# ------------------------------------------------------------------ seekers


class Seeker(Protocol):
    def raw_results(self, query: str, k: int) -> list[tuple[str, str | None]]: ...


def _dedupe(pairs: Sequence[tuple[str, str | None]], k: int) -> list[SeekResult]:
    seen: set[str] = set()
    out: list[SeekResult] = []
    for url, snippet in pairs:
        if url in seen:
            continue
        seen.add(url)
        out.append(SeekResult(url, snippet, len(out) + 1))
        if len(out) == k:
            break
    return out


def seek(seeker: Seeker, query: str, k: int) -> list[SeekResult]:
    """At most ``k`` results, backend order kept, repeated URLs dropped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not query.strip():
        return []
    return _dedupe(seeker.raw_results(query, k), k)


class FixtureSeeker:
    """Query -> URL list mapping, usually loaded from a JSON file."""

    def __init__(self, mapping: Mapping[str, Sequence[str]]) -> None:
        self.mapping = {q: list(urls) for q, urls in mapping.items()}

    @classmethod
    def load(cls, path: str | Path) -> FixtureSeeker:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise SeekError(f"cannot read seeker fixture {path}: {exc}") from None
        if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
            raise SeekError(f"{path}: expected a JSON object mapping queries to URL lists")
        return cls(data)

    def raw_results(self, query: str, k: int) -> list[tuple[str, str | None]]:
        return [(u, None) for u in self.mapping.get(query, [])]

    def seek(self, query: str, k: int) -> list[SeekResult]:
        return seek(self, query, k)


class SearchApiSeeker:
    """Client for a JSON search endpoint queried with ``GET ?q=...&limit=k``.

    ``style="results"`` expects ``{"results": [{"url", "snippet"?}]}``;
    ``style="opensearch"`` expects the ``[query, titles, descriptions, urls]``
    array that wiki-style search APIs return.
    """

    def __init__(
        self,
        endpoint: str,
        style: Literal["results", "opensearch"] = "results",
        query_param: str = "q",
        limit_param: str = "limit",
        extra_params: Mapping[str, str] | None = None,
        timeout_s: float = 10.0,
    ) -> None:
        if style not in ("results", "opensearch"):
            raise ValueError(f"unknown response style {style!r}")
        self.endpoint = endpoint
        self.style = style
        self.query_param = query_param
        self.limit_param = limit_param
        self.extra_params = dict(extra_params or {})
        self.timeout_s = timeout_s

    @classmethod
    def from_dict(cls, d: Mapping) -> SearchApiSeeker:
        return cls(**{k: v for k, v in d.items() if k != "kind"})

    def raw_results(self, query: str, k: int) -> list[tuple[str, str | None]]:
        params = {**self.extra_params, self.query_param: query, self.limit_param: str(k)}
        sep = "&" if "?" in self.endpoint else "?"
        url = self.endpoint + sep + urllib.parse.urlencode(params)
        try:
            with urllib.request.urlopen(url, timeout=self.timeout_s) as resp:
                data = json.loads(resp.read())
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise SeekError(f"search backend {self.endpoint} unreachable: {exc}") from None
        except ValueError as exc:
            raise SeekError(f"search backend {self.endpoint} returned invalid JSON: {exc}") from None
        try:
            if self.style == "opensearch":
                _, _titles, descriptions, urls = data
                descriptions = list(descriptions) + [None] * (len(urls) - len(descriptions))
                return [(str(u), d or None) for u, d in zip(urls, descriptions)]
            return [(str(r["url"]), r.get("snippet")) for r in data["results"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SeekError(f"malformed response from {self.endpoint}: {exc!r}") from None

    def seek(self, query: str, k: int) -> list[SeekResult]:
        return seek(self, query, k)


def load_seeker(path: str | Path) -> FixtureSeeker | SearchApiSeeker:
    """A JSON file with ``"kind": "search_api"`` configures an API seeker;
    anything else is read as a fixture mapping."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and data.get("kind") == "search_api":
        return SearchApiSeeker.from_dict(data)
    return FixtureSeeker.load(path)


# --------------------------------------------------------------- downloader


@dataclass(frozen=True)
class DownloadPolicy:
    timeout_ms: int = 10_000
    retries: int = 3
    max_bytes: int = 5_000_000
    rate_per_host: float | None = 1.0  # requests per second; None disables
    backoff_ms: int = 250
    max_redirects: int = 5
    respect_robots: bool = True
    user_agent: str = "flexkit-webreader/0.1"

    def __post_init__(self) -> None:
        if self.retries < 1:
            raise ValueError("retries must be >= 1")
        if self.max_bytes < 0 or self.timeout_ms <= 0:
            raise ValueError("max_bytes must be >= 0 and timeout_ms > 0")
        if self.rate_per_host is not None and self.rate_per_host <= 0:
            raise ValueError("rate_per_host must be > 0")


class _NoRedirect(urllib.request.HTTPRedirectHandler):
    def redirect_request(self, req, fp, code, msg, headers, newurl):
        return None


@dataclass
class _HostState:
    lock: threading.Lock = field(default_factory=threading.Lock)
    last: float | None = None
    robots: urllib.robotparser.RobotFileParser | None = None
    robots_checked: bool = False


class Downloader:
    """HTTP GET with manual redirect following, retries and per-host pacing.

    Requests to one host are serialised and spaced at least
    ``1 / rate_per_host`` seconds apart.  ``request_log`` records
    ``(monotonic_time, url)`` for every request sent.
    """

    def __init__(self, policy: DownloadPolicy | None = None) -> None:
        self.policy = policy or DownloadPolicy()
        self._opener = urllib.request.build_opener(_NoRedirect)
        self._hosts: dict[str, _HostState] = {}
        self._hosts_lock = threading.Lock()
        self.request_log: list[tuple[float, str]] = []

    def _host(self, url: str) -> _HostState:
        netloc = urllib.parse.urlsplit(url).netloc.lower()
        with self._hosts_lock:
            return self._hosts.setdefault(netloc, _HostState())

    def _send(self, url: str, state: _HostState):
        """One paced request; caller holds ``state.lock``."""
        rate = self.policy.rate_per_host
        if rate is not None and state.last is not None:
            wait = state.last + 1.0 / rate - time.monotonic()
            if wait > 0:
                time.sleep(wait)
        state.last = time.monotonic()
        self.request_log.append((state.last, url))
        req = urllib.request.Request(url, headers={"User-Agent": self.policy.user_agent})
        try:
            return self._opener.open(req, timeout=self.policy.timeout_ms / 1000)
        except urllib.error.HTTPError as exc:
            return exc  # also a response object

    def _allowed(self, url: str, state: _HostState) -> bool:
        if not self.policy.respect_robots:
            return True
        if not state.robots_checked:
            parts = urllib.parse.urlsplit(url)
            robots_url = f"{parts.scheme}://{parts.netloc}/robots.txt"
            parser = urllib.robotparser.RobotFileParser(robots_url)
            try:
                with self._send(robots_url, state) as resp:
                    if resp.status == 200:
                        parser.parse(resp.read(self.policy.max_bytes).decode("utf-8", "replace").splitlines())
                    else:
                        parser.parse([])  # missing robots.txt allows everything
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError):
                parser.parse([])
            state.robots = parser
            state.robots_checked = True
        return state.robots.can_fetch(self.policy.user_agent, url)

    def _fetch_once(self, url: str) -> tuple[int, Message, bytes, bool, str]:
        current = url
        for _ in range(self.policy.max_redirects + 1):
            scheme = urllib.parse.urlsplit(current).scheme
            if scheme not in ("http", "https"):
                raise DownloadError(f"unsupported URL scheme {scheme!r} in {current}")
            state = self._host(current)
            with state.lock:
                if not self._allowed(current, state):
                    raise DownloadError(f"{current} is disallowed by robots.txt")
                with self._send(current, state) as resp:
                    status, headers = resp.status, resp.headers
                    if status in (301, 302, 303, 307, 308) and headers.get("Location"):
                        current = urllib.parse.urljoin(current, headers["Location"])
                        continue
                    body = resp.read(self.policy.max_bytes + 1)
            truncated = len(body) > self.policy.max_bytes
            return status, headers, body[: self.policy.max_bytes], truncated, current
        raise DownloadError(f"too many redirects (> {self.policy.max_redirects}) from {url}")

    def download(self, url: str) -> WebResource:
        """Fetch ``url``.

        Server errors and timeouts are retried with exponential backoff.  A
        final non-2xx status comes back as a resource with an empty body;
        running out of retries on timeouts raises :class:`DownloadError`.
        """
        scheme = urllib.parse.urlsplit(url).scheme
        if scheme not in ("http", "https"):
            raise DownloadError(f"unsupported URL scheme {scheme!r} in {url}")
        last_exc: Exception | None = None
        result = None
        for attempt in range(self.policy.retries):
            if attempt:
                time.sleep(self.policy.backoff_ms / 1000 * 2 ** (attempt - 1))
            try:
                result = self._fetch_once(url)
            except DownloadError:
                raise
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
                last_exc = exc
                result = None
                continue
            if result[0] < 500:
                break
        if result is None:
            raise DownloadError(f"{url}: failed after {self.policy.retries} attempts: {last_exc}")
        status, headers, body, truncated, final = result
        ok = 200 <= status < 300
        return WebResource(
            url=url,
            status_code=status,
            content_type=headers.get("Content-Type", ""),
            body_bytes=body if ok else b"",
            fetched_at=time.time(),
            truncated=truncated and ok,
            final_url=final,
        )


def download(url: str, policy: DownloadPolicy | None = None) -> WebResource:
    return Downloader(policy).download(url)


# ------------------------------------------------------------------- reader


_FORMATS = {"text/html": "html", "application/xhtml+xml": "html", "text/plain": "plain", "text/markdown": "markdown"}


def read_web(resource: WebResource) -> ParsedDocument:
    """Extract text from an HTML, plain-text or markdown resource."""
    msg = Message()
    msg["Content-Type"] = resource.content_type or "text/html"
    mime = msg.get_content_type()
    fmt = _FORMATS.get(mime)
    if fmt is None:
        raise ParseError(f"{resource.url}: unsupported content type {mime!r}")
    if not resource.ok:
        raise ParseError(f"{resource.url}: HTTP {resource.status_code} has no content")
    charset = msg.get_content_charset() or "utf-8"
    try:
        text = resource.body_bytes.decode(charset)
    except (LookupError, UnicodeDecodeError) as exc:
        raise ParseError(f"{resource.url}: cannot decode body as {charset}: {exc}") from None
    return parse(text, fmt, source_uri=resource.url)


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class WebContext:
    url: str
    text: str
    title: str | None
    rank: int  # dense rank among successful pages
    seek_rank: int


@dataclass(frozen=True)
class WebFailure:
    url: str
    seek_rank: int
    error: str


class SimpleWebRetriever:
    def __init__(self, seeker: Seeker, downloader: Downloader | None = None, max_concurrency: int = 4) -> None:
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        self.seeker = seeker
        self.downloader = downloader or Downloader()
        self.max_concurrency = max_concurrency

    def retrieve_with_log(self, query: str, k: int) -> tuple[list[WebContext], list[WebFailure]]:
        hits = seek(self.seeker, query, k)

        def fetch(hit: SeekResult):
            try:
                return read_web(self.downloader.download(hit.url))
            except (WebError, ParseError) as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.max_concurrency) as pool:
            outcomes = list(pool.map(fetch, hits))
        contexts: list[WebContext] = []
        failures: list[WebFailure] = []
        for hit, out in zip(hits, outcomes):
            if isinstance(out, Exception):
                log.warning("skipping %s: %s", hit.url, out)
                failures.append(WebFailure(hit.url, hit.rank, str(out)))
            else:
                contexts.append(WebContext(hit.url, out.text, out.title, len(contexts) + 1, hit.rank))
        return contexts, failures

    def retrieve(self, query: str, k: int) -> list[WebContext]:
        return self.retrieve_with_log(query, k)[0]


def web_retrieve(retriever: SimpleWebRetriever, query: str, k: int) -> list[WebContext]:
    return retriever.retrieve(query, k)
