"""
Reading the web
===============

Seek URLs for a query, download them politely, extract the text and cut it
into chunks.  A local server stands in for the web.
"""

# %%
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from flexkit.preprocess import chunk_document, knowledge_preprocess
from flexkit.web import DownloadPolicy, Downloader, FixtureSeeker, SimpleWebRetriever, read_web

PAGES = {
    "/robots.txt": ("text/plain", "User-agent: *\nDisallow: /private/\n"),
    "/lighthouses": (
        "text/html; charset=utf-8",
        "<html><head><title>Lighthouses</title><script>ads()</script></head><body>"
        "<nav>Home | Topics</nav><h1>Lighthouses</h1>"
        "<p>A lighthouse marks dangerous coastlines. Its lamp is focused by a Fresnel lens.</p>"
        "<p>Keepers once trimmed the wicks every night.</p><footer>Site footer</footer></body></html>",
    ),
    "/fog": ("text/plain", "Fog signals complemented the light when visibility was poor."),
    "/private/notes": ("text/plain", "not for crawlers"),
}


class Handler(BaseHTTPRequestHandler):
    def do_GET(self):
        kind, body = PAGES.get(self.path, ("text/plain", "missing"))
        self.send_response(200 if self.path in PAGES else 404)
        self.send_header("Content-Type", kind)
        self.end_headers()
        self.wfile.write(body.encode())

    def log_message(self, *args):
        pass


server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
threading.Thread(target=server.serve_forever, daemon=True).start()
base = f"http://127.0.0.1:{server.server_address[1]}"

# %%
# A fixture seeker maps queries to URL lists.  The downloader keeps to one
# request per host at a time, waits between requests and honours robots.txt.
seeker = FixtureSeeker({"lighthouse": [base + p for p in ("/lighthouses", "/fog", "/private/notes", "/gone")]})
downloader = Downloader(DownloadPolicy(rate_per_host=20.0, retries=2, backoff_ms=50))
web = SimpleWebRetriever(seeker, downloader)
pages, failures = web.retrieve_with_log("lighthouse", k=5)
for p in pages:
    print(p.rank, p.url[len(base):], repr(p.title), p.text[:60].replace("\n", " | "))
for f in failures:
    print("failed:", f.url[len(base):], "-", f.error)

# %%
# The reader can also be used directly on a downloaded resource.
doc = read_web(downloader.download(base + "/lighthouses"))
print(doc.format, doc.title)
print(doc.text)

# %%
chunks = chunk_document(doc, "sentence", 12)
for c in chunks:
    print(c.chunk_index, c.token_span, c.text.replace("\n", " "))
print(len(knowledge_preprocess(chunks, ["drop_if_shorter_than:5"])), "chunks with at least 5 tokens")
server.shutdown()
