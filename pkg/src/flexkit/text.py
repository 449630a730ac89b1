"""Tokenization shared by the sparse index, chunkers, encoders and refiners.

One tokenizer is used everywhere so that "a token" means the same thing when
a chunk is sized, a document is indexed, or a context is squeezed.
"""

from __future__ import annotations

import re
from collections.abc import Iterable

_TOKEN_RE = re.compile(r"[^\W_]+")

# Small English list; only used when stop-word removal is requested.
STOPWORDS = frozenset(
    """
    a about above after again against all am an and any are as at be because
    been before being below between both but by can did do does doing down
    during each few for from further had has have having he her here hers
    herself him himself his how i if in into is it its itself just me more
    most my myself no nor not now of off on once only or other our ours
    ourselves out over own same she should so some such than that the their
    theirs them themselves then there these they this those through to too
    under until up very was we were what when where which while who whom why
    will with you your yours yourself yourselves
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on every non-alphanumeric character.

    >>> tokenize("The CAT sat.")
    ['the', 'cat', 'sat']
    >>> tokenize("e-mail 2024")
    ['e', 'mail', '2024']
    """
    # Split before lowercasing: lower() changes the length of a few code
    # points, and token_spans() must describe exactly these tokens.
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character ``(start, end)`` offsets of each token of :func:`tokenize`."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def s_stem(token: str) -> str:
    """Harman's "S" stemmer: strips common English plural endings only."""
    if len(token) > 3 and token.endswith("ies") and not token.endswith(("eies", "aies")):
        return token[:-3] + "y"
    if len(token) > 3 and token.endswith("es") and not token.endswith(("aes", "ees", "oes")):
        return token[:-1]
    if len(token) > 2 and token.endswith("s") and not token.endswith(("us", "ss")):
        return token[:-1]
    return token


def analyze(text: str, *, stopwords: bool = False, stem: bool = False) -> list[str]:
    """Tokenize, then optionally drop stop words and apply :func:`s_stem`."""
    tokens: Iterable[str] = tokenize(text)
    if stopwords:
        tokens = (t for t in tokens if t not in STOPWORDS)
    if stem:
        tokens = (s_stem(t) for t in tokens)
    return list(tokens)
