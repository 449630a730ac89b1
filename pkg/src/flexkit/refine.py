"""Deterministic refiners applied to ranked contexts before generation."""

from __future__ import annotations

import dataclasses
from enum import Enum
from typing import Sequence, TypeVar

from .text import token_spans

T = TypeVar("T")


class RepackStrategy(str, Enum):
    AS_IS = "as_is"
    REVERSE = "reverse"
    SANDWICH = "sandwich"


def repack(contexts: Sequence[T], strategy: RepackStrategy | str = RepackStrategy.AS_IS) -> list[T]:
    """Reorder contexts given in rank order.

    ``reverse`` puts the best context last.  ``sandwich`` places the best
    contexts at both ends: ranks 1, 3, 5, ... forward, then the even ranks
    backward, so five contexts come out as ranks [1, 3, 5, 4, 2].
    """
    strategy = RepackStrategy(strategy)
    items = list(contexts)
    if strategy is RepackStrategy.AS_IS:
        return items
    if strategy is RepackStrategy.REVERSE:
        return items[::-1]
    return items[0::2] + items[1::2][::-1]


def _text(ctx) -> str:
    return ctx if isinstance(ctx, str) else ctx.text


def _with_text(ctx, text: str):
    if isinstance(ctx, str):
        return text
    return dataclasses.replace(ctx, text=text)


def token_count(text: str) -> int:
    return len(token_spans(text))


def squeeze(contexts: Sequence[T], token_budget: int) -> list[T]:
    """Keep contexts in order until ``token_budget`` tokens are used.

    The first context that does not fit is cut after the token that fills
    the budget exactly; everything after it is dropped.  Items are strings
    or dataclasses with a ``text`` field.
    """
    if token_budget < 0:
        raise ValueError("token_budget must be >= 0")
    out: list[T] = []
    remaining = token_budget
    for ctx in contexts:
        text = _text(ctx)
        spans = token_spans(text)
        if len(spans) <= remaining:
            out.append(ctx)
            remaining -= len(spans)
            continue
        if remaining > 0:
            out.append(_with_text(ctx, text[: spans[remaining - 1][1]]))
        break
    return out


@dataclasses.dataclass(frozen=True)
class RefineSpec:
    strategy: RepackStrategy = RepackStrategy.AS_IS
    token_budget: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", RepackStrategy(self.strategy))
        if self.token_budget is not None and self.token_budget < 0:
            raise ValueError("token_budget must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> RefineSpec:
        return cls(strategy=d.get("strategy", "as_is"), token_budget=d.get("token_budget"))

    def to_dict(self) -> dict:
        return {"strategy": self.strategy.value, "token_budget": self.token_budget}

    def apply(self, contexts: Sequence[T]) -> list[T]:
        """Squeeze in rank order first, then repack what survived."""
        kept = list(contexts) if self.token_budget is None else squeeze(contexts, self.token_budget)
        return repack(kept, self.strategy)
