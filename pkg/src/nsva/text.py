"""Caption tokenisation shared by the vocabulary and the metrics.

Lowercase, split on whitespace and punctuation.  Distance tokens such as
``26'`` keep their apostrophe and stay whole.
"""

from __future__ import annotations

import re

_TOKEN = re.compile(r"\d+'|[a-z0-9]+(?:'[a-z]+)?")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def is_distance_token(token: str) -> bool:
    return len(token) > 1 and token.endswith("'") and token[:-1].isdigit()


def distance_token(tokens: list[str]) -> str | None:
    for tok in tokens:
        if is_distance_token(tok):
            return tok
    return None
