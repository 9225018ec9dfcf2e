"""Beam search over an abstract step function.

A *step function* maps a batch of prefixes (lists of label indices, without
BOS) to a ``(len(prefixes), V)`` array of next-token log-probabilities.
Keeping the search independent of the model lets tests drive it with
hand-built probability tables.

Ranking uses the length-normalised score ``cumulative log-prob / token
count`` (the EOS token counts).  Ties are broken by the token sequence,
compared lexicographically by id, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    finished: bool = False

    @property
    def logp(self) -> float:
        return float(sum(self.logprobs))

    @property
    def score(self) -> float:
        return self.logp / len(self.tokens) if self.tokens else 0.0

    def sort_key(self):
        return (-self.score, self.tokens)


@dataclass
class Beam:
    width: int
    hypotheses: list[Hypothesis] = field(default_factory=lambda: [Hypothesis((), ())])
    finished: list[Hypothesis] = field(default_factory=list)

    @property
    def active(self) -> list[Hypothesis]:
        return self.hypotheses


def beam_search(step: StepFn, eos: int, width: int = 5, max_len: int = 30) -> Hypothesis:
    """Return the best finished hypothesis, or the best unfinished one if none finished.

    The returned tokens include the terminating ``eos`` when the hypothesis finished.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    beam = Beam(width)
    for _ in range(max_len):
        if not beam.hypotheses:
            break
        logp = np.asarray(step([list(h.tokens) for h in beam.hypotheses]), dtype=np.float64)
        cands = []
        for h, row in zip(beam.hypotheses, logp):
            for tok, lp in enumerate(row):
                if lp == -np.inf:
                    continue
                cands.append(Hypothesis(h.tokens + (tok,), h.logprobs + (float(lp),), tok == eos))
        cands.sort(key=Hypothesis.sort_key)
        kept = cands[:width]
        beam.finished.extend(h for h in kept if h.finished)
        beam.hypotheses = [h for h in kept if not h.finished]
    pool = beam.finished or beam.hypotheses
    return min(pool, key=Hypothesis.sort_key)


def greedy(step: StepFn, eos: int, max_len: int = 30) -> Hypothesis:
    """Arg-max decoding; ties go to the lowest token id."""
    tokens: tuple[int, ...] = ()
    lps: tuple[float, ...] = ()
    for _ in range(max_len):
        row = np.asarray(step([list(tokens)]), dtype=np.float64)[0]
        tok = int(np.argmax(row))
        tokens, lps = tokens + (tok,), lps + (float(row[tok]),)
        if tok == eos:
            return Hypothesis(tokens, lps, True)
    return Hypothesis(tokens, lps, False)


def enumerate_best(step: StepFn, vocab_size: int, length: int) -> tuple[tuple[int, ...], float]:
    """Exhaustive arg-max of the raw log-prob over all ``vocab_size ** length`` sequences."""
    best: tuple[tuple[int, ...], float] = ((), -np.inf)

    def rec(prefix: tuple[int, ...], total: float):
        nonlocal best
        if len(prefix) == length:
            if total > best[1] or (total == best[1] and prefix < best[0]):
                best = (prefix, total)
            return
        row = np.asarray(step([list(prefix)]), dtype=np.float64)[0]
        for tok in range(vocab_size):
            rec(prefix + (tok,), total + float(row[tok]))

    rec((), 0.0)
    return best
