"""Caption metrics (BLEU, ROUGE-L, CIDEr-D, METEOR-lite) and sequence-task metrics.

All sentence metrics work on token lists produced by :func:`nsva.text.tokenize`.
Corpus-level inputs are parallel lists: ``candidates[i]`` is a token list and
``references[i]`` is a list of token lists.

Conventions pinned by tests:

* BLEU is corpus-level (counts summed over the corpus before dividing), the
  brevity penalty uses the reference length closest to each candidate (ties go
  to the shorter reference), and an order whose candidate n-gram count is zero
  contributes precision 0.
* ROUGE-L uses beta = 1.2 and takes the max F over references, then the mean.
* CIDEr-D uses idf = log(N) - log(max(1, df)), clipped tf-idf vectors, a
  Gaussian length penalty with sigma = 6 and the x10 scale.
* METEOR-lite: exact matches first, then Porter-stem matches; alpha = 0.9,
  penalty 0.5 * (chunks / matches) ** 3.  No synonym stage.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from nltk.stem.porter import PorterStemmer

Tokens = Sequence[str]


class MetricError(ValueError):
    """Raised when a metric is undefined for the given input (e.g. an empty corpus)."""


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(candidates, references) -> None:
    if len(candidates) == 0:
        raise MetricError("metric undefined on an empty corpus")
    if len(candidates) != len(references):
        raise MetricError(f"{len(candidates)} candidates but {len(references)} reference sets")
    for refs in references:
        if len(refs) == 0:
            raise MetricError("every candidate needs at least one reference")


# -- BLEU -----------------------------------------------------------------------------------------
@dataclass
class BleuCounts:
    matches: list[int]
    totals: list[int]
    cand_len: int
    ref_len: int


def bleu_counts(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> BleuCounts:
    matches, totals = [0] * n, [0] * n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        c_len += len(cand)
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            cc = ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            matches[k - 1] += sum(min(c, max_ref[g]) for g, c in cc.items())
            totals[k - 1] += max(len(cand) - k + 1, 0)
    return BleuCounts(matches, totals, c_len, r_len)


def bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], n: int = 4) -> float:
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in 1..4")
    _check_corpus(candidates, references)
    c = bleu_counts(candidates, references, n)
    if c.cand_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(c.matches, c.totals):
        if t == 0 or m == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c.cand_len > c.ref_len else math.exp(1.0 - c.ref_len / c.cand_len)
    return bp * math.exp(log_p / n)


# -- ROUGE-L --------------------------------------------------------------------------------------
def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(candidate: Tokens, references: Sequence[Tokens], beta: float = 1.2) -> float:
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]], beta: float = 1.2) -> float:
    _check_corpus(candidates, references)
    return math.fsum(rouge_l_sentence(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


# -- CIDEr-D --------------------------------------------------------------------------------------
@dataclass
class CorpusStats:
    """Document frequencies of n-grams (n = 1..4) over reference sets."""

    df: Counter = field(default_factory=Counter)
    num_refs: int = 0

    @classmethod
    def build(cls, references: Sequence[Sequence[Tokens]], n: int = 4) -> "CorpusStats":
        df: Counter = Counter()
        for refs in references:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(r, k))
            df.update(seen)
        return cls(df, len(references))

    def idf(self, gram: tuple) -> float:
        return math.log(float(self.num_refs)) - math.log(max(1.0, float(self.df[gram])))


def _tfidf(tokens: Tokens, k: int, stats: CorpusStats) -> tuple[dict, float]:
    vec = {g: c * stats.idf(g) for g, c in ngrams(tokens, k).items()}
    return vec, math.sqrt(math.fsum(v * v for v in vec.values()))


def _sim(vc, nc, lc, vr, nr, lr, sigma) -> float:
    dot = math.fsum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
    val = dot / (nc * nr) if nc != 0 and nr != 0 else 0.0
    return val * math.exp(-((lc - lr) ** 2) / (2 * sigma ** 2))


def cider_d_scores(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                   stats: CorpusStats | None = None, n: int = 4, sigma: float = 6.0) -> list[float]:
    _check_corpus(candidates, references)
    stats = stats or CorpusStats.build(references, n)
    if stats.num_refs == 0:
        raise MetricError("CIDEr-D needs non-empty corpus statistics")
    out = []
    for cand, refs in zip(candidates, references):
        per_order = []
        for k in range(1, n + 1):
            vc, nc = _tfidf(cand, k, stats)
            sims = []
            for r in refs:
                vr, nr = _tfidf(r, k, stats)
                sims.append(_sim(vc, nc, len(cand), vr, nr, len(r), sigma))
            per_order.append(math.fsum(sims) / len(refs))
        out.append(10.0 * math.fsum(per_order) / n)
    return out


def cider_d(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
            stats: CorpusStats | None = None) -> float:
    scores = cider_d_scores(candidates, references, stats)
    return math.fsum(scores) / len(scores)


# -- METEOR-lite ----------------------------------------------------------------------------------
_stemmer = PorterStemmer()


def stem(token: str) -> str:
    return _stemmer.stem(token)


def align(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """Unigram alignment: exact matches first, then stem matches, each left to right.

    Returns (candidate index, reference index) pairs sorted by candidate index.
    """
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for key in (lambda t: t, stem):
        rk = [key(t) for t in reference]
        for i, tok in enumerate(candidate):
            if i in used_c:
                continue
            k = key(tok)
            for j, r in enumerate(rk):
                if j not in used_r and r == k:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidate: Tokens, reference: Tokens, alpha: float = 0.9, gamma: float = 0.5,
                beta: float = 3.0) -> float:
    pairs = align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(candidate), m / len(reference)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return f_mean * (1 - penalty)


def meteor_corpus(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> float:
    """Mean over the corpus of the best score against any reference."""
    _check_corpus(candidates, references)
    return math.fsum(max(meteor_lite(c, r) for r in refs) for c, refs in zip(candidates, references)) / len(candidates)


# -- sequence tasks -------------------------------------------------------------------------------
def sequence_metrics(pred: Sequence[str], gt: Sequence[str]) -> tuple[float, float, float]:
    """(SR, Acc, IoU) for one sample.  Two empty sequences score (1, 1, 1)."""
    if not pred and not gt:
        return 1.0, 1.0, 1.0
    sr = float(list(pred) == list(gt))
    hits = sum(a == b for a, b in zip(pred, gt))
    acc = hits / max(len(pred), len(gt))
    sp, sg = set(pred), set(gt)
    iou = len(sp & sg) / len(sp | sg)
    return sr, acc, iou


def sequence_corpus(preds: Sequence[Sequence[str]], gts: Sequence[Sequence[str]]) -> dict[str, float]:
    if len(preds) == 0 or len(preds) != len(gts):
        raise MetricError("sequence metrics need equally many (non-zero) predictions and targets")
    rows = [sequence_metrics(p, g) for p, g in zip(preds, gts)]
    n = len(rows)
    return {"SR": math.fsum(r[0] for r in rows) / n,
            "Acc": math.fsum(r[1] for r in rows) / n,
            "mIoU": math.fsum(r[2] for r in rows) / n}


def caption_report(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                   which: Sequence[str] = ("bleu", "rouge", "cider", "meteor")) -> dict[str, float]:
    """The metrics named in ``which`` with the column names used in reports."""
    out: dict[str, float] = {}
    if "bleu" in which:
        for k in range(1, 5):
            out[f"B@{k}"] = bleu(candidates, references, k)
    if "meteor" in which:
        out["M"] = meteor_corpus(candidates, references)
    if "rouge" in which:
        out["R_L"] = rouge_l(candidates, references)
    if "cider" in which:
        out["C"] = cider_d(candidates, references)
    return out
