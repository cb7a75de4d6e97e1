"""Response quality metrics: BLEU, ROUGE-1/2/L, Distinct-n.

All functions take pre-tokenized inputs (lists of string tokens).  One
reference per candidate.

Scale conventions: BLEU and Distinct are ratios in [0, 1]; ROUGE values
are reported on a 0-100 scale.  Corpus ROUGE is the mean of per-example
F1 scores.  B-k is the usual cumulative score — brevity penalty times
the geometric mean of clipped n-gram precisions for orders 1..k — with
add-one smoothing applied to any zero match count at order >= 2.  If a
corpus has no n-grams at all for some order <= k (every candidate
shorter than k tokens), B-k is 0.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


class LengthMismatch(ValueError):
    pass


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: list[list[str]],
    references: list[list[str]],
    max_n: int = 4,
) -> list[float]:
    """Cumulative corpus BLEU scores [B-1, ..., B-max_n]."""
    if len(candidates) != len(references):
        raise LengthMismatch(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = ngram_counts(cand, n)
            ref_counts = ngram_counts(ref, n)
            matches[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in cand_counts.items()
            )
            totals[n - 1] += sum(cand_counts.values())

    if cand_len == 0:
        return [0.0] * max_n
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)

    precisions = []
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if t == 0:
            precisions.append(None)
        elif m == 0 and n >= 2:
            precisions.append((m + 1) / (t + 1))
        else:
            precisions.append(m / t)

    scores = []
    for k in range(1, max_n + 1):
        window = precisions[:k]
        if any(p is None or p == 0.0 for p in window):
            scores.append(0.0)
        else:
            geo_mean = window[0] if k == 1 else math.prod(window) ** (1.0 / k)
            scores.append(brevity * geo_mean)
    return scores


@dataclass(frozen=True)
class RougeScore:
    recall: float
    precision: float
    f1: float


def _f1(recall: float, precision: float) -> float:
    if recall + precision == 0.0:
        return 0.0
    return 2.0 * recall * precision / (recall + precision)


def rouge_n(candidate: list[str], reference: list[str], n: int) -> RougeScore:
    """Clipped n-gram recall/precision/F1 for one pair, each in [0, 1]."""
    cand_counts = ngram_counts(candidate, n)
    ref_counts = ngram_counts(reference, n)
    overlap = sum(min(count, cand_counts[gram]) for gram, count in ref_counts.items())
    ref_total = sum(ref_counts.values())
    cand_total = sum(cand_counts.values())
    recall = overlap / ref_total if ref_total else 0.0
    precision = overlap / cand_total if cand_total else 0.0
    return RougeScore(recall, precision, _f1(recall, precision))


def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for token in a:
        row = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                row.append(prev[j - 1] + 1)
            else:
                row.append(max(prev[j], row[j - 1]))
        prev = row
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str]) -> float:
    """Longest-common-subsequence F1 for one pair, on the 0-100 scale."""
    length = lcs_length(candidate, reference)
    recall = length / len(reference) if reference else 0.0
    precision = length / len(candidate) if candidate else 0.0
    return 100.0 * _f1(recall, precision)


def distinct_n(candidates: list[list[str]], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across all candidates."""
    seen = set()
    total = 0
    for cand in candidates:
        for i in range(len(cand) - n + 1):
            seen.add(tuple(cand[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


@dataclass(frozen=True)
class ScoreReport:
    """Corpus scores in the standard column order."""

    b1: float
    b2: float
    b3: float
    b4: float
    r1: float
    r2: float
    rl: float
    dist1: float
    dist2: float
    dist3: float
    dist4: float
    n_examples: int

    def columns(self) -> list[tuple[str, float]]:
        return [
            ("B-1", self.b1),
            ("B-2", self.b2),
            ("B-3", self.b3),
            ("B-4", self.b4),
            ("R-1", self.r1),
            ("R-2", self.r2),
            ("R-L", self.rl),
            ("Dist-1", self.dist1),
            ("Dist-2", self.dist2),
            ("Dist-3", self.dist3),
            ("Dist-4", self.dist4),
        ]


def _mean(values: list[float]) -> float:
    # fsum is exactly rounded, which keeps corpus means order-invariant
    return math.fsum(values) / len(values) if values else 0.0


def score_corpus(
    candidates: list[list[str]], references: list[list[str]]
) -> ScoreReport:
    if len(candidates) != len(references):
        raise LengthMismatch(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    b = bleu(candidates, references, max_n=4)
    pairs = list(zip(candidates, references))
    return ScoreReport(
        b1=b[0],
        b2=b[1],
        b3=b[2],
        b4=b[3],
        r1=100.0 * _mean([rouge_n(c, r, 1).f1 for c, r in pairs]),
        r2=100.0 * _mean([rouge_n(c, r, 2).f1 for c, r in pairs]),
        rl=_mean([rouge_l(c, r) for c, r in pairs]),
        dist1=distinct_n(candidates, 1),
        dist2=distinct_n(candidates, 2),
        dist3=distinct_n(candidates, 3),
        dist4=distinct_n(candidates, 4),
        n_examples=len(candidates),
    )
