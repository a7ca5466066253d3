"""BLEU, METEOR and ROUGE-L over lowercase whitespace tokens."""

from __future__ import annotations

import math
from collections import Counter


def tokens(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 1, smoothing: float | None = None) -> float:
    """Corpus-of-one BLEU with uniform weights up to ``max_n``.

    ``smoothing`` adds that epsilon to zero n-gram match counts; without it
    any zero precision gives 0.
    """
    ref = tokens(reference)
    if not ref:
        raise ValueError("reference is empty")
    cand = tokens(candidate)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        c_ng, r_ng = _ngrams(cand, n), _ngrams(ref, n)
        total = sum(c_ng.values())
        matched = sum(min(c, r_ng[g]) for g, c in c_ng.items())
        if total == 0 or matched == 0:
            if smoothing is None or total == 0:
                return 0.0
            matched = smoothing
        log_p += math.log(matched / total) / max_n
    c, r = len(cand), len(ref)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def align(cand, ref):
    """Exact unigram alignment as (cand_index, ref_index) pairs.

    Each candidate word takes, in order, the unused reference occurrence that
    continues the current chunk when one exists, else the leftmost unused one.
    """
    used = set()
    pairs = []
    prev = None
    for i, w in enumerate(cand):
        options = [j for j, r in enumerate(ref) if r == w and j not in used]
        if not options:
            prev = None
            continue
        j = prev + 1 if prev is not None and prev + 1 in options else options[0]
        used.add(j)
        pairs.append((i, j))
        prev = j
    return pairs


def count_chunks(pairs):
    chunks = 0
    last = None
    for i, j in pairs:
        if last is None or i != last[0] + 1 or j != last[1] + 1:
            chunks += 1
        last = (i, j)
    return chunks


def meteor(candidate: str, reference: str, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    """Exact-match METEOR: F_mean * (1 - gamma * (chunks / matches)^beta).

    F_mean = P R / (alpha P + (1 - alpha) R), i.e. 10PR / (R + 9P) by default.
    """
    ref = tokens(reference)
    if not ref:
        raise ValueError("reference is empty")
    cand = tokens(candidate)
    pairs = align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(pairs) / m) ** beta
    return f_mean * (1.0 - penalty)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    ref = tokens(reference)
    if not ref:
        raise ValueError("reference is empty")
    cand = tokens(candidate)
    if not cand:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def text_scores(candidate: str, reference: str, max_n: int = 1) -> dict:
    return {
        "bleu": bleu(candidate, reference, max_n=max_n),
        "meteor": meteor(candidate, reference),
        "rouge_l": rouge_l(candidate, reference),
    }


def read_pairs_tsv(path) -> list[tuple[str, str]]:
    """Two-column UTF-8 TSV of (candidate, reference); blank lines skipped."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
            pairs.append((cols[0], cols[1]))
    return pairs
