"""ROUGE-L_sum scoring and response-entropy profiles."""

from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .lm import ModelState, decode
from .objectives import entropy_np

_SENT_SPLIT = re.compile(r"[.!?\n]+")
_NON_ALNUM = re.compile(r"[^a-z0-9]+")


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    def scaled(self) -> "RougeScore":
        """Scores x100, the convention used in reports."""
        return RougeScore(100 * self.precision, 100 * self.recall, 100 * self.f1)


def stem(word: str) -> str:
    """Strip a plural 's' (not 'ss'), for words longer than three letters."""
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def word_tokens(text: str) -> list[str]:
    return [stem(w) for w in _NON_ALNUM.sub(" ", text.lower()).split()]


def split_sentences(text: str) -> list[list[str]]:
    """Sentences (on . ! ? and newline) as token lists; empty sentences dropped."""
    out = []
    for s in _SENT_SPLIT.split(text):
        toks = word_tokens(s)
        if toks:
            out.append(toks)
    return out


def lcs_indices(ref, cand) -> list[int]:
    """Indices into ``ref`` of its lexicographically smallest longest common
    subsequence with ``cand``."""
    n, m = len(ref), len(cand)
    # suffix[i][j] = LCS length of ref[i:] and cand[j:]
    suffix = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, below = suffix[i], suffix[i + 1]
        for j in range(m - 1, -1, -1):
            if ref[i] == cand[j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = max(below[j], row[j + 1])
    out, i, j, left = [], 0, 0, suffix[0][0]
    while left:
        for ii in range(i, n):
            jj = next((jj for jj in range(j, m)
                       if ref[ii] == cand[jj] and suffix[ii + 1][jj + 1] == left - 1), None)
            if jj is not None:
                out.append(ii)
                i, j, left = ii + 1, jj + 1, left - 1
                break
    return out


def union_lcs_hits(ref_sents, cand_sents) -> int:
    """Summary-level union-LCS hit count with per-token count clipping."""
    cnt_r = Counter(t for s in ref_sents for t in s)
    cnt_c = Counter(t for s in cand_sents for t in s)
    hits = 0
    for r in ref_sents:
        union = set()
        for c in cand_sents:
            union.update(lcs_indices(r, c))
        for i in sorted(union):
            t = r[i]
            if cnt_c[t] > 0 and cnt_r[t] > 0:
                hits += 1
                cnt_c[t] -= 1
                cnt_r[t] -= 1
    return hits


def rouge_lsum(candidate: str, reference: str) -> RougeScore:
    ref_sents = split_sentences(reference)
    cand_sents = split_sentences(candidate)
    m = sum(map(len, ref_sents))
    n = sum(map(len, cand_sents))
    if m == 0 or n == 0:
        return RougeScore(0.0, 0.0, 0.0)
    hits = union_lcs_hits(ref_sents, cand_sents)
    p, r = hits / n, hits / m
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeScore(p, r, f)


def mean_rouge_lsum(candidates, references) -> float:
    """Mean F1 x100 over aligned pairs."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    if not candidates:
        return 0.0
    return 100.0 * math.fsum(rouge_lsum(c, r).f1 for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------------------
# entropy profile


@dataclass(frozen=True)
class EntropyProfile:
    mean: tuple       # mean entropy at positions 1..T
    count: tuple      # responses that reached each position

    def __len__(self):
        return len(self.mean)


def decode_with_entropies(state: ModelState, x, max_new: int, use_adapters: bool = True,
                          stop_token=None, on_pass=None):
    """Greedy response plus the next-token entropy recorded before each commit."""
    from .corpus import EOS
    stop = EOS if stop_token is None else stop_token
    tokens, rows = decode(state, x, max_new, stop, use_adapters=use_adapters, on_pass=on_pass)
    return tokens, entropy_np(rows) if len(rows) else np.zeros(0)


def profile_from_entropies(per_response) -> EntropyProfile:
    T = max((len(h) for h in per_response), default=0)
    means, counts = [], []
    for t in range(T):
        vals = [float(h[t]) for h in per_response if len(h) > t]
        means.append(math.fsum(vals) / len(vals))
        counts.append(len(vals))
    return EntropyProfile(tuple(means), tuple(counts))


def entropy_profile(state: ModelState, cohort, max_pos: int, use_adapters: bool = True) -> EntropyProfile:
    """Per-position mean next-token entropy over greedy responses to ``cohort``."""
    per = [decode_with_entropies(state, x, max_pos, use_adapters)[1] for x in cohort.queries]
    return profile_from_entropies(per)


def write_profile_csv(profile: EntropyProfile, path, meta: dict | None = None):
    with open(path, "w", newline="") as fh:
        if meta:
            for k in sorted(meta):
                fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh)
        w.writerow(["position", "mean_entropy", "count"])
        for i, (h, c) in enumerate(zip(profile.mean, profile.count), start=1):
            w.writerow([i, repr(h), c])
