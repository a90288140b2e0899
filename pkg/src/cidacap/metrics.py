"""Caption metrics (BLEU, ROUGE-L, METEOR-lite, CIDEr) and calibration errors.

Caption metrics take token lists. Calibration metrics take an ``(n, K)``
probability matrix plus an ``(n,)`` label vector; :class:`ProbRecord` lists are
accepted as well.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TACE_THRESHOLD = 1e-3
DEFAULT_BINS = 10
REPORT_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor_lite", "cider",
               "ece", "sce", "tace", "brier")


@dataclass
class EvalPair:
    candidate: list[str]
    references: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.references:
            raise ValueError("EvalPair needs at least one reference")
        self.candidate = [t.lower() for t in self.candidate]
        self.references = [[t.lower() for t in r] for r in self.references]


@dataclass
class ProbRecord:
    probs: np.ndarray
    true_class: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------- BLEU

def _bleu_stats(pair: EvalPair, n: int):
    c = len(pair.candidate)
    ref_lens = [len(r) for r in pair.references]
    # closest reference length, shorter wins ties
    r = min(ref_lens, key=lambda L: (abs(L - c), L))
    matches, totals = [], []
    for k in range(1, n + 1):
        cand = _ngrams(pair.candidate, k)
        max_ref = Counter()
        for ref in pair.references:
            for g, cnt in _ngrams(ref, k).items():
                max_ref[g] = max(max_ref[g], cnt)
        matches.append(sum(min(cnt, max_ref[g]) for g, cnt in cand.items()))
        totals.append(max(c - k + 1, 0))
    return matches, totals, c, r


def _combine_bleu(matches, totals, c, r, smooth=0):
    if c == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        m, t = m + smooth, t + smooth
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(sum(logs) / len(logs))


def bleu(pair: EvalPair, n: int = 4, smooth: bool = False) -> float:
    """Sentence-level BLEU-n; ``smooth`` adds one to every count (diagnostics only)."""
    if not 1 <= n <= 4:
        raise ValueError("n must lie in 1..4")
    if not pair.candidate:
        warnings.warn("empty candidate, BLEU set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    matches, totals, c, r = _bleu_stats(pair, n)
    return _combine_bleu(matches, totals, c, r, smooth=int(smooth))


def corpus_bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus BLEU-n: clipped counts and lengths are summed before the ratios."""
    if not 1 <= n <= 4:
        raise ValueError("n must lie in 1..4")
    M, T = [0] * n, [0] * n
    C = R = 0
    for p in pairs:
        m, t, c, r = _bleu_stats(p, n)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        C += c
        R += r
    return _combine_bleu(M, T, C, R)


# ------------------------------------------------------------------ ROUGE-L

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pair: EvalPair, beta: float = 1.2) -> float:
    best = 0.0
    cand = pair.candidate
    for ref in pair.references:
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


# -------------------------------------------------------------- METEOR-lite

_SUFFIXES = ("ing", "ed", "es", "ly", "s")


def stem(token: str) -> str:
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def _align(cand, ref):
    """Exact matches first, then stem matches; each side matched at most once."""
    pairs = {}
    used = set()
    for key in (lambda t: t, stem):
        for i, tok in enumerate(cand):
            if i in pairs:
                continue
            for j, rtok in enumerate(ref):
                if j not in used and key(tok) == key(rtok):
                    pairs[i] = j
                    used.add(j)
                    break
    return sorted(pairs.items())


def _count_chunks(alignment):
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(pair: EvalPair) -> float:
    """METEOR without synonym matching: exact + stem alignment, fragmentation penalty."""
    best = 0.0
    cand = pair.candidate
    for ref in pair.references:
        alignment = _align(cand, ref)
        m = len(alignment)
        if m == 0:
            continue
        P, R = m / len(cand), m / len(ref)
        fmean = 10 * P * R / (R + 9 * P)
        penalty = 0.5 * (_count_chunks(alignment) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


# -------------------------------------------------------------------- CIDEr

def _tfidf(counts: Counter, idf: dict) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * idf.get(g, 0.0) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    dot = sum(x * v.get(g, 0.0) for g, x in u.items())
    return dot / (nu * nv)


def cider(corpus: Sequence[EvalPair], n: int = 4) -> tuple[list[float], float]:
    """Per-pair CIDEr (0..10) and its mean; idf comes from the reference sets."""
    N = len(corpus)
    if N < 2:
        raise ValueError("CIDEr needs a corpus of at least 2 pairs")
    scores = np.zeros(N)
    for k in range(1, n + 1):
        df = Counter()
        for p in corpus:
            seen = set()
            for ref in p.references:
                seen.update(_ngrams(ref, k))
            df.update(seen)
        idf = {g: math.log(N / d) for g, d in df.items()}
        for idx, p in enumerate(corpus):
            cvec = _tfidf(_ngrams(p.candidate, k), idf)
            mean_ref: dict = {}
            for ref in p.references:
                for g, x in _tfidf(_ngrams(ref, k), idf).items():
                    mean_ref[g] = mean_ref.get(g, 0.0) + x / len(p.references)
            scores[idx] += _cosine(cvec, mean_ref)
    scores = 10.0 * scores / n
    return scores.tolist(), float(scores.mean())


def caption_scores(pairs: Sequence[EvalPair]) -> dict:
    """Corpus-level caption metrics under the stable report key names."""
    out = {f"bleu{k}": corpus_bleu(pairs, k) for k in range(1, 5)}
    out["rouge_l"] = float(np.mean([rouge_l(p) for p in pairs]))
    out["meteor_lite"] = float(np.mean([meteor_lite(p) for p in pairs]))
    out["cider"] = cider(pairs)[1] if len(pairs) >= 2 else float("nan")
    return out


# -------------------------------------------------------------- calibration

def _as_arrays(records, labels=None):
    if labels is None:
        records = list(records)
        if not records:
            raise ValueError("no records")
        probs = np.stack([np.asarray(r.probs, dtype=np.float64) for r in records])
        labels = np.array([r.true_class for r in records], dtype=np.int64)
    else:
        probs = np.asarray(records, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("no records")
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels disagree in length")
    return probs, labels


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    # half-open (lo, hi] bins over (0, 1]; 0 itself falls into the first bin
    edges = np.linspace(0.0, 1.0, bins + 1)
    return np.clip(np.searchsorted(edges[1:], values, side="left"), 0, bins - 1)


def _binned_gap(conf: np.ndarray, hit: np.ndarray, bins: int) -> float:
    idx = _bin_index(conf, bins)
    n = len(conf)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            total += sel.sum() / n * abs(hit[sel].mean() - conf[sel].mean())
    return total


def ece(records, labels=None, bins: int = DEFAULT_BINS) -> float:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs, labels = _as_arrays(records, labels)
    conf = probs.max(axis=1)
    hit = (probs.argmax(axis=1) == labels).astype(np.float64)
    return _binned_gap(conf, hit, bins)


def sce(records, labels=None, bins: int = DEFAULT_BINS) -> float:
    if bins < 1:
        raise ValueError("bins must be >= 1")
    probs, labels = _as_arrays(records, labels)
    K = probs.shape[1]
    if K < 2:
        raise ValueError("SCE needs K >= 2 classes")
    return float(np.mean([
        _binned_gap(probs[:, k], (labels == k).astype(np.float64), bins) for k in range(K)
    ]))


def tace(records, labels=None, bins: int = DEFAULT_BINS, threshold: float = TACE_THRESHOLD) -> float:
    """Thresholded adaptive calibration error with equal-mass bins per class."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    probs, labels = _as_arrays(records, labels)
    K = probs.shape[1]
    per_class = []
    for k in range(K):
        keep = probs[:, k] >= threshold
        if not keep.any():
            warnings.warn(f"class {k}: every probability below threshold, contributes 0",
                          RuntimeWarning, stacklevel=2)
            per_class.append(0.0)
            continue
        conf = probs[keep, k]
        hit = (labels[keep] == k).astype(np.float64)
        order = np.argsort(conf, kind="stable")
        total = 0.0
        for chunk in np.array_split(order, bins):
            if len(chunk):
                total += len(chunk) / len(order) * abs(hit[chunk].mean() - conf[chunk].mean())
        per_class.append(total)
    return float(np.mean(per_class))


def brier(records, labels=None) -> float:
    probs, labels = _as_arrays(records, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


def calibration_scores(probs, labels, bins: int = DEFAULT_BINS,
                       threshold: float = TACE_THRESHOLD) -> dict:
    return {
        "ece": ece(probs, labels, bins=bins),
        "sce": sce(probs, labels, bins=bins),
        "tace": tace(probs, labels, bins=bins, threshold=threshold),
        "brier": brier(probs, labels),
    }
