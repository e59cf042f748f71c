"""Sentence-level BLEU, ROUGE-N/L and exact-match METEOR with corpus aggregation."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import EmptyCandidate, EmptyCorpus, MalformedRecord
from .tokenizer import normalize_tokens

METRICS = ("bleu2", "bleu4", "rouge1", "rouge2", "rougeL", "meteor")
BLEU_SMOOTH = 1e-9


def _tokens(text):
    return normalize_tokens(text) if isinstance(text, str) else list(text)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n: int = 4) -> float:
    """Geometric mean of clipped 1..n-gram precisions times the brevity penalty."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand:
        raise EmptyCandidate("BLEU is undefined for an empty candidate")
    log_sum = 0.0
    for k in range(1, n + 1):
        c_grams = _ngrams(cand, k)
        total = sum(c_grams.values())
        if total == 0:
            p = BLEU_SMOOTH
        else:
            r_grams = _ngrams(ref, k)
            clipped = sum(min(c, r_grams[g]) for g, c in c_grams.items())
            p = clipped / total if clipped else BLEU_SMOOTH
        log_sum += math.log(p)
    c, r = len(cand), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return min(1.0, bp * math.exp(log_sum / n))


def _f1(overlap, n_cand, n_ref):
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate, reference, n: int = 1) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    c_grams = _ngrams(_tokens(candidate), n)
    r_grams = _ngrams(_tokens(reference), n)
    overlap = sum((c_grams & r_grams).values())
    return _f1(overlap, sum(c_grams.values()), sum(r_grams.values()))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


def _align(cand, ref):
    """Maximum exact-match alignment with the fewest chunks.

    Returns ``(matches, chunks)``.  Among alignments of maximal size, the
    number of adjacent pairs (candidate i -> j followed by i+1 -> j+1) is
    maximised by memoised search, which minimises chunks.
    """
    positions = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)
    remaining_cand = [Counter(cand[i:]) for i in range(len(cand) + 1)]

    @lru_cache(maxsize=None)
    def best(i, used, prev):
        if i == len(cand):
            return 0, 0
        w = cand[i]
        free = [j for j in positions.get(w, ()) if not used >> j & 1]
        options = []
        # skipping is allowed only if later copies of w can still absorb every free slot
        if not free or remaining_cand[i + 1][w] >= len(free):
            m, adj = best(i + 1, used, -1)
            options.append((m, adj))
        for j in free:
            m, adj = best(i + 1, used | (1 << j), j)
            options.append((m + 1, adj + (1 if prev >= 0 and j == prev + 1 else 0)))
        return max(options)

    matches, adjacent = best(0, 0, -1)
    best.cache_clear()
    return matches, matches - adjacent


def meteor(candidate, reference, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    """Exact-match METEOR: ``Fmean * (1 - 0.5 * (chunks / matches) ** 3)``."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    matches, chunks = _align(cand, ref)
    if matches == 0:
        return 0.0
    p = matches / len(cand)
    r = matches / len(ref)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / matches) ** beta
    return fmean * (1 - penalty)


def pair_scores(candidate, reference) -> dict:
    cand, ref = _tokens(candidate), _tokens(reference)
    return {
        "bleu2": bleu_n(cand, ref, 2) if cand else 0.0,
        "bleu4": bleu_n(cand, ref, 4) if cand else 0.0,
        "rouge1": rouge_n(cand, ref, 1),
        "rouge2": rouge_n(cand, ref, 2),
        "rougeL": rouge_l(cand, ref),
        "meteor": meteor(cand, ref),
    }


@dataclass
class MetricReport:
    pairs: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_dict(self):
        return {"pairs": self.pairs, "corpus": {m: {"mean": self.mean[m], "std": self.std[m]} for m in METRICS}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        width = max([len("id")] + [len(str(p["id"])) for p in self.pairs])
        head = f"{'id':<{width}}  " + "  ".join(f"{m:>15}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for p in self.pairs:
            lines.append(f"{str(p['id']):<{width}}  " + "  ".join(f"{p[m]:>15.4f}" for m in METRICS))
        lines.append("-" * len(head))
        lines.append(f"{'mean±std':<{width}}  " + "  ".join(
            f"{f'{self.mean[m]:.4f}±{self.std[m]:.3f}':>15}" for m in METRICS))
        return "\n".join(lines)


def evaluate_pairs(pairs) -> MetricReport:
    """``pairs`` is an iterable of dicts with ``id``, ``reference`` and ``candidate``."""
    rows = []
    for rec in pairs:
        scores = pair_scores(rec["candidate"], rec["reference"])
        rows.append({"id": rec["id"], **scores})
    if not rows:
        raise EmptyCorpus("no pairs to evaluate")
    mean = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
    std = {m: float(np.std([r[m] for r in rows])) for m in METRICS}
    return MetricReport(rows, mean, std)


def read_pairs(lines):
    """Parse JSONL pair records, rejecting malformed lines with their line number."""
    out = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(f"invalid JSON: {exc.msg}", lineno) from exc
        if not isinstance(rec, dict):
            raise MalformedRecord("record must be a JSON object", lineno)
        for key in ("id", "reference", "candidate"):
            if key not in rec:
                raise MalformedRecord(f"missing field {key!r}", lineno)
        if not isinstance(rec["reference"], str) or not isinstance(rec["candidate"], str):
            raise MalformedRecord("reference and candidate must be strings", lineno)
        out.append(rec)
    return out


def evaluate_corpus(path) -> MetricReport:
    with open(path, encoding="utf-8") as fh:
        pairs = read_pairs(fh)
    if not pairs:
        raise EmptyCorpus(f"{path} holds no pairs")
    return evaluate_pairs(pairs)
