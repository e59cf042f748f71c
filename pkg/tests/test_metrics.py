import itertools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microvlm.errors import EmptyCandidate, EmptyCorpus, MalformedRecord
from microvlm.metrics import (
    METRICS,
    bleu_n,
    evaluate_corpus,
    evaluate_pairs,
    lcs_length,
    meteor,
    read_pairs,
    rouge_l,
    rouge_n,
)

words = st.lists(st.sampled_from(list("abcd")), min_size=1, max_size=8)


def brute_lcs(a, b):
    for k in range(min(len(a), len(b)), 0, -1):
        subs = set(itertools.combinations(a, k))
        if any(s in subs for s in itertools.combinations(b, k)):
            return k
    return 0


def brute_meteor(cand, ref):
    """Enumerate every one-to-one exact alignment and keep the best score."""
    best = 0.0
    idx_c = range(len(cand))
    for size in range(1, min(len(cand), len(ref)) + 1):
        for cs in itertools.combinations(idx_c, size):
            for rs in itertools.permutations(range(len(ref)), size):
                if any(cand[i] != ref[j] for i, j in zip(cs, rs)):
                    continue
                pairs = sorted(zip(cs, rs))
                chunks = 1 + sum(not (c2 == c1 + 1 and r2 == r1 + 1) for (c1, r1), (c2, r2) in zip(pairs, pairs[1:]))
                p, r = size / len(cand), size / len(ref)
                f = p * r / (0.9 * p + 0.1 * r)
                best = max(best, f * (1 - 0.5 * (chunks / size) ** 3))
    return best


def test_identical_pairs_score_one():
    s = "a thin film of grains seen at high magnification ."
    for n in (2, 4):
        assert bleu_n(s, s, n) == pytest.approx(1.0)
    for n in (1, 2):
        assert rouge_n(s, s, n) == pytest.approx(1.0)
    assert rouge_l(s, s) == pytest.approx(1.0)


def test_hand_derived_triple():
    cand, ref = "the cat sat", "the cat sat on the mat"
    assert bleu_n(cand, ref, 2) == pytest.approx(0.36788, abs=1e-3)
    assert rouge_l(cand, ref) == pytest.approx(0.66667, abs=1e-3)
    assert meteor(cand, ref) == pytest.approx(0.51657, abs=1e-3)


def test_meteor_edge_cases():
    assert meteor("cat", "cat") == pytest.approx(0.5)
    assert meteor("cat dog", "fish bird") == 0.0
    assert meteor("", "x") == 0.0


def test_bleu_empty_candidate():
    with pytest.raises(EmptyCandidate):
        bleu_n("", "a b", 2)


def test_bleu_brevity_penalty_only_for_short():
    assert bleu_n("a b c d", "a b", 1) < 1.0
    assert bleu_n("a b", "a b c d", 1) == pytest.approx(0.36788, abs=1e-4)


@given(words, words)
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == brute_lcs(a, b)


@given(words, words)
def test_rouge_l_symmetric(a, b):
    assert rouge_l(a, b) == pytest.approx(rouge_l(b, a))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(list("abc")), min_size=1, max_size=5),
       st.lists(st.sampled_from(list("abc")), min_size=1, max_size=5))
def test_meteor_matches_brute_force(c, r):
    assert meteor(c, r) == pytest.approx(brute_meteor(c, r), abs=1e-12)


def test_corpus_single_pair_zero_std():
    rep = evaluate_pairs([{"id": "x", "reference": "a b c", "candidate": "a b"}])
    assert all(rep.std[m] == 0.0 for m in METRICS)


def test_corpus_mean_order_invariant():
    rng = random.Random(0)
    pool = "grain film wire pore tip dense array".split()
    pairs = [{"id": i, "reference": " ".join(rng.choices(pool, k=6)), "candidate": " ".join(rng.choices(pool, k=5))}
             for i in range(12)]
    a = evaluate_pairs(pairs)
    rng.shuffle(pairs)
    b = evaluate_pairs(pairs)
    assert all(a.mean[m] == pytest.approx(b.mean[m]) for m in METRICS)


def test_read_pairs_reports_line():
    lines = [json.dumps({"id": 1, "reference": "a", "candidate": "a"}), "", "{broken"]
    with pytest.raises(MalformedRecord) as info:
        read_pairs(lines)
    assert "3" in str(info.value)
    with pytest.raises(MalformedRecord):
        read_pairs([json.dumps({"id": 1, "reference": "a"})])


def test_evaluate_corpus_file(tmp_path):
    path = tmp_path / "p.jsonl"
    path.write_text(json.dumps({"id": "a", "reference": "x y", "candidate": "x y"}) + "\n")
    rep = evaluate_corpus(path)
    assert rep.mean["bleu2"] == pytest.approx(1.0)
    assert "mean±std" in rep.table()
    assert json.loads(rep.to_json())["corpus"]["rougeL"]["mean"] == pytest.approx(1.0)
    path.write_text("\n")
    with pytest.raises(EmptyCorpus):
        evaluate_corpus(path)
