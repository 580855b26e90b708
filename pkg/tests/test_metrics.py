import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclexr.classifiers import LabelScores
from cyclexr.metrics import (MetricsBundle, aggregate_top_k, bleu_n, corpus_bleu, kl_divergence,
                             label_agreement, lcs_length, per_label_accuracy, precision_at_k,
                             recall_at_k, rouge_l, top_k_common, top_k_labels)
from oracles import (accuracy_oracle, bleu_oracle, kl_oracle, lcs_bruteforce, rouge_oracle,
                     top_k_oracle)

words = st.lists(st.sampled_from(list("abcde")), min_size=1, max_size=9)
scores14 = st.lists(st.floats(0, 1, allow_nan=False), min_size=14, max_size=14)


def test_bleu_identical_is_one():
    s = "there is a square in the upper-left".split()
    for n in (1, 2, 3, 4):
        assert bleu_n(s, s, n) == pytest.approx(1.0)


def test_bleu_hand_case():
    cand = "the cat the cat".split()
    ref = "the cat sat".split()
    # unigram: clipped the=1 cat=1 -> 2/4 ; bigram: "the cat" once -> 1/3 ; c > r so bp = 1
    assert bleu_n(cand, ref, 2) == pytest.approx(math.sqrt(0.5 * (1 / 3)), abs=1e-12)


def test_bleu_brevity_penalty():
    cand, ref = ["a"], ["a", "b", "c"]
    assert bleu_n(cand, ref, 1) == pytest.approx(math.exp(1 - 3), abs=1e-12)


def test_bleu_no_overlap_is_tiny_but_positive():
    v = bleu_n(["x", "y"], ["a", "b"], 1)
    assert 0 < v < 1e-8


def test_bleu_empty_candidate():
    assert bleu_n([], ["a"], 4) == 0.0
    with pytest.raises(ValueError):
        bleu_n(["a"], [], 4)


@settings(max_examples=60, deadline=None)
@given(words, words, st.integers(1, 4))
def test_bleu_matches_oracle(cand, ref, n):
    assert bleu_n(cand, ref, n) == pytest.approx(bleu_oracle(cand, ref, n), rel=1e-9, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(words, words)
def test_bleu_in_unit_interval(cand, ref):
    assert 0.0 <= bleu_n(cand, ref, 4) <= 1.0 + 1e-12


@settings(max_examples=60, deadline=None)
@given(words, words)
def test_lcs_matches_bruteforce(a, b):
    assert lcs_length(a, b) == lcs_bruteforce(a, b)


@settings(max_examples=60, deadline=None)
@given(words, words)
def test_rouge_matches_oracle_and_is_symmetric(a, b):
    assert rouge_l(a, b) == pytest.approx(rouge_oracle(a, b), abs=1e-12)
    assert rouge_l(a, b) == pytest.approx(rouge_l(b, a), abs=1e-12)


def test_rouge_hand_case():
    # lcs("a b c d", "a c d e") = 3 -> p = r = 3/4
    assert rouge_l("a b c d".split(), "a c d e".split()) == pytest.approx(0.75)


def test_corpus_bleu_is_mean():
    c = [["a", "b"], ["c"]]
    r = [["a", "b"], ["d"]]
    assert corpus_bleu(c, r, 1) == pytest.approx((1.0 + bleu_n(["c"], ["d"], 1)) / 2)


def test_top_k_ties_go_to_lower_index():
    assert top_k_labels([0.5] * 14, 3) == {0, 1, 2}


@settings(max_examples=80, deadline=None)
@given(scores14, scores14, st.integers(1, 14))
def test_top_k_matches_oracle(a, b, k):
    v = top_k_common(a, b, k)
    assert v == top_k_oracle(a, b, k)
    assert 0 <= v <= k
    assert top_k_common(a, a, k) == k


def test_top_k_rejects_bad_k():
    with pytest.raises(ValueError):
        top_k_common([0.1] * 14, [0.1] * 14, 15)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(scores14, scores14), min_size=1, max_size=6), st.integers(1, 14))
def test_precision_recall_identities(pairs, k):
    mean = aggregate_top_k(pairs, k)
    assert precision_at_k(mean, k) * k == pytest.approx(mean)
    assert recall_at_k(mean) * 14 == pytest.approx(mean)


@pytest.mark.parametrize("top2,p2,r2", [(1.84, 0.92, 0.13), (0.90, 0.45, 0.06)])
def test_reference_top2_triples(top2, p2, r2):
    assert precision_at_k(top2, 2) == pytest.approx(p2, abs=0.005)
    assert recall_at_k(top2) == pytest.approx(r2, abs=0.005)


@settings(max_examples=80, deadline=None)
@given(scores14, scores14)
def test_kl_matches_scipy(p, q):
    assert kl_divergence(p, q) == pytest.approx(kl_oracle(p, q), rel=1e-9, abs=1e-9)
    assert kl_divergence(p, q) >= 0


def test_kl_zero_on_identical():
    p = np.linspace(0.1, 1, 14)
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    st.lists(st.lists(st.integers(0, 1), min_size=14, max_size=14), min_size=n, max_size=n),
    st.lists(st.lists(st.integers(0, 1), min_size=14, max_size=14), min_size=n, max_size=n))))
def test_per_label_accuracy_matches_loop(rows):
    pred, truth = rows
    np.testing.assert_allclose(per_label_accuracy(pred, truth), accuracy_oracle(pred, truth))


def test_per_label_accuracy_shape_mismatch():
    with pytest.raises(ValueError):
        per_label_accuracy([[0] * 14], [[0] * 13])


def test_bundle_json_roundtrip_and_check():
    rng = np.random.default_rng(0)
    pairs = [(LabelScores(tuple(rng.random(14))), LabelScores(tuple(rng.random(14))))
             for _ in range(5)]
    b = label_agreement(pairs)
    b.check()
    again = MetricsBundle.from_dict(json.loads(b.to_json()))
    assert again.to_json() == b.to_json()
    assert json.loads(b.to_json())["schema_version"] == 1
    assert b.csv_row().count("\n") == 2


def test_bundle_rejects_nan():
    b = MetricsBundle(rouge=float("nan"))
    with pytest.raises(ValueError):
        b.check()
