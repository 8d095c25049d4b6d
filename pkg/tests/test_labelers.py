import random
from collections import defaultdict
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attnlabel.corpus import Dataset, Sentence, encode_batch
from attnlabel.labelers import (
    RelFreqModel,
    covering_ngrams,
    gradient_magnitudes,
    label_by_attention,
    label_by_backprop,
    label_supervised_probs,
    outlier_labels,
    predict_dataset,
    relfreq_score,
    relfreq_train,
)
from attnlabel.model import ForwardTrace

from conftest import make_classifier, make_tagger


def trace_with(a_tilde):
    a = np.asarray(a_tilde, dtype=float)
    return ForwardTrace(h=None, e_tilde=None, a_tilde=a, a=a / a.sum(), c=None, d=None, y=0.5)


# -- attention -----------------------------------------------------------------

def test_attention_threshold():
    preds = label_by_attention(trace_with([0.9, 0.1, 0.6]))
    assert [p.label for p in preds] == [1, 0, 1]
    assert [p.score for p in preds] == pytest.approx([0.9, 0.1, 0.6])
    assert label_by_attention(trace_with([0.5]))[0].label == 0
    assert all(p.label == 0 for p in label_by_attention(trace_with([0.1, 0.49, 0.2])))


def test_attention_labels_invariant_to_padding(vocab, corpus):
    model = make_classifier(vocab)
    sents = list(corpus.sentences)
    tight = model(encode_batch(sents, vocab)).traces()
    loose = model(encode_batch(sents, vocab, pad_to=20)).traces()
    for a, b in zip(tight, loose):
        la = label_by_attention(a)
        assert [p.label for p in la] == [p.label for p in label_by_attention(b)]
        assert all(p.score > 0.5 for p in la if p.label == 1)


# -- backprop -------------------------------------------------------------------

def test_outlier_rule_examples():
    assert outlier_labels([2.0, 2.0, 2.0]) == [0, 0, 0]
    assert outlier_labels([0.7]) == [0]
    # mean 3.25, population std 3.8971, bound 9.0957
    assert outlier_labels([1, 1, 1, 10]) == [0, 0, 0, 1]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 1e3))
def test_outlier_rule_scale_invariant(mags, k):
    assert outlier_labels(mags) == outlier_labels([m * k for m in mags])


def test_backprop_zero_output_gives_no_labels(vocab):
    model = make_classifier(vocab)
    with torch.no_grad():
        model.output.bias.fill_(-1000.0)
    batch = encode_batch([Sentence(["the", "cat", "may", "sat"])], vocab)
    (preds,) = label_by_backprop(model, batch)
    assert [p.score for p in preds] == [0.0] * 4
    assert [p.label for p in preds] == [0] * 4


def test_gradient_magnitudes_match_autograd(vocab):
    model = make_classifier(vocab)
    sents = [Sentence(["the", "cat", "may"]), Sentence(["x", "a"])]
    batch = encode_batch(sents, vocab)
    mags = gradient_magnitudes(model, batch)
    for b, sent in enumerate(sents):
        single = encode_batch([sent], vocab)
        trace = model(single)
        (g,) = torch.autograd.grad((trace.y[0] - 0.0) ** 2, trace.w)
        np.testing.assert_allclose(mags[b], g[0].norm(dim=-1).numpy(), rtol=1e-10, atol=1e-14)


def test_backprop_on_last_state_classifier(vocab):
    model = make_classifier(vocab, composition="last")
    batch = encode_batch([Sentence(["the", "cat", "may", "sat", "on"])], vocab)
    (preds,) = label_by_backprop(model, batch)
    assert len(preds) == 5 and all(p.method == "backprop" for p in preds)


# -- relative frequency ------------------------------------------------------------------

def brute_force_relfreq(train, sentence_tokens):
    """Independent enumeration: every span of length 1..3 of the padded stream."""
    def spans(tokens):
        stream = ["<s>"] + [t.lower() for t in tokens] + ["</s>"]
        for i in range(len(stream)):
            for j in range(i + 1, min(i + 3, len(stream)) + 1):
                gram = tuple(stream[i:j])
                if gram in (("<s>",), ("</s>",)):
                    continue
                yield i, j, gram
    counts = defaultdict(lambda: [0, 0])
    for sent in train:
        for gram in {g for _, _, g in spans(sent.tokens)}:
            counts[gram][sent.sentence_label] += 1
    ratios = {g: Fraction(c[1], c[0] + c[1]) for g, c in counts.items()}
    scores = []
    for pos in range(1, len(sentence_tokens) + 1):
        covering = [g for i, j, g in spans(sentence_tokens) if i <= pos < j]
        known = [ratios[g] for g in covering if g in ratios]
        if not known:
            scores.append(0.0)
            continue
        prod = Fraction(1)
        for r in known:
            prod *= r
        scores.append(float(prod) ** (1.0 / len(known)))
    return ratios, scores


def test_relfreq_counts():
    train = Dataset([Sentence("i think maybe".split(), None, 1),
                     Sentence("i think so".split(), None, 0)])
    model = relfreq_train(train)
    assert model.positive[("maybe",)] == 1 and model.negative.get(("maybe",), 0) == 0
    assert model.positive[("think",)] == 1 and model.negative[("think",)] == 1
    assert model.positive[("<s>", "i")] == 1


def test_relfreq_presence_counting():
    model = relfreq_train(Dataset([Sentence("a a a".split(), None, 1)]))
    assert model.positive[("a",)] == 1


def test_relfreq_toy_example():
    train = Dataset([Sentence(["a", "b"], None, 1), Sentence(["a", "c"], None, 0)])
    model = relfreq_train(train)
    scores = relfreq_score(model, Sentence(["a", "b"]))
    assert scores[1].score == 1.0
    feats = set(covering_ngrams(["a", "b"])[1])
    assert feats == {("b",), ("a", "b"), ("b", "</s>"), ("<s>", "a", "b"), ("a", "b", "</s>")}


def test_relfreq_geometric_mean_cases():
    model = RelFreqModel(positive={("q",): 1}, negative={("q",): 3})
    (pred,) = relfreq_score(model, ["q"])
    assert pred.score == 0.25 and pred.label == 0
    empty = relfreq_score(model, ["zzz"])
    assert empty[0].score == 0.0


def test_relfreq_smoothing_option():
    train = Dataset([Sentence(["a"], None, 1)])
    model = relfreq_train(train, alpha=1.0)
    assert model.ratio(("a",)) == Fraction(2, 3)
    assert model.ratio(("unseen",)) == Fraction(1, 2)


def test_relfreq_matches_brute_force():
    rng = random.Random(11)
    words = ["may", "be", "the", "cat", "perhaps", "sat", "x"]
    train = Dataset([Sentence([rng.choice(words) for _ in range(rng.randint(1, 6))], None,
                              rng.randint(0, 1)) for _ in range(10)])
    model = relfreq_train(train)
    for sent in list(train) + [Sentence(["unknown", "may", "cat"])]:
        ratios, expected = brute_force_relfreq(train, sent.tokens)
        for gram, r in ratios.items():
            assert model.ratio(gram) == r
        assert [p.score for p in relfreq_score(model, sent)] == expected


def test_relfreq_duplicate_negative_never_raises_ratios():
    rng = random.Random(5)
    words = ["a", "b", "c", "d"]
    for _ in range(50):
        train = [Sentence([rng.choice(words) for _ in range(rng.randint(1, 4))], None,
                          rng.randint(0, 1)) for _ in range(6)]
        neg = Sentence([rng.choice(words) for _ in range(3)], None, 0)
        before = relfreq_train(Dataset(train + [neg]))
        after = relfreq_train(Dataset(train + [neg, neg]))
        for gram in set(before.positive) | set(before.negative):
            assert after.ratio(gram) <= before.ratio(gram)
        for sent in train:
            assert all(0.0 <= p.score <= 1.0 for p in relfreq_score(after, sent))


# -- supervised ---------------------------------------------------------------------------

def test_supervised_decisions():
    preds = label_supervised_probs([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
    assert [p.label for p in preds] == [0, 0, 1]
    assert [p.score for p in preds] == [0.1, 0.5, 0.8]


# -- dataset level -------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["attention", "backprop", "supervised", "relfreq"])
def test_predict_dataset_keeps_order(method, vocab, corpus):
    model = make_tagger(vocab) if method == "supervised" else make_classifier(vocab)
    rf = relfreq_train(corpus)
    preds = predict_dataset(method, corpus, vocab, model, rf, batch_size=5)
    assert [len(p) for p in preds.tokens] == [len(s) for s in corpus]
    if method == "attention":
        single = model(encode_batch([corpus[7]], vocab)).traces()[0]
        assert preds.scores[7] == pytest.approx(single.a_tilde.tolist(), abs=1e-12)
