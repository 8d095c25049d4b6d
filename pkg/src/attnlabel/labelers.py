"""Token labelers: attention weights, input gradients, n-gram relative
frequency, and the supervised tagger."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .corpus import Batch, Dataset, Sentence, Vocab, make_batches

METHODS = ("attention", "backprop", "relfreq", "supervised")
BOS = "<s>"
EOS = "</s>"
BACKPROP_SIGMAS = 1.5


@dataclass(frozen=True)
class TokenPrediction:
    score: float
    label: int
    method: str


def _threshold(scores, boundary: float, method: str) -> list:
    return [TokenPrediction(float(s), int(s > boundary), method) for s in scores]


# -- attention ------------------------------------------------------------------

def label_by_attention(trace) -> list:
    """score = unnormalized attention weight; positive iff it exceeds 0.5."""
    if trace.a_tilde is None:
        raise ValueError("attention labeling needs a logistic-attention trace")
    return _threshold(trace.a_tilde, 0.5, "attention")


# -- backprop -----------------------------------------------------------------------

def outlier_labels(magnitudes: Sequence[float], sigmas: float = BACKPROP_SIGMAS) -> list:
    """1 where a magnitude exceeds mean + sigmas * (population) std of the sentence."""
    m = np.asarray(magnitudes, dtype=np.float64)
    if m.max() == m.min():
        return [0] * len(m)
    bound = m.mean() + sigmas * m.std()
    return [int(x > bound) for x in m]


def gradient_magnitudes(model, batch: Batch) -> list:
    """Per-sentence ``|dL1/dw_i|`` with the pseudo-label 0, in eval mode.

    Sentences in a batch are independent in eval mode, so one backward pass of
    the summed loss yields every sentence's gradients.
    """
    with torch.enable_grad():
        trace = model(batch, mode="eval")
        loss = (trace.y ** 2).sum()
        (g,) = torch.autograd.grad(loss, trace.w)
    norms = g.norm(dim=-1).detach().cpu().numpy().astype(np.float64)
    return [norms[b, :n] for b, n in enumerate(batch.lengths.tolist())]


def label_by_backprop(model, batch: Batch, sigmas: float = BACKPROP_SIGMAS) -> list:
    """Gradient-magnitude labels for every sentence of ``batch``."""
    out = []
    for mags in gradient_magnitudes(model, batch):
        labels = outlier_labels(mags, sigmas)
        out.append([TokenPrediction(float(s), lab, "backprop") for s, lab in zip(mags, labels)])
    return out


# -- relative frequency -------------------------------------------------------------

def padded_stream(tokens: Iterable[str]) -> list:
    return [BOS] + [t.lower() for t in tokens] + [EOS]


def covering_ngrams(tokens: Sequence[str], max_n: int = 3) -> list:
    """For each token, the n-grams (n = 1..max_n) of the boundary-padded stream
    that include it."""
    stream = padded_stream(tokens)
    out = []
    for i in range(1, len(stream) - 1):
        feats = []
        for n in range(1, max_n + 1):
            for start in range(max(0, i - n + 1), min(i, len(stream) - n) + 1):
                feats.append(tuple(stream[start:start + n]))
        out.append(feats)
    return out


def sentence_ngrams(tokens: Sequence[str], max_n: int = 3) -> set:
    stream = padded_stream(tokens)
    feats = set()
    for n in range(1, max_n + 1):
        for start in range(len(stream) - n + 1):
            gram = tuple(stream[start:start + n])
            if n == 1 and gram[0] in (BOS, EOS):
                continue
            feats.add(gram)
    return feats


@dataclass
class RelFreqModel:
    positive: Counter
    negative: Counter
    max_n: int = 3
    alpha: float = 0.0

    def ratio(self, feature) -> Optional[Fraction]:
        """r_k as an exact fraction; None for a feature never seen (unsmoothed)."""
        c1 = self.positive.get(feature, 0)
        c0 = self.negative.get(feature, 0)
        a = Fraction(self.alpha)
        if c1 + c0 == 0 and a == 0:
            return None
        return (c1 + a) / (c1 + c0 + 2 * a)

    def to_dict(self) -> dict:
        feats = sorted(set(self.positive) | set(self.negative))
        return {
            "max_n": self.max_n,
            "alpha": self.alpha,
            "counts": [[list(f), self.positive.get(f, 0), self.negative.get(f, 0)] for f in feats],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RelFreqModel":
        pos, neg = Counter(), Counter()
        for feat, c1, c0 in d["counts"]:
            if c1:
                pos[tuple(feat)] = c1
            if c0:
                neg[tuple(feat)] = c0
        return cls(pos, neg, d["max_n"], d["alpha"])


def relfreq_train(train: Dataset, max_n: int = 3, alpha: float = 0.0) -> RelFreqModel:
    """Count, per n-gram, the positive and negative sentences it occurs in."""
    pos, neg = Counter(), Counter()
    for i, sent in enumerate(train):
        if sent.sentence_label is None:
            raise ValueError(f"sentence {i} has no sentence label")
        target = pos if sent.sentence_label == 1 else neg
        target.update(sentence_ngrams(sent.tokens, max_n))
    return RelFreqModel(pos, neg, max_n, alpha)


def relfreq_score(model: RelFreqModel, sentence) -> list:
    """Geometric mean of r_k over the known n-grams covering each token."""
    tokens = sentence.tokens if isinstance(sentence, Sentence) else sentence
    out = []
    for feats in covering_ngrams(tokens, model.max_n):
        ratios = [r for r in (model.ratio(f) for f in feats) if r is not None]
        if not ratios:
            score = 0.0
        else:
            product = Fraction(1)
            for r in ratios:
                product *= r
            score = float(product) ** (1.0 / len(ratios))
        out.append(TokenPrediction(score, int(score > 0.5), "relfreq"))
    return out


# -- supervised ---------------------------------------------------------------------

def label_supervised_probs(probs: np.ndarray) -> list:
    """probs: [T, 2] rows (p(0), p(1)); label 1 only if p(1) > p(0)."""
    probs = np.asarray(probs, dtype=np.float64)
    return [TokenPrediction(float(p1), int(p1 > p0), "supervised") for p0, p1 in probs]


def label_supervised(model, batch: Batch) -> list:
    with torch.no_grad():
        out = model(batch, mode="eval")
    probs = out.probs.detach().cpu().numpy()
    return [label_supervised_probs(probs[b, :n]) for b, n in enumerate(batch.lengths.tolist())]


# -- dataset-level helpers -----------------------------------------------------------

@dataclass
class DatasetPredictions:
    """Token predictions for a whole dataset, in dataset order."""
    method: str
    tokens: list                  # per sentence: list of TokenPrediction
    sentence_scores: Optional[list] = None   # y per sentence (classifier methods)

    @property
    def scores(self):
        return [[p.score for p in sent] for sent in self.tokens]

    @property
    def labels(self):
        return [[p.label for p in sent] for sent in self.tokens]

    @property
    def sentence_labels(self):
        if self.sentence_scores is None:
            return None
        return [int(y > 0.5) for y in self.sentence_scores]


def _ordered(n: int, pieces) -> list:
    out = [None] * n
    for idx, value in pieces:
        out[idx] = value
    return out


def predict_dataset(method: str, dataset: Dataset, vocab: Optional[Vocab] = None,
                    model=None, relfreq: Optional[RelFreqModel] = None,
                    batch_size: int = 32, char_max: int = 32) -> DatasetPredictions:
    """Run one labeling method over every sentence of ``dataset``."""
    n = len(dataset)
    if method == "relfreq":
        if relfreq is None:
            raise ValueError("relfreq labeling needs a RelFreqModel")
        return DatasetPredictions(method, [relfreq_score(relfreq, s) for s in dataset])
    if model is None or vocab is None:
        raise ValueError(f"{method} labeling needs a model and its vocabulary")
    tokens, ys = [], []
    for batch in make_batches(dataset, vocab, batch_size, None, char_max):
        idx = batch.indices.tolist()
        if method == "supervised":
            tokens.extend(zip(idx, label_supervised(model, batch)))
            continue
        if method == "attention":
            with torch.no_grad():
                trace = model(batch, mode="eval")
            preds = [label_by_attention(t) for t in trace.traces()]
            y = trace.y
        elif method == "backprop":
            preds = label_by_backprop(model, batch)
            with torch.no_grad():
                y = model(batch, mode="eval").y
        else:
            raise ValueError(f"unknown method {method!r}")
        tokens.extend(zip(idx, preds))
        ys.extend(zip(idx, y.detach().cpu().tolist()))
    return DatasetPredictions(method, _ordered(n, tokens), _ordered(n, ys) if ys else None)
