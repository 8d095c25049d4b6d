"""Sentence F1, token precision/recall/F1 and token MAP."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class UndefinedMetric(ValueError):
    pass


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def binary_prf(pred: Sequence[int], gold: Sequence[int]) -> PRF:
    """Precision/recall/F1 of the positive class; 0 wherever a denominator is 0."""
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gold.shape}")
    tp = int(np.sum((pred == 1) & (gold == 1)))
    fp = int(np.sum((pred == 1) & (gold == 0)))
    fn = int(np.sum((pred == 0) & (gold == 1)))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f, tp, fp, fn)


def sentence_f1(pred: Sequence[int], gold: Sequence[int]) -> float:
    return binary_prf(pred, gold).f1


def average_precision(scores: Sequence[float], gold: Sequence[int]) -> float:
    """AP of the ranking by descending score; ties keep token order.

    Raises UndefinedMetric when there is no positive token.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if scores.shape != gold.shape:
        raise ValueError("scores and gold differ in length")
    n_pos = int(gold.sum())
    if n_pos == 0:
        raise UndefinedMetric("no positive tokens")
    order = np.argsort(-scores, kind="stable")
    ranked = gold[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float(np.sum((hits / ranks)[ranked == 1]) / n_pos)


def mean_average_precision(scores: Sequence[Sequence[float]], gold: Sequence[Sequence[int]],
                           ranking: str = "sentence", empty: str = "skip") -> float:
    """MAP over sentences.

    ranking="sentence": mean of per-sentence AP; sentences without positive
    tokens are skipped (empty="skip") or count as AP 0 (empty="zero").
    ranking="global": one AP over all tokens of the corpus ranked together.
    """
    if len(scores) != len(gold):
        raise ValueError("scores and gold differ in number of sentences")
    if ranking == "global":
        flat_s = np.concatenate([np.asarray(s, dtype=np.float64) for s in scores]) if scores else []
        flat_g = np.concatenate([np.asarray(g, dtype=np.int64) for g in gold]) if gold else []
        return average_precision(flat_s, flat_g)
    if ranking != "sentence":
        raise ValueError(f"unknown ranking {ranking!r}")
    if empty not in ("skip", "zero"):
        raise ValueError(f"unknown empty-sentence policy {empty!r}")
    aps = []
    for s, g in zip(scores, gold):
        if not any(g):
            if empty == "zero":
                aps.append(0.0)
            continue
        aps.append(average_precision(s, g))
    if not aps:
        raise UndefinedMetric("no sentence has a positive token")
    return math.fsum(aps) / len(aps)


@dataclass
class EvalReport:
    method: str = ""
    sentence_f1: Optional[float] = None
    token_map: Optional[float] = None
    token_precision: float = 0.0
    token_recall: float = 0.0
    token_f1: float = 0.0
    counts: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, record: dict) -> "EvalReport":
        return cls(**record)


METRIC_FIELDS = ("sentence_f1", "token_map", "token_precision", "token_recall", "token_f1")


def evaluate_tokens(method: str, pred_labels, scores, gold_labels,
                    sentence_pred=None, sentence_gold=None,
                    ranking: str = "sentence", empty: str = "skip") -> EvalReport:
    """Build a report from per-sentence token predictions.

    Token P/R/F1 are computed over all tokens of all sentences pooled.
    Sentence F1 is filled in only when sentence predictions are supplied.
    """
    flat_pred = [x for sent in pred_labels for x in sent]
    flat_gold = [x for sent in gold_labels for x in sent]
    tok = binary_prf(flat_pred, flat_gold)
    counts = {"token_tp": tok.tp, "token_fp": tok.fp, "token_fn": tok.fn}
    sent_f1 = None
    if sentence_pred is not None:
        sent = binary_prf(sentence_pred, sentence_gold)
        sent_f1 = sent.f1
        counts.update(sentence_tp=sent.tp, sentence_fp=sent.fp, sentence_fn=sent.fn)
    try:
        token_map = mean_average_precision(scores, gold_labels, ranking, empty)
    except UndefinedMetric:
        token_map = None
    return EvalReport(method, sent_f1, token_map, tok.precision, tok.recall, tok.f1, counts)


def average_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of each metric (fields that are None everywhere stay None);
    counts are summed."""
    if not reports:
        raise ValueError("need at least one report")
    out = EvalReport(method=reports[0].method)
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        setattr(out, name, math.fsum(values) / len(values) if values else None)
    counts: dict = {}
    for r in reports:
        for k, v in r.counts.items():
            counts[k] = counts.get(k, 0) + v
    out.counts = dict(sorted(counts.items()))
    return out


def format_table(reports: Sequence[EvalReport]) -> str:
    """Human-readable table, one row per method, 4 decimals."""
    header = f"{'method':<12} {'Sent-F1':>8} {'MAP':>8} {'P':>8} {'R':>8} {'F1':>8}"
    lines = [header]
    for r in reports:
        cells = [r.sentence_f1, r.token_map, r.token_precision, r.token_recall, r.token_f1]
        text = " ".join(f"{'-':>8}" if v is None else f"{v:>8.4f}" for v in cells)
        lines.append(f"{r.method:<12} {text}")
    return "\n".join(lines)
