"""Optimization loop: AdaDelta updates, early stopping on a dev metric, seeds."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch

from .corpus import Dataset, Vocab, build_vocab, load_embeddings, make_batches
from .labelers import RelFreqModel, predict_dataset, relfreq_train
from .metrics import EvalReport, average_reports, binary_prf, evaluate_tokens
from .model import (
    DimensionConfig,
    NumericalFault,
    SentenceClassifier,
    SupervisedTagger,
    load_pretrained,
)
from .objectives import combined_loss, token_cross_entropy

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    dropout: float = 0.5
    gamma: float = 0.01
    learning_rate: float = 1.0
    rho: float = 0.95
    epsilon: float = 1e-6
    patience: int = 7
    max_epochs: int = 100
    seeds: tuple = (1, 2, 3, 4, 5)
    attention: str = "logistic"
    composition: str = "attention"
    selection_metric: str = "sentence_f1"
    reduction: str = "sum"
    clip_norm: Optional[float] = None
    min_count: int = 1
    char_max: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.selection_metric not in ("sentence_f1", "token_f1"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")


def derive_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named random stream of a run."""
    digest = hashlib.sha256(f"{seed}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# -- AdaDelta -------------------------------------------------------------------

@dataclass
class AdaDeltaState:
    sq_grad: torch.Tensor
    sq_delta: torch.Tensor


def adadelta_update(param: torch.Tensor, grad: torch.Tensor, state: AdaDeltaState,
                    learning_rate: float = 1.0, rho: float = 0.95, eps: float = 1e-6,
                    name: str = "parameter") -> None:
    """One in-place AdaDelta step on ``param`` and its accumulators."""
    if not torch.isfinite(grad).all():
        raise NumericalFault(f"gradient of {name}")
    with torch.no_grad():
        state.sq_grad.mul_(rho).addcmul_(grad, grad, value=1 - rho)
        delta = (state.sq_delta + eps).sqrt() / (state.sq_grad + eps).sqrt() * grad
        state.sq_delta.mul_(rho).addcmul_(delta, delta, value=1 - rho)
        param.sub_(learning_rate * delta)


class AdaDelta:
    def __init__(self, named_params, learning_rate=1.0, rho=0.95, eps=1e-6):
        self.named_params = list(named_params)
        self.learning_rate = learning_rate
        self.rho = rho
        self.eps = eps
        self.state = [AdaDeltaState(torch.zeros_like(p), torch.zeros_like(p))
                      for _, p in self.named_params]

    def step(self, grads: Sequence[torch.Tensor]) -> None:
        for (name, p), g, s in zip(self.named_params, grads, self.state):
            adadelta_update(p, g, s, self.learning_rate, self.rho, self.eps, name)


def clip_gradients(grads, max_norm: float):
    total = torch.sqrt(sum((g ** 2).sum() for g in grads))
    if total <= max_norm:
        return list(grads)
    return [g * (max_norm / total) for g in grads]


# -- early stopping / history -----------------------------------------------------

class EarlyStopping:
    """Tracks the best dev score; stop after ``patience`` epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if self.best is None or score > self.best:
            self.best = score
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    seconds: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        """One JSON record per epoch. Wall-clock times are left out so the
        text is reproducible; see ``seconds``."""
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.epochs)


@dataclass
class TrainResult:
    model: torch.nn.Module
    vocab: Vocab
    history: TrainHistory
    seed: int


def _make_generator(seed: int, stream: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stream))


def _init_embeddings(model, vocab, dims, seed, embeddings_path):
    if embeddings_path is None:
        return
    rng = np.random.default_rng(derive_seed(seed, "embeddings"))
    matrix, found = load_embeddings(embeddings_path, vocab, dims.word_emb_dim, rng)
    log.info("pretrained vectors for %d of %d words", int(found.sum()), vocab.n_words)
    load_pretrained(model, matrix)


def dev_sentence_f1(model, dataset: Dataset, vocab: Vocab, config: TrainConfig) -> float:
    preds = []
    with torch.no_grad():
        for batch in make_batches(dataset, vocab, config.batch_size, None, config.char_max):
            preds.extend((model(batch, mode="eval").y > 0.5).long().tolist())
    gold = [s.sentence_label for s in dataset]
    prf = binary_prf(preds, gold)
    if prf.tp + prf.fp + prf.fn == 0:
        log.warning("dev F1 undefined (no positive predictions or gold); using 0")
    return prf.f1


def dev_token_f1(model, dataset: Dataset, vocab: Vocab, config: TrainConfig) -> float:
    method = "supervised" if isinstance(model, SupervisedTagger) else "attention"
    preds = predict_dataset(method, dataset, vocab, model, batch_size=config.batch_size,
                            char_max=config.char_max)
    flat_pred = [x for sent in preds.labels for x in sent]
    flat_gold = [x for s in dataset for x in s.token_labels]
    return binary_prf(flat_pred, flat_gold).f1


def _fit(model, config: TrainConfig, train_set: Dataset, dev_set: Dataset, vocab: Vocab,
         seed: int, loss_fn, dev_metric) -> TrainHistory:
    dropout_gen = _make_generator(seed, "dropout")
    params = [p for _, p in model.named_parameters()]
    opt = AdaDelta(model.named_parameters(), config.learning_rate, config.rho, config.epsilon)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        batches = make_batches(train_set, vocab, config.batch_size,
                               derive_seed(seed, f"shuffle/{epoch}"), config.char_max)
        sums: dict = {}
        for batch in batches:
            parts = loss_fn(model, batch, dropout_gen)
            grads = torch.autograd.grad(parts["total"], params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            opt.step(grads)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        score = dev_metric(model, dev_set, vocab, config)
        improved = stopper.update(score)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        record = {"epoch": epoch, "train": sums, f"dev_{config.selection_metric}": score,
                  "best_epoch": stopper.best_epoch}
        history.epochs.append(record)
        history.seconds.append(time.perf_counter() - start)
        log.info("seed %d epoch %d loss %.4f dev %.4f", seed, epoch, sums.get("total", 0.0), score)
        if stopper.should_stop:
            break
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    return history


def train(config: TrainConfig, train_set: Dataset, dev_set: Dataset,
          vocab: Optional[Vocab] = None, seed: Optional[int] = None,
          dims: DimensionConfig = DimensionConfig(),
          embeddings_path=None) -> TrainResult:
    """Train the sentence classifier from sentence labels only; return the
    snapshot of the best dev epoch."""
    for ds in (train_set, dev_set):
        if not ds.has_sentence_labels:
            raise ValueError(f"{ds.split_name} set lacks sentence labels")
    seed = config.seeds[0] if seed is None else seed
    vocab = vocab or build_vocab(train_set, config.min_count)
    model = SentenceClassifier(vocab.n_words, vocab.n_chars, dims, config.attention,
                               config.composition, config.dropout,
                               generator=_make_generator(seed, "init"))
    _init_embeddings(model, vocab, dims, seed, embeddings_path)
    model = model.to(DTYPES[config.dtype])

    def loss_fn(model, batch, gen):
        trace = model(batch, mode="train", generator=gen)
        gold = torch.as_tensor(batch.sentence_labels, dtype=trace.y.dtype)
        parts = combined_loss(trace, gold, config.gamma, config.reduction)
        return {"l1": parts.l1, "l2": parts.l2, "l3": parts.l3, "total": parts.total}

    metric = dev_sentence_f1 if config.selection_metric == "sentence_f1" else dev_token_f1
    history = _fit(model, config, train_set, dev_set, vocab, seed, loss_fn, metric)
    return TrainResult(model, vocab, history, seed)


def train_supervised(config: TrainConfig, train_set: Dataset, dev_set: Dataset,
                     vocab: Optional[Vocab] = None, seed: Optional[int] = None,
                     dims: DimensionConfig = DimensionConfig(),
                     embeddings_path=None) -> TrainResult:
    """Train the token tagger on gold token labels, selecting on dev token F1."""
    for ds in (train_set, dev_set):
        if not ds.has_token_labels:
            raise ValueError(f"{ds.split_name} set lacks token labels")
    seed = config.seeds[0] if seed is None else seed
    vocab = vocab or build_vocab(train_set, config.min_count)
    model = SupervisedTagger(vocab.n_words, vocab.n_chars, dims, config.dropout,
                             generator=_make_generator(seed, "init"))
    _init_embeddings(model, vocab, dims, seed, embeddings_path)
    model = model.to(DTYPES[config.dtype])

    def loss_fn(model, batch, gen):
        out = model(batch, mode="train", generator=gen)
        gold = torch.from_numpy(batch.token_labels)
        return {"total": token_cross_entropy(out.probs, gold, out.mask)}

    history = _fit(model, config, train_set, dev_set, vocab, seed, loss_fn, dev_token_f1)
    return TrainResult(model, vocab, history, seed)


# -- evaluation and multi-seed experiments ------------------------------------------

def evaluate_methods(dataset: Dataset, methods: Sequence[str], classifier=None,
                     vocab: Optional[Vocab] = None, supervised=None,
                     supervised_vocab: Optional[Vocab] = None,
                     relfreq: Optional[RelFreqModel] = None,
                     ranking: str = "sentence", empty: str = "skip",
                     batch_size: int = 32, char_max: int = 32) -> list:
    """One EvalReport per available method; methods lacking a model are skipped."""
    if not dataset.has_token_labels:
        raise ValueError("evaluation needs gold token labels")
    gold = [list(s.token_labels) for s in dataset]
    gold_sent = [s.sentence_label if s.sentence_label is not None else int(any(s.token_labels))
                 for s in dataset]
    reports = []
    for method in methods:
        if method in ("attention", "backprop"):
            model, mvocab = classifier, vocab
        elif method == "supervised":
            model, mvocab = supervised, supervised_vocab or vocab
        else:
            model, mvocab = None, None
        if method in ("attention", "backprop", "supervised") and model is None:
            log.warning("skipping %s: no model available", method)
            continue
        if method == "relfreq" and relfreq is None:
            log.warning("skipping relfreq: no counts available")
            continue
        if method == "attention" and not (
                getattr(model, "composition", None) == "attention" and model.attention == "logistic"):
            log.warning("skipping attention: classifier has no logistic attention")
            continue
        preds = predict_dataset(method, dataset, mvocab, model, relfreq, batch_size, char_max)
        reports.append(evaluate_tokens(method, preds.labels, preds.scores, gold,
                                       preds.sentence_labels,
                                       gold_sent if preds.sentence_labels is not None else None,
                                       ranking, empty))
    return reports


@dataclass
class SeedRun:
    seed: int
    classifier: TrainResult
    supervised: Optional[TrainResult]
    reports: list


def run_seeds(config: TrainConfig, train_set: Dataset, dev_set: Dataset, test_set: Dataset,
              methods: Sequence[str] = ("attention", "backprop", "relfreq", "supervised"),
              dims: DimensionConfig = DimensionConfig(), embeddings_path=None,
              ranking: str = "sentence", empty: str = "skip"):
    """Train and evaluate once per seed; returns (runs, averaged reports per method)."""
    if not config.seeds:
        raise ValueError("need at least one seed")
    vocab = build_vocab(train_set, config.min_count)
    relfreq = relfreq_train(train_set) if "relfreq" in methods else None
    runs = []
    for seed in config.seeds:
        clf = train(config, train_set, dev_set, vocab, seed, dims, embeddings_path)
        sup = None
        if "supervised" in methods:
            sup = train_supervised(config, train_set, dev_set, vocab, seed, dims, embeddings_path)
        reports = evaluate_methods(test_set, methods, clf.model, vocab,
                                   sup.model if sup else None, vocab, relfreq, ranking, empty,
                                   config.batch_size, config.char_max)
        runs.append(SeedRun(seed, clf, sup, reports))
    return runs, average_by_method([run.reports for run in runs])


def average_by_method(per_seed_reports: Sequence[Sequence[EvalReport]]) -> list:
    by_method: dict = {}
    for reports in per_seed_reports:
        for r in reports:
            by_method.setdefault(r.method, []).append(r)
    return [average_reports(rs) for rs in by_method.values()]


def config_dict(config) -> dict:
    return {f.name: getattr(config, f.name) for f in fields(config)}
