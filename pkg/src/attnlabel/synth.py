"""Synthetic trigger-word corpora for desk-scale experiments.

Positive sentences contain at least one trigger word (token label 1); negative
sentences are drawn from distractor words only.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset, Sentence, write_token_annotated

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 200
    n_triggers: int = 10
    min_length: int = 5
    max_length: int = 15
    positive_rate: float = 0.5
    max_triggers_per_sentence: int = 2
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_triggers < 1:
            raise ValueError("need at least one distractor and one trigger word")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("invalid sentence length range")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ValueError("positive_rate must be in [0, 1]")
        if self.max_triggers_per_sentence < 1:
            raise ValueError("max_triggers_per_sentence must be >= 1")


def _words(rng: np.random.Generator, n: int, taken: set) -> list:
    letters = list(string.ascii_lowercase)
    out = []
    while len(out) < n:
        length = int(rng.integers(3, 9))
        word = "".join(rng.choice(letters, size=length))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def lexicon(spec: SyntheticSpec):
    """(distractors, triggers): two disjoint word lists fixed by the seed."""
    rng = np.random.default_rng([spec.seed, 0])
    taken: set = set()
    distractors = _words(rng, spec.vocab_size, taken)
    triggers = _words(rng, spec.n_triggers, taken)
    return distractors, triggers


def _sentence(rng, positive, distractors, triggers, spec):
    n = int(rng.integers(spec.min_length, spec.max_length + 1))
    tokens = [distractors[i] for i in rng.integers(0, len(distractors), size=n)]
    labels = [0] * n
    if positive:
        k = int(rng.integers(1, min(spec.max_triggers_per_sentence, n) + 1))
        for pos in rng.choice(n, size=k, replace=False):
            tokens[pos] = triggers[int(rng.integers(0, len(triggers)))]
            labels[pos] = 1
    return Sentence(tokens, labels, int(positive))


def generate(spec: SyntheticSpec = SyntheticSpec()) -> dict:
    distractors, triggers = lexicon(spec)
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    out = {}
    for k, split in enumerate(SPLITS):
        rng = np.random.default_rng([spec.seed, k + 1])
        sents = [_sentence(rng, rng.random() < spec.positive_rate, distractors, triggers, spec)
                 for _ in range(sizes[split])]
        out[split] = Dataset(sents, split)
    return out


def write_corpus(spec: SyntheticSpec, out_dir) -> dict:
    """Write train/dev/test TSV files; returns split -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, ds in generate(spec).items():
        paths[split] = out_dir / f"{split}.tsv"
        write_token_annotated(ds, paths[split])
    return paths
