import random

import pytest
import torch

from attnlabel.corpus import Dataset, Sentence, build_vocab
from attnlabel.model import DimensionConfig, SentenceClassifier, SupervisedTagger

TINY = DimensionConfig(word_emb_dim=6, char_emb_dim=4, char_hidden=3, word_hidden=5,
                       combined_h=4, attention_e=3, sentence_d=3)

WORDS = ["the", "The", "cat", "may", "possibly", "sat", "on", "mat", "Whether", "a", "x"]


def random_sentences(n, seed=0, min_len=1, max_len=6):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        toks = [rng.choice(WORDS) for _ in range(rng.randint(min_len, max_len))]
        labels = [int(t.lower() in ("may", "possibly", "whether")) for t in toks]
        out.append(Sentence(toks, labels, int(any(labels))))
    return out


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def corpus():
    return Dataset(random_sentences(24, seed=3), "train")


@pytest.fixture
def vocab(corpus):
    return build_vocab(corpus)


def make_classifier(vocab, dims=TINY, seed=0, dtype=torch.float64, **kw):
    kw.setdefault("dropout", 0.0)
    model = SentenceClassifier(vocab.n_words, vocab.n_chars, dims,
                               generator=torch.Generator().manual_seed(seed), **kw)
    return model.to(dtype)


def make_tagger(vocab, dims=TINY, seed=0, dtype=torch.float64):
    model = SupervisedTagger(vocab.n_words, vocab.n_chars, dims, dropout=0.0,
                             generator=torch.Generator().manual_seed(seed))
    return model.to(dtype)


ACCEPTANCE_LINES = []


def record_acceptance(number, ok, detail):
    """Print and remember one pass/fail line; the summary hook repeats them."""
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
