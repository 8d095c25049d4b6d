"""Corpus readers/writers, vocabularies, pretrained embeddings and batching."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

DEFAULT_POSITIVE_LABELS = frozenset({"1", "c", "i"})
DEFAULT_CHAR_MAX = 32


class CorpusError(ValueError):
    """Malformed or unusable corpus/embedding input."""

    def __init__(self, message: str, path=None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


@dataclass(frozen=True)
class Sentence:
    tokens: tuple
    token_labels: Optional[tuple] = None
    sentence_label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError("a sentence needs at least one token")
        if self.token_labels is not None:
            labels = tuple(int(x) for x in self.token_labels)
            if len(labels) != len(self.tokens):
                raise ValueError(
                    f"{len(labels)} token labels for {len(self.tokens)} tokens"
                )
            if any(x not in (0, 1) for x in labels):
                raise ValueError("token labels must be 0 or 1")
            object.__setattr__(self, "token_labels", labels)
        if self.sentence_label is not None and self.sentence_label not in (0, 1):
            raise ValueError("sentence label must be 0 or 1")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class Dataset:
    sentences: tuple
    split_name: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    @property
    def has_token_labels(self) -> bool:
        return all(s.token_labels is not None for s in self.sentences)

    @property
    def has_sentence_labels(self) -> bool:
        return all(s.sentence_label is not None for s in self.sentences)


def load_token_annotated(path, positive_labels=DEFAULT_POSITIVE_LABELS,
                         split_name: str = "train") -> Dataset:
    """Read ``token<TAB>label`` lines, blank lines separating sentences.

    Labels found in ``positive_labels`` map to 1, anything else to 0.
    Sentence labels are derived from the token labels.
    """
    path = Path(path)
    positive = {str(x) for x in positive_labels}
    sentences = []
    tokens, labels = [], []

    def flush():
        if tokens:
            sentences.append(Sentence(tokens, labels, int(any(labels))))
            tokens.clear()
            labels.clear()

    with path.open(encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0]:
                raise CorpusError(
                    f"expected 'token<TAB>label', got {len(fields)} field(s)",
                    path, lineno,
                )
            tokens.append(fields[0])
            labels.append(1 if fields[1].strip() in positive else 0)
    flush()
    if not sentences:
        raise CorpusError("empty dataset", path)
    return Dataset(sentences, split_name)


def load_sentence_annotated(path, positive_labels=DEFAULT_POSITIVE_LABELS,
                            split_name: str = "train") -> Dataset:
    """Read ``label<TAB>tok tok tok`` lines, one sentence per line."""
    path = Path(path)
    positive = {str(x) for x in positive_labels}
    sentences = []
    with path.open(encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[1].split():
                raise CorpusError("expected 'label<TAB>tokens'", path, lineno)
            label = 1 if fields[0].strip() in positive else 0
            sentences.append(Sentence(fields[1].split(), None, label))
    if not sentences:
        raise CorpusError("empty dataset", path)
    return Dataset(sentences, split_name)


def load_dataset(path, fmt: str = "tokens", positive_labels=DEFAULT_POSITIVE_LABELS,
                 split_name: str = "train") -> Dataset:
    if fmt == "tokens":
        return load_token_annotated(path, positive_labels, split_name)
    if fmt == "sentences":
        return load_sentence_annotated(path, positive_labels, split_name)
    raise ValueError(f"unknown corpus format {fmt!r}")


def write_token_annotated(dataset: Dataset, path) -> None:
    """Write a dataset in the token TSV format (labels written as 0/1)."""
    with Path(path).open("w", encoding="utf-8") as f:
        for sent in dataset:
            if sent.token_labels is None:
                raise ValueError("token TSV output needs token labels")
            for tok, lab in zip(sent.tokens, sent.token_labels):
                f.write(f"{tok}\t{lab}\n")
            f.write("\n")


def derive_sentence_labels(dataset: Dataset) -> Dataset:
    """A sentence is positive iff any of its tokens is positive."""
    out = []
    for i, sent in enumerate(dataset):
        if sent.token_labels is None:
            raise ValueError(f"sentence {i} has no token labels to derive from")
        out.append(replace(sent, sentence_label=int(any(sent.token_labels))))
    return Dataset(out, dataset.split_name)


@dataclass(frozen=True)
class Vocab:
    word_to_id: dict
    char_to_id: dict
    words: tuple = field(init=False, repr=False)

    def __post_init__(self):
        for name, m in (("word", self.word_to_id), ("char", self.char_to_id)):
            if m.get(PAD) != PAD_ID or m.get(UNK) != UNK_ID:
                raise ValueError(f"{name} map must reserve 0 for PAD and 1 for UNK")
        words = [None] * len(self.word_to_id)
        for w, i in self.word_to_id.items():
            words[i] = w
        object.__setattr__(self, "words", tuple(words))

    @property
    def n_words(self) -> int:
        return len(self.word_to_id)

    @property
    def n_chars(self) -> int:
        return len(self.char_to_id)

    def word_id(self, token: str) -> int:
        return self.word_to_id.get(token.lower(), UNK_ID)

    def char_ids(self, token: str, char_max: int = DEFAULT_CHAR_MAX) -> list:
        return [self.char_to_id.get(c, UNK_ID) for c in token[:char_max]]

    def to_dict(self) -> dict:
        return {"word_to_id": self.word_to_id, "char_to_id": self.char_to_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(dict(d["word_to_id"]), dict(d["char_to_id"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _ranked_ids(counts: Counter, min_count: int) -> dict:
    ids = {PAD: PAD_ID, UNK: UNK_ID}
    for item, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if n >= min_count and item not in ids:
            ids[item] = len(ids)
    return ids


def build_vocab(train: Dataset, min_count: int = 1) -> Vocab:
    """Word ids by descending count (ties lexicographic); words are lowercased,
    characters keep their case."""
    if len(train) == 0:
        raise ValueError("cannot build a vocabulary from an empty dataset")
    if min_count < 0:
        raise ValueError("min_count must be nonnegative")
    words, chars = Counter(), Counter()
    for sent in train:
        for tok in sent.tokens:
            words[tok.lower()] += 1
            chars.update(tok)
    return Vocab(_ranked_ids(words, min_count), _ranked_ids(chars, 1))


def load_embeddings(path, vocab: Vocab, dim: int, rng: Optional[np.random.Generator] = None,
                    init_scale: Optional[float] = None):
    """Load a whitespace-separated text embedding file for the words in ``vocab``.

    Returns ``(matrix, pretrained)`` where ``pretrained[i]`` tells whether row i
    came from the file. Other rows are drawn from the uniform Glorot range of
    the matrix shape; the PAD row is zero.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = vocab.n_words
    limit = init_scale if init_scale is not None else float(np.sqrt(6.0 / (n + dim)))
    matrix = rng.uniform(-limit, limit, size=(n, dim))
    pretrained = np.zeros(n, dtype=bool)
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            parts = raw.rstrip().split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise CorpusError(
                    f"expected {dim} values, got {len(parts) - 1}", path, lineno
                )
            idx = vocab.word_to_id.get(parts[0].lower())
            if idx is None or idx == PAD_ID or pretrained[idx]:
                continue
            try:
                matrix[idx] = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise CorpusError(f"bad number: {exc}", path, lineno) from None
            pretrained[idx] = True
    matrix[PAD_ID] = 0.0
    return matrix, pretrained


@dataclass
class Batch:
    word_ids: np.ndarray          # [B, T] int64
    char_ids: np.ndarray          # [B, T, C] int64
    char_lengths: np.ndarray      # [B, T] int64, 0 on padding
    mask: np.ndarray              # [B, T] float, 1 on real tokens
    lengths: np.ndarray           # [B]
    sentence_labels: np.ndarray   # [B] float, -1 when unknown
    token_labels: Optional[np.ndarray]  # [B, T] int64, -1 on padding
    indices: np.ndarray           # position of each sentence in the source dataset

    def __len__(self):
        return len(self.lengths)


def encode_batch(sentences: Sequence[Sentence], vocab: Vocab,
                 char_max: int = DEFAULT_CHAR_MAX, indices: Optional[Iterable[int]] = None,
                 pad_to: Optional[int] = None) -> Batch:
    b = len(sentences)
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    t_max = int(lengths.max())
    if pad_to is not None:
        t_max = max(t_max, pad_to)
    c_max = max(1, min(char_max, max(len(tok) for s in sentences for tok in s.tokens)))
    word_ids = np.full((b, t_max), PAD_ID, dtype=np.int64)
    char_ids = np.full((b, t_max, c_max), PAD_ID, dtype=np.int64)
    char_lengths = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max))
    labels = np.full(b, -1.0)
    token_labels = None
    if all(s.token_labels is not None for s in sentences):
        token_labels = np.full((b, t_max), -1, dtype=np.int64)
    for i, sent in enumerate(sentences):
        mask[i, : len(sent)] = 1.0
        if sent.sentence_label is not None:
            labels[i] = sent.sentence_label
        if token_labels is not None:
            token_labels[i, : len(sent)] = sent.token_labels
        for t, tok in enumerate(sent.tokens):
            word_ids[i, t] = vocab.word_id(tok)
            cids = vocab.char_ids(tok, char_max)
            char_ids[i, t, : len(cids)] = cids
            char_lengths[i, t] = len(cids)
    idx = np.arange(b) if indices is None else np.asarray(list(indices), dtype=np.int64)
    return Batch(word_ids, char_ids, char_lengths, mask, lengths, labels, token_labels, idx)


def make_batches(dataset: Dataset, vocab: Vocab, batch_size: int = 32,
                 shuffle_seed: Optional[int] = None,
                 char_max: int = DEFAULT_CHAR_MAX) -> list:
    """Split ``dataset`` into padded batches, optionally in a seeded random order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        batches.append(encode_batch([dataset[i] for i in chunk], vocab, char_max, chunk))
    return batches
