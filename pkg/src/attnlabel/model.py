"""BiLSTM sentence classifier with logistic soft attention, and the token tagger.

Tensors are batch-major: ``[B, T, ...]`` for token-level values with a
``mask`` of shape ``[B, T]`` marking real tokens. Padded positions never reach
an output: recurrent states are held across them and their attention weight
is forced to zero before normalization.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import PAD_ID, Batch, Vocab

ATTENTION_EPS = 1e-12


class NumericalFault(RuntimeError):
    """A non-finite value appeared; ``block`` names where it was first seen."""

    def __init__(self, block: str, detail: str = ""):
        self.block = block
        super().__init__(f"non-finite values in {block}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class DimensionConfig:
    word_emb_dim: int = 300
    char_emb_dim: int = 100
    char_hidden: int = 100
    word_hidden: int = 300
    combined_h: int = 200
    attention_e: int = 100
    sentence_d: int = 50

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def word_rep_dim(self) -> int:
        return self.word_emb_dim + 2 * self.char_hidden


def _check(block: str, t: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericalFault(block)
    return t


def glorot_(t: torch.Tensor, generator: Optional[torch.Generator]) -> torch.Tensor:
    fan_out, fan_in = t.shape[0], t.shape[1]
    limit = (6.0 / (fan_in + fan_out)) ** 0.5
    with torch.no_grad():
        t.uniform_(-limit, limit, generator=generator)
    return t


def dropout(x: torch.Tensor, p: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout; identity (and no RNG draw) when p == 0 or no generator."""
    if p <= 0.0 or generator is None:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class Dense(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out))

    def reset_parameters(self, generator=None):
        glorot_(self.weight, generator)
        with torch.no_grad():
            self.bias.zero_()

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LSTM(nn.Module):
    """One direction of a standard LSTM (input/forget/output gates, no peepholes).

    Gate order inside the stacked weights is input, forget, candidate, output.
    """

    def __init__(self, n_in: int, n_hidden: int):
        super().__init__()
        self.n_hidden = n_hidden
        self.weight_ih = nn.Parameter(torch.empty(4 * n_hidden, n_in))
        self.weight_hh = nn.Parameter(torch.empty(4 * n_hidden, n_hidden))
        self.bias = nn.Parameter(torch.zeros(4 * n_hidden))

    def reset_parameters(self, generator=None):
        for w in self.weight_ih.view(4, self.n_hidden, -1):
            glorot_(w, generator)
        for w in self.weight_hh.view(4, self.n_hidden, -1):
            glorot_(w, generator)
        with torch.no_grad():
            self.bias.zero_()
            self.bias[self.n_hidden:2 * self.n_hidden] = 1.0

    def forward(self, x, mask):
        """x: [B, T, n_in], mask: [B, T]. Returns outputs [B, T, H] and final state [B, H].

        Where mask is 0 the state is carried over unchanged and the output is 0.
        """
        b, t_max, _ = x.shape
        h = x.new_zeros(b, self.n_hidden)
        c = x.new_zeros(b, self.n_hidden)
        gates_x = F.linear(x, self.weight_ih, self.bias)
        outputs = []
        for t in range(t_max):
            gates = gates_x[:, t] + h @ self.weight_hh.T
            i, f, g, o = gates.chunk(4, dim=1)
            c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h_new = torch.sigmoid(o) * torch.tanh(c_new)
            keep = mask[:, t:t + 1] > 0
            c = torch.where(keep, c_new, c)
            h = torch.where(keep, h_new, h)
            outputs.append(torch.where(keep, h_new, torch.zeros_like(h_new)))
        return torch.stack(outputs, dim=1), h


def reverse_padded(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Reverse each row's first ``lengths[b]`` steps, leaving padding in place."""
    t_max = x.shape[1]
    pos = torch.arange(t_max).unsqueeze(0)
    lens = lengths.unsqueeze(1)
    idx = torch.where(pos < lens, lens - 1 - pos, pos)
    idx = idx.view(*idx.shape, *([1] * (x.dim() - 2))).expand_as(x)
    return x.gather(1, idx)


class BiLSTM(nn.Module):
    def __init__(self, n_in: int, n_hidden: int):
        super().__init__()
        self.fwd = LSTM(n_in, n_hidden)
        self.bwd = LSTM(n_in, n_hidden)

    def reset_parameters(self, generator=None):
        self.fwd.reset_parameters(generator)
        self.bwd.reset_parameters(generator)

    def forward(self, x, mask, lengths):
        """Returns per-position ``[fwd; bwd]`` states [B, T, 2H] and the final
        states of each direction (forward at the last token, backward at the first)."""
        out_f, last_f = self.fwd(x, mask)
        out_b_rev, last_b = self.bwd(reverse_padded(x, lengths), mask)
        out_b = reverse_padded(out_b_rev, lengths)
        return torch.cat([out_f, out_b], dim=-1), last_f, last_b


@dataclass
class ForwardTrace:
    """Outputs for one sentence (numpy, unpadded)."""
    h: np.ndarray
    e_tilde: Optional[np.ndarray]
    a_tilde: Optional[np.ndarray]
    a: Optional[np.ndarray]
    c: np.ndarray
    d: np.ndarray
    y: float
    uniform_fallback: bool = False


@dataclass
class BatchTrace:
    w: torch.Tensor            # [B, T, Dw] word representations before dropout
    h_tilde: torch.Tensor      # [B, T, 2*word_hidden]
    h: torch.Tensor            # [B, T, combined_h]
    e_tilde: Optional[torch.Tensor]
    a_tilde: Optional[torch.Tensor]
    a: Optional[torch.Tensor]
    c: torch.Tensor
    d: torch.Tensor
    y: torch.Tensor            # [B]
    mask: torch.Tensor
    lengths: torch.Tensor
    uniform_fallback: torch.Tensor  # [B] bool

    def traces(self) -> list:
        out = []
        for b, n in enumerate(self.lengths.tolist()):
            def cut(t):
                return None if t is None else t[b, :n].detach().cpu().numpy()
            out.append(ForwardTrace(
                h=cut(self.h), e_tilde=cut(self.e_tilde), a_tilde=cut(self.a_tilde),
                a=cut(self.a), c=self.c[b].detach().cpu().numpy(),
                d=self.d[b].detach().cpu().numpy(), y=float(self.y[b].detach()),
                uniform_fallback=bool(self.uniform_fallback[b]),
            ))
        return out


def soft_attention(e_tilde: torch.Tensor, mask: Optional[torch.Tensor] = None):
    """Logistic attention: returns (a_tilde, a, fallback).

    ``a_tilde = sigmoid(e_tilde)`` is zeroed on padding and ``a`` is its
    sum-normalized version. Rows whose sum falls below ATTENTION_EPS get
    uniform weights; ``fallback`` flags them.
    """
    if mask is None:
        mask = torch.ones_like(e_tilde)
    a_tilde = torch.sigmoid(e_tilde) * mask
    total = a_tilde.sum(dim=-1, keepdim=True)
    fallback = total.squeeze(-1) < ATTENTION_EPS
    uniform = mask / mask.sum(dim=-1, keepdim=True)
    safe_total = torch.where(total < ATTENTION_EPS, torch.ones_like(total), total)
    a = torch.where(fallback.unsqueeze(-1), uniform, a_tilde / safe_total)
    return a_tilde, a, fallback


def exp_attention(e_tilde: torch.Tensor, mask: Optional[torch.Tensor] = None):
    """Softmax over real positions (max-subtracted); padding gets exactly 0."""
    if mask is None:
        mask = torch.ones_like(e_tilde)
    scores = e_tilde.masked_fill(mask <= 0, float("-inf"))
    shifted = scores - scores.max(dim=-1, keepdim=True).values.detach()
    weights = torch.exp(shifted) * mask
    return weights / weights.sum(dim=-1, keepdim=True)


def sentence_representation(a: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    return (a.unsqueeze(-1) * h).sum(dim=-2)


class Encoder(nn.Module):
    """Word embeddings + character BiLSTM, word BiLSTM, tanh projection."""

    def __init__(self, n_words: int, n_chars: int, dims: DimensionConfig):
        super().__init__()
        self.dims = dims
        self.word_embeddings = nn.Parameter(torch.empty(n_words, dims.word_emb_dim))
        self.char_embeddings = nn.Parameter(torch.empty(n_chars, dims.char_emb_dim))
        self.char_lstm = BiLSTM(dims.char_emb_dim, dims.char_hidden)
        self.word_lstm = BiLSTM(dims.word_rep_dim, dims.word_hidden)
        self.projection = Dense(2 * dims.word_hidden, dims.combined_h)

    def reset_parameters(self, generator=None):
        glorot_(self.word_embeddings, generator)
        glorot_(self.char_embeddings, generator)
        with torch.no_grad():
            self.word_embeddings[PAD_ID] = 0.0
            self.char_embeddings[PAD_ID] = 0.0
        self.char_lstm.reset_parameters(generator)
        self.word_lstm.reset_parameters(generator)
        self.projection.reset_parameters(generator)

    def char_encode(self, char_ids: torch.Tensor, char_lengths: torch.Tensor) -> torch.Tensor:
        """char_ids [N, C] -> [N, 2*char_hidden]: final states of both directions.

        A zero-length row (padding token) encodes to zeros.
        """
        emb = F.embedding(char_ids, self.char_embeddings, padding_idx=PAD_ID)
        cmask = (torch.arange(char_ids.shape[1]).unsqueeze(0) < char_lengths.unsqueeze(1))
        _, last_f, last_b = self.char_lstm(emb, cmask.to(emb.dtype), char_lengths)
        return torch.cat([last_f, last_b], dim=-1)

    def word_representations(self, word_ids, char_ids, char_lengths, mask):
        b, t_max = word_ids.shape
        words = F.embedding(word_ids, self.word_embeddings, padding_idx=PAD_ID)
        _check("word_embeddings", words)
        chars = words.new_zeros(b, t_max, 2 * self.dims.char_hidden)
        real = mask > 0
        if real.any():
            # repeated tokens share one char-LSTM pass
            keys = torch.cat([char_ids[real], char_lengths[real].unsqueeze(-1)], dim=-1)
            uniq, inverse = torch.unique(keys, dim=0, return_inverse=True)
            encoded = self.char_encode(uniq[:, :-1], uniq[:, -1])[inverse]
            chars = chars.masked_scatter(real.unsqueeze(-1), encoded)
        _check("char_encoder", chars)
        return torch.cat([words, chars], dim=-1) * mask.unsqueeze(-1)

    def encode_sentence(self, w, mask, lengths, p_drop=0.0, generator=None):
        """w [B, T, Dw] -> (h_tilde, h, last_fwd, last_bwd)."""
        w = dropout(w, p_drop, generator)
        h_tilde, last_f, last_b = self.word_lstm(w, mask, lengths)
        _check("word_lstm", h_tilde)
        h = torch.tanh(self.projection(h_tilde)) * mask.unsqueeze(-1)
        _check("projection", h)
        h = dropout(h, p_drop, generator)
        return h_tilde, h, last_f, last_b


def batch_tensors(batch: Batch, dtype=torch.float32):
    return (
        torch.from_numpy(batch.word_ids),
        torch.from_numpy(batch.char_ids),
        torch.from_numpy(batch.char_lengths),
        torch.from_numpy(batch.mask).to(dtype),
        torch.from_numpy(batch.lengths),
    )


class SentenceClassifier(nn.Module):
    """Binary sentence classifier composing tokens by attention or by last states.

    composition="attention": e = tanh(W_e h + b_e), e~ = W_e~ e + b_e~,
    weights from ``soft_attention`` (attention="logistic") or ``exp_attention``
    (attention="exp"), c = sum a_i h_i.
    composition="last": c = [last forward state; first backward state].
    Then d = tanh(W_d c + b_d), y = sigmoid(W_y d + b_y).
    """

    kind = "classifier"

    def __init__(self, n_words: int, n_chars: int, dims: DimensionConfig = DimensionConfig(),
                 attention: str = "logistic", composition: str = "attention",
                 dropout: float = 0.5, generator: Optional[torch.Generator] = None):
        super().__init__()
        if attention not in ("logistic", "exp"):
            raise ValueError(f"unknown attention {attention!r}")
        if composition not in ("attention", "last"):
            raise ValueError(f"unknown composition {composition!r}")
        self.dims = dims
        self.attention = attention
        self.composition = composition
        self.dropout = dropout
        self.encoder = Encoder(n_words, n_chars, dims)
        if composition == "attention":
            self.attn_hidden = Dense(dims.combined_h, dims.attention_e)
            self.attn_score = Dense(dims.attention_e, 1)
            c_dim = dims.combined_h
        else:
            c_dim = 2 * dims.word_hidden
        self.output_hidden = Dense(c_dim, dims.sentence_d)
        self.output = Dense(dims.sentence_d, 1)
        self.reset_parameters(generator)

    def options(self) -> dict:
        return {"attention": self.attention, "composition": self.composition,
                "dropout": self.dropout}

    def reset_parameters(self, generator=None):
        self.encoder.reset_parameters(generator)
        for layer in self.dense_layers():
            layer.reset_parameters(generator)

    def dense_layers(self):
        if self.composition == "attention":
            yield self.attn_hidden
            yield self.attn_score
        yield self.output_hidden
        yield self.output

    def attention_scores(self, h: torch.Tensor) -> torch.Tensor:
        e = torch.tanh(self.attn_hidden(h))
        return self.attn_score(e).squeeze(-1)

    def sentence_score(self, c: torch.Tensor):
        d = torch.tanh(self.output_hidden(c))
        y = torch.sigmoid(self.output(d)).squeeze(-1)
        return d, y

    def forward(self, batch: Batch, mode: str = "eval",
                generator: Optional[torch.Generator] = None,
                w: Optional[torch.Tensor] = None) -> BatchTrace:
        """Run the classifier. In train mode dropout draws from ``generator``.

        ``w`` may be supplied to bypass the embedding lookup (used for
        gradients with respect to word representations).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        dtype = self.output.weight.dtype
        word_ids, char_ids, char_lengths, mask, lengths = batch_tensors(batch, dtype)
        if w is None:
            w = self.encoder.word_representations(word_ids, char_ids, char_lengths, mask)
        p = self.dropout if mode == "train" else 0.0
        gen = generator if mode == "train" else None
        h_tilde, h, last_f, last_b = self.encoder.encode_sentence(w, mask, lengths, p, gen)
        e_tilde = a_tilde = a = None
        fallback = torch.zeros(len(lengths), dtype=torch.bool)
        if self.composition == "attention":
            e_tilde = _check("attention", self.attention_scores(h))
            if self.attention == "logistic":
                a_tilde, a, fallback = soft_attention(e_tilde, mask)
            else:
                a = exp_attention(e_tilde, mask)
            c = sentence_representation(a, h)
        else:
            c = torch.cat([last_f, last_b], dim=-1)
        d, y = self.sentence_score(c)
        _check("output", y)
        return BatchTrace(w, h_tilde, h, e_tilde, a_tilde, a, c, d, y, mask, lengths, fallback)


@dataclass
class TaggerOutput:
    w: torch.Tensor
    probs: torch.Tensor        # [B, T, 2], rows of padding are meaningless
    mask: torch.Tensor
    lengths: torch.Tensor


class SupervisedTagger(nn.Module):
    """Per-token 2-way softmax on top of the shared encoder (no CRF)."""

    kind = "supervised"

    def __init__(self, n_words: int, n_chars: int, dims: DimensionConfig = DimensionConfig(),
                 dropout: float = 0.5, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.dims = dims
        self.dropout = dropout
        self.encoder = Encoder(n_words, n_chars, dims)
        self.output = Dense(dims.combined_h, 2)
        self.reset_parameters(generator)

    def options(self) -> dict:
        return {"dropout": self.dropout}

    def reset_parameters(self, generator=None):
        self.encoder.reset_parameters(generator)
        self.output.reset_parameters(generator)

    def forward(self, batch: Batch, mode: str = "eval",
                generator: Optional[torch.Generator] = None) -> TaggerOutput:
        dtype = self.output.weight.dtype
        word_ids, char_ids, char_lengths, mask, lengths = batch_tensors(batch, dtype)
        w = self.encoder.word_representations(word_ids, char_ids, char_lengths, mask)
        p = self.dropout if mode == "train" else 0.0
        gen = generator if mode == "train" else None
        _, h, _, _ = self.encoder.encode_sentence(w, mask, lengths, p, gen)
        probs = torch.softmax(self.output(h), dim=-1)
        _check("output", probs)
        return TaggerOutput(w, probs, mask, lengths)


def load_pretrained(model, matrix: np.ndarray) -> None:
    """Copy an embedding matrix (from ``corpus.load_embeddings``) into the model."""
    emb = model.encoder.word_embeddings
    if tuple(matrix.shape) != tuple(emb.shape):
        raise ValueError(f"embedding matrix {matrix.shape} does not fit {tuple(emb.shape)}")
    with torch.no_grad():
        emb.copy_(torch.as_tensor(matrix, dtype=emb.dtype))
        emb[PAD_ID] = 0.0


def gradients(model: nn.Module, loss: torch.Tensor, w: Optional[torch.Tensor] = None):
    """Reverse-mode gradients of ``loss`` for every named parameter and, when
    given, for the word representations ``w`` ([B, T, Dw])."""
    names, params = zip(*model.named_parameters())
    targets = list(params) + ([w] if w is not None else [])
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        out[name] = torch.zeros_like(p) if g is None else g
    w_grad = grads[-1] if w is not None else None
    return out, w_grad


# -- checkpoints --------------------------------------------------------------

MAGIC = b"ATTNLBL\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, model: nn.Module, vocab: Vocab, meta: Optional[dict] = None) -> None:
    """Single file: magic, version (u32), header length (u64), JSON header, raw tensors."""
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "kind": model.kind,
        "dims": asdict(model.dims),
        "options": model.options(),
        "vocab": vocab.to_dict(),
        "vocab_sha256": vocab.digest(),
        "tensors": tensors,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with Path(path).open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        f.write(raw)
        for data in blobs:
            f.write(data)


def load_checkpoint(path):
    """Returns ``(model, vocab, meta)``; the model is in float64 iff it was saved so."""
    path = Path(path)
    with path.open("rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    vocab = Vocab.from_dict(header["vocab"])
    if vocab.digest() != header["vocab_sha256"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    dims = DimensionConfig(**header["dims"])
    if header["kind"] == "classifier":
        model = SentenceClassifier(vocab.n_words, vocab.n_chars, dims, **header["options"])
    elif header["kind"] == "supervised":
        model = SupervisedTagger(vocab.n_words, vocab.n_chars, dims, **header["options"])
    else:
        raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
    state = {}
    for spec in header["tensors"]:
        buf = payload[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
    first = next(iter(state.values()))
    model = model.to(first.dtype)
    model.load_state_dict(state)
    model.eval()
    return model, vocab, header["meta"]
