import math

import numpy as np
import pytest
import torch

from attnlabel.corpus import Dataset, Sentence, encode_batch, make_batches
from attnlabel.model import (
    MAGIC,
    NumericalFault,
    exp_attention,
    gradients,
    load_checkpoint,
    reverse_padded,
    save_checkpoint,
    sentence_representation,
    soft_attention,
)
from attnlabel.objectives import loss_l1

from conftest import TINY, make_classifier, make_tagger, random_sentences
from gradcheck import combined_loss_value, min_max_gap, relative_errors


def t(x):
    return torch.tensor(x, dtype=torch.float64)


# -- attention arithmetic ---------------------------------------------------------

def test_soft_attention_zero_scores():
    a_tilde, a, fb = soft_attention(t([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(a_tilde, [0.5] * 3)
    np.testing.assert_allclose(a, [1 / 3] * 3)
    assert not fb


def test_soft_attention_saturation():
    a_tilde, a, _ = soft_attention(t([60.0, -60.0]))
    np.testing.assert_allclose(a_tilde, [1.0, 0.0], atol=1e-20)
    np.testing.assert_allclose(a, [1.0, 0.0], atol=1e-20)


def test_soft_attention_values():
    # sigma(1), sigma(-1) at 30 digits (mpmath); they already sum to 1
    a_tilde, a, _ = soft_attention(t([1.0, -1.0]))
    expected = [0.731058578630004879, 0.268941421369995121]
    np.testing.assert_allclose(a_tilde, expected, rtol=1e-15)
    np.testing.assert_allclose(a, expected, rtol=1e-15)


def test_soft_attention_uniform_fallback():
    a_tilde, a, fb = soft_attention(t([[-800.0, -800.0, 0.0]]), t([[1.0, 1.0, 0.0]]))
    assert bool(fb[0])
    np.testing.assert_allclose(a[0], [0.5, 0.5, 0.0])


def test_exp_attention():
    np.testing.assert_allclose(exp_attention(t([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(exp_attention(t([1.0, 0.0])),
                               [0.731058578630004879, 0.268941421369995121], rtol=1e-15)


def test_exp_attention_shift_invariant():
    e = t([0.3, -1.2, 2.5, 0.0])
    np.testing.assert_allclose(exp_attention(e), exp_attention(e + 17.0), rtol=1e-12)


def test_logistic_attention_not_shift_invariant():
    _, a1, _ = soft_attention(t([0.0, 2.0]))
    _, a2, _ = soft_attention(t([20.0, 22.0]))
    assert abs(a1[0].item() - a2[0].item()) > 0.1


@pytest.mark.parametrize("mode", ["logistic", "exp"])
def test_attention_sums_to_one(mode):
    gen = torch.Generator().manual_seed(0)
    for n in range(1, 51):
        e = torch.randn(n, generator=gen, dtype=torch.float64) * 5
        a = soft_attention(e)[1] if mode == "logistic" else exp_attention(e)
        assert abs(a.sum().item() - 1.0) < 1e-6
        assert (a >= 0).all()


def test_sentence_representation():
    h = t([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_allclose(sentence_representation(t([0.0, 1.0, 0.0]), h), [3.0, 4.0])
    same = t([[0.2, -0.4]] * 3)
    np.testing.assert_allclose(sentence_representation(t([1 / 3] * 3), same), [0.2, -0.4])
    u, v = t([1.0, 0.0]), t([0.0, 2.0])
    np.testing.assert_allclose(sentence_representation(t([0.25, 0.75]), torch.stack([u, v])),
                               0.25 * u + 0.75 * v)


def test_reverse_padded():
    x = torch.arange(8.0).view(2, 4, 1)
    out = reverse_padded(x, torch.tensor([2, 4])).squeeze(-1)
    assert out.tolist() == [[1.0, 0.0, 2.0, 3.0], [7.0, 6.0, 5.0, 4.0]]


# -- model components ----------------------------------------------------------------

def char_rep(model, vocab, token):
    ids = torch.tensor([vocab.char_ids(token)])
    return model.encoder.char_encode(ids, torch.tensor([len(token)]))[0]


def test_char_encode(vocab):
    model = make_classifier(vocab)
    single = char_rep(model, vocab, "a")
    assert torch.isfinite(single).all()
    assert torch.equal(char_rep(model, vocab, "cat"), char_rep(model, vocab, "cat"))
    assert not torch.allclose(char_rep(model, vocab, "The"), char_rep(model, vocab, "the"))


def _encode(model, batch):
    from attnlabel.model import batch_tensors
    word_ids, char_ids, char_lengths, mask, lengths = batch_tensors(batch, torch.float64)
    w = model.encoder.word_representations(word_ids, char_ids, char_lengths, mask)
    return model.encoder.encode_sentence(w, mask, lengths)


def test_encode_sentence_range_and_single_token(vocab, corpus):
    model = make_classifier(vocab)
    for p in model.encoder.projection.parameters():
        p.data.mul_(50)
    batch = encode_batch(list(corpus.sentences[:6]) + [Sentence(["cat"])], vocab)
    _, h, _, _ = _encode(model, batch)
    real = torch.from_numpy(batch.mask) > 0
    assert (h[real].abs() < 1).all()
    assert torch.isfinite(h[-1, 0]).all()


def test_encode_sentence_direction_symmetry(vocab):
    model = make_classifier(vocab)
    tokens = ["the", "cat", "may", "sat"]
    fwd_batch = encode_batch([Sentence(tokens)], vocab)
    rev_batch = encode_batch([Sentence(tokens[::-1])], vocab)
    h_tilde, _, _, _ = _encode(model, fwd_batch)
    lstm = model.encoder.word_lstm
    state_f = {k: v.clone() for k, v in lstm.fwd.state_dict().items()}
    lstm.fwd.load_state_dict(lstm.bwd.state_dict())
    lstm.bwd.load_state_dict(state_f)
    h_tilde_rev, _, _, _ = _encode(model, rev_batch)
    hid = TINY.word_hidden
    swapped = torch.cat([h_tilde_rev[0, :, hid:], h_tilde_rev[0, :, :hid]], dim=-1)
    torch.testing.assert_close(swapped.flip(0), h_tilde[0], rtol=1e-12, atol=1e-12)


def test_attention_scores(vocab):
    model = make_classifier(vocab)
    h = torch.rand(5, TINY.combined_h, dtype=torch.float64)
    h[3] = h[1]
    e = model.attention_scores(h)
    assert e[3].item() == e[1].item()
    with torch.no_grad():
        model.attn_score.bias.zero_()
        base = model.attention_scores(h)
        model.attn_score.weight.mul_(3.0)
        torch.testing.assert_close(model.attention_scores(h), 3.0 * base)
        for layer in (model.attn_hidden, model.attn_score):
            layer.weight.zero_()
            layer.bias.zero_()
        assert (model.attention_scores(h) == 0).all()


def test_sentence_score(vocab):
    model = make_classifier(vocab)
    c = torch.rand(2, TINY.combined_h, dtype=torch.float64)
    _, y = model.sentence_score(c)
    assert ((y > 0) & (y < 1)).all()
    with torch.no_grad():
        model.output.bias += 1.0
    _, y_up = model.sentence_score(c)
    assert (y_up > y).all()
    with torch.no_grad():
        for layer in (model.output_hidden, model.output):
            layer.weight.zero_()
            layer.bias.zero_()
    assert torch.equal(model.sentence_score(c)[1], torch.full((2,), 0.5, dtype=torch.float64))


# -- forward ---------------------------------------------------------------------------

def test_forward_deterministic_in_eval(vocab, corpus):
    model = make_classifier(vocab, dropout=0.5)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    a, b = model(batch), model(batch)
    assert torch.equal(a.y, b.y) and torch.equal(a.a_tilde, b.a_tilde)


def test_train_mode_without_dropout_equals_eval(vocab, corpus):
    model = make_classifier(vocab, dropout=0.0)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    gen = torch.Generator().manual_seed(1)
    assert torch.equal(model(batch, "train", gen).y, model(batch).y)


def test_dropout_changes_train_mode(vocab, corpus):
    model = make_classifier(vocab, dropout=0.5)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    y_train = model(batch, "train", torch.Generator().manual_seed(1)).y
    assert not torch.equal(y_train, model(batch).y)
    y_again = model(batch, "train", torch.Generator().manual_seed(1)).y
    assert torch.equal(y_train, y_again)


def test_pad_word_id_does_not_matter(vocab, corpus):
    model = make_classifier(vocab)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    y = model(batch).y
    pad = batch.mask == 0
    assert pad.any()
    batch.word_ids[pad] = 3
    batch.char_ids[pad] = 4
    assert torch.equal(model(batch).y, y)


def test_padding_invariance(vocab, corpus):
    model = make_classifier(vocab)
    sents = list(corpus.sentences)
    tight = encode_batch(sents, vocab)
    loose = encode_batch(sents, vocab, pad_to=tight.word_ids.shape[1] + 7)
    a, b = model(tight), model(loose)
    assert (a.y - b.y).abs().max() < 1e-9
    n = tight.word_ids.shape[1]
    assert (a.a_tilde - b.a_tilde[:, :n]).abs().max() < 1e-9
    assert (b.a_tilde[:, n:] == 0).all() and (b.a[:, n:] == 0).all()


def test_traces_per_sentence(vocab, corpus):
    model = make_classifier(vocab)
    batch = encode_batch(list(corpus.sentences[:4]), vocab)
    traces = model(batch).traces()
    assert [len(tr.a_tilde) for tr in traces] == [len(s) for s in corpus.sentences[:4]]
    for tr in traces:
        assert abs(tr.a.sum() - 1) < 1e-12 and 0 <= tr.y <= 1


def test_exp_and_last_variants(vocab, corpus):
    (batch,) = make_batches(corpus, vocab, len(corpus))
    exp = make_classifier(vocab, attention="exp")(batch)
    assert exp.a_tilde is None
    np.testing.assert_allclose(exp.a.detach().sum(-1), 1.0, rtol=1e-12)
    last = make_classifier(vocab, composition="last")(batch)
    assert last.a is None and ((last.y > 0) & (last.y < 1)).all()


def test_nan_is_reported_with_block(vocab, corpus):
    model = make_classifier(vocab)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    with torch.no_grad():
        model.attn_hidden.weight[0, 0] = float("nan")
    with pytest.raises(NumericalFault) as err:
        model(batch)
    assert err.value.block == "attention"


# -- supervised tagger --------------------------------------------------------------------

def test_supervised_forward(vocab, corpus):
    model = make_tagger(vocab)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    out = model(batch)
    np.testing.assert_allclose(out.probs.detach().sum(-1), 1.0, rtol=1e-12)
    assert torch.equal(out.probs, model(batch).probs)
    with torch.no_grad():
        model.output.weight.zero_()
        model.output.bias.zero_()
    assert (model(batch).probs == 0.5).all()


# -- gradients ---------------------------------------------------------------------------

def test_gradient_matches_finite_differences(vocab):
    sents = [Sentence(["the", "cat", "may"], None, 1), Sentence(["on", "a", "mat", "x"], None, 0)]
    batch = encode_batch(sents, vocab)
    model = make_classifier(vocab, seed=5)
    _, trace = combined_loss_value(model, batch, 0.5)
    assert min_max_gap(trace) > 1e-3
    worst = max(err for *_, err in relative_errors(model, batch, 0.5))
    assert worst < 1e-4


def test_l1_bias_gradient_zero_at_target(vocab):
    model = make_classifier(vocab)
    batch = encode_batch([Sentence(["the", "cat"])], vocab)
    trace = model(batch)
    loss = loss_l1(trace.y, trace.y.detach())
    grads, _ = gradients(model, loss)
    assert grads["output.bias"].abs().max() == 0


def test_padded_inputs_get_zero_gradient(vocab, corpus):
    model = make_classifier(vocab)
    batch = encode_batch(list(corpus.sentences[:5]), vocab, pad_to=12)
    trace = model(batch)
    gold = torch.as_tensor(batch.sentence_labels)
    from attnlabel.objectives import combined_loss
    _, w_grad = gradients(model, combined_loss(trace, gold, 0.5).total, trace.w)
    pad = torch.from_numpy(batch.mask) == 0
    assert (w_grad[pad] == 0).all()
    assert w_grad[~pad].abs().sum() > 0


# -- checkpoints ---------------------------------------------------------------------------

@pytest.mark.parametrize("factory", ["classifier", "exp", "tagger"])
def test_checkpoint_round_trip(tmp_path, vocab, corpus, factory):
    if factory == "tagger":
        model = make_tagger(vocab, dtype=torch.float32)
    else:
        model = make_classifier(vocab, dtype=torch.float32,
                                attention="exp" if factory == "exp" else "logistic")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, vocab, {"seed": 3})
    assert path.read_bytes().startswith(MAGIC)
    loaded, v2, meta = load_checkpoint(path)
    assert meta == {"seed": 3} and v2 == vocab
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    (batch,) = make_batches(corpus, vocab, len(corpus))
    if factory == "tagger":
        assert torch.equal(model(batch).probs, loaded(batch).probs)
    else:
        assert torch.equal(model(batch).y, loaded(batch).y)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope" * 10)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
