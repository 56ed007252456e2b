import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossedit.errors import CheckpointMismatch, ContextOverflow, ModelLoadError, NonPositiveTemperature
from crossedit.lm.adapters import ChatLogprobModel, LocalLogprobTransport
from crossedit.lm.checkpoint import load_checkpoint, save_checkpoint
from crossedit.lm.memory import EditedModel, EditMemory, ngram_cosine, retrieve_and_prompt
from crossedit.lm.model import ToyLM, ToyLMConfig, UniformModel, greedy_decode, sample, score_sequence
from crossedit.lm.vocab import Vocab
from crossedit.types import EditDescriptor


class Delta:
    concurrent_safe = True

    def __init__(self, v, t, eos=None):
        self.vocab_size, self.context_limit, self.eos_id, self.t = v, 64, eos, t

    def next_logprobs(self, prefix):
        lp = np.full(self.vocab_size, -1e9)
        lp[self.t] = 0.0
        return lp


# -- independent forward pass ----------------------------------------------


def _ln(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


_erf = np.vectorize(math.erf)


def numpy_forward(model: ToyLM, ids):
    p = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    cfg = model.cfg
    d, h = cfg.hidden, cfg.n_heads
    seq = [cfg.bos_id, *ids]
    t = len(seq)
    pos = np.zeros((t, d))
    for i in range(t):
        for j in range(0, d, 2):
            angle = i / 10000 ** (j / d)
            pos[i, j], pos[i, j + 1] = math.sin(angle), math.cos(angle)
    x = p["embed.weight"][seq] + pos
    for layer in range(cfg.n_layers):
        g = lambda name: p[f"blocks.{layer}.{name}"]
        a = _ln(x, g("ln1.weight"), g("ln1.bias")) @ g("qkv.weight").T
        q, k, v = a[:, :d], a[:, d : 2 * d], a[:, 2 * d :]
        heads = []
        for hi in range(h):
            sl = slice(hi * d // h, (hi + 1) * d // h)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(d // h)
            s = np.where(np.tril(np.ones((t, t))) > 0, s, -np.inf)
            w = np.exp(s - s.max(-1, keepdims=True))
            heads.append((w / w.sum(-1, keepdims=True)) @ v[:, sl])
        x = x + np.concatenate(heads, -1) @ g("proj.weight").T
        m = _ln(x, g("ln2.weight"), g("ln2.bias")) @ g("fc1.weight").T + g("fc1.bias")
        m = 0.5 * m * (1 + _erf(m / math.sqrt(2)))
        x = x + m @ g("fc2.weight").T + g("fc2.bias")
    logits = _ln(x, p["ln_f.weight"], p["ln_f.bias"]) @ p["embed.weight"].T
    logits -= logits.max(-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(-1, keepdims=True))


def test_score_sequence_matches_numpy_oracle(small_model):
    ctx, tgt = [5, 9, 12, 7], [20, 3, 8]
    oracle = numpy_forward(small_model, ctx + tgt)
    expected = [oracle[len(ctx) + i, tok] for i, tok in enumerate(tgt)]
    assert score_sequence(small_model, ctx, tgt) == pytest.approx(expected, abs=1e-10)


def test_greedy_matches_stepwise_oracle(small_model):
    ctx = [4, 11, 6]
    prefix, expected = list(ctx), []
    for _ in range(5):
        nxt = int(np.argmax(numpy_forward(small_model, prefix)[-1]))
        if nxt == small_model.eos_id:
            break
        expected.append(nxt)
        prefix.append(nxt)
    assert greedy_decode(small_model, ctx, 5) == expected


def test_uniform_model_scores():
    m = UniformModel(37)
    assert score_sequence(m, [1, 2], [3, 4, 5]) == pytest.approx([-math.log(37)] * 3)
    assert score_sequence(m, [1], []) == []


def test_delta_model_repeats_and_max_new_zero():
    m = Delta(10, 4)
    assert greedy_decode(m, [1], 6) == [4] * 6
    assert greedy_decode(m, [1], 0) == []
    assert greedy_decode(Delta(10, 4, eos=4), [1], 6) == []


def test_greedy_ties_go_to_lowest_id():
    class Flat(Delta):
        def next_logprobs(self, prefix):
            return np.zeros(self.vocab_size)

    assert greedy_decode(Flat(5, 0), [1], 3) == [0, 0, 0]


def test_rows_are_distributions(small_model):
    import torch

    with torch.no_grad():
        lp = small_model(torch.tensor([[1, 5, 6, 7, 8]]))
    assert torch.allclose(lp.exp().sum(-1), torch.ones(1, 5, dtype=lp.dtype), atol=1e-6)


def test_same_seed_same_parameters(toy_vocab):
    cfg = ToyLMConfig(vocab_size=len(toy_vocab), seed=11)
    assert np.array_equal(ToyLM(cfg).flat_parameters(), ToyLM(cfg).flat_parameters())
    other = ToyLMConfig(vocab_size=len(toy_vocab), seed=12)
    assert not np.array_equal(ToyLM(cfg).flat_parameters(), ToyLM(other).flat_parameters())


def test_default_toy_model_under_50k_parameters(toy_vocab):
    assert ToyLM(ToyLMConfig(vocab_size=len(toy_vocab))).n_params() <= 50_000


def test_sampling_determinism_and_edges(small_model):
    a = sample(small_model, [5, 6], 1.0, 3, seed=7, max_new=6)
    assert a == sample(small_model, [5, 6], 1.0, 3, seed=7, max_new=6)
    assert len(a) == 3
    assert sample(small_model, [5, 6], 1.0, 0, seed=7) == []
    g = greedy_decode(small_model, [5, 6], 6)
    assert sample(small_model, [5, 6], 1e-9, 2, seed=0, max_new=6) == [g, g]
    with pytest.raises(NonPositiveTemperature):
        sample(small_model, [5], 0.0, 1, seed=0)


def test_context_overflow(small_model):
    with pytest.raises(ContextOverflow):
        score_sequence(small_model, [5] * 90, [6] * 10)
    with pytest.raises(ContextOverflow):
        greedy_decode(small_model, [5] * 97, 1)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(4, 40), min_size=1, max_size=8), st.lists(st.integers(4, 40), min_size=1, max_size=6))
def test_logprobs_are_probabilities(ctx, tgt):
    m = ToyLM(ToyLMConfig(vocab_size=41, hidden=8, n_heads=2, mlp_hidden=8, context_limit=32, seed=1))
    lps = score_sequence(m, ctx, tgt)
    assert len(lps) == len(tgt)
    assert all(0 < math.exp(v) <= 1 for v in lps)
    assert sum(lps) <= 0


def test_greedy_is_a_fixed_point(small_model):
    ctx = [7, 8, 9]
    out = greedy_decode(small_model, ctx, 6)
    lps = score_sequence(small_model, ctx, out)
    prefix = list(ctx)
    for tok, lp in zip(out, lps):
        assert lp == pytest.approx(small_model.next_logprobs(prefix).max(), abs=1e-12)
        prefix.append(tok)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, small_model, toy_vocab):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path, toy_vocab)
    loaded, vocab = load_checkpoint(path)
    assert vocab == toy_vocab
    assert np.array_equal(loaded.flat_parameters(), small_model.flat_parameters())
    assert score_sequence(loaded, [5, 6], [7]) == score_sequence(small_model, [5, 6], [7])


def test_checkpoint_rejects_mismatch(tmp_path, small_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expect=ToyLMConfig(vocab_size=small_model.vocab_size, hidden=16, seed=99))
    raw = bytearray(path.read_bytes())
    raw[0:8] = b"NOTACKPT"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path)
    (tmp_path / "short.ckpt").write_bytes(b"xx")
    with pytest.raises(ModelLoadError):
        load_checkpoint(tmp_path / "short.ckpt")


# -- memory ------------------------------------------------------------------


def _edit(i, subject, prompt=None):
    return EditDescriptor(str(i), "en", subject, prompt or f"where does {subject} live ?", f"city{i}")


def test_single_edit_always_retrieved():
    mem = EditMemory()
    e = _edit(0, "alice")
    mem.insert(e)
    assert mem.retrieve("totally unrelated words", 1) == [e]


def test_unique_subject_ranks_first():
    mem = EditMemory()
    edits = [_edit(0, "alice"), _edit(1, "bob"), _edit(2, "zhangwei")]
    mem.extend(edits)
    assert mem.retrieve("tell me where zhangwei lives", 1) == [edits[2]]
    # hand check of the trigram cosine: identical strings score 1, disjoint ones 0
    assert ngram_cosine("abc", "abc") == pytest.approx(1.0)
    assert ngram_cosine("abc", "xyz") == 0.0


def test_k_larger_than_memory_keeps_insertion_order_on_ties():
    mem = EditMemory(retriever=lambda q, e: 0.0)
    edits = [_edit(i, f"s{i}") for i in range(3)]
    mem.extend(edits)
    assert mem.retrieve("q", 10) == edits


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text("abcdefgh ", min_size=1, max_size=12), min_size=2, max_size=6),
       st.lists(st.text("xyz", min_size=1, max_size=6), max_size=4))
def test_unrelated_inserts_keep_relative_order(subjects, noise):
    mem = EditMemory()
    edits = [_edit(i, s, prompt=s) for i, s in enumerate(subjects)]
    mem.extend(edits)
    query = "abc def"
    before = mem.retrieve(query, len(edits))
    for j, n in enumerate(noise):
        mem.insert(_edit(100 + j, n, prompt=n))
    after = [e for e in mem.retrieve(query, len(mem)) if e in edits]
    assert after == before


def test_retrieve_and_prompt_empty_memory_flags():
    rp = retrieve_and_prompt(EditMemory(), "who ?", 1)
    assert rp.empty_memory and rp.retrieved == ()
    assert rp.text == "[Query]: who ?\n[Answer]: "


def test_retrieve_and_prompt_uses_training_layout():
    mem = EditMemory()
    mem.insert(_edit(0, "alice"))
    rp = retrieve_and_prompt(mem, "where is alice ?", 1)
    assert rp.text == "[Edit description]: where does alice live ? city0\n[Query]: where is alice ?\n[Answer]: "


def test_edited_model_drops_edits_that_do_not_fit(toy_vocab):
    m = Delta(len(toy_vocab), toy_vocab.eos_id)
    m.context_limit = 20
    mem = EditMemory()
    mem.insert(_edit(0, "ka to", "ka to capital ? " * 3))
    em = EditedModel(m, toy_vocab, mem, top_k=1, max_new=4)
    assert len(em.prompt_ids("ka to capital ?")) <= 16


# -- adapter -----------------------------------------------------------------


def test_chat_logprob_adapter_matches_local_model(small_model, toy_vocab):
    transport = LocalLogprobTransport(small_model)
    remote = ChatLogprobModel(transport, toy_vocab, context_limit=small_model.context_limit)
    assert remote.vocab_size == small_model.vocab_size
    assert score_sequence(remote, [5, 6], [7, 8]) == pytest.approx(score_sequence(small_model, [5, 6], [7, 8]))
    assert greedy_decode(remote, [5, 6], 4) == greedy_decode(small_model, [5, 6], 4)
    assert transport.requests > 0


def test_adapter_rejects_wrong_width(toy_vocab):
    from crossedit.errors import ModelError

    remote = ChatLogprobModel(lambda payload: {"next_token_logprobs": [0.0]}, toy_vocab)
    with pytest.raises(ModelError):
        remote.next_logprobs([1])


def test_vocab_roundtrip(tmp_path, toy_vocab):
    path = tmp_path / "v.json"
    toy_vocab.save(path)
    assert Vocab.load(path) == toy_vocab
    assert toy_vocab.decode(toy_vocab.encode("ka to")) == ["ka", "to"]
    assert toy_vocab.encode("zzzz") == [toy_vocab.unk_id]
