import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from storysynth.errors import ParameterError
from storysynth.text import (
    MAX_TOKENS,
    PSEUDO_TOKEN,
    PromptConditioning,
    TextEncoder,
    TimeInvTable,
    TokenSequence,
    Vocabulary,
    detokenize,
    embed_tokens,
    empty_prompt,
    tokenize,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="module")
def static_table(vocab):
    gen = torch.Generator().manual_seed(3)
    return torch.randn(len(vocab), 64, generator=gen)


class TestTokenize:
    def test_grammar_caption(self, vocab):
        seq = tokenize("a red circle moves right on a black background", vocab)
        assert (seq.ids != vocab.pad_id).sum() == 9
        assert not seq.has_pseudo
        assert all(i != vocab.unk_id for i in seq.ids if i != vocab.pad_id)

    def test_pseudo_detection(self, vocab):
        seq = tokenize("a photo of <new1> in the forest", vocab)
        assert seq.has_pseudo
        assert seq.pseudo_position == 3
        assert seq.ids[3] == vocab.pseudo_id

    def test_unknown_words_to_unk(self, vocab):
        seq = tokenize("a zebra gallops", vocab)
        assert seq.ids[1] == vocab.unk_id
        assert seq.ids[2] == vocab.unk_id

    def test_round_trip(self, vocab):
        for prompt in ("a red circle moves right on a black background",
                       "a <new1> stays still on a gray background"):
            seq = tokenize(prompt, vocab)
            again = tokenize(detokenize(seq.ids, vocab), vocab)
            assert np.array_equal(seq.ids, again.ids)

    def test_double_pseudo_rejected(self, vocab):
        with pytest.raises(ParameterError):
            tokenize("<new1> and <new1>", vocab)

    def test_length_limits(self, vocab):
        with pytest.raises(ParameterError):
            tokenize("x " * 80, vocab)
        with pytest.raises(ParameterError):
            tokenize(" ".join(["word"] * (MAX_TOKENS + 1)), vocab)

    def test_empty_prompt_is_all_padding(self, vocab):
        seq = empty_prompt(vocab)
        assert (seq.ids == vocab.pad_id).all()

    def test_vocab_round_trip(self, vocab, tmp_path):
        vocab.save(tmp_path / "vocab.json")
        loaded = Vocabulary.load(tmp_path / "vocab.json")
        assert loaded.words == vocab.words


class TestEmbedTokens:
    def test_row_lookup_at_t(self, vocab, static_table):
        table = TimeInvTable(V=torch.arange(10 * 64, dtype=torch.float32).reshape(10, 64))
        seq = tokenize("a <new1> moves right", vocab)
        emb = embed_tokens(seq, 3, static_table, timeinv=table)
        assert torch.equal(emb[seq.pseudo_position], table.V[2])

    def test_constant_table_equals_plain_static(self, vocab, static_table):
        row = torch.randn(64, generator=torch.Generator().manual_seed(5))
        table = TimeInvTable(V=row[None].repeat(10, 1))
        seq = tokenize("a <new1> stays still", vocab)
        for t in range(1, 11):
            with_table = embed_tokens(seq, t, static_table, timeinv=table)
            with_static = embed_tokens(seq, t, static_table, static_pseudo=row)
            assert torch.equal(with_table, with_static)

    def test_no_pseudo_ignores_table(self, vocab, static_table):
        table = TimeInvTable(V=torch.randn(10, 64, generator=torch.Generator().manual_seed(7)))
        seq = tokenize("a red circle moves right", vocab)
        a = embed_tokens(seq, 1, static_table, timeinv=table)
        b = embed_tokens(seq, 9, static_table, timeinv=None)
        assert torch.equal(a, b)

    def test_pseudo_without_source_rejected(self, vocab, static_table):
        seq = tokenize("a <new1> moves left", vocab)
        with pytest.raises(ParameterError):
            embed_tokens(seq, 1, static_table)

    def test_t_out_of_range(self, vocab, static_table):
        table = TimeInvTable(V=torch.zeros(10, 64))
        seq = tokenize("a <new1> moves left", vocab)
        with pytest.raises(ParameterError):
            embed_tokens(seq, 11, static_table, timeinv=table)

    @given(st.integers(min_value=1, max_value=10), st.integers(min_value=1, max_value=10))
    @settings(max_examples=20, deadline=None)
    def test_only_pseudo_row_varies_with_t(self, t1, t2):
        vocab = Vocabulary.default()
        gen = torch.Generator().manual_seed(11)
        static_table = torch.randn(len(vocab), 64, generator=gen)
        table = TimeInvTable(V=torch.randn(10, 64, generator=gen))
        seq = tokenize("a <new1> moves down on a gray background", vocab)
        e1 = embed_tokens(seq, t1, static_table, timeinv=table)
        e2 = embed_tokens(seq, t2, static_table, timeinv=table)
        differing = [i for i in range(MAX_TOKENS) if not torch.equal(e1[i], e2[i])]
        assert differing == ([] if t1 == t2 else [seq.pseudo_position])


class TestTextEncoder:
    def test_deterministic_construction(self, vocab):
        torch.manual_seed(0)
        a = TextEncoder(vocab)
        torch.manual_seed(0)
        b = TextEncoder(vocab)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_encode_shape(self, vocab):
        torch.manual_seed(0)
        enc = TextEncoder(vocab)
        seq = tokenize("a red circle moves right on a black background", vocab)
        out = enc.encode(seq)
        assert out.shape == (MAX_TOKENS, 64)

    def test_prompt_conditioning_static_cached(self, vocab):
        torch.manual_seed(0)
        enc = TextEncoder(vocab)
        cond = PromptConditioning(encoder=enc,
                                  cond_seq=tokenize("a red circle moves right", vocab),
                                  uncond_seq=empty_prompt(vocab))
        c1, u1 = cond.tokens_at(1)
        c2, u2 = cond.tokens_at(999)
        assert torch.equal(c1, c2) and torch.equal(u1, u2)

    def test_prompt_conditioning_timeinv_varies(self, vocab):
        torch.manual_seed(0)
        enc = TextEncoder(vocab)
        table = TimeInvTable(V=torch.randn(1000, 64, generator=torch.Generator().manual_seed(2)))
        cond = PromptConditioning(encoder=enc,
                                  cond_seq=tokenize("a <new1> moves right", vocab),
                                  uncond_seq=empty_prompt(vocab), timeinv=table)
        c1, _ = cond.tokens_at(1)
        c2, _ = cond.tokens_at(900)
        assert not torch.equal(c1, c2)
