import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entmod.corpus import (
    AnnotatedInstance,
    Corpus,
    Document,
    EmptyCorpus,
    EntityMention,
    Modifier,
    ModifierSchema,
)
from entmod.featurize import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    ContextWindow,
    FeaturizeConfig,
    HintTooLong,
    TokenizerVocab,
    build_pair,
    build_vocab,
    encode,
    encode_corpus,
    extract_context,
    load_cache,
    resolve_targets,
    save_cache,
    tokenize,
)


class TestContextWindow:
    def test_interior_mention(self):
        doc = Document("d", "x" * 1000)
        mention = EntityMention("d", ((300, 310),), ("x" * 10,))
        w = extract_context(doc, mention)
        assert w.window_doc_span == (100, 360)
        assert w.mention_char_offsets == ((200, 210),)

    def test_left_clamp(self):
        doc = Document("d", "y" * 1000)
        mention = EntityMention("d", ((0, 5),), ("y" * 5,))
        w = extract_context(doc, mention)
        assert w.window_doc_span == (0, 55)

    def test_double_clamp_discontiguous(self):
        doc = Document("d", "z" * 1000)
        mention = EntityMention("d", ((10, 15), (980, 990)), ("z" * 5, "z" * 10))
        w = extract_context(doc, mention)
        assert w.window_doc_span == (0, 1000)

    def test_surface_recoverable_at_relative_offsets(self):
        text = "the patient denies chest pain and any shortness of breath today"
        doc = Document("d", text)
        s = text.index("chest pain")
        mention = EntityMention("d", ((s, s + 10),), ("chest pain",))
        w = extract_context(doc, mention, before=10, after=5)
        (rs, re_), = w.mention_char_offsets
        assert w.text[rs:re_] == "chest pain"


class TestBuildPair:
    def test_mention_surface_becomes_second(self):
        doc = Document("d", "she was having hallucinations, suicidal ideations and more")
        s = doc.text.index("hallucinations")
        mention = EntityMention("d", ((s, s + 14),), ("hallucinations",))
        w = extract_context(doc, mention)
        first, second = build_pair(w, mention, hint=True)
        assert second == "hallucinations"
        assert first == w.text

    def test_discontiguous_joined_by_space(self):
        doc = Document("d", "a left leg with visible swelling after the fall")
        s1 = doc.text.index("left leg")
        s2 = doc.text.index("swelling")
        mention = EntityMention("d", ((s1, s1 + 8), (s2, s2 + 8)), ("left leg", "swelling"))
        w = extract_context(doc, mention)
        _, second = build_pair(w, mention, hint=True)
        assert second == "left leg swelling"

    def test_no_hint_empty_second(self):
        doc = Document("d", "some cough here")
        mention = EntityMention("d", ((5, 10),), ("cough",))
        w = extract_context(doc, mention)
        _, second = build_pair(w, mention, hint=False)
        assert second == ""


class TestVocab:
    def test_tokenization_rule(self):
        assert tokenize("No cough. No cough.") == ["no", "cough", ".", "no", "cough", "."]

    def test_build_orders_by_frequency_then_lexicographic(self):
        docs = {"a": Document("a", "bb aa bb cc aa bb")}
        corpus = Corpus(
            ModifierSchema((Modifier("m", ("x", "y"), "x"),)), docs, [], {"m"}
        )
        vocab = build_vocab(corpus)
        assert vocab.tokens == ("bb", "aa", "cc")
        assert vocab.encode_text("bb aa cc") == [4, 5, 6]

    def test_min_freq_maps_to_unk(self):
        docs = {"a": Document("a", "common common rare")}
        corpus = Corpus(
            ModifierSchema((Modifier("m", ("x", "y"), "x"),)), docs, [], {"m"}
        )
        vocab = build_vocab(corpus, min_freq=2)
        assert vocab.encode_text("common rare") == [4, UNK_ID]

    def test_deterministic(self):
        docs = {"a": Document("a", "gamma beta alpha beta gamma gamma")}
        corpus = Corpus(
            ModifierSchema((Modifier("m", ("x", "y"), "x"),)), docs, [], {"m"}
        )
        assert build_vocab(corpus).tokens == build_vocab(corpus).tokens
        assert build_vocab(corpus).fingerprint() == build_vocab(corpus).fingerprint()

    def test_empty_corpus(self):
        docs = {"a": Document("a", " ")}
        corpus = Corpus(
            ModifierSchema((Modifier("m", ("x", "y"), "x"),)), docs, [], {"m"}
        )
        with pytest.raises(EmptyCorpus):
            build_vocab(corpus)


def _vocab():
    return TokenizerVocab(tuple(f"tok{i}" for i in range(50)))


class TestEncode:
    def test_layout_with_hint(self):
        vocab = _vocab()
        ex = encode(("tok1 tok2 tok3", "tok4"), vocab, {"m": 1}, {"m": True}, max_len=144)
        assert len(ex.token_ids) == 144
        assert ex.token_ids[0] == CLS_ID
        real = ex.token_ids[ex.attention_mask.astype(bool)]
        assert list(real) == [CLS_ID, 5, 6, 7, SEP_ID, 8, SEP_ID]
        assert list(ex.segment_ids[:7]) == [0, 0, 0, 0, 0, 1, 1]
        assert ex.attention_mask.sum() == 7

    def test_left_truncation_preserves_hint(self):
        vocab = _vocab()
        first = " ".join(f"tok{i % 50}" for i in range(200))
        ex = encode((first, "tok1 tok2"), vocab, {}, {}, max_len=144)
        assert len(ex.token_ids) == 144
        assert ex.attention_mask.sum() == 144
        # CLS + 139 first tokens + SEP + 2 hint tokens + SEP
        assert list(ex.token_ids[-3:]) == [5, 6, SEP_ID]
        assert ex.token_ids[140] == SEP_ID
        first_ids = vocab.encode_text(first)
        assert list(ex.token_ids[1:140]) == first_ids[-139:]

    def test_no_hint_single_sep_all_segment_zero(self):
        vocab = _vocab()
        ex = encode(("tok1 tok2", ""), vocab, {}, {}, max_len=32)
        real = ex.token_ids[ex.attention_mask.astype(bool)]
        assert list(real) == [CLS_ID, 5, 6, SEP_ID]
        assert not ex.segment_ids.any()

    def test_hint_too_long(self):
        vocab = _vocab()
        second = " ".join(f"tok{i % 50}" for i in range(40))
        with pytest.raises(HintTooLong):
            encode(("tok1", second), vocab, {}, {}, max_len=16)

    def test_padding_uses_pad_id_and_mask_zero(self):
        vocab = _vocab()
        ex = encode(("tok1", "tok2"), vocab, {}, {}, max_len=10)
        assert list(ex.token_ids[5:]) == [PAD_ID] * 5
        assert list(ex.attention_mask[5:]) == [0] * 5

    def test_reencoding_is_bit_identical(self):
        vocab = _vocab()
        a = encode(("tok1 tok9 tok3", "tok2"), vocab, {"m": 0}, {"m": True}, max_len=20)
        b = encode(("tok1 tok9 tok3", "tok2"), vocab, {"m": 0}, {"m": True}, max_len=20)
        assert np.array_equal(a.token_ids, b.token_ids)
        assert np.array_equal(a.segment_ids, b.segment_ids)
        assert np.array_equal(a.attention_mask, b.attention_mask)

    @settings(max_examples=60, deadline=None)
    @given(n_first=st.integers(0, 300), n_second=st.integers(1, 30),
           max_len=st.integers(16, 160))
    def test_truncation_never_touches_second_sequence(self, n_first, n_second, max_len):
        vocab = _vocab()
        if 3 + n_second > max_len:
            return
        first = " ".join(f"tok{i % 50}" for i in range(n_first))
        second = " ".join(f"tok{(i + 7) % 50}" for i in range(n_second))
        ex = encode((first, second), vocab, {}, {}, max_len=max_len)
        assert len(ex.token_ids) == max_len
        real = list(ex.token_ids[ex.attention_mask.astype(bool)])
        assert real[-(n_second + 1):] == vocab.encode_text(second) + [SEP_ID]
        # attention mask is monotone non-increasing
        diffs = np.diff(ex.attention_mask.astype(int))
        assert (diffs <= 0).all()


class TestResolveTargets:
    def test_applicable_unannotated_resolves_to_default(self, binary_schema):
        inst = AnnotatedInstance(
            EntityMention("d", ((0, 2),), ("ab",)), {"negation": "yes"}
        )
        gold, mask = resolve_targets(binary_schema, inst,
                                     frozenset({"negation", "severity"}))
        assert gold == {"negation": 1, "severity": 0}
        assert mask == {"negation": True, "severity": True}

    def test_non_applicable_masked_without_gold(self, binary_schema):
        inst = AnnotatedInstance(EntityMention("d", ((0, 2),), ("ab",)), {})
        gold, mask = resolve_targets(binary_schema, inst, frozenset({"negation"}))
        assert "severity" not in gold
        assert mask["severity"] is False


class TestCache:
    def _corpus(self, binary_schema):
        text = "no cough was found during the patient visit today at all"
        s = text.index("cough")
        docs = {"d": Document("d", text)}
        insts = [AnnotatedInstance(EntityMention("d", ((s, s + 5),), ("cough",)),
                                   {"negation": "yes"})]
        return Corpus(binary_schema, docs, insts, {"negation", "severity"})

    def test_round_trip(self, tmp_path, binary_schema):
        corpus = self._corpus(binary_schema)
        vocab = build_vocab(corpus)
        feat = FeaturizeConfig(max_len=32)
        examples = encode_corpus(corpus, vocab, feat)
        path = tmp_path / "cache.npz"
        save_cache(path, examples, vocab, feat)
        back = load_cache(path, vocab, feat)
        assert back is not None
        assert np.array_equal(back[0].token_ids, examples[0].token_ids)
        assert back[0].gold == examples[0].gold
        assert back[0].head_mask == examples[0].head_mask
        assert back[0].instance_id == examples[0].instance_id

    def test_invalidated_on_config_change(self, tmp_path, binary_schema):
        corpus = self._corpus(binary_schema)
        vocab = build_vocab(corpus)
        feat = FeaturizeConfig(max_len=32)
        examples = encode_corpus(corpus, vocab, feat)
        path = tmp_path / "cache.npz"
        save_cache(path, examples, vocab, feat)
        assert load_cache(path, vocab, FeaturizeConfig(max_len=64)) is None

    def test_invalidated_on_vocab_change(self, tmp_path, binary_schema):
        corpus = self._corpus(binary_schema)
        vocab = build_vocab(corpus)
        feat = FeaturizeConfig(max_len=32)
        examples = encode_corpus(corpus, vocab, feat)
        path = tmp_path / "cache.npz"
        save_cache(path, examples, vocab, feat)
        other = TokenizerVocab(("completely", "different"))
        assert load_cache(path, other, feat) is None

    def test_threaded_encoding_matches_sequential(self, binary_schema):
        corpus = self._corpus(binary_schema)
        vocab = build_vocab(corpus)
        feat = FeaturizeConfig(max_len=32)
        seq = encode_corpus(corpus, vocab, feat, threads=1)
        par = encode_corpus(corpus, vocab, feat, threads=4)
        for a, b in zip(seq, par):
            assert np.array_equal(a.token_ids, b.token_ids)
            assert a.gold == b.gold
