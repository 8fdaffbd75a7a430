import re

import pytest

from entmod.corpus import InvalidConfig, Modifier, ModifierSchema
from entmod.synth import SynthConfig, cue_lookup, generate_synthetic, oracle_labels


def _schema():
    return ModifierSchema((
        Modifier("negation", ("no", "yes"), "no"),
        Modifier("severity", ("unmarked", "slight", "severe"), "unmarked"),
    ))


def _resolved(corpus, inst):
    out = {m.name: m.default for m in corpus.schema.modifiers}
    out.update(inst.labels)
    return out


class TestGeneration:
    def test_same_seed_is_byte_identical(self):
        cfg = SynthConfig(schema=_schema(), n_instances=50)
        a = generate_synthetic(cfg, seed=7)
        b = generate_synthetic(cfg, seed=7)
        assert {d.id: d.text for d in a.documents.values()} == \
               {d.id: d.text for d in b.documents.values()}
        assert [(i.mention.spans, i.labels) for i in a.instances] == \
               [(i.mention.spans, i.labels) for i in b.instances]

    def test_different_seeds_differ(self):
        cfg = SynthConfig(schema=_schema(), n_instances=50)
        a = generate_synthetic(cfg, seed=7)
        b = generate_synthetic(cfg, seed=8)
        assert {d.text for d in a.documents.values()} != \
               {d.text for d in b.documents.values()}

    def test_noise_free_labels_recoverable_by_oracle(self):
        cfg = SynthConfig(schema=_schema(), n_instances=200, noise_rate=0.0)
        corpus = generate_synthetic(cfg, seed=3)
        for inst in corpus.instances:
            text = corpus.documents[inst.mention.doc_id].text
            assert oracle_labels(text, inst.mention, cfg) == _resolved(corpus, inst)

    def test_custom_cue_word_matches_string_search(self):
        # a mention is negated exactly when the planted word "no" is in its window
        schema = ModifierSchema((Modifier("negation", ("affirmed", "negated"), "affirmed"),))
        cfg = SynthConfig(schema=schema, n_instances=100,
                          cues={"negation": {"negated": "no"}},
                          cue_placement="scattered")
        corpus = generate_synthetic(cfg, seed=1)
        flagged = set()
        for inst in corpus.instances:
            text = corpus.documents[inst.mention.doc_id].text
            lo = max(0, inst.mention.start - 200)
            hi = min(len(text), inst.mention.end + 50)
            if re.search(r"\bno\b", text[lo:hi]):
                flagged.add(inst.instance_id())
        negated = {i.instance_id() for i in corpus.instances
                   if i.labels.get("negation") == "negated"}
        assert flagged == negated
        assert negated and negated != {i.instance_id() for i in corpus.instances}

    def test_vocabulary_budget_respected(self):
        cfg = SynthConfig(schema=_schema(), n_instances=300, vocab_size=60)
        corpus = generate_synthetic(cfg, seed=2)
        tokens = set()
        for doc in corpus.documents.values():
            tokens.update(doc.text.replace(".", " .").split())
        assert len(tokens) <= 60

    def test_two_mentions_share_window_and_surfaces_differ(self):
        cfg = SynthConfig(schema=_schema(), n_instances=40, mentions_per_doc=2,
                          left_words=(6, 18), gap_words=(2, 4), right_words=(0, 1))
        corpus = generate_synthetic(cfg, seed=5)
        by_doc: dict[str, list] = {}
        for inst in corpus.instances:
            by_doc.setdefault(inst.mention.doc_id, []).append(inst)
        for doc_id, insts in by_doc.items():
            assert len(insts) == 2
            text = corpus.documents[doc_id].text
            a, b = insts
            assert a.mention.surface != b.mention.surface
            # both windows clamp to the whole document
            assert a.mention.start < 200 and b.mention.start < 200
            assert len(text) - a.mention.end < 50

    def test_contrastive_siblings_disagree(self):
        cfg = SynthConfig(schema=_schema(), n_instances=60, mentions_per_doc=2,
                          label_mode="contrastive",
                          left_words=(6, 18), gap_words=(2, 4), right_words=(0, 1))
        corpus = generate_synthetic(cfg, seed=5)
        by_doc: dict[str, list] = {}
        for inst in corpus.instances:
            by_doc.setdefault(inst.mention.doc_id, []).append(inst)
        for insts in by_doc.values():
            a, b = insts
            for mod in cfg.schema.modifiers:
                ra = a.labels.get(mod.name, mod.default)
                rb = b.labels.get(mod.name, mod.default)
                assert (ra == mod.default) != (rb == mod.default)

    def test_adjacent_oracle_on_shared_windows(self):
        cfg = SynthConfig(schema=_schema(), n_instances=100, mentions_per_doc=2,
                          left_words=(6, 18), gap_words=(2, 4), right_words=(0, 1))
        corpus = generate_synthetic(cfg, seed=9)
        for inst in corpus.instances:
            text = corpus.documents[inst.mention.doc_id].text
            assert oracle_labels(text, inst.mention, cfg) == _resolved(corpus, inst)

    def test_invalid_configs_rejected(self):
        with pytest.raises(InvalidConfig):
            SynthConfig(schema=_schema(), n_instances=0)
        with pytest.raises(InvalidConfig):
            SynthConfig(schema=_schema(), n_instances=10, vocab_size=8)
        with pytest.raises(InvalidConfig):
            SynthConfig(schema=_schema(), n_instances=10, noise_rate=1.5)
        with pytest.raises(InvalidConfig):
            SynthConfig(schema=_schema(), n_instances=10, label_mode="contrastive")

    def test_config_round_trips_through_dict(self):
        cfg = SynthConfig(schema=_schema(), n_instances=25, vocab_size=90,
                          mentions_per_doc=2, label_mode="contrastive")
        back = SynthConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
        assert generate_synthetic(back, 3).documents.keys() == \
               generate_synthetic(cfg, 3).documents.keys()

    def test_cue_lookup_rejects_reuse(self):
        cfg = SynthConfig(schema=_schema(), n_instances=5)
        cfg.cues["severity"]["slight"] = cfg.cues["negation"]["yes"]
        with pytest.raises(InvalidConfig):
            cue_lookup(cfg)
