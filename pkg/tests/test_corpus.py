import json
from collections import Counter

import pytest

from entmod.corpus import (
    AnnotatedInstance,
    Corpus,
    CorpusError,
    Document,
    EmptyCorpus,
    EntityMention,
    Modifier,
    ModifierSchema,
    OffsetOutOfBounds,
    SchemaConflict,
    StandoffParseError,
    SurfaceMismatch,
    UnknownLabel,
    UnknownModifier,
    load_instances_jsonl,
    merge_corpora,
    parse_standoff,
    save_instances_jsonl,
    split_corpus,
    write_standoff,
)


def _write_corpus_dir(tmp_path, schema_meta, files):
    (tmp_path / "schema.json").write_text(json.dumps(schema_meta), encoding="utf-8")
    for name, (text, ann) in files.items():
        (tmp_path / f"{name}.txt").write_text(text, encoding="utf-8")
        (tmp_path / f"{name}.ann").write_text(ann, encoding="utf-8")
    return tmp_path


NEG_SCHEMA = {
    "modifiers": [{"name": "Negation", "labels": ["no", "yes"], "default": "no"}],
    "applicable": ["Negation"],
}


class TestParseStandoff:
    def test_simple_mention_and_modifier(self, tmp_path):
        text = "patient has cough today."
        start = text.index("cough")
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {
            "doc1": (text, f"T1\tDisorder {start} {start+5}\tcough\nA1\tNegation T1 yes\n"),
        })
        corpus = parse_standoff(d)
        assert len(corpus) == 1
        inst = corpus.instances[0]
        assert inst.labels == {"Negation": "yes"}
        assert inst.mention.surface == ("cough",)

    def test_discontiguous_spans(self, tmp_path):
        text = "she noted left leg very badly swollen overnight"
        s1 = text.index("left leg")
        s2 = text.index("swollen")
        ann = f"T1\tDisorder {s1} {s1+8};{s2} {s2+7}\tleft leg;swollen\n"
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {"doc1": (text, ann)})
        corpus = parse_standoff(d)
        mention = corpus.instances[0].mention
        assert mention.spans == ((s1, s1 + 8), (s2, s2 + 7))
        assert mention.surface == ("left leg", "swollen")

    def test_offset_out_of_bounds_collected(self, tmp_path):
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {
            "doc1": ("short text", "T1\tDisorder 5 500\ttext\n"),
        })
        with pytest.raises(StandoffParseError) as exc:
            parse_standoff(d)
        assert any(isinstance(e, OffsetOutOfBounds) for e in exc.value.errors)

    def test_surface_mismatch(self, tmp_path):
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {
            "doc1": ("abcdef", "T1\tDisorder 0 3\txyz\n"),
        })
        with pytest.raises(StandoffParseError) as exc:
            parse_standoff(d)
        assert any(isinstance(e, SurfaceMismatch) for e in exc.value.errors)

    def test_unknown_modifier_and_label(self, tmp_path):
        ann = ("T1\tDisorder 0 3\tabc\n"
               "A1\tBogus T1 yes\n"
               "A2\tNegation T1 maybe\n")
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {"doc1": ("abcdef", ann)})
        with pytest.raises(StandoffParseError) as exc:
            parse_standoff(d)
        kinds = {type(e) for e in exc.value.errors}
        assert UnknownModifier in kinds and UnknownLabel in kinds

    def test_malformed_line_reports_position(self, tmp_path):
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {
            "doc1": ("abcdef", "T1\tDisorder 0 3\tabc\nnot a line\n"),
        })
        with pytest.raises(StandoffParseError) as exc:
            parse_standoff(d)
        assert any(getattr(e, "lineno", None) == 2 for e in exc.value.errors)

    def test_duplicate_modifier_first_wins(self, tmp_path):
        ann = ("T1\tDisorder 0 3\tabc\n"
               "A1\tNegation T1 yes\n"
               "A2\tNegation T1 no\n")
        d = _write_corpus_dir(tmp_path, NEG_SCHEMA, {"doc1": ("abcdef", ann)})
        with pytest.warns(UserWarning, match="duplicate"):
            corpus = parse_standoff(d)
        assert corpus.instances[0].labels == {"Negation": "yes"}

    def test_round_trip(self, tmp_path, binary_schema):
        # non-ASCII text in doc a: offsets are character indices, not bytes
        docs = {
            "a": Document("a", "née no cough seen today in this patient record"),
            "b": Document("b", "mild fever and a bad rash on the left arm"),
        }
        ta, tb = docs["a"].text, docs["b"].text
        ca = ta.index("cough")
        fb, rb, ab = tb.index("fever"), tb.index("bad rash"), tb.index("arm")
        instances = [
            AnnotatedInstance(EntityMention("a", ((ca, ca + 5),), ("cough",)),
                              {"negation": "yes"}),
            AnnotatedInstance(EntityMention("b", ((fb, fb + 5),), ("fever",)),
                              {"severity": "slight"}),
            AnnotatedInstance(EntityMention("b", ((rb, rb + 8), (ab, ab + 3)),
                                            ("bad rash", "arm")), {}),
        ]
        corpus = Corpus(binary_schema, docs, instances, {"negation", "severity"}, name="t")
        write_standoff(corpus, tmp_path / "out")
        back = parse_standoff(tmp_path / "out")
        assert {d.id: d.text for d in back.documents.values()} == {
            d.id: d.text for d in corpus.documents.values()
        }
        assert sorted((i.mention.doc_id, i.mention.spans, tuple(sorted(i.labels.items())))
                      for i in back.instances) == \
               sorted((i.mention.doc_id, i.mention.spans, tuple(sorted(i.labels.items())))
                      for i in corpus.instances)
        assert back.applicable_modifiers == corpus.applicable_modifiers


class TestMentionInvariants:
    def test_rejects_overlapping_spans(self):
        with pytest.raises(CorpusError):
            EntityMention("d", ((0, 5), (3, 8)), ("abcde", "defgh"))

    def test_rejects_empty_span(self):
        with pytest.raises(CorpusError):
            EntityMention("d", ((4, 4),), ("",))

    def test_corpus_checks_surface(self, binary_schema):
        docs = {"a": Document("a", "hello world")}
        bad = AnnotatedInstance(EntityMention("a", ((0, 5),), ("xxxxx",)), {})
        with pytest.raises(SurfaceMismatch):
            Corpus(binary_schema, docs, [bad], {"negation"})


def _tiny_corpus(schema, n=10):
    docs = {}
    instances = []
    for i in range(n):
        doc_id = f"d{i:03d}"
        text = f"filler number {i:03d} with a cough mention inside"
        start = text.index("cough")
        docs[doc_id] = Document(doc_id, text)
        labels = {"negation": "yes"} if i % 3 == 0 else {}
        instances.append(
            AnnotatedInstance(EntityMention(doc_id, ((start, start + 5),), ("cough",)), labels)
        )
    return Corpus(schema, docs, instances, {"negation", "severity"}, name="tiny")


class TestSplit:
    def test_sizes_floor_and_remainder(self, binary_schema):
        corpus = _tiny_corpus(binary_schema, 10)
        tr, dev, te = split_corpus(corpus, (0.8, 0.1, 0.1), seed=5)
        assert (len(tr), len(dev), len(te)) == (8, 1, 1)

    def test_deterministic(self, binary_schema):
        corpus = _tiny_corpus(binary_schema, 10)
        a = split_corpus(corpus, (0.8, 0.1, 0.1), seed=9)
        b = split_corpus(corpus, (0.8, 0.1, 0.1), seed=9)
        for x, y in zip(a, b):
            assert [i.instance_id() for i in x.instances] == \
                   [i.instance_id() for i in y.instances]

    def test_partition_disjoint_and_complete(self, binary_schema):
        corpus = _tiny_corpus(binary_schema, 37)
        parts = split_corpus(corpus, (0.8, 0.1, 0.1), seed=3)
        ids = [i.instance_id() for part in parts for i in part.instances]
        assert Counter(ids) == Counter(i.instance_id() for i in corpus.instances)

    def test_rejects_bad_ratios(self, binary_schema):
        corpus = _tiny_corpus(binary_schema)
        with pytest.raises(CorpusError):
            split_corpus(corpus, (0.8, 0.1, 0.2), seed=0)
        with pytest.raises(CorpusError):
            split_corpus(corpus, (1.0, -0.1, 0.1), seed=0)

    def test_empty_corpus(self, binary_schema):
        docs = {"a": Document("a", "text")}
        corpus = Corpus(binary_schema, docs, [], {"negation"})
        with pytest.raises(EmptyCorpus):
            split_corpus(corpus, (0.8, 0.1, 0.1), seed=0)

    def test_by_document_keeps_docs_whole(self, binary_schema):
        corpus = _tiny_corpus(binary_schema, 30)
        parts = split_corpus(corpus, (0.6, 0.2, 0.2), seed=1, by_document=True)
        doc_sets = [set(i.mention.doc_id for i in p.instances) for p in parts]
        assert not (doc_sets[0] & doc_sets[1])
        assert not (doc_sets[0] & doc_sets[2])
        assert not (doc_sets[1] & doc_sets[2])


def _corpus_with(schema_mods, applicable, name, label_value="yes"):
    schema = ModifierSchema(tuple(schema_mods))
    text = "the cough got worse over the night shift"
    start = text.index("cough")
    docs = {"doc": Document("doc", text)}
    first = schema_mods[0]
    inst = AnnotatedInstance(
        EntityMention("doc", ((start, start + 5),), ("cough",)),
        {first.name: label_value} if label_value in first.labels else {},
    )
    return Corpus(schema, docs, [inst], applicable, name=name)


class TestMerge:
    def test_union_schema(self):
        a = _corpus_with([Modifier("neg", ("no", "yes"), "no"),
                          Modifier("sev", ("unmarked", "severe"), "unmarked")],
                         {"neg", "sev"}, "shr")
        b = _corpus_with([Modifier("neg", ("no", "yes"), "no"),
                          Modifier("doctime", ("overlaps", "before", "after"), "overlaps")],
                         {"neg", "doctime"}, "oud")
        merged = merge_corpora(a, b)
        assert merged.schema.names == ("neg", "sev", "doctime")
        assert merged.applicable_modifiers == {"neg", "sev", "doctime"}

    def test_label_conflict(self):
        a = _corpus_with([Modifier("neg", ("no", "yes"), "no")], {"neg"}, "a")
        b = _corpus_with([Modifier("neg", ("false", "true"), "false")], {"neg"}, "b",
                         label_value="true")
        with pytest.raises(SchemaConflict):
            merge_corpora(a, b)

    def test_seven_plus_six_sharing_four_gives_nine(self):
        share_mods = [Modifier(n, ("no", "yes"), "no")
                      for n in ("negation", "subject", "uncertainty", "severity",
                                "course", "conditional", "generic")]
        oud_mods = [Modifier(n, ("no", "yes"), "no")
                    for n in ("negation", "subject", "uncertainty", "severity")]
        oud_mods += [Modifier("doctime", ("overlaps", "before", "after"), "overlaps"),
                     Modifier("illicit_use", ("no", "yes"), "no")]
        a = _corpus_with(share_mods, {m.name for m in share_mods}, "shr")
        b = _corpus_with(oud_mods, {m.name for m in oud_mods}, "oud")
        merged = merge_corpora(a, b)
        assert len(merged.schema.names) == 9

    def test_instances_keep_source_applicability(self):
        a = _corpus_with([Modifier("neg", ("no", "yes"), "no")], {"neg"}, "a")
        b = _corpus_with([Modifier("sev", ("unmarked", "severe"), "unmarked")], {"sev"}, "b",
                         label_value="severe")
        merged = merge_corpora(a, b)
        by_doc = {i.mention.doc_id: i for i in merged.instances}
        assert by_doc["a.doc"].applicable == frozenset({"neg"})
        assert by_doc["b.doc"].applicable == frozenset({"sev"})

    def test_commutative_up_to_namespacing(self):
        a = _corpus_with([Modifier("neg", ("no", "yes"), "no")], {"neg"}, "a")
        b = _corpus_with([Modifier("sev", ("unmarked", "severe"), "unmarked")], {"sev"}, "b",
                         label_value="severe")
        ab = merge_corpora(a, b)
        ba = merge_corpora(b, a)
        labels_ab = Counter(tuple(sorted(i.labels.items())) for i in ab.instances)
        labels_ba = Counter(tuple(sorted(i.labels.items())) for i in ba.instances)
        assert labels_ab == labels_ba


class TestInstancesJsonl:
    def test_round_trip(self, tmp_path, binary_schema):
        corpus = _tiny_corpus(binary_schema, 5)
        path = tmp_path / "instances.jsonl"
        save_instances_jsonl(corpus, path)
        back = load_instances_jsonl(path, corpus.documents)
        assert [(i.mention.doc_id, i.mention.spans, i.labels) for i in back] == \
               [(i.mention.doc_id, i.mention.spans, i.labels) for i in corpus.instances]
