"""Annotated corpora of entity mentions with modifier labels.

A corpus is a set of documents plus standoff annotations: each annotated
instance is one entity mention (possibly made of several discontiguous
character spans) together with a label for each modifier that was
explicitly marked.  Modifiers that a corpus annotates but an instance
does not carry resolve to the modifier's default label downstream;
modifiers a corpus never annotates stay masked.

On-disk format, one directory per corpus:

    <name>.txt      raw UTF-8 document text (character offsets index it)
    <name>.ann      standoff lines:
                      T<n>\t<Type> <start> <end>[;<start> <end>]*\t<surface[;...]>
                      A<n>\t<ModifierName> T<n> <Label>
    schema.json     {"modifiers": [{"name":..., "labels": [...], "default":...}],
                     "applicable": [...]}
"""

from __future__ import annotations

import json
import math
import random
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path


class CorpusError(Exception):
    """Base class for corpus construction and parsing failures."""


class MalformedLine(CorpusError):
    def __init__(self, file, lineno, line, reason=""):
        self.file = str(file)
        self.lineno = lineno
        self.line = line
        super().__init__(
            f"{self.file}:{lineno}: malformed line{': ' + reason if reason else ''}: {line!r}"
        )


class OffsetOutOfBounds(CorpusError):
    def __init__(self, file, span, text_len):
        self.file = str(file)
        self.span = span
        super().__init__(f"{self.file}: span {span} outside document of length {text_len}")


class SurfaceMismatch(CorpusError):
    def __init__(self, file, span, expected, found):
        self.file = str(file)
        super().__init__(
            f"{self.file}: span {span} reads {found!r} but annotation says {expected!r}"
        )


class UnknownModifier(CorpusError):
    def __init__(self, name, where=""):
        self.modifier = name
        super().__init__(f"unknown modifier {name!r}{' in ' + where if where else ''}")


class UnknownLabel(CorpusError):
    def __init__(self, modifier, label, where=""):
        self.modifier = modifier
        self.label = label
        super().__init__(
            f"label {label!r} not valid for modifier {modifier!r}"
            f"{' in ' + where if where else ''}"
        )


class SchemaConflict(CorpusError):
    def __init__(self, modifier, labels_a, labels_b):
        self.modifier = modifier
        self.labels_a = tuple(labels_a)
        self.labels_b = tuple(labels_b)
        super().__init__(
            f"modifier {modifier!r} has conflicting label lists: "
            f"{self.labels_a} vs {self.labels_b}"
        )


class EmptyCorpus(CorpusError):
    pass


class InvalidConfig(CorpusError):
    pass


class StandoffParseError(CorpusError):
    """Aggregate of every problem found while parsing a corpus directory."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "\n".join(f"  - {e}" for e in self.errors)
        super().__init__(f"{len(self.errors)} error(s) parsing corpus:\n{lines}")


@dataclass(frozen=True)
class Modifier:
    """One modifier type: an ordered label list and its default label."""

    name: str
    labels: tuple[str, ...]
    default: str

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise CorpusError(f"modifier {self.name!r} needs at least 2 labels")
        if len(set(self.labels)) != len(self.labels):
            raise CorpusError(f"modifier {self.name!r} has duplicate labels")
        if self.default not in self.labels:
            raise CorpusError(
                f"default {self.default!r} not among labels of modifier {self.name!r}"
            )

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabel(self.name, label) from None


@dataclass(frozen=True)
class ModifierSchema:
    """Ordered collection of modifier types with unique names."""

    modifiers: tuple[Modifier, ...]

    def __post_init__(self):
        object.__setattr__(self, "modifiers", tuple(self.modifiers))
        names = [m.name for m in self.modifiers]
        if len(set(names)) != len(names):
            raise CorpusError("duplicate modifier names in schema")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.modifiers)

    def __contains__(self, name: str) -> bool:
        return any(m.name == name for m in self.modifiers)

    def __getitem__(self, name: str) -> Modifier:
        for m in self.modifiers:
            if m.name == name:
                return m
        raise UnknownModifier(name)

    def to_dict(self) -> dict:
        return {
            "modifiers": [
                {"name": m.name, "labels": list(m.labels), "default": m.default}
                for m in self.modifiers
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModifierSchema":
        return cls(
            tuple(
                Modifier(m["name"], tuple(m["labels"]), m["default"])
                for m in d["modifiers"]
            )
        )


@dataclass(frozen=True)
class Document:
    id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"document {self.id!r} has empty text")


@dataclass(frozen=True)
class EntityMention:
    """Entity occurrence as ordered, non-overlapping character spans.

    ``surface`` holds the document substring of each span; discontiguous
    mentions carry one surface string per span.
    """

    doc_id: str
    spans: tuple[tuple[int, int], ...]
    surface: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(tuple(s) for s in self.spans))
        object.__setattr__(self, "surface", tuple(self.surface))
        if not self.spans:
            raise CorpusError("mention has no spans")
        if len(self.spans) != len(self.surface):
            raise CorpusError("span count and surface count differ")
        prev_end = -1
        for start, end in self.spans:
            if not (0 <= start < end):
                raise CorpusError(f"bad span ({start}, {end})")
            if start < prev_end:
                raise CorpusError("spans overlap or are unsorted")
            prev_end = end

    @property
    def start(self) -> int:
        return self.spans[0][0]

    @property
    def end(self) -> int:
        return self.spans[-1][1]


@dataclass(frozen=True)
class AnnotatedInstance:
    """One mention plus its explicitly annotated modifier labels.

    A modifier absent from ``labels`` was not annotated; it resolves to
    the schema default at featurization time when the modifier is
    applicable, and is masked otherwise.  ``applicable`` overrides the
    corpus-level applicable set (used after merging corpora so each
    instance keeps its source corpus's annotation scope).
    """

    mention: EntityMention
    labels: dict[str, str] = field(default_factory=dict)
    applicable: frozenset[str] | None = None

    def instance_id(self) -> str:
        spans = ";".join(f"{s}-{e}" for s, e in self.mention.spans)
        return f"{self.mention.doc_id}#{spans}"


class Corpus:
    """Immutable after construction; safe to share read-only."""

    def __init__(self, schema, documents, instances, applicable_modifiers, name=None):
        self.schema = schema
        self.documents = dict(documents)
        self.instances = tuple(instances)
        self.applicable_modifiers = frozenset(applicable_modifiers)
        self.name = name
        self._validate()

    def _validate(self):
        for name in self.applicable_modifiers:
            if name not in self.schema:
                raise UnknownModifier(name, "applicable set")
        for inst in self.instances:
            doc = self.documents.get(inst.mention.doc_id)
            if doc is None:
                raise CorpusError(f"instance references unknown document {inst.mention.doc_id!r}")
            for (start, end), surf in zip(inst.mention.spans, inst.mention.surface):
                if end > len(doc.text):
                    raise OffsetOutOfBounds(doc.id, (start, end), len(doc.text))
                if doc.text[start:end] != surf:
                    raise SurfaceMismatch(doc.id, (start, end), surf, doc.text[start:end])
            applicable = inst.applicable if inst.applicable is not None else self.applicable_modifiers
            for mod_name, label in inst.labels.items():
                if mod_name not in self.schema:
                    raise UnknownModifier(mod_name, inst.instance_id())
                self.schema[mod_name].label_index(label)
                if mod_name not in applicable:
                    raise CorpusError(
                        f"{inst.instance_id()}: annotated modifier {mod_name!r} "
                        "is outside the applicable set"
                    )

    def __len__(self):
        return len(self.instances)

    def document_for(self, inst: AnnotatedInstance) -> Document:
        return self.documents[inst.mention.doc_id]

    def applicable_for(self, inst: AnnotatedInstance) -> frozenset[str]:
        return inst.applicable if inst.applicable is not None else self.applicable_modifiers


_MENTION_RE = re.compile(r"^(T\d+)\t(\S+) (\d+ \d+(?:;\d+ \d+)*)\t(.*)$")
_MODIFIER_RE = re.compile(r"^(A\d+)\t(\S+) (T\d+) (.+)$")


def _parse_file_pair(txt_path: Path, ann_path: Path, schema, applicable, errors):
    """Parse one ``.txt``/``.ann`` pair; appends problems to ``errors``."""
    doc_id = txt_path.stem
    text = txt_path.read_text(encoding="utf-8")
    if not text:
        errors.append(CorpusError(f"{txt_path}: empty document"))
        return None, []

    mentions: dict[str, EntityMention] = {}
    labels: dict[str, dict[str, str]] = {}
    order: list[str] = []
    for lineno, raw in enumerate(ann_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("T"):
            m = _MENTION_RE.match(line)
            if m is None:
                errors.append(MalformedLine(ann_path, lineno, line))
                continue
            tid, _etype, span_str, surf_str = m.groups()
            if tid in mentions:
                errors.append(MalformedLine(ann_path, lineno, line, f"duplicate id {tid}"))
                continue
            spans = tuple(
                tuple(int(x) for x in part.split(" ")) for part in span_str.split(";")
            )
            surfaces = tuple(surf_str.split(";"))
            if len(surfaces) != len(spans):
                errors.append(
                    MalformedLine(ann_path, lineno, line, "span/surface count mismatch")
                )
                continue
            bad = False
            for (start, end), surf in zip(spans, surfaces):
                if end > len(text) or start >= end:
                    errors.append(OffsetOutOfBounds(ann_path, (start, end), len(text)))
                    bad = True
                    break
                if text[start:end] != surf:
                    errors.append(
                        SurfaceMismatch(ann_path, (start, end), surf, text[start:end])
                    )
                    bad = True
                    break
            if bad:
                continue
            try:
                mentions[tid] = EntityMention(doc_id, spans, surfaces)
            except CorpusError as exc:
                errors.append(MalformedLine(ann_path, lineno, line, str(exc)))
                continue
            labels[tid] = {}
            order.append(tid)
        elif line.startswith("A"):
            m = _MODIFIER_RE.match(line)
            if m is None:
                errors.append(MalformedLine(ann_path, lineno, line))
                continue
            _aid, mod_name, tid, label = m.groups()
            if tid not in mentions:
                errors.append(
                    MalformedLine(ann_path, lineno, line, f"reference to unknown {tid}")
                )
                continue
            if mod_name not in schema or mod_name not in applicable:
                errors.append(UnknownModifier(mod_name, f"{ann_path}:{lineno}"))
                continue
            if label not in schema[mod_name].labels:
                errors.append(UnknownLabel(mod_name, label, f"{ann_path}:{lineno}"))
                continue
            if mod_name in labels[tid]:
                warnings.warn(
                    f"{ann_path}:{lineno}: duplicate {mod_name} annotation on {tid}, "
                    "keeping the first",
                    stacklevel=2,
                )
                continue
            labels[tid][mod_name] = label
        else:
            errors.append(MalformedLine(ann_path, lineno, line, "unknown line type"))

    instances = [AnnotatedInstance(mentions[tid], labels[tid]) for tid in order]
    return Document(doc_id, text), instances


def parse_standoff(directory) -> Corpus:
    """Parse a standoff corpus directory into a validated :class:`Corpus`.

    All problems across all files are collected and raised together as a
    :class:`StandoffParseError`.
    """
    directory = Path(directory)
    schema_path = directory / "schema.json"
    if not schema_path.is_file():
        raise CorpusError(f"missing {schema_path}")
    meta = json.loads(schema_path.read_text(encoding="utf-8"))
    schema = ModifierSchema.from_dict(meta)
    applicable = frozenset(meta.get("applicable", schema.names))
    for name in applicable:
        if name not in schema:
            raise UnknownModifier(name, str(schema_path))

    errors: list[CorpusError] = []
    documents = {}
    instances = []
    txt_files = sorted(directory.glob("*.txt"))
    if not txt_files:
        raise EmptyCorpus(f"no .txt documents under {directory}")
    for ann_path in sorted(directory.glob("*.ann")):
        if not (directory / (ann_path.stem + ".txt")).is_file():
            errors.append(CorpusError(f"{ann_path}: no matching .txt document"))
    for txt_path in txt_files:
        ann_path = directory / (txt_path.stem + ".ann")
        if not ann_path.is_file():
            errors.append(CorpusError(f"{txt_path}: no matching .ann file"))
            continue
        doc, doc_instances = _parse_file_pair(txt_path, ann_path, schema, applicable, errors)
        if doc is not None:
            documents[doc.id] = doc
            instances.extend(doc_instances)
    if errors:
        raise StandoffParseError(errors)
    return Corpus(schema, documents, instances, applicable, name=directory.name)


def write_standoff(corpus: Corpus, directory) -> None:
    """Write a corpus as a standoff directory (inverse of :func:`parse_standoff`)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = corpus.schema.to_dict()
    meta["applicable"] = sorted(corpus.applicable_modifiers)
    (directory / "schema.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    by_doc: dict[str, list[AnnotatedInstance]] = {doc_id: [] for doc_id in corpus.documents}
    for inst in corpus.instances:
        by_doc[inst.mention.doc_id].append(inst)
    for doc_id, doc in corpus.documents.items():
        (directory / f"{doc_id}.txt").write_text(doc.text, encoding="utf-8")
        lines = []
        aid = 1
        for tnum, inst in enumerate(by_doc[doc_id], 1):
            span_str = ";".join(f"{s} {e}" for s, e in inst.mention.spans)
            surf_str = ";".join(inst.mention.surface)
            lines.append(f"T{tnum}\tEntity {span_str}\t{surf_str}")
            for mod_name in corpus.schema.names:
                if mod_name in inst.labels:
                    lines.append(f"A{aid}\t{mod_name} T{tnum} {inst.labels[mod_name]}")
                    aid += 1
        (directory / f"{doc_id}.ann").write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )


def split_corpus(corpus: Corpus, ratios, seed: int, by_document: bool = False):
    """Deterministic (train, dev, test) split.

    Entity-based by default: instances are shuffled with ``seed`` and
    partitioned by count, ``floor(train*N)`` / ``floor(dev*N)`` / rest.
    ``by_document=True`` instead partitions whole documents, for
    leakage-sensitive studies.
    """
    if len(corpus) == 0:
        raise EmptyCorpus("cannot split an empty corpus")
    r_train, r_dev, r_test = ratios
    if min(r_train, r_dev, r_test) <= 0:
        raise CorpusError("split ratios must be positive")
    if abs(r_train + r_dev + r_test - 1.0) > 1e-9:
        raise CorpusError(f"split ratios must sum to 1, got {ratios}")

    rng = random.Random(seed)

    def subcorpus(instances):
        doc_ids = {inst.mention.doc_id for inst in instances}
        docs = {d: corpus.documents[d] for d in sorted(doc_ids)}
        return Corpus(corpus.schema, docs, instances, corpus.applicable_modifiers,
                      name=corpus.name)

    if by_document:
        doc_ids = sorted(corpus.documents)
        rng.shuffle(doc_ids)
        n = len(doc_ids)
        n_train = math.floor(r_train * n)
        n_dev = math.floor(r_dev * n)
        groups = (
            set(doc_ids[:n_train]),
            set(doc_ids[n_train:n_train + n_dev]),
            set(doc_ids[n_train + n_dev:]),
        )
        parts = tuple(
            [inst for inst in corpus.instances if inst.mention.doc_id in grp]
            for grp in groups
        )
    else:
        order = list(range(len(corpus)))
        rng.shuffle(order)
        n = len(order)
        n_train = math.floor(r_train * n)
        n_dev = math.floor(r_dev * n)
        parts = (
            [corpus.instances[i] for i in order[:n_train]],
            [corpus.instances[i] for i in order[n_train:n_train + n_dev]],
            [corpus.instances[i] for i in order[n_train + n_dev:]],
        )
    return tuple(subcorpus(p) for p in parts)


def merge_corpora(a: Corpus, b: Corpus) -> Corpus:
    """Union of two corpora for joint training.

    Shared modifier names must carry identical label lists (and default);
    document ids are namespaced by source corpus name, and every instance
    keeps its source corpus's applicable-modifier set so heads the source
    never annotated stay masked.
    """
    for mod_b in b.schema.modifiers:
        if mod_b.name in a.schema:
            mod_a = a.schema[mod_b.name]
            if mod_a.labels != mod_b.labels or mod_a.default != mod_b.default:
                raise SchemaConflict(mod_b.name, mod_a.labels, mod_b.labels)
    merged_mods = list(a.schema.modifiers)
    merged_mods.extend(m for m in b.schema.modifiers if m.name not in a.schema)
    schema = ModifierSchema(tuple(merged_mods))

    prefix_a = a.name or "a"
    prefix_b = b.name or "b"
    if prefix_a == prefix_b:
        prefix_a, prefix_b = "a", "b"

    documents = {}
    instances = []
    for corpus, prefix in ((a, prefix_a), (b, prefix_b)):
        for doc in corpus.documents.values():
            documents[f"{prefix}.{doc.id}"] = Document(f"{prefix}.{doc.id}", doc.text)
        for inst in corpus.instances:
            mention = EntityMention(
                f"{prefix}.{inst.mention.doc_id}", inst.mention.spans, inst.mention.surface
            )
            instances.append(
                AnnotatedInstance(mention, dict(inst.labels), corpus.applicable_for(inst))
            )
    applicable = a.applicable_modifiers | b.applicable_modifiers
    return Corpus(schema, documents, instances, applicable, name=f"{prefix_a}+{prefix_b}")


def save_instances_jsonl(corpus: Corpus, path) -> None:
    """One instance per line: doc_id, spans, labels (and applicable if set)."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in corpus.instances:
            rec = {
                "doc_id": inst.mention.doc_id,
                "spans": [list(s) for s in inst.mention.spans],
                "labels": inst.labels,
            }
            if inst.applicable is not None:
                rec["applicable"] = sorted(inst.applicable)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_instances_jsonl(path, documents) -> list[AnnotatedInstance]:
    """Read instances written by :func:`save_instances_jsonl`.

    ``documents`` supplies the text the spans index; surfaces are read
    from it rather than stored.
    """
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            doc = documents.get(rec["doc_id"])
            if doc is None:
                raise CorpusError(f"{path}:{lineno}: unknown document {rec['doc_id']!r}")
            spans = tuple(tuple(s) for s in rec["spans"])
            for start, end in spans:
                if end > len(doc.text):
                    raise OffsetOutOfBounds(path, (start, end), len(doc.text))
            surface = tuple(doc.text[s:e] for s, e in spans)
            applicable = rec.get("applicable")
            instances.append(
                AnnotatedInstance(
                    EntityMention(rec["doc_id"], spans, surface),
                    dict(rec["labels"]),
                    frozenset(applicable) if applicable is not None else None,
                )
            )
    return instances
