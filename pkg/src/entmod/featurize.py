"""Turn annotated instances into the padded pair-sequence arrays the model eats.

The input to the classifier is a two-part sequence: the character context
around the mention (200 before, 50 after by default) and, as a second
segment, the mention's own surface string — a hint that points the pooled
representation at the right entity when several share one window.  Layout:

    [CLS] <context tokens> [SEP] <mention tokens> [SEP]   (hint on)
    [CLS] <context tokens> [SEP]                          (hint off)

Sequences are padded to ``max_len``; when over budget the context is
truncated from the left, never the mention tokens.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import (
    AnnotatedInstance,
    Corpus,
    CorpusError,
    Document,
    EmptyCorpus,
    EntityMention,
    ModifierSchema,
)

CLS_ID, SEP_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
_N_SPECIALS = 4

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class HintTooLong(CorpusError):
    pass


@dataclass(frozen=True)
class ContextWindow:
    text: str
    mention_char_offsets: tuple[tuple[int, int], ...]
    window_doc_span: tuple[int, int]


@dataclass(frozen=True)
class FeaturizeConfig:
    before: int = 200
    after: int = 50
    max_len: int = 144
    hint: bool = True
    min_freq: int = 1

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"before": self.before, "after": self.after, "max_len": self.max_len,
             "hint": self.hint, "min_freq": self.min_freq},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()


def tokenize(text: str, case_fold: bool = True) -> list[str]:
    """Whitespace/punctuation word split; punctuation marks are their own tokens."""
    if case_fold:
        text = text.lower()
    return _TOKEN_RE.findall(text)


class TokenizerVocab:
    """Frequency-ordered word vocabulary with four reserved ids.

    Ids 0..3 are CLS/SEP/PAD/UNK; real tokens start at 4 in
    frequency-then-lexicographic order so builds are reproducible.
    """

    def __init__(self, tokens, case_fold: bool = True):
        self.tokens = tuple(tokens)
        self.case_fold = case_fold
        self._ids = {tok: i + _N_SPECIALS for i, tok in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens) + _N_SPECIALS

    def encode_text(self, text: str) -> list[int]:
        return [self._ids.get(tok, UNK_ID) for tok in tokenize(text, self.case_fold)]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(b"case_fold=1" if self.case_fold else b"case_fold=0")
        for tok in self.tokens:
            h.update(b"\x00" + tok.encode("utf-8"))
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "case_fold": self.case_fold}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerVocab":
        return cls(d["tokens"], d.get("case_fold", True))


def build_vocab(corpus: Corpus, min_freq: int = 1, case_fold: bool = True) -> TokenizerVocab:
    """Deterministic vocabulary over all document text of ``corpus``."""
    counts: Counter[str] = Counter()
    for doc_id in sorted(corpus.documents):
        counts.update(tokenize(corpus.documents[doc_id].text, case_fold))
    kept = [tok for tok, c in counts.items() if c >= min_freq]
    if not kept:
        raise EmptyCorpus("no tokens meet the frequency threshold")
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return TokenizerVocab(kept, case_fold)


@dataclass(frozen=True)
class EncodedExample:
    token_ids: np.ndarray      # (max_len,) int32, starts with CLS
    segment_ids: np.ndarray    # (max_len,) int8, 0 first sequence / 1 second
    attention_mask: np.ndarray  # (max_len,) int8, 1 real / 0 padding
    gold: dict[str, int]       # modifier name -> label index
    head_mask: dict[str, bool]  # modifier name -> participates in loss
    instance_id: str = ""

    def __post_init__(self):
        assert len(self.token_ids) == len(self.segment_ids) == len(self.attention_mask)
        for name, active in self.head_mask.items():
            assert not active or name in self.gold


def extract_context(doc: Document, mention: EntityMention,
                    before: int = 200, after: int = 50) -> ContextWindow:
    """Character window around the mention: ``before`` chars of left context,
    ``after`` of right, clamped to the document; spans discontiguous mentions."""
    lo = max(0, mention.start - before)
    hi = min(len(doc.text), mention.end + after)
    offsets = tuple((s - lo, e - lo) for s, e in mention.spans)
    return ContextWindow(doc.text[lo:hi], offsets, (lo, hi))


def build_pair(window: ContextWindow, mention: EntityMention, hint: bool = True):
    """(first, second) strings; second is the mention surface joined on spaces,
    or empty when the hint is ablated."""
    second = " ".join(mention.surface) if hint else ""
    return window.text, second


def encode(pair, vocab: TokenizerVocab, gold, head_mask, max_len: int = 144,
           instance_id: str = "") -> EncodedExample:
    """Tokenize a (first, second) pair into fixed-length id arrays.

    Over-long inputs lose first-sequence tokens from the LEFT; the second
    sequence and its separator always survive intact.
    """
    first, second = pair
    first_ids = vocab.encode_text(first)
    second_ids = vocab.encode_text(second) if second else []
    with_hint = bool(second)

    overhead = 3 if with_hint else 2  # CLS + SEP (+ trailing SEP)
    budget = max_len - overhead - len(second_ids)
    if budget < 0:
        raise HintTooLong(
            f"mention tokens ({len(second_ids)}) do not fit in max_len={max_len}"
        )
    if len(first_ids) > budget:
        first_ids = first_ids[len(first_ids) - budget:]

    ids = [CLS_ID, *first_ids, SEP_ID]
    segs = [0] * len(ids)
    if with_hint:
        ids.extend([*second_ids, SEP_ID])
        segs.extend([1] * (len(second_ids) + 1))
    n_real = len(ids)
    pad = max_len - n_real
    ids.extend([PAD_ID] * pad)
    segs.extend([0] * pad)
    mask = [1] * n_real + [0] * pad

    return EncodedExample(
        token_ids=np.asarray(ids, dtype=np.int32),
        segment_ids=np.asarray(segs, dtype=np.int8),
        attention_mask=np.asarray(mask, dtype=np.int8),
        gold=dict(gold),
        head_mask=dict(head_mask),
        instance_id=instance_id,
    )


def resolve_targets(schema: ModifierSchema, instance: AnnotatedInstance,
                    applicable: frozenset[str]):
    """Per-head gold label indices and loss-participation mask.

    Heads the source corpus annotates get a gold index (explicit label or
    the default); heads it never annotates are masked and carry no gold.
    """
    gold: dict[str, int] = {}
    head_mask: dict[str, bool] = {}
    for mod in schema.modifiers:
        if mod.name in applicable:
            label = instance.labels.get(mod.name, mod.default)
            gold[mod.name] = mod.label_index(label)
            head_mask[mod.name] = True
        else:
            head_mask[mod.name] = False
    return gold, head_mask


def encode_instance(doc: Document, instance: AnnotatedInstance, vocab: TokenizerVocab,
                    schema: ModifierSchema, applicable: frozenset[str],
                    config: FeaturizeConfig = FeaturizeConfig()) -> EncodedExample:
    window = extract_context(doc, instance.mention, config.before, config.after)
    pair = build_pair(window, instance.mention, config.hint)
    gold, head_mask = resolve_targets(schema, instance, applicable)
    return encode(pair, vocab, gold, head_mask, config.max_len,
                  instance_id=instance.instance_id())


def encode_corpus(corpus: Corpus, vocab: TokenizerVocab,
                  config: FeaturizeConfig = FeaturizeConfig(),
                  schema: ModifierSchema | None = None,
                  threads: int = 1) -> list[EncodedExample]:
    """Encode every instance, in corpus order; per-instance output is
    deterministic so thread-parallel encoding preserves results."""
    schema = schema or corpus.schema

    def one(inst):
        return encode_instance(
            corpus.document_for(inst), inst, vocab, schema,
            corpus.applicable_for(inst), config,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, corpus.instances))
    return [one(inst) for inst in corpus.instances]


_CACHE_VERSION = 1


def save_cache(path, examples, vocab: TokenizerVocab, config: FeaturizeConfig) -> None:
    """Packed integer arrays keyed by vocab and featurizer fingerprints."""
    if not examples:
        raise EmptyCorpus("nothing to cache")
    head_names = sorted({name for ex in examples for name in ex.head_mask})
    arrays = {
        "token_ids": np.stack([ex.token_ids for ex in examples]),
        "segment_ids": np.stack([ex.segment_ids for ex in examples]),
        "attention_mask": np.stack([ex.attention_mask for ex in examples]),
        "instance_ids": np.asarray([ex.instance_id for ex in examples]),
    }
    for name in head_names:
        arrays[f"gold::{name}"] = np.asarray(
            [ex.gold.get(name, -1) for ex in examples], dtype=np.int32
        )
        arrays[f"mask::{name}"] = np.asarray(
            [ex.head_mask.get(name, False) for ex in examples], dtype=bool
        )
    meta = json.dumps(
        {"version": _CACHE_VERSION, "vocab": vocab.fingerprint(),
         "config": config.fingerprint(), "heads": head_names},
        sort_keys=True,
    )
    arrays["meta"] = np.asarray(meta)
    np.savez(path, **arrays)


def load_cache(path, vocab: TokenizerVocab, config: FeaturizeConfig):
    """Return cached examples, or None when any fingerprint disagrees."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError):
        return None
    meta = json.loads(str(data["meta"]))
    if (meta.get("version") != _CACHE_VERSION
            or meta.get("vocab") != vocab.fingerprint()
            or meta.get("config") != config.fingerprint()):
        return None
    heads = meta["heads"]
    examples = []
    for i in range(data["token_ids"].shape[0]):
        gold = {}
        head_mask = {}
        for name in heads:
            g = int(data[f"gold::{name}"][i])
            m = bool(data[f"mask::{name}"][i])
            head_mask[name] = m
            if g >= 0:
                gold[name] = g
        examples.append(
            EncodedExample(
                token_ids=data["token_ids"][i],
                segment_ids=data["segment_ids"][i],
                attention_mask=data["attention_mask"][i],
                gold=gold,
                head_mask=head_mask,
                instance_id=str(data["instance_ids"][i]),
            )
        )
    return examples
