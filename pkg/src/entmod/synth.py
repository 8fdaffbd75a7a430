"""Synthetic corpora with labels planted as textual cues.

Each generated instance is a mention word embedded in filler text.  For
every modifier whose label is non-default, a cue word is planted in the
mention's context window, so the gold labels are exactly recoverable from
the text by scanning for cues (the oracle below).  Distractor noise
optionally plants extra cue words that may contradict the gold labels.

Two placement modes:

* ``adjacent`` — cues sit immediately before the mention word, so when a
  document carries several mentions in one window, only the cue next to
  the target mention determines its labels.
* ``scattered`` — cues land anywhere in the left context; only meaningful
  for single-mention documents.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, asdict

from .corpus import (
    AnnotatedInstance,
    Corpus,
    Document,
    EntityMention,
    InvalidConfig,
    ModifierSchema,
)


@dataclass
class SynthConfig:
    schema: ModifierSchema
    n_instances: int
    vocab_size: int = 200
    noise_rate: float = 0.0
    cues: dict[str, dict[str, str]] | None = None
    mentions_per_doc: int = 1
    cue_placement: str = "adjacent"
    cue_style: str = "shared"
    label_mode: str = "independent"
    default_label_prob: float = 0.5
    mention_pool_size: int = 8
    left_words: tuple[int, int] = (8, 26)
    gap_words: tuple[int, int] = (2, 4)
    right_words: tuple[int, int] = (1, 4)
    name: str = "synth"

    def __post_init__(self):
        if self.n_instances <= 0:
            raise InvalidConfig("n_instances must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise InvalidConfig("noise_rate must be in [0, 1]")
        if self.cue_placement not in ("adjacent", "scattered"):
            raise InvalidConfig(f"unknown cue placement {self.cue_placement!r}")
        if self.cue_style not in ("shared", "per_mention"):
            raise InvalidConfig(f"unknown cue style {self.cue_style!r}")
        if self.label_mode not in ("independent", "contrastive"):
            raise InvalidConfig(f"unknown label mode {self.label_mode!r}")
        if self.mentions_per_doc < 1:
            raise InvalidConfig("mentions_per_doc must be >= 1")
        if self.label_mode == "contrastive" and self.mentions_per_doc < 2:
            raise InvalidConfig("contrastive labels need >= 2 mentions per document")
        if not 0.0 <= self.default_label_prob < 1.0:
            raise InvalidConfig("default_label_prob must be in [0, 1)")
        if self.cues is None:
            self.cues = auto_cues(self.schema)
        else:
            for mod in self.schema.modifiers:
                for label, cue in self.cues.get(mod.name, {}).items():
                    mod.label_index(label)
                    if " " in cue or not cue:
                        raise InvalidConfig(f"cue {cue!r} must be one non-empty word")
        n_cues = sum(len(v) for v in self.cues.values())
        if self.cue_style == "per_mention":
            n_cues *= self.mention_pool_size
        self.n_fillers = self.vocab_size - n_cues - self.mention_pool_size - 1
        if self.n_fillers < 10:
            raise InvalidConfig(
                f"vocab_size {self.vocab_size} too small for {n_cues} cues "
                f"and {self.mention_pool_size} mention words"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        d.pop("n_fillers", None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["schema"] = ModifierSchema.from_dict(d["schema"])
        for key in ("left_words", "gap_words", "right_words"):
            if key in d:
                d[key] = tuple(d[key])
        d.pop("n_fillers", None)
        return cls(**d)


def auto_cues(schema: ModifierSchema) -> dict[str, dict[str, str]]:
    """One generated cue word per non-default label, in schema order."""
    cues: dict[str, dict[str, str]] = {}
    idx = 0
    for mod in schema.modifiers:
        cues[mod.name] = {}
        for label in mod.labels:
            if label == mod.default:
                continue
            cues[mod.name][label] = f"q{idx:02d}"
            idx += 1
    return cues


def _mention_pool(config: SynthConfig) -> list[str]:
    return [f"ent{j:02d}" for j in range(config.mention_pool_size)]


def cue_lookup(config: SynthConfig) -> dict[str, tuple[str, str]]:
    """Invert the cue table: planted word -> (modifier, label).

    With ``cue_style="per_mention"`` each cue word agrees with its mention
    (cue plus mention word fused into one token), so the table expands over
    the whole mention pool.
    """
    table = {}
    pool = _mention_pool(config)
    for mod_name, by_label in config.cues.items():
        for label, cue in by_label.items():
            words = [cue + m for m in pool] if config.cue_style == "per_mention" else [cue]
            for word in words:
                if word in table:
                    raise InvalidConfig(f"cue word {word!r} used for two labels")
                table[word] = (mod_name, label)
    return table


def generate_synthetic(config: SynthConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus; same config and seed give identical bytes."""
    rng = random.Random(seed)
    fillers = [f"w{i:03d}" for i in range(config.n_fillers)]
    mention_pool = _mention_pool(config)
    all_cues = sorted(cue_lookup(config))

    documents = {}
    instances = []
    doc_num = 0
    remaining = config.n_instances
    while remaining > 0:
        k = min(config.mentions_per_doc, remaining)
        doc_id = f"{config.name}-{doc_num:05d}"
        words: list[str] = []
        pending: list[tuple[int, dict[str, str]]] = []  # (word index of mention, labels)
        # distinct mention words per document, so the hint identifies its target
        doc_mentions = rng.sample(mention_pool, k) if k <= len(mention_pool) else [
            rng.choice(mention_pool) for _ in range(k)
        ]

        if config.label_mode == "contrastive":
            # exactly one mention per document carries each modifier's
            # non-default label, so sibling mentions always disagree
            per_mention: list[dict[str, str]] = [{} for _ in range(k)]
            for mod in config.schema.modifiers:
                others = [l for l in mod.labels if l != mod.default]
                per_mention[rng.randrange(k)][mod.name] = rng.choice(others)
        else:
            per_mention = []
            for _ in range(k):
                labels: dict[str, str] = {}
                for mod in config.schema.modifiers:
                    if rng.random() < config.default_label_prob:
                        continue
                    others = [l for l in mod.labels if l != mod.default]
                    labels[mod.name] = rng.choice(others)
                per_mention.append(labels)

        for m in range(k):
            run = rng.randint(*(config.left_words if m == 0 else config.gap_words))
            run_words = [rng.choice(fillers) for _ in range(run)]
            labels = per_mention[m]
            cue_words: list[str] = []
            for mod in config.schema.modifiers:
                if mod.name not in labels:
                    continue
                cue = config.cues.get(mod.name, {}).get(labels[mod.name])
                if cue is None:
                    raise InvalidConfig(f"no cue for {mod.name}={labels[mod.name]}")
                cue_words.append(cue)
            if rng.random() < config.noise_rate and len(run_words) > 3:
                # distractor cue, kept away from the mention-adjacent slot
                pos = rng.randrange(0, len(run_words) - 2)
                run_words.insert(pos, rng.choice(all_cues))
            if config.cue_placement == "adjacent":
                run_words.extend(cue_words)
            else:
                for cue in cue_words:
                    run_words.insert(rng.randrange(0, len(run_words) + 1), cue)
            words.extend(run_words)
            words.append(doc_mentions[m])
            pending.append((len(words) - 1, labels))

        words.extend(rng.choice(fillers) for _ in range(rng.randint(*config.right_words)))
        words.append(".")

        offsets = []
        pos = 0
        for w in words:
            offsets.append((pos, pos + len(w)))
            pos += len(w) + 1
        text = " ".join(words)
        documents[doc_id] = Document(doc_id, text)
        for word_idx, labels in pending:
            start, end = offsets[word_idx]
            mention = EntityMention(doc_id, ((start, end),), (text[start:end],))
            instances.append(AnnotatedInstance(mention, labels))
        doc_num += 1
        remaining -= k

    return Corpus(
        config.schema, documents, instances, frozenset(config.schema.names), name=config.name
    )


def oracle_labels(text: str, mention: EntityMention, config: SynthConfig,
                  before: int = 200, after: int = 50) -> dict[str, str]:
    """Recover an instance's labels straight from the text.

    Independent of the model pipeline: slices the character window around
    the mention and maps planted cue words back to labels.  With
    ``adjacent`` placement only the cue run immediately before the mention
    counts; with ``scattered`` any cue in the window counts.  Defaults fill
    the remaining modifiers.
    """
    table = cue_lookup(config)
    lo = max(0, mention.start - before)
    hi = min(len(text), mention.end + after)
    window = text[lo:hi]
    labels = {mod.name: mod.default for mod in config.schema.modifiers}

    if config.cue_placement == "adjacent":
        left = window[: mention.start - lo].split()
        for word in reversed(left):
            hit = table.get(word)
            if hit is None:
                break
            mod_name, label = hit
            labels[mod_name] = label
    else:
        for word in window.split():
            hit = table.get(word)
            if hit is not None:
                mod_name, label = hit
                labels[mod_name] = label
    return labels
