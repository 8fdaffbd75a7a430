"""Metrics: weighted/unweighted accuracy, micro/macro F1, chi-square.

Conventions, all auditable from the emitted report:

* Class prevalence (for weighted accuracy) is computed over the
  evaluation set's own gold labels; each instance weighs
  ``1 - prevalence(gold class)`` so rare classes dominate the score.
* Micro F1 treats the modifier's default label as the null class: a
  default-default agreement earns no credit, only non-default gold or
  non-default predictions generate TP/FP/FN.  ``include_default`` restores
  naive pooling.
* Macro F1 averages per-class F1; whether the default class joins the
  mean is a flag.  Classes absent from both gold and predictions score 0
  and are flagged.
* Excluding a class removes its TP/FP/FN events from the pools; the
  instances themselves stay in the set and still feed other classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, ModifierSchema, UnknownLabel, UnknownModifier


class EmptySet(Exception):
    pass


class EmptyWeight(Exception):
    pass


class AllClassesExcluded(Exception):
    pass


class DegenerateTable(Exception):
    pass


CHI2_CRITICAL_05 = 3.841  # df=1, alpha=0.05


class PredictionSet:
    """Aligned gold and predicted labels, keyed by instance id.

    Each instance carries labels only for the modifiers applicable to it;
    gold and predictions must cover the same modifiers per instance.
    """

    def __init__(self, schema: ModifierSchema, records: dict[str, dict]):
        self.schema = schema
        self.records = dict(records)
        for iid, rec in self.records.items():
            gold, pred = rec["gold"], rec["pred"]
            if set(gold) != set(pred):
                raise UnknownModifier(
                    f"instance {iid}: gold covers {sorted(gold)} "
                    f"but predictions cover {sorted(pred)}"
                )
            for mod_name in gold:
                mod = schema[mod_name]
                for label in (gold[mod_name], pred[mod_name]):
                    if label not in mod.labels:
                        raise UnknownLabel(mod_name, label, iid)

    @classmethod
    def from_predictions(cls, corpus: Corpus, predictions: dict[str, dict[str, str]]):
        """Pair model outputs with resolved gold labels (explicit annotation
        or the default) for every applicable modifier."""
        records = {}
        for inst in corpus.instances:
            iid = inst.instance_id()
            pred = predictions[iid]
            applicable = corpus.applicable_for(inst)
            gold = {}
            for name in sorted(applicable):
                mod = corpus.schema[name]
                gold[name] = inst.labels.get(name, mod.default)
            records[iid] = {
                "gold": gold,
                "pred": {name: pred[name] for name in gold},
            }
        return cls(corpus.schema, records)

    def modifiers(self) -> tuple[str, ...]:
        seen = {name for rec in self.records.values() for name in rec["gold"]}
        return tuple(n for n in self.schema.names if n in seen)

    def pairs(self, modifier: str) -> list[tuple[str, str]]:
        """(gold, pred) label pairs for every instance carrying the modifier,
        in sorted instance-id order."""
        out = []
        for iid in sorted(self.records):
            rec = self.records[iid]
            if modifier in rec["gold"]:
                out.append((rec["gold"][modifier], rec["pred"][modifier]))
        return out

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for iid in sorted(self.records):
                rec = self.records[iid]
                for name in sorted(rec["gold"]):
                    fh.write(json.dumps(
                        {"instance_id": iid, "modifier": name,
                         "gold": rec["gold"][name], "pred": rec["pred"][name]},
                        sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path, schema: ModifierSchema) -> "PredictionSet":
        records: dict[str, dict] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                rec = records.setdefault(row["instance_id"], {"gold": {}, "pred": {}})
                rec["gold"][row["modifier"]] = row["gold"]
                rec["pred"][row["modifier"]] = row["pred"]
        return cls(schema, records)


def prevalence(preds: PredictionSet, modifier: str) -> dict[str, float]:
    """Gold-label class fractions within this evaluation set."""
    pairs = preds.pairs(modifier)
    if not pairs:
        raise EmptySet(f"no instances carry modifier {modifier!r}")
    counts = {label: 0 for label in preds.schema[modifier].labels}
    for gold, _ in pairs:
        counts[gold] += 1
    n = len(pairs)
    return {label: c / n for label, c in counts.items()}


def weighted_accuracy(preds: PredictionSet, modifier: str) -> float:
    """Accuracy with each instance weighted by 1 - prevalence(gold class)."""
    prev = prevalence(preds, modifier)
    num = den = 0.0
    for gold, pred in preds.pairs(modifier):
        w = 1.0 - prev[gold]
        den += w
        if gold == pred:
            num += w
    if den == 0.0:
        raise EmptyWeight(
            f"gold for {modifier!r} is single-class, every weight is zero"
        )
    return num / den


def unweighted_accuracy(preds: PredictionSet, modifier: str) -> float:
    pairs = preds.pairs(modifier)
    if not pairs:
        raise EmptySet(f"no instances carry modifier {modifier!r}")
    return sum(1 for g, p in pairs if g == p) / len(pairs)


def confusion(preds: PredictionSet, modifier: str):
    """(matrix, labels): rows gold, columns predicted."""
    labels = preds.schema[modifier].labels
    index = {label: i for i, label in enumerate(labels)}
    mat = np.zeros((len(labels), len(labels)), dtype=np.int64)
    pairs = preds.pairs(modifier)
    if not pairs:
        raise EmptySet(f"no instances carry modifier {modifier!r}")
    for gold, pred in pairs:
        mat[index[gold], index[pred]] += 1
    return mat, labels


def _prf(tp: int, fp: int, fn: int):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    gold_support: int
    pred_support: int
    absent: bool  # no gold and no predicted occurrences


@dataclass
class F1Scores:
    micro: float
    macro: float
    per_class: dict[str, ClassScores]


def f1_scores(preds: PredictionSet, modifier: str,
              exclude_classes: frozenset[str] = frozenset(),
              include_default_in_macro: bool = True,
              include_default_in_micro: bool = False) -> F1Scores:
    mod = preds.schema[modifier]
    for label in exclude_classes:
        if label not in mod.labels:
            raise UnknownLabel(modifier, label, "exclude_classes")
    mat, labels = confusion(preds, modifier)

    tp = np.diag(mat)
    fp = mat.sum(axis=0) - tp
    fn = mat.sum(axis=1) - tp

    per_class = {}
    for i, label in enumerate(labels):
        p, r, f1 = _prf(int(tp[i]), int(fp[i]), int(fn[i]))
        per_class[label] = ClassScores(
            precision=p, recall=r, f1=f1,
            gold_support=int(mat[i].sum()),
            pred_support=int(mat[:, i].sum()),
            absent=bool(mat[i].sum() == 0 and mat[:, i].sum() == 0),
        )

    def included(flag_default: bool):
        return [
            i for i, label in enumerate(labels)
            if label not in exclude_classes and (flag_default or label != mod.default)
        ]

    micro_idx = included(include_default_in_micro)
    macro_idx = included(include_default_in_macro)
    if not micro_idx or not macro_idx:
        raise AllClassesExcluded(f"every class of {modifier!r} is excluded")

    _, _, micro = _prf(
        int(tp[micro_idx].sum()), int(fp[micro_idx].sum()), int(fn[micro_idx].sum())
    )
    macro = float(np.mean([per_class[labels[i]].f1 for i in macro_idx]))
    return F1Scores(micro=micro, macro=macro, per_class=per_class)


def macro_f1_from_indices(gold, pred, n_classes: int) -> float:
    """Macro F1 over integer class ids, every class included (absent classes
    count as 0).  Used as the early-stopping dev metric."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    f1s = []
    for c in range(n_classes):
        tp = int(((gold == c) & (pred == c)).sum())
        fp = int(((gold != c) & (pred == c)).sum())
        fn = int(((gold == c) & (pred != c)).sum())
        f1s.append(_prf(tp, fp, fn)[2])
    return float(np.mean(f1s))


def chi_square(a_correct: int, a_total: int, b_correct: int, b_total: int,
               yates: bool = False):
    """Pearson chi-square on the 2x2 correct/incorrect table of two systems.

    Returns (statistic, significant_at_05) with the df=1 critical value
    3.841; ``yates`` applies the continuity correction (off by default).
    """
    if a_total <= 0 or b_total <= 0:
        raise DegenerateTable("system totals must be positive")
    if not (0 <= a_correct <= a_total and 0 <= b_correct <= b_total):
        raise DegenerateTable("correct counts must lie within totals")
    a, b = a_correct, a_total - a_correct
    c, d = b_correct, b_total - b_correct
    n = a + b + c + d
    margins = (a + b, c + d, a + c, b + d)
    if 0 in margins:
        raise DegenerateTable(f"zero margin in table [[{a},{b}],[{c},{d}]]")
    diff = abs(a * d - b * c)
    if yates:
        diff = max(diff - n / 2.0, 0.0)
    stat = n * diff * diff / (margins[0] * margins[1] * margins[2] * margins[3])
    return float(stat), bool(stat > CHI2_CRITICAL_05)


@dataclass
class EvalOptions:
    exclude_classes: dict[str, frozenset[str]] = field(default_factory=dict)
    include_default_in_macro: bool = True
    include_default_in_micro: bool = False
    pooled_average: bool = False


@dataclass
class EvalReport:
    per_modifier: dict[str, dict]
    averages: dict[str, float | None]
    options: dict
    notes: tuple[str, ...] = ()

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(
            {"per_modifier": self.per_modifier, "averages": self.averages,
             "options": self.options, "notes": list(self.notes)},
            indent=indent, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["per_modifier"], d["averages"], d.get("options", {}),
                   tuple(d.get("notes", ())))

    def render_text(self) -> str:
        cols = ("n", "correct", "w_acc", "u_acc", "micro_f1", "macro_f1")
        width = max([len("modifier")] + [len(m) for m in self.per_modifier])
        lines = ["  ".join(["modifier".ljust(width)] + [c.rjust(9) for c in cols])]

        def fmt(value):
            if value is None:
                return "-".rjust(9)
            if isinstance(value, float):
                return f"{value:9.6f}"
            return str(value).rjust(9)

        for name, row in self.per_modifier.items():
            lines.append("  ".join(
                [name.ljust(width)] + [fmt(row.get(c)) for c in cols]
            ))
        lines.append("  ".join(
            ["Avg".ljust(width)] + [fmt(self.averages.get(c)) for c in cols]
        ))
        for note in self.notes:
            lines.append(f"# {note}")
        return "\n".join(lines) + "\n"


def build_report(preds: PredictionSet, options: EvalOptions = EvalOptions()) -> EvalReport:
    """All metrics per modifier plus an average row (unweighted mean over
    modifiers, or instance-pooled when ``pooled_average``)."""
    per_modifier = {}
    for name in preds.modifiers():
        pairs = preds.pairs(name)
        excl = options.exclude_classes.get(name, frozenset())
        mat, labels = confusion(preds, name)
        try:
            w_acc = weighted_accuracy(preds, name)
        except EmptyWeight:
            w_acc = None
        scores = f1_scores(
            preds, name, excl,
            include_default_in_macro=options.include_default_in_macro,
            include_default_in_micro=options.include_default_in_micro,
        )
        per_modifier[name] = {
            "n": len(pairs),
            "correct": sum(1 for g, p in pairs if g == p),
            "w_acc": w_acc,
            "u_acc": unweighted_accuracy(preds, name),
            "micro_f1": scores.micro,
            "macro_f1": scores.macro,
            "prevalence": {k: round(v, 6) for k, v in prevalence(preds, name).items()},
            "per_class": {
                label: {
                    "precision": cs.precision, "recall": cs.recall, "f1": cs.f1,
                    "gold_support": cs.gold_support, "pred_support": cs.pred_support,
                    "absent": cs.absent,
                }
                for label, cs in scores.per_class.items()
            },
            "confusion": {"labels": list(labels), "matrix": mat.tolist()},
            "excluded_classes": sorted(excl),
        }

    averages: dict[str, float | None] = {}
    if options.pooled_average:
        n = sum(row["n"] for row in per_modifier.values())
        correct = sum(row["correct"] for row in per_modifier.values())
        averages["n"] = n
        averages["correct"] = correct
        averages["u_acc"] = correct / n if n else None
        tp = fp = fn = 0
        for name, row in per_modifier.items():
            mod = preds.schema[name]
            excl = options.exclude_classes.get(name, frozenset())
            mat = np.asarray(row["confusion"]["matrix"])
            labels = row["confusion"]["labels"]
            for i, label in enumerate(labels):
                if label in excl:
                    continue
                if not options.include_default_in_micro and label == mod.default:
                    continue
                tp += mat[i, i]
                fp += mat[:, i].sum() - mat[i, i]
                fn += mat[i, :].sum() - mat[i, i]
        averages["micro_f1"] = _prf(int(tp), int(fp), int(fn))[2]
        averages["w_acc"] = None
        averages["macro_f1"] = None
    else:
        for key in ("w_acc", "u_acc", "micro_f1", "macro_f1"):
            values = [row[key] for row in per_modifier.values() if row[key] is not None]
            averages[key] = float(np.mean(values)) if values else None

    notes = (
        "class prevalence is computed over this evaluation set's gold labels",
        "micro F1 excludes the default (null) class unless include_default_in_micro",
        "averages are unweighted means over modifiers"
        + (" (pooled over instances)" if options.pooled_average else ""),
    )
    return EvalReport(
        per_modifier=per_modifier,
        averages=averages,
        options={
            "exclude_classes": {k: sorted(v) for k, v in options.exclude_classes.items()},
            "include_default_in_macro": options.include_default_in_macro,
            "include_default_in_micro": options.include_default_in_micro,
            "pooled_average": options.pooled_average,
        },
        notes=notes,
    )
