"""Command-line entry point for reproducible experiment runs.

Subcommands: synth, stats, prepare, train, transfer, single-task,
predict, eval, compare.  Values resolve as flags > environment variables
(paths only, ``ENTMOD_<KEY>``) > ``--config`` JSON > built-in defaults.
Every run writes a manifest (config snapshot, input hashes, artifact
paths, timings) under its output directory; all other outputs are
byte-reproducible for a fixed config and seed.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 numerical failure (diverged loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, CheckpointVersionMismatch
from .corpus import Corpus, CorpusError, merge_corpora, parse_standoff, split_corpus, write_standoff
from .encoder import EncoderConfig, ShapeMismatch
from .evaluate import (
    AllClassesExcluded,
    DegenerateTable,
    EmptySet,
    EvalOptions,
    EvalReport,
    PredictionSet,
    build_report,
    chi_square,
)
from .featurize import FeaturizeConfig, build_vocab, encode_corpus, save_cache
from .model import Batch, NoActiveHeads, predict_batch
from .synth import SynthConfig, generate_synthetic
from .train import (
    DivergedLoss,
    TrainConfig,
    train_multitask,
    train_single_task,
    transfer_load,
)

PATH_KEYS = {
    "config", "corpus", "train", "dev", "out", "checkpoint",
    "source_checkpoint", "pred", "schema", "report_a", "report_b",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(sub.name.encode())
            h.update(sub.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    return h.hexdigest()


class Manifest:
    """Run record: written when the command starts, finalized when it ends."""

    def __init__(self, out_dir: Path, command: str, settings: dict):
        self.path = out_dir / "manifest.json"
        self.data = {
            "command": command,
            "version": __version__,
            "settings": {k: v for k, v in sorted(settings.items()) if v is not None},
            "inputs": {},
            "artifacts": [],
            "status": "running",
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self._t0 = time.perf_counter()

    def add_input(self, key: str, path) -> None:
        self.data["inputs"][key] = {"path": str(path), "sha256": _sha256_path(Path(path))}

    def add_artifact(self, path) -> None:
        self.data["artifacts"].append(str(path))

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")

    def finish(self) -> None:
        self.data["status"] = "done"
        self.data["duration_s"] = round(time.perf_counter() - self._t0, 3)
        self.write()


def _load_corpus(paths, name=None) -> Corpus:
    """Parse one or more standoff directories; several are merged."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    corpora = [parse_standoff(p) for p in paths]
    merged = corpora[0]
    for other in corpora[1:]:
        merged = merge_corpora(merged, other)
    if name:
        merged.name = name
    return merged


def _feat_config(ns) -> FeaturizeConfig:
    return FeaturizeConfig(
        before=ns.before, after=ns.after, max_len=ns.max_len,
        hint=not ns.no_hint, min_freq=ns.min_freq,
    )


def _encoder_config(ns) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=4,  # resized to the real vocabulary downstream
        hidden_size=ns.hidden_size, num_layers=ns.layers,
        num_attention_heads=ns.attention_heads, feedforward_size=ns.ffn_size,
        max_positions=max(ns.max_len, 16), dropout_rate=ns.dropout, seed=ns.seed,
    )


def _train_config(ns) -> TrainConfig:
    return TrainConfig(
        learning_rate=ns.lr, weight_decay=ns.weight_decay,
        batch_size=ns.batch_size, max_epochs=ns.epochs,
        early_stop_patience=ns.patience, loss_mode=ns.loss,
        focal_gamma=ns.gamma, seed=ns.seed,
    )


def corpus_stats(corpus: Corpus) -> dict:
    """Entity count plus explicit non-default annotation count per modifier."""
    counts = {name: 0 for name in corpus.schema.names
              if name in corpus.applicable_modifiers}
    for inst in corpus.instances:
        for name, label in inst.labels.items():
            if label != corpus.schema[name].default:
                counts[name] += 1
    return {"entities": len(corpus), "modifiers": counts}


def _stats_text(name: str, stats: dict) -> str:
    mods = stats["modifiers"]
    header = ["corpus", "entities", *mods.keys()]
    row = [name, str(stats["entities"]), *(str(v) for v in mods.values())]
    widths = [max(len(a), len(b)) for a, b in zip(header, row)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return fmt.format(*header) + "\n" + fmt.format(*row) + "\n"


def _predict_corpus(ckpt: Checkpoint, corpus: Corpus, feat: FeaturizeConfig,
                    batch_size: int, threads: int) -> PredictionSet:
    for name in corpus.applicable_modifiers:
        if name not in ckpt.schema or name not in ckpt.heads:
            raise ShapeMismatch(
                f"checkpoint has no head for corpus modifier {name!r}"
            )
        if ckpt.schema[name].labels != corpus.schema[name].labels:
            raise ShapeMismatch(
                f"label list for {name!r} differs between checkpoint and corpus"
            )
    model = ckpt.to_model()
    examples = encode_corpus(corpus, ckpt.vocab, feat, schema=ckpt.schema,
                             threads=threads)
    predictions = {}
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        batch = Batch.from_examples(chunk, model.heads.keys())
        for ex, pred in zip(chunk, predict_batch(model, batch)):
            predictions[ex.instance_id] = pred
    return PredictionSet.from_predictions(corpus, predictions)


def _add_feat_flags(p):
    p.add_argument("--before", type=int, default=200,
                   help="context characters before the mention")
    p.add_argument("--after", type=int, default=50,
                   help="context characters after the mention")
    p.add_argument("--max-len", type=int, default=144)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--no-hint", action="store_true", default=False,
                   help="drop the mention tokens after the separator")
    p.add_argument("--threads", type=int, default=1)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--loss", choices=("ce", "focal"), default="ce")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--hidden-size", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--attention-heads", type=int, default=4)
    p.add_argument("--ffn-size", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--name", default="model", help="checkpoint base name")
    p.add_argument("--refit-on-train-plus-dev", action="store_true", default=False)


def _build_parser() -> _Parser:
    parser = _Parser(prog="entmod", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="JSON file of defaults for any flag")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cue-planted corpus")
    p.add_argument("--synth-config", required=False,
                   help="JSON synthesis settings; omit for the built-in demo schema")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", help="corpus statistics table")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("prepare", help="split a corpus and build artifacts")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--by-document", action="store_true", default=False)
    p.add_argument("--cache", action="store_true", default=False,
                   help="also write encoded-example caches")
    p.add_argument("--out", required=True)
    _add_feat_flags(p)

    for cmd, extra in (("train", ()), ("transfer", ("source",)),
                       ("single-task", ("modifier",))):
        p = sub.add_parser(cmd)
        p.add_argument("--train", nargs="+", required=True)
        p.add_argument("--dev", nargs="+", default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        if "source" in extra:
            p.add_argument("--source-checkpoint", required=True)
        if "modifier" in extra:
            p.add_argument("--modifier", required=True)
        _add_feat_flags(p)
        _add_train_flags(p)

    p = sub.add_parser("predict", help="write predictions for every instance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    _add_feat_flags(p)

    p = sub.add_parser("eval", help="score a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--schema", required=True, help="schema.json of the gold corpus")
    p.add_argument("--exclude-class", action="append", default=[],
                   metavar="MODIFIER:LABEL")
    p.add_argument("--include-default", action="store_true", default=False,
                   help="pool the default class into micro F1")
    p.add_argument("--macro-exclude-default", action="store_true", default=False)
    p.add_argument("--pooled-average", action="store_true", default=False)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="chi-square between two eval reports")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--yates", action="store_true", default=False)
    p.add_argument("--out", required=True)
    return parser


def _option_dests(parser: _Parser) -> dict[str, str]:
    """Option string -> dest, across the main parser and every subparser."""
    mapping = {}
    stack = [parser]
    while stack:
        p = stack.pop()
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
            for opt in action.option_strings:
                mapping[opt] = action.dest
    return mapping


def _apply_config_and_env(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    """Resolve flags > env (paths only) > --config JSON > parser defaults."""
    ns = parser.parse_args(argv)
    mapping = _option_dests(parser)
    explicit = {mapping[tok.split("=", 1)[0]]
                for tok in argv if tok.split("=", 1)[0] in mapping}

    config_path = ns.config or os.environ.get("ENTMOD_CONFIG")
    overrides: dict[str, object] = {}
    if config_path:
        try:
            overrides.update(json.loads(Path(config_path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
    for key in PATH_KEYS:
        env = os.environ.get(f"ENTMOD_{key.upper()}")
        if env is not None:
            overrides[key] = env

    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in explicit or not hasattr(ns, dest):
            continue
        current = getattr(ns, dest)
        if isinstance(current, list) and isinstance(value, str):
            value = [value]
        setattr(ns, dest, value)
    return ns


def _cmd_synth(ns) -> int:
    out = Path(ns.out)
    if ns.synth_config:
        raw = json.loads(Path(ns.synth_config).read_text(encoding="utf-8"))
        raw.setdefault("n_instances", ns.n)
        cfg = SynthConfig.from_dict(raw)
    else:
        cfg = SynthConfig(schema=_demo_schema(), n_instances=ns.n)
    manifest = Manifest(out, "synth", {"seed": ns.seed, "n": cfg.n_instances})
    manifest.write()
    corpus = generate_synthetic(cfg, ns.seed)
    write_standoff(corpus, out / "corpus")
    (out / "cues.json").write_text(
        json.dumps(cfg.cues, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "synth-config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    manifest.add_artifact(out / "corpus")
    manifest.add_artifact(out / "cues.json")
    manifest.finish()
    print(f"wrote {len(corpus)} instances to {out / 'corpus'}")
    return 0


def _demo_schema():
    from .corpus import Modifier, ModifierSchema
    return ModifierSchema((
        Modifier("negation", ("no", "yes"), "no"),
        Modifier("severity", ("unmarked", "slight", "moderate", "severe"), "unmarked"),
        Modifier("uncertainty", ("no", "yes"), "no"),
    ))


def _cmd_stats(ns) -> int:
    corpus = _load_corpus(ns.corpus)
    stats = corpus_stats(corpus)
    text = _stats_text(corpus.name or "corpus", stats)
    print(text, end="")
    if ns.out:
        out = Path(ns.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.txt").write_text(text, encoding="utf-8")
        (out / "stats.json").write_text(
            json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def _cmd_prepare(ns) -> int:
    out = Path(ns.out)
    manifest = Manifest(out, "prepare", {"ratios": ns.ratios, "seed": ns.seed,
                                         "by_document": ns.by_document})
    for i, c in enumerate(ns.corpus):
        manifest.add_input(f"corpus{i}", c)
    manifest.write()
    corpus = _load_corpus(ns.corpus)
    try:
        ratios = tuple(float(x) for x in ns.ratios.split(","))
        if len(ratios) != 3:
            raise ValueError
    except ValueError:
        raise UsageError(f"--ratios must be three comma-separated numbers, got {ns.ratios!r}")
    splits = split_corpus(corpus, ratios, ns.seed, by_document=ns.by_document)
    feat = _feat_config(ns)
    vocab = build_vocab(splits[0], ns.min_freq)
    for split, name in zip(splits, ("train", "dev", "test")):
        write_standoff(split, out / name)
        manifest.add_artifact(out / name)
        if ns.cache:
            examples = encode_corpus(split, vocab, feat, threads=ns.threads)
            save_cache(out / f"{name}.cache.npz", examples, vocab, feat)
            manifest.add_artifact(out / f"{name}.cache.npz")
    (out / "vocab.json").write_text(
        json.dumps(vocab.to_dict(), sort_keys=True) + "\n", encoding="utf-8"
    )
    stats = corpus_stats(corpus)
    text = _stats_text(corpus.name or "corpus", stats)
    (out / "stats.txt").write_text(text, encoding="utf-8")
    manifest.add_artifact(out / "vocab.json")
    manifest.finish()
    sizes = "/".join(str(len(s)) for s in splits)
    print(f"split {len(corpus)} instances into {sizes}; vocabulary {len(vocab)}")
    print(text, end="")
    return 0


def _run_training(ns, kind: str) -> int:
    out = Path(ns.out)
    settings = {k: v for k, v in vars(ns).items() if k not in ("cmd", "config")}
    manifest = Manifest(out, kind, settings)
    for i, c in enumerate(ns.train):
        manifest.add_input(f"train{i}", c)
    for i, c in enumerate(ns.dev or ()):
        manifest.add_input(f"dev{i}", c)
    manifest.write()

    train_corpus = _load_corpus(ns.train)
    dev_corpus = _load_corpus(ns.dev) if ns.dev else None
    feat = _feat_config(ns)
    tcfg = _train_config(ns)
    ecfg = _encoder_config(ns)
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / f"{ns.name}.history.jsonl"

    if kind == "transfer":
        manifest.add_input("source_checkpoint", ns.source_checkpoint)
        manifest.write()
        source = Checkpoint.load(ns.source_checkpoint)
        model = transfer_load(source, train_corpus.schema, seed=ns.seed)
        ckpt = train_multitask(train_corpus, dev_corpus, ecfg, tcfg, feat,
                               vocab=source.vocab, model=model,
                               history_path=history_path)
    elif kind == "single-task":
        ckpt = train_single_task(train_corpus, dev_corpus, ns.modifier, ecfg, tcfg,
                                 feat, history_path=history_path)
    else:
        ckpt = train_multitask(train_corpus, dev_corpus, ecfg, tcfg, feat,
                               history_path=history_path)

    ckpt_path = out / f"{ns.name}.ckpt"
    ckpt.save(ckpt_path)
    manifest.add_artifact(ckpt_path)
    manifest.add_artifact(history_path)

    if ns.refit_on_train_plus_dev and dev_corpus is not None:
        best_epoch = next(r["epoch"] for r in ckpt.history if r.get("best"))
        refit_cfg = replace(tcfg, max_epochs=best_epoch + 1, early_stop_patience=0)
        combined = merge_corpora(train_corpus, dev_corpus)
        refit = train_multitask(combined, None, ecfg, refit_cfg, feat,
                                history_path=out / f"{ns.name}-refit.history.jsonl")
        refit_path = out / f"{ns.name}-refit.ckpt"
        refit.save(refit_path)
        manifest.add_artifact(refit_path)

    manifest.finish()
    best = next((r for r in ckpt.history if r.get("best")), None)
    if best and "dev_metric" in best:
        print(f"best epoch {best['epoch']}: dev metric {best['dev_metric']}")
    print(f"wrote {ckpt_path}")
    return 0


def _cmd_predict(ns) -> int:
    out = Path(ns.out)
    manifest = Manifest(out, "predict", {"checkpoint": ns.checkpoint})
    manifest.add_input("checkpoint", ns.checkpoint)
    for i, c in enumerate(ns.corpus):
        manifest.add_input(f"corpus{i}", c)
    manifest.write()
    ckpt = Checkpoint.load(ns.checkpoint)
    corpus = _load_corpus(ns.corpus)
    preds = _predict_corpus(ckpt, corpus, _feat_config(ns), ns.batch_size, ns.threads)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.jsonl"
    preds.to_jsonl(pred_path)
    manifest.add_artifact(pred_path)
    manifest.finish()
    print(f"wrote {pred_path}")
    return 0


def _cmd_eval(ns) -> int:
    from .corpus import ModifierSchema
    out = Path(ns.out)
    manifest = Manifest(out, "eval", {"pred": ns.pred})
    manifest.add_input("pred", ns.pred)
    manifest.add_input("schema", ns.schema)
    manifest.write()
    schema = ModifierSchema.from_dict(
        json.loads(Path(ns.schema).read_text(encoding="utf-8"))
    )
    exclude: dict[str, set[str]] = {}
    for item in ns.exclude_class:
        if ":" not in item:
            raise UsageError(f"--exclude-class wants MODIFIER:LABEL, got {item!r}")
        mod, label = item.split(":", 1)
        exclude.setdefault(mod, set()).add(label)
    options = EvalOptions(
        exclude_classes={k: frozenset(v) for k, v in exclude.items()},
        include_default_in_macro=not ns.macro_exclude_default,
        include_default_in_micro=ns.include_default,
        pooled_average=ns.pooled_average,
    )
    preds = PredictionSet.from_jsonl(ns.pred, schema)
    report = build_report(preds, options)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.render_text(), encoding="utf-8")
    manifest.add_artifact(out / "report.json")
    manifest.add_artifact(out / "report.txt")
    manifest.finish()
    print(report.render_text(), end="")
    return 0


def _cmd_compare(ns) -> int:
    out = Path(ns.out)
    manifest = Manifest(out, "compare", {"yates": ns.yates})
    manifest.add_input("report_a", ns.report_a)
    manifest.add_input("report_b", ns.report_b)
    manifest.write()
    rep_a = EvalReport.from_json(Path(ns.report_a).read_text(encoding="utf-8"))
    rep_b = EvalReport.from_json(Path(ns.report_b).read_text(encoding="utf-8"))
    rows = {}
    shared = [m for m in rep_a.per_modifier if m in rep_b.per_modifier]
    for name in shared:
        a, b = rep_a.per_modifier[name], rep_b.per_modifier[name]
        try:
            stat, sig = chi_square(a["correct"], a["n"], b["correct"], b["n"],
                                   yates=ns.yates)
            rows[name] = {"chi_square": round(stat, 6), "significant_at_05": sig,
                          "a": f"{a['correct']}/{a['n']}", "b": f"{b['correct']}/{b['n']}"}
        except DegenerateTable as exc:
            rows[name] = {"chi_square": None, "significant_at_05": None,
                          "note": str(exc)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    width = max(len(n) for n in rows) if rows else 8
    lines = [f"{'modifier'.ljust(width)}  {'chi2'.rjust(10)}  sig  {'A'.rjust(9)}  {'B'.rjust(9)}"]
    for name, row in rows.items():
        stat = row["chi_square"]
        mark = "*" if row["significant_at_05"] else " "
        stat_s = f"{stat:10.4f}" if stat is not None else "-".rjust(10)
        lines.append(f"{name.ljust(width)}  {stat_s}  {mark}    "
                     f"{row.get('a', '-').rjust(9)}  {row.get('b', '-').rjust(9)}")
    text = "\n".join(lines) + "\n# * marks chi-square > 3.841 (p < 0.05, df=1)\n"
    (out / "compare.txt").write_text(text, encoding="utf-8")
    manifest.add_artifact(out / "compare.json")
    manifest.add_artifact(out / "compare.txt")
    manifest.finish()
    print(text, end="")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "stats": _cmd_stats,
    "prepare": _cmd_prepare,
    "train": lambda ns: _run_training(ns, "train"),
    "transfer": lambda ns: _run_training(ns, "transfer"),
    "single-task": lambda ns: _run_training(ns, "single-task"),
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = _apply_config_and_env(parser, list(argv if argv is not None else sys.argv[1:]))
        return _COMMANDS[ns.cmd](ns)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, CheckpointVersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, EmptySet, AllClassesExcluded, DegenerateTable,
            NoActiveHeads, ShapeMismatch, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DivergedLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
