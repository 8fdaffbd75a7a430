"""Training loop, AdamW, early stopping, transfer loading, single-task runs.

One run owns its model exclusively: epochs shuffle deterministically from
the config seed, batches keep the trailing partial batch, and the best
parameters by the dev metric (average macro-F1 across the heads being
trained) are what the returned checkpoint carries.  With no dev set the
final epoch wins, which is how fixed-epoch refits on train+dev work.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .checkpoint import Checkpoint
from .corpus import Corpus, ModifierSchema, UnknownModifier
from .encoder import EncoderConfig
from .evaluate import macro_f1_from_indices
from .featurize import FeaturizeConfig, TokenizerVocab, build_vocab, encode_corpus
from .model import (
    Batch,
    MultiTaskModel,
    encode_batch,
    forward_backward,
    head_logits,
    init_head,
    init_model,
)


class DivergedLoss(Exception):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    weight_decay: float = 1e-2
    batch_size: int = 64
    max_epochs: int = 10
    early_stop_patience: int = 3  # 0 disables early stopping
    loss_mode: str = "ce"
    focal_gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive, weight_decay >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 0:
            raise ValueError("batch_size/max_epochs must be >= 1, patience >= 0")
        if self.loss_mode not in ("ce", "focal"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def _decayed(name: str, arr: np.ndarray) -> bool:
    # decoupled decay hits embeddings and weight matrices only,
    # never biases or layer-norm gains/offsets (all 1-D)
    return arr.ndim >= 2


def adamw_step(params, grads, state: OptimizerState, lr: float, wd: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected;
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, theta in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if wd > 0.0 and _decayed(name, theta):
            update = update + wd * theta
        theta -= lr * update


def _dev_head_metrics(model: MultiTaskModel, examples, batch_size: int):
    """Per-head macro-F1 (over all labels, default included) on a dev set."""
    golds = {name: [] for name in model.heads}
    preds = {name: [] for name in model.heads}
    for lo in range(0, len(examples), batch_size):
        batch = Batch.from_examples(examples[lo:lo + batch_size], model.heads.keys())
        h, _ = encode_batch(model, batch)
        for name, head in model.heads.items():
            mask = batch.head_mask[name]
            if not mask.any():
                continue
            idx = np.argmax(head_logits(head, h), axis=1)
            golds[name].extend(batch.gold[name][mask].tolist())
            preds[name].extend(idx[mask].tolist())
    out = {}
    for name in model.heads:
        if golds[name]:
            n_classes = len(model.schema[name].labels)
            out[name] = macro_f1_from_indices(golds[name], preds[name], n_classes)
    return out


def train(model: MultiTaskModel, train_examples, dev_examples,
          config: TrainConfig, vocab: TokenizerVocab,
          history_path=None) -> Checkpoint:
    """Optimize ``model`` in place and return the best checkpoint.

    Early stopping: after ``patience`` epochs without a dev-metric
    improvement (patience 0 disables it and all ``max_epochs`` run); the
    checkpoint always carries the best epoch's parameters.  A NaN/Inf
    batch loss aborts with :class:`DivergedLoss`.
    """
    if not train_examples:
        raise ValueError("empty training set")
    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    flat = model.all_params()
    state = OptimizerState.for_params(flat)
    head_names = tuple(model.heads)

    use_dev = bool(dev_examples)
    best_metric = -math.inf
    best_epoch = -1
    best_snapshot = None
    history: list[dict] = []
    timings: list[float] = []

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_examples))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_examples[i] for i in order[lo:lo + config.batch_size]]
            batch = Batch.from_examples(chunk, head_names)
            loss, _, grads = forward_backward(
                model, batch, config.loss_mode, config.focal_gamma,
                train=True, rng=dropout_rng,
            )
            if not math.isfinite(loss):
                raise DivergedLoss(
                    f"loss {loss} at epoch {epoch}, batch {lo // config.batch_size} "
                    f"(lr={config.learning_rate}, loss_mode={config.loss_mode})"
                )
            adamw_step(flat, grads, state, config.learning_rate, config.weight_decay)
            losses.append(loss)

        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if use_dev:
            dev = _dev_head_metrics(model, dev_examples, config.batch_size)
            metric = float(np.mean(list(dev.values()))) if dev else -math.inf
            record["dev"] = {k: round(v, 6) for k, v in sorted(dev.items())}
            record["dev_metric"] = round(metric, 6)
        else:
            metric = float(epoch)  # no dev set: last epoch wins
        history.append(record)
        timings.append(time.perf_counter() - t0)

        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_snapshot = {k: p.copy() for k, p in flat.items()}
        if (use_dev and config.early_stop_patience > 0
                and epoch - best_epoch >= config.early_stop_patience):
            break

    for name, snap in best_snapshot.items():
        flat[name][...] = snap
    for rec in history:
        rec["best"] = rec["epoch"] == best_epoch

    if history_path is not None:
        with open(history_path, "w", encoding="utf-8") as fh:
            for rec, secs in zip(history, timings):
                fh.write(json.dumps({**rec, "wall_clock_s": round(secs, 3)},
                                    sort_keys=True) + "\n")

    return Checkpoint.from_model(
        model, vocab, train_fingerprint=config.fingerprint(), history=history
    )


def transfer_load(source: Checkpoint, target_schema: ModifierSchema,
                  seed: int) -> MultiTaskModel:
    """Warm-start a model for a new schema from a trained checkpoint.

    Encoder tensors are copied verbatim.  A target head reuses the source
    head's weights only when both the modifier name and the ordered label
    list match; otherwise it gets a fresh seeded initialization.  The
    source checkpoint is never mutated, and its vocabulary should be
    reused when featurizing the target corpus.
    """
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in source.params.items()}
    heads = {}
    cfg = source.encoder_config
    for name in target_schema.names:
        target_labels = target_schema[name].labels
        src_head = source.heads.get(name)
        if src_head is not None and source.schema[name].labels == target_labels:
            heads[name] = type(src_head)(name, src_head.W.copy(), src_head.b.copy())
        else:
            if src_head is not None:
                warnings.warn(
                    f"head {name!r} exists in the source but with labels "
                    f"{source.schema[name].labels} != {target_labels}; "
                    "initializing it fresh",
                    stacklevel=2,
                )
            heads[name] = init_head(name, len(target_labels), cfg.hidden_size,
                                    rng, cfg.np_dtype)
    return MultiTaskModel(target_schema, cfg, params, heads)


def _heads_for(corpus: Corpus) -> tuple[str, ...]:
    return tuple(n for n in corpus.schema.names if n in corpus.applicable_modifiers)


def _sized_config(template: EncoderConfig, vocab: TokenizerVocab,
                  feat: FeaturizeConfig) -> EncoderConfig:
    return replace(
        template,
        vocab_size=len(vocab),
        max_positions=max(template.max_positions, feat.max_len),
    )


def train_multitask(train_corpus: Corpus, dev_corpus: Corpus | None,
                    encoder_config: EncoderConfig, config: TrainConfig,
                    feat: FeaturizeConfig = FeaturizeConfig(),
                    vocab: TokenizerVocab | None = None,
                    model: MultiTaskModel | None = None,
                    history_path=None) -> Checkpoint:
    """Full pipeline: vocabulary, featurization, joint training over every
    modifier the corpus annotates.  Pass ``model`` (and its ``vocab``) to
    fine-tune an existing one, e.g. after :func:`transfer_load`."""
    if model is None:
        if vocab is None:
            vocab = build_vocab(train_corpus, feat.min_freq)
        model = init_model(
            train_corpus.schema, _sized_config(encoder_config, vocab, feat),
            modifiers=_heads_for(train_corpus),
        )
    elif vocab is None:
        raise ValueError("fine-tuning an existing model requires its vocabulary")
    train_ex = encode_corpus(train_corpus, vocab, feat, schema=model.schema)
    dev_ex = (encode_corpus(dev_corpus, vocab, feat, schema=model.schema)
              if dev_corpus is not None else None)
    return train(model, train_ex, dev_ex, config, vocab, history_path=history_path)


def train_single_task(train_corpus: Corpus, dev_corpus: Corpus | None,
                      modifier_name: str, encoder_config: EncoderConfig,
                      config: TrainConfig,
                      feat: FeaturizeConfig = FeaturizeConfig(),
                      history_path=None) -> Checkpoint:
    """Same pipeline with exactly one classification head."""
    if modifier_name not in train_corpus.schema:
        raise UnknownModifier(modifier_name)
    vocab = build_vocab(train_corpus, feat.min_freq)
    model = init_model(
        train_corpus.schema, _sized_config(encoder_config, vocab, feat),
        modifiers=[modifier_name],
    )
    train_ex = encode_corpus(train_corpus, vocab, feat, schema=model.schema)
    dev_ex = (encode_corpus(dev_corpus, vocab, feat, schema=model.schema)
              if dev_corpus is not None else None)
    return train(model, train_ex, dev_ex, config, vocab, history_path=history_path)
