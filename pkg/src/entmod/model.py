"""Multi-task classifier: shared encoder, one linear-softmax head per modifier.

Per head the label distribution is ``softmax(W @ h_cls + b)``; training
minimizes the negative log-likelihood (batch mean over that head's
unmasked examples), or its focal variant, averaged over the heads active
in the batch.  Heads masked out for an example contribute neither loss
nor gradient, so corpora that never annotate a modifier cannot push its
head toward phantom defaults.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .corpus import ModifierSchema
from .encoder import (
    INIT_STD,
    EncoderConfig,
    ShapeMismatch,
    encoder_backward,
    encoder_forward,
    init_encoder_params,
)
from .featurize import EncodedExample

PROB_FLOOR = 1e-12


class NoActiveHeads(Exception):
    pass


@dataclass
class ClassificationHead:
    modifier_name: str
    W: np.ndarray  # (num_labels, H)
    b: np.ndarray  # (num_labels,)


@dataclass(frozen=True)
class ProbDist:
    modifier_name: str
    probs: np.ndarray

    def __post_init__(self):
        total = float(self.probs.sum())
        if not np.isfinite(self.probs).all() or abs(total - 1.0) > 1e-6:
            raise ShapeMismatch(
                f"probabilities for {self.modifier_name!r} sum to {total}"
            )


class MultiTaskModel:
    def __init__(self, schema: ModifierSchema, config: EncoderConfig, params,
                 heads: dict[str, ClassificationHead]):
        self.schema = schema
        self.config = config
        self.params = params
        self.heads = dict(heads)
        for name, head in self.heads.items():
            if name not in schema:
                raise ShapeMismatch(f"head {name!r} not in schema")
            n_labels = len(schema[name].labels)
            if head.W.shape != (n_labels, config.hidden_size):
                raise ShapeMismatch(
                    f"head {name!r} weight shape {head.W.shape}, "
                    f"expected {(n_labels, config.hidden_size)}"
                )

    def all_params(self) -> dict[str, np.ndarray]:
        """Flat name -> tensor view over encoder and heads (shared arrays)."""
        flat = dict(self.params)
        for name, head in self.heads.items():
            flat[f"head.{name}.W"] = head.W
            flat[f"head.{name}.b"] = head.b
        return flat


def init_head(modifier_name: str, num_labels: int, hidden_size: int,
              rng: np.random.Generator, dtype) -> ClassificationHead:
    W = rng.normal(0.0, INIT_STD, size=(num_labels, hidden_size)).astype(dtype)
    b = np.zeros(num_labels, dtype=dtype)
    return ClassificationHead(modifier_name, W, b)


def init_model(schema: ModifierSchema, config: EncoderConfig,
               modifiers=None) -> MultiTaskModel:
    """Fresh model with one head per modifier (all schema modifiers by
    default); encoder then heads are drawn from one seeded stream."""
    rng = np.random.default_rng(config.seed)
    params = init_encoder_params(config, rng)
    names = tuple(modifiers) if modifiers is not None else schema.names
    heads = {}
    for name in names:
        mod = schema[name]
        heads[name] = init_head(name, len(mod.labels), config.hidden_size,
                                rng, config.np_dtype)
    return MultiTaskModel(schema, config, params, heads)


@dataclass
class Batch:
    token_ids: np.ndarray       # (B, L) int32
    segment_ids: np.ndarray     # (B, L)
    attention_mask: np.ndarray  # (B, L)
    gold: dict[str, np.ndarray]       # name -> (B,) int32, -1 where absent
    head_mask: dict[str, np.ndarray]  # name -> (B,) bool
    instance_ids: tuple[str, ...] = ()

    @classmethod
    def from_examples(cls, examples, head_names) -> "Batch":
        gold = {}
        mask = {}
        for name in head_names:
            gold[name] = np.asarray(
                [ex.gold.get(name, -1) for ex in examples], dtype=np.int32
            )
            mask[name] = np.asarray(
                [ex.head_mask.get(name, False) for ex in examples], dtype=bool
            )
        return cls(
            token_ids=np.stack([ex.token_ids for ex in examples]),
            segment_ids=np.stack([ex.segment_ids for ex in examples]),
            attention_mask=np.stack([ex.attention_mask for ex in examples]),
            gold=gold,
            head_mask=mask,
            instance_ids=tuple(ex.instance_id for ex in examples),
        )

    def __len__(self):
        return self.token_ids.shape[0]


def encode_batch(model: MultiTaskModel, batch: Batch, train: bool = False,
                 rng: np.random.Generator | None = None):
    return encoder_forward(
        model.params, model.config, batch.token_ids, batch.segment_ids,
        batch.attention_mask, train=train, rng=rng,
    )


def encode_cls(model: MultiTaskModel, example: EncodedExample) -> np.ndarray:
    """Pooled feature vector for one example (dropout off)."""
    batch = Batch.from_examples([example], model.heads.keys())
    h, _ = encode_batch(model, batch)
    return h[0]


def head_logits(head: ClassificationHead, h_cls: np.ndarray) -> np.ndarray:
    return h_cls @ head.W.T + head.b


def head_forward(head: ClassificationHead, h_cls: np.ndarray) -> ProbDist:
    """Label distribution softmax(W h + b), max-shifted for stability."""
    if h_cls.ndim != 1 or h_cls.shape[0] != head.W.shape[1]:
        raise ShapeMismatch(
            f"feature vector {h_cls.shape} does not match head {head.W.shape}"
        )
    logits = head_logits(head, h_cls)
    probs = backend.ops.softmax_forward(
        np.ascontiguousarray(logits[None, :])
    )[0]
    return ProbDist(head.modifier_name, probs)


def cross_entropy(probs, gold_index: int) -> float:
    """-log p[gold], with p floored at 1e-12 before the log."""
    p = probs.probs if isinstance(probs, ProbDist) else np.asarray(probs)
    return float(-np.log(max(float(p[gold_index]), PROB_FLOOR)))


def focal_loss(probs, gold_index: int, gamma: float = 2.0) -> float:
    """-(1 - p)^gamma * log(p) on the gold probability; gamma=0 is plain
    cross-entropy."""
    p = probs.probs if isinstance(probs, ProbDist) else np.asarray(probs)
    pt = max(float(p[gold_index]), PROB_FLOOR)
    return float(-((1.0 - pt) ** gamma) * np.log(pt))


def total_loss(per_head_losses: dict[str, float], active_heads) -> float:
    """Average of the active heads' batch losses."""
    active = [name for name in per_head_losses if name in set(active_heads)]
    if not active:
        raise NoActiveHeads("no head has an unmasked example in this batch")
    return float(sum(per_head_losses[name] for name in active) / len(active))


def _batch_head_loss(logits, gold, mask, loss_mode, gamma, dt):
    """Mean loss over unmasked rows plus d(loss)/d(logits), already scaled
    by 1/k for the within-head mean."""
    B, C = logits.shape
    probs = backend.ops.softmax_forward(np.ascontiguousarray(logits))
    rows = np.flatnonzero(mask)
    k = len(rows)
    safe_gold = np.where(mask, gold, 0).astype(np.intp)
    pt = probs[np.arange(B), safe_gold]
    pt_clamped = np.maximum(pt, PROB_FLOOR)
    log_pt = np.log(pt_clamped)

    onehot = np.zeros_like(probs)
    onehot[np.arange(B), safe_gold] = 1.0
    # d(max(p, floor))/dp is 0 below the floor
    live = (pt > PROB_FLOOR).astype(dt)

    if loss_mode == "ce":
        loss_vec = -log_pt
        dlogits = probs - onehot
        dlogits *= live[:, None]
    elif loss_mode == "focal":
        one_minus = 1.0 - pt_clamped
        loss_vec = -(one_minus ** gamma) * log_pt
        if gamma == 0.0:
            dl_dp = -1.0 / pt_clamped
        else:
            # at p_t = 1 the loss is exactly 0 and flat; avoid 0**(gamma-1)
            base = np.maximum(one_minus, PROB_FLOOR)
            dl_dp = np.where(
                one_minus > 0.0,
                gamma * (base ** (gamma - 1.0)) * log_pt - (one_minus ** gamma) / pt_clamped,
                0.0,
            )
        # dp_t/dz_j = p_t (1[j = gold] - p_j)
        dlogits = (dl_dp * pt * live)[:, None] * (onehot - probs)
    else:
        raise ValueError(f"unknown loss mode {loss_mode!r}")

    w = mask.astype(dt) / dt.type(k)
    loss = float((loss_vec * mask).sum() / k)
    dlogits = dlogits * w[:, None]
    return loss, dlogits.astype(dt, copy=False)


def forward_backward(model: MultiTaskModel, batch: Batch, loss_mode: str = "ce",
                     gamma: float = 2.0, train: bool = False,
                     rng: np.random.Generator | None = None):
    """One joint pass: total loss, per-head losses, gradients for every
    parameter (flat dict matching ``model.all_params()`` keys)."""
    dt = model.config.np_dtype
    h, cache = encode_batch(model, batch, train=train, rng=rng)

    active = [name for name in model.heads
              if name in batch.head_mask and batch.head_mask[name].any()]
    if not active:
        raise NoActiveHeads("no head has an unmasked example in this batch")
    n_active = len(active)

    per_head = {}
    grads = {}
    d_h = np.zeros_like(h)
    for name in active:
        head = model.heads[name]
        logits = head_logits(head, h)
        loss_i, dlogits = _batch_head_loss(
            logits, batch.gold[name], batch.head_mask[name], loss_mode, gamma, dt
        )
        per_head[name] = loss_i
        scaled = dlogits / dt.type(n_active)
        grads[f"head.{name}.W"] = scaled.T @ h
        grads[f"head.{name}.b"] = scaled.sum(axis=0)
        d_h += scaled @ head.W
    for name, head in model.heads.items():
        if name not in active:
            grads[f"head.{name}.W"] = np.zeros_like(head.W)
            grads[f"head.{name}.b"] = np.zeros_like(head.b)

    loss = total_loss(per_head, active)
    grads.update(encoder_backward(model.params, model.config, cache, d_h))
    return loss, per_head, grads


def backward(model: MultiTaskModel, batch: Batch, loss_mode: str = "ce",
             gamma: float = 2.0):
    """Gradients only (dropout off); see :func:`forward_backward`."""
    _, _, grads = forward_backward(model, batch, loss_mode, gamma)
    return grads


def predict_batch(model: MultiTaskModel, batch: Batch) -> list[dict[str, str]]:
    """Per example, argmax label for every head; ties go to the lowest
    label index.  Dropout is always off."""
    h, _ = encode_batch(model, batch)
    out = [dict() for _ in range(len(batch))]
    for name, head in model.heads.items():
        labels = model.schema[name].labels
        logits = head_logits(head, h)
        probs = backend.ops.softmax_forward(np.ascontiguousarray(logits))
        for row, idx in enumerate(np.argmax(probs, axis=1)):
            out[row][name] = labels[int(idx)]
    return out


def predict(model: MultiTaskModel, example: EncodedExample) -> dict[str, str]:
    return predict_batch(model, Batch.from_examples([example], model.heads.keys()))[0]
