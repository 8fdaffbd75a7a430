"""Tiny pre-norm transformer encoder with hand-written reverse-mode gradients.

Forward returns the pooled feature vector (final hidden state at the
leading CLS position) plus a cache of intermediates; backward replays the
cache and produces exact gradients for every parameter.  Padding is
excluded from attention with an additive -1e9 on the pre-softmax scores,
which underflows to exactly zero probability, so padded positions can
never leak into the pooled vector.

Row-wise kernels (layer norm, softmax, GELU) go through
:mod:`entmod.backend`; matrix products stay in numpy/BLAS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import backend

LN_EPS = 1e-5
MASK_BIAS = -1e9


class ShapeMismatch(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_attention_heads: int = 4
    feedforward_size: int = 256
    max_positions: int = 160
    dropout_rate: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_size % self.num_attention_heads != 0:
            raise ShapeMismatch(
                f"hidden_size {self.hidden_size} not divisible by "
                f"{self.num_attention_heads} attention heads"
            )
        if self.vocab_size < 4 or self.max_positions < 1:
            raise ShapeMismatch("vocab_size/max_positions too small")
        if self.dtype not in ("float32", "float64"):
            raise ShapeMismatch(f"unsupported dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_attention_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


INIT_STD = 0.02


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator | None = None):
    """Seeded initialization: normal(0, 0.02) embeddings and weight matrices,
    zero biases, unit layer-norm gains.  Draw order is fixed, so the same
    seed always yields the same parameters."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    H, F = config.hidden_size, config.feedforward_size

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(dt)

    params = {
        "tok_emb": normal(config.vocab_size, H),
        "pos_emb": normal(config.max_positions, H),
        "seg_emb": normal(2, H),
    }
    for i in range(config.num_layers):
        p = f"l{i}."
        params[p + "ln1.g"] = np.ones(H, dtype=dt)
        params[p + "ln1.b"] = np.zeros(H, dtype=dt)
        params[p + "wq"] = normal(H, H)
        params[p + "bq"] = np.zeros(H, dtype=dt)
        params[p + "wk"] = normal(H, H)
        params[p + "bk"] = np.zeros(H, dtype=dt)
        params[p + "wv"] = normal(H, H)
        params[p + "bv"] = np.zeros(H, dtype=dt)
        params[p + "wo"] = normal(H, H)
        params[p + "bo"] = np.zeros(H, dtype=dt)
        params[p + "ln2.g"] = np.ones(H, dtype=dt)
        params[p + "ln2.b"] = np.zeros(H, dtype=dt)
        params[p + "w1"] = normal(H, F)
        params[p + "b1"] = np.zeros(F, dtype=dt)
        params[p + "w2"] = normal(F, H)
        params[p + "b2"] = np.zeros(H, dtype=dt)
    params["lnf.g"] = np.ones(H, dtype=dt)
    params["lnf.b"] = np.zeros(H, dtype=dt)
    return params


def _ln(params, prefix, x3):
    B, L, H = x3.shape
    y2, mean, rstd = backend.ops.layer_norm_forward(
        np.ascontiguousarray(x3.reshape(B * L, H)),
        params[prefix + ".g"], params[prefix + ".b"], LN_EPS,
    )
    return y2.reshape(B, L, H), mean, rstd


def _ln_backward(params, prefix, dy3, x3, mean, rstd, grads):
    B, L, H = x3.shape
    dx2, dg, db = backend.ops.layer_norm_backward(
        np.ascontiguousarray(dy3.reshape(B * L, H)),
        np.ascontiguousarray(x3.reshape(B * L, H)),
        params[prefix + ".g"], mean, rstd,
    )
    grads[prefix + ".g"] += dg
    grads[prefix + ".b"] += db
    return dx2.reshape(B, L, H)


def _dropout_mask(shape, rate, rng, dt):
    keep = (rng.random(shape) >= rate).astype(dt)
    keep /= dt.type(1.0 - rate)
    return keep


def _split_heads(x3, nh, dh):
    B, L, _ = x3.shape
    return np.ascontiguousarray(x3.reshape(B, L, nh, dh).transpose(0, 2, 1, 3))


def _merge_heads(x4):
    B, nh, L, dh = x4.shape
    return np.ascontiguousarray(x4.transpose(0, 2, 1, 3)).reshape(B, L, nh * dh)


def encoder_forward(params, config: EncoderConfig, token_ids, segment_ids,
                    attention_mask, train: bool = False,
                    rng: np.random.Generator | None = None):
    """Run the encoder over a batch; returns (h_cls, cache).

    ``train=True`` applies inverted dropout with masks drawn from ``rng``
    (the masks are cached so backward sees the identical network).
    """
    token_ids = np.asarray(token_ids)
    segment_ids = np.asarray(segment_ids)
    attention_mask = np.asarray(attention_mask)
    if token_ids.ndim != 2:
        raise ShapeMismatch(f"expected (batch, length) ids, got {token_ids.shape}")
    B, L = token_ids.shape
    if L > config.max_positions:
        raise ShapeMismatch(f"sequence length {L} exceeds {config.max_positions} positions")
    if int(token_ids.max(initial=0)) >= config.vocab_size:
        raise ShapeMismatch("token id outside the embedding table")
    dt = config.np_dtype
    nh, dh = config.num_attention_heads, config.head_dim
    scale = dt.type(1.0 / math.sqrt(dh))
    dropping = train and config.dropout_rate > 0.0
    if dropping and rng is None:
        raise ShapeMismatch("training forward needs a dropout rng")

    cache = {
        "token_ids": token_ids, "segment_ids": segment_ids, "B": B, "L": L,
        "drop": dropping, "layers": [],
    }

    x = (params["tok_emb"][token_ids]
         + params["pos_emb"][:L][None, :, :]
         + params["seg_emb"][segment_ids]).astype(dt, copy=False)
    if dropping:
        m = _dropout_mask(x.shape, config.dropout_rate, rng, dt)
        x = x * m
        cache["emb_drop"] = m

    mask_f = attention_mask.astype(dt)
    bias = ((1.0 - mask_f) * dt.type(MASK_BIAS))[:, None, None, :]  # 0 real, -1e9 pad
    cache["bias"] = bias

    for i in range(config.num_layers):
        p = f"l{i}."
        lc = {"x_in": x}
        a, lc["m1"], lc["r1"] = _ln(params, p + "ln1", x)
        lc["a"] = a
        a2 = a.reshape(B * L, -1)
        q = _split_heads((a2 @ params[p + "wq"] + params[p + "bq"]).reshape(B, L, -1), nh, dh)
        k = _split_heads((a2 @ params[p + "wk"] + params[p + "bk"]).reshape(B, L, -1), nh, dh)
        v = _split_heads((a2 @ params[p + "wv"] + params[p + "bv"]).reshape(B, L, -1), nh, dh)
        lc["q"], lc["k"], lc["v"] = q, k, v
        scores = q @ k.transpose(0, 1, 3, 2) * scale + bias
        probs = backend.ops.softmax_forward(
            np.ascontiguousarray(scores.reshape(B * nh * L, L))
        ).reshape(B, nh, L, L)
        lc["probs"] = probs
        ctx = _merge_heads(probs @ v)
        lc["ctx"] = ctx
        attn_out = (ctx.reshape(B * L, -1) @ params[p + "wo"] + params[p + "bo"]).reshape(B, L, -1)
        if dropping:
            m = _dropout_mask(attn_out.shape, config.dropout_rate, rng, dt)
            attn_out = attn_out * m
            lc["attn_drop"] = m
        x = x + attn_out

        lc["x_mid"] = x
        f, lc["m2"], lc["r2"] = _ln(params, p + "ln2", x)
        lc["f"] = f
        hpre = (f.reshape(B * L, -1) @ params[p + "w1"] + params[p + "b1"]).reshape(B, L, -1)
        lc["hpre"] = hpre
        hact = backend.ops.gelu_forward(
            np.ascontiguousarray(hpre.reshape(B * L, -1))
        ).reshape(B, L, -1)
        lc["hact"] = hact
        ff = (hact.reshape(B * L, -1) @ params[p + "w2"] + params[p + "b2"]).reshape(B, L, -1)
        if dropping:
            m = _dropout_mask(ff.shape, config.dropout_rate, rng, dt)
            ff = ff * m
            lc["ff_drop"] = m
        x = x + ff
        cache["layers"].append(lc)

    cache["x_out"] = x
    y, cache["mf"], cache["rf"] = _ln(params, "lnf", x)
    h_cls = np.ascontiguousarray(y[:, 0, :])
    return h_cls, cache


def encoder_backward(params, config: EncoderConfig, cache, d_hcls):
    """Exact gradients of every encoder parameter given d(loss)/d(h_cls)."""
    B, L = cache["B"], cache["L"]
    H = config.hidden_size
    nh, dh = config.num_attention_heads, config.head_dim
    dt = config.np_dtype
    scale = dt.type(1.0 / math.sqrt(dh))

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    dy = np.zeros((B, L, H), dtype=dt)
    dy[:, 0, :] = d_hcls
    dx = _ln_backward(params, "lnf", dy, cache["x_out"], cache["mf"], cache["rf"], grads)

    for i in reversed(range(config.num_layers)):
        p = f"l{i}."
        lc = cache["layers"][i]

        # feed-forward block: x = x_mid + drop(ff)
        d_ff = dx * lc["ff_drop"] if "ff_drop" in lc else dx
        d_ff2 = d_ff.reshape(B * L, -1)
        hact2 = lc["hact"].reshape(B * L, -1)
        grads[p + "w2"] += hact2.T @ d_ff2
        grads[p + "b2"] += d_ff2.sum(axis=0)
        d_hact2 = d_ff2 @ params[p + "w2"].T
        d_hpre2 = backend.ops.gelu_backward(
            np.ascontiguousarray(d_hact2),
            np.ascontiguousarray(lc["hpre"].reshape(B * L, -1)),
        )
        f2 = lc["f"].reshape(B * L, -1)
        grads[p + "w1"] += f2.T @ d_hpre2
        grads[p + "b1"] += d_hpre2.sum(axis=0)
        d_f = (d_hpre2 @ params[p + "w1"].T).reshape(B, L, H)
        dx = dx + _ln_backward(params, p + "ln2", d_f, lc["x_mid"], lc["m2"], lc["r2"], grads)

        # attention block: x_mid = x_in + drop(attn_out)
        d_attn = dx * lc["attn_drop"] if "attn_drop" in lc else dx
        d_attn2 = d_attn.reshape(B * L, -1)
        ctx2 = lc["ctx"].reshape(B * L, -1)
        grads[p + "wo"] += ctx2.T @ d_attn2
        grads[p + "bo"] += d_attn2.sum(axis=0)
        d_ctx4 = (d_attn2 @ params[p + "wo"].T).reshape(B, L, nh, dh).transpose(0, 2, 1, 3)

        probs, q, k, v = lc["probs"], lc["q"], lc["k"], lc["v"]
        d_probs = d_ctx4 @ v.transpose(0, 1, 3, 2)
        d_v = probs.transpose(0, 1, 3, 2) @ d_ctx4
        d_scores = backend.ops.softmax_backward(
            np.ascontiguousarray(d_probs.reshape(B * nh * L, L)),
            np.ascontiguousarray(probs.reshape(B * nh * L, L)),
        ).reshape(B, nh, L, L)
        d_q = d_scores @ k * scale
        d_k = d_scores.transpose(0, 1, 3, 2) @ q * scale

        a2 = lc["a"].reshape(B * L, -1)
        d_a2 = np.zeros_like(a2)
        for w_name, b_name, d4 in ((p + "wq", p + "bq", d_q),
                                   (p + "wk", p + "bk", d_k),
                                   (p + "wv", p + "bv", d_v)):
            d2 = _merge_heads(d4).reshape(B * L, -1)
            grads[w_name] += a2.T @ d2
            grads[b_name] += d2.sum(axis=0)
            d_a2 += d2 @ params[w_name].T
        d_a = d_a2.reshape(B, L, H)
        dx = dx + _ln_backward(params, p + "ln1", d_a, lc["x_in"], lc["m1"], lc["r1"], grads)

    if "emb_drop" in cache:
        dx = dx * cache["emb_drop"]
    dx2 = dx.reshape(B * L, H)
    np.add.at(grads["tok_emb"], cache["token_ids"].ravel(), dx2)
    grads["pos_emb"][:L] += dx.sum(axis=0)
    np.add.at(grads["seg_emb"], cache["segment_ids"].ravel(), dx2)
    return grads
