"""Multi-head attention blocks: segment self-attention and the two cross-attention updates.

Every block is pre-norm: ``y = x + MHA(LN(x), LN(kv))`` followed by
``z = y + FFN(LN(y))`` with a GELU feed-forward. The three public operators
differ only in which side supplies queries and which supplies keys/values.
"""
from contextlib import contextmanager
from dataclasses import dataclass, fields
import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

_WEIGHT_SINKS = []


@contextmanager
def capture_attention_weights():
    """Collect the softmax weights (before they multiply values) of every
    attention call made inside the ``with`` block.

    Yields a list that fills with arrays shaped ``[..., heads, queries, keys]``.
    """
    sink = []
    _WEIGHT_SINKS.append(sink)
    try:
        yield sink
    finally:
        _WEIGHT_SINKS.remove(sink)


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


@dataclass
class AttentionParams:
    w_q: T.Tensor
    w_k: T.Tensor
    w_v: T.Tensor
    w_o: T.Tensor
    ffn_in: T.Tensor
    ffn_in_b: T.Tensor
    ffn_out: T.Tensor
    ffn_out_b: T.Tensor
    norm_q_g: T.Tensor
    norm_q_b: T.Tensor
    norm_ffn_g: T.Tensor
    norm_ffn_b: T.Tensor
    heads: int
    # only cross-attention blocks normalise the key/value side separately
    norm_kv_g: T.Tensor = None
    norm_kv_b: T.Tensor = None

    @classmethod
    def init(cls, d, h_ff, heads, rng, cross=False):
        if heads < 1 or d % heads:
            raise ConfigError(f"embedding size {d} is not divisible by {heads} heads")

        def p(a):
            return T.Tensor(a, requires_grad=True)

        kw = dict(
            w_q=p(xavier_uniform(rng, d, d)),
            w_k=p(xavier_uniform(rng, d, d)),
            w_v=p(xavier_uniform(rng, d, d)),
            w_o=p(xavier_uniform(rng, d, d)),
            ffn_in=p(xavier_uniform(rng, d, h_ff)),
            ffn_in_b=p(np.zeros(h_ff)),
            ffn_out=p(xavier_uniform(rng, h_ff, d)),
            ffn_out_b=p(np.zeros(d)),
            norm_q_g=p(np.ones(d)),
            norm_q_b=p(np.zeros(d)),
            norm_ffn_g=p(np.ones(d)),
            norm_ffn_b=p(np.zeros(d)),
            heads=heads,
        )
        if cross:
            kw["norm_kv_g"] = p(np.ones(d))
            kw["norm_kv_b"] = p(np.zeros(d))
        return cls(**kw)

    @property
    def cross(self):
        return self.norm_kv_g is not None

    @property
    def d(self):
        return self.w_q.shape[0]

    def named(self):
        """(name, tensor) pairs in declaration order."""
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, T.Tensor):
                yield f.name, v

    @staticmethod
    def count(d, h_ff, cross=False):
        """Scalar parameter count of one block."""
        return 4 * d * d + 2 * d * h_ff + h_ff + d + (6 if cross else 4) * d


def _key_mask(mask, q_ndim):
    """Lift a key mask ([..., m]) or full mask ([..., n, m]) to broadcast
    against scores shaped [..., heads, n, m]."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.bool_)
    if mask.ndim == q_ndim:
        return mask[..., None, :, :]
    return mask[..., None, None, :]


def multi_head_attention(q_in, kv_in, p, mask=None):
    """Scaled dot-product attention with ``p.heads`` heads and output projection.

    Scores are divided by sqrt(d_head).
    """
    if q_in.shape[-1] != kv_in.shape[-1]:
        raise DimensionError(
            f"query width {q_in.shape[-1]} != key/value width {kv_in.shape[-1]}")
    h = p.heads
    dh = q_in.shape[-1] // h
    q = T.split_heads(T.matmul(q_in, p.w_q), h)
    k = T.split_heads(T.matmul(kv_in, p.w_k), h)
    v = T.split_heads(T.matmul(kv_in, p.w_v), h)
    scores = T.scale(T.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(dh))
    w = T.softmax_rows(scores, _key_mask(mask, q_in.ndim))
    for sink in _WEIGHT_SINKS:
        sink.append(w.data)
    return T.matmul(T.merge_heads(T.matmul(w, v)), p.w_o)


def feed_forward(x, p):
    hidden = T.gelu(T.add(T.matmul(x, p.ffn_in), p.ffn_in_b))
    return T.add(T.matmul(hidden, p.ffn_out), p.ffn_out_b)


def _block(x, kv, p, kv_mask):
    q_in = T.layer_norm_rows(x, p.norm_q_g, p.norm_q_b)
    if kv is None:
        kv_in = q_in
    else:
        kv_in = T.layer_norm_rows(kv, p.norm_kv_g, p.norm_kv_b)
    y = T.add(x, multi_head_attention(q_in, kv_in, p, kv_mask))
    return T.add(y, feed_forward(T.layer_norm_rows(y, p.norm_ffn_g, p.norm_ffn_b), p))


def _check_cols(x, kv, p):
    if x.shape[-1] != p.d:
        raise DimensionError(f"input width {x.shape[-1]} != block width {p.d}")
    if kv is not None and kv.shape[-1] != x.shape[-1]:
        raise DimensionError(f"query side {x.shape} and key side {kv.shape} differ in width")


def theta_self(x, params, mask=None):
    """Self-attention block over one segment ``x`` ([..., t, d])."""
    _check_cols(x, None, params)
    return _block(x, None, params, mask)


def theta_cross_x(x, kv, params, kv_mask=None):
    """Update segment rows ``x`` by attending to latent (or other) rows ``kv``."""
    _check_cols(x, kv, params)
    if not params.cross:
        raise ConfigError("theta_cross_x needs cross-attention parameters")
    return _block(x, kv, params, kv_mask)


def theta_cross_l(latent, kv, params, kv_mask=None):
    """Update latent rows by attending to sequence-side rows ``kv``."""
    _check_cols(latent, kv, params)
    if not params.cross:
        raise ConfigError("theta_cross_l needs cross-attention parameters")
    return _block(latent, kv, params, kv_mask)
