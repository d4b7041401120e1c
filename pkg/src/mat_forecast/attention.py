"""Multi-head scaled dot-product attention and sinusoidal position codes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class AttentionParams:
    """Projection weights for H heads.

    Per-head maps are stored side by side: head ``h`` uses columns
    ``h*d_head:(h+1)*d_head`` of ``w_q``/``w_k``/``w_v``.
    """

    w_q: Tensor  # (d_model, H*d_head)
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # (H*d_head, d_model)
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1] // self.n_heads

    def head(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cols = slice(h * self.d_head, (h + 1) * self.d_head)
        return self.w_q.data[:, cols], self.w_k.data[:, cols], self.w_v.data[:, cols]


def init_attention_params(d_model: int, n_heads: int, rng: np.random.Generator) -> AttentionParams:
    if n_heads < 1 or d_model % n_heads:
        raise ConfigError(f"{n_heads} heads do not evenly split width {d_model}")
    bound = d_model**-0.5

    def w():
        return Tensor(rng.uniform(-bound, bound, (d_model, d_model)), requires_grad=True)

    return AttentionParams(w_q=w(), w_k=w(), w_v=w(), w_o=w(), n_heads=n_heads)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., l, H*dh) -> (..., H, l, dh)
    *lead, length, width = x.shape
    x = ad.reshape(x, tuple(lead) + (length, n_heads, width // n_heads))
    return ad.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = ad.swapaxes(x, -2, -3)
    *lead, length, n_heads, d_head = x.shape
    return ad.reshape(x, tuple(lead) + (length, n_heads * d_head))


def attention_weights(q: Tensor, k: Tensor, scale: float) -> Tensor:
    return ad.softmax(ad.scale(q @ k.T, scale), axis=-1)


def multi_head_attention(
    Q, K, V, params: AttentionParams, score_scale: str = "head"
) -> Tensor:
    """softmax(Q_h K_h^T / sqrt(d)) V_h per head, concatenated, then ``w_o``.

    ``score_scale="head"`` divides by sqrt(d_head); ``"model"`` by sqrt(d_model).
    Leading axes are batch axes.
    """
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    d = params.d_model
    for name, t in (("Q", Q), ("K", K), ("V", V)):
        if t.ndim < 2 or t.shape[-1] != d:
            raise DimensionError(f"attention: {name} has shape {t.shape}, width must be {d}")
    if K.shape[-2] != V.shape[-2] or K.shape[-2] < 1:
        raise DimensionError(f"attention: K {K.shape} and V {V.shape} need equal non-zero length")
    if score_scale == "head":
        scale = 1.0 / math.sqrt(params.d_head)
    elif score_scale == "model":
        scale = 1.0 / math.sqrt(d)
    else:
        raise ConfigError(f"unknown score_scale {score_scale!r}")
    H = params.n_heads
    q = _split_heads(Q @ params.w_q, H)
    k = _split_heads(K @ params.w_k, H)
    v = _split_heads(V @ params.w_v, H)
    out = attention_weights(q, k, scale) @ v
    return _merge_heads(out) @ params.w_o


def self_attention(x, params: AttentionParams, score_scale: str = "head") -> Tensor:
    return multi_head_attention(x, x, x, params, score_scale)


@dataclass(frozen=True)
class PositionalEncoding:
    width: int
    base: float = 10000.0

    def __call__(self, t) -> np.ndarray:
        return positional_embedding(t, self)

    def table(self, length: int) -> np.ndarray:
        return positional_embedding(np.arange(length), self)


def positional_embedding(t, enc: PositionalEncoding) -> np.ndarray:
    """p_t(i) = sin(t * c^(i/d)) for even i, cos(t * c^(i/d)) for odd i.

    ``t`` may be a scalar (returns shape (d,)) or an array of steps
    (returns shape t.shape + (d,)).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("time index must be non-negative")
    i = np.arange(enc.width)
    angle = t[..., None] * enc.base ** (i / enc.width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
