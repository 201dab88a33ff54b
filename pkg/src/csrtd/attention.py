"""Factorized attention, conv-attention, multi-head cross-attention and the
Conv-Attention Module that stacks them into pre-norm residual layers.

Token matrices are ``N×L×C`` (a leading batch axis); unbatched ``L×C``
inputs are accepted and returned unbatched.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class TokenSeq:
    tokens: Tensor
    spatial: Optional[Tuple[int, int]]
    has_cls: bool = False

    def __post_init__(self):
        if self.spatial is not None:
            h, w = self.spatial
            expected = h * w + (1 if self.has_cls else 0)
            if self.tokens.shape[-2] != expected:
                raise ShapeError(
                    f"token count {self.tokens.shape[-2]} != H·W{'+1' if self.has_cls else ''} = {expected}"
                )


@dataclass
class AttnWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    heads: int
    pos_kernel: Optional[Tensor] = None

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def d(self) -> int:
        return self.dim // self.heads

    def check(self) -> None:
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"channels {self.dim} not divisible by {self.heads} heads")


def _batch(x: Tensor):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def split_heads(x: Tensor, heads: int) -> Tensor:
    n, l, c = x.shape
    return T.transpose(T.reshape(x, (n, l, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    n, a, l, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, l, a * d))


def _factor_from_qkv(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    d = qh.shape[-1]
    k_soft = T.softmax(kh, axis=2)  # over tokens
    context = T.matmul(T.transpose(k_soft, (0, 1, 3, 2)), vh)  # N×A×d×d
    out = T.matmul(qh * (1.0 / np.sqrt(d)), context)
    return merge_heads(out)


def factor_attn(x: TokenSeq, w: AttnWeights) -> Tensor:
    """(Q/√d)·(softmax_tokens(K)ᵀ·V) per head; never forms the L×L score matrix."""
    w.check()
    tok, squeezed = _batch(x.tokens)
    q, k, v = T.matmul(tok, w.wq), T.matmul(tok, w.wk), T.matmul(tok, w.wv)
    out = _factor_from_qkv(q, k, v, w.heads)
    return T.reshape(out, out.shape[1:]) if squeezed else out


def _positional_term(q: Tensor, v: Tensor, x: TokenSeq, kernel: Tensor) -> Tensor:
    if x.spatial is None:
        raise ShapeError("conv_attn needs the spatial layout of the image tokens")
    h, w = x.spatial
    n, l, c = v.shape
    start = 1 if x.has_cls else 0
    v_img = T.getitem(v, (slice(None), slice(start, None), slice(None)))
    q_img = T.getitem(q, (slice(None), slice(start, None), slice(None)))
    v_map = T.transpose(T.reshape(v_img, (n, h, w, c)), (0, 3, 1, 2))
    conv = T.depthwise_conv2d(v_map, kernel)
    conv_tok = T.reshape(T.transpose(conv, (0, 2, 3, 1)), (n, h * w, c))
    alpha = q_img * conv_tok
    if x.has_cls:
        zero = Tensor(np.zeros((n, 1, c), dtype=alpha.dtype))
        alpha = T.concat([zero, alpha], axis=1)
    return alpha


def conv_attn(x: TokenSeq, w: AttnWeights) -> Tensor:
    """FactorAttn(X) + Q ∘ Depthwise(P, V); the CLS row gets no positional term."""
    w.check()
    if w.pos_kernel is None:
        raise ConfigError("conv_attn needs a positional kernel")
    tok, squeezed = _batch(x.tokens)
    seq = TokenSeq(tok, x.spatial, x.has_cls)
    q, k, v = T.matmul(tok, w.wq), T.matmul(tok, w.wk), T.matmul(tok, w.wv)
    out = _factor_from_qkv(q, k, v, w.heads) + _positional_term(q, v, seq, w.pos_kernel)
    return T.reshape(out, out.shape[1:]) if squeezed else out


def attention_tokens(xa: Tensor, xb: Tensor, w: AttnWeights) -> Tuple[Tensor, Tensor]:
    """Multi-head softmax attention with queries from ``xa`` and keys/values from ``xb``.

    Returns the merged head outputs ``N×L×C`` and the attention rows ``N×A×L×L``.
    """
    w.check()
    q = split_heads(T.matmul(xa, w.wq), w.heads)
    k = split_heads(T.matmul(xb, w.wk), w.heads)
    v = split_heads(T.matmul(xb, w.wv), w.heads)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(w.d))
    attn = T.softmax(scores, axis=-1)
    return merge_heads(T.matmul(attn, v)), attn


def map_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    n, l, c = x.shape
    return T.transpose(T.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def cross_attn(h_goal: Tensor, h_cur: Tensor, w: AttnWeights, return_attn: bool = False):
    """Cross-attention between two ``C×H×W`` (or batched) feature maps."""
    if h_goal.shape != h_cur.shape:
        raise ShapeError(f"lane shape mismatch: {h_goal.shape} vs {h_cur.shape}")
    squeezed = h_goal.ndim == 3
    if squeezed:
        h_goal = T.reshape(h_goal, (1,) + h_goal.shape)
        h_cur = T.reshape(h_cur, (1,) + h_cur.shape)
    _, _, h, wd = h_goal.shape
    out, attn = attention_tokens(map_to_tokens(h_goal), map_to_tokens(h_cur), w)
    out = tokens_to_map(out, h, wd)
    if squeezed:
        out = T.reshape(out, out.shape[1:])
    return (out, attn) if return_attn else out


class ConvAttnLayer(nn.Module):
    """Pre-norm conv-attention + residual, then pre-norm MLP + residual."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4, kernel: int = 3):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.wq = nn.trunc_normal(rng, (dim, dim))
        self.wk = nn.trunc_normal(rng, (dim, dim))
        self.wv = nn.trunc_normal(rng, (dim, dim))
        self.pos = nn.fan_in_uniform(rng, (dim, kernel, kernel), kernel * kernel)
        self.proj = nn.Linear(rng, dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Mlp(rng, dim, mlp_ratio * dim)

    def weights(self) -> AttnWeights:
        return AttnWeights(self.wq, self.wk, self.wv, self.heads, self.pos)

    def forward(self, x: TokenSeq) -> TokenSeq:
        t = x.tokens
        normed = TokenSeq(self.norm1(t), x.spatial, x.has_cls)
        t = t + self.proj(conv_attn(normed, self.weights()))
        t = t + self.mlp(self.norm2(t))
        return TokenSeq(t, x.spatial, x.has_cls)


class ConvAttnModule(nn.Module):
    def __init__(self, rng, dim: int, heads: int, layers: int, mlp_ratio: int = 4):
        if layers < 1:
            raise ConfigError("a Conv-Attention Module needs at least one layer")
        self.layers: List[ConvAttnLayer] = [ConvAttnLayer(rng, dim, heads, mlp_ratio) for _ in range(layers)]

    def forward(self, x: TokenSeq) -> TokenSeq:
        for layer in self.layers:
            x = layer(x)
        return x


def conv_attn_module(x: TokenSeq, layers: List[ConvAttnLayer]) -> TokenSeq:
    for layer in layers:
        x = layer(x)
    return x


class CrossAttention(nn.Module):
    """Per-stage cross-attention weights; output is the merged head scores."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = nn.trunc_normal(rng, (dim, dim))
        self.wk = nn.trunc_normal(rng, (dim, dim))
        self.wv = nn.trunc_normal(rng, (dim, dim))

    def weights(self) -> AttnWeights:
        return AttnWeights(self.wq, self.wk, self.wv, self.heads)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return cross_attn(a, b, self.weights())
