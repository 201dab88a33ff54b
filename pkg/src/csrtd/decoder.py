"""Decoder: correlation layer, upsampling Conv-Attention stages, binarization."""
from __future__ import annotations

from typing import Dict, List

import numpy as np

from . import nn
from . import tensor as T
from .attention import ConvAttnModule, TokenSeq, map_to_tokens, tokens_to_map
from .config import ModelConfig
from .encoder import StagePyramid
from .tensor import ShapeError, Tensor


def correlate(z: Tensor, max_displacement: int) -> Tensor:
    """Correlation between the first and second channel halves of ``z``.

    ``out[(dy+D)*(2D+1) + (dx+D), y, x] = mean_ch A[ch, y, x] * B[ch, y+dy, x+dx]``
    with zero padding outside the map.
    """
    squeezed = z.ndim == 3
    if squeezed:
        z = T.reshape(z, (1,) + z.shape)
    n, c2, h, w = z.shape
    if c2 % 2:
        raise ShapeError(f"correlation needs an even channel count, got {c2}")
    if max_displacement < 1:
        raise ValueError("max_displacement must be >= 1")
    c, d = c2 // 2, max_displacement
    zd = z.data
    a, b = zd[:, :c], zd[:, c:]
    bp = np.pad(b, ((0, 0), (0, 0), (d, d), (d, d)))
    span = 2 * d + 1
    out = np.empty((n, span * span, h, w), dtype=zd.dtype)
    inv_c = zd.dtype.type(1.0 / c)
    for idx, (dy, dx) in enumerate((dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)):
        window = bp[:, :, d + dy : d + dy + h, d + dx : d + dx + w]
        out[:, idx] = (a * window).sum(axis=1) * inv_c

    def bw(g):
        ga = np.zeros_like(a)
        gbp = np.zeros_like(bp)
        for idx, (dy, dx) in enumerate((dy, dx) for dy in range(-d, d + 1) for dx in range(-d, d + 1)):
            gi = g[:, idx : idx + 1] * inv_c
            ga += gi * bp[:, :, d + dy : d + dy + h, d + dx : d + dx + w]
            gbp[:, :, d + dy : d + dy + h, d + dx : d + dx + w] += gi * a
        gb = gbp[:, :, d : d + h, d : d + w]
        return (np.concatenate([ga, gb], axis=1),)

    res = Tensor._make(out, (z,), bw)
    return T.reshape(res, res.shape[1:]) if squeezed else res


class DecoderStage(nn.Module):
    def __init__(self, rng, c_in: int, c_out: int, heads: int, layers: int, mlp_ratio: int, upsample_steps: int):
        self.proj = nn.Conv2d(rng, c_in, c_out, 1)
        self.norm = nn.LayerNorm(c_out)
        self.attn = ConvAttnModule(rng, c_out, heads, layers, mlp_ratio)
        self.upsample_steps = upsample_steps

    def forward(self, x: Tensor):
        emb = self.proj(x)
        _, _, h, w = emb.shape
        t = self.norm(map_to_tokens(emb))
        out = self.attn(TokenSeq(t, (h, w), has_cls=False)).tokens
        u = tokens_to_map(out, h, w)
        for _ in range(self.upsample_steps):
            u = T.upsample2x(u)
        return t, u


class Decoder(nn.Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        c, m = cfg.channels, cfg.num_stages
        fused = cfg.fused_channels()
        stages: List[DecoderStage] = []
        for i in range(m, 0, -1):
            if i == 1:
                c_in, c_out, steps = c[0] + fused[0], c[0] // 2, 2
            else:
                c_in = c[i - 1] + fused[i - 1]
                if i == m or i == 2:
                    c_in += (2 * cfg.displacement(i) + 1) ** 2
                c_out, steps = c[i - 2], 1
            stages.append(DecoderStage(rng, c_in, c_out, cfg.heads, cfg.decoder_layers[i - 1], cfg.mlp_ratio, steps))
        self.stages = stages  # ordered M, M-1, ..., 1
        self.head = nn.Conv2d(rng, c[0] // 2, 2, 1)

    def forward(self, pyr: StagePyramid, trace: Dict[str, tuple] = None) -> Tensor:
        return decode(pyr, self, trace)


def decode(pyr: StagePyramid, dec: Decoder, trace: Dict[str, tuple] = None) -> Tensor:
    cfg = dec.cfg
    m, c = cfg.num_stages, cfg.channels
    dims = cfg.stage_dims()
    zs = pyr.z
    u = None
    for stage, i in zip(dec.stages, range(m, 0, -1)):
        z = zs[i - 1]
        if i == m:
            parts = [pyr.z_down, z, correlate(z, cfg.displacement(i))]
        else:
            parts = [u, z]
            if i == 2:
                parts.append(correlate(z, cfg.displacement(i)))
        t, u = stage(T.concat(parts, axis=1))
        if i > 1:
            expected = dims[i - 2]
        else:
            expected = (c[0] // 2, cfg.image_size, cfg.image_size)
        if u.shape[1:] != tuple(expected):
            raise ShapeError(f"u^({i}) has shape {u.shape[1:]}, schedule says {tuple(expected)}")
        if trace is not None:
            trace[f"t{i}"] = t.shape[1:]
            trace[f"u{i}"] = u.shape[1:]
    logits = dec.head(u)
    if trace is not None:
        trace["logits"] = logits.shape[1:]
    return logits


def binarize(logits) -> np.ndarray:
    """Pixelwise argmax over the two class channels; ties go to class 0."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.shape[-3] != 2:
        raise ShapeError(f"expected 2 class channels, got shape {arr.shape}")
    return (arr[..., 1, :, :] > arr[..., 0, :, :]).astype(np.uint8)
