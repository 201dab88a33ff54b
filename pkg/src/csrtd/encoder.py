"""Serial Encoder (two-lane feature pyramid) and Cross-Attentional Encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import nn
from . import tensor as T
from .attention import ConvAttnModule, CrossAttention, TokenSeq, attention_tokens, map_to_tokens, tokens_to_map
from .config import ModelConfig
from .tensor import ConfigError, ShapeError, Tensor


def _patch_geometry(stage: int) -> Tuple[int, int, int]:
    """(kernel, stride, padding) of the patch embedding at 1-based ``stage``."""
    return (7, 4, 3) if stage == 1 else (3, 2, 1)


class SerialBlock(nn.Module):
    def __init__(self, rng, stage: int, c_in: int, c_out: int, heads: int, layers: int, mlp_ratio: int):
        k, s, p = _patch_geometry(stage)
        self.stride = s
        self.patch_embed = nn.Conv2d(rng, c_in, c_out, k, stride=s, padding=p)
        self.norm = nn.LayerNorm(c_out)
        self.cls_token = nn.trunc_normal(rng, (1, 1, c_out))
        self.attn = ConvAttnModule(rng, c_out, heads, layers, mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        if h % self.stride or w % self.stride:
            raise ConfigError(f"input {h}×{w} not divisible by patch stride {self.stride}")
        emb = self.patch_embed(x)
        _, c, ho, wo = emb.shape
        tokens = self.norm(map_to_tokens(emb))
        cls = T.broadcast_to(self.cls_token, (n, 1, c))
        seq = TokenSeq(T.concat([cls, tokens], axis=1), (ho, wo), has_cls=True)
        out = self.attn(seq).tokens
        img = T.getitem(out, (slice(None), slice(1, None), slice(None)))
        return tokens_to_map(img, ho, wo)


class ResStage(nn.Module):
    """Residual-conv stand-in for a serial block (ablation i)."""

    def __init__(self, rng, stage: int, c_in: int, c_out: int):
        k, s, p = _patch_geometry(stage)
        self.stride = s
        self.patch_embed = nn.Conv2d(rng, c_in, c_out, k, stride=s, padding=p)
        self.norm = nn.ChannelLayerNorm(c_out)
        self.conv1 = nn.Conv2d(rng, c_out, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(rng, c_out, c_out, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(self.patch_embed(x))
        return h + self.conv2(T.gelu(self.conv1(T.gelu(h))))


def serial_block_forward(block: nn.Module, x: Tensor) -> Tensor:
    squeezed = x.ndim == 3
    if squeezed:
        x = T.reshape(x, (1,) + x.shape)
    out = block(x)
    return T.reshape(out, out.shape[1:]) if squeezed else out


class SerialEncoder(nn.Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.blocks = self._build(rng, cfg)
        # second lane only when lanes do not share weights
        self.cur_blocks = None if cfg.shared_lanes else self._build(rng, cfg)

    @staticmethod
    def _build(rng, cfg: ModelConfig) -> list:
        blocks, c_prev = [], 3
        for i, (c, layers) in enumerate(zip(cfg.channels, cfg.encoder_layers), start=1):
            if cfg.ablation == "i":
                blocks.append(ResStage(rng, i, c_prev, c))
            else:
                blocks.append(SerialBlock(rng, i, c_prev, c, cfg.heads, layers, cfg.mlp_ratio))
            c_prev = c
        return blocks

    def pyramid(self, x: Tensor, blocks=None) -> List[Tensor]:
        feats = []
        for block in blocks or self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def forward(self, goal: Tensor, cur: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        return encode_two_lanes(goal, cur, self)


def encode_two_lanes(goal: Tensor, cur: Tensor, encoder: SerialEncoder) -> Tuple[List[Tensor], List[Tensor]]:
    """Run the goal and current images through the serial blocks."""
    if goal.shape != cur.shape:
        raise ShapeError(f"lane shape mismatch: goal {goal.shape} vs current {cur.shape}")
    return encoder.pyramid(goal), encoder.pyramid(cur, encoder.cur_blocks)


class DownsampleFuse(nn.Module):
    """2×2 average pool, 1×1 conv to ``c_out`` channels, channel LayerNorm."""

    def __init__(self, rng, c_in: int, c_out: int, pool: bool = True):
        self.pool = pool
        self.conv = nn.Conv2d(rng, c_in, c_out, 1)
        self.norm = nn.ChannelLayerNorm(c_out) if pool else None

    def forward(self, z: Tensor) -> Tensor:
        if self.pool:
            if z.shape[-1] % 2 or z.shape[-2] % 2:
                raise ShapeError(f"downsample needs even spatial dims, got {z.shape}")
            z = T.avgpool2x(z)
        out = self.conv(z)
        return self.norm(out) if self.norm is not None else out


def downsample_fuse(z: Tensor, module: DownsampleFuse) -> Tensor:
    squeezed = z.ndim == 3
    if squeezed:
        z = T.reshape(z, (1,) + z.shape)
    out = module(z)
    return T.reshape(out, out.shape[1:]) if squeezed else out


@dataclass
class StagePyramid:
    h_goal: List[Tensor]
    h_cur: List[Tensor]
    z: List[Tensor]
    z_down: Tensor
    s_attn: dict


class CrossAttentionalEncoder(nn.Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.cfg = cfg
        c, m = cfg.channels, cfg.num_stages
        fused = cfg.fused_channels()
        self.down = [DownsampleFuse(rng, fused[i], c[i]) for i in range(m - 1)]
        self.down_last = DownsampleFuse(rng, fused[m - 1], c[m - 1], pool=False)
        self.cross = [CrossAttention(rng, c[i - 1], cfg.heads) for i in cfg.cross_stages()]
        self.self_attn = (
            [CrossAttention(rng, c[i - 1], cfg.heads) for i in cfg.cross_stages()] if cfg.self_attention else []
        )

    def multihead_cross_stage(self, stage: int, h_goal: Tensor, h_cur: Tensor) -> Tensor:
        stages = self.cfg.cross_stages()
        if stage not in stages:
            raise ConfigError(f"cross-attention runs only at stages {stages}, not {stage}")
        j = stages.index(stage)
        s = self.cross[j](h_goal, h_cur)
        if self.self_attn:
            _, _, h, w = s.shape
            tok = map_to_tokens(s)
            sa, _ = attention_tokens(tok, tok, self.self_attn[j].weights())
            s = s + tokens_to_map(sa, h, w)
        return s

    def forward(self, h_goal: List[Tensor], h_cur: List[Tensor]) -> StagePyramid:
        return fuse_stages(h_goal, h_cur, self)


def fuse_stages(h_goal: List[Tensor], h_cur: List[Tensor], enc: CrossAttentionalEncoder) -> StagePyramid:
    cfg = enc.cfg
    m = cfg.num_stages
    if len(h_goal) != m or len(h_cur) != m:
        raise ShapeError(f"expected {m} stages per lane, got {len(h_goal)} and {len(h_cur)}")
    for i, (g, c, (ch, hh, ww)) in enumerate(zip(h_goal, h_cur, cfg.stage_dims()), start=1):
        if g.shape[1:] != (ch, hh, ww) or c.shape != g.shape:
            raise ShapeError(f"stage {i}: lanes {g.shape}/{c.shape} do not match schedule {(ch, hh, ww)}")

    zs, s_attn = [], {}
    z = T.concat([h_goal[0], h_cur[0]], axis=1)
    zs.append(z)
    z_down = enc.down[0](z)
    for i in range(2, m + 1):
        parts = [z_down]
        if i in cfg.cross_stages():
            s = enc.multihead_cross_stage(i, h_goal[i - 1], h_cur[i - 1])
            s_attn[i] = s
            parts.append(s)
        parts += [h_goal[i - 1], h_cur[i - 1]]
        z = T.concat(parts, axis=1)
        zs.append(z)
        z_down = enc.down[i - 1](z) if i < m else enc.down_last(z)
    fused = cfg.fused_channels()
    for i, z in enumerate(zs):
        if z.shape[1] != fused[i]:
            raise ShapeError(f"z^({i + 1}) has {z.shape[1]} channels, schedule says {fused[i]}")
    return StagePyramid(list(h_goal), list(h_cur), zs, z_down, s_attn)
