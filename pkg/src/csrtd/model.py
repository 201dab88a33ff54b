"""The full detector: Serial Encoder → Cross-Attentional Encoder → Decoder."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .decoder import Decoder, binarize
from .encoder import CrossAttentionalEncoder, SerialEncoder
from .tensor import ShapeError, Tensor


class RTDModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = SerialEncoder(rng, cfg)
        self.fusion = CrossAttentionalEncoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)
        self.assign_names()

    def forward(self, goal: Tensor, cur: Tensor, trace: Optional[Dict[str, tuple]] = None) -> Tensor:
        squeezed = goal.ndim == 3
        if squeezed:
            goal = T.reshape(goal, (1,) + goal.shape)
            cur = T.reshape(cur, (1,) + cur.shape)
        s = self.cfg.image_size
        if goal.shape[1:] != (3, s, s):
            raise ShapeError(f"expected input 3×{s}×{s}, got {goal.shape[1:]}")
        h_goal, h_cur = self.encoder(goal, cur)
        pyr = self.fusion(h_goal, h_cur)
        if trace is not None:
            for i, (g, c) in enumerate(zip(h_goal, h_cur), start=1):
                trace[f"h_goal{i}"] = g.shape[1:]
                trace[f"h_cur{i}"] = c.shape[1:]
            for i, z in enumerate(pyr.z, start=1):
                trace[f"z{i}"] = z.shape[1:]
            for i, s_attn in pyr.s_attn.items():
                trace[f"s_attn{i}"] = s_attn.shape[1:]
            trace["z_down_M"] = pyr.z_down.shape[1:]
        logits = self.decoder(pyr, trace)
        return T.reshape(logits, logits.shape[1:]) if squeezed else logits

    def predict(self, goal: np.ndarray, cur: np.ndarray) -> np.ndarray:
        """Binary masks for uint8 image batches (N×S×S×3 or S×S×3)."""
        with T.no_grad():
            logits = self.forward(images_to_tensor(goal), images_to_tensor(cur))
        return binarize(logits)


def images_to_tensor(images: np.ndarray) -> Tensor:
    """uint8 H×W×3 images to a centred float tensor laid out C×H×W."""
    arr = np.asarray(images)
    x = arr.astype(np.float32) / 255.0 - 0.5
    axes = (2, 0, 1) if arr.ndim == 3 else (0, 3, 1, 2)
    return Tensor(np.transpose(x, axes), dtype=T.default_dtype())


def expected_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Per-sample shapes of every traced tensor, derived from the schedule alone."""
    c, m, s = cfg.channels, cfg.num_stages, cfg.image_size
    hw = [s // 4 >> i for i in range(m)]
    out: Dict[str, tuple] = {}
    for i in range(1, m + 1):
        dims = (c[i - 1], hw[i - 1], hw[i - 1])
        out[f"h_goal{i}"] = out[f"h_cur{i}"] = dims
    out["z1"] = (2 * c[0], hw[0], hw[0])
    for i in range(2, m + 1):
        cross = cfg.cross_attention and 3 <= i <= m - 1
        out[f"z{i}"] = (c[i - 2] + (3 if cross else 2) * c[i - 1], hw[i - 1], hw[i - 1])
        if cross:
            out[f"s_attn{i}"] = (c[i - 1], hw[i - 1], hw[i - 1])
    out["z_down_M"] = (c[m - 1], hw[m - 1], hw[m - 1])
    for i in range(m, 1, -1):
        out[f"t{i}"] = (hw[i - 1] ** 2, c[i - 2])
        out[f"u{i}"] = (c[i - 2], hw[i - 2], hw[i - 2])
    out["t1"] = (hw[0] ** 2, c[0] // 2)
    out["u1"] = (c[0] // 2, s, s)
    out["logits"] = (2, s, s)
    return out


def count_params(model: nn.Module) -> int:
    return nn.count_params(model)
