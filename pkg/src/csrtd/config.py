"""Architecture schedule for the rearrangement-target detector.

Two presets exist: ``paper`` (256×256 input, C = 64/128/320/512, eight heads)
and ``desk`` (64×64 input, C = 16/32/64/96, four heads), which trains on a
laptop CPU in minutes while keeping every mechanism, including the stage-3
cross-attention.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Tuple

from .tensor import ConfigError

ABLATIONS = ("i", "ii", "iii", "iv")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: Tuple[int, ...] = (16, 32, 64, 96)
    encoder_layers: Tuple[int, ...] = (1, 1, 1, 1)
    decoder_layers: Tuple[int, ...] = (1, 1, 1, 1)
    heads: int = 4
    mlp_ratio: int = 4
    ablation: str = "iv"
    shared_lanes: bool = True
    max_displacement: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "encoder_layers", tuple(int(c) for c in self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(int(c) for c in self.decoder_layers))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def spatial(self) -> List[int]:
        first = self.image_size // 4
        return [first >> i for i in range(self.num_stages)]

    def stage_dims(self) -> List[Tuple[int, int, int]]:
        """(C_i, H_i, W_i) for every stage."""
        return [(c, h, h) for c, h in zip(self.channels, self.spatial)]

    @property
    def cross_attention(self) -> bool:
        return self.ablation != "ii"

    @property
    def self_attention(self) -> bool:
        return self.ablation == "iii"

    def cross_stages(self) -> List[int]:
        """1-based stage indices that run cross-attention (3..M-1)."""
        return list(range(3, self.num_stages)) if self.cross_attention else []

    def fused_channels(self) -> List[int]:
        """Channel count of z^(i) for i = 1..M."""
        c, m = self.channels, self.num_stages
        out = [2 * c[0]]
        for i in range(2, m + 1):
            ci, prev = c[i - 1], c[i - 2]
            if 3 <= i <= m - 1 and self.cross_attention:
                out.append(prev + 3 * ci)
            else:
                out.append(prev + 2 * ci)
        return out

    def displacement(self, stage: int) -> int:
        """Correlation window radius at 1-based ``stage``."""
        h = self.spatial[stage - 1]
        return max(1, min(self.max_displacement, h // 2))

    def validate(self) -> None:
        m = self.num_stages
        if m < 2:
            raise ConfigError("need at least two stages")
        if len(self.encoder_layers) != m or len(self.decoder_layers) != m:
            raise ConfigError("layer-count lists must have one entry per stage")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        unit = 4 * 2 ** (m - 1)
        if self.image_size % unit:
            raise ConfigError(f"image size {self.image_size} not divisible by 4·2^(M-1) = {unit}")
        for c in self.channels:
            if c % self.heads:
                raise ConfigError(f"channels {c} not divisible by {self.heads} heads")
        if self.channels[0] % 2 or (self.channels[0] // 2) % self.heads:
            raise ConfigError("C_1/2 must be a positive multiple of the head count")
        if any(n < 1 for n in self.encoder_layers + self.decoder_layers):
            raise ConfigError("layer counts must be positive")
        if self.max_displacement < 1:
            raise ConfigError("max_displacement must be >= 1")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def to_lines(self) -> List[str]:
        out = []
        for k, v in self.to_dict().items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{k}={v}")
        return out

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        raw = dict(line.split("=", 1) for line in lines if line.strip())
        kwargs: Dict[str, object] = {}
        for f in cls.__dataclass_fields__.values():
            if f.name not in raw:
                continue
            val = raw[f.name]
            if f.name in ("channels", "encoder_layers", "decoder_layers"):
                kwargs[f.name] = tuple(int(x) for x in val.split(","))
            elif f.name == "shared_lanes":
                kwargs[f.name] = val == "True"
            elif f.name == "ablation":
                kwargs[f.name] = val
            else:
                kwargs[f.name] = int(val)
        return cls(**kwargs)


PAPER = ModelConfig(
    image_size=256,
    channels=(64, 128, 320, 512),
    encoder_layers=(2, 2, 2, 2),
    decoder_layers=(1, 1, 1, 1),
    heads=8,
    shared_lanes=False,  # independent lane weights put the count in the 20M-30M band
)

DESK = ModelConfig()

# Smallest schedule that still has a cross-attention stage; used by gradcheck.
TINY = ModelConfig(
    image_size=32,
    channels=(4, 8, 8, 8),
    encoder_layers=(1, 1, 1, 1),
    decoder_layers=(1, 1, 1, 1),
    heads=2,
    mlp_ratio=2,
)

PRESETS = {"paper": PAPER, "desk": DESK, "tiny": TINY}


def preset(name: str, **changes) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown config {name!r}; expected one of {sorted(PRESETS)}") from None
    return base.with_(**changes) if changes else base
