"""Prompt types and the point/box prompt encoder with a trainable no-prompt default."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from ..errors import ValidationError
from .config import ModelConfig

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class PromptPoint:
    x: float  # pixel column
    y: float  # pixel row
    label: str = POSITIVE

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "label": self.label}


@dataclass
class PromptSet:
    """Labeled 2-D points and/or one box on a B-scan. May be empty (no-prompt mode)."""

    points: list[PromptPoint] = field(default_factory=list)
    box: tuple[float, float, float, float] | None = None  # (x_min, y_min, x_max, y_max)

    @property
    def empty(self) -> bool:
        return not self.points and self.box is None

    def validate(self, input_size: int) -> None:
        for p in self.points:
            if p.label not in (POSITIVE, NEGATIVE):
                raise ValidationError(f"point label must be positive/negative, got {p.label!r}")
            if not (0 <= p.x < input_size and 0 <= p.y < input_size):
                raise ValidationError(
                    f"point ({p.x}, {p.y}) outside [0, {input_size})")
        if self.box is not None:
            x0, y0, x1, y1 = self.box
            if not (x0 < x1 and y0 < y1):
                raise ValidationError(f"box must be ordered (min < max), got {self.box}")
            for v in self.box:
                if not (0 <= v < input_size):
                    raise ValidationError(f"box coordinate {v} outside [0, {input_size})")

    @staticmethod
    def from_dict(d: dict) -> "PromptSet":
        points = [PromptPoint(float(p["x"]), float(p["y"]), str(p.get("label", POSITIVE)))
                  for p in d.get("points", [])]
        box = d.get("box")
        if box is not None:
            box = tuple(float(v) for v in box)
        return PromptSet(points=points, box=box)


def coordinate_encoding(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of normalized (x, y) in [0, 1]; coords: [K, 2] -> [K, dim].

    Half the channels encode x, half y; within each half sin/cos pairs over
    geometrically spaced frequencies. dim must be divisible by 4.
    """
    half = dim // 2
    n_freq = half // 2
    freqs = (2.0 ** torch.arange(n_freq, dtype=coords.dtype, device=coords.device)) * (2.0 * math.pi)
    out = []
    for axis in range(2):
        phase = coords[:, axis:axis + 1] * freqs[None, :]
        out.append(torch.sin(phase))
        out.append(torch.cos(phase))
    return torch.cat(out, dim=1)


class PromptEncoder(nn.Module):
    """Maps point/box prompts to sparse tokens; holds the trainable no-prompt defaults.

    Each point token = coordinate encoding + learned per-label embedding. A box maps
    to two corner tokens with distinct learned corner embeddings. The empty prompt
    returns one trainable default sparse token plus the trainable dense embedding.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, g = config.decoder_dim, config.token_grid
        self.label_embed = nn.Embedding(2, d)    # 0 = negative, 1 = positive
        self.corner_embed = nn.Embedding(2, d)   # 0 = top-left, 1 = bottom-right
        self.default_sparse_token = nn.Parameter(torch.zeros(1, d))
        self.default_dense_embedding = nn.Parameter(torch.zeros(d, g, g))
        nn.init.trunc_normal_(self.label_embed.weight, std=0.02)
        nn.init.trunc_normal_(self.corner_embed.weight, std=0.02)
        nn.init.trunc_normal_(self.default_sparse_token, std=0.02)
        nn.init.trunc_normal_(self.default_dense_embedding, std=0.02)

    def _encode_coords(self, xy: list[tuple[float, float]]) -> torch.Tensor:
        dtype = self.default_sparse_token.dtype
        device = self.default_sparse_token.device
        coords = torch.tensor(xy, dtype=dtype, device=device)
        coords = (coords + 0.5) / self.config.input_size  # pixel centers, normalized
        return coordinate_encoding(coords, self.config.decoder_dim)

    def forward(self, prompts: PromptSet | None):
        """Returns (sparse_tokens [k, decoder_dim], dense_embedding [decoder_dim, g, g])."""
        if prompts is None:
            prompts = PromptSet()
        prompts.validate(self.config.input_size)
        if prompts.empty:
            return self.default_sparse_token, self.default_dense_embedding
        tokens = []
        if prompts.points:
            pe = self._encode_coords([(p.x, p.y) for p in prompts.points])
            labels = torch.tensor([1 if p.label == POSITIVE else 0 for p in prompts.points],
                                  dtype=torch.long, device=pe.device)
            tokens.append(pe + self.label_embed(labels))
        if prompts.box is not None:
            x0, y0, x1, y1 = prompts.box
            pe = self._encode_coords([(x0, y0), (x1, y1)])
            tokens.append(pe + self.corner_embed.weight)
        return torch.cat(tokens, dim=0), self.default_dense_embedding
