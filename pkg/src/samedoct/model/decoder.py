"""Two-way transformer mask decoder emitting deterministic per-class logits."""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .encoder import LayerNorm2d


def _stage_strides(factor: int) -> tuple[int, int]:
    """Split the total upscale factor across the two transposed-conv stages."""
    s1 = 1
    for d in range(int(factor ** 0.5), 0, -1):
        if factor % d == 0:
            s1 = d
            break
    return factor // s1, s1


class CrossAttention(nn.Module):
    """Multi-head attention with distinct query and key/value sources."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        # key bias omitted: softmax is invariant to a constant key offset
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        bsz, nq, dim = queries.shape
        nk = keys.shape[1]
        q = self.q_proj(queries).view(bsz, nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keys).view(bsz, nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(keys).view(bsz, nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, nq, dim)
        return self.out_proj(out)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention, token MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.self_attn = CrossAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = CrossAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = CrossAttention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: torch.Tensor, image: torch.Tensor):
        tokens = self.norm1(tokens + self.self_attn(tokens, tokens))
        tokens = self.norm2(tokens + self.cross_token_to_image(tokens, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.cross_image_to_token(image, tokens))
        return tokens, image


class ClassHead(nn.Module):
    """Per-class token head producing the channel weights for the spatial dot product."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, x):
        return self.net(x)


class MaskDecoder(nn.Module):
    """Two two-way layers over [class tokens || sparse prompt tokens], then per-class
    logit maps via spatial dot product against transposed-conv-upsampled features.

    Exactly one logit map per fluid class plus background; no ambiguity branch.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.decoder_dim
        n_out = config.num_classes + 1  # channel 0 = background
        self.class_tokens = nn.Parameter(torch.zeros(n_out, d))
        nn.init.trunc_normal_(self.class_tokens, std=0.02)
        self.layers = nn.ModuleList(
            [TwoWayBlock(d, config.num_heads, config.mlp_ratio) for _ in range(2)]
        )
        s1, s2 = _stage_strides(config.upsample_factor)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(d, d, kernel_size=s1, stride=s1),
            LayerNorm2d(d),
            nn.GELU(),
            nn.ConvTranspose2d(d, d, kernel_size=s2, stride=s2),
            nn.GELU(),
        )
        self.heads = nn.ModuleList([ClassHead(d) for _ in range(n_out)])

    def forward(self, embedding: torch.Tensor, sparse_tokens: torch.Tensor,
                dense_embedding: torch.Tensor) -> torch.Tensor:
        """embedding/dense: [B, d, g, g]; sparse: [B, k, d] -> logits [B, C+1, L, L]."""
        bsz, d, g, _ = embedding.shape
        image = (embedding + dense_embedding).flatten(2).transpose(1, 2)  # [B, g*g, d]
        tokens = torch.cat(
            [self.class_tokens.unsqueeze(0).expand(bsz, -1, -1), sparse_tokens], dim=1)
        for layer in self.layers:
            tokens, image = layer(tokens, image)
        features = self.upscale(image.transpose(1, 2).reshape(bsz, d, g, g))  # [B, d, L, L]
        class_out = tokens[:, : self.config.num_classes + 1]
        weights = torch.stack(
            [head(class_out[:, i]) for i, head in enumerate(self.heads)], dim=1)  # [B, C+1, d]
        return torch.einsum("bcd,bdhw->bchw", weights, features)
