"""ViT image encoder with separate q/k/v projections so adapters can bypass q and v."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig


def lora_bypass(x: torch.Tensor, a: torch.Tensor, b: torch.Tensor, scale: float) -> torch.Tensor:
    """Low-rank bypass term scale * B(A(x)); A: [r, d_in], B: [d_out, r]."""
    return scale * F.linear(F.linear(x, a), b)


class Attention(nn.Module):
    """Multi-head self-attention with per-projection low-rank adapter hooks."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        # a constant key offset cancels inside softmax, so a k bias would be inert
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x, lora_q=None, lora_v=None, lora_scale: float = 0.0):
        bsz, n, dim = x.shape
        q = self.q_proj(x)
        v = self.v_proj(x)
        if lora_q is not None:
            q = q + lora_bypass(x, lora_q[0], lora_q[1], lora_scale)
        if lora_v is not None:
            v = v + lora_bypass(x, lora_v[0], lora_v[1], lora_scale)
        k = self.k_proj(x)
        q = q.view(bsz, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = k.view(bsz, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = v.view(bsz, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, n, dim)
        return self.out_proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, lora_q=None, lora_v=None, lora_scale: float = 0.0):
        x = x + self.attn(self.norm1(x), lora_q, lora_v, lora_scale)
        x = x + self.mlp(self.norm2(x))
        return x


class LayerNorm2d(nn.Module):
    """Channel-wise LayerNorm over [B, C, H, W]."""

    def __init__(self, num_channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ImageEncoderViT(nn.Module):
    """Patch embedding + learned positional embeddings + transformer blocks + neck.

    Output: dense image embedding [B, decoder_dim, g, g], g = input_size / patch_size.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        g = config.token_grid
        self.patch_embed = nn.Conv2d(1, config.embed_dim, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, config.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            [EncoderBlock(config.embed_dim, config.num_heads, config.mlp_ratio)
             for _ in range(config.num_blocks)]
        )
        self.neck = nn.Sequential(
            nn.Conv2d(config.embed_dim, config.decoder_dim, kernel_size=1, bias=False),
            LayerNorm2d(config.decoder_dim),
        )

    def forward(self, images: torch.Tensor, lora=None) -> torch.Tensor:
        g = self.config.token_grid
        x = self.patch_embed(images)               # [B, D, g, g]
        x = x.flatten(2).transpose(1, 2)           # [B, g*g, D]
        x = x + self.pos_embed
        scale = lora.scale if lora is not None else 0.0
        for i, block in enumerate(self.blocks):
            lora_q = lora.tensors.get((i, "query")) if lora is not None else None
            lora_v = lora.tensors.get((i, "value")) if lora is not None else None
            x = block(x, lora_q, lora_v, scale)
        x = x.transpose(1, 2).reshape(-1, self.config.embed_dim, g, g)
        return self.neck(x)
