"""Low-rank adapters on the encoder's query/value projections, merge helpers,
and the trainable-parameter audit for the three fine-tuning regimens."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError
from .model.core import PromptableSegModel

ADAPTED_KINDS = ("query", "value")


class Regimen(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    DECODER_ONLY = "decoder_only"
    LORA_SAMED = "lora_samed"


@dataclass
class LoraState:
    """Per-adapted-layer factor pairs; every encoder block contributes exactly
    its query and value projections. A ~ N(0, 0.01^2) at injection, B = 0."""

    rank: int
    alpha: float
    tensors: dict[tuple[int, str], tuple[nn.Parameter, nn.Parameter]] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def registry(self) -> list[tuple[int, str]]:
        return list(self.tensors.keys())

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for (block, kind), (a, b) in self.tensors.items():
            out.append((f"lora.blocks.{block}.{kind}.A", a))
            out.append((f"lora.blocks.{block}.{kind}.B", b))
        return out

    def parameter_count(self) -> int:
        return sum(t.numel() for _, t in self.named_tensors())


def inject_lora(model: PromptableSegModel, rank: int = 4, alpha: float | None = None,
                seed: int = 0) -> LoraState:
    """Create zero-effect adapters for every encoder block's q and v projections.

    Deterministic under seed; the forward immediately after injection equals the
    base forward exactly because B starts at zero.
    """
    dim = model.config.embed_dim
    if not (1 <= rank < dim):
        raise ConfigurationError(f"rank must satisfy 1 <= rank < {dim}, got {rank}")
    if alpha is None:
        alpha = float(rank)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    state = LoraState(rank=rank, alpha=alpha)
    for i in range(model.config.num_blocks):
        for kind in ADAPTED_KINDS:
            a = nn.Parameter(torch.normal(0.0, 0.01, (rank, dim), generator=gen).to(dtype))
            b = nn.Parameter(torch.zeros(dim, rank, dtype=dtype))
            state.tensors[(i, kind)] = (a, b)
    return state


def _check_factor_shapes(w0: torch.Tensor, a: torch.Tensor, b: torch.Tensor, rank: int) -> None:
    d_out, d_in = w0.shape
    if a.shape != (rank, d_in) or b.shape != (d_out, rank):
        raise ConfigurationError(
            f"factor shapes A{tuple(a.shape)} / B{tuple(b.shape)} do not match "
            f"W0 {tuple(w0.shape)} at rank {rank}")


def lora_forward(x: torch.Tensor, w0: torch.Tensor, a: torch.Tensor, b: torch.Tensor,
                 alpha: float, rank: int) -> torch.Tensor:
    """W0 x + (alpha/rank) B A x; x may carry leading batch dimensions."""
    _check_factor_shapes(w0, a, b, rank)
    if x.shape[-1] != w0.shape[1]:
        raise ConfigurationError(f"input dim {x.shape[-1]} != {w0.shape[1]}")
    base = torch.nn.functional.linear(x, w0)
    bypass = torch.nn.functional.linear(torch.nn.functional.linear(x, a), b)
    return base + (alpha / rank) * bypass


def merge_lora(w0: torch.Tensor, a: torch.Tensor, b: torch.Tensor,
               alpha: float, rank: int) -> torch.Tensor:
    """W0 + (alpha/rank) B A, for adapter-free deployment."""
    _check_factor_shapes(w0, a, b, rank)
    return w0 + (alpha / rank) * (b @ a)


def merge_into_model(model: PromptableSegModel, lora: LoraState) -> PromptableSegModel:
    """Deep-copied model whose q/v weights absorb the adapters."""
    merged = copy.deepcopy(model)
    for (block, kind), (a, b) in lora.tensors.items():
        attn = merged.image_encoder.blocks[block].attn
        proj = attn.q_proj if kind == "query" else attn.v_proj
        with torch.no_grad():
            proj.weight.copy_(merge_lora(proj.weight, a.detach(), b.detach(),
                                         lora.alpha, lora.rank))
    return merged


def trainable_parameters(model: PromptableSegModel, lora_state: LoraState | None,
                         regimen: Regimen | str,
                         train_prompt_defaults: bool = True) -> list[tuple[str, torch.Tensor]]:
    """Named tensors the optimizer may update under each regimen.

    zero_shot trains nothing; decoder_only trains the mask decoder plus (by
    default) the no-prompt embeddings; lora_samed trains all adapter factors,
    the full prompt encoder, and the mask decoder. Base encoder tensors are
    never included.
    """
    regimen = Regimen(regimen)
    if regimen is Regimen.ZERO_SHOT:
        return []
    decoder = [(f"mask_decoder.{n}", p) for n, p in model.mask_decoder.named_parameters()]
    defaults = [
        ("prompt_encoder.default_sparse_token", model.prompt_encoder.default_sparse_token),
        ("prompt_encoder.default_dense_embedding", model.prompt_encoder.default_dense_embedding),
    ]
    if regimen is Regimen.DECODER_ONLY:
        return decoder + (defaults if train_prompt_defaults else [])
    if lora_state is None:
        raise ConfigurationError("lora_samed regimen requires an injected LoraState")
    prompt = [(f"prompt_encoder.{n}", p) for n, p in model.prompt_encoder.named_parameters()]
    return list(lora_state.named_tensors()) + prompt + decoder
