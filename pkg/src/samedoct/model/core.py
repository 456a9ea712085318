"""Assembled promptable segmentation model and the single-image inference API."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import ConfigurationError, ValidationError
from .config import ModelConfig
from .decoder import MaskDecoder
from .encoder import ImageEncoderViT
from .prompts import PromptEncoder, PromptSet


@dataclass
class ImageEmbedding:
    """Dense image features [decoder_dim, g, g] plus provenance for caching."""

    tensor: torch.Tensor
    provenance: tuple[str, int, str] = ("", 0, "")  # (volume_id, slice_index, model_version)


@dataclass
class ClassLogits:
    """Per-class logit maps [C+1, L, L]; channel 0 is background."""

    tensor: torch.Tensor


class PromptableSegModel(nn.Module):
    """Image encoder + prompt encoder + mask decoder.

    Weights are immutable during inference; any number of concurrent inference
    calls may share the module. Training takes exclusive write access.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoderViT(config)
        self.prompt_encoder = PromptEncoder(config)
        self.mask_decoder = MaskDecoder(config)

    def forward(self, images: torch.Tensor, prompts: list[PromptSet] | None = None,
                lora=None) -> torch.Tensor:
        """Differentiable batched forward: [B, 1, S, S] -> [B, C+1, L, L].

        All samples in a batch must carry the same number of prompt tokens;
        prompts=None runs the trainable no-prompt default for every sample.
        """
        embeddings = self.image_encoder(images, lora)
        bsz = embeddings.shape[0]
        if prompts is None:
            prompts = [None] * bsz
        encoded = [self.prompt_encoder(p) for p in prompts]
        ks = {e[0].shape[0] for e in encoded}
        if len(ks) != 1:
            raise ConfigurationError(f"mixed prompt token counts in one batch: {sorted(ks)}")
        sparse = torch.stack([e[0] for e in encoded], dim=0)
        dense = torch.stack([e[1] for e in encoded], dim=0)
        return self.mask_decoder(embeddings, sparse, dense)


def build_model(config: ModelConfig, seed: int = 0) -> PromptableSegModel:
    """Deterministically initialized model for a given seed."""
    torch.manual_seed(seed)
    model = PromptableSegModel(config)
    model.eval()
    return model


def _image_to_tensor(model: PromptableSegModel, image) -> torch.Tensor:
    s = model.config.input_size
    arr = np.asarray(image, dtype=np.float32) if not isinstance(image, torch.Tensor) else image
    t = torch.as_tensor(arr)
    if t.shape != (s, s):
        raise ConfigurationError(f"image shape {tuple(t.shape)} != ({s}, {s})")
    if not torch.isfinite(t).all():
        raise ValidationError("image contains non-finite values")
    dtype = next(model.parameters()).dtype
    return t.to(dtype).reshape(1, 1, s, s)


def encode_image(model: PromptableSegModel, image, lora_state=None,
                 provenance: tuple[str, int, str] = ("", 0, "")) -> ImageEmbedding:
    """Encode one grayscale [S, S] image (intensities in [0, 1]) to [d, g, g] features."""
    t = _image_to_tensor(model, image)
    with torch.no_grad():
        emb = model.image_encoder(t, lora_state)[0]
    return ImageEmbedding(tensor=emb, provenance=provenance)


def encode_prompts(model: PromptableSegModel, prompts: PromptSet | None):
    """Returns (sparse_tokens [k, d], dense_embedding [d, g, g]) for one prompt set."""
    with torch.no_grad():
        sparse, dense = model.prompt_encoder(prompts)
    return sparse, dense


def decode_masks(model: PromptableSegModel, embedding: ImageEmbedding,
                 sparse_tokens: torch.Tensor, dense_embedding: torch.Tensor) -> ClassLogits:
    """Decode one embedding + prompt tokens into per-class logits [C+1, L, L]."""
    cfg = model.config
    d, g = cfg.decoder_dim, cfg.token_grid
    if tuple(embedding.tensor.shape) != (d, g, g):
        raise ConfigurationError(
            f"embedding shape {tuple(embedding.tensor.shape)} != ({d}, {g}, {g})")
    if sparse_tokens.ndim != 2 or sparse_tokens.shape[1] != d:
        raise ConfigurationError(f"sparse tokens must be [k, {d}], got {tuple(sparse_tokens.shape)}")
    if tuple(dense_embedding.shape) != (d, g, g):
        raise ConfigurationError(
            f"dense embedding shape {tuple(dense_embedding.shape)} != ({d}, {g}, {g})")
    with torch.no_grad():
        logits = model.mask_decoder(embedding.tensor.unsqueeze(0),
                                    sparse_tokens.unsqueeze(0),
                                    dense_embedding.unsqueeze(0))[0]
    return ClassLogits(tensor=logits)


def logits_to_labels(logits: ClassLogits, upsample: int) -> np.ndarray:
    """Nearest-neighbor upsample then per-pixel argmax; ties go to the lower class index."""
    arr = logits.tensor.detach().cpu().numpy()
    arr = np.repeat(np.repeat(arr, upsample, axis=1), upsample, axis=2)
    return np.argmax(arr, axis=0).astype(np.uint8)  # np.argmax returns the first maximum


def predict(model: PromptableSegModel, image, prompts: PromptSet | None = None,
            lora_state=None) -> np.ndarray:
    """Full-resolution label map [S, S] with values in {0..C}."""
    embedding = encode_image(model, image, lora_state)
    sparse, dense = encode_prompts(model, prompts)
    logits = decode_masks(model, embedding, sparse, dense)
    return logits_to_labels(logits, model.config.logit_downsample)
