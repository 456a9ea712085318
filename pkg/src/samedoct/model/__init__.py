from .config import ModelConfig
from .core import (
    ClassLogits,
    ImageEmbedding,
    PromptableSegModel,
    build_model,
    decode_masks,
    encode_image,
    encode_prompts,
    logits_to_labels,
    predict,
)
from .prompts import NEGATIVE, POSITIVE, PromptPoint, PromptSet

__all__ = [
    "ModelConfig",
    "PromptableSegModel",
    "build_model",
    "encode_image",
    "encode_prompts",
    "decode_masks",
    "logits_to_labels",
    "predict",
    "ImageEmbedding",
    "ClassLogits",
    "PromptSet",
    "PromptPoint",
    "POSITIVE",
    "NEGATIVE",
]
