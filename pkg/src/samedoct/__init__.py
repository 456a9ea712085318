"""Promptable ViT segmentation for retinal OCT fluid: LoRA fine-tuning,
click-prompt simulation, CE+Dice training, and volumetric Dice/AVD evaluation."""

from .data import LabelMask, RleMask, Volume, generate_synthetic, rle_decode, rle_encode
from .errors import (
    ConfigurationError,
    EmptyClassError,
    FormatError,
    SamedOctError,
    TrainingDivergedError,
    ValidationError,
)
from .lora import LoraState, Regimen, inject_lora, lora_forward, merge_lora, trainable_parameters
from .metrics import MetricsRecord, aggregate_report, avd, consensus_mask, dice_score, evaluate_volume
from .model import (
    ModelConfig,
    PromptableSegModel,
    PromptPoint,
    PromptSet,
    build_model,
    decode_masks,
    encode_image,
    encode_prompts,
    predict,
)
from .simulate import box_from_mask, connected_components, simulate_points
from .train import TrainConfig, combined_loss, dice_loss, downsample_labels, lr_at, train

__version__ = "0.1.0"
