"""Model architecture configuration."""

from __future__ import annotations

from dataclasses import dataclass, asdict

from ..errors import ConfigurationError


@dataclass
class ModelConfig:
    """Desk-scale promptable ViT segmentation architecture sizes.

    All mechanisms are size-independent; these defaults keep training and
    inference fast on a single CPU while preserving the full structure.
    """

    input_size: int = 256
    patch_size: int = 16
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_dim: int = 64
    num_classes: int = 3  # fluid classes, background excluded
    logit_downsample: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("input_size", "patch_size", "embed_dim", "num_blocks", "num_heads",
                     "decoder_dim", "num_classes", "logit_downsample"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.input_size % self.patch_size != 0:
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_dim % self.num_heads != 0:
            raise ConfigurationError(
                f"decoder_dim {self.decoder_dim} not divisible by num_heads {self.num_heads}")
        if self.patch_size % self.logit_downsample != 0:
            raise ConfigurationError(
                f"patch_size {self.patch_size} not divisible by logit_downsample {self.logit_downsample}")
        if self.decoder_dim % 4 != 0:
            raise ConfigurationError(
                f"decoder_dim must be divisible by 4 for coordinate encoding, got {self.decoder_dim}")
        if self.mlp_ratio <= 0:
            raise ConfigurationError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def token_grid(self) -> int:
        """Side length g of the patch-token grid."""
        return self.input_size // self.patch_size

    @property
    def logit_size(self) -> int:
        """Side length L of the output logit grid."""
        return self.input_size // self.logit_downsample

    @property
    def upsample_factor(self) -> int:
        """Total spatial upscaling from token grid to logit grid."""
        return self.patch_size // self.logit_downsample

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f for f in ModelConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config fields: {sorted(unknown)}")
        return ModelConfig(**d)
