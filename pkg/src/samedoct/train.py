"""Fine-tuning loop: combined CE+Dice objective on downsampled ground truth,
AdamW with linear warmup then exponential per-step decay, regimen-filtered
trainable set."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .errors import ConfigurationError, TrainingDivergedError, ValidationError
from .lora import LoraState, Regimen, trainable_parameters
from .model.config import ModelConfig
from .model.core import PromptableSegModel
from .model.prompts import PromptSet


@dataclass
class TrainConfig:
    base_lr: float = 5e-3
    warmup_steps: int = 250
    decay_gamma: float = 0.9999
    max_steps: int = 2000
    batch_size: int = 8
    lambda_ce: float = 0.2
    lambda_dice: float = 0.8
    dice_eps: float = 1e-5
    weight_decay: float = 0.1
    seed: int = 0
    use_prompts: bool = False  # default: no-prompt fine-tuning on the trainable default embedding
    label_downsample: str = "nearest"  # or "majority"
    train_prompt_defaults: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if abs(self.lambda_ce + self.lambda_dice - 1.0) > 1e-9:
            raise ConfigurationError(
                f"lambda_ce + lambda_dice must equal 1, got {self.lambda_ce + self.lambda_dice}")
        if not (0.0 < self.decay_gamma <= 1.0):
            raise ConfigurationError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if not (0 < self.warmup_steps < self.max_steps):
            raise ConfigurationError(
                f"warmup_steps must satisfy 0 < W < max_steps, got W={self.warmup_steps}, "
                f"max_steps={self.max_steps}")
        if self.base_lr <= 0 or self.batch_size < 1 or self.dice_eps <= 0:
            raise ConfigurationError("base_lr, batch_size and dice_eps must be positive")
        if self.label_downsample not in ("nearest", "majority"):
            raise ConfigurationError(f"unknown label_downsample: {self.label_downsample!r}")


def load_yaml_config(path: str) -> tuple[TrainConfig, ModelConfig, dict]:
    """YAML with 'train' and 'model' sections mirroring the two config dataclasses."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    train_cfg = TrainConfig(**(raw.get("train") or {}))
    model_cfg = ModelConfig.from_dict(raw.get("model") or {})
    return train_cfg, model_cfg, raw


def downsample_labels(gt_slice: np.ndarray, factor: int, mode: str = "nearest") -> np.ndarray:
    """Label subsampling; nearest keeps the top-left sample of each f x f cell."""
    gt_slice = np.asarray(gt_slice)
    h, w = gt_slice.shape
    if h % factor != 0 or w % factor != 0:
        raise ConfigurationError(f"shape {gt_slice.shape} not divisible by factor {factor}")
    if mode == "nearest":
        return gt_slice[::factor, ::factor].copy()
    if mode == "majority":
        cells = gt_slice.reshape(h // factor, factor, w // factor, factor).swapaxes(1, 2)
        cells = cells.reshape(h // factor, w // factor, factor * factor)
        n_labels = int(gt_slice.max()) + 1
        counts = np.stack([(cells == v).sum(axis=2) for v in range(n_labels)], axis=2)
        return counts.argmax(axis=2).astype(gt_slice.dtype)  # ties fall to the lowest label
    raise ConfigurationError(f"unknown downsample mode: {mode!r}")


def _as_batched(probs_or_logits: torch.Tensor, target: torch.Tensor):
    if probs_or_logits.ndim == 3:
        probs_or_logits = probs_or_logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if probs_or_logits.ndim != 4 or target.ndim != 3:
        raise ValidationError(
            f"expected [C+1, L, L] with [L, L] targets (optionally batched), got "
            f"{tuple(probs_or_logits.shape)} / {tuple(target.shape)}")
    if probs_or_logits.shape[0] != target.shape[0] or probs_or_logits.shape[2:] != target.shape[1:]:
        raise ValidationError(
            f"shape mismatch: {tuple(probs_or_logits.shape)} vs {tuple(target.shape)}")
    return probs_or_logits, target


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Mean over classes (background included) of 1 - (2 sum(p*g) + eps) / (sum p + sum g + eps).

    probs must be a softmax output; channels are checked to sum to 1 per pixel.
    """
    probs, target = _as_batched(probs, target)
    sums = probs.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-3):
        raise ValidationError("probs are not normalized per pixel (expected a softmax output)")
    n_classes = probs.shape[1]
    if int(target.max()) >= n_classes:
        raise ValidationError(f"target label {int(target.max())} out of range [0, {n_classes})")
    onehot = F.one_hot(target.long(), n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    inter = (probs * onehot).sum(dim=(0, 2, 3))
    totals = probs.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    per_class = 1.0 - (2.0 * inter + eps) / (totals + eps)
    return per_class.mean()


def combined_loss(logits: torch.Tensor, gt_low: torch.Tensor, lambda_ce: float = 0.2,
                  lambda_dice: float = 0.8, eps: float = 1e-5) -> torch.Tensor:
    """lambda_ce * mean pixelwise cross-entropy + lambda_dice * dice loss."""
    logits, gt_low = _as_batched(logits, gt_low)
    ce = F.cross_entropy(logits, gt_low.long())
    dl = dice_loss(torch.softmax(logits, dim=1), gt_low, eps)
    return lambda_ce * ce + lambda_dice * dl


def lr_at(t: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr over W steps, then base_lr * gamma^(t - W)."""
    if not (0 <= t < config.max_steps):
        raise ValidationError(f"step {t} outside [0, {config.max_steps})")
    if t < config.warmup_steps:
        return config.base_lr * (t + 1) / config.warmup_steps
    return config.base_lr * config.decay_gamma ** (t - config.warmup_steps)


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    final_checkpoint: str | None = None

    def to_csv(self, path: str) -> str:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "lr", "loss", "ce", "dice"])
            writer.writeheader()
            for row in self.steps:
                writer.writerow(row)
        return path


def slices_from_volumes(volumes, masks) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flatten (volume, mask) pairs into per-B-scan training samples."""
    out = []
    for vol, mask in zip(volumes, masks):
        for k in range(vol.voxels.shape[0]):
            out.append((vol.voxels[k], mask.labels[k]))
    return out


def _simulated_prompts(labels: np.ndarray, rng: np.random.Generator):
    from .simulate import simulate_points  # local import to avoid cycles

    present = [int(c) for c in np.unique(labels) if c > 0]
    if not present:
        return PromptSet()
    class_id = int(rng.choice(present))
    sim = simulate_points(labels, class_id, n=1, seed=int(rng.integers(0, 2 ** 31)))
    return sim.to_prompt_set()


def train(dataset, model: PromptableSegModel, regimen: Regimen | str, config: TrainConfig,
          lora_state: LoraState | None = None, out_dir: str | None = None,
          callback=None, callback_every: int = 0) -> tuple[str | None, TrainHistory]:
    """Optimize exactly the regimen's trainable set with AdamW at lr_at(t).

    dataset: list of (image [S, S] in [0, 1], labels [S, S]) slice pairs.
    Deterministic under config.seed on a fixed device. Returns the final
    checkpoint path (when out_dir is given) and the per-step history.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigurationError("dataset is empty")
    regimen = Regimen(regimen)
    params = trainable_parameters(model, lora_state, regimen,
                                  train_prompt_defaults=config.train_prompt_defaults)
    if not params:
        raise ConfigurationError("no trainable parameters under regimen zero_shot")

    for p in model.parameters():
        p.requires_grad_(False)
    for _, p in params:
        p.requires_grad_(True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW([p for _, p in params], lr=config.base_lr,
                            weight_decay=config.weight_decay)
    factor = model.config.logit_downsample
    history = TrainHistory()
    model.train()

    order = rng.permutation(len(dataset))
    cursor = 0
    for t in range(config.max_steps):
        idx = []
        while len(idx) < config.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            idx.append(int(order[cursor]))
            cursor += 1
        images = torch.stack(
            [torch.as_tensor(dataset[i][0], dtype=torch.float32) for i in idx]).unsqueeze(1)
        gt_low = torch.stack([
            torch.as_tensor(
                downsample_labels(dataset[i][1], factor, config.label_downsample).astype(np.int64))
            for i in idx])
        prompts = None
        if config.use_prompts:
            prompts = [_simulated_prompts(dataset[i][1], rng) for i in idx]
            ks = {1 if p.empty else len(p.points) for p in prompts}
            if len(ks) > 1:  # mixed token counts cannot batch; fall back to no-prompt
                prompts = None

        lr = lr_at(t, config)
        for group in opt.param_groups:
            group["lr"] = lr
        logits = model(images, prompts, lora_state)
        ce = F.cross_entropy(logits, gt_low)
        dl = dice_loss(torch.softmax(logits, dim=1), gt_low, config.dice_eps)
        loss = config.lambda_ce * ce + config.lambda_dice * dl
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {t}: ce={ce.item()}, dice={dl.item()}, lr={lr}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.steps.append({
            "step": t, "lr": lr, "loss": loss.item(), "ce": ce.item(), "dice": dl.item(),
        })
        if callback is not None and callback_every and (t + 1) % callback_every == 0:
            model.eval()
            stop = bool(callback(t, model, lora_state))
            model.train()
            if stop:
                break

    model.eval()
    checkpoint_path = None
    if out_dir is not None:
        from .checkpoint import save_checkpoint  # local import to avoid cycles

        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = save_checkpoint(
            os.path.join(out_dir, "checkpoint.zip"), model, lora_state,
            regimen=regimen.value, step=len(history.steps))
        history.final_checkpoint = checkpoint_path
        history.to_csv(os.path.join(out_dir, "history.csv"))
        with open(os.path.join(out_dir, "train_config.yaml"), "w") as f:
            yaml.safe_dump({"train": asdict(config), "model": model.config.to_dict()}, f)
    return checkpoint_path, history
