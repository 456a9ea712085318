"""Volume-level inference and the regimen comparison used for evaluation runs."""

from __future__ import annotations

import numpy as np

from .data import LabelMask, Volume
from .errors import EmptyClassError
from .metrics import MetricsRecord, evaluate_volume
from .model.core import PromptableSegModel, predict
from .simulate import simulate_points


def predict_volume(model: PromptableSegModel, volume: Volume, lora_state=None,
                   class_names: dict[int, str] | None = None) -> LabelMask:
    """No-prompt prediction for every B-scan of a volume."""
    labels = np.stack([
        predict(model, volume.voxels[k], None, lora_state)
        for k in range(volume.voxels.shape[0])
    ])
    return LabelMask(labels=labels, class_names=class_names or {},
                     volume_id=volume.volume_id, spacing=volume.spacing, vendor=volume.vendor)


def evaluate_on_volumes(model: PromptableSegModel, volumes, masks, lora_state=None,
                        experiment: str = "") -> list[MetricsRecord]:
    """No-prompt predictions evaluated against reference masks, one record per class."""
    records = []
    for vol, ref in zip(volumes, masks):
        pred = predict_volume(model, vol, lora_state, class_names=ref.class_names)
        records.extend(evaluate_volume(pred, ref, experiment=experiment))
    return records


def point_prompted_volume(model: PromptableSegModel, volume: Volume, ref: LabelMask,
                          class_id: int, n_points: int, seed: int,
                          lora_state=None) -> np.ndarray:
    """Binary prediction volume for one class, prompting each slice with simulated
    clicks derived from the reference; slices without the class stay empty."""
    out = np.zeros(volume.voxels.shape, dtype=bool)
    for k in range(volume.voxels.shape[0]):
        try:
            sim = simulate_points(ref.labels[k], class_id, n_points, seed=seed + 1000 * k)
        except EmptyClassError:
            continue
        labels = predict(model, volume.voxels[k], sim.to_prompt_set(), lora_state)
        out[k] = labels == class_id
    return out


def evaluate_point_prompted(model: PromptableSegModel, volumes, masks, n_points: int,
                            seed: int, lora_state=None,
                            experiment: str = "") -> list[MetricsRecord]:
    """Prompted per-class evaluation: each class is predicted independently from
    its own simulated clicks, mirroring interactive use."""
    from .metrics import avd, dice_score

    records = []
    for vol, ref in zip(volumes, masks):
        for class_id in sorted(ref.class_names):
            binary = point_prompted_volume(model, vol, ref, class_id, n_points, seed, lora_state)
            pred = np.where(binary, class_id, 0).astype(np.uint8)
            records.append(MetricsRecord(
                experiment=experiment,
                volume_id=vol.volume_id,
                vendor=vol.vendor,
                class_id=class_id,
                class_name=ref.class_names[class_id],
                dice=dice_score(pred, ref.labels, class_id),
                avd_mm3=avd(pred, ref.labels, class_id, vol.voxel_volume_mm3),
            ))
    return records


def mean_dice(records: list[MetricsRecord]) -> float:
    """Mean of per-class mean Dice, undefined values excluded."""
    by_class: dict[int, list[float]] = {}
    for r in records:
        if r.dice is not None:
            by_class.setdefault(r.class_id, []).append(r.dice)
    if not by_class:
        return float("nan")
    return float(np.mean([np.mean(v) for v in by_class.values()]))
