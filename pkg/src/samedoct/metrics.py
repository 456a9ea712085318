"""Volumetric Dice and absolute volume difference with dual-annotation consensus
masking, plus stratified report aggregation and rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import LabelMask
from .errors import ValidationError


@dataclass
class MetricsRecord:
    """One evaluated (volume, class) pair; dice is None when both sides are empty."""

    experiment: str
    volume_id: str
    vendor: str
    class_id: int
    class_name: str
    dice: float | None
    avd_mm3: float


def _check_pair(pred: np.ndarray, ref: np.ndarray, valid_mask: np.ndarray | None):
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if valid_mask is not None:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != pred.shape:
            raise ValidationError(f"valid_mask shape {valid_mask.shape} != {pred.shape}")
    return pred, ref, valid_mask


def dice_score(pred: np.ndarray, ref: np.ndarray, class_id: int,
               valid_mask: np.ndarray | None = None) -> float | None:
    """2|X n Y| / (|X| + |Y|) over valid voxels; None when |X| + |Y| = 0."""
    pred, ref, valid_mask = _check_pair(pred, ref, valid_mask)
    x = pred == class_id
    y = ref == class_id
    if valid_mask is not None:
        x = x & valid_mask
        y = y & valid_mask
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return None
    return 2.0 * int((x & y).sum()) / total


def avd(pred: np.ndarray, ref: np.ndarray, class_id: int, voxel_volume_mm3: float,
        valid_mask: np.ndarray | None = None) -> float:
    """|count(X) - count(Y)| scaled by the physical voxel volume, over valid voxels."""
    if voxel_volume_mm3 <= 0:
        raise ValidationError(f"voxel volume must be positive, got {voxel_volume_mm3}")
    pred, ref, valid_mask = _check_pair(pred, ref, valid_mask)
    x = pred == class_id
    y = ref == class_id
    if valid_mask is not None:
        x = x & valid_mask
        y = y & valid_mask
    return abs(int(x.sum()) - int(y.sum())) * voxel_volume_mm3


def consensus_mask(annotation_a: np.ndarray, annotation_b: np.ndarray) -> np.ndarray:
    """Voxels where the two annotations agree on any label, background included."""
    a, b, _ = _check_pair(annotation_a, annotation_b, None)
    return a == b


def evaluate_volume(pred: LabelMask, ref_a: LabelMask, ref_b: LabelMask | None = None,
                    spacing: tuple[float, float, float] | None = None,
                    classes: dict[int, str] | None = None,
                    experiment: str = "") -> list[MetricsRecord]:
    """Per-class Dice/AVD for one volume; with a second annotation, evaluation is
    restricted to consensus voxels on both the reference and the prediction."""
    spacing = spacing or ref_a.spacing
    if any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing must be positive, got {spacing}")
    classes = classes or ref_a.class_names
    voxel_volume = float(spacing[0] * spacing[1] * spacing[2])
    valid = None
    if ref_b is not None:
        valid = consensus_mask(ref_a.labels, ref_b.labels)
    records = []
    for class_id, class_name in sorted(classes.items()):
        records.append(MetricsRecord(
            experiment=experiment,
            volume_id=ref_a.volume_id or pred.volume_id,
            vendor=ref_a.vendor,
            class_id=class_id,
            class_name=class_name,
            dice=dice_score(pred.labels, ref_a.labels, class_id, valid),
            avd_mm3=avd(pred.labels, ref_a.labels, class_id, voxel_volume, valid),
        ))
    return records


def records_to_csv(records: list[MetricsRecord], path: str) -> str:
    """CSV rows experiment, volume_id, vendor, class, dice, avd_mm3 (dice blank if undefined)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["experiment", "volume_id", "vendor", "class", "dice", "avd_mm3"])
        for r in records:
            writer.writerow([r.experiment, r.volume_id, r.vendor, r.class_name,
                             "" if r.dice is None else f"{r.dice:.6f}", f"{r.avd_mm3:.6f}"])
    return path


@dataclass
class Report:
    """Mean Dice / AVD per (experiment, class); undefined Dice excluded from means."""

    experiments: list[str]
    class_names: list[str]
    mean_dice: dict[tuple[str, str], float | None]
    mean_avd: dict[tuple[str, str], float | None]
    by_vendor: dict[str, "Report"] | None = None

    def best_experiments(self) -> dict[tuple[str, str], str | None]:
        """Winner per (metric, class): max mean dice, min mean avd."""
        best: dict[tuple[str, str], str | None] = {}
        for cls in self.class_names:
            dice_vals = [(e, self.mean_dice[(e, cls)]) for e in self.experiments
                         if self.mean_dice[(e, cls)] is not None]
            avd_vals = [(e, self.mean_avd[(e, cls)]) for e in self.experiments
                        if self.mean_avd[(e, cls)] is not None]
            best[("dice", cls)] = max(dice_vals, key=lambda t: t[1])[0] if dice_vals else None
            best[("avd", cls)] = min(avd_vals, key=lambda t: t[1])[0] if avd_vals else None
        return best

    def render_table(self, mark_best: bool = True) -> str:
        """Plain-text table, one experiment per row, best value per column starred."""
        best = self.best_experiments() if mark_best else {}
        name_w = max([len("Experiment")] + [len(e) for e in self.experiments]) + 1
        cols = [("dice", c) for c in self.class_names] + [("avd", c) for c in self.class_names]
        header = "Experiment".ljust(name_w) + "| " + "  ".join(
            f"{m.upper()} {c}".rjust(9) for m, c in cols)
        lines = [header, "-" * len(header)]
        for e in self.experiments:
            cells = []
            for metric, cls in cols:
                table = self.mean_dice if metric == "dice" else self.mean_avd
                v = table[(e, cls)]
                if v is None:
                    cells.append("-".rjust(9))
                    continue
                mark = "*" if mark_best and best.get((metric, cls)) == e else " "
                cells.append(f"{mark}{v:.3f}".rjust(9))
            lines.append(e.ljust(name_w) + "| " + "  ".join(cells))
        return "\n".join(lines)


def aggregate_report(records: list[MetricsRecord], with_vendor_strata: bool = True) -> Report:
    """Fold records into per-(experiment, class) means, experiments in first-seen order."""
    if not records:
        raise ValidationError("no records to aggregate")
    experiments: list[str] = []
    class_names: list[str] = []
    for r in records:
        if r.experiment not in experiments:
            experiments.append(r.experiment)
        if r.class_name not in class_names:
            class_names.append(r.class_name)
    mean_dice: dict[tuple[str, str], float | None] = {}
    mean_avd: dict[tuple[str, str], float | None] = {}
    for e in experiments:
        for cls in class_names:
            sel = [r for r in records if r.experiment == e and r.class_name == cls]
            dices = [r.dice for r in sel if r.dice is not None]
            avds = [r.avd_mm3 for r in sel]
            mean_dice[(e, cls)] = float(np.mean(dices)) if dices else None
            mean_avd[(e, cls)] = float(np.mean(avds)) if avds else None
    by_vendor = None
    if with_vendor_strata:
        vendors = sorted({r.vendor for r in records})
        by_vendor = {
            v: aggregate_report([r for r in records if r.vendor == v], with_vendor_strata=False)
            for v in vendors
        } if len(vendors) > 1 else {}
    return Report(experiments=experiments, class_names=class_names,
                  mean_dice=mean_dice, mean_avd=mean_avd, by_vendor=by_vendor)


def plot_report(report: Report, path: str) -> str:
    """Grouped bar chart of mean Dice and AVD per class and experiment."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    n_exp = len(report.experiments)
    x = np.arange(len(report.class_names))
    width = 0.8 / max(n_exp, 1)
    for ax, table, title in ((axes[0], report.mean_dice, "Mean Dice (higher is better)"),
                             (axes[1], report.mean_avd, "Mean AVD mm^3 (lower is better)")):
        for i, e in enumerate(report.experiments):
            vals = [table[(e, c)] if table[(e, c)] is not None else 0.0
                    for c in report.class_names]
            ax.bar(x + (i - (n_exp - 1) / 2) * width, vals, width, label=e)
        ax.set_xticks(x)
        ax.set_xticklabels(report.class_names)
        ax.set_title(title)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylim(0, 1.0)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
