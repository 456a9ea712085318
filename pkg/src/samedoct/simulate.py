"""Click-prompt simulation from reference masks.

Points come from centroids of the n largest connected components; when fewer
components exist than requested clicks, extra points are drawn from a Gaussian
around a randomly chosen component's centroid, rejection-resampled until they
land inside that component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyClassError, ValidationError
from .model.prompts import POSITIVE, PromptPoint, PromptSet

STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}

GAUSSIAN_ATTEMPT_CAP = 1000


@dataclass
class Component:
    """One connected region of a single class on one B-scan."""

    pixels: np.ndarray  # [n, 2] of (row, col), raster order
    size: int
    centroid: tuple[float, float]  # (row, col)
    bbox: tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max), inclusive
    first_pixel_raster: int = 0  # row * width + col of the first pixel, for tie-breaks


@dataclass
class SimulatedPrompt:
    class_id: int
    points: list[tuple[int, int]]  # (x, y) pixel coordinates
    provenance: list[str]  # per point: centroid | gaussian_fallback
    seed: int

    def to_prompt_set(self) -> PromptSet:
        return PromptSet(points=[PromptPoint(float(x), float(y), POSITIVE) for x, y in self.points])

    def to_json_list(self) -> list[dict]:
        return [{"x": int(x), "y": int(y), "label": POSITIVE, "provenance": prov}
                for (x, y), prov in zip(self.points, self.provenance)]


def _check_inputs(mask_slice: np.ndarray, class_id: int, connectivity: int) -> np.ndarray:
    mask_slice = np.asarray(mask_slice)
    if mask_slice.ndim != 2:
        raise ValidationError(f"mask slice must be 2-D, got shape {mask_slice.shape}")
    if not np.issubdtype(np.asarray(class_id).dtype, np.integer) or class_id < 0:
        raise ValidationError(f"unknown class id: {class_id!r}")
    if connectivity not in STRUCTURES:
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    return mask_slice


def connected_components(mask_slice: np.ndarray, class_id: int,
                         connectivity: int = 8) -> list[Component]:
    """Components of the class, sorted by size descending; size ties broken by the
    smallest raster-order position of a component's first pixel."""
    mask_slice = _check_inputs(mask_slice, class_id, connectivity)
    binary = mask_slice == class_id
    labeled, count = ndimage.label(binary, structure=STRUCTURES[connectivity])
    width = mask_slice.shape[1]
    comps = []
    for idx in range(1, count + 1):
        rows, cols = np.nonzero(labeled == idx)
        pixels = np.stack([rows, cols], axis=1)
        comp = Component(
            pixels=pixels,
            size=int(pixels.shape[0]),
            centroid=(float(rows.mean()), float(cols.mean())),
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
        )
        comp.first_pixel_raster = int(rows[0]) * width + int(cols[0])
        comps.append(comp)
    comps.sort(key=lambda c: (-c.size, c.first_pixel_raster))
    return comps


def _centroid_pixel(comp: Component) -> tuple[int, int]:
    """Rounded centroid, snapped to the nearest component pixel when it falls off."""
    r = int(np.rint(comp.centroid[0]))
    c = int(np.rint(comp.centroid[1]))
    hit = (comp.pixels[:, 0] == r) & (comp.pixels[:, 1] == c)
    if hit.any():
        return r, c
    d2 = (comp.pixels[:, 0] - comp.centroid[0]) ** 2 + (comp.pixels[:, 1] - comp.centroid[1]) ** 2
    best = int(np.argmin(d2))  # argmin takes the first minimum = raster order tie-break
    return int(comp.pixels[best, 0]), int(comp.pixels[best, 1])


def simulate_points(mask_slice: np.ndarray, class_id: int, n: int, seed: int,
                    connectivity: int = 8) -> SimulatedPrompt:
    """n positive clicks for one class on one slice; deterministic under seed.

    Points for n are a prefix of points for any larger n under the same seed.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    comps = connected_components(mask_slice, class_id, connectivity)
    if not comps:
        raise EmptyClassError(f"class {class_id} absent from slice")
    rng = np.random.default_rng(seed)
    points: list[tuple[int, int]] = []
    provenance: list[str] = []
    for comp in comps[:n]:
        r, c = _centroid_pixel(comp)
        points.append((c, r))
        provenance.append("centroid")
    pixel_sets = None
    if len(points) < n:
        pixel_sets = [set(map(tuple, comp.pixels)) for comp in comps]
    h, w = mask_slice.shape
    while len(points) < n:
        ci = int(rng.integers(0, len(comps)))
        comp = comps[ci]
        extent = max(comp.bbox[2] - comp.bbox[0] + 1, comp.bbox[3] - comp.bbox[1] + 1)
        sigma = extent / 4.0
        placed = False
        for _ in range(GAUSSIAN_ATTEMPT_CAP):
            r = int(np.rint(rng.normal(comp.centroid[0], sigma)))
            c = int(np.rint(rng.normal(comp.centroid[1], sigma)))
            if 0 <= r < h and 0 <= c < w and (r, c) in pixel_sets[ci]:
                points.append((c, r))
                placed = True
                break
        if not placed:
            pick = int(rng.integers(0, comp.size))
            points.append((int(comp.pixels[pick, 1]), int(comp.pixels[pick, 0])))
        provenance.append("gaussian_fallback")
    return SimulatedPrompt(class_id=class_id, points=points, provenance=provenance, seed=seed)


def box_from_mask(mask_slice: np.ndarray, class_id: int, connectivity: int = 8,
                  target: str = "largest_component") -> tuple[int, int, int, int]:
    """Tight (x_min, y_min, x_max, y_max) of the largest component or the class union."""
    if target not in ("largest_component", "union"):
        raise ValidationError(f"target must be largest_component or union, got {target!r}")
    mask_slice = _check_inputs(mask_slice, class_id, connectivity)
    if target == "union":
        rows, cols = np.nonzero(mask_slice == class_id)
        if rows.size == 0:
            raise EmptyClassError(f"class {class_id} absent from slice")
        return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())
    comps = connected_components(mask_slice, class_id, connectivity)
    if not comps:
        raise EmptyClassError(f"class {class_id} absent from slice")
    row_min, col_min, row_max, col_max = comps[0].bbox
    return col_min, row_min, col_max, row_max
