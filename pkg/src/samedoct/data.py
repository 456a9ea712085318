"""Volume/mask persistence, RLE wire encoding, and the synthetic OCT-like generator.

Storage format: one JSON sidecar per array (shape, spacing, vendor, id, dtype,
format_version) next to a raw little-endian file, row-major, slowest axis = depth.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError

FORMAT_VERSION = 1

DEFAULT_CLASS_NAMES = {1: "IRF", 2: "SRF", 3: "PED"}


@dataclass
class Volume:
    """A 3-D OCT scan (stack of B-scans) with physical voxel spacing in mm."""

    voxels: np.ndarray  # [depth, height, width], float32 in [0, 1]
    spacing: tuple[float, float, float]  # mm per voxel along (depth, height, width)
    vendor: str = "synthetic"
    volume_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ConfigurationError(f"volume must be 3-D with all dims >= 1, got {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ConfigurationError(f"spacing must be strictly positive, got {self.spacing}")

    @property
    def voxel_volume_mm3(self) -> float:
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])


@dataclass
class LabelMask:
    """Per-voxel class labels over a Volume: 0 = background, 1..C = fluid classes."""

    labels: np.ndarray  # [depth, height, width], uint8
    class_names: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_CLASS_NAMES))
    volume_id: str = ""
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    vendor: str = "synthetic"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ConfigurationError(f"label mask must be 3-D, got {self.labels.shape}")

    @property
    def voxel_volume_mm3(self) -> float:
        return float(self.spacing[0] * self.spacing[1] * self.spacing[2])


@dataclass
class RleMask:
    """Run-length encoding of one binary slice, row-major, starting with background."""

    shape: tuple[int, int]
    runs: list[int]

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "runs": list(self.runs)}

    @staticmethod
    def from_dict(d: dict) -> "RleMask":
        try:
            shape = (int(d["shape"][0]), int(d["shape"][1]))
            runs = [int(r) for r in d["runs"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed RLE payload: {exc}") from exc
        return RleMask(shape=shape, runs=runs)


def _sidecar_path(path: str) -> str:
    return path if path.endswith(".json") else path + ".json"


def _write_array(arr: np.ndarray, meta: dict, path: str) -> str:
    sidecar = _sidecar_path(path)
    raw = os.path.splitext(sidecar)[0] + ".raw"
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta["shape"] = list(arr.shape)
    meta["raw_file"] = os.path.basename(raw)
    with open(raw, "wb") as f:
        f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    with open(sidecar, "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    return sidecar


def _read_array(path: str) -> tuple[np.ndarray, dict]:
    sidecar = _sidecar_path(path)
    if not os.path.exists(sidecar):
        raise FormatError(f"missing sidecar: {sidecar}")
    with open(sidecar) as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"unparsable sidecar {sidecar}: {exc}") from exc
    for key in ("format_version", "shape", "dtype", "raw_file"):
        if key not in meta:
            raise FormatError(f"sidecar missing field: {key}")
    if meta["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version: {meta['format_version']}")
    shape = tuple(int(s) for s in meta["shape"])
    dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    raw = os.path.join(os.path.dirname(sidecar), meta["raw_file"])
    if not os.path.exists(raw):
        raise FormatError(f"missing raw_file: {raw}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = os.path.getsize(raw)
    if actual != expected:
        raise FormatError(f"raw_file size mismatch: shape {shape} needs {expected} bytes, file has {actual}")
    arr = np.fromfile(raw, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("=")), meta


def save_volume(volume: Volume, path: str) -> str:
    """Write a volume as sidecar + raw float32; returns the sidecar path."""
    meta = {
        "kind": "volume",
        "volume_id": volume.volume_id,
        "vendor": volume.vendor,
        "spacing": list(volume.spacing),
        "dtype": "float32",
    }
    return _write_array(volume.voxels.astype(np.float32), meta, path)


def load_volume(path: str) -> Volume:
    arr, meta = _read_array(path)
    if meta.get("kind") != "volume":
        raise FormatError(f"kind mismatch: expected volume, got {meta.get('kind')}")
    return Volume(
        voxels=arr,
        spacing=tuple(float(s) for s in meta["spacing"]),
        vendor=meta.get("vendor", "synthetic"),
        volume_id=meta.get("volume_id", ""),
    )


def save_mask(mask: LabelMask, path: str) -> str:
    """Write a label mask as sidecar + raw uint8; returns the sidecar path."""
    meta = {
        "kind": "labels",
        "volume_id": mask.volume_id,
        "vendor": mask.vendor,
        "spacing": list(mask.spacing),
        "dtype": "uint8",
        "class_names": {str(k): v for k, v in mask.class_names.items()},
    }
    return _write_array(mask.labels.astype(np.uint8), meta, path)


def load_mask(path: str) -> LabelMask:
    arr, meta = _read_array(path)
    if meta.get("kind") != "labels":
        raise FormatError(f"kind mismatch: expected labels, got {meta.get('kind')}")
    names = {int(k): str(v) for k, v in meta.get("class_names", {}).items()}
    return LabelMask(
        labels=arr,
        class_names=names or dict(DEFAULT_CLASS_NAMES),
        volume_id=meta.get("volume_id", ""),
        spacing=tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0))),
        vendor=meta.get("vendor", "synthetic"),
    )


def rle_encode(mask_slice: np.ndarray, class_id: int) -> RleMask:
    """RLE of (mask_slice == class_id), alternating runs starting with background."""
    if mask_slice.ndim != 2:
        raise FormatError(f"expected a 2-D slice, got shape {mask_slice.shape}")
    flat = (np.asarray(mask_slice) == class_id).ravel()
    n = flat.size
    if n == 0:
        return RleMask(shape=mask_slice.shape, runs=[0])
    change = np.flatnonzero(np.diff(flat.astype(np.int8)))
    bounds = np.concatenate(([-1], change, [n - 1]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(shape=(mask_slice.shape[0], mask_slice.shape[1]), runs=runs)


def rle_decode(rle: RleMask) -> np.ndarray:
    """Inverse of rle_encode; returns a boolean [h, w] array."""
    h, w = rle.shape
    if any(r < 0 for r in rle.runs):
        raise FormatError("negative run length")
    if sum(rle.runs) != h * w:
        raise FormatError(f"runs sum to {sum(rle.runs)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in rle.runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


@dataclass
class SyntheticDataset:
    volumes: list[Volume]
    masks: list[LabelMask]
    manifest: dict


def _smooth_curve(rng: np.random.Generator, width: int, base: float, wobble: float) -> np.ndarray:
    """Gentle sinusoidal boundary curve across image columns."""
    x = np.linspace(0.0, 1.0, width)
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(0.5, 1.5)
    tilt = rng.uniform(-0.05, 0.05)
    return base + wobble * np.sin(2 * np.pi * freq * x + phase) + tilt * (x - 0.5)


def generate_synthetic(
    n_volumes: int,
    shape: tuple[int, int, int],
    classes: int,
    seed: int,
    vendor: str = "synthetic",
) -> SyntheticDataset:
    """Layered-band volumes with elliptical fluid blobs; masks match rasterization exactly.

    Class 3 blobs (PED-like) anchor to the bottom band and are the largest compartment.
    Deterministic per seed. Split assigns the first ~75% of volumes to train.
    """
    depth, height, width = shape
    if height < 32 or width < 32:
        raise ConfigurationError(f"in-plane shape must be >= 32, got {(height, width)}")
    if depth < 1 or n_volumes < 1 or classes < 1:
        raise ConfigurationError("n_volumes, depth and classes must all be >= 1")
    rng = np.random.default_rng(seed)
    volumes: list[Volume] = []
    masks: list[LabelMask] = []
    n_train = int(round(n_volumes * 0.75))
    spacing = (6.0 / depth, 2.0 / height, 6.0 / width)  # ~6x6 mm macular area, 2 mm axially
    entries = []
    class_names = {c: DEFAULT_CLASS_NAMES.get(c, f"class{c}") for c in range(1, classes + 1)}

    for vi in range(n_volumes):
        vid = f"vol_{vi:03d}"
        vox = np.zeros((depth, height, width), dtype=np.float32)
        lab = np.zeros((depth, height, width), dtype=np.uint8)

        top = _smooth_curve(rng, width, base=rng.uniform(0.22, 0.32) * height, wobble=0.03 * height)
        bottom = _smooth_curve(rng, width, base=rng.uniform(0.68, 0.78) * height, wobble=0.03 * height)
        rows = np.arange(height, dtype=np.float32)[:, None]
        in_band = (rows >= top[None, :]) & (rows < bottom[None, :])
        # Sub-layer intensities within the retina band, indexed by relative depth.
        frac = np.clip((rows - top[None, :]) / np.maximum(bottom - top, 1.0)[None, :], 0.0, 1.0)
        layer_levels = np.array([0.78, 0.5, 0.68, 0.45, 0.72], dtype=np.float32)
        layer_idx = np.minimum((frac * len(layer_levels)).astype(np.int32), len(layer_levels) - 1)
        band_img = np.where(in_band, layer_levels[layer_idx], 0.0).astype(np.float32)
        band_img += np.where(rows >= bottom[None, :], 0.3 * np.exp(-(rows - bottom[None, :]) / 18.0), 0.05)
        vox[:] = band_img[None, :, :]

        placed_boxes: list[tuple[float, float, float, float, float, float]] = []
        for class_id in range(1, classes + 1):
            ped_like = class_id == 3
            n_blobs = int(rng.integers(1, 4))
            for _ in range(n_blobs):
                for _attempt in range(50):
                    if ped_like:
                        ry = rng.uniform(0.06, 0.1) * height
                        rx = rng.uniform(0.12, 0.2) * width
                    else:
                        ry = rng.uniform(0.05, 0.09) * height
                        rx = rng.uniform(0.08, 0.16) * width
                    rz = min(rng.uniform(max(1.0, depth * 0.15), max(1.5, depth * 0.35)), depth)
                    cz = rng.uniform(0.0, max(depth - 1.0, 1e-6))  # blobs may clip at z edges
                    cx = rng.uniform(rx + 2, width - rx - 3)
                    if ped_like:
                        cy = float(bottom[int(cx)]) - ry * 0.4
                    else:
                        lo = float(top[int(cx)]) + ry + 2
                        hi = float(bottom[int(cx)]) - ry - 2
                        if hi <= lo:
                            continue
                        cy = rng.uniform(lo, hi)
                    box = (cz - rz, cz + rz, cy - ry, cy + ry, cx - rx, cx + rx)
                    clash = any(
                        box[0] < b[1] and box[1] > b[0] and box[2] < b[3] and box[3] > b[2] and box[4] < b[5] and box[5] > b[4]
                        for b in placed_boxes
                    )
                    if not clash:
                        break
                else:
                    continue
                placed_boxes.append(box)
                zz = np.arange(depth, dtype=np.float32)[:, None, None]
                yy = np.arange(height, dtype=np.float32)[None, :, None]
                xx = np.arange(width, dtype=np.float32)[None, None, :]
                inside = ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
                lab[inside] = class_id
                vox[inside] = 0.12

        speckle = rng.normal(1.0, 0.08, size=vox.shape).astype(np.float32)
        noise = rng.normal(0.0, 0.02, size=vox.shape).astype(np.float32)
        vox = np.clip(vox * speckle + noise, 0.0, 1.0)

        volumes.append(Volume(voxels=vox, spacing=spacing, vendor=vendor, volume_id=vid))
        masks.append(LabelMask(labels=lab, class_names=class_names, volume_id=vid, spacing=spacing, vendor=vendor))
        entries.append({
            "volume_id": vid,
            "vendor": vendor,
            "split": "train" if vi < n_train else "test",
            "paths": {"volume": f"{vid}_image.json", "mask": f"{vid}_labels.json"},
        })

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "shape": list(shape),
        "classes": {str(k): v for k, v in class_names.items()},
        "volumes": entries,
    }
    return SyntheticDataset(volumes=volumes, masks=masks, manifest=manifest)


def write_dataset(dataset: SyntheticDataset, out_dir: str) -> str:
    """Persist volumes, masks and manifest.json under out_dir; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    for vol, mask, entry in zip(dataset.volumes, dataset.masks, dataset.manifest["volumes"]):
        save_volume(vol, os.path.join(out_dir, entry["paths"]["volume"]))
        save_mask(mask, os.path.join(out_dir, entry["paths"]["mask"]))
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(dataset.manifest, f, indent=1, sort_keys=True)
    return manifest_path


def load_manifest(path: str) -> dict:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"missing manifest: {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version: {manifest.get('format_version')}")
    manifest["_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def load_dataset(manifest: dict, split: str | None = None) -> tuple[list[Volume], list[LabelMask]]:
    """Load (volume, mask) pairs listed in a manifest, optionally filtered by split."""
    base = manifest.get("_dir", ".")
    volumes, masks = [], []
    for entry in manifest["volumes"]:
        if split is not None and entry["split"] != split:
            continue
        volumes.append(load_volume(os.path.join(base, entry["paths"]["volume"])))
        masks.append(load_mask(os.path.join(base, entry["paths"]["mask"])))
    return volumes, masks
