"""Checkpoint archives: JSON manifest + named raw float32 tensors in a zip.

Tensor names match the parameter-audit report: model tensors use state_dict
names, adapter tensors use lora.blocks.{i}.{query|value}.{A|B}.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, FormatError
from .lora import ADAPTED_KINDS, LoraState
from .model.config import ModelConfig
from .model.core import PromptableSegModel, build_model

FORMAT_VERSION = 1


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()


def _named_tensors(model: PromptableSegModel | None, lora: LoraState | None):
    out: list[tuple[str, torch.Tensor]] = []
    if model is not None:
        out.extend(model.state_dict().items())
    if lora is not None:
        out.extend(lora.named_tensors())
    return out


def _write_archive(path: str, manifest: dict, tensors) -> str:
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = {name: list(t.shape) for name, t in tensors}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, t in tensors:
            zf.writestr(f"tensors/{name}", _tensor_bytes(t))
    return path


def _read_archive(path: str) -> tuple[dict, dict]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise FormatError(f"unreadable checkpoint archive {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise FormatError("checkpoint missing manifest.json")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported format_version: {manifest.get('format_version')}")
        tensors = {}
        for name, shape in manifest.get("tensors", {}).items():
            raw = zf.read(f"tensors/{name}")
            expected = int(np.prod(shape)) * 4
            if len(raw) != expected:
                raise FormatError(f"tensor {name}: {len(raw)} bytes, expected {expected}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return manifest, tensors


def save_checkpoint(path: str, model: PromptableSegModel, lora_state: LoraState | None = None,
                    regimen: str = "", step: int = 0) -> str:
    manifest = {
        "kind": "model",
        "model_config": model.config.to_dict(),
        "regimen": regimen,
        "step": step,
    }
    if lora_state is not None:
        manifest["lora"] = {
            "rank": lora_state.rank,
            "alpha": lora_state.alpha,
            "registry": [[b, k] for b, k in lora_state.registry],
        }
    return _write_archive(path, manifest, _named_tensors(model, lora_state))


def _lora_from_manifest(manifest: dict, tensors: dict) -> LoraState:
    meta = manifest["lora"]
    state = LoraState(rank=int(meta["rank"]), alpha=float(meta["alpha"]))
    for block, kind in meta["registry"]:
        block = int(block)
        if kind not in ADAPTED_KINDS:
            raise FormatError(f"unknown adapted projection kind: {kind}")
        try:
            a = tensors[f"lora.blocks.{block}.{kind}.A"]
            b = tensors[f"lora.blocks.{block}.{kind}.B"]
        except KeyError as exc:
            raise FormatError(f"lora tensor missing: {exc}") from exc
        state.tensors[(block, kind)] = (nn.Parameter(a.clone()), nn.Parameter(b.clone()))
    return state


def load_checkpoint(path: str) -> tuple[PromptableSegModel, LoraState | None, dict]:
    """Rebuild (model, lora_state, manifest) from an archive."""
    manifest, tensors = _read_archive(path)
    if manifest.get("kind") != "model":
        raise FormatError(f"kind mismatch: expected model, got {manifest.get('kind')}")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(config, seed=0)
    state = {n: t for n, t in tensors.items() if not n.startswith("lora.")}
    expected = set(model.state_dict().keys())
    if set(state.keys()) != expected:
        missing = sorted(expected - set(state))[:3]
        extra = sorted(set(state) - expected)[:3]
        raise FormatError(f"model tensor set mismatch (missing {missing}, extra {extra})")
    for name, t in model.state_dict().items():
        if tuple(state[name].shape) != tuple(t.shape):
            raise FormatError(f"tensor {name}: shape {tuple(state[name].shape)} != {tuple(t.shape)}")
    model.load_state_dict(state)
    lora = _lora_from_manifest(manifest, tensors) if "lora" in manifest else None
    return model, lora, manifest


def save_lora_checkpoint(path: str, lora_state: LoraState, config: ModelConfig,
                         regimen: str = "", step: int = 0) -> str:
    """Adapter-only archive, loadable onto a compatible base checkpoint."""
    manifest = {
        "kind": "lora",
        "model_config": config.to_dict(),
        "regimen": regimen,
        "step": step,
        "lora": {
            "rank": lora_state.rank,
            "alpha": lora_state.alpha,
            "registry": [[b, k] for b, k in lora_state.registry],
        },
    }
    return _write_archive(path, manifest, lora_state.named_tensors())


def load_lora_checkpoint(path: str, model: PromptableSegModel) -> LoraState:
    manifest, tensors = _read_archive(path)
    if manifest.get("kind") != "lora":
        raise FormatError(f"kind mismatch: expected lora, got {manifest.get('kind')}")
    if manifest["model_config"] != model.config.to_dict():
        raise FormatError("lora checkpoint was built for a different model config")
    state = _lora_from_manifest(manifest, tensors)
    dim = model.config.embed_dim
    for (block, kind), (a, b) in state.tensors.items():
        if block >= model.config.num_blocks:
            raise FormatError(f"registry block {block} out of range")
        if a.shape[1] != dim or b.shape[0] != dim:
            raise FormatError(f"lora.blocks.{block}.{kind} incompatible with embed_dim {dim}")
    return state


def model_version(path: str) -> str:
    """Short content digest identifying a checkpoint file."""
    h = hashlib.sha1()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:12]
