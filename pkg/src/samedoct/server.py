"""HTTP prompting service: embed a B-scan once, answer many point/box prompts.

Sessions hold a volume and checkpoint reference; image embeddings are cached in
a shared LRU keyed by (volume_id, slice_index, model_version).
"""

from __future__ import annotations

import io
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import checkpoint as ckpt
from .data import Volume, load_volume, rle_encode
from .errors import SamedOctError, ValidationError
from .model.core import (
    ImageEmbedding,
    PromptableSegModel,
    decode_masks,
    encode_image,
    encode_prompts,
    logits_to_labels,
)
from .model.prompts import PromptSet

DEFAULT_CACHE_SIZE = 64


class SessionNotFoundError(SamedOctError):
    """Prompt or slice request against a session id that does not exist."""


class EmbeddingCache:
    """LRU over image embeddings; concurrent reads, exclusive insertion."""

    def __init__(self, capacity: int = DEFAULT_CACHE_SIZE):
        if capacity < 1:
            raise ValidationError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._store: OrderedDict[tuple, ImageEmbedding] = OrderedDict()
        self._lock = threading.Lock()

    def get_or_compute(self, key: tuple, compute) -> tuple[ImageEmbedding, bool]:
        with self._lock:
            if key in self._store:
                self._store.move_to_end(key)
                return self._store[key], True
        value = compute()  # compute outside the lock; identical recomputation is acceptable
        with self._lock:
            self._store[key] = value
            self._store.move_to_end(key)
            while len(self._store) > self.capacity:
                self._store.popitem(last=False)
        return value, False

    def __len__(self) -> int:
        return len(self._store)


@dataclass
class Session:
    session_id: str
    volume: Volume
    model: PromptableSegModel
    lora_state: object | None
    model_version: str
    prompt_history: dict[int, list[dict]] = field(default_factory=dict)


class SessionRequest(BaseModel):
    volume_path: str
    checkpoint: str


class PromptRequestBody(BaseModel):
    session_id: str | None = None
    slice_index: int
    class_id: int
    points: list[dict] = []
    box: list[float] | None = None


def get_or_compute_embedding(session: Session, slice_index: int,
                             cache: EmbeddingCache) -> tuple[ImageEmbedding, bool]:
    depth = session.volume.voxels.shape[0]
    if not (0 <= slice_index < depth):
        raise ValidationError(f"slice {slice_index} outside [0, {depth})")
    key = (session.volume.volume_id, slice_index, session.model_version)

    def compute() -> ImageEmbedding:
        return encode_image(session.model, session.volume.voxels[slice_index],
                            session.lora_state, provenance=key)

    return cache.get_or_compute(key, compute)


def handle_prompt(session: Session, body: PromptRequestBody, cache: EmbeddingCache) -> dict:
    """embedding -> prompt tokens -> logits -> binary mask for the requested class."""
    started = time.perf_counter()
    n_classes = session.model.config.num_classes
    if not (1 <= body.class_id <= n_classes):
        raise ValidationError(f"class_id must be in [1, {n_classes}], got {body.class_id}")
    prompts = PromptSet.from_dict({"points": body.points, "box": body.box})
    prompts.validate(session.model.config.input_size)
    embedding, cache_hit = get_or_compute_embedding(session, body.slice_index, cache)
    sparse, dense = encode_prompts(session.model, prompts)
    logits = decode_masks(session.model, embedding, sparse, dense)
    labels = logits_to_labels(logits, session.model.config.logit_downsample)
    mask = rle_encode(labels, body.class_id)
    history = session.prompt_history.setdefault(body.slice_index, [])
    history.append({"points": body.points, "box": body.box, "class_id": body.class_id})
    stats = logits.tensor.detach()
    return {
        "mask": mask.to_dict(),
        "logit_stats": {"min": float(stats.min()), "max": float(stats.max())},
        "latency_ms": (time.perf_counter() - started) * 1000.0,
        "cache_hit": cache_hit,
    }


def create_app(cache_size: int = DEFAULT_CACHE_SIZE) -> FastAPI:
    app = FastAPI(title="samedoct prompting service")
    app.state.cache = EmbeddingCache(cache_size)
    app.state.sessions = {}
    app.state.models = {}  # checkpoint path -> (model, lora_state, version)
    lock = threading.Lock()

    @app.exception_handler(SamedOctError)
    async def package_error(request: Request, exc: SamedOctError):
        status = 404 if isinstance(exc, SessionNotFoundError) else 400
        return JSONResponse(status_code=status,
                            content={"error": type(exc).__name__, "detail": str(exc)})

    def _load_model(path: str):
        with lock:
            if path not in app.state.models:
                model, lora_state, _ = ckpt.load_checkpoint(path)
                app.state.models[path] = (model, lora_state, ckpt.model_version(path))
            return app.state.models[path]

    def _session(session_id: str) -> Session:
        session = app.state.sessions.get(session_id)
        if session is None:
            raise SessionNotFoundError(f"unknown session: {session_id}")
        return session

    @app.post("/sessions")
    def create_session(body: SessionRequest):
        volume = load_volume(body.volume_path)
        model, lora_state, version = _load_model(body.checkpoint)
        size = model.config.input_size
        if volume.voxels.shape[1:] != (size, size):
            raise ValidationError(
                f"volume in-plane shape {volume.voxels.shape[1:]} != model input ({size}, {size})")
        session = Session(session_id=uuid.uuid4().hex, volume=volume, model=model,
                          lora_state=lora_state, model_version=version)
        app.state.sessions[session.session_id] = session
        return {"session_id": session.session_id,
                "num_slices": int(volume.voxels.shape[0]),
                "num_classes": model.config.num_classes,
                "model_version": version}

    @app.get("/sessions/{session_id}/slices/{slice_index}")
    def get_slice(session_id: str, slice_index: int):
        from PIL import Image

        session = _session(session_id)
        depth = session.volume.voxels.shape[0]
        if not (0 <= slice_index < depth):
            raise ValidationError(f"slice {slice_index} outside [0, {depth})")
        arr = np.clip(session.volume.voxels[slice_index] * 255.0, 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/sessions/{session_id}/prompt")
    def prompt(session_id: str, body: PromptRequestBody):
        if body.session_id is not None and body.session_id != session_id:
            raise ValidationError("body session_id does not match the path")
        session = _session(session_id)
        return handle_prompt(session, body, app.state.cache)

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        _session(session_id)
        del app.state.sessions[session_id]
        return {"deleted": session_id}

    return app
