"""HTTP JSON API backing the studio UI.

Endpoints: dataset info, raw sequence frames, label persistence, and
conditional generation against a loaded checkpoint. Every response carries a
``schema_version`` field. Label writes are serialized by the store's writer
lock; generation requests queue FIFO behind a single model evaluation at a
time. The dataset is immutable while serving.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .diffcore import RngStream, checkpoint_sha256
from .errors import ConflictError
from .generator import LatentAtlas, build_atlas, generation_manifest, sample_conditional
from .labels import EffortLabel, LabelRecord, LabelStore, class_histogram, now_iso
from .model import Model
from .motiondata import MotionClip, window_count

SCHEMA_VERSION = "1"


@dataclass
class SessionState:
    """Everything one serving process needs; dataset fields never change."""

    clips: dict[str, MotionClip]
    store: LabelStore
    k: int
    class_names: tuple[str, ...]
    window: int
    stride: int = 1
    model: Optional[Model] = None
    atlas: Optional[LatentAtlas] = None
    checkpoint_hash: Optional[str] = None
    generation_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def fps(self) -> float:
        return next(iter(self.clips.values())).fps if self.clips else 0.0

    @property
    def skeleton(self) -> list[list[int]]:
        for clip in self.clips.values():
            if clip.skeleton:
                return [list(edge) for edge in clip.skeleton]
        return []

    def total_windows(self) -> int:
        return sum(window_count(c.n_frames, self.window, self.stride)
                   for c in self.clips.values())


class LabelBody(BaseModel):
    clip: str
    start: int
    len: int
    label: int
    overwrite: bool = False


class GenerateBody(BaseModel):
    label: int
    count: int
    seed: Optional[int] = None
    mode: str = "gaussian"


def _payload(body: dict, status: int = 200) -> JSONResponse:
    body["schema_version"] = SCHEMA_VERSION
    return JSONResponse(body, status_code=status)


def _error(status: int, message: str) -> JSONResponse:
    return _payload({"error": message}, status)


def _frames_payload(frames) -> list:
    return [[[float(v) for v in joint] for joint in pose] for pose in frames]


def create_app(state: SessionState) -> FastAPI:
    app = FastAPI(title="effortstudio service")

    @app.get("/api/dataset/info")
    def dataset_info():
        if not state.clips:
            return _error(503, "no dataset loaded")
        hist = class_histogram(state.store.table)
        any_clip = next(iter(state.clips.values()))
        return _payload({
            "clips": len(state.clips),
            "clip_ids": sorted(state.clips),
            "frames": sum(c.n_frames for c in state.clips.values()),
            "joints": any_clip.n_joints,
            "fps": state.fps,
            "window": state.window,
            "stride": state.stride,
            "window_count": state.total_windows(),
            "k": state.k,
            "class_names": list(state.class_names),
            "skeleton": state.skeleton,
            "model_loaded": state.model is not None,
            "label_stats": {
                "total": len(state.store.table),
                "counts": list(hist.counts),
                "fractions": list(hist.fractions) if hist.fractions else None,
                "sources": state.store.table.source_counts(),
            },
        })

    @app.get("/api/sequence")
    def sequence(clip: str = Query(...), start: int = Query(...), len_: int = Query(..., alias="len")):
        if not state.clips:
            return _error(503, "no dataset loaded")
        if clip not in state.clips:
            return _error(404, f"unknown clip {clip!r}")
        motion = state.clips[clip]
        if len_ < 1 or start < 0 or start + len_ > motion.n_frames:
            return _error(416, f"window [{start}, {start + len_}) outside clip of "
                               f"{motion.n_frames} frames")
        record = state.store.table.get(clip, start)
        return _payload({
            "clip": clip,
            "start": start,
            "len": len_,
            "fps": motion.fps,
            "skeleton": [list(e) for e in (motion.skeleton or ())],
            "frames": _frames_payload(motion.frames[start : start + len_]),
            "label": record.label.value if record else None,
            "label_source": record.source if record else None,
        })

    @app.post("/api/label")
    def save_label(body: LabelBody):
        if not state.clips:
            return _error(503, "no dataset loaded")
        if body.clip not in state.clips:
            return _error(404, f"unknown clip {body.clip!r}")
        if not 0 <= body.label < state.k:
            return _error(400, f"label {body.label} outside [0, {state.k})")
        motion = state.clips[body.clip]
        if body.len < 1 or body.start < 0 or body.start + body.len > motion.n_frames:
            return _error(416, "window out of range")
        existed = state.store.table.get(body.clip, body.start) is not None
        record = LabelRecord(
            clip_id=body.clip,
            start_frame=body.start,
            seq_len=body.len,
            label=EffortLabel(body.label, state.k),
            source="manual",
            created_at=now_iso(),
        )
        try:
            state.store.append(record, overwrite=body.overwrite)
        except ConflictError as exc:
            return _error(409, str(exc))
        stored = state.store.table.get(body.clip, body.start)
        return _payload({
            "record": {
                "clip": stored.clip_id,
                "start": stored.start_frame,
                "len": stored.seq_len,
                "label": stored.label.value,
                "source": stored.source,
                "created_at": stored.created_at,
            },
            "total_labels": len(state.store.table),
        }, status=200 if existed else 201)

    @app.post("/api/generate")
    def generate(body: GenerateBody):
        if state.model is None or state.atlas is None:
            return _error(503, "no checkpoint loaded")
        if not 0 <= body.label < state.k:
            return _error(400, f"label {body.label} outside [0, {state.k})")
        if body.count < 0:
            return _error(400, "count must be nonnegative")
        seed = body.seed if body.seed is not None else 0
        with state.generation_lock:  # FIFO: one model evaluation at a time
            sequences = sample_conditional(
                state.atlas, state.model, body.label, body.count,
                RngStream(seed), mode=body.mode)
        manifest = generation_manifest(body.label, body.count, seed, state.atlas,
                                       state.checkpoint_hash or "unloaded", body.mode)
        return _payload({
            "manifest": manifest,
            "fps": state.fps,
            "skeleton": state.skeleton,
            "sequences": [
                {"clip": seq.clip_id, "start": 0, "len": seq.length,
                 "frames": _frames_payload(seq.poses)}
                for seq in sequences
            ],
        })

    @app.exception_handler(Exception)
    async def unhandled(request: Request, exc: Exception):
        return _error(500, f"{type(exc).__name__}: {exc}")

    static_dir = Path(__file__).parent / "static"
    if static_dir.is_dir():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="studio")

    return app


def load_session(dataset_dir: str | Path, labels_path: str | Path,
                 checkpoint: str | Path | None = None,
                 atlas_path: str | Path | None = None) -> SessionState:
    """Assemble serving state from an ingest cache, a label CSV, and an
    optional checkpoint (atlas loaded from disk or rebuilt from labels)."""
    from .cli import load_dataset_dir  # late import; cli owns the cache layout
    from .labels import default_class_names

    clips, meta = load_dataset_dir(dataset_dir)
    k = meta["k"]
    names = meta.get("class_names")
    store = LabelStore(labels_path, k=k)
    state = SessionState(
        clips={c.id: c for c in clips},
        store=store,
        k=k,
        class_names=tuple(names) if names else default_class_names(k),
        window=meta["window"],
        stride=meta.get("stride", 1),
    )
    if checkpoint is not None:
        from .model import load_model
        from .motiondata import extract_windows

        model, _ = load_model(checkpoint)
        state.model = model
        state.checkpoint_hash = checkpoint_sha256(checkpoint)
        if atlas_path is not None and Path(atlas_path).exists():
            state.atlas = LatentAtlas.load(atlas_path)
        else:
            windows = extract_windows(clips, state.window, state.stride)
            pairs = []
            for w in windows:
                record = store.table.get(w.clip_id, w.start_frame)
                if record is not None:
                    pairs.append((w, record.label.value))
            state.atlas = build_atlas(model, pairs)
    return state


def run_server(state: SessionState, host: str = "127.0.0.1", port: int = 8600):
    import uvicorn

    uvicorn.run(create_app(state), host=host, port=port, log_level="info")
