"""Keypoint motion datasets: loading, normalization, windowing, splits.

A pose is a (J, 3) float64 array of joint coordinates; clips store frames
as one (n, J, 3) array made read-only at construction so windows can be
cheap views. Normalization has two stages: an optional per-frame (x, y)
barycenter fix (a canonicalization, not invertible) followed by a single
affine unit-box map whose apply/invert round-trips exactly.

File formats:

* CSV - one row per frame, header ``j0x,j0y,j0z,...``, one clip per file.
* JSON - array of clip objects ``{id, fps, frames, skeleton?}``.
* raw binary - little-endian: magic ``ESMC``, J (u32), frame count (u32),
  fps (f32), then frames * J * 3 float32 coordinates.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore.rng import RngStream
from .errors import (
    DegenerateExtentError,
    InsufficientDataError,
    ParseError,
    PreconditionError,
    SchemaError,
)

BINARY_MAGIC = b"ESMC"

# Where the per-frame (x, y) barycenter is pinned after canonicalization.
BARYCENTER_POINT = (0.5, 0.5)


def _freeze(frames: np.ndarray) -> np.ndarray:
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    frames.setflags(write=False)
    return frames


@dataclass(frozen=True)
class MotionClip:
    """One uninterrupted recording: (n, J, 3) frames at a fixed rate."""

    id: str
    fps: float
    frames: np.ndarray
    skeleton: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        frames = _freeze(self.frames)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise SchemaError(f"clip {self.id!r}: frames must be (n, J, 3), got {frames.shape}")
        if self.fps <= 0:
            raise SchemaError(f"clip {self.id!r}: fps must be positive")
        if not np.all(np.isfinite(frames)):
            raise SchemaError(f"clip {self.id!r}: non-finite coordinates")
        if self.skeleton is not None:
            edges = tuple((int(a), int(b)) for a, b in self.skeleton)
            for a, b in edges:
                if not (0 <= a < self.n_joints and 0 <= b < self.n_joints):
                    raise SchemaError(f"clip {self.id!r}: skeleton edge ({a},{b}) out of range")
            object.__setattr__(self, "skeleton", edges)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Sequence:
    """T consecutive poses cut from a single clip (never spans clips)."""

    clip_id: str
    start_frame: int
    poses: np.ndarray  # (T, J, 3), read-only view into the clip

    @property
    def length(self) -> int:
        return self.poses.shape[0]

    @property
    def window_id(self) -> str:
        return f"{self.clip_id}:{self.start_frame}"


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine unit-box map ``p' = (p - offset) * scale`` plus barycenter mode."""

    scale: float
    offset: np.ndarray  # (3,)
    barycenter_mode: str = "fixed-xy"  # or "none"

    def __post_init__(self):
        if self.scale <= 0:
            raise PreconditionError("normalization scale must be positive")
        if self.barycenter_mode not in ("fixed-xy", "none"):
            raise PreconditionError(f"unknown barycenter mode {self.barycenter_mode!r}")
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "offset": self.offset.tolist(),
            "barycenter_mode": self.barycenter_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(scale=d["scale"], offset=np.asarray(d["offset"]), barycenter_mode=d["barycenter_mode"])


# ---------------------------------------------------------------------------
# loading


def _load_csv_clip(path: Path, fps: float) -> MotionClip:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) == 0 or len(header) % 3 != 0:
            raise ParseError(f"{path}: header has {len(header)} columns, expected a multiple of 3")
        n_cols = len(header)
        expected = [f"j{j}{axis}" for j in range(n_cols // 3) for axis in "xyz"]
        if header != expected:
            raise ParseError(f"{path}: unexpected header (want j0x,j0y,j0z,...)")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise SchemaError(f"{path}:{lineno}: {len(row)} columns, expected {n_cols}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no frames")
    frames = np.asarray(rows, dtype=np.float64).reshape(len(rows), n_cols // 3, 3)
    return MotionClip(id=path.stem, fps=fps, frames=frames)


def _load_json_clips(path: Path) -> list[MotionClip]:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if isinstance(payload, dict) and "clips" in payload:
        payload = payload["clips"]
    if not isinstance(payload, list) or not payload:
        raise ParseError(f"{path}: expected a non-empty array of clips")
    clips = []
    for i, entry in enumerate(payload):
        try:
            frames = np.asarray(entry["frames"], dtype=np.float64)
            skeleton = entry.get("skeleton")
            clips.append(
                MotionClip(
                    id=str(entry.get("id", f"{path.stem}-{i}")),
                    fps=float(entry.get("fps", 0.0)) or float(entry["fps"]),
                    frames=frames,
                    skeleton=tuple(map(tuple, skeleton)) if skeleton else None,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: clip {i}: {exc}") from None
    return clips


def _load_binary_clip(path: Path) -> MotionClip:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != BINARY_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    n_joints, n_frames = struct.unpack_from("<II", raw, 4)
    (fps,) = struct.unpack_from("<f", raw, 12)
    expected = 16 + n_frames * n_joints * 3 * 4
    if len(raw) != expected:
        raise ParseError(f"{path}: {len(raw)} bytes, expected {expected} at offset 16")
    data = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64)
    frames = data.reshape(n_frames, n_joints, 3)
    return MotionClip(id=path.stem, fps=float(fps), frames=frames)


def save_binary_clip(path: str | Path, clip: MotionClip) -> Path:
    path = Path(path)
    header = BINARY_MAGIC + struct.pack("<IIf", clip.n_joints, clip.n_frames, clip.fps)
    body = np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + body)
    return path


def load_clips(path: str | Path, format: str, fps: float = 25.0) -> list[MotionClip]:
    """Load motion clips from a file or a directory of files, in file order.

    ``fps`` is only used for CSV, which carries no rate metadata.
    """
    path = Path(path)
    if path.is_dir():
        suffix = {"csv": ".csv", "json": ".json", "raw-binary": ".bin"}[format]
        files = sorted(p for p in path.iterdir() if p.suffix == suffix)
        if not files:
            raise ParseError(f"{path}: no {suffix} files")
    else:
        files = [path]
    clips: list[MotionClip] = []
    for file in files:
        if format == "csv":
            clips.append(_load_csv_clip(file, fps))
        elif format == "json":
            clips.extend(_load_json_clips(file))
        elif format == "raw-binary":
            clips.append(_load_binary_clip(file))
        else:
            raise PreconditionError(f"unknown format {format!r}")
    return clips


def save_csv_clip(path: str | Path, clip: MotionClip) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"j{j}{axis}" for j in range(clip.n_joints) for axis in "xyz"])
        for frame in clip.frames:
            writer.writerow([repr(float(v)) for v in frame.reshape(-1)])
    return path


# ---------------------------------------------------------------------------
# normalization


def fix_barycenter(clip: MotionClip) -> MotionClip:
    """Pin each frame's (x, y) joint barycenter to the canonical point."""
    frames = clip.frames.copy()
    bary = frames[:, :, :2].mean(axis=1, keepdims=True)
    frames[:, :, :2] += np.asarray(BARYCENTER_POINT) - bary
    return replace(clip, frames=frames)


def fit_normalization(clips: list[MotionClip], barycenter_mode: str = "fixed-xy") -> NormalizationSpec:
    """Fit one affine unit-box map over all clips (relative sizes preserved)."""
    if not clips:
        raise PreconditionError("cannot fit normalization on an empty clip list")
    staged = [fix_barycenter(c) if barycenter_mode == "fixed-xy" else c for c in clips]
    stacked = np.concatenate([c.frames.reshape(-1, 3) for c in staged], axis=0)
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise DegenerateExtentError("all coordinates identical; unit-box scale undefined")
    return NormalizationSpec(scale=1.0 / extent, offset=lo, barycenter_mode=barycenter_mode)


def apply_normalization(clip: MotionClip, spec: NormalizationSpec) -> MotionClip:
    if spec.barycenter_mode == "fixed-xy":
        clip = fix_barycenter(clip)
    frames = (clip.frames - spec.offset) * spec.scale
    return replace(clip, frames=frames)


def invert_normalization(clip: MotionClip, spec: NormalizationSpec) -> MotionClip:
    """Invert the affine stage (the barycenter fix is a lossy canonicalization)."""
    frames = clip.frames / spec.scale + spec.offset
    return replace(clip, frames=frames)


def normalize(clip: MotionClip, spec: NormalizationSpec | None = None,
              barycenter_mode: str = "fixed-xy") -> tuple[MotionClip, NormalizationSpec]:
    """Map a clip into the unit box; returns the clip and the spec that inverts it."""
    if clip.n_frames == 0:
        raise PreconditionError("cannot normalize an empty clip")
    if spec is None:
        spec = fit_normalization([clip], barycenter_mode)
    return apply_normalization(clip, spec), spec


# ---------------------------------------------------------------------------
# windowing and splits


def window_count(n_frames: int, length: int, stride: int) -> int:
    if n_frames < length:
        return 0
    return (n_frames - length) // stride + 1


def extract_windows(clips: list[MotionClip], length: int, stride: int = 1) -> list[Sequence]:
    """Sliding windows per clip; windows never span clip boundaries."""
    if length < 2:
        raise PreconditionError("window length must be at least 2")
    if stride < 1:
        raise PreconditionError("stride must be at least 1")
    windows: list[Sequence] = []
    for clip in clips:
        for i in range(window_count(clip.n_frames, length, stride)):
            start = i * stride
            windows.append(Sequence(clip.id, start, clip.frames[start : start + length]))
    return windows


LABELED_PARTS = ("labeled_train", "labeled_val", "labeled_test")
UNLABELED_PARTS = ("unlabeled_train", "unlabeled_val", "unlabeled_test")


@dataclass
class SplitAssignment:
    """Disjoint window-id partitions, persisted as JSON {window_id: partition}."""

    assignment: dict[str, str]
    seed: int
    labeled_fractions: tuple[float, float, float]
    unlabeled_fractions: tuple[float, float, float]

    def ids(self, partition: str) -> list[str]:
        return [wid for wid, part in self.assignment.items() if part == partition]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for part in self.assignment.values():
            out[part] = out.get(part, 0) + 1
        return out

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "seed": self.seed,
            "labeled_fractions": list(self.labeled_fractions),
            "unlabeled_fractions": list(self.unlabeled_fractions),
            "assignment": self.assignment,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path: str | Path) -> "SplitAssignment":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            assignment=payload["assignment"],
            seed=payload["seed"],
            labeled_fractions=tuple(payload["labeled_fractions"]),
            unlabeled_fractions=tuple(payload["unlabeled_fractions"]),
        )


def _assign_pool(ids: list[str], fractions: tuple[float, float, float], parts: tuple[str, ...],
                 rng: RngStream, assignment: dict[str, str]) -> None:
    if not ids:
        return  # nothing to partition; nonzero fractions only matter for non-empty pools
    order = [ids[i] for i in rng.permutation(len(ids))]
    cursor = 0
    for frac, part in zip(fractions, parts):
        count = int(np.floor(frac * len(ids)))
        if frac > 0.0 and count == 0:
            raise InsufficientDataError(
                f"{part}: fraction {frac} of {len(ids)} windows yields zero items"
            )
        for wid in order[cursor : cursor + count]:
            assignment[wid] = part
        cursor += count
    for wid in order[cursor:]:
        assignment[wid] = "unassigned"


def split(
    sequences: list[Sequence],
    labeled_ids: set[str],
    labeled_fractions: tuple[float, float, float] = (0.79, 0.05, 0.03),
    unlabeled_fractions: tuple[float, float, float] = (0.97, 0.0, 0.03),
    seed: int = 0,
) -> SplitAssignment:
    """Deterministically partition labeled and unlabeled pools into train/val/test.

    ``labeled_ids`` holds the window ids present in the label table; every
    other window belongs to the unlabeled pool. Fractions are floored, any
    remainder is left ``unassigned``.
    """
    for fracs in (labeled_fractions, unlabeled_fractions):
        if any(f < 0 or f > 1 for f in fracs):
            raise PreconditionError("fractions must lie in [0, 1]")
        if sum(fracs) > 1.0 + 1e-12:
            raise PreconditionError("fractions must sum to at most 1")
    ordered = sorted(sequences, key=lambda s: (s.clip_id, s.start_frame))
    labeled = [s.window_id for s in ordered if s.window_id in labeled_ids]
    unlabeled = [s.window_id for s in ordered if s.window_id not in labeled_ids]
    rng = RngStream(seed)
    assignment: dict[str, str] = {}
    _assign_pool(labeled, labeled_fractions, LABELED_PARTS, rng, assignment)
    _assign_pool(unlabeled, unlabeled_fractions, UNLABELED_PARTS, rng, assignment)
    return SplitAssignment(
        assignment=assignment,
        seed=seed,
        labeled_fractions=tuple(labeled_fractions),
        unlabeled_fractions=tuple(unlabeled_fractions),
    )


# ---------------------------------------------------------------------------
# synthetic data


def synth_class_frequencies(k: int, fps: float, window: int) -> list[float]:
    """Class frequencies in Hz, placed on distinct FFT bins of a window.

    Strictly increasing in the class index, preferring two-bin spacing from
    bin 2 upward (compressed when the window is short) so a window-length
    spectrum separates the classes cleanly while staying well below Nyquist.
    """
    top = max(3, window // 2 - 2)
    bins = np.linspace(2, min(2 + 2 * (k - 1), top), k)
    return [float(b * fps / window) for b in bins]


def synth_dataset(
    n_clips: int,
    frames_per_clip: int,
    n_joints: int,
    k: int,
    seed: int,
    window: int = 20,
    stride: int = 1,
    fps: float = 25.0,
    jitter: float = 0.003,
):
    """Desk-scale oscillating kinematic chain with per-clip class labels.

    Each clip swings a chain of fixed-length bones at its class's angular
    frequency (strictly increasing with the class index), so classes are
    separable by motion dynamics alone. Returns the clips plus a ground-truth
    label table covering every window start.

    Returns (clips, label_table); import is deferred to avoid a cycle.
    """
    from .labels import EffortLabel, LabelRecord, LabelTable, SYNTH_TIMESTAMP

    if k < 2:
        raise PreconditionError("synthetic dataset needs at least 2 classes")
    if n_joints < 2:
        raise PreconditionError("the kinematic chain needs at least 2 joints")
    rng = RngStream(seed)
    freqs = synth_class_frequencies(k, fps, window)
    bone = 1.0 / n_joints
    edges = tuple((j, j + 1) for j in range(n_joints - 1))
    t = np.arange(frames_per_clip) / fps

    clips: list[MotionClip] = []
    records = []
    for c in range(n_clips):
        label = c % k
        f_hz = freqs[label]
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        slow_phase = float(rng.uniform(0.0, 2.0 * np.pi))
        # Faster classes swing with less amplitude, like real urgent motion;
        # this also keeps per-frame displacements comparable across classes.
        amp = float(rng.uniform(0.35, 0.5)) * float(np.sqrt(freqs[0] / f_hz))
        azimuth0 = rng.uniform(-np.pi, np.pi, (n_joints - 1,))
        # Amplitude breathes slowly (0.2 Hz) so windows differ beyond phase.
        envelope = 1.0 + 0.25 * np.sin(2.0 * np.pi * 0.2 * t + slow_phase)
        carrier = 2.0 * np.pi * f_hz * t
        positions = np.zeros((frames_per_clip, n_joints, 3))
        for j in range(n_joints - 1):
            swing = amp * envelope * np.sin(carrier + phase + 0.8 * j)
            polar = 0.35 + swing  # tilt away from vertical
            azimuth = azimuth0[j] + 0.6 * amp * envelope * np.sin(carrier + phase + 0.8 * j + np.pi / 2)
            direction = np.stack(
                [
                    np.sin(polar) * np.cos(azimuth),
                    np.sin(polar) * np.sin(azimuth),
                    np.cos(polar),
                ],
                axis=-1,
            )
            positions[:, j + 1] = positions[:, j] + bone * direction
        positions += jitter * rng.normal(positions.shape)
        clip_id = f"synth-{c:03d}"
        clips.append(MotionClip(id=clip_id, fps=fps, frames=positions, skeleton=edges))
        for i in range(window_count(frames_per_clip, window, stride)):
            records.append(
                LabelRecord(
                    clip_id=clip_id,
                    start_frame=i * stride,
                    seq_len=window,
                    label=EffortLabel(label, k),
                    source="manual",
                    created_at=SYNTH_TIMESTAMP,
                )
            )
    table = LabelTable.from_records(records, k=k)
    return clips, table
