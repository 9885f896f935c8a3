"""Evaluation metrics: reconstruction distance, motion plausibility proxies,
label recovery, and the spectral class oracle for synthetic data.

The plausibility ("danceability") check substitutes three mechanical proxies
for the human judgment it approximates: bone-length stability, frame-to-frame
velocity continuity, and bounding-box containment. Thresholds can be
calibrated from percentiles of real windows; the report records them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .motiondata import Sequence


def _pose_array(item) -> np.ndarray:
    return item.poses if isinstance(item, Sequence) else np.asarray(item, dtype=np.float64)


def ajd(originals, reconstructions) -> float:
    """Average joint distance: mean 3D Euclidean error per joint, pose, sequence."""
    if len(originals) != len(reconstructions):
        raise PreconditionError(
            f"{len(originals)} originals vs {len(reconstructions)} reconstructions")
    total = 0.0
    count = 0
    for original, reconstruction in zip(originals, reconstructions):
        a = _pose_array(original)
        b = _pose_array(reconstruction)
        if a.shape != b.shape:
            raise PreconditionError(f"shape mismatch {a.shape} vs {b.shape}")
        distances = np.linalg.norm(a - b, axis=-1)
        total += distances.sum()
        count += distances.size
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# danceability proxies


@dataclass(frozen=True)
class DanceabilityThresholds:
    bone_rsd_max: float = 0.1      # relative std of each bone's length over time
    velocity_max: float = 0.3      # per-frame per-joint displacement, box units
    box_margin: float = 0.25       # allowed excursion outside the unit box

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DanceabilityReport:
    flags: list[dict]              # per sequence: the three booleans
    pass_rate: float
    thresholds: DanceabilityThresholds

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {
            "pass_rate": self.pass_rate,
            "thresholds": self.thresholds.to_dict(),
            "flags": self.flags,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path


def _bone_rsd(poses: np.ndarray, edges) -> float:
    worst = 0.0
    for a, b in edges:
        lengths = np.linalg.norm(poses[:, a] - poses[:, b], axis=-1)
        mean = lengths.mean()
        if mean < 1e-12:
            return np.inf
        worst = max(worst, float(lengths.std() / mean))
    return worst


def _max_step(poses: np.ndarray) -> float:
    if poses.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(poses, axis=0), axis=-1).max())


def danceability(sequences, skeleton_edges,
                 thresholds: DanceabilityThresholds | None = None) -> DanceabilityReport:
    thresholds = thresholds or DanceabilityThresholds()
    flags = []
    passed = 0
    for item in sequences:
        poses = _pose_array(item)
        bone_ok = _bone_rsd(poses, skeleton_edges) < thresholds.bone_rsd_max
        velocity_ok = _max_step(poses) < thresholds.velocity_max
        box_ok = bool(
            (poses >= -thresholds.box_margin).all()
            and (poses <= 1.0 + thresholds.box_margin).all()
        )
        flags.append({
            "bone_length_stable": bool(bone_ok),
            "velocity_continuous": bool(velocity_ok),
            "within_box": box_ok,
        })
        passed += bone_ok and velocity_ok and box_ok
    rate = passed / len(flags) if flags else 0.0
    return DanceabilityReport(flags=flags, pass_rate=rate, thresholds=thresholds)


def calibrate_thresholds(windows, skeleton_edges, percentile: float = 99.0,
                         multiplier: float = 2.0,
                         floors: DanceabilityThresholds | None = None) -> DanceabilityThresholds:
    """Thresholds from percentiles of real windows, scaled for headroom.

    The multiplier plus floors keep the proxies meaningful on near-rigid
    synthetic data while guaranteeing the calibration windows themselves
    pass at better than the chosen percentile.
    """
    floors = floors or DanceabilityThresholds(bone_rsd_max=0.02, velocity_max=0.05, box_margin=0.25)
    if not windows:
        raise PreconditionError("calibration needs at least one window")
    bone_stats = np.array([_bone_rsd(_pose_array(w), skeleton_edges) for w in windows])
    step_stats = np.array([_max_step(_pose_array(w)) for w in windows])
    return DanceabilityThresholds(
        bone_rsd_max=max(floors.bone_rsd_max, float(np.percentile(bone_stats, percentile)) * multiplier),
        velocity_max=max(floors.velocity_max, float(np.percentile(step_stats, percentile)) * multiplier),
        box_margin=floors.box_margin,
    )


def effort_recovery(generated_by_class: dict[int, list], oracle, k: int) -> np.ndarray:
    """Confusion matrix: rows = intended label, columns = oracle-recovered label."""
    confusion = np.zeros((k, k), dtype=np.int64)
    for intended, sequences in sorted(generated_by_class.items()):
        for item in sequences:
            confusion[intended, oracle(item)] += 1
    return confusion


def normalize_confusion(confusion: np.ndarray) -> np.ndarray:
    confusion = np.asarray(confusion, dtype=np.float64)
    sums = confusion.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = np.where(sums > 0, confusion / sums, 0.0)
    return normalized


# ---------------------------------------------------------------------------
# spectral class oracle


def dominant_frequency(item, fps: float) -> float:
    """Dominant temporal frequency (Hz) of the mean-centered joint trajectories."""
    poses = _pose_array(item)
    n = poses.shape[0]
    signal = poses.reshape(n, -1)
    signal = signal - signal.mean(axis=0, keepdims=True)
    spectrum = np.abs(np.fft.rfft(signal, axis=0)).sum(axis=1)
    spectrum[0] = 0.0  # drop any residual constant component
    return float(np.argmax(spectrum) * fps / n)


def spectral_oracle(fps: float, class_frequencies) -> "callable":
    """Classifier mapping a sequence to the class with the nearest frequency."""
    freqs = np.asarray(class_frequencies, dtype=np.float64)

    def classify(item) -> int:
        return int(np.argmin(np.abs(freqs - dominant_frequency(item, fps))))

    return classify
