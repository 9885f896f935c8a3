import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effortstudio.diffcore import RngStream
from effortstudio.errors import (
    DegenerateExtentError,
    InsufficientDataError,
    ParseError,
    PreconditionError,
)
from effortstudio.metrics import spectral_oracle
from effortstudio.motiondata import (
    BARYCENTER_POINT,
    MotionClip,
    NormalizationSpec,
    SplitAssignment,
    apply_normalization,
    extract_windows,
    fit_normalization,
    fix_barycenter,
    invert_normalization,
    load_clips,
    normalize,
    save_binary_clip,
    save_csv_clip,
    split,
    synth_class_frequencies,
    synth_dataset,
    window_count,
)


def make_clip(n_frames=30, n_joints=4, seed=0, clip_id="clip"):
    rng = RngStream(seed)
    frames = rng.normal((n_frames, n_joints, 3))
    return MotionClip(id=clip_id, fps=25.0, frames=frames)


# ---------------------------------------------------------------------------
# loading


def test_csv_roundtrip_shape(tmp_path):
    clip = make_clip(n_frames=100, n_joints=53, clip_id="dance")
    path = save_csv_clip(tmp_path / "dance.csv", clip)
    (loaded,) = load_clips(path, "csv", fps=35.0)
    assert loaded.n_frames == 100
    assert loaded.n_joints == 53
    assert loaded.fps == 35.0
    np.testing.assert_allclose(loaded.frames, clip.frames, rtol=0, atol=0)


def test_empty_csv_is_a_parse_error(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ParseError):
        load_clips(path, "csv")


def test_json_clips_preserve_counts(tmp_path):
    payload = [
        {"id": "a", "fps": 30.0, "frames": np.zeros((40, 3, 3)).tolist()},
        {"id": "b", "fps": 30.0, "frames": np.ones((60, 3, 3)).tolist(),
         "skeleton": [[0, 1], [1, 2]]},
    ]
    path = tmp_path / "clips.json"
    path.write_text(json.dumps(payload))
    clips = load_clips(path, "json")
    assert [c.id for c in clips] == ["a", "b"]
    assert sum(c.n_frames for c in clips) == 100
    assert clips[1].skeleton == ((0, 1), (1, 2))


def test_binary_roundtrip(tmp_path):
    clip = make_clip(n_frames=17, n_joints=5, seed=3, clip_id="bin")
    path = save_binary_clip(tmp_path / "bin.bin", clip)
    (loaded,) = load_clips(path, "raw-binary")
    assert loaded.fps == pytest.approx(25.0)
    # float32 on disk: exact after the same round trip.
    np.testing.assert_allclose(loaded.frames, clip.frames.astype(np.float32), rtol=0, atol=0)


def test_binary_rejects_truncation(tmp_path):
    clip = make_clip(n_frames=4, n_joints=2)
    path = save_binary_clip(tmp_path / "t.bin", clip)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError):
        load_clips(path, "raw-binary")


def test_directory_loading_is_file_ordered(tmp_path):
    for name in ("b", "a", "c"):
        save_csv_clip(tmp_path / f"{name}.csv", make_clip(clip_id=name, n_frames=5))
    clips = load_clips(tmp_path, "csv")
    assert [c.id for c in clips] == ["a", "b", "c"]


# ---------------------------------------------------------------------------
# normalization


def test_normalize_scales_symmetric_span():
    rng = RngStream(1)
    frames = rng.uniform(-2.0, 2.0, (50, 6, 3))
    # Pin the exact extremes so the span is [-2, 2] on every axis.
    frames[0, 0] = (-2.0, -2.0, -2.0)
    frames[1, 0] = (2.0, 2.0, 2.0)
    clip = MotionClip(id="c", fps=25.0, frames=frames)
    normalized, spec = normalize(clip, barycenter_mode="none")
    assert spec.scale == pytest.approx(0.25)
    assert normalized.frames.min() == pytest.approx(0.0)
    assert normalized.frames.max() == pytest.approx(1.0)


def test_normalize_unit_box_is_identity_under_mode_none():
    rng = RngStream(2)
    frames = rng.uniform(0.0, 1.0, (40, 4, 3))
    frames[0, 0] = (0.0, 0.0, 0.0)
    frames[1, 0] = (1.0, 1.0, 1.0)
    clip = MotionClip(id="c", fps=25.0, frames=frames)
    normalized, spec = normalize(clip, barycenter_mode="none")
    assert spec.scale == pytest.approx(1.0)
    np.testing.assert_allclose(spec.offset, np.zeros(3), atol=0)
    np.testing.assert_allclose(normalized.frames, clip.frames, atol=1e-15)


def test_barycenter_fixed_after_normalization():
    # Oracle: recompute the per-frame xy barycenter on the output.
    rng = RngStream(3)
    frames = rng.normal((60, 5, 3))
    frames[:, :, 0] += np.linspace(0.0, 0.3, 60)[:, None]  # drifting +x
    clip = MotionClip(id="drift", fps=25.0, frames=frames)
    normalized, _ = normalize(clip, barycenter_mode="fixed-xy")
    bary = normalized.frames[:, :, :2].mean(axis=1)
    assert np.ptp(bary[:, 0]) < 1e-9
    assert np.ptp(bary[:, 1]) < 1e-9


def test_normalize_then_invert_is_identity():
    for seed in range(5):
        clip = make_clip(seed=seed)
        normalized, spec = normalize(clip, barycenter_mode="none")
        restored = invert_normalization(normalized, spec)
        np.testing.assert_allclose(restored.frames, clip.frames, atol=1e-9)
        # With the barycenter stage, inversion recovers the canonicalized clip.
        normalized, spec = normalize(clip, barycenter_mode="fixed-xy")
        restored = invert_normalization(normalized, spec)
        np.testing.assert_allclose(restored.frames, fix_barycenter(clip).frames, atol=1e-9)


def test_spec_roundtrip_dict():
    spec = NormalizationSpec(scale=0.5, offset=np.array([1.0, 2.0, 3.0]),
                             barycenter_mode="none")
    again = NormalizationSpec.from_dict(spec.to_dict())
    assert again.scale == spec.scale
    np.testing.assert_array_equal(again.offset, spec.offset)


def test_degenerate_extent_raises():
    clip = MotionClip(id="flat", fps=25.0, frames=np.full((10, 3, 3), 0.7))
    with pytest.raises(DegenerateExtentError):
        fit_normalization([clip], barycenter_mode="none")


def test_global_normalization_preserves_relative_sizes():
    small = MotionClip(id="s", fps=25.0, frames=np.linspace(0, 0.1, 90).reshape(10, 3, 3))
    large = MotionClip(id="l", fps=25.0, frames=np.linspace(0, 1.0, 90).reshape(10, 3, 3))
    spec = fit_normalization([small, large], barycenter_mode="none")
    a = apply_normalization(small, spec)
    b = apply_normalization(large, spec)
    extent = lambda clip, axis: np.ptp(clip.frames[:, :, axis])
    for axis in range(3):
        assert extent(a, axis) / extent(b, axis) == pytest.approx(0.1, rel=1e-9)


# ---------------------------------------------------------------------------
# windows


def test_window_counts_match_spec_examples():
    assert window_count(100, 40, 1) == 61
    assert window_count(39, 40, 1) == 0
    clips = [make_clip(n_frames=6066, n_joints=2, seed=i, clip_id=f"c{i}") for i in range(6)]
    windows = extract_windows(clips, 40, 1)
    assert len(windows) == 6 * 6027 == 36_162


@settings(max_examples=200, deadline=None)
@given(n=st.integers(0, 300), length=st.integers(2, 80), stride=st.integers(1, 9))
def test_window_count_formula_matches_enumeration(n, length, stride):
    # Brute-force oracle: enumerate all start positions.
    brute = sum(1 for start in range(n) if start % stride == 0 and start + length <= n)
    assert window_count(n, length, stride) == brute


def test_windows_never_span_clips():
    rng = RngStream(9)
    clips = [make_clip(n_frames=int(rng.integers(5, 60, ())), seed=i, clip_id=f"c{i}")
             for i in range(8)]
    by_id = {c.id: c for c in clips}
    windows = extract_windows(clips, 12, 3)
    for w in windows:
        clip = by_id[w.clip_id]
        assert w.start_frame + 12 <= clip.n_frames
        np.testing.assert_array_equal(
            w.poses, clip.frames[w.start_frame : w.start_frame + 12])


def test_extract_windows_preconditions():
    with pytest.raises(PreconditionError):
        extract_windows([], 1, 1)
    with pytest.raises(PreconditionError):
        extract_windows([], 10, 0)


# ---------------------------------------------------------------------------
# splits


def windows_fixture(n=100):
    clip = make_clip(n_frames=n + 19, n_joints=2, clip_id="w")
    return extract_windows([clip], 20, 1)[:n]


def test_split_fractions_floor_like_the_reference_split():
    windows = windows_fixture(100)
    labeled_ids = {w.window_id for w in windows}
    assignment = split(windows, labeled_ids, labeled_fractions=(0.79, 0.05, 0.03), seed=1)
    counts = assignment.counts()
    assert counts["labeled_train"] == 79
    assert counts["labeled_val"] == 5
    assert counts["labeled_test"] == 3
    assert counts["unassigned"] == 13


def test_split_all_to_train():
    windows = windows_fixture(20)
    ids = {w.window_id for w in windows}
    assignment = split(windows, ids, labeled_fractions=(1.0, 0.0, 0.0), seed=0)
    assert assignment.counts() == {"labeled_train": 20}


def test_split_is_deterministic_and_disjoint():
    windows = windows_fixture(60)
    labeled_ids = {w.window_id for w in windows[:30]}
    a = split(windows, labeled_ids, seed=7,
              labeled_fractions=(0.5, 0.2, 0.1), unlabeled_fractions=(0.6, 0.2, 0.1))
    b = split(windows, labeled_ids, seed=7,
              labeled_fractions=(0.5, 0.2, 0.1), unlabeled_fractions=(0.6, 0.2, 0.1))
    assert a.assignment == b.assignment
    assert set(a.assignment) == {w.window_id for w in windows}
    labeled_parts = {p for wid, p in a.assignment.items() if wid in labeled_ids}
    assert labeled_parts <= {"labeled_train", "labeled_val", "labeled_test", "unassigned"}


def test_split_insufficient_data():
    windows = windows_fixture(10)
    ids = {w.window_id for w in windows}
    with pytest.raises(InsufficientDataError):
        split(windows, ids, labeled_fractions=(0.9, 0.05, 0.0), seed=0)


def test_split_json_roundtrip(tmp_path):
    windows = windows_fixture(40)
    ids = {w.window_id for w in windows[:10]}
    assignment = split(windows, ids, seed=3,
                       labeled_fractions=(0.5, 0.2, 0.2), unlabeled_fractions=(0.5, 0.2, 0.2))
    path = assignment.to_json(tmp_path / "split.json")
    again = SplitAssignment.from_json(path)
    assert again.assignment == assignment.assignment
    assert again.seed == 3


# ---------------------------------------------------------------------------
# synthetic data


def test_synth_dataset_is_reproducible():
    a_clips, a_table = synth_dataset(3, 120, 4, 3, seed=5, window=20)
    b_clips, b_table = synth_dataset(3, 120, 4, 3, seed=5, window=20)
    for ca, cb in zip(a_clips, b_clips):
        np.testing.assert_array_equal(ca.frames, cb.frames)
    assert a_table == b_table


def test_synth_dataset_requires_two_classes():
    with pytest.raises(PreconditionError):
        synth_dataset(2, 100, 4, 1, seed=0)


def test_synth_classes_are_separable_by_the_spectral_oracle():
    clips, table = synth_dataset(6, 400, 5, 3, seed=11, window=20)
    windows = extract_windows(clips, 20, 1)
    oracle = spectral_oracle(25.0, synth_class_frequencies(3, 25.0, 20))
    correct = 0
    for w in windows:
        truth = table.get(w.clip_id, w.start_frame).label.value
        correct += oracle(w) == truth
    assert correct / len(windows) >= 0.99


def test_synth_frequencies_strictly_increase():
    freqs = synth_class_frequencies(4, 25.0, 20)
    assert all(b > a for a, b in zip(freqs, freqs[1:]))
