import numpy as np
import pytest

from effortstudio.diffcore import RngStream
from effortstudio.errors import PreconditionError
from effortstudio.metrics import (
    DanceabilityThresholds,
    ajd,
    calibrate_thresholds,
    danceability,
    dominant_frequency,
    effort_recovery,
    normalize_confusion,
    spectral_oracle,
)
from effortstudio.motiondata import extract_windows, synth_class_frequencies, synth_dataset


def random_sequences(rng, count, frames=12, joints=4):
    return [0.5 + 0.2 * rng.normal((frames, joints, 3)) for _ in range(count)]


# ---------------------------------------------------------------------------
# AJD


def test_ajd_identical_is_zero():
    rng = RngStream(0)
    seqs = random_sequences(rng, 3)
    assert ajd(seqs, [s.copy() for s in seqs]) == 0.0


def test_ajd_constant_offset_is_pythagorean():
    rng = RngStream(1)
    seqs = random_sequences(rng, 2)
    shifted = [s + np.array([0.3, 0.4, 0.0]) for s in seqs]
    assert ajd(seqs, shifted) == pytest.approx(0.5, abs=1e-12)


def test_ajd_rejects_mismatches():
    rng = RngStream(2)
    seqs = random_sequences(rng, 2)
    with pytest.raises(PreconditionError):
        ajd(seqs, seqs[:1])
    with pytest.raises(PreconditionError):
        ajd(seqs, [s[:, :2] for s in seqs])


def test_ajd_pseudometric_properties():
    # Nonnegativity, identity, symmetry, triangle inequality on random triples.
    rng = RngStream(3)
    for _ in range(200):
        a, b, c = (random_sequences(rng, 2, frames=5, joints=3) for _ in range(3))
        dab, dba = ajd(a, b), ajd(b, a)
        assert dab >= 0.0
        assert ajd(a, a) <= 1e-15
        assert abs(dab - dba) <= 1e-12
        assert dab <= ajd(a, c) + ajd(c, b) + 1e-12


# ---------------------------------------------------------------------------
# danceability


def chain_edges(joints):
    return tuple((j, j + 1) for j in range(joints - 1))


def test_constant_pose_passes_all_flags():
    pose = np.array([[0.5, 0.5, 0.1 * j] for j in range(4)])
    seq = np.repeat(pose[None, :, :], 10, axis=0)
    report = danceability([seq], chain_edges(4))
    assert report.pass_rate == 1.0
    assert report.flags[0] == {
        "bone_length_stable": True, "velocity_continuous": True, "within_box": True}


def test_teleport_fails_velocity_at_default_threshold():
    pose = np.array([[0.5, 0.5, 0.1 * j] for j in range(4)])
    seq = np.repeat(pose[None, :, :], 10, axis=0).copy()
    seq[5] += np.array([0.5, 0.0, 0.0])
    report = danceability([seq], chain_edges(4))
    assert report.flags[0]["velocity_continuous"] is False
    assert report.pass_rate == 0.0


def test_bone_stretch_fails_bone_stability():
    pose = np.array([[0.5, 0.5, 0.2 * j] for j in range(4)])
    frames = np.repeat(pose[None, :, :], 20, axis=0).copy()
    frames[:, 3, 2] += 0.12 * np.sin(np.linspace(0, 4 * np.pi, 20))  # last bone breathes
    report = danceability([frames], chain_edges(4))
    assert report.flags[0]["bone_length_stable"] is False


def test_out_of_box_fails_within_box():
    pose = np.array([[2.0, 0.5, 0.1 * j] for j in range(4)])
    seq = np.repeat(pose[None, :, :], 5, axis=0)
    report = danceability([seq], chain_edges(4))
    assert report.flags[0]["within_box"] is False


def test_calibrated_thresholds_pass_their_calibration_windows():
    from effortstudio.motiondata import apply_normalization, fit_normalization

    clips, _ = synth_dataset(4, 300, 5, 3, seed=21, window=20)
    spec = fit_normalization(clips)
    normalized = [apply_normalization(c, spec) for c in clips]
    windows = extract_windows(normalized, 20, 1)
    thresholds = calibrate_thresholds(windows, clips[0].skeleton, percentile=99.0)
    report = danceability(windows, clips[0].skeleton, thresholds)
    assert report.pass_rate >= 0.99
    assert thresholds.bone_rsd_max >= 0.02
    assert thresholds.velocity_max < 0.5  # a 0.5 teleport must still fail


# ---------------------------------------------------------------------------
# effort recovery and confusion handling


def test_effort_recovery_identity_oracle():
    rng = RngStream(4)
    generated = {c: random_sequences(rng, 5) for c in range(3)}
    intended = {id(seq): c for c, seqs in generated.items() for seq in seqs}
    confusion = effort_recovery(generated, oracle=lambda s: intended[id(s)], k=3)
    assert np.array_equal(confusion, np.diag([5, 5, 5]))


def test_effort_recovery_constant_oracle_fills_one_column():
    rng = RngStream(5)
    generated = {c: random_sequences(rng, 4) for c in range(3)}
    confusion = effort_recovery(generated, oracle=lambda s: 1, k=3)
    assert np.array_equal(confusion[:, 1], [4, 4, 4])
    assert confusion.sum() == 12


def test_normalize_confusion_rows_sum_to_one():
    confusion = np.array([[3, 1, 0], [0, 0, 0], [2, 2, 4]])
    normalized = normalize_confusion(confusion)
    sums = normalized.sum(axis=1)
    assert sums[0] == pytest.approx(1.0, abs=1e-12)
    assert sums[1] == 0.0
    assert sums[2] == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# spectral oracle


def test_dominant_frequency_reads_off_a_pure_tone():
    fps, frames = 25.0, 20
    t = np.arange(frames) / fps
    freq = 3 * fps / frames  # exactly bin 3
    seq = np.zeros((frames, 2, 3))
    seq[:, 0, 0] = 0.5 + 0.2 * np.sin(2 * np.pi * freq * t)
    seq[:, 1, 1] = 0.5 + 0.1 * np.sin(2 * np.pi * freq * t + 1.0)
    assert dominant_frequency(seq, fps) == pytest.approx(freq)


def test_spectral_oracle_picks_nearest_class_frequency():
    fps, frames = 25.0, 20
    freqs = synth_class_frequencies(3, fps, frames)
    oracle = spectral_oracle(fps, freqs)
    t = np.arange(frames) / fps
    for c, f in enumerate(freqs):
        seq = np.zeros((frames, 2, 3))
        seq[:, 0, 0] = np.sin(2 * np.pi * f * t)
        assert oracle(seq) == c
