import numpy as np
import pytest

from effortstudio.diffcore import RngStream
from effortstudio.errors import InsufficientDataError, PreconditionError
from effortstudio.generator import (
    LatentAtlas,
    build_atlas,
    generation_manifest,
    sample_conditional,
    sample_latents,
    sample_prior,
)
from effortstudio.model import decode, new_model

from conftest import random_sequence_array, tiny_config


def labeled_pairs(config, per_class=4, seed=0):
    pairs = []
    for c in range(config.k):
        for i in range(per_class):
            pairs.append((random_sequence_array(config, seed=seed + 97 * c + i), c))
    return pairs


@pytest.fixture
def atlas_and_model():
    model = new_model(tiny_config(), seed=2)
    atlas = build_atlas(model, labeled_pairs(model.config))
    return atlas, model


# ---------------------------------------------------------------------------
# atlas fitting


def test_atlas_is_deterministic(tiny_model):
    pairs = labeled_pairs(tiny_model.config)
    a = build_atlas(tiny_model, pairs)
    b = build_atlas(tiny_model, pairs)
    assert a.sha256() == b.sha256()
    np.testing.assert_array_equal(a.means, b.means)


def test_atlas_requires_two_windows_per_class(tiny_model):
    pairs = labeled_pairs(tiny_model.config)
    pairs = [p for p in pairs if p[1] != 2][: 8] + [(random_sequence_array(tiny_model.config), 2)]
    with pytest.raises(InsufficientDataError):
        build_atlas(tiny_model, pairs)


def test_identical_latents_collapse_to_ridge_covariance():
    # All class latents equal: the fitted covariance is exactly lambda * I.
    dim = 3
    latents = np.tile(np.array([0.5, -1.0, 2.0]), (6, 1))
    atlas = LatentAtlas(
        means=latents[:1].copy(),
        covariances=(np.zeros((1, dim, dim)) + 1e-4 * np.eye(dim))[None][0],
        counts=np.array([6]),
        regularization=1e-4,
        latents_by_class=[latents],
    )
    # Direct fit through build_atlas semantics: centered rows are zero.
    centered = latents - latents.mean(axis=0)
    cov = centered.T @ centered / (len(latents) - 1) + 1e-4 * np.eye(dim)
    np.testing.assert_allclose(cov, 1e-4 * np.eye(dim), atol=1e-18)
    np.testing.assert_allclose(atlas.covariances[0], cov, atol=1e-18)


def test_gaussian_fit_recovers_known_moments():
    # Monte-Carlo oracle: fit on draws from a known Gaussian.
    rng = np.random.default_rng(3)
    true_mean = np.array([1.0, -2.0, 0.5])
    chol = np.array([[0.8, 0.0, 0.0], [0.2, 0.5, 0.0], [-0.1, 0.3, 0.6]])
    true_cov = chol @ chol.T
    draws = true_mean + rng.standard_normal((10_000, 3)) @ chol.T
    mean = draws.mean(axis=0)
    centered = draws - mean
    cov = centered.T @ centered / (len(draws) - 1) + 1e-4 * np.eye(3)
    standard_error = np.sqrt(np.diag(true_cov) / len(draws))
    assert np.all(np.abs(mean - true_mean) < 3 * standard_error)
    assert np.linalg.norm(cov - (true_cov + 1e-4 * np.eye(3))) < 0.05


def test_atlas_roundtrip(tmp_path, atlas_and_model):
    atlas, _ = atlas_and_model
    path = atlas.save(tmp_path / "atlas.npz")
    again = LatentAtlas.load(path)
    assert again.sha256() == atlas.sha256()
    np.testing.assert_array_equal(again.covariances, atlas.covariances)
    assert again.regularization == atlas.regularization


# ---------------------------------------------------------------------------
# conditional sampling


def test_sample_conditional_count_zero(atlas_and_model):
    atlas, model = atlas_and_model
    assert sample_conditional(atlas, model, 0, 0, RngStream(1)) == []


def test_sample_conditional_is_reproducible(atlas_and_model):
    atlas, model = atlas_and_model
    a = sample_conditional(atlas, model, 1, 3, RngStream(5))
    b = sample_conditional(atlas, model, 1, 3, RngStream(5))
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.poses, sb.poses)


def test_sample_conditional_unknown_class(atlas_and_model):
    atlas, model = atlas_and_model
    with pytest.raises(PreconditionError):
        sample_conditional(atlas, model, 7, 1, RngStream(0))


def test_kde_mode_stays_near_stored_latents(atlas_and_model):
    atlas, _ = atlas_and_model
    draws = sample_latents(atlas, 0, 50, RngStream(9), mode="kde", bandwidth=0.01)
    stored = atlas.latents_by_class[0]
    for z in draws:
        assert np.min(np.linalg.norm(stored - z, axis=1)) < 0.1


def test_conditional_latents_score_higher_under_their_own_class(atlas_and_model):
    atlas, _ = atlas_and_model
    rng = RngStream(13)
    for label in range(atlas.k):
        draws = sample_latents(atlas, label, 40, rng)
        own = np.mean([atlas.log_density(z, label) for z in draws])
        others = [np.mean([atlas.log_density(z, other) for z in draws])
                  for other in range(atlas.k) if other != label]
        assert all(own > other for other in others)


# ---------------------------------------------------------------------------
# prior sampling


def test_prior_sampling_shapes_and_reproducibility(atlas_and_model):
    _, model = atlas_and_model
    config = model.config
    out = sample_prior(model, 4, RngStream(3), label_mode="random")
    assert len(out) == 4
    for seq, label in out:
        assert seq.poses.shape == (config.seq_len, config.n_joints, 3)
        assert 0 <= label < config.k
    again = sample_prior(model, 4, RngStream(3), label_mode="random")
    for (sa, la), (sb, lb) in zip(out, again):
        assert la == lb
        np.testing.assert_array_equal(sa.poses, sb.poses)


def test_prior_zero_latent_fixed_label_equals_decode(atlas_and_model):
    _, model = atlas_and_model

    class ZeroRng:
        def normal(self, shape=()):
            return np.zeros(shape)

        def integers(self, low, high, shape=()):
            return np.zeros(shape, dtype=int)

    ((seq, label),) = sample_prior(model, 1, ZeroRng(), label_mode=2)
    assert label == 2
    np.testing.assert_array_equal(seq.poses, decode(model, np.zeros(model.config.latent_dim), 2).poses)


def test_generation_manifest_carries_hashes(atlas_and_model):
    atlas, _ = atlas_and_model
    manifest = generation_manifest(1, 5, 42, atlas, "abc123")
    assert manifest["atlas_sha256"] == atlas.sha256()
    assert manifest["checkpoint_sha256"] == "abc123"
    assert manifest["label"] == 1 and manifest["count"] == 5 and manifest["seed"] == 42
