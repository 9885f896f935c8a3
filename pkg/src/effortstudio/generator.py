"""Class-conditional generation from the trained latent space.

The atlas approximates the per-class marginal over latents by fitting a
full-covariance Gaussian to the posterior means of labeled training
windows (means rather than samples: lower variance and a deterministic
atlas). A kernel-density alternative samples a stored latent and perturbs
it with isotropic noise; both interpretations ship, the Gaussian fit is
the default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import RngStream
from .errors import InsufficientDataError, PreconditionError
from .model import Model, decode_batch, encode_means
from .motiondata import Sequence


@dataclass
class LatentAtlas:
    """Per-class Gaussian fits (and raw latents) over encoded posterior means."""

    means: np.ndarray        # (k, latent)
    covariances: np.ndarray  # (k, latent, latent), includes the lambda ridge
    counts: np.ndarray       # (k,)
    regularization: float
    latents_by_class: list[np.ndarray]

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def _cholesky(self, label: int) -> np.ndarray:
        return np.linalg.cholesky(self.covariances[label])

    def log_density(self, z: np.ndarray, label: int) -> float:
        """Gaussian log-density of one latent under a class fit."""
        chol = self._cholesky(label)
        centered = np.asarray(z, dtype=np.float64) - self.means[label]
        solved = np.linalg.solve(chol, centered)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        d = self.latent_dim
        return float(-0.5 * (solved @ solved + logdet + d * np.log(2.0 * np.pi)))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "means": self.means,
            "covariances": self.covariances,
            "counts": self.counts,
            "regularization": np.array(self.regularization),
        }
        for label, latents in enumerate(self.latents_by_class):
            payload[f"latents_{label}"] = latents
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "LatentAtlas":
        with np.load(path) as data:
            k = data["means"].shape[0]
            return cls(
                means=data["means"],
                covariances=data["covariances"],
                counts=data["counts"],
                regularization=float(data["regularization"]),
                latents_by_class=[data[f"latents_{label}"] for label in range(k)],
            )

    def sha256(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.means.tobytes())
        digest.update(self.covariances.tobytes())
        digest.update(self.counts.tobytes())
        return digest.hexdigest()


def build_atlas(model: Model, labeled_pairs, regularization: float = 1e-4) -> LatentAtlas:
    """Encode labeled windows and fit one Gaussian per class over the means.

    ``labeled_pairs`` is a list of (sequence, label value). Every class must
    contribute at least two windows for a covariance to exist.
    """
    k = model.config.k
    latent = model.config.latent_dim
    if not labeled_pairs:
        raise InsufficientDataError("atlas needs labeled windows")
    means = encode_means(model, [p[0] for p in labeled_pairs],
                         [p[1] for p in labeled_pairs])
    labels = np.array([int(p[1]) for p in labeled_pairs])
    class_means = np.zeros((k, latent))
    class_covs = np.zeros((k, latent, latent))
    counts = np.zeros(k, dtype=np.int64)
    latents_by_class: list[np.ndarray] = []
    for label in range(k):
        rows = means[labels == label]
        counts[label] = rows.shape[0]
        if counts[label] < 2:
            raise InsufficientDataError(
                f"class {label} has {counts[label]} labeled window(s); need at least 2")
        class_means[label] = rows.mean(axis=0)
        centered = rows - class_means[label]
        class_covs[label] = centered.T @ centered / (rows.shape[0] - 1)
        class_covs[label] += regularization * np.eye(latent)
        latents_by_class.append(rows)
    return LatentAtlas(class_means, class_covs, counts, regularization, latents_by_class)


def sample_latents(atlas: LatentAtlas, label: int, count: int, rng: RngStream,
                   mode: str = "gaussian", bandwidth: float = 0.1) -> np.ndarray:
    if not 0 <= label < atlas.k:
        raise PreconditionError(f"unknown class {label}")
    if count == 0:
        return np.zeros((0, atlas.latent_dim))
    if mode == "gaussian":
        noise = rng.normal((count, atlas.latent_dim))
        return atlas.means[label] + noise @ atlas._cholesky(label).T
    if mode == "kde":
        stored = atlas.latents_by_class[label]
        picks = rng.integers(0, stored.shape[0], (count,))
        return stored[picks] + bandwidth * rng.normal((count, atlas.latent_dim))
    raise PreconditionError(f"unknown sampling mode {mode!r}")


def sample_conditional(atlas: LatentAtlas, model: Model, label: int, count: int,
                       rng: RngStream, mode: str = "gaussian",
                       bandwidth: float = 0.1) -> list[Sequence]:
    """Decode ``count`` latents drawn from the class fit, under that label."""
    z = sample_latents(atlas, label, count, rng, mode=mode, bandwidth=bandwidth)
    if count == 0:
        return []
    frames = decode_batch(model, z, [label] * count)
    return [Sequence(clip_id=f"gen-{label}-{i}", start_frame=0, poses=frames[i])
            for i in range(count)]


def sample_prior(model: Model, count: int, rng: RngStream,
                 label_mode: str | int = "random") -> list[tuple[Sequence, int]]:
    """Decode latents from the standard normal prior.

    ``label_mode`` is either "random" (uniform labels) or a fixed label value.
    Returns (sequence, label used) pairs.
    """
    k = model.config.k
    z = rng.normal((count, model.config.latent_dim))
    if label_mode == "random":
        labels = [int(v) for v in rng.integers(0, k, (count,))]
    else:
        label = int(label_mode)
        if not 0 <= label < k:
            raise PreconditionError(f"unknown class {label}")
        labels = [label] * count
    if count == 0:
        return []
    frames = decode_batch(model, z, labels)
    return [
        (Sequence(clip_id=f"prior-{labels[i]}-{i}", start_frame=0, poses=frames[i]), labels[i])
        for i in range(count)
    ]


def generation_manifest(label: int, count: int, seed: int, atlas: LatentAtlas,
                        checkpoint_hash: str, mode: str = "gaussian") -> dict:
    return {
        "label": label,
        "count": count,
        "seed": seed,
        "mode": mode,
        "atlas_sha256": atlas.sha256(),
        "checkpoint_sha256": checkpoint_hash,
    }
