"""Training objective: labeled bound, unlabeled bound, and the weighted total.

Per labeled sequence the bound is

    L(x, y) = recon(x, x_hat) + KL(q(z|x,y) || N(0, I)) + log k,

where recon is the squared Euclidean error per joint (summed over the three
coordinates), averaged over joints and poses, divided by the decoder output
variance; the ``log k`` term is the uniform label prior kept so reported
values are true bound values. Per unlabeled sequence the label is summed out:

    U(x) = sum_y q(y|x) L(x, y) - H(q(y|x)),

with one shared reparameterization noise across the k candidate labels. The
total over a labeled and an unlabeled batch adds ``alpha`` times the mean
classifier cross-entropy on the labeled pairs, with the default
``alpha = 0.1 * n_unlabeled / n_labeled`` recomputed from dataset sizes.

The KL is computed in the standard direction, q against the prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import RngStream, Var, concat, leaf_vars, log_softmax, reduce_sum, reshape, take
from .diffcore import exp as v_exp
from .errors import NumericError, PreconditionError
from .labels import EffortLabel
from .model import (
    GaussianPosterior,
    Model,
    ModelConfig,
    ParamView,
    as_batch,
    classifier_logits,
    decoder_frames,
    encoder_hidden,
    gaussian_heads,
    one_hot,
    reparameterize_var,
)


def default_alpha(n_unlabeled: int, n_labeled: int) -> float:
    if n_labeled <= 0:
        raise PreconditionError("alpha formula needs a non-empty labeled pool")
    return 0.1 * n_unlabeled / n_labeled


@dataclass(frozen=True)
class LossReport:
    total: float
    labeled_term: float          # sum of L(x, y) over the labeled batch
    unlabeled_term: float        # sum of U(x) over the unlabeled batch
    classification_term: float   # mean -log q(y|x) on labeled pairs
    alpha: float
    n_labeled: int
    n_unlabeled: int
    reconstruction: float        # mixture-weighted on the unlabeled side
    kl: float
    entropy: float               # sum of H(q(y|x)); enters the total negated
    prior: float                 # (n_labeled + n_unlabeled) * log k

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# differentiable batch terms


def _kl_rows(mean: Var, log_var: Var) -> Var:
    var = v_exp(log_var)
    return reduce_sum(mean * mean + var - 1.0 - log_var, axis=1) * 0.5


def _recon_rows(config: ModelConfig, frames: list[Var], x_batch: np.ndarray) -> Var:
    total = None
    for t, frame in enumerate(frames):
        diff = frame - x_batch[:, t, :]
        row = reduce_sum(diff * diff, axis=1)
        total = row if total is None else total + row
    scale = 1.0 / (config.seq_len * config.n_joints * config.output_variance)
    return total * scale


def labeled_rows(pv: ParamView, config: ModelConfig, x_batch: np.ndarray,
                 y_idx: np.ndarray, noise: np.ndarray,
                 parts: dict | None = None) -> Var:
    """Per-sequence L(x, y) for a labeled batch, shape (B,)."""
    y_onehot = one_hot(y_idx, config.k)
    h_last = encoder_hidden(pv, config, x_batch, y_onehot)
    mean, log_var = gaussian_heads(pv, config, h_last, y_onehot)
    z = reparameterize_var(mean, log_var, noise)
    frames = decoder_frames(pv, config, z, y_onehot)
    recon = _recon_rows(config, frames, x_batch)
    kl = _kl_rows(mean, log_var)
    if parts is not None:
        parts["reconstruction"] = float(recon.value.sum())
        parts["kl"] = float(kl.value.sum())
    return recon + kl + float(np.log(config.k))


def unlabeled_rows(pv: ParamView, config: ModelConfig, x_batch: np.ndarray,
                   noise: np.ndarray, parts: dict | None = None) -> Var:
    """Per-sequence U(x), shape (B,): classifier-weighted mixture of L over
    the k candidate labels minus the categorical entropy.

    The k candidate passes run as one stacked batch of size k*B; the
    reparameterization noise is shared across candidates to reduce variance
    between the mixture terms.
    """
    batch, k = x_batch.shape[0], config.k
    logits = classifier_logits(pv, config, x_batch)
    log_q = log_softmax(logits)
    q = v_exp(log_q)
    entropy = -reduce_sum(q * log_q, axis=1)

    y_stacked = np.repeat(np.arange(k), batch)          # k blocks of B
    y_onehot = one_hot(y_stacked, k)
    if config.per_frame_labels:
        h_last = encoder_hidden(pv, config, np.tile(x_batch, (k, 1, 1)), y_onehot)
    else:
        shared = encoder_hidden(pv, config, x_batch)    # label joins at the heads
        h_last = concat([shared] * k, axis=0)
    mean, log_var = gaussian_heads(pv, config, h_last, y_onehot)
    z = reparameterize_var(mean, log_var, np.tile(noise, (k, 1)))
    frames = decoder_frames(pv, config, z, y_onehot)
    recon = _recon_rows(config, frames, np.tile(x_batch, (k, 1, 1)))
    kl = _kl_rows(mean, log_var)
    rows = reshape(recon + kl + float(np.log(k)), (k, batch))
    mixture = None
    for y in range(k):
        term = q[:, y] * rows[y]
        mixture = term if mixture is None else mixture + term
    if parts is not None:
        weights = q.value.T                              # (k, B)
        parts["reconstruction"] = float((weights * recon.value.reshape(k, batch)).sum())
        parts["kl"] = float((weights * kl.value.reshape(k, batch)).sum())
        parts["entropy"] = float(entropy.value.sum())
    return mixture - entropy


def classification_rows(pv: ParamView, config: ModelConfig, x_batch: np.ndarray,
                        y_idx: np.ndarray) -> Var:
    log_q = log_softmax(classifier_logits(pv, config, x_batch))
    picked = take(log_q, (np.arange(x_batch.shape[0]), np.asarray(y_idx, dtype=int)))
    return -picked


def total_loss_var(pv: ParamView, config: ModelConfig,
                   x_labeled: np.ndarray | None, y_idx: np.ndarray | None,
                   x_unlabeled: np.ndarray | None, alpha: float,
                   noise_labeled: np.ndarray | None, noise_unlabeled: np.ndarray | None,
                   parts: dict | None = None) -> Var:
    """Differentiable total over one labeled and one unlabeled batch."""
    if alpha < 0:
        raise PreconditionError("alpha must be nonnegative")
    has_labeled = x_labeled is not None and x_labeled.shape[0] > 0
    has_unlabeled = x_unlabeled is not None and x_unlabeled.shape[0] > 0
    if not has_labeled and not has_unlabeled:
        raise PreconditionError("total loss needs at least one non-empty batch")
    if parts is not None:
        parts.update({"reconstruction": 0.0, "kl": 0.0, "entropy": 0.0,
                      "labeled": 0.0, "unlabeled": 0.0, "class_term": 0.0,
                      "n_labeled": 0, "n_unlabeled": 0, "prior": 0.0})
    total = None
    if has_labeled:
        sub = {} if parts is not None else None
        rows = labeled_rows(pv, config, x_labeled, y_idx, noise_labeled, sub)
        labeled_sum = reduce_sum(rows)
        class_rows = classification_rows(pv, config, x_labeled, y_idx)
        class_mean = class_rows.mean()
        total = labeled_sum + alpha * class_mean
        if parts is not None:
            parts["reconstruction"] += sub["reconstruction"]
            parts["kl"] += sub["kl"]
            parts["labeled"] = float(labeled_sum.value)
            parts["class_term"] = float(class_mean.value)
            parts["n_labeled"] = int(x_labeled.shape[0])
            parts["prior"] += x_labeled.shape[0] * float(np.log(config.k))
    if has_unlabeled:
        sub = {} if parts is not None else None
        rows = unlabeled_rows(pv, config, x_unlabeled, noise_unlabeled, sub)
        unlabeled_sum = reduce_sum(rows)
        total = unlabeled_sum if total is None else total + unlabeled_sum
        if parts is not None:
            parts["reconstruction"] += sub["reconstruction"]
            parts["kl"] += sub["kl"]
            parts["entropy"] += sub["entropy"]
            parts["unlabeled"] = float(unlabeled_sum.value)
            parts["n_unlabeled"] = int(x_unlabeled.shape[0])
            parts["prior"] += x_unlabeled.shape[0] * float(np.log(config.k))
    return total


# ---------------------------------------------------------------------------
# concrete API


def kl_gaussian(posterior: GaussianPosterior) -> float:
    """KL(q || N(0, I)) for a diagonal Gaussian, closed form."""
    mu = np.asarray(posterior.mean, dtype=np.float64)
    log_var = np.asarray(posterior.log_variance, dtype=np.float64)
    var = np.exp(log_var)
    return float(0.5 * np.sum(mu * mu + var - 1.0 - log_var))


def _noise_for(rng: RngStream | None, shape) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    return rng.normal(shape)


def _label_values(labels, k: int) -> np.ndarray:
    return np.asarray(
        [y.value if isinstance(y, EffortLabel) else int(y) for y in labels], dtype=int)


def labeled_elbo_loss(model: Model, x, y, rng: RngStream | None = None) -> float:
    pv = leaf_vars(model.params)
    x_batch = as_batch([x])
    y_idx = _label_values([y], model.config.k)
    noise = _noise_for(rng, (1, model.config.latent_dim))
    rows = labeled_rows(pv, model.config, x_batch, y_idx, noise)
    value = float(rows.value[0])
    if not np.isfinite(value):
        raise NumericError("labeled bound evaluated non-finite")
    return value


def unlabeled_loss(model: Model, x, rng: RngStream | None = None) -> float:
    pv = leaf_vars(model.params)
    x_batch = as_batch([x])
    noise = _noise_for(rng, (1, model.config.latent_dim))
    rows = unlabeled_rows(pv, model.config, x_batch, noise)
    value = float(rows.value[0])
    if not np.isfinite(value):
        raise NumericError("unlabeled bound evaluated non-finite")
    return value


def total_loss(model: Model, labeled_batch, unlabeled_batch, alpha: float,
               rng: RngStream | None = None) -> LossReport:
    """LossReport over (sequence, label) pairs and unlabeled sequences."""
    config = model.config
    pv = leaf_vars(model.params)
    x_labeled = y_idx = noise_l = None
    if labeled_batch:
        x_labeled = as_batch([pair[0] for pair in labeled_batch])
        y_idx = _label_values([pair[1] for pair in labeled_batch], config.k)
        noise_l = _noise_for(rng, (len(labeled_batch), config.latent_dim))
    x_unlabeled = noise_u = None
    if unlabeled_batch:
        x_unlabeled = as_batch(list(unlabeled_batch))
        noise_u = _noise_for(rng, (len(unlabeled_batch), config.latent_dim))
    parts: dict = {}
    total = total_loss_var(pv, config, x_labeled, y_idx, x_unlabeled, alpha,
                           noise_l, noise_u, parts)
    return LossReport(
        total=float(total.value),
        labeled_term=parts["labeled"],
        unlabeled_term=parts["unlabeled"],
        classification_term=parts["class_term"],
        alpha=alpha,
        n_labeled=parts["n_labeled"],
        n_unlabeled=parts["n_unlabeled"],
        reconstruction=parts["reconstruction"],
        kl=parts["kl"],
        entropy=parts["entropy"],
        prior=parts["prior"],
    )
