"""Label-conditioned recurrent VAE: LSTM encoder, dense classifier, LSTM decoder.

Forward passes are written against :mod:`effortstudio.diffcore` variables so
the same code serves training (gradients) and inference (values). Inputs are
constants; parameters enter as leaf variables.

Wiring choices: the encoder's recurrent stack is label-agnostic and the
one-hot label joins at the Gaussian heads (a config flag switches to
per-frame label injection instead); the decoder maps ``concat(z, one_hot)``
through a tanh dense layer to a start vector that is fed to its LSTM stack
at every one of the T steps, with a per-step linear head emitting the 3J
pose coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .diffcore import (
    ParamTensor,
    Params,
    RngStream,
    Var,
    clip,
    concat,
    leaf_vars,
    load_checkpoint,
    log_softmax,
    matmul,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax,
    tanh,
)
from .diffcore import exp as v_exp
from .errors import ConfigError
from .labels import EffortLabel
from .motiondata import Sequence

ParamView = Mapping[str, Var]


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int
    n_joints: int
    k: int
    latent_dim: int
    enc_layers: int = 1
    enc_width: int = 32
    dec_layers: int = 1
    dec_width: int = 32
    classifier_hidden: tuple[int, ...] = (32, 32)
    output_variance: float = 1.0
    per_frame_labels: bool = False
    logvar_clamp: float = 10.0

    def __post_init__(self):
        for name in ("seq_len", "n_joints", "k", "latent_dim", "enc_layers",
                     "enc_width", "dec_layers", "dec_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.output_variance <= 0:
            raise ConfigError("output_variance must be positive")

    @property
    def frame_dim(self) -> int:
        return 3 * self.n_joints

    @property
    def flat_dim(self) -> int:
        return self.seq_len * self.frame_dim

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration used throughout the test suite."""
        base = dict(seq_len=20, n_joints=5, k=3, latent_dim=8,
                    enc_layers=1, enc_width=32, dec_layers=1, dec_width=32,
                    classifier_hidden=(32, 32))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Production-size defaults (recorded, not exercised by the suite)."""
        base = dict(seq_len=40, n_joints=53, k=3, latent_dim=256,
                    enc_layers=5, enc_width=100, dec_layers=5, dec_width=100,
                    classifier_hidden=(100, 100))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "n_joints": self.n_joints,
            "k": self.k,
            "latent_dim": self.latent_dim,
            "enc_layers": self.enc_layers,
            "enc_width": self.enc_width,
            "dec_layers": self.dec_layers,
            "dec_width": self.dec_width,
            "classifier_hidden": list(self.classifier_hidden),
            "output_variance": self.output_variance,
            "per_frame_labels": self.per_frame_labels,
            "logvar_clamp": self.logvar_clamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["classifier_hidden"] = tuple(d["classifier_hidden"])
        return cls(**d)


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)


@dataclass(frozen=True)
class ClassPosterior:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        object.__setattr__(self, "probabilities", p)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigError("class probabilities must be a distribution")

    @property
    def top(self) -> int:
        return int(np.argmax(self.probabilities))


@dataclass(frozen=True)
class LatentSample:
    z: np.ndarray
    posterior: GaussianPosterior
    noise: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    params: Params

    def copy(self) -> "Model":
        params = {name: ParamTensor(name, p.values.copy()) for name, p in self.params.items()}
        return Model(self.config, params)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _lstm_params(params: Params, rng: RngStream, prefix: str, n_layers: int,
                 input_dim: int, width: int) -> None:
    for layer in range(n_layers):
        in_dim = input_dim if layer == 0 else width
        fan = in_dim + width
        bias = _uniform(rng, (4 * width,), fan)
        bias[width : 2 * width] += 1.0  # forget gate starts open
        params[f"{prefix}.lstm{layer}.Wx"] = ParamTensor(
            f"{prefix}.lstm{layer}.Wx", _uniform(rng, (in_dim, 4 * width), fan))
        params[f"{prefix}.lstm{layer}.Wh"] = ParamTensor(
            f"{prefix}.lstm{layer}.Wh", _uniform(rng, (width, 4 * width), fan))
        params[f"{prefix}.lstm{layer}.b"] = ParamTensor(f"{prefix}.lstm{layer}.b", bias)


def _dense_params(params: Params, rng: RngStream, name: str, in_dim: int, out_dim: int) -> None:
    params[f"{name}.W"] = ParamTensor(f"{name}.W", _uniform(rng, (in_dim, out_dim), in_dim))
    params[f"{name}.b"] = ParamTensor(f"{name}.b", _uniform(rng, (out_dim,), in_dim))


def init_params(config: ModelConfig, rng: RngStream) -> Params:
    params: Params = {}
    enc_in = config.frame_dim + (config.k if config.per_frame_labels else 0)
    _lstm_params(params, rng, "enc", config.enc_layers, enc_in, config.enc_width)
    _dense_params(params, rng, "enc.mu", config.enc_width + config.k, config.latent_dim)
    _dense_params(params, rng, "enc.logvar", config.enc_width + config.k, config.latent_dim)
    widths = [config.flat_dim, *config.classifier_hidden]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        _dense_params(params, rng, f"cls.fc{i}", a, b)
    _dense_params(params, rng, "cls.out", widths[-1], config.k)
    _dense_params(params, rng, "dec.init", config.latent_dim + config.k, config.dec_width)
    _lstm_params(params, rng, "dec", config.dec_layers, config.dec_width, config.dec_width)
    _dense_params(params, rng, "dec.out", config.dec_width, config.frame_dim)
    return params


def new_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, init_params(config, RngStream(seed)))


# ---------------------------------------------------------------------------
# forward passes (differentiable)


def _lstm_cell(proj_x, Wh: Var, bias: Var, h, c, width: int):
    z = proj_x + matmul(h, Wh) + bias
    i = sigmoid(z[:, 0 * width : 1 * width])
    f = sigmoid(z[:, 1 * width : 2 * width])
    g = tanh(z[:, 2 * width : 3 * width])
    o = sigmoid(z[:, 3 * width : 4 * width])
    c = f * c + i * g
    h = o * tanh(c)
    return h, c


def _lstm_stack(pv: ParamView, prefix: str, n_layers: int, width: int,
                step_inputs: list, batch: int, shared_input: bool = False) -> list[Var]:
    """Run a stacked LSTM; returns the top layer's per-step hidden states.

    ``shared_input`` marks the decoder case where one vector feeds every
    step, letting the input projection be computed once.
    """
    n_steps = len(step_inputs)
    outputs = step_inputs
    for layer in range(n_layers):
        Wx = pv[f"{prefix}.lstm{layer}.Wx"]
        Wh = pv[f"{prefix}.lstm{layer}.Wh"]
        bias = pv[f"{prefix}.lstm{layer}.b"]
        if shared_input and layer == 0:
            proj = matmul(outputs[0], Wx)
            projections = [proj] * n_steps
        else:
            projections = [matmul(x, Wx) for x in outputs]
        h = np.zeros((batch, width))
        c = np.zeros((batch, width))
        layer_out = []
        for t in range(n_steps):
            h, c = _lstm_cell(projections[t], Wh, bias, h, c, width)
            layer_out.append(h)
        outputs = layer_out
    return outputs


def encoder_hidden(pv: ParamView, config: ModelConfig, x_batch: np.ndarray,
                   y_onehot: np.ndarray | None = None) -> Var:
    """Final hidden state of the encoder stack for a (B, T, 3J) batch."""
    batch, n_steps, frame_dim = x_batch.shape
    if n_steps != config.seq_len or frame_dim != config.frame_dim:
        raise ConfigError(
            f"input shape {x_batch.shape[1:]} does not match (T={config.seq_len}, 3J={config.frame_dim})")
    if config.per_frame_labels:
        if y_onehot is None:
            raise ConfigError("per-frame label injection requires a label")
        tiled = np.repeat(y_onehot[:, None, :], n_steps, axis=1)
        x_batch = np.concatenate([x_batch, tiled], axis=2)
    # One projection matmul for the whole constant input batch.
    Wx = pv["enc.lstm0.Wx"]
    flat = x_batch.reshape(batch * n_steps, x_batch.shape[2])
    proj = reshape(matmul(flat, Wx), (batch, n_steps, 4 * config.enc_width))
    step_proj = [proj[:, t, :] for t in range(n_steps)]
    Wh0, b0 = pv["enc.lstm0.Wh"], pv["enc.lstm0.b"]
    h = np.zeros((batch, config.enc_width))
    c = np.zeros((batch, config.enc_width))
    below: list[Var] = []
    for t in range(n_steps):
        h, c = _lstm_cell(step_proj[t], Wh0, b0, h, c, config.enc_width)
        below.append(h)
    if config.enc_layers > 1:
        below = _upper_layers(pv, "enc", config.enc_layers, config.enc_width, below, batch)
    return below[-1]


def _upper_layers(pv: ParamView, prefix: str, n_layers: int, width: int,
                  below: list, batch: int) -> list[Var]:
    for layer in range(1, n_layers):
        Wx = pv[f"{prefix}.lstm{layer}.Wx"]
        Wh = pv[f"{prefix}.lstm{layer}.Wh"]
        bias = pv[f"{prefix}.lstm{layer}.b"]
        h = np.zeros((batch, width))
        c = np.zeros((batch, width))
        layer_out = []
        for x in below:
            h, c = _lstm_cell(matmul(x, Wx), Wh, bias, h, c, width)
            layer_out.append(h)
        below = layer_out
    return below


def gaussian_heads(pv: ParamView, config: ModelConfig, h_last: Var,
                   y_onehot: np.ndarray) -> tuple[Var, Var]:
    hy = concat([h_last, y_onehot], axis=1)
    mean = matmul(hy, pv["enc.mu.W"]) + pv["enc.mu.b"]
    log_var = clip(matmul(hy, pv["enc.logvar.W"]) + pv["enc.logvar.b"],
                   -config.logvar_clamp, config.logvar_clamp)
    return mean, log_var


def classifier_logits(pv: ParamView, config: ModelConfig, x_batch: np.ndarray) -> Var:
    batch = x_batch.shape[0]
    if x_batch.shape[1] * x_batch.shape[2] != config.flat_dim:
        raise ConfigError(f"classifier input {x_batch.shape[1:]} does not match config")
    h: Var | np.ndarray = x_batch.reshape(batch, config.flat_dim)
    for i in range(len(config.classifier_hidden)):
        h = relu(matmul(h, pv[f"cls.fc{i}.W"]) + pv[f"cls.fc{i}.b"])
    return matmul(h, pv["cls.out.W"]) + pv["cls.out.b"]


def decoder_frames(pv: ParamView, config: ModelConfig, z, y_onehot: np.ndarray) -> list[Var]:
    """Per-step (B, 3J) pose coordinate means f(y, z); the start vector from
    (z, one-hot) feeds the decoder stack at all T steps."""
    zy = concat([z, y_onehot], axis=1)
    start = tanh(matmul(zy, pv["dec.init.W"]) + pv["dec.init.b"])
    batch = start.shape[0]
    hidden = _lstm_stack(pv, "dec", config.dec_layers, config.dec_width,
                         [start] * config.seq_len, batch, shared_input=True)
    W, b = pv["dec.out.W"], pv["dec.out.b"]
    return [matmul(h, W) + b for h in hidden]


def reparameterize_var(mean: Var, log_var: Var, noise: np.ndarray) -> Var:
    return mean + v_exp(log_var * 0.5) * noise


# ---------------------------------------------------------------------------
# concrete single-sequence operations


def one_hot(indices, k: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=int).reshape(-1)
    out = np.zeros((indices.size, k))
    out[np.arange(indices.size), indices] = 1.0
    return out


def as_batch(sequences: list[Sequence] | list[np.ndarray]) -> np.ndarray:
    """(B, T, 3J) float64 batch from sequences or (T, J, 3) arrays."""
    arrays = [s.poses if isinstance(s, Sequence) else np.asarray(s) for s in sequences]
    stacked = np.stack(arrays, axis=0).astype(np.float64)
    return stacked.reshape(stacked.shape[0], stacked.shape[1], -1)


def _label_value(y) -> int:
    return y.value if isinstance(y, EffortLabel) else int(y)


def encode(model: Model, x: Sequence | np.ndarray, y) -> GaussianPosterior:
    pv = leaf_vars(model.params)
    batch = as_batch([x])
    y_onehot = one_hot([_label_value(y)], model.config.k)
    h_last = encoder_hidden(pv, model.config, batch, y_onehot)
    mean, log_var = gaussian_heads(pv, model.config, h_last, y_onehot)
    return GaussianPosterior(mean.value[0].copy(), log_var.value[0].copy())


def classify(model: Model, x: Sequence | np.ndarray) -> ClassPosterior:
    pv = leaf_vars(model.params)
    probs = softmax(classifier_logits(pv, model.config, as_batch([x])))
    return ClassPosterior(probs.value[0].copy())


def classify_batch(model: Model, xs: list) -> np.ndarray:
    """(B, k) class probabilities."""
    pv = leaf_vars(model.params)
    probs = softmax(classifier_logits(pv, model.config, as_batch(xs)))
    return probs.value.copy()


def reparameterize(posterior: GaussianPosterior, rng: RngStream) -> LatentSample:
    noise = rng.normal(posterior.mean.shape)
    z = posterior.mean + np.sqrt(posterior.variance) * noise
    return LatentSample(z=z, posterior=posterior, noise=noise)


def decode(model: Model, z: np.ndarray, y, clip_id: str = "decoded") -> Sequence:
    frames = decode_batch(model, np.asarray(z, dtype=np.float64).reshape(1, -1),
                          [_label_value(y)])
    return Sequence(clip_id=clip_id, start_frame=0, poses=frames[0])


def decode_batch(model: Model, z_batch: np.ndarray, labels) -> np.ndarray:
    """(B, T, J, 3) decoded pose means for a batch of latents and labels."""
    config = model.config
    if z_batch.ndim != 2 or z_batch.shape[1] != config.latent_dim:
        raise ConfigError(f"latent batch {z_batch.shape} does not match latent_dim={config.latent_dim}")
    pv = leaf_vars(model.params)
    y_onehot = one_hot([_label_value(y) for y in labels], config.k)
    frames = decoder_frames(pv, config, z_batch, y_onehot)
    stacked = np.stack([f.value for f in frames], axis=1)
    return stacked.reshape(z_batch.shape[0], config.seq_len, config.n_joints, 3)


def encode_means(model: Model, sequences: list, labels) -> np.ndarray:
    """(B, latent) posterior means for labeled sequences (atlas building)."""
    pv = leaf_vars(model.params)
    batch = as_batch(sequences)
    y_onehot = one_hot([_label_value(y) for y in labels], model.config.k)
    h_last = encoder_hidden(pv, model.config, batch, y_onehot)
    mean, _ = gaussian_heads(pv, model.config, h_last, y_onehot)
    return mean.value.copy()


def reconstruct(model: Model, x: Sequence | np.ndarray, y,
                rng: RngStream | None = None) -> tuple[Sequence, GaussianPosterior, LatentSample]:
    """Encode, sample (posterior mean when ``rng`` is None), decode."""
    posterior = encode(model, x, y)
    if rng is None:
        sample = LatentSample(posterior.mean.copy(), posterior, np.zeros_like(posterior.mean))
    else:
        sample = reparameterize(posterior, rng)
    clip_id = x.clip_id if isinstance(x, Sequence) else "reconstructed"
    return decode(model, sample.z, y, clip_id=clip_id), posterior, sample


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model: Model, manifest: dict | None = None):
    payload = {"model_config": model.config.to_dict()}
    payload.update(manifest or {})
    return save_checkpoint(path, model.params, payload)


def load_model(path) -> tuple[Model, dict]:
    params, manifest = load_checkpoint(path)
    config = ModelConfig.from_dict(manifest["model_config"])
    return Model(config, params), manifest
