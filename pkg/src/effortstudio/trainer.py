"""Semi-supervised training loop: interleaved batches, validation tracking,
checkpointing, variant selection, numeric-failure rollback.

Each optimization step draws one labeled and one unlabeled batch so both
bound terms are always present. An epoch is one pass over the larger train
pool; the smaller pool cycles with reshuffling. Validation uses zero
reparameterization noise so epoch-to-epoch comparisons are deterministic.

Two selection criteria mirror the two model variants: ``dance`` keeps the
epoch with the lowest validation total loss, ``watch`` the one with the
highest validation classification accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import (
    AdamState,
    ParamTensor,
    RngStream,
    adam_step,
    leaf_vars,
    load_checkpoint,
    save_checkpoint,
)
from .errors import NumericError, PreconditionError
from .labels import LabelTable
from .model import Model, as_batch, classify_batch, save_model
from .motiondata import Sequence, SplitAssignment
from .objective import default_alpha, total_loss_var


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 3e-4
    alpha: float | None = None     # None: 0.1 * n_unlabeled / n_labeled
    seed: int = 0
    checkpoint_every: int = 0      # epochs between disk checkpoints; 0 = final only
    selection: str = "dance"       # dance: min val loss | watch: max val accuracy

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise PreconditionError("epochs, batch size and learning rate must be positive")
        if self.selection not in ("dance", "watch"):
            raise PreconditionError(f"unknown selection criterion {self.selection!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EpochStats:
    epoch: int
    train_total: float        # mean per-step total over the epoch
    val_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Model              # parameters at the selected epoch
    final_model: Model        # parameters after the last epoch (resume point)
    history: list[EpochStats]
    selected_epoch: int
    alpha: float
    aborted: bool
    log_path: Path | None


@dataclass
class ClassifierEval:
    accuracy: float
    confusion: np.ndarray             # raw counts, rows = true label
    confusion_normalized: np.ndarray  # rows sum to 1 where the class occurs


def evaluate_classifier(model: Model, labeled_pairs) -> ClassifierEval:
    """Accuracy and k-by-k confusion over (sequence, label) pairs."""
    if not labeled_pairs:
        raise PreconditionError("classifier evaluation needs a non-empty split")
    from .metrics import normalize_confusion

    k = model.config.k
    confusion = np.zeros((k, k), dtype=np.int64)
    probs = classify_batch(model, [pair[0] for pair in labeled_pairs])
    predicted = probs.argmax(axis=1)
    for (_, label), guess in zip(labeled_pairs, predicted):
        confusion[int(label), int(guess)] += 1
    accuracy = float(np.trace(confusion)) / len(labeled_pairs)
    return ClassifierEval(accuracy, confusion, normalize_confusion(confusion))


class _Cycler:
    """Deterministic reshuffling cursor over a pool of row indices."""

    def __init__(self, n: int, rng: RngStream):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            remaining = self.n - self.cursor
            if remaining == 0:
                self.order = self.rng.permutation(self.n)
                self.cursor = 0
                continue
            step = min(count, remaining)
            out.append(self.order[self.cursor : self.cursor + step])
            self.cursor += step
            count -= step
        return np.concatenate(out)


def _pool_pairs(split: SplitAssignment, partition: str, index: dict[str, Sequence],
                table: LabelTable | None):
    ids = sorted(split.ids(partition))
    out = []
    for wid in ids:
        if wid not in index:
            raise PreconditionError(f"window {wid} in split but not in dataset")
        seq = index[wid]
        if table is not None:
            record = table.get(seq.clip_id, seq.start_frame)
            if record is None:
                raise PreconditionError(f"window {wid} assigned to a labeled pool but unlabeled")
            out.append((seq, record.label.value))
        else:
            out.append((seq, None))
    return out


def _snapshot_state(state: AdamState) -> AdamState:
    copy = AdamState(state.learning_rate, state.beta1, state.beta2, state.eps, state.step)
    copy.m = {k: v.copy() for k, v in state.m.items()}
    copy.v = {k: v.copy() for k, v in state.v.items()}
    return copy


def _validation_loss(model: Model, val_labeled, val_unlabeled, alpha: float,
                     chunk: int = 256) -> float:
    """Total loss over the validation pools with zero noise, chunked.

    Bound terms are sums, so chunks add directly; the classification term is
    a mean over all labeled pairs and is reweighted across chunks.
    """
    config = model.config
    pv = leaf_vars(model.params)
    bounds = 0.0
    ce_sum = 0.0
    for start in range(0, len(val_labeled), chunk):
        part = val_labeled[start : start + chunk]
        x = as_batch([p[0] for p in part])
        y = np.array([p[1] for p in part], dtype=int)
        noise = np.zeros((len(part), config.latent_dim))
        parts: dict = {}
        total_loss_var(pv, config, x, y, None, 0.0, noise, None, parts)
        bounds += parts["labeled"]
        ce_sum += parts["class_term"] * len(part)
    for start in range(0, len(val_unlabeled), chunk):
        part = val_unlabeled[start : start + chunk]
        x = as_batch([p[0] for p in part])
        noise = np.zeros((len(part), config.latent_dim))
        parts = {}
        total_loss_var(pv, config, None, None, x, 0.0, None, noise, parts)
        bounds += parts["unlabeled"]
    if val_labeled:
        bounds += alpha * ce_sum / len(val_labeled)
    return bounds


def train(
    model: Model,
    sequences: list[Sequence],
    table: LabelTable,
    split: SplitAssignment,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    index = {s.window_id: s for s in sequences}
    labeled_train = _pool_pairs(split, "labeled_train", index, table)
    labeled_val = _pool_pairs(split, "labeled_val", index, table)
    unlabeled_train = [seq for seq, _ in _pool_pairs(split, "unlabeled_train", index, None)]
    unlabeled_val = [(seq, None) for seq, _ in _pool_pairs(split, "unlabeled_val", index, None)]
    if not labeled_train:
        raise PreconditionError("labeled training pool is empty")
    if not unlabeled_train:
        raise PreconditionError("unlabeled training pool is empty")

    # Leakage guard: train pools must not intersect validation or test ids.
    train_ids = {s.window_id for s, _ in labeled_train} | {s.window_id for s in unlabeled_train}
    held_out = set()
    for part in ("labeled_val", "labeled_test", "unlabeled_val", "unlabeled_test"):
        held_out.update(split.ids(part))
    assert not (train_ids & held_out), "split leaked held-out windows into training"

    cfg = model.config
    alpha = config.alpha if config.alpha is not None else default_alpha(
        len(unlabeled_train), len(labeled_train))

    x_labeled = as_batch([s for s, _ in labeled_train])
    y_labeled = np.array([y for _, y in labeled_train], dtype=int)
    x_unlabeled = as_batch(unlabeled_train)

    shuffle_rng = RngStream(config.seed)
    noise_rng = RngStream(config.seed + 1_000_003)
    state = AdamState.for_params(model.params, learning_rate=config.learning_rate)
    start_epoch = 0

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_lines: list[str] = []
    if resume_from is not None:
        model, state, shuffle_rng, noise_rng, start_epoch = _load_train_state(
            Path(resume_from), model, state)

    history: list[EpochStats] = []
    best_model = model.copy()
    best_score = None
    selected_epoch = start_epoch
    last_good = (model.copy(), _snapshot_state(state))
    aborted = False

    bs_l = min(config.batch_size, len(labeled_train))
    bs_u = min(config.batch_size, len(unlabeled_train))
    steps_per_epoch = max(
        math.ceil(len(labeled_train) / bs_l), math.ceil(len(unlabeled_train) / bs_u))

    def emit(record: dict) -> None:
        log_lines.append(json.dumps(record, sort_keys=True))

    epoch = start_epoch
    retried_epoch = -1
    while epoch < config.epochs:
        epoch_totals = []
        # Fresh cursors each epoch keep resume-at-epoch-boundary bit-exact.
        labeled_cycler = _Cycler(len(labeled_train), shuffle_rng)
        unlabeled_cycler = _Cycler(len(unlabeled_train), shuffle_rng)
        try:
            for step in range(steps_per_epoch):
                idx_l = labeled_cycler.take(bs_l)
                idx_u = unlabeled_cycler.take(bs_u)
                noise_l = noise_rng.normal((bs_l, cfg.latent_dim))
                noise_u = noise_rng.normal((bs_u, cfg.latent_dim))
                pv = leaf_vars(model.params)
                parts: dict = {}
                total = total_loss_var(pv, cfg, x_labeled[idx_l], y_labeled[idx_l],
                                       x_unlabeled[idx_u], alpha, noise_l, noise_u, parts)
                total.backward()
                for name, p in model.params.items():
                    g = pv[name].grad
                    p.grad = g if g is not None else np.zeros_like(p.values)
                adam_step(state, model.params)
                epoch_totals.append(float(total.value))
                emit({"epoch": epoch, "step": step, "total": float(total.value),
                      "labeled": parts["labeled"], "unlabeled": parts["unlabeled"],
                      "class_term": parts["class_term"], "val_loss": None, "val_acc": None})
        except NumericError:
            model_copy, state_copy = last_good
            model.params = model_copy.copy().params
            state = _snapshot_state(state_copy)
            if retried_epoch == epoch:
                aborted = True  # one retry per epoch, then keep the last good state
                emit({"epoch": epoch, "step": None, "aborted": True})
                break
            retried_epoch = epoch
            state.learning_rate *= 0.5
            emit({"epoch": epoch, "step": None, "retry_lr": state.learning_rate})
            continue  # retry the epoch from the rollback point

        val_loss = _validation_loss(model, labeled_val, unlabeled_val, alpha) \
            if (labeled_val or unlabeled_val) else float("nan")
        val_acc = evaluate_classifier(model, labeled_val).accuracy if labeled_val else float("nan")
        train_total = float(np.mean(epoch_totals)) if epoch_totals else float("nan")
        history.append(EpochStats(epoch, train_total, val_loss, val_acc))
        emit({"epoch": epoch, "step": None, "total": train_total, "labeled": None,
              "unlabeled": None, "class_term": None,
              "val_loss": None if math.isnan(val_loss) else val_loss,
              "val_acc": None if math.isnan(val_acc) else val_acc})

        score = val_loss if config.selection == "dance" else -val_acc
        if not math.isnan(score) and (best_score is None or score < best_score):
            best_score = score
            best_model = model.copy()
            selected_epoch = epoch
        last_good = (model.copy(), _snapshot_state(state))

        if out_dir is not None and config.checkpoint_every and \
                (epoch + 1) % config.checkpoint_every == 0:
            _save_train_state(out_dir, f"epoch_{epoch:04d}", model, state,
                              shuffle_rng, noise_rng, epoch + 1, config)
        epoch += 1

    if best_score is None:
        best_model = model.copy()
        selected_epoch = epoch

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_path.write_text("\n".join(log_lines) + ("\n" if log_lines else ""),
                            encoding="utf-8")
        _save_train_state(out_dir, "last", model, state, shuffle_rng, noise_rng,
                          epoch, config)
        save_model(out_dir / "selected.ckpt", best_model,
                   {"selected_epoch": selected_epoch, "selection": config.selection,
                    "alpha": alpha, "train_config": config.to_dict()})

    return TrainResult(model=best_model, final_model=model, history=history,
                       selected_epoch=selected_epoch, alpha=alpha, aborted=aborted,
                       log_path=log_path)


def _save_train_state(out_dir: Path, stem: str, model: Model, state: AdamState,
                      shuffle_rng: RngStream, noise_rng: RngStream, next_epoch: int,
                      config: TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(out_dir / f"{stem}.ckpt", model, {
        "next_epoch": next_epoch,
        "train_config": config.to_dict(),
        "rng": {"shuffle": shuffle_rng.state(), "noise": noise_rng.state()},
        "adam": {"step": state.step, "learning_rate": state.learning_rate},
    })
    moments: dict[str, ParamTensor] = {}
    for name in model.params:
        moments[f"m.{name}"] = ParamTensor(f"m.{name}", state.m[name])
        moments[f"v.{name}"] = ParamTensor(f"v.{name}", state.v[name])
    save_checkpoint(out_dir / f"{stem}.state.ckpt", moments, {"step": state.step})


def _load_train_state(resume_dir: Path, model: Model, state: AdamState):
    from .model import load_model

    loaded, manifest = load_model(resume_dir / "last.ckpt")
    moments, _ = load_checkpoint(resume_dir / "last.state.ckpt")
    state = AdamState.for_params(loaded.params,
                                 learning_rate=manifest["adam"]["learning_rate"])
    state.step = manifest["adam"]["step"]
    for name in loaded.params:
        state.m[name] = moments[f"m.{name}"].values
        state.v[name] = moments[f"v.{name}"].values
    shuffle_rng = RngStream.from_state(manifest["rng"]["shuffle"])
    noise_rng = RngStream.from_state(manifest["rng"]["noise"])
    return loaded, state, shuffle_rng, noise_rng, manifest["next_epoch"]
