"""Command-line pipeline: ingest, augment, train, eval, generate, serve.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure. Every
command writes its fully resolved configuration next to its outputs so a
run is reproducible from the artifacts alone. A ``--config`` JSON file
supplies defaults (top-level and per-command sections); explicit flags win.

The ingest cache layout is one directory holding ``dataset.json`` (metadata
plus the normalization spec) and one raw-binary clip file per clip.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics
from .diffcore import RngStream, checkpoint_sha256
from .errors import EffortStudioError, NumericError
from .generator import LatentAtlas, build_atlas, generation_manifest, sample_conditional, sample_prior
from .labels import (
    LabelTable,
    augment_between,
    augment_dilate,
    class_histogram,
    default_class_names,
    thin_labels,
)
from .model import Model, ModelConfig, load_model, new_model, reconstruct, save_model
from .motiondata import (
    MotionClip,
    NormalizationSpec,
    SplitAssignment,
    apply_normalization,
    extract_windows,
    fit_normalization,
    load_clips,
    save_binary_clip,
    split,
    synth_class_frequencies,
    synth_dataset,
)
from .trainer import TrainConfig, evaluate_classifier, train

DATASET_META = "dataset.json"


# ---------------------------------------------------------------------------
# dataset cache


def save_dataset_dir(out_dir: Path, clips: list[MotionClip], meta: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    clip_files = {}
    for i, clip in enumerate(clips):
        name = f"clip_{i:03d}.bin"
        save_binary_clip(out_dir / name, clip)
        clip_files[clip.id] = name
    meta = dict(meta)
    meta["clip_files"] = clip_files
    meta["skeletons"] = {c.id: [list(e) for e in (c.skeleton or ())] for c in clips}
    (out_dir / DATASET_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return out_dir


def load_dataset_dir(path: str | Path) -> tuple[list[MotionClip], dict]:
    path = Path(path)
    meta = json.loads((path / DATASET_META).read_text(encoding="utf-8"))
    clips = []
    for clip_id, filename in sorted(meta["clip_files"].items()):
        (clip,) = load_clips(path / filename, "raw-binary")
        skeleton = meta.get("skeletons", {}).get(clip_id)
        clips.append(MotionClip(
            id=clip_id, fps=clip.fps, frames=clip.frames,
            skeleton=tuple(map(tuple, skeleton)) if skeleton else None))
    return clips, meta


def _windows(clips, meta):
    return extract_windows(clips, meta["window"], meta.get("stride", 1))


# ---------------------------------------------------------------------------
# shared plumbing


def _write_run_config(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    for key, value in list(resolved.items()):
        if isinstance(value, Path):
            resolved[key] = str(value)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "resolved": resolved}
    (out_dir / "run_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_labeled_pairs(split_assignment, partition, windows, table):
    index = {w.window_id: w for w in windows}
    pairs = []
    for wid in sorted(split_assignment.ids(partition)):
        seq = index[wid]
        record = table.get(seq.clip_id, seq.start_frame)
        pairs.append((seq, record.label.value))
    return pairs


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    out_dir = Path(args.out)
    if args.synthetic:
        clips, truth = synth_dataset(
            args.clips, args.frames, args.joints, args.classes, seed=args.seed,
            window=args.window, stride=args.stride, fps=args.fps)
        class_freqs = synth_class_frequencies(args.classes, args.fps, args.window)
    else:
        if args.data is None:
            raise argparse.ArgumentTypeError("either --synthetic or --data is required")
        clips = load_clips(args.data, args.format, fps=args.fps)
        truth = None
        class_freqs = None
    spec = fit_normalization(clips, barycenter_mode=args.barycenter)
    normalized = [apply_normalization(c, spec) for c in clips]
    meta = {
        "schema_version": 1,
        "k": args.classes,
        "class_names": list(default_class_names(args.classes)),
        "window": args.window,
        "stride": args.stride,
        "fps": clips[0].fps,
        "normalization": spec.to_dict(),
        "synthetic": bool(args.synthetic),
        "class_frequencies": class_freqs,
    }
    save_dataset_dir(out_dir, normalized, meta)
    windows = _windows(normalized, meta)
    if truth is not None:
        truth.to_csv(out_dir / "labels_truth.csv")
        manual = thin_labels(truth, fraction=args.manual_fraction,
                             min_gap=args.window, seed=args.seed)
        manual.to_csv(out_dir / "labels_manual.csv")
    summary = {
        "clips": len(clips),
        "frames": int(sum(c.n_frames for c in clips)),
        "joints": clips[0].n_joints,
        "windows": len(windows),
        "window": args.window,
        "stride": args.stride,
        "manual_labels": len(manual) if truth is not None else 0,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    _write_run_config(out_dir, "ingest", args)
    print(json.dumps(summary))
    return 0


def cmd_augment(args) -> int:
    clips, meta = load_dataset_dir(args.dataset)
    table = LabelTable.from_csv(args.labels, k=meta["k"])
    windows = _windows(clips, meta)
    manual_count = len(table)
    filled = augment_between(table, windows)
    dilated = augment_dilate(filled, windows, radius=args.radius)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_csv = out_dir / "labels_augmented.csv"
    dilated.to_csv(out_csv)
    hist = class_histogram(dilated)
    share = 100.0 * len(dilated) / len(windows) if windows else 0.0
    stats = {
        "manual": manual_count,
        "between_fill": dilated.source_counts()["between-fill"],
        "dilation": dilated.source_counts()["dilation"],
        "augmented_total": len(dilated),
        "dataset_windows": len(windows),
        "dataset_share_percent": share,
        "class_counts": list(hist.counts),
        "class_fractions": list(hist.fractions) if hist.fractions else None,
        "radius": args.radius,
        "labels_csv": str(out_csv),
    }
    (out_dir / "augment_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_config(out_dir, "augment", args)
    print(f"{manual_count} manual -> {len(dilated)} augmented ({share:.1f}% of dataset)")
    print(json.dumps(stats))
    return 0


def _model_config_from_args(args, meta, joints: int) -> ModelConfig:
    return ModelConfig(
        seq_len=meta["window"],
        n_joints=joints,
        k=meta["k"],
        latent_dim=args.latent_dim,
        enc_layers=args.layers,
        enc_width=args.width,
        dec_layers=args.layers,
        dec_width=args.width,
        classifier_hidden=tuple([args.classifier_width] * 2),
        output_variance=args.output_variance,
    )


def cmd_train(args) -> int:
    clips, meta = load_dataset_dir(args.dataset)
    table = LabelTable.from_csv(args.labels, k=meta["k"])
    windows = _windows(clips, meta)
    assignment = split(
        windows, table.labeled_ids(),
        labeled_fractions=tuple(args.labeled_fractions),
        unlabeled_fractions=tuple(args.unlabeled_fractions),
        seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment.to_json(out_dir / "split.json")
    config = _model_config_from_args(args, meta, clips[0].n_joints)
    model = new_model(config, seed=args.seed)
    train_config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate, alpha=args.alpha, seed=args.seed,
        checkpoint_every=args.checkpoint_every, selection=args.selection)
    started = time.time()
    result = train(model, windows, table, assignment, train_config, out_dir=out_dir,
                   resume_from=args.resume_from)
    elapsed = time.time() - started
    summary = {
        "epochs": len(result.history),
        "selected_epoch": result.selected_epoch,
        "alpha": result.alpha,
        "aborted": result.aborted,
        "final_val_loss": result.history[-1].val_loss if result.history else None,
        "final_val_acc": result.history[-1].val_acc if result.history else None,
        "seconds": elapsed,
        "checkpoint": str(out_dir / "selected.ckpt"),
    }
    (out_dir / "train_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_config(out_dir, "train", args)
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    clips, meta = load_dataset_dir(args.dataset)
    table = LabelTable.from_csv(args.labels, k=meta["k"])
    windows = _windows(clips, meta)
    assignment = SplitAssignment.from_json(args.split)
    model, _ = load_model(args.checkpoint)
    out: dict = {"checkpoint_sha256": checkpoint_sha256(args.checkpoint)}
    for part, key in (("labeled_val", "val"), ("labeled_test", "test")):
        pairs = _load_labeled_pairs(assignment, part, windows, table)
        if not pairs:
            continue
        evaluation = evaluate_classifier(model, pairs)
        reconstructions = [reconstruct(model, seq, label)[0].poses for seq, label in pairs]
        out[f"accuracy_{key}"] = evaluation.accuracy
        out[f"confusion_{key}"] = evaluation.confusion.tolist()
        out[f"ajd_{key}"] = metrics.ajd([seq.poses for seq, _ in pairs], reconstructions)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    _write_run_config(out_dir, "eval", args)
    print(json.dumps(out))
    return 0


def _resolve_label(value: str, class_names) -> int:
    if value.isdigit():
        return int(value)
    names = [n.lower() for n in class_names]
    if value.lower() in names:
        return names.index(value.lower())
    raise argparse.ArgumentTypeError(f"unknown label {value!r} (names: {list(class_names)})")


def cmd_generate(args) -> int:
    clips, meta = load_dataset_dir(args.dataset)
    model, _ = load_model(args.checkpoint)
    class_names = meta.get("class_names") or default_class_names(meta["k"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.prior:
        generated = sample_prior(model, args.count, RngStream(args.seed))
        sequences = [seq for seq, _ in generated]
        labels = [label for _, label in generated]
        manifest = {"mode": "prior", "count": args.count, "seed": args.seed,
                    "labels": labels,
                    "checkpoint_sha256": checkpoint_sha256(args.checkpoint)}
    else:
        label = _resolve_label(args.label, class_names)
        atlas = _load_or_build_atlas(args, model, clips, meta)
        sequences = sample_conditional(atlas, model, label, args.count,
                                       RngStream(args.seed), mode=args.mode)
        manifest = generation_manifest(label, args.count, args.seed, atlas,
                                       checkpoint_sha256(args.checkpoint), args.mode)
        atlas.save(out_dir / "atlas.npz")
    payload = [
        {"id": seq.clip_id, "fps": meta["fps"],
         "skeleton": meta.get("skeletons", {}).get(sorted(meta["skeletons"])[0], []),
         "frames": seq.poses.tolist()}
        for seq in sequences
    ]
    (out_dir / "generated.json").write_text(json.dumps(payload) + "\n", encoding="utf-8")
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_config(out_dir, "generate", args)
    print(json.dumps({"written": len(sequences), "out": str(out_dir / "generated.json")}))
    return 0


def _load_or_build_atlas(args, model: Model, clips, meta) -> LatentAtlas:
    if args.atlas and Path(args.atlas).exists():
        return LatentAtlas.load(args.atlas)
    table = LabelTable.from_csv(args.labels, k=meta["k"])
    windows = _windows(clips, meta)
    if args.split and Path(args.split).exists():
        assignment = SplitAssignment.from_json(args.split)
        pairs = _load_labeled_pairs(assignment, "labeled_train", windows, table)
    else:
        pairs = []
        for w in windows:
            record = table.get(w.clip_id, w.start_frame)
            if record is not None:
                pairs.append((w, record.label.value))
    return build_atlas(model, pairs)


def cmd_serve(args) -> int:
    from .service import load_session, run_server

    state = load_session(args.dataset, args.labels, checkpoint=args.checkpoint,
                         atlas_path=args.atlas)
    run_server(state, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of defaults; flags override")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effortstudio",
                                     description="label-conditioned motion sequence studio")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load or synthesize a dataset; normalize and cache it")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None, help="clip file or directory")
    p.add_argument("--format", choices=("csv", "json", "raw-binary"), default="csv")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--clips", type=int, default=6)
    p.add_argument("--frames", type=int, default=2000)
    p.add_argument("--joints", type=int, default=5)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--barycenter", choices=("fixed-xy", "none"), default="fixed-xy")
    p.add_argument("--manual-fraction", type=float, default=0.01,
                   help="share of windows given synthetic manual labels")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment", help="expand sparse labels by between-fill then dilation")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--radius", type=int, default=6)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train the semi-supervised model")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=3e-4)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--classifier-width", type=int, default=32)
    p.add_argument("--output-variance", type=float, default=1.0)
    p.add_argument("--selection", choices=("dance", "watch"), default="dance")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume-from", type=Path, default=None)
    p.add_argument("--labeled-fractions", type=float, nargs=3, default=[0.79, 0.05, 0.03])
    p.add_argument("--unlabeled-fractions", type=float, nargs=3, default=[0.9, 0.05, 0.05])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="classifier accuracy and reconstruction distance")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="conditional or prior sampling from a checkpoint")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, default=None)
    p.add_argument("--atlas", type=Path, default=None)
    p.add_argument("--label", type=str, default=None)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--mode", choices=("gaussian", "kde"), default="gaussian")
    p.add_argument("--prior", action="store_true", help="sample from the standard normal prior")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("serve", help="run the studio HTTP service")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", type=Path,
                   default=os.environ.get("EFFORT_DATASET"))
    p.add_argument("--labels", type=Path, default=os.environ.get("EFFORT_LABELS"))
    p.add_argument("--checkpoint", type=Path, default=os.environ.get("EFFORT_CHECKPOINT"))
    p.add_argument("--atlas", type=Path, default=os.environ.get("EFFORT_ATLAS"))
    p.add_argument("--host", type=str, default=os.environ.get("EFFORT_HOST", "127.0.0.1"))
    p.add_argument("--port", type=int, default=int(os.environ.get("EFFORT_PORT", "8600")))
    p.set_defaults(func=cmd_serve)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Pull --config out of argv and fold its values in as parser defaults."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    path = Path(argv[at + 1])
    payload = json.loads(path.read_text(encoding="utf-8"))
    command = argv[0] if argv and not argv[0].startswith("-") else None
    defaults = dict(payload.get("common", {}))
    if command and command in payload:
        defaults.update(payload[command])
    flat = {k: v for k, v in payload.items() if not isinstance(v, dict)}
    defaults.update(flat)
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        for name, sub in action.choices.items():
            if command in (None, name):
                known = {a.dest for a in sub._actions}
                sub.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except EffortStudioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
