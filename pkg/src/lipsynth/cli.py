"""Batch command-line surface: corpus generation, training, evaluation,
rendering and loss-curve plotting."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import load_config, save_config
from .corpus import (
    default_inventory,
    generate_corpus,
    read_corpus,
    write_corpus,
    write_matrix,
)
from .errors import LipSynthError
from .evaluate import evaluate_clips, synthesize_clip
from .flow import estimate_flow
from .metrics import (
    LipReadingProbe,
    collapse_sequence,
    frame_labels,
    train_lip_probe,
)
from .training import (
    load_gen_checkpoint,
    load_sync_checkpoint,
    read_loss_log,
    split_corpus,
    train_stage1,
    train_stage2,
)


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)
    summary: str = ""


def _usage_error(parser, message):
    parser.error(message)  # exits with code 2


def cmd_corpus(args, parser):
    if args.clips < 1:
        _usage_error(parser, "--clips must be >= 1")
    if args.resolution < 32:
        _usage_error(parser, "--resolution must be >= 32")
    clips = generate_corpus(args.clips, args.seed, resolution=args.resolution,
                            noise_level=args.noise)
    write_corpus(clips, args.out)
    read_corpus(args.out)  # validate what we just wrote
    return CommandResult(
        0, [str(Path(args.out) / "manifest.json")],
        f"wrote {args.clips} clips at {args.resolution}x{args.resolution} to {args.out}",
    )


def _load_run_config(args, parser):
    config = load_config(args.config)
    for name in args.ablate or []:
        config = config.with_ablation(name)
    if getattr(args, "out_dir", None):
        from dataclasses import replace
        config = replace(config, out_dir=args.out_dir)
    return config


def cmd_train(args, parser):
    config = _load_run_config(args, parser)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "effective_config.json")
    if args.stage == "sync":
        path = train_stage1(config, resume=args.resume)
        summary = f"stage-1 training finished; checkpoint at {path}"
    elif args.stage == "gen":
        if not args.sync_checkpoint or not Path(args.sync_checkpoint).exists():
            raise LipSynthError(
                "train gen requires --sync-checkpoint pointing at a stage-1 checkpoint"
            )
        path = train_stage2(config, args.sync_checkpoint, resume=args.resume)
        summary = f"stage-2 training finished; checkpoint at {path}"
    else:  # probe
        clips = read_corpus(config.corpus.path)
        probe, acc = train_lip_probe(
            clips, default_inventory(), seed=config.seed,
            holdout_fraction=config.corpus.holdout_fraction,
        )
        path = out_dir / "probe.ckpt"
        ckpt.save_checkpoint(
            {"probe": probe.state_dict(), "n_classes": probe.n_classes}, path,
            metadata={"holdout_frame_accuracy": acc},
        )
        summary = f"probe trained (held-out frame accuracy {acc:.3f}); checkpoint at {path}"
    return CommandResult(
        0, [str(path), str(out_dir / "effective_config.json")], summary
    )


def _load_probe(path):
    entries, _ = ckpt.load_checkpoint(path, expected_entries=["probe"])
    probe = LipReadingProbe(n_classes=entries["n_classes"])
    probe.load_state_dict(entries["probe"])
    probe.eval()
    return probe


def cmd_eval(args, parser):
    config = load_config(args.config)
    inventory = default_inventory()
    clips = read_corpus(config.corpus.path)
    _, holdout = split_corpus(clips, config.corpus.holdout_fraction)
    artifacts = []

    if args.ground_truth:
        # identity evaluation: ground truth scored against itself, phoneme
        # sequences taken from the alignment labels
        from .metrics import frechet_distance, phoneme_error_rate, ssim
        from .evaluate import sync_video_features
        sync, phenc, _ = load_sync_checkpoint(args.sync_checkpoint, config, inventory)
        ssims, pers, feats = [], [], []
        for clip in holdout:
            real = clip.frames.astype(np.float64)
            ssims.extend(ssim(f, f) for f in real)
            labels = [inventory.symbols[i] for i in frame_labels(clip, inventory)]
            pers.append(phoneme_error_rate(collapse_sequence(labels), clip.phonemes))
            feats.append(sync_video_features(real, sync, config.sync.window))
        feats = np.concatenate(feats)
        report = {
            "per": float(np.mean(pers)),
            "ssim": 100.0 * float(np.mean(ssims)),
            "fid": frechet_distance(feats, feats.copy()),
            "lse_d": 0.0, "lse_c": 0.0,
            "metadata": {"mode": "ground_truth"},
        }
    else:
        sync, phenc, _ = load_sync_checkpoint(args.sync_checkpoint, config, inventory)
        generator, _, _ = load_gen_checkpoint(args.checkpoint, config)
        if args.probe:
            probe = _load_probe(args.probe)
        else:
            train_clips, _ = split_corpus(clips, config.corpus.holdout_fraction)
            probe, _ = train_lip_probe(train_clips, inventory, seed=config.seed)
        result, extras = evaluate_clips(
            holdout, generator, sync, phenc, probe, inventory,
            window=config.sync.window, fixed_len=config.phoneme.fixed_len,
            metadata={"checkpoint": str(args.checkpoint), "split": "holdout"},
            use_fusion=config.ablation.use_phoneme_fusion,
            flow_alpha=config.flow.alpha, flow_iterations=config.flow.iterations,
        )
        report = result.to_dict()
        report["metadata"]["mean_flow_error"] = float(np.mean(extras["flow_errors"]))
        report["metadata"]["mean_rec_error"] = float(np.mean(extras["rec_errors"]))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1))
    artifacts.append(str(out))
    if args.csv:
        row = {k: report[k] for k in ("per", "ssim", "fid", "lse_d", "lse_c")}
        row["label"] = args.label or (args.checkpoint or "ground_truth")
        exists = Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["label", "per", "ssim", "fid",
                                                    "lse_d", "lse_c"])
            if not exists:
                writer.writeheader()
            writer.writerow(row)
        artifacts.append(args.csv)
    return CommandResult(0, artifacts, f"metrics written to {out}")


def cmd_render(args, parser):
    from PIL import Image

    config = load_config(args.config)
    inventory = default_inventory()
    clips = read_corpus(config.corpus.path)
    if not 0 <= args.clip_index < len(clips):
        _usage_error(parser, f"--clip-index out of range [0, {len(clips)})")
    clip = clips[args.clip_index]
    sync, phenc, _ = load_sync_checkpoint(args.sync_checkpoint, config, inventory)
    generator, _, _ = load_gen_checkpoint(args.checkpoint, config)
    frames = synthesize_clip(clip, generator, phenc, inventory,
                             window=config.sync.window,
                             fixed_len=config.phoneme.fixed_len)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for i, frame in enumerate(frames):
        p = out_dir / f"frame_{i:04d}.png"
        Image.fromarray(np.round(frame * 255.0).astype(np.uint8)).save(p)
        artifacts.append(str(p))
    sidecar = out_dir / "timing.json"
    sidecar.write_text(json.dumps({
        "n_frames": int(frames.shape[0]),
        "phonemes": clip.phonemes,
        "durations": clip.durations,
    }, indent=1))
    artifacts.append(str(sidecar))
    if args.dump_flow:
        for i in range(1, frames.shape[0]):
            fl = estimate_flow(frames[i], frames[i - 1],
                               config.flow.alpha, config.flow.iterations)
            p = out_dir / f"flow_{i:04d}.lsm"
            write_matrix(p, np.concatenate([fl.u, fl.v_comp], axis=0))
            artifacts.append(str(p))
    return CommandResult(0, artifacts,
                         f"rendered {frames.shape[0]} frames to {out_dir}")


def cmd_plot(args, parser):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_loss_log(args.log)
    if not records:
        raise LipSynthError(f"no records in loss log {args.log}")
    by_name = {}
    for r in records:
        by_name.setdefault(r["loss_name"], []).append((r["step"], r["value"]))
    names = sorted(by_name)
    ncols = min(3, len(names))
    nrows = (len(names) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 3 * nrows),
                             squeeze=False)
    for ax, name in zip(axes.flat, names):
        pts = sorted(by_name[name])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], linewidth=0.8)
        ax.set_title(name)
        ax.set_xlabel("step")
    for ax in axes.flat[len(names):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    return CommandResult(0, [args.out], f"plotted {len(names)} loss panels to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lipsynth",
        description="Phoneme-and-audio-driven lip synthesis: corpus, training, "
                    "evaluation and rendering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate a synthetic corpus")
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--resolution", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run a training stage")
    p.add_argument("stage", choices=["sync", "gen", "probe"])
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--sync-checkpoint", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--ablate", action="append", choices=["cons", "diff", "phoneme"])

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--sync-checkpoint", required=True)
    p.add_argument("--probe", default=None)
    p.add_argument("--ground-truth", action="store_true")
    p.add_argument("--label", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("render", help="synthesize a clip to PNG frames")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sync-checkpoint", required=True)
    p.add_argument("--clip-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-flow", action="store_true")

    p = sub.add_parser("plot", help="render loss-curve panels from an NDJSON log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "render": cmd_render,
    "plot": cmd_plot,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.ground_truth and not args.checkpoint:
        parser.error("eval requires --checkpoint unless --ground-truth is set")
    try:
        result = _HANDLERS[args.command](args, parser)
    except LipSynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(result.summary)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
