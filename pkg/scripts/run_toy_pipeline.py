#!/usr/bin/env python3
"""End-to-end toy pipeline: synthesize the dataset, train, evaluate.

Generates the 200/50/10-frame 64x64 dataset (reused if already present),
fits the avatar fields with the desk-scale preset, then scores the
held-out training-distribution frames and the first 10 strong-expression
test frames. Results land in <out>/summary.json.

Examples:
    python3 scripts/run_toy_pipeline.py --out runs/toy
    python3 scripts/run_toy_pipeline.py --out runs/ablation --ablation
    python3 scripts/run_toy_pipeline.py --out runs/pilot --epochs 8 --checkpoint-every 2
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from morphhead.config import desk_scale_config, dump_config
from morphhead.datasets import load_dataset
from morphhead.fields import build_networks
from morphhead.infer import evaluate_frames, load_for_inference, template_from_config
from morphhead.synth import generate_dataset
from morphhead.train import fit


def ensure_dataset(data_dir: Path, cfg):
    if (data_dir / "params.json").exists():
        print(f"reusing dataset at {data_dir}")
        return load_dataset(data_dir)
    print(f"generating dataset at {data_dir} ...")
    t0 = time.monotonic()
    template = template_from_config(cfg.data)
    dataset = generate_dataset(template, cfg.data, data_dir)
    print(f"  {len(dataset)} frames in {time.monotonic() - t0:.0f}s")
    return dataset


def evaluate_run(checkpoint, dataset):
    nets, template, cfg = load_for_inference(checkpoint)
    holdout = dataset.split("holdout")
    test = dataset.split("test")[:10]
    scores = {}
    for name, frames in (("holdout", holdout), ("test_strong", test)):
        report = evaluate_frames(frames, nets, template, cfg)
        agg = report.aggregate
        scores[name] = {
            "l1": agg.l1, "psnr": agg.psnr, "ssim": agg.ssim,
            "normal_error": agg.normal_error, "iou": agg.iou,
            "n_frames": len(frames),
        }
    return scores


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True, help="run directory")
    ap.add_argument("--data", type=Path, default=None,
                    help="dataset directory (default <out>/../dataset)")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--checkpoint-every", type=int, default=10)
    ap.add_argument("--ablation", action="store_true",
                    help="drop the morphable-consistency loss (lambda_flame = 0)")
    ap.add_argument("--eval-checkpoints", action="store_true",
                    help="also score every intermediate checkpoint")
    args = ap.parse_args()

    cfg = desk_scale_config()
    cfg.optim.epochs = args.epochs
    cfg.train.checkpoint_every = args.checkpoint_every
    if args.ablation:
        cfg.loss.lambda_flame = 0.0

    data_dir = args.data if args.data else args.out.parent / "dataset"
    dataset = ensure_dataset(data_dir, cfg)
    train_frames = dataset.split("train")

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.cfg").write_text(dump_config(cfg))

    template = template_from_config(cfg.data)
    nets = build_networks(cfg.fields, n_frames=len(train_frames))
    print(f"training {args.epochs} epochs on {len(train_frames)} frames "
          f"(ablation={args.ablation}) ...")
    t0 = time.monotonic()
    result = fit(train_frames, nets, template, cfg, args.out)
    train_time = time.monotonic() - t0
    print(f"  done in {train_time / 3600:.2f}h -> {result.checkpoint_path}")

    summary = {
        "ablation": args.ablation,
        "epochs": result.epochs_completed,
        "train_seconds": round(train_time, 1),
        "final": evaluate_run(result.checkpoint_path, dataset),
    }
    if args.eval_checkpoints:
        summary["checkpoints"] = {}
        for ckpt in sorted(args.out.glob("checkpoint_ep*.ckpt")):
            summary["checkpoints"][ckpt.name] = evaluate_run(ckpt, dataset)
            print(f"  {ckpt.name}: {summary['checkpoints'][ckpt.name]}")

    (args.out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary["final"], indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
