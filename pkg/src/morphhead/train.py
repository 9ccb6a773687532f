"""Epoch training loop: ray batches, loss accumulation, Adam, checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import Config, config_to_dict
from .datasets import FrameRecord
from .errors import InvalidInputError, TrainingDivergedError
from .fields import (
    FieldNetworks,
    load_networks,
    parameters,
    save_networks,
    zero_gradients,
)
from .losses import compute_losses
from .morphable import MorphableTemplate
from .optim import (
    OptimState,
    adam_step,
    current_lr,
    init_optimizer,
    state_from_arrays,
    state_to_arrays,
)
from .rendering import FieldScene, generate_rays, march_rays
from .warp import make_warp_context

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "checkpoint_final.ckpt"
LAST_GOOD_CHECKPOINT = "checkpoint_last_good.ckpt"
METRICS_LOG = "metrics.jsonl"


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    epochs_completed: int
    history: list[dict]


def sample_pixel_batch(
    rng: np.random.Generator, mask: np.ndarray, n_rays: int, foreground_fraction: float
) -> np.ndarray:
    """Flat pixel indices for one step: a foreground-oversampled share drawn
    from mask-true pixels (with replacement), the rest uniform over the frame."""
    if not 0.0 <= foreground_fraction <= 1.0:
        raise InvalidInputError("foreground_fraction must lie in [0, 1]")
    n_pixels = mask.size
    if n_pixels == 0 or n_rays <= 0:
        return np.zeros(0, dtype=np.int64)
    fg = np.flatnonzero(mask.reshape(-1))
    n_fg = int(round(foreground_fraction * n_rays)) if fg.size else 0
    picks = []
    if n_fg:
        picks.append(rng.choice(fg, size=n_fg, replace=True))
    if n_rays - n_fg:
        picks.append(rng.integers(0, n_pixels, size=n_rays - n_fg))
    return np.concatenate(picks)


def save_checkpoint(
    path, nets: FieldNetworks, state: OptimState, cfg: Config, epochs_completed: int
) -> Path:
    opt_arrays, opt_meta = state_to_arrays(state)
    save_networks(
        path,
        nets,
        extra_arrays=opt_arrays,
        extra_meta={
            "optimizer": opt_meta,
            "config": config_to_dict(cfg),
            "epochs_completed": int(epochs_completed),
            "train_seed": cfg.train.seed,
        },
    )
    return Path(path)


def load_checkpoint(path) -> tuple[FieldNetworks, OptimState | None, dict]:
    nets, extra, meta = load_networks(path)
    state = state_from_arrays(extra, meta["optimizer"]) if "optimizer" in meta else None
    return nets, state, meta


def fit(
    frames: list[FrameRecord],
    nets: FieldNetworks,
    template: MorphableTemplate,
    cfg: Config,
    out_dir,
) -> TrainResult:
    """Train the fields on rendered frames.

    Each step draws one frame and a pixel batch, marches the rays, and
    applies one Adam update; an epoch visits every frame once in a shuffled
    order. Checkpoints land every `checkpoint_every` epochs and at the end;
    the metrics log gains one JSON line per epoch. A non-finite loss skips
    the step; two in a row abort with the last good checkpoint on disk.
    """
    if not frames:
        raise InvalidInputError("training requires at least one frame")
    if len(nets.frame_latents) < len(frames):
        raise InvalidInputError(
            f"{len(frames)} frames need {len(frames)} latents, networks hold "
            f"{len(nets.frame_latents)}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / METRICS_LOG

    rng = np.random.default_rng(cfg.train.seed)
    state = init_optimizer(parameters(nets), cfg.optim)
    params_table = parameters(nets)
    broyden = replace(cfg.broyden, tolerance=cfg.train.broyden_tolerance)
    render_cfg = cfg.render
    if cfg.train.march_samples is not None:
        render_cfg = replace(render_cfg, n_samples=cfg.train.march_samples)
    if cfg.train.march_secant is not None:
        render_cfg = replace(render_cfg, n_secant=cfg.train.march_secant)

    contexts = [make_warp_context(template, f.params) for f in frames]
    rays = [generate_rays(f.camera) for f in frames]
    flat_rgb = [f.rgb.reshape(-1, 3) for f in frames]
    flat_mask = [f.mask.reshape(-1) for f in frames]

    consecutive_bad = 0
    history: list[dict] = []
    for epoch in range(cfg.optim.epochs):
        state.epoch = epoch
        t0 = time.perf_counter()
        sums = np.zeros(4)
        n_good = n_hits = n_excluded = 0
        for fi in rng.permutation(len(frames)):
            frame = frames[fi]
            idx = sample_pixel_batch(
                rng, frame.mask, cfg.train.rays_per_step, cfg.train.foreground_fraction
            )
            jitter = rng.random((len(idx), render_cfg.n_samples))
            scene = FieldScene(
                contexts[fi], nets, nets.frame_latents[fi], broyden, render_cfg.bound_radius
            )
            batch = march_rays(scene, rays[fi][0][idx], rays[fi][1][idx], render_cfg, jitter=jitter)
            grads = zero_gradients(nets)
            vals = compute_losses(
                contexts[fi],
                nets,
                nets.frame_latents[fi],
                template,
                batch,
                flat_rgb[fi][idx],
                flat_mask[fi][idx],
                cfg.loss,
                grads,
                frame_id=int(fi),
                max_condition=render_cfg.max_condition,
            )
            if not np.isfinite(vals.total):
                consecutive_bad += 1
                logger.warning(
                    "non-finite loss at epoch %d frame %d (%d consecutive)",
                    epoch, frame.frame_id, consecutive_bad,
                )
                if consecutive_bad >= 2:
                    path = save_checkpoint(out / LAST_GOOD_CHECKPOINT, nets, state, cfg, epoch)
                    raise TrainingDivergedError(
                        f"loss non-finite twice consecutively at epoch {epoch}; "
                        f"last good checkpoint: {path}"
                    )
                continue
            consecutive_bad = 0
            adam_step(state, params_table, grads)
            sums += (vals.rgb, vals.mask, vals.flame, vals.total)
            n_good += 1
            n_hits += vals.n_hits
            n_excluded += vals.excluded
        means = sums / max(n_good, 1)
        entry = {
            "epoch": epoch,
            "loss_rgb": means[0],
            "loss_mask": means[1],
            "loss_flame": means[2],
            "loss_total": means[3],
            "lr": current_lr(state),
            "steps": n_good,
            "n_hits": n_hits,
            "excluded_rays": n_excluded,
            "skipped_steps": state.skipped_steps,
            "duration_sec": round(time.perf_counter() - t0, 3),
        }
        with open(log_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
        history.append(entry)
        logger.info(
            "epoch %d: total %.5f (rgb %.5f mask %.5f flame %.5f) lr %.2e",
            epoch, means[3], means[0], means[1], means[2], entry["lr"],
        )
        if cfg.train.checkpoint_every > 0 and (epoch + 1) % cfg.train.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_ep{epoch + 1:03d}.ckpt", nets, state, cfg, epoch + 1)

    final = save_checkpoint(out / FINAL_CHECKPOINT, nets, state, cfg, cfg.optim.epochs)
    return TrainResult(final, log_path, cfg.optim.epochs, history)
