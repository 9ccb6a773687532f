"""Checkpoint-driven rendering and evaluation.

Loads trained field networks, rebuilds the matching head template from the
stored configuration, and renders arbitrary pose/expression parameters.

Novel parameters carry no per-frame latent, so renders default to the mean
of the trained latent codes; frames that were part of the training set can
be re-rendered with their own code.

Also hosts the JSON render-request schema shared by the command line and
the HTTP service, so both produce byte-identical images for equal inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import Config, DataConfig, N_EXPR, N_JOINTS, config_from_dict
from .datasets import Dataset, FrameRecord
from .errors import InvalidInputError
from .fields import FieldNetworks
from .metrics import FrameMetrics, MetricsReport, compute_metrics
from .morphable import AnimationParams, MorphableTemplate, build_toy_head, canonical_pose
from .rendering import Camera, FieldScene, ImageBundle, make_orbit_camera, render_image
from .train import load_checkpoint
from .warp import make_warp_context

OUTPUT_KINDS = ("rgb", "normal", "mask")


def template_from_config(cfg: DataConfig) -> MorphableTemplate:
    """Rebuild the head template a checkpoint or dataset was produced with."""
    return build_toy_head(seed=cfg.template_seed, subdivisions=cfg.template_subdivisions)


def resolve_latent(
    nets: FieldNetworks, params: AnimationParams, latent: np.ndarray | None = None
) -> np.ndarray:
    """Pick the latent code for a render request.

    Priority: explicit argument, then the code embedded in `params`, then
    the mean of the trained per-frame codes (the convention for novel
    parameters never seen in training).
    """
    if latent is not None:
        latent = np.asarray(latent, dtype=np.float64).ravel()
        if latent.shape[0] != nets.frame_latents.shape[1]:
            raise InvalidInputError(
                f"latent must have length {nets.frame_latents.shape[1]}, got {latent.shape[0]}"
            )
        return latent
    if params.latent is not None:
        return params.latent
    return nets.mean_latent()


def make_scene(
    nets: FieldNetworks,
    template: MorphableTemplate,
    params: AnimationParams,
    cfg: Config,
    latent: np.ndarray | None = None,
) -> FieldScene:
    ctx = make_warp_context(template, params)
    return FieldScene(
        ctx=ctx,
        nets=nets,
        latent=resolve_latent(nets, params, latent),
        broyden=cfg.broyden,
        bound_radius=cfg.render.bound_radius,
    )


def render_params(
    nets: FieldNetworks,
    template: MorphableTemplate,
    params: AnimationParams,
    camera: Camera,
    cfg: Config,
    latent: np.ndarray | None = None,
    seed: int = 0,
) -> ImageBundle:
    """Render one frame of the learned avatar; bit-identical for equal inputs."""
    scene = make_scene(nets, template, params, cfg, latent)
    return render_image(scene, camera, cfg.render, seed=seed)


def load_for_inference(checkpoint_path) -> tuple[FieldNetworks, MorphableTemplate, Config]:
    """Load networks plus the template and configuration they were trained with."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise InvalidInputError(f"no checkpoint at {path}")
    nets, _, meta = load_checkpoint(path)
    if "config" in meta:
        cfg = config_from_dict(meta["config"])
    else:
        cfg = Config()
    return nets, template_from_config(cfg.data), cfg


def frame_latent(nets: FieldNetworks, frame: FrameRecord) -> np.ndarray:
    """Latent policy for evaluation: training frames keep their own code,
    every other split renders with the mean code (their parameters were
    never optimized against)."""
    if frame.split == "train" and 0 <= frame.frame_id < len(nets.frame_latents):
        return nets.frame_latents[frame.frame_id]
    return nets.mean_latent()


def evaluate_frames(
    frames: list[FrameRecord],
    nets: FieldNetworks,
    template: MorphableTemplate,
    cfg: Config,
    region: str = "gt",
    seed: int = 0,
) -> MetricsReport:
    """Render each frame's parameters and score against its ground truth.

    Pure in (frames, networks, config): repeated calls return identical
    reports.
    """
    report = MetricsReport(region=region)
    for frame in frames:
        params = replace(frame.params, frame_id=frame.frame_id)
        bundle = render_params(
            nets, template, params, frame.camera, cfg,
            latent=frame_latent(nets, frame), seed=seed,
        )
        scored = compute_metrics(bundle, frame, region=region, frame_id=frame.frame_id)
        report.frames.append(scored)
    return report


def evaluate_checkpoint(
    dataset: Dataset,
    checkpoint_path,
    split: str | None = None,
    region: str = "gt",
    seed: int = 0,
) -> MetricsReport:
    nets, template, cfg = load_for_inference(checkpoint_path)
    frames = dataset.split(split) if split else list(dataset.frames)
    return evaluate_frames(frames, nets, template, cfg, region=region, seed=seed)


# ---------------------------------------------------------------------------
# JSON render-request schema (shared by the CLI and the HTTP service)
# ---------------------------------------------------------------------------


@dataclass
class RenderRequest:
    """A validated single-frame render request."""

    params: AnimationParams
    camera: Camera
    output: str  # one of OUTPUT_KINDS


def _number_list(body: dict, name: str, length: int) -> np.ndarray | None:
    if name not in body:
        return None
    value = body[name]
    if not isinstance(value, (list, tuple)):
        raise InvalidInputError(f"{name} must be a list of {length} numbers")
    if len(value) != length:
        raise InvalidInputError(f"{name} must have length {length}, got {len(value)}")
    try:
        arr = np.array([float(v) for v in value], dtype=np.float64)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{name} must contain only numbers")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must contain only finite numbers")
    return arr


def _finite_number(table: dict, name: str, label: str, default: float) -> float:
    if name not in table:
        return default
    value = table[name]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise InvalidInputError(f"{label} must be a finite number")
    return float(value)


def _side(body: dict, name: str, default: int, max_side: int) -> int:
    if name not in body:
        value = default
    else:
        value = body[name]
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidInputError(f"{name} must be an integer")
    if not 1 <= value <= max_side:
        raise InvalidInputError(f"{name} must be in [1, {max_side}], got {value}")
    return value


_REQUEST_FIELDS = ("theta", "psi", "camera", "width", "height", "output")
_CAMERA_FIELDS = ("orbit_azimuth", "orbit_elevation", "distance")


def parse_render_request(body, cfg: Config) -> RenderRequest:
    """Validate a render-request JSON body against the shared schema.

    Raises InvalidInputError naming the offending field. Unspecified
    fields default to the canonical head viewed by the dataset camera.
    """
    if not isinstance(body, dict):
        raise InvalidInputError("request body must be a JSON object")
    for key in body:
        if key not in _REQUEST_FIELDS:
            raise InvalidInputError(f"unknown field {key!r}")

    theta = _number_list(body, "theta", 3 * N_JOINTS)
    psi = _number_list(body, "psi", N_EXPR)
    params = AnimationParams(
        theta=theta if theta is not None else canonical_pose(),
        psi=psi if psi is not None else np.zeros(N_EXPR),
    )

    cam_body = body.get("camera", {})
    if not isinstance(cam_body, dict):
        raise InvalidInputError("camera must be an object")
    for key in cam_body:
        if key not in _CAMERA_FIELDS:
            raise InvalidInputError(f"unknown field camera.{key!r}")
    azimuth = _finite_number(cam_body, "orbit_azimuth", "camera.orbit_azimuth", 0.0)
    elevation = _finite_number(cam_body, "orbit_elevation", "camera.orbit_elevation", 0.0)
    distance = _finite_number(cam_body, "distance", "camera.distance", cfg.data.camera_distance)
    if distance <= 0:
        raise InvalidInputError("camera.distance must be positive")

    max_side = cfg.service.max_image_side
    width = _side(body, "width", cfg.data.width, max_side)
    height = _side(body, "height", cfg.data.height, max_side)

    output = body.get("output", "rgb")
    if output not in OUTPUT_KINDS:
        raise InvalidInputError(f"output must be one of {', '.join(OUTPUT_KINDS)}")

    # constant field of view across resolutions: scale focal with width
    focal = cfg.data.focal * width / cfg.data.width
    camera = make_orbit_camera(azimuth, elevation, distance, width, height, focal=focal)
    return RenderRequest(params=params, camera=camera, output=output)


__all__ = [
    "template_from_config",
    "resolve_latent",
    "make_scene",
    "render_params",
    "load_for_inference",
    "frame_latent",
    "evaluate_frames",
    "evaluate_checkpoint",
    "parse_render_request",
    "RenderRequest",
    "OUTPUT_KINDS",
    "FrameMetrics",
]
