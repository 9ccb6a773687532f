"""On-disk frame corpus shared by data generation, training, and evaluation.

Layout under a dataset root:

    rgb/%06d.png      8-bit color, white background
    mask/%06d.png     8-bit {0, 255} foreground mask
    normal/%06d.png   8-bit mapped from [-1, 1] per channel
    params.json       per-frame animation parameters, camera, and split
    manifest.json     generation seed, light, template hash, frame counts

Images round-trip 8-bit-exact; parameters round-trip at full float precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .morphable import AnimationParams
from .rendering import Camera, load_image_png, save_image_png

SPLITS = ("train", "test", "holdout")


@dataclass
class FrameRecord:
    """One rendered frame with its driving parameters."""

    frame_id: int
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) bool
    normal: np.ndarray | None  # (H, W, 3) float in [-1, 1]; zero off-mask
    camera: Camera
    params: AnimationParams
    split: str = "train"

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.mask.shape
        if self.rgb.shape != (h, w, 3):
            raise InvalidInputError("rgb and mask dimensions disagree")
        if self.normal is not None:
            self.normal = np.asarray(self.normal, dtype=np.float64)
            if self.normal.shape != (h, w, 3):
                raise InvalidInputError("normal and mask dimensions disagree")
        if (self.camera.height, self.camera.width) != (h, w):
            raise InvalidInputError("camera resolution does not match the images")
        if self.split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class Dataset:
    frames: list[FrameRecord]
    manifest: dict = field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str) -> list[FrameRecord]:
        return [f for f in self.frames if f.split == name]

    def __len__(self) -> int:
        return len(self.frames)


def camera_to_dict(camera: Camera) -> dict:
    return {
        "width": camera.width,
        "height": camera.height,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "pose": camera.pose.tolist(),
        "near": camera.near,
        "far": camera.far,
    }


def camera_from_dict(data: dict) -> Camera:
    return Camera(
        width=int(data["width"]),
        height=int(data["height"]),
        fx=float(data["fx"]),
        fy=float(data["fy"]),
        cx=float(data["cx"]),
        cy=float(data["cy"]),
        pose=np.array(data["pose"], dtype=np.float64),
        near=float(data.get("near", 0.1)),
        far=float(data.get("far", 4.0)),
    )


def _frame_entry(frame: FrameRecord) -> dict:
    return {
        "frame_id": frame.frame_id,
        "split": frame.split,
        "theta": frame.params.theta.tolist(),
        "psi": frame.params.psi.tolist(),
        "camera": camera_to_dict(frame.camera),
    }


def write_dataset(root, frames: list[FrameRecord], manifest: dict | None = None) -> Path:
    """Write the full layout; returns the dataset root."""
    root = Path(root)
    for sub in ("rgb", "mask", "normal"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for frame in frames:
        name = f"{frame.frame_id:06d}.png"
        save_image_png(root / "rgb" / name, frame.rgb, "rgb")
        save_image_png(root / "mask" / name, frame.mask, "mask")
        normal = frame.normal if frame.normal is not None else np.zeros_like(frame.rgb)
        save_image_png(root / "normal" / name, normal, "normal")
    with open(root / "params.json", "w") as fh:
        json.dump({"frames": [_frame_entry(f) for f in frames]}, fh, indent=1)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest or {}, fh, indent=1, sort_keys=True)
    return root


def load_dataset(root, split: str | None = None) -> Dataset:
    """Read a dataset back; `split` restricts to one subset."""
    root = Path(root)
    params_path = root / "params.json"
    if not params_path.exists():
        raise InvalidInputError(f"no dataset at {root} (missing {params_path})")
    with open(params_path) as fh:
        entries = json.load(fh)["frames"]
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    frames = []
    for entry in entries:
        if split is not None and entry["split"] != split:
            continue
        fid = int(entry["frame_id"])
        name = f"{fid:06d}.png"
        frames.append(
            FrameRecord(
                frame_id=fid,
                rgb=load_image_png(root / "rgb" / name, "rgb"),
                mask=load_image_png(root / "mask" / name, "mask"),
                normal=load_image_png(root / "normal" / name, "normal"),
                camera=camera_from_dict(entry["camera"]),
                params=AnimationParams(
                    theta=np.array(entry["theta"]), psi=np.array(entry["psi"]), frame_id=fid
                ),
                split=entry["split"],
            )
        )
    return Dataset(frames=frames, manifest=manifest, root=root)
