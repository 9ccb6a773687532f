"""Dataclass configuration for every tunable constant, with a plain-text
KEY=VALUE file format (dotted section names, JSON-parsed values).

Example file::

    optim.learning_rate = 1e-4
    render.n_samples = 64
    broyden.init_bones = ["global", "neck", "jaw"]
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import InvalidInputError

JOINT_NAMES = ("global", "neck", "jaw", "eye_left", "eye_right")
N_JOINTS = len(JOINT_NAMES)
N_POSE_JOINTS = N_JOINTS - 1  # global joint carries no pose correctives
N_EXPR = 50
LATENT_DIM = 32
CANONICAL_JAW_PITCH = 0.2  # radians; slightly open mouth in the canonical pose


@dataclass
class FieldConfig:
    """Architecture of the three field networks."""

    n_expr: int = N_EXPR
    n_joints: int = N_JOINTS
    latent_dim: int = LATENT_DIM
    pe_freqs: int = 6
    geometry_hidden: tuple[int, ...] = (256,) * 8
    deformation_hidden: tuple[int, ...] = (128,) * 4
    texture_hidden: tuple[int, ...] = (256,) * 4
    # softplus100 keeps the warp twice differentiable, which the implicit
    # gradients through normals rely on; texture only needs first derivatives.
    geometry_activation: str = "softplus100"
    deformation_activation: str = "softplus100"
    texture_activation: str = "relu"
    init_radius: float = 0.5
    seed: int = 0

    @property
    def n_pose_joints(self) -> int:
        return self.n_joints - 1


@dataclass
class BroydenConfig:
    """Correspondence-search constants."""

    max_steps: int = 10
    tolerance: float = 1e-5
    max_backtracks: int = 4
    dedup_tol: float = 1e-4
    # extra full-Newton iterations applied to every converged root; a fixed
    # count makes the returned point a smooth function of the fields (no
    # early-exit truncation jumps), which finite-difference probes need
    polish_steps: int = 0
    init_bones: tuple[str, ...] = ("global", "neck", "jaw")
    # "min" reports the least-occupied candidate; "max" follows the union
    # convention (most-occupied wins when roots disagree)
    occ_aggregation: str = "min"


@dataclass
class RenderConfig:
    n_samples: int = 64
    n_secant: int = 8
    near: float = 0.1
    far: float = 4.0
    # rays are only sampled where they cross this origin-centered sphere;
    # occupancy is 0 outside by construction
    bound_radius: float = 1.2
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # anchor sample reported for rays without a surface crossing: "max_occ"
    # (most-likely-surface, the trainable default) or "min_occ"
    mask_point_rule: str = "max_occ"
    max_condition: float = 1e8
    ray_chunk: int = 2048


@dataclass
class LossConfig:
    lambda_mask: float = 2.0
    lambda_flame: float = 1.0
    lambda_expr: float = 1000.0
    lambda_pose: float = 1000.0
    lambda_weights: float = 0.1
    occ_clamp: float = 1e-6
    norm_eps: float = 1e-12


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_factor: float = 0.5
    decay_after_epoch: int = 40
    epochs: int = 60


@dataclass
class TrainConfig:
    rays_per_step: int = 512
    foreground_fraction: float = 0.75
    checkpoint_every: int = 10
    seed: int = 0
    broyden_tolerance: float = 1e-5  # override of broyden.tolerance during training
    # train-time march budget; None inherits render.n_samples / render.n_secant.
    # Gradient estimation tolerates a much coarser march than final rendering,
    # so presets can train cheap while checkpoints keep a high-quality renderer.
    march_samples: int | None = None
    march_secant: int | None = None


@dataclass
class DataConfig:
    """Synthetic dataset schedule."""

    train_frames: int = 200
    test_frames: int = 50
    holdout_frames: int = 10
    width: int = 64
    height: int = 64
    focal: float = 76.0
    camera_distance: float = 1.7
    train_psi_norm_max: float = 1.0
    test_psi_norm_min: float = 1.5
    test_psi_norm_max: float = 3.0
    train_jaw_max: float = 0.1  # offset from the canonical jaw pitch
    test_jaw_max: float = 0.2  # offsets reach 0.4 total pitch past canonical 0.2
    neck_max: float = 0.15
    orbit_azimuth_range: float = 0.9  # radians swept symmetrically around the face
    orbit_elevation_range: float = 0.25
    light_direction: tuple[float, float, float] = (0.3, 0.5, 0.8)
    ambient: float = 0.35
    seed: int = 1234
    # toy-head construction; stored so checkpoints can rebuild the template
    template_seed: int = 7
    template_subdivisions: int = 4


@dataclass
class ServiceConfig:
    max_image_side: int = 512
    parallelism: int = 2


@dataclass
class Config:
    fields: FieldConfig = field(default_factory=FieldConfig)
    broyden: BroydenConfig = field(default_factory=BroydenConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)


def _coerce(value, target_type):
    if target_type is tuple or (hasattr(target_type, "__origin__") and target_type.__origin__ is tuple):
        return tuple(value)
    return value


def set_key(cfg: Config, dotted: str, raw: str) -> None:
    """Apply `section.name = json-value` to a Config in place."""
    try:
        section_name, key = dotted.strip().split(".", 1)
    except ValueError:
        raise InvalidInputError(f"config key {dotted!r} must look like section.name")
    if not hasattr(cfg, section_name):
        raise InvalidInputError(f"unknown config section {section_name!r}")
    section = getattr(cfg, section_name)
    sec_fields = {f.name: f for f in fields(section)}
    if key not in sec_fields:
        raise InvalidInputError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()  # bare strings allowed
    current = getattr(section, key)
    declared = str(sec_fields[key].type)
    if value is None:
        if "None" not in declared:
            raise InvalidInputError(f"{dotted} does not accept null")
        setattr(section, key, None)
        return
    if current is None:
        if "int" in declared:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or (
                isinstance(value, float) and not value.is_integer()
            ):
                raise InvalidInputError(f"{dotted} expects an integer, got {raw!r}")
            value = int(value)
        setattr(section, key, value)
        return
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise InvalidInputError(f"{dotted} expects a list, got {raw!r}")
        value = tuple(value)
    elif isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, int) and not isinstance(value, bool):
        if not isinstance(value, (int, float)) or (isinstance(value, float) and not value.is_integer()):
            raise InvalidInputError(f"{dotted} expects an integer, got {raw!r}")
        value = int(value)
    elif isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise InvalidInputError(f"{dotted} expects a number, got {raw!r}")
        value = float(value)
    setattr(section, key, value)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    """Build a Config from defaults, an optional KEY=VALUE file, then overrides."""
    cfg = Config()
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}:{lineno}: expected KEY = VALUE")
            key, raw = line.split("=", 1)
            set_key(cfg, key.strip(), raw.strip())
    for item in overrides or []:
        if "=" not in item:
            raise InvalidInputError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw.strip())
    return cfg


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> Config:
    cfg = Config()
    for sec_field in fields(cfg):
        if sec_field.name not in data:
            continue
        section = getattr(cfg, sec_field.name)
        for key, value in data[sec_field.name].items():
            if hasattr(section, key):
                current = getattr(section, key)
                if isinstance(current, tuple) and isinstance(value, list):
                    value = tuple(value)
                setattr(section, key, value)
    return cfg


def desk_scale_config() -> Config:
    """Training preset sized for a single desktop CPU core.

    Smaller field networks and per-step ray budgets than the full-scale
    defaults; loss weights and the optimizer schedule are unchanged. The
    march used for gradient estimation is coarser than the render config
    the checkpoint carries: evaluation and serving stay accurate while
    each training step stays cheap.
    """
    return Config(
        fields=FieldConfig(
            pe_freqs=4,
            geometry_hidden=(48, 48, 48),
            deformation_hidden=(48, 48),
            texture_hidden=(48, 48),
            seed=0,
        ),
        render=RenderConfig(n_samples=48, n_secant=25),
        train=TrainConfig(rays_per_step=256, seed=0, march_samples=24, march_secant=8),
    )


def dump_config(cfg: Config) -> str:
    """Render a Config as the KEY=VALUE text format."""
    lines = []
    for sec_field in fields(cfg):
        section = getattr(cfg, sec_field.name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{sec_field.name}.{f.name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
