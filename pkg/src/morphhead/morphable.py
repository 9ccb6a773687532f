"""Discrete morphable head: template mesh, blendshapes, skinning rig.

Serves three roles: deformation prior (pseudo ground truth for supervising
the deformation field), geometry source for the synthetic-data renderer,
and provider of the per-frame bone transforms used by the continuous warp.

Conventions:
  * joints are ordered (global, neck, jaw, eye_left, eye_right);
  * pose vectors are axis-angle, 3 values per joint (15 total);
  * pose correctives exclude the global joint, so global rotation moves
    the head rigidly without deforming it;
  * the canonical pose has jaw pitch 0.2 rad (mouth slightly open), all
    other joints zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CANONICAL_JAW_PITCH, JOINT_NAMES, N_EXPR, N_JOINTS, N_POSE_JOINTS
from .containers import read_container, write_container
from .errors import InvalidInputError, InvalidStateError

PARENTS = (-1, 0, 1, 0, 0)  # neck under global, jaw under neck, eyes under global


def canonical_pose(n_joints: int = N_JOINTS) -> np.ndarray:
    """Axis-angle pose of the canonical configuration (jaw pitch 0.2)."""
    theta = np.zeros(3 * n_joints)
    theta[3 * JOINT_NAMES.index("jaw")] = CANONICAL_JAW_PITCH
    return theta


def rotation_from_axis_angle(vec: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a batch (..., 3) of axis-angle vectors."""
    vec = np.asarray(vec, dtype=np.float64)
    angle = np.linalg.norm(vec, axis=-1, keepdims=True)
    small = angle[..., 0] < 1e-12
    safe = np.where(angle == 0.0, 1.0, angle)
    axis = vec / safe
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zeros = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zeros, -z, y], axis=-1),
            np.stack([z, zeros, -x], axis=-1),
            np.stack([-y, x, zeros], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(angle)[..., None]
    c = np.cos(angle)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    if np.any(small):
        # first-order fallback keeps tiny rotations exact to float precision
        K_small = K[small]
        R_small = np.eye(3) + K_small * np.asarray(angle[small])[..., None]
        R = R.copy()
        R[small] = R_small
    return R


@dataclass
class MorphableTemplate:
    """Canonical head mesh with rig attributes.

    vertices       (V, 3) rest positions (theta = 0, psi = 0)
    faces          (F, 3) int triangle indices
    skin_weights   (V, n_j) rows on the simplex
    expr_basis     (V, n_e, 3) additive expression offsets
    pose_basis     (V, n_p * 9, 3) additive pose-corrective offsets
    joint_regressor(n_j, V) convex row weights mapping vertices to joints
    vertex_colors  (V, 3) in [0, 1]
    parent         (n_j,) bone parents, -1 for the root
    """

    vertices: np.ndarray
    faces: np.ndarray
    skin_weights: np.ndarray
    expr_basis: np.ndarray
    pose_basis: np.ndarray
    joint_regressor: np.ndarray
    vertex_colors: np.ndarray
    parent: np.ndarray
    joint_names: tuple[str, ...] = JOINT_NAMES
    _index: "GridIndex | None" = field(default=None, repr=False, compare=False)
    _canonical_vertices: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]

    def validate(self) -> None:
        if self.n_vertices == 0:
            raise InvalidStateError("template has no vertices")
        if self.faces.min() < 0 or self.faces.max() >= self.n_vertices:
            raise InvalidInputError("faces index out of range")
        row_sums = self.skin_weights.sum(axis=1)
        if np.any(self.skin_weights < 0) or np.max(np.abs(row_sums - 1.0)) > 1e-6:
            raise InvalidInputError("skin weights must be convex per vertex")
        reg_sums = self.joint_regressor.sum(axis=1)
        if np.max(np.abs(reg_sums - 1.0)) > 1e-6:
            raise InvalidInputError("joint regressor rows must sum to 1")
        _validate_chain(self.parent)

    def canonical_vertices(self) -> np.ndarray:
        """Vertices in the canonical configuration (jaw slightly open).

        This is the space the implicit fields live in; nearest-vertex
        queries run against these positions.
        """
        if self._canonical_vertices is None:
            self._canonical_vertices = mesh_pose(self, canonical_pose(self.n_joints), np.zeros(self.n_expr))
        return self._canonical_vertices

    def spatial_index(self) -> "GridIndex":
        if self._index is None:
            self._index = GridIndex(self.canonical_vertices(), self.faces)
        return self._index

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        arrays = {
            "vertices": self.vertices,
            "faces": self.faces.astype(np.int64),
            "skin_weights": self.skin_weights,
            "expr_basis": self.expr_basis,
            "pose_basis": self.pose_basis,
            "joint_regressor": self.joint_regressor,
            "vertex_colors": self.vertex_colors,
            "parent": self.parent.astype(np.int64),
        }
        full_meta = {"kind": "morphable_template", "joint_names": list(self.joint_names)}
        full_meta.update(meta or {})
        write_container(path, arrays, full_meta)

    @classmethod
    def load(cls, path: str | Path) -> "MorphableTemplate":
        arrays, meta = read_container(path)
        tpl = cls(
            vertices=arrays["vertices"],
            faces=arrays["faces"],
            skin_weights=arrays["skin_weights"],
            expr_basis=arrays["expr_basis"],
            pose_basis=arrays["pose_basis"],
            joint_regressor=arrays["joint_regressor"],
            vertex_colors=arrays["vertex_colors"],
            parent=arrays["parent"],
            joint_names=tuple(meta.get("joint_names", JOINT_NAMES)),
        )
        tpl.validate()
        return tpl


@dataclass
class AnimationParams:
    """Pose, expression, and per-frame latent driving one frame."""

    theta: np.ndarray
    psi: np.ndarray
    latent: np.ndarray | None = None
    frame_id: int = -1

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.psi = np.asarray(self.psi, dtype=np.float64).ravel()
        if self.psi.shape[0] != N_EXPR:
            raise InvalidInputError(f"psi must have length {N_EXPR}, got {self.psi.shape[0]}")
        if self.theta.shape[0] != 3 * N_JOINTS:
            raise InvalidInputError(f"theta must have length {3 * N_JOINTS}, got {self.theta.shape[0]}")
        if self.latent is not None:
            self.latent = np.asarray(self.latent, dtype=np.float64).ravel()
            if self.latent.shape[0] != 32:
                raise InvalidInputError("latent must have length 32")

    @property
    def jaw(self) -> np.ndarray:
        return self.theta[3 * JOINT_NAMES.index("jaw") : 3 * JOINT_NAMES.index("jaw") + 3]


def _validate_chain(parent: np.ndarray) -> None:
    parent = np.asarray(parent)
    if parent[0] != -1:
        raise InvalidInputError("parent[0] must be -1 (root)")
    for j in range(1, len(parent)):
        seen = set()
        k = j
        while k != -1:
            if k in seen:
                raise InvalidInputError("cyclic parent array")
            seen.add(k)
            k = int(parent[k])


def compute_joints(template: MorphableTemplate, psi: np.ndarray) -> np.ndarray:
    """Joint positions regressed from the expression-corrected template."""
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if psi.shape[0] != template.n_expr:
        raise InvalidInputError(f"psi must have length {template.n_expr}")
    corrected = template.vertices + expression_offset(psi, template.expr_basis)
    return template.joint_regressor @ corrected


def bone_transforms(theta: np.ndarray, joints: np.ndarray, parent: np.ndarray) -> np.ndarray:
    """World-space 4x4 rigid transforms per bone, composed root to leaf.

    The rest pose (theta = 0) maps to identity transforms: each bone's
    transform is expressed relative to the rest configuration, rotating
    about its own joint position.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    parent = np.asarray(parent)
    _validate_chain(parent)
    n_j = len(parent)
    if theta.shape[0] != n_j:
        raise InvalidInputError(f"theta must supply {n_j} axis-angle rotations")
    R = rotation_from_axis_angle(theta)
    out = np.zeros((n_j, 4, 4))
    for j in range(n_j):
        local = np.eye(4)
        local[:3, :3] = R[j]
        local[:3, 3] = joints[j] - R[j] @ joints[j]  # rotate about the joint
        if parent[j] == -1:
            out[j] = local
        else:
            out[j] = out[parent[j]] @ local
    return out


def lbs_apply(points: np.ndarray, weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Blend rigid transforms: out_i = sum_j w_ij (R_j p_i + t_j)."""
    points = np.asarray(points, dtype=np.float64)
    blended_R = np.einsum("nj,jab->nab", weights, transforms[:, :3, :3])
    blended_t = weights @ transforms[:, :3, 3]
    return np.einsum("nab,nb->na", blended_R, points) + blended_t


def expression_offset(psi: np.ndarray, expr_basis: np.ndarray) -> np.ndarray:
    """Additive expression offsets: sum_e psi_e * basis_e."""
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if psi.shape[0] != expr_basis.shape[1]:
        raise InvalidInputError("psi length does not match the expression basis")
    return np.einsum("e,vec->vc", psi, expr_basis)


def pose_feature(theta: np.ndarray, n_joints: int = N_JOINTS) -> np.ndarray:
    """Flattened rotation differences vec(R_j(theta)) - vec(R_j(theta*))
    over non-root joints; the corrective-basis coefficients."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    if theta.shape[0] != n_joints:
        raise InvalidInputError(f"theta must supply {n_joints} rotations")
    star = canonical_pose(n_joints).reshape(-1, 3)
    R = rotation_from_axis_angle(theta[1:])
    R_star = rotation_from_axis_angle(star[1:])
    return (R - R_star).reshape(-1)


def pose_offset(theta: np.ndarray, pose_basis: np.ndarray) -> np.ndarray:
    """Additive pose-corrective offsets contracted with the pose feature."""
    feat = pose_feature(theta, n_joints=pose_basis.shape[1] // 9 + 1)
    if feat.shape[0] != pose_basis.shape[1]:
        raise InvalidInputError("theta does not match the pose-corrective basis")
    return np.einsum("p,vpc->vc", feat, pose_basis)


def mesh_pose(template: MorphableTemplate, theta: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Posed vertices: LBS over the template plus expression/pose offsets."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    psi = np.asarray(psi, dtype=np.float64).ravel()
    joints = compute_joints(template, psi)
    transforms = bone_transforms(theta, joints, template.parent)
    shaped = template.vertices + expression_offset(psi, template.expr_basis) + pose_offset(theta, template.pose_basis)
    return lbs_apply(shaped, template.skin_weights, transforms)


def _shell_offsets(ring: int) -> np.ndarray:
    """Integer cell offsets at Chebyshev distance exactly `ring`."""
    if ring == 0:
        return np.zeros((1, 3), dtype=np.int64)
    rng = np.arange(-ring, ring + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[np.max(np.abs(grid), axis=1) == ring]


class GridIndex:
    """Uniform-grid nearest-vertex index over the canonical vertices.

    Cell size is twice the median edge length. Queries return the index of
    the Euclidean-nearest vertex, breaking exact ties by lowest index.
    """

    def __init__(self, points: np.ndarray, faces: np.ndarray | None = None):
        if len(points) == 0:
            raise InvalidStateError("cannot index an empty vertex set")
        self.points = np.asarray(points, dtype=np.float64)
        if faces is not None and len(faces):
            edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
            lengths = np.linalg.norm(self.points[edges[:, 0]] - self.points[edges[:, 1]], axis=1)
            cell = 2.0 * float(np.median(lengths))
        else:
            span = self.points.max(0) - self.points.min(0)
            cell = float(max(span.max(), 1e-9)) / 16.0
        self.cell = max(cell, 1e-9)
        self.origin = self.points.min(0) - 0.5 * self.cell
        keys = np.floor((self.points - self.origin) / self.cell).astype(np.int64)
        buckets: dict[tuple[int, int, int], list[int]] = {}
        for idx, key in enumerate(map(tuple, keys)):
            buckets.setdefault(key, []).append(idx)
        self.cells = {key: np.asarray(lst, dtype=np.int64) for key, lst in buckets.items()}
        self.key_min = keys.min(axis=0)
        self.key_max = keys.max(axis=0)
        self._shells: dict[int, np.ndarray] = {}

    def nearest(self, query: np.ndarray) -> int:
        q = np.asarray(query, dtype=np.float64).ravel()
        base = np.floor((q - self.origin) / self.cell).astype(np.int64)
        # rings below the Chebyshev distance to the occupied bounding box are empty
        gap = np.maximum(self.key_min - base, base - self.key_max)
        start_ring = int(max(0, gap.max()))
        max_ring = int(np.maximum(np.abs(base - self.key_min), np.abs(base - self.key_max)).max())
        best_idx = -1
        best_d2 = np.inf
        for ring in range(start_ring, max_ring + 1):
            # points in this or any farther ring are at least (ring-1)*cell away
            if best_idx >= 0 and (ring - 1) * self.cell > np.sqrt(best_d2):
                break
            shell = self._shells.get(ring)
            if shell is None:
                shell = _shell_offsets(ring)
                self._shells[ring] = shell
            candidates = [hit for off in base + shell if (hit := self.cells.get(tuple(off))) is not None]
            if not candidates:
                continue
            idx = np.concatenate(candidates)
            idx.sort()
            d2 = np.sum((self.points[idx] - q) ** 2, axis=1)
            k = int(np.argmin(d2))  # first minimum = lowest index after sort
            if d2[k] < best_d2 or (d2[k] == best_d2 and int(idx[k]) < best_idx):
                best_d2 = float(d2[k])
                best_idx = int(idx[k])
        return best_idx

    def nearest_batch(self, queries: np.ndarray) -> np.ndarray:
        return np.asarray([self.nearest(q) for q in np.atleast_2d(queries)], dtype=np.int64)


def nearest_vertex_attributes(
    template: MorphableTemplate, query: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(expr_basis row, pose_basis row, skin_weights row) of the canonical
    vertex nearest to `query`."""
    idx = template.spatial_index().nearest(query)
    return template.expr_basis[idx], template.pose_basis[idx], template.skin_weights[idx]


def nearest_vertex_indices(template: MorphableTemplate, queries: np.ndarray) -> np.ndarray:
    return template.spatial_index().nearest_batch(queries)


# ---------------------------------------------------------------------------
# procedural toy head
# ---------------------------------------------------------------------------


def _icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        vlist = list(verts)
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                p = vlist[a] + vlist[b]
                p = p / np.linalg.norm(p)
                midpoint[key] = len(vlist)
                vlist.append(p)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return verts, faces


def _smooth_bumps(points: np.ndarray, rng: np.random.Generator, count: int, amplitude: float,
                  front_only: bool = False) -> np.ndarray:
    """Sum of random Gaussian bumps evaluated at `points`; returns (V,) field."""
    field_vals = np.zeros(len(points))
    for _ in range(count):
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        if front_only:
            center[2] = abs(center[2])
        width = rng.uniform(0.25, 0.7)
        amp = rng.normal() * amplitude
        d2 = np.sum((points - center) ** 2, axis=1)
        field_vals += amp * np.exp(-d2 / (2 * width**2))
    return field_vals


def build_toy_head(seed: int = 7, subdivisions: int = 4) -> MorphableTemplate:
    """Deterministic procedural head: a deformed unit sphere with a hinged
    jaw rig, smooth skinning weights, seeded expression bases, and
    jaw-localized pose correctives.

    Coordinates: +y up, +z out of the face, head roughly inside the unit
    ball and centered near the origin.
    """
    rng = np.random.default_rng(seed)
    unit, faces = _icosphere(subdivisions)

    radii = np.array([0.40, 0.48, 0.42])
    verts = unit * radii
    # chin: pull the lower-front region down and slightly forward
    chin = np.exp(-np.sum((unit - np.array([0.0, -0.75, 0.65])) ** 2, axis=1) / (2 * 0.45**2))
    verts += chin[:, None] * np.array([0.0, -0.06, 0.05])
    # nose bump
    nose = np.exp(-np.sum((unit - np.array([0.0, 0.05, 1.0])) ** 2, axis=1) / (2 * 0.22**2))
    verts += nose[:, None] * np.array([0.0, 0.0, 0.07])
    # gentle seeded asymmetry
    bump = _smooth_bumps(unit, rng, count=10, amplitude=0.015)
    verts += bump[:, None] * unit

    n_v = len(verts)

    # --- skinning weights -------------------------------------------------
    y, z = verts[:, 1], verts[:, 2]
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    w_jaw = 0.92 * sig((-y - 0.10) / 0.05) * sig((z - 0.02) / 0.06)
    w_neck = 0.85 * sig((-y - 0.30) / 0.05) * sig((-z + 0.05) / 0.08)
    eye_l = np.array([0.15, 0.10, 0.33])
    eye_r = np.array([-0.15, 0.10, 0.33])
    w_el = 0.5 * np.exp(-np.sum((verts - eye_l) ** 2, axis=1) / (2 * 0.05**2))
    w_er = 0.5 * np.exp(-np.sum((verts - eye_r) ** 2, axis=1) / (2 * 0.05**2))
    others = np.stack([w_neck, w_jaw, w_el, w_er], axis=1)
    total = others.sum(axis=1)
    scale = np.minimum(1.0, 0.97 / np.maximum(total, 1e-12))
    others *= scale[:, None]
    w_global = 1.0 - others.sum(axis=1)
    skin = np.stack([w_global, others[:, 0], others[:, 1], others[:, 2], others[:, 3]], axis=1)
    skin = np.maximum(skin, 0.0)
    skin /= skin.sum(axis=1, keepdims=True)

    # --- joint regressor ---------------------------------------------------
    targets = np.array(
        [
            [0.0, -0.20, 0.0],   # global pivot near the neck base
            [0.0, -0.34, -0.02], # neck
            [0.0, -0.05, 0.02],  # jaw hinge
            eye_l,
            eye_r,
        ]
    )
    reg = np.zeros((N_JOINTS, n_v))
    for j, target in enumerate(targets):
        d2 = np.sum((verts - target) ** 2, axis=1)
        w = np.exp(-d2 / (2 * 0.18**2))
        reg[j] = w / w.sum()

    # --- expression basis ---------------------------------------------------
    expr = np.zeros((n_v, N_EXPR, 3))
    for e in range(N_EXPR):
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        center[2] = abs(center[2]) * 0.9 + 0.1  # keep bumps on the face side
        center = center * radii
        width = rng.uniform(0.10, 0.22)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        amp = 0.02 * (0.5 + rng.random())
        g = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2 * width**2))
        expr[:, e, :] = (amp * g)[:, None] * direction

    # --- pose correctives (jaw only) ----------------------------------------
    pose = np.zeros((n_v, N_POSE_JOINTS * 9, 3))
    jaw_slot = JOINT_NAMES.index("jaw") - 1  # non-root index
    mouth_center = np.array([0.0, -0.18, 0.38])
    g = np.exp(-np.sum((verts - mouth_center) ** 2, axis=1) / (2 * 0.12**2))
    for k in range(9):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        amp = 0.008 * rng.normal()
        pose[:, jaw_slot * 9 + k, :] = (amp * g)[:, None] * direction

    # --- colors --------------------------------------------------------------
    base = np.array([0.80, 0.62, 0.50])
    colors = np.tile(base, (n_v, 1))
    for _ in range(6):
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        width = rng.uniform(0.3, 0.8)
        tint = rng.normal(size=3) * 0.12
        g = np.exp(-np.sum((unit - center) ** 2, axis=1) / (2 * width**2))
        colors += g[:, None] * tint
    hair = sig((y - 0.24) / 0.04)
    colors = colors * (1 - hair[:, None]) + hair[:, None] * np.array([0.22, 0.16, 0.12])
    lips = np.exp(-np.sum((verts - np.array([0.0, -0.16, 0.40])) ** 2, axis=1) / (2 * 0.07**2))
    colors = colors * (1 - 0.6 * lips[:, None]) + 0.6 * lips[:, None] * np.array([0.65, 0.25, 0.25])
    colors = np.clip(colors, 0.0, 1.0)

    template = MorphableTemplate(
        vertices=verts,
        faces=faces,
        skin_weights=skin,
        expr_basis=expr,
        pose_basis=pose,
        joint_regressor=reg,
        vertex_colors=colors,
        parent=np.asarray(PARENTS, dtype=np.int64),
    )
    template.validate()
    return template


def check_watertight(faces: np.ndarray) -> bool:
    """Every undirected edge must be shared by exactly two faces."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))
