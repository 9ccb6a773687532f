"""Ground-truth data generation: ray-traced renders of the posed head mesh.

A bounding-volume hierarchy accelerates ray/mesh intersection; shading is
barycentric vertex color under a single fixed directional light plus an
ambient floor. Frames land in the dataset layout of `datasets`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import DataConfig
from .datasets import Dataset, FrameRecord, write_dataset
from .errors import InvalidInputError
from .morphable import AnimationParams, MorphableTemplate, canonical_pose, mesh_pose
from .rendering import Camera, generate_rays, make_orbit_camera

_LEAF_SIZE = 8


# ---------------------------------------------------------------------------
# ray/triangle primitive
# ---------------------------------------------------------------------------


def _mt_grid(
    r_o: np.ndarray, r_d: np.ndarray, v0: np.ndarray, e1: np.ndarray, e2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All rays against all triangles: (t with inf for misses, u, v).

    Boundary hits count (closed simplex, >= 0 comparisons); only strictly
    positive t qualifies; zero determinants (parallel rays, degenerate
    triangles) never hit.
    """
    p = np.cross(r_d[:, None, :], e2[None])
    det = np.einsum("tk,rtk->rt", e1, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = r_o[:, None, :] - v0[None]
        u = np.einsum("rtk,rtk->rt", s, p) * inv
        q = np.cross(s, e1[None])
        v = np.einsum("rk,rtk->rt", r_d, q) * inv
        t = np.einsum("tk,rtk->rt", e2, q) * inv
    ok = (det != 0.0) & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > 0.0)
    return np.where(ok, t, np.inf), u, v


def ray_triangle_intersect(
    r_o: np.ndarray, r_d: np.ndarray, triangle: np.ndarray
) -> tuple[float, np.ndarray] | None:
    """Nearest positive intersection of one ray with one triangle, or None.

    Returns (t, barycentrics) with barycentrics in the closed simplex
    ordered per vertex (edge and corner hits count).
    """
    triangle = np.asarray(triangle, dtype=np.float64)
    if triangle.shape != (3, 3):
        raise InvalidInputError("triangle must be three 3D vertices")
    r_o = np.asarray(r_o, dtype=np.float64).reshape(1, 3)
    r_d = np.asarray(r_d, dtype=np.float64).reshape(1, 3)
    v0 = triangle[None, 0]
    t, u, v = _mt_grid(r_o, r_d, v0, triangle[None, 1] - v0, triangle[None, 2] - v0)
    if not np.isfinite(t[0, 0]):
        return None
    uu, vv = u[0, 0], v[0, 0]
    return float(t[0, 0]), np.array([1.0 - uu - vv, uu, vv])


# ---------------------------------------------------------------------------
# bounding-volume hierarchy
# ---------------------------------------------------------------------------


@dataclass
class BVH:
    """Flat median-split hierarchy over triangle index ranges."""

    bounds_min: np.ndarray  # (M, 3)
    bounds_max: np.ndarray  # (M, 3)
    left: np.ndarray  # (M,) child id, -1 at leaves
    right: np.ndarray  # (M,)
    start: np.ndarray  # (M,) leaf slice into `order`
    count: np.ndarray  # (M,)
    order: np.ndarray  # (F,) triangle ids; each leaf slice ascending


def build_bvh(vertices: np.ndarray, faces: np.ndarray, leaf_size: int = _LEAF_SIZE) -> BVH:
    corners = vertices[faces]  # (F, 3, 3)
    tri_min, tri_max = corners.min(axis=1), corners.max(axis=1)
    centroids = corners.mean(axis=1)

    bounds_min, bounds_max, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(faces))

    def build(lo: int, hi: int) -> int:
        node = len(left)
        ids = order[lo:hi]
        bounds_min.append(tri_min[ids].min(axis=0))
        bounds_max.append(tri_max[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        if hi - lo > leaf_size:
            c = centroids[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (lo + hi) // 2
            # median split; ties broken by triangle id for determinism
            keys = np.lexsort((ids, c[:, axis]))
            order[lo:hi] = ids[keys]
            left[node] = build(lo, mid)
            right[node] = build(mid, hi)
        else:
            order[lo:hi] = np.sort(ids)  # ascending: argmin picks lowest id on ties
        return node

    if len(faces):
        build(0, len(faces))
    else:
        bounds_min.append(np.zeros(3))
        bounds_max.append(np.zeros(3))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
    return BVH(
        np.array(bounds_min), np.array(bounds_max),
        np.array(left), np.array(right), np.array(start), np.array(count), order,
    )


@dataclass
class MeshHits:
    t: np.ndarray  # (R,) inf where missed
    tri: np.ndarray  # (R,) -1 where missed
    bary: np.ndarray  # (R, 3)

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.t)


def _leaf_update(hits: MeshHits, active, tris, r_o, r_d, v0, e1, e2) -> None:
    t, u, v = _mt_grid(r_o[active], r_d[active], v0[tris], e1[tris], e2[tris])
    col = np.argmin(t, axis=1)  # first minimum -> lowest triangle id on ties
    rows = np.arange(len(active))
    t_best, tri_best = t[rows, col], tris[col]
    better = (t_best < hits.t[active]) | (
        (t_best == hits.t[active]) & (tri_best < hits.tri[active])
    )
    if not np.any(better):
        return
    rows, sub = rows[better], active[better]
    hits.t[sub] = t_best[better]
    hits.tri[sub] = tri_best[better]
    uu, vv = u[rows, col[better]], v[rows, col[better]]
    hits.bary[sub] = np.stack([1.0 - uu - vv, uu, vv], axis=1)


def bvh_intersect(bvh: BVH, vertices: np.ndarray, faces: np.ndarray,
                  r_o: np.ndarray, r_d: np.ndarray) -> MeshHits:
    """Nearest hit per ray; equal-depth ties resolve to the lowest triangle id."""
    r_o = np.atleast_2d(np.asarray(r_o, dtype=np.float64))
    r_d = np.atleast_2d(np.asarray(r_d, dtype=np.float64))
    n = len(r_o)
    hits = MeshHits(np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.zeros((n, 3)))
    if n == 0 or len(faces) == 0:
        return hits
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    with np.errstate(divide="ignore"):
        inv_d = 1.0 / r_d
    zero_d = r_d == 0.0

    stack = [(0, np.arange(n))]
    while stack:
        node, active = stack.pop()
        o = r_o[active]
        with np.errstate(invalid="ignore"):
            t1 = (bvh.bounds_min[node] - o) * inv_d[active]
            t2 = (bvh.bounds_max[node] - o) * inv_d[active]
        near_ax = np.fmin(t1, t2)
        far_ax = np.fmax(t1, t2)
        # a zero direction component makes the axis a containment test, not
        # a crossing (and 0 * inf above would be NaN on the slab plane)
        zd = zero_d[active]
        if zd.any():
            inside = (o >= bvh.bounds_min[node]) & (o <= bvh.bounds_max[node])
            near_ax = np.where(zd, np.where(inside, -np.inf, np.inf), near_ax)
            far_ax = np.where(zd, np.where(inside, np.inf, -np.inf), far_ax)
        near = np.fmax(near_ax.max(axis=1), 0.0)
        far = far_ax.min(axis=1)
        alive = (far >= near) & (near <= hits.t[active])
        active = active[alive]
        if active.size == 0:
            continue
        if bvh.left[node] < 0:
            tris = bvh.order[bvh.start[node]: bvh.start[node] + bvh.count[node]]
            _leaf_update(hits, active, tris, r_o, r_d, v0, e1, e2)
        else:
            stack.append((bvh.right[node], active))
            stack.append((bvh.left[node], active))
    return hits


def brute_force_intersect(vertices: np.ndarray, faces: np.ndarray,
                          r_o: np.ndarray, r_d: np.ndarray, chunk: int = 256) -> MeshHits:
    """Exhaustive all-triangle scan with the same nearest/tie rule."""
    r_o = np.atleast_2d(np.asarray(r_o, dtype=np.float64))
    r_d = np.atleast_2d(np.asarray(r_d, dtype=np.float64))
    n = len(r_o)
    hits = MeshHits(np.full(n, np.inf), np.full(n, -1, dtype=np.int64), np.zeros((n, 3)))
    if n == 0 or len(faces) == 0:
        return hits
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    all_tris = np.arange(len(faces))
    for lo in range(0, n, chunk):
        active = np.arange(lo, min(lo + chunk, n))
        _leaf_update(hits, active, all_tris, r_o, r_d, v0, e1, e2)
    return hits


# ---------------------------------------------------------------------------
# frame rendering
# ---------------------------------------------------------------------------


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals of a consistently wound mesh."""
    v0 = vertices[faces[:, 0]]
    fn = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    out = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(out, faces[:, k], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-12)


def render_gt_frame(
    template: MorphableTemplate,
    params: AnimationParams,
    camera: Camera,
    light_direction=(0.3, 0.5, 0.8),
    ambient: float = 0.35,
    frame_id: int = 0,
    split: str = "train",
) -> FrameRecord:
    """Ray-trace the posed mesh into a full frame record.

    Color is barycentric vertex color scaled by `ambient + (1 - ambient) *
    max(0, n·light)`; normals are interpolated posed vertex normals; the
    background is white.
    """
    posed = mesh_pose(template, params.theta, params.psi)
    faces = template.faces
    bvh = build_bvh(posed, faces)
    r_o, r_d = generate_rays(camera)
    hits = bvh_intersect(bvh, posed, faces, r_o, r_d)

    h, w = camera.height, camera.width
    rgb = np.ones((h * w, 3))
    normal = np.zeros((h * w, 3))
    mask = hits.hit
    if np.any(mask):
        vn = vertex_normals(posed, faces)
        tri = faces[hits.tri[mask]]  # (H, 3) vertex ids
        bary = hits.bary[mask][:, :, None]  # (H, 3, 1)
        n = np.sum(vn[tri] * bary, axis=1)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        color = np.sum(template.vertex_colors[tri] * bary, axis=1)
        light = np.asarray(light_direction, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lambert = ambient + (1.0 - ambient) * np.maximum(n @ light, 0.0)
        rgb[mask] = np.clip(color * lambert[:, None], 0.0, 1.0)
        normal[mask] = n
    return FrameRecord(
        frame_id=frame_id,
        rgb=rgb.reshape(h, w, 3),
        mask=mask.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        camera=camera,
        params=params,
        split=split,
    )


# ---------------------------------------------------------------------------
# dataset schedule
# ---------------------------------------------------------------------------


def template_hash(template: MorphableTemplate) -> str:
    digest = hashlib.sha256()
    for arr in (
        template.vertices, template.faces, template.skin_weights,
        template.expr_basis, template.pose_basis, template.joint_regressor,
        template.vertex_colors, template.parent,
    ):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def _draw_psi(rng: np.random.Generator, n_expr: int, lo: float, hi: float) -> np.ndarray:
    direction = rng.normal(size=n_expr)
    direction /= np.linalg.norm(direction)
    return direction * rng.uniform(lo, hi)


def build_schedule(
    template: MorphableTemplate, cfg: DataConfig
) -> list[tuple[str, AnimationParams, Camera]]:
    """Per-frame (split, params, camera) triples, deterministic from cfg.seed.

    Training and holdout frames stay mild (expression norm up to the training
    cap, small jaw/neck angles); test frames push expression norms into a
    strictly higher band and open the jaw past the training range.
    """
    rng = np.random.default_rng(cfg.seed)
    base = canonical_pose(template.n_joints)
    rows: list[tuple[str, AnimationParams, Camera]] = []
    counts = (
        ("train", cfg.train_frames), ("test", cfg.test_frames), ("holdout", cfg.holdout_frames)
    )
    frame_id = 0
    for split, n in counts:
        for _ in range(n):
            if split == "test":
                psi = _draw_psi(rng, template.n_expr, cfg.test_psi_norm_min, cfg.test_psi_norm_max)
                jaw_pitch = rng.uniform(cfg.train_jaw_max, cfg.test_jaw_max)
            else:
                psi = _draw_psi(rng, template.n_expr, 0.0, cfg.train_psi_norm_max)
                jaw_pitch = rng.uniform(0.0, cfg.train_jaw_max)
            theta = base.copy()
            theta[3:6] += rng.uniform(-cfg.neck_max, cfg.neck_max, size=3)
            theta[6] += jaw_pitch
            camera = make_orbit_camera(
                rng.uniform(-0.5, 0.5) * cfg.orbit_azimuth_range,
                rng.uniform(-0.5, 0.5) * cfg.orbit_elevation_range,
                cfg.camera_distance,
                cfg.width,
                cfg.height,
                cfg.focal,
            )
            rows.append((split, AnimationParams(theta, psi, frame_id=frame_id), camera))
            frame_id += 1
    return rows


def generate_dataset(template: MorphableTemplate, cfg: DataConfig, out_dir) -> Dataset:
    """Render the full schedule and write the on-disk layout."""
    schedule = build_schedule(template, cfg)
    frames = [
        render_gt_frame(
            template, params, camera,
            light_direction=cfg.light_direction, ambient=cfg.ambient,
            frame_id=i, split=split,
        )
        for i, (split, params, camera) in enumerate(schedule)
    ]
    manifest = {
        "seed": cfg.seed,
        "light_direction": list(cfg.light_direction),
        "ambient": cfg.ambient,
        "template_hash": template_hash(template),
        "counts": {"train": cfg.train_frames, "test": cfg.test_frames, "holdout": cfg.holdout_frames},
        "width": cfg.width,
        "height": cfg.height,
        "focal": cfg.focal,
        "camera_distance": cfg.camera_distance,
    }
    root = write_dataset(out_dir, frames, manifest)
    return Dataset(frames=frames, manifest=manifest, root=root)
