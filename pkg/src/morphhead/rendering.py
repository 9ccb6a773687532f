"""Non-rigid ray marching and differentiable surface rendering.

A pinhole camera casts rays into deformed space; along each ray the
deformed occupancy (evaluated through correspondence search) is sampled,
the first below-to-above 0.5 crossing is refined with a secant loop, and
the surviving canonical point x_c is the anchor for shading and for
gradients.

Gradients w.r.t. field parameters never differentiate the iterative
solvers. Instead, each surface point is characterized by a square 3x3
system F(x_c, sigma) = 0 and the implicit relation

    d x_c / d sigma = -(dF/dx_c)^{-1} dF/dsigma

turns an upstream gradient at x_c into parameter gradients with one
linear solve plus one reverse pass:

  * surface variant: F = [occ(x_c) - 0.5,
                          <u, w(x_c) - r_o>, <v, w(x_c) - r_o>]
    with {u, v} an orthonormal basis of the ray direction's complement;
  * mask variant:    F = w(x_c) - x_d*   at the anchor sample of a ray
    with no crossing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from PIL import Image

from .config import BroydenConfig, RenderConfig
from .errors import InvalidInputError
from .fields import (
    FieldNetworks,
    GeometryCache,
    geometry_backward,
    geometry_forward,
    geometry_tangent_forward,
    geometry_tangent_backward,
    texture_forward,
)
from .warp import (
    WarpCache,
    WarpContext,
    deformed_occupancy,
    warp_jacobian,
    warp_tangent_backward,
)

SURFACE_LEVEL = 0.5
HIT_OCC_TOL = 1e-4

# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera: x right, y down, z forward in camera coordinates;
    `pose` is the world-from-camera rigid transform."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    near: float = 0.1
    far: float = 4.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.width < 0 or self.height < 0:
            raise InvalidInputError("image dimensions must be non-negative")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not self.near < self.far:
            raise InvalidInputError("camera near plane must be closer than far plane")
        if self.pose.shape != (4, 4):
            raise InvalidInputError("camera pose must be a 4x4 transform")
        R = self.pose[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidInputError("camera pose rotation must be orthonormal")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def optical_axis(self) -> np.ndarray:
        return self.pose[:3, 2]


def make_orbit_camera(
    azimuth: float,
    elevation: float,
    distance: float,
    width: int,
    height: int,
    focal: float,
    near: float = 0.1,
    far: float = 4.0,
) -> Camera:
    """Camera on a sphere around the origin, looking at the origin.

    Azimuth 0 / elevation 0 places the camera on +z looking along -z;
    world +y is "up" in the image.
    """
    if distance <= 0:
        raise InvalidInputError("orbit distance must be positive")
    ca, sa = np.cos(azimuth), np.sin(azimuth)
    ce, se = np.cos(elevation), np.sin(elevation)
    position = distance * np.array([sa * ce, se, ca * ce])
    forward = -position / np.linalg.norm(position)
    up = np.array([0.0, 1.0, 0.0])
    down = -up + forward * (up @ forward)
    nd = np.linalg.norm(down)
    if nd < 1e-9:
        raise InvalidInputError("orbit camera cannot look straight along the up axis")
    y_cam = down / nd
    x_cam = np.cross(y_cam, forward)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x_cam, y_cam, forward, position
    return Camera(width, height, focal, focal, width / 2.0, height / 2.0, pose, near, far)


def generate_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit rays through every pixel center, row-major: (R,3), (R,3)."""
    rows, cols = np.meshgrid(
        np.arange(camera.height), np.arange(camera.width), indexing="ij"
    )
    x = (cols.reshape(-1) + 0.5 - camera.cx) / camera.fx
    y = (rows.reshape(-1) + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def generate_ray(camera: Camera, pixel: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Ray through the center of pixel (row, col)."""
    row, col = pixel
    if not (0 <= row < camera.height and 0 <= col < camera.width):
        raise InvalidInputError(f"pixel {pixel} outside a {camera.height}x{camera.width} image")
    x = (col + 0.5 - camera.cx) / camera.fx
    y = (row + 0.5 - camera.cy) / camera.fy
    d = camera.rotation @ np.array([x, y, 1.0])
    return camera.center.copy(), d / np.linalg.norm(d)


def project(camera: Camera, points: np.ndarray) -> np.ndarray:
    """World points -> pixel coordinates (x=col, y=row), (N, 2)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = (points - camera.center) @ camera.rotation
    z = cam[:, 2]
    if np.any(z <= 0):
        raise InvalidInputError("cannot project points at or behind the camera plane")
    return np.stack(
        [camera.fx * cam[:, 0] / z + camera.cx, camera.fy * cam[:, 1] / z + camera.cy], axis=1
    )


# ---------------------------------------------------------------------------
# scenes: anything that maps deformed points to occupancy
# ---------------------------------------------------------------------------


@dataclass
class FieldScene:
    """The learned head: occupancy through correspondence search, normals
    through the warp Jacobian, colors through the texture field."""

    ctx: WarpContext
    nets: FieldNetworks
    latent: np.ndarray
    broyden: BroydenConfig = field(default_factory=BroydenConfig)
    bound_radius: float | None = 1.2

    def occupancy(self, x_d: np.ndarray, cull: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(occ (N,), x_c (N,3), valid (N,)). Points outside the bounding
        sphere short-circuit to occupancy 0 unless cull=False; x_c falls
        back to x_d where no correspondence converged."""
        x_d = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
        n = len(x_d)
        occ = np.zeros(n)
        x_c = x_d.copy()
        valid = np.zeros(n, dtype=bool)
        if n == 0:
            return occ, x_c, valid
        if cull and self.bound_radius is not None and np.isfinite(self.bound_radius):
            inside = np.linalg.norm(x_d, axis=1) <= self.bound_radius
        else:
            inside = np.ones(n, dtype=bool)
        if np.any(inside):
            o, result = deformed_occupancy(self.ctx, self.nets, x_d[inside], self.latent, self.broyden)
            occ[inside] = o
            sel = result.selected_points()
            ok = result.any_converged
            block = x_c[inside]
            block[ok] = sel[ok]
            x_c[inside] = block
            valid[inside] = ok
        return occ, x_c, valid

    def normals(self, x_c: np.ndarray, r_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        bundle = deformed_normals(self.ctx, self.nets, self.latent, x_c, r_d)
        return bundle.n_d, bundle.flagged

    def shade(self, x_c: np.ndarray, n_d: np.ndarray) -> np.ndarray:
        params = self.ctx.params
        rgb, _ = texture_forward(self.nets, x_c, n_d, params.jaw, params.psi)
        return rgb


@dataclass
class CallableScene:
    """Analytic occupancy with the identity warp (x_c == x_d); used by
    closed-form oracles. `grad_fn` supplies the occupancy gradient for
    normals when available."""

    occ_fn: Callable[[np.ndarray], np.ndarray]
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None
    color: tuple[float, float, float] = (0.7, 0.7, 0.7)

    def occupancy(self, x_d: np.ndarray, cull: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x_d = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
        return np.asarray(self.occ_fn(x_d), dtype=np.float64), x_d.copy(), np.ones(len(x_d), dtype=bool)

    def normals(self, x_c: np.ndarray, r_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x_c = np.atleast_2d(x_c)
        if self.grad_fn is None:
            return np.tile(np.array([0.0, 0.0, 1.0]), (len(x_c), 1)), np.zeros(len(x_c), dtype=bool)
        grads = np.asarray(self.grad_fn(x_c), dtype=np.float64)
        eye = np.broadcast_to(np.eye(3), (len(x_c), 3, 3))
        n_d, flagged, _ = normal_from_gradient(grads, eye, np.atleast_2d(r_d))
        return n_d, flagged

    def shade(self, x_c: np.ndarray, n_d: np.ndarray) -> np.ndarray:
        return np.tile(np.asarray(self.color, dtype=np.float64), (len(np.atleast_2d(x_c)), 1))


# ---------------------------------------------------------------------------
# ray marching
# ---------------------------------------------------------------------------


@dataclass
class RayMarchBatch:
    """Vectorized marching outcome for a batch of rays."""

    r_o: np.ndarray  # (R, 3)
    r_d: np.ndarray  # (R, 3)
    hit: np.ndarray  # (R,) bool
    t: np.ndarray  # (R,) depth; meaningful where hit
    x_c: np.ndarray  # (R, 3) canonical surface points where hit
    x_d: np.ndarray  # (R, 3)
    occ: np.ndarray  # (R,) occupancy at the refined point
    anchor_t: np.ndarray  # (R,) extremal-occupancy sample depth (miss rays)
    anchor_x_d: np.ndarray  # (R, 3)
    anchor_x_c: np.ndarray  # (R, 3)
    anchor_occ: np.ndarray  # (R,)
    anchor_valid: np.ndarray  # (R,) correspondence converged at the anchor

    def __len__(self) -> int:
        return len(self.hit)


@dataclass
class SurfaceHit:
    """Single-ray view of a marching outcome."""

    hit: bool
    t: float
    x_c: np.ndarray
    x_d: np.ndarray
    occ: float
    anchor_t: float
    anchor_x_d: np.ndarray
    anchor_x_c: np.ndarray
    anchor_occ: float
    anchor_valid: bool
    r_o: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r_d: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    cached_system: "ImplicitSystem | None" = None


def _sample_intervals(
    r_o: np.ndarray, r_d: np.ndarray, cfg: RenderConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray sampling interval: [near, far], tightened to the segment
    crossing the bounding sphere when the ray intersects it."""
    n = len(r_o)
    t0 = np.full(n, cfg.near)
    t1 = np.full(n, cfg.far)
    if cfg.bound_radius is None or not np.isfinite(cfg.bound_radius):
        return t0, t1
    b = np.einsum("na,na->n", r_o, r_d)
    disc = b**2 - np.einsum("na,na->n", r_o, r_o) + cfg.bound_radius**2
    ok = disc > 0
    sq = np.sqrt(disc[ok])
    lo = np.maximum(cfg.near, -b[ok] - sq)
    hi = np.minimum(cfg.far, -b[ok] + sq)
    keep = lo < hi
    idx = np.flatnonzero(ok)[keep]
    t0[idx] = lo[keep]
    t1[idx] = hi[keep]
    return t0, t1


def march_rays(
    scene,
    r_o: np.ndarray,
    r_d: np.ndarray,
    cfg: RenderConfig | None = None,
    jitter: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> RayMarchBatch:
    """March a batch of rays against a scene.

    Stratified samples (one uniform offset per cell, from `jitter` or
    `rng`) locate the first below-to-above crossing of occupancy 0.5; a
    bracket-guarded secant loop refines it. Rays without a crossing record
    the extremal-occupancy sample (the anchor) per cfg.mask_point_rule.
    """
    cfg = cfg or RenderConfig()
    r_o = np.atleast_2d(np.asarray(r_o, dtype=np.float64))
    r_d = np.atleast_2d(np.asarray(r_d, dtype=np.float64))
    n_rays, n_s = len(r_o), cfg.n_samples
    if jitter is None:
        rng = rng or np.random.default_rng(0)
        jitter = rng.random((n_rays, n_s))
    jitter = np.asarray(jitter, dtype=np.float64)

    empty3 = np.zeros((n_rays, 3))
    batch = RayMarchBatch(
        r_o=r_o, r_d=r_d,
        hit=np.zeros(n_rays, dtype=bool), t=np.full(n_rays, cfg.far),
        x_c=empty3.copy(), x_d=empty3.copy(), occ=np.zeros(n_rays),
        anchor_t=np.full(n_rays, cfg.far), anchor_x_d=empty3.copy(),
        anchor_x_c=empty3.copy(), anchor_occ=np.zeros(n_rays),
        anchor_valid=np.zeros(n_rays, dtype=bool),
    )
    if n_rays == 0 or n_s == 0:
        return batch

    t0, t1 = _sample_intervals(r_o, r_d, cfg)
    ts = t0[:, None] + (t1 - t0)[:, None] * (np.arange(n_s) + jitter) / n_s
    pts = r_o[:, None, :] + ts[..., None] * r_d[:, None, :]
    occ_flat, xc_flat, _ = scene.occupancy(pts.reshape(-1, 3))
    occ = occ_flat.reshape(n_rays, n_s)

    below = occ < SURFACE_LEVEL
    crossing = below[:, :-1] & ~below[:, 1:]
    found = crossing.any(axis=1)
    if np.any(found):
        first = np.argmax(crossing[found], axis=1)
        rows = np.flatnonzero(found)
        t_lo = ts[rows, first]
        t_hi = ts[rows, first + 1]
        g_lo = occ[rows, first] - SURFACE_LEVEL
        g_hi = occ[rows, first + 1] - SURFACE_LEVEL
        best_t = t_hi.copy()
        best_g = g_hi.copy()
        best_err = np.abs(g_hi)
        best_xc = xc_flat.reshape(n_rays, n_s, 3)[rows, first + 1].copy()
        best_valid = np.ones(len(rows), dtype=bool)

        for _ in range(cfg.n_secant):
            denom = g_hi - g_lo
            t_new = np.where(
                np.abs(denom) > 1e-300,
                t_hi - g_hi * (t_hi - t_lo) / np.where(denom == 0, 1.0, denom),
                0.5 * (t_lo + t_hi),
            )
            inside = (t_new > t_lo) & (t_new < t_hi)
            t_new = np.where(inside, t_new, 0.5 * (t_lo + t_hi))
            p_new = r_o[rows] + t_new[:, None] * r_d[rows]
            occ_new, xc_new, valid_new = scene.occupancy(p_new)
            g_new = occ_new - SURFACE_LEVEL
            better = np.abs(g_new) < best_err
            best_t[better] = t_new[better]
            best_g[better] = g_new[better]
            best_err[better] = np.abs(g_new[better])
            best_xc[better] = xc_new[better]
            best_valid[better] = valid_new[better]
            neg = g_new < 0
            t_lo = np.where(neg, t_new, t_lo)
            g_lo = np.where(neg, g_new, g_lo)
            t_hi = np.where(neg, t_hi, t_new)
            g_hi = np.where(neg, g_hi, g_new)

        ok = (best_err < HIT_OCC_TOL) & best_valid
        keep = rows[ok]
        batch.hit[keep] = True
        batch.t[keep] = best_t[ok]
        batch.x_c[keep] = best_xc[ok]
        batch.x_d[keep] = r_o[keep] + best_t[ok, None] * r_d[keep]
        batch.occ[keep] = SURFACE_LEVEL + best_g[ok]

    miss = ~batch.hit
    if np.any(miss):
        rule = cfg.mask_point_rule
        if rule == "max_occ":
            idx = np.argmax(occ[miss], axis=1)
        elif rule == "min_occ":
            idx = np.argmin(occ[miss], axis=1)
        else:
            raise InvalidInputError(f"unknown mask point rule {rule!r}")
        rows = np.flatnonzero(miss)
        a_t = ts[rows, idx]
        a_pts = r_o[rows] + a_t[:, None] * r_d[rows]
        a_occ, a_xc, a_valid = scene.occupancy(a_pts, cull=False)
        batch.anchor_t[rows] = a_t
        batch.anchor_x_d[rows] = a_pts
        batch.anchor_x_c[rows] = a_xc
        batch.anchor_occ[rows] = a_occ
        batch.anchor_valid[rows] = a_valid
    return batch


def march_ray(
    ctx: WarpContext,
    nets: FieldNetworks,
    r_o: np.ndarray,
    r_d: np.ndarray,
    latent: np.ndarray,
    render_cfg: RenderConfig | None = None,
    broyden_cfg: BroydenConfig | None = None,
    rng: np.random.Generator | None = None,
) -> SurfaceHit:
    """Single-ray marching against the learned field."""
    render_cfg = render_cfg or RenderConfig()
    scene = FieldScene(
        ctx, nets, latent, broyden_cfg or BroydenConfig(), render_cfg.bound_radius
    )
    batch = march_rays(scene, r_o, r_d, render_cfg, rng=rng)
    return batch_hit(batch, 0)


def batch_hit(batch: RayMarchBatch, i: int) -> SurfaceHit:
    return SurfaceHit(
        hit=bool(batch.hit[i]), t=float(batch.t[i]), x_c=batch.x_c[i].copy(),
        x_d=batch.x_d[i].copy(), occ=float(batch.occ[i]),
        anchor_t=float(batch.anchor_t[i]), anchor_x_d=batch.anchor_x_d[i].copy(),
        anchor_x_c=batch.anchor_x_c[i].copy(), anchor_occ=float(batch.anchor_occ[i]),
        anchor_valid=bool(batch.anchor_valid[i]),
        r_o=batch.r_o[i].copy(), r_d=batch.r_d[i].copy(),
    )


# ---------------------------------------------------------------------------
# implicit gradients
# ---------------------------------------------------------------------------


def ray_complement_basis(r_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis {u, v} of the plane orthogonal to
    each unit direction: Gram-Schmidt of the smallest-magnitude axis."""
    r_d = np.atleast_2d(np.asarray(r_d, dtype=np.float64))
    n = len(r_d)
    axis = np.argmin(np.abs(r_d), axis=1)
    e = np.zeros((n, 3))
    e[np.arange(n), axis] = 1.0
    u = e - np.einsum("na,na->n", e, r_d)[:, None] * r_d
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(r_d, u)
    return u, v


@dataclass
class ImplicitSystem:
    """Batched 3x3 constraint systems at surface/anchor points, with the
    reverse-pass caches needed to push a solved adjoint into parameters."""

    variant: str  # "surface" | "mask"
    x_c: np.ndarray  # (H, 3)
    A: np.ndarray  # (H, 3, 3) dF/dx_c
    ok: np.ndarray  # (H,) condition below threshold
    geo_cache: GeometryCache | None
    occ: np.ndarray | None  # (H,)
    warp_cache: WarpCache
    u: np.ndarray | None = None  # (H, 3) surface variant only
    v: np.ndarray | None = None

    @property
    def excluded(self) -> int:
        return int(np.sum(~self.ok))


def _condition_ok(A: np.ndarray, max_condition: float) -> np.ndarray:
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
    return np.isfinite(cond) & (cond <= max_condition)


def prepare_surface_system(
    ctx: WarpContext,
    nets: FieldNetworks,
    latent: np.ndarray,
    x_c: np.ndarray,
    r_d: np.ndarray,
    max_condition: float = 1e8,
) -> ImplicitSystem:
    """Build dF/dx_c for the surface constraint at hit points."""
    x_c = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
    r_d = np.atleast_2d(np.asarray(r_d, dtype=np.float64))
    occ, _, geo_cache = geometry_forward(nets, x_c, latent)
    _, grad_raw, _ = geometry_backward(nets, geo_cache, np.ones(len(x_c)))
    grad_occ = (occ * (1.0 - occ))[:, None] * grad_raw
    J, warp_cache = warp_jacobian(ctx, nets, x_c)
    u, v = ray_complement_basis(r_d)
    A = np.stack(
        [grad_occ, np.einsum("na,nab->nb", u, J), np.einsum("na,nab->nb", v, J)], axis=1
    )
    return ImplicitSystem(
        "surface", x_c, A, _condition_ok(A, max_condition), geo_cache, occ, warp_cache, u, v
    )


def prepare_mask_system(
    ctx: WarpContext,
    nets: FieldNetworks,
    latent: np.ndarray,
    x_c_star: np.ndarray,
    max_condition: float = 1e8,
) -> ImplicitSystem:
    """Build dF/dx_c = dw/dx_c for the anchor constraint w(x_c) = x_d*."""
    x_c_star = np.atleast_2d(np.asarray(x_c_star, dtype=np.float64))
    occ, _, geo_cache = geometry_forward(nets, x_c_star, latent)
    A, warp_cache = warp_jacobian(ctx, nets, x_c_star)
    return ImplicitSystem(
        "mask", x_c_star, A, _condition_ok(A, max_condition), geo_cache, occ, warp_cache
    )


def contract_implicit(
    ctx: WarpContext,
    nets: FieldNetworks,
    system: ImplicitSystem,
    xc_bar: np.ndarray,
) -> tuple[list, list, np.ndarray]:
    """Push upstream gradients at x_c through the implicit relation.

    Returns (geometry grads, deformation grads, latent_bar); rows whose
    system was excluded for conditioning contribute nothing.
    """
    xc_bar = np.atleast_2d(np.asarray(xc_bar, dtype=np.float64))
    A = np.where(system.ok[:, None, None], system.A, np.eye(3))
    y = np.linalg.solve(np.swapaxes(A, 1, 2), xc_bar[..., None])[..., 0]
    y[~system.ok] = 0.0

    if system.variant == "surface":
        # row 0: occupancy level constraint -> geometry parameters
        occ_bar = -y[:, 0]
        raw_bar = system.occ * (1.0 - system.occ) * occ_bar
        geo_grads, _, latent_bar = geometry_backward(nets, system.geo_cache, raw_bar)
        # rows 1-2: ray projections of the warp -> deformation parameters
        xd_bar = -(y[:, 1:2] * system.u + y[:, 2:3] * system.v)
        def_grads, _, _ = warp_tangent_backward(ctx, nets, system.warp_cache, xd_bar, None)
        return geo_grads, def_grads, latent_bar
    # mask variant: F = w(x_c) - x_d*, parameters enter through the warp only
    def_grads, _, _ = warp_tangent_backward(ctx, nets, system.warp_cache, -y, None)
    geo_grads = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in nets.geometry.layers]
    latent_bar = np.zeros(nets.config.latent_dim)
    return geo_grads, def_grads, latent_bar


def surface_gradient(
    hit: SurfaceHit,
    nets: FieldNetworks,
    ctx: WarpContext,
    latent: np.ndarray,
    max_condition: float = 1e8,
):
    """Per-ray convenience wrapper: returns a callback mapping an upstream
    3-vector gradient at x_c to parameter gradients, or None when the
    constraint system is too ill-conditioned to invert."""
    if hit.hit:
        system = prepare_surface_system(
            ctx, nets, latent, hit.x_c[None], hit.r_d[None], max_condition
        )
    else:
        if not hit.anchor_valid:
            return None
        system = prepare_mask_system(ctx, nets, latent, hit.anchor_x_c[None], max_condition)
    hit.cached_system = system
    if not bool(system.ok[0]):
        return None

    def callback(xc_bar: np.ndarray):
        return contract_implicit(ctx, nets, system, np.asarray(xc_bar)[None])

    return callback


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------


@dataclass
class NormalBundle:
    n_d: np.ndarray  # (H, 3) unit, camera-facing
    flagged: np.ndarray  # (H,) fallback used (singular Jacobian / zero gradient)
    sign: np.ndarray  # (H,) orientation factor applied
    m: np.ndarray  # (H, 3) unnormalized J^{-T} grad
    J: np.ndarray  # (H, 3, 3)
    geo_cache: GeometryCache | None = None
    warp_cache: WarpCache | None = None


def normal_from_gradient(grad: np.ndarray, J: np.ndarray, r_d: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """Deformed-space normals from canonical occupancy gradients:
    n = normalize(J^{-T} grad), oriented against the ray direction.

    Rows with singular Jacobians or vanishing gradients are flagged and
    filled with the most recent valid normal (camera-facing -r_d before
    any valid row appears).
    """
    grad = np.atleast_2d(grad)
    r_d = np.atleast_2d(r_d)
    h = len(grad)
    with np.errstate(all="ignore"):
        det = np.linalg.det(J)
    bad = ~np.isfinite(det) | (np.abs(det) < 1e-12)
    J_safe = np.where(bad[:, None, None], np.eye(3), J)
    m = np.linalg.solve(np.swapaxes(J_safe, 1, 2), grad[..., None])[..., 0]
    norm = np.linalg.norm(m, axis=1)
    bad |= norm < 1e-12
    norm_safe = np.where(bad, 1.0, norm)
    n = m / norm_safe[:, None]
    dots = np.einsum("na,na->n", n, r_d)
    sign = np.where(dots < 0, 1.0, -1.0)
    n = sign[:, None] * n

    if np.any(bad):
        last = np.maximum.accumulate(np.where(~bad, np.arange(h), -1))
        fallback = -r_d / np.linalg.norm(r_d, axis=1, keepdims=True)
        rows = np.flatnonzero(bad)
        src = last[rows]
        n[rows] = np.where((src >= 0)[:, None], n[np.maximum(src, 0)], fallback[rows])
    return n, bad, {"m": m, "sign": sign}


def deformed_normals(
    ctx: WarpContext,
    nets: FieldNetworks,
    latent: np.ndarray,
    x_c: np.ndarray,
    r_d: np.ndarray,
) -> NormalBundle:
    """Unit deformed-space surface normals at canonical points (batched),
    with caches kept for the reverse pass."""
    x_c = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
    r_d = np.atleast_2d(np.asarray(r_d, dtype=np.float64))
    eye = np.broadcast_to(np.eye(3), (len(x_c), 3, 3))
    _, _, draw, geo_cache = geometry_tangent_forward(nets, x_c, latent, eye)
    J, warp_cache = warp_jacobian(ctx, nets, x_c)
    n, flagged, aux = normal_from_gradient(draw, J, r_d)
    return NormalBundle(n, flagged, aux["sign"], aux["m"], J, geo_cache, warp_cache)


def deformed_normal(
    hit: SurfaceHit, nets: FieldNetworks, ctx: WarpContext, latent: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Single-ray normal at a surface hit."""
    if not hit.hit:
        raise InvalidInputError("normals are defined at surface hits only")
    bundle = deformed_normals(ctx, nets, latent, hit.x_c[None], hit.r_d[None])
    return bundle.n_d[0], bool(bundle.flagged[0])


def normals_backward(
    ctx: WarpContext,
    nets: FieldNetworks,
    bundle: NormalBundle,
    n_bar: np.ndarray,
) -> tuple[list, list, np.ndarray, np.ndarray]:
    """Reverse pass through deformed_normals.

    Returns (geometry grads, deformation grads, latent_bar, xc_bar); the
    xc_bar part is the direct spatial sensitivity, to be routed through an
    implicit system by the caller. Flagged rows are silently dropped.
    """
    n_bar = np.atleast_2d(np.asarray(n_bar, dtype=np.float64)).copy()
    n_bar[bundle.flagged] = 0.0
    n_bar *= bundle.sign[:, None]
    norm = np.linalg.norm(bundle.m, axis=1)
    norm = np.where(norm < 1e-12, 1.0, norm)
    unit = bundle.m / norm[:, None]
    m_bar = (n_bar - unit * np.einsum("na,na->n", unit, n_bar)[:, None]) / norm[:, None]
    with np.errstate(all="ignore"):
        det = np.linalg.det(bundle.J)
    bad = ~np.isfinite(det) | (np.abs(det) < 1e-12)
    J_safe = np.where(bad[:, None, None], np.eye(3), bundle.J)
    g_bar = np.linalg.solve(J_safe, m_bar[..., None])[..., 0]
    g_bar[bad] = 0.0
    J_bar = -np.einsum("na,nb->nab", bundle.m, g_bar)

    geo_grads, xc_bar_g, _, latent_bar = geometry_tangent_backward(
        nets, bundle.geo_cache, None, g_bar
    )
    def_grads, xc_bar_w, _ = warp_tangent_backward(
        ctx, nets, bundle.warp_cache, None, np.swapaxes(J_bar, 1, 2)
    )
    return geo_grads, def_grads, latent_bar, xc_bar_g + xc_bar_w


# ---------------------------------------------------------------------------
# shading and image assembly
# ---------------------------------------------------------------------------


def shade_pixel(
    hit: SurfaceHit, nets: FieldNetworks, ctx: WarpContext, latent: np.ndarray
) -> np.ndarray:
    """RGB at a surface hit: texture field at (x_c, n_d, jaw, psi)."""
    if not hit.hit:
        raise InvalidInputError("only surface hits can be shaded")
    n_d, _ = deformed_normal(hit, nets, ctx, latent)
    rgb, _ = texture_forward(nets, hit.x_c[None], n_d[None], ctx.params.jaw, ctx.params.psi)
    return rgb[0]


@dataclass
class RenderStats:
    rays: int = 0
    hits: int = 0
    flagged_normals: int = 0
    excluded_rays: int = 0


@dataclass
class ImageBundle:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    normal: np.ndarray  # (H, W, 3) in [-1, 1], zeros on background
    depth: np.ndarray  # (H, W) ray depth, far on background
    stats: RenderStats


def render_image(
    scene,
    camera: Camera,
    cfg: RenderConfig | None = None,
    seed: int = 0,
) -> ImageBundle:
    """Render every pixel of `camera` against `scene`.

    Scenes provide occupancy/normals/shade; stratified jitter derives from
    `seed`, so identical inputs render bit-identically.
    """
    cfg = cfg or RenderConfig()
    h, w = camera.height, camera.width
    rgb = np.ones((h, w, 3)) * np.asarray(cfg.background, dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    normal = np.zeros((h, w, 3))
    depth = np.full((h, w), camera.far)
    stats = RenderStats(rays=h * w)
    if h == 0 or w == 0:
        return ImageBundle(rgb, mask, normal, depth, stats)

    cfg = RenderConfig(**{**cfg.__dict__, "near": camera.near, "far": camera.far})
    r_o, r_d = generate_rays(camera)
    rng = np.random.default_rng(seed)
    jitter = rng.random((h * w, cfg.n_samples))

    flat_rgb = rgb.reshape(-1, 3)
    flat_mask = mask.reshape(-1)
    flat_normal = normal.reshape(-1, 3)
    flat_depth = depth.reshape(-1)

    chunk = max(1, cfg.ray_chunk)
    for start in range(0, h * w, chunk):
        sl = slice(start, min(start + chunk, h * w))
        batch = march_rays(scene, r_o[sl], r_d[sl], cfg, jitter=jitter[sl])
        idx = np.flatnonzero(batch.hit) + start
        if len(idx):
            x_c = batch.x_c[batch.hit]
            dirs = batch.r_d[batch.hit]
            n_d, flagged = scene.normals(x_c, dirs)
            colors = scene.shade(x_c, n_d)
            flat_rgb[idx] = colors
            flat_normal[idx] = n_d
            flat_depth[idx] = batch.t[batch.hit]
            flat_mask[idx] = True
            stats.hits += len(idx)
            stats.flagged_normals += int(np.sum(flagged))
    return ImageBundle(rgb, mask, normal, depth, stats)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def save_image_png(path, array: np.ndarray, kind: str, near: float = 0.1, far: float = 4.0) -> None:
    """Write a render channel as PNG.

    rgb: [0,1] float -> 8-bit RGB; mask: bool -> 8-bit gray {0, 255};
    normal: [-1,1] float -> 8-bit RGB; depth: [near, far] -> 16-bit gray.
    """
    array = np.asarray(array)
    if kind == "rgb":
        img = Image.fromarray(np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8), "RGB")
    elif kind == "mask":
        img = Image.fromarray(np.where(array.astype(bool), 255, 0).astype(np.uint8), "L")
    elif kind == "normal":
        mapped = np.round((np.clip(array, -1.0, 1.0) + 1.0) * 0.5 * 255.0).astype(np.uint8)
        img = Image.fromarray(mapped, "RGB")
    elif kind == "depth":
        unit = np.clip((array - near) / (far - near), 0.0, 1.0)
        img = Image.fromarray(np.round(unit * 65535.0).astype(np.uint16))
    else:
        raise InvalidInputError(f"unknown image kind {kind!r}")
    img.save(path, format="PNG")


def load_image_png(path, kind: str, near: float = 0.1, far: float = 4.0) -> np.ndarray:
    """Read a render channel written by save_image_png back to its domain."""
    img = Image.open(path)
    if kind == "rgb":
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    if kind == "mask":
        return np.asarray(img.convert("L")) > 127
    if kind == "normal":
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0 * 2.0 - 1.0
    if kind == "depth":
        arr = np.asarray(img, dtype=np.float64)
        return near + arr / 65535.0 * (far - near)
    raise InvalidInputError(f"unknown image kind {kind!r}")
