"""Training objectives over a marched ray batch.

Three terms drive the fields: an L1 color term on surface hits, a binary
cross-entropy occupancy term on rays without a crossing, and a
skinning-prior term tying the deformation heads to the nearest canonical
mesh vertex. Every term is normalized by the FULL batch size, so ray
batches with few hits contribute proportionally less.

Each loss optionally accumulates analytic gradients into a table from
``fields.zero_gradients``; ``scale`` folds the caller's loss weight into
the accumulation so a single backward pass per term suffices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LossConfig
from .fields import (
    FieldNetworks,
    accumulate_latent_grad,
    accumulate_net_grads,
    deformation_backward,
    deformation_forward,
    geometry_backward,
    geometry_forward,
    texture_backward,
    texture_forward,
)
from .morphable import MorphableTemplate, nearest_vertex_indices
from .rendering import (
    RayMarchBatch,
    contract_implicit,
    deformed_normals,
    normals_backward,
    prepare_mask_system,
    prepare_surface_system,
)
from .warp import WarpContext


@dataclass
class LossValues:
    """Scalar breakdown of one training step's objective."""

    rgb: float = 0.0
    mask: float = 0.0
    flame: float = 0.0
    total: float = 0.0
    n_rays: int = 0
    n_hits: int = 0
    excluded: int = 0  # rays whose implicit system was too ill-conditioned

    def as_dict(self) -> dict:
        return {
            "rgb": self.rgb,
            "mask": self.mask,
            "flame": self.flame,
            "total": self.total,
            "n_rays": self.n_rays,
            "n_hits": self.n_hits,
            "excluded": self.excluded,
        }


def _merge(a: list, b: list) -> list:
    return [(ga + gb, ba + bb) for (ga, ba), (gb, bb) in zip(a, b)]


def loss_rgb(
    ctx: WarpContext,
    nets: FieldNetworks,
    latent: np.ndarray,
    batch: RayMarchBatch,
    gt_rgb: np.ndarray,
    grad_table: dict | None = None,
    scale: float = 1.0,
    frame_id: int = 0,
    max_condition: float = 1e8,
) -> tuple[float, int]:
    """Mean L1 color error over surface hits, batch-size normalized.

    Gradients reach the texture net directly and geometry/deformation both
    through the shading normal and through the hit point's implicit
    dependence on the fields. Returns (value, excluded ray count).
    """
    n_rays = len(batch)
    hits = batch.hit
    if n_rays == 0 or not np.any(hits):
        return 0.0, 0
    x_c = batch.x_c[hits]
    dirs = batch.r_d[hits]

    bundle = deformed_normals(ctx, nets, latent, x_c, dirs)
    rgb, tex_cache = texture_forward(nets, x_c, bundle.n_d, ctx.params.jaw, ctx.params.psi)
    diff = rgb - gt_rgb[hits]
    value = float(np.abs(diff).sum() / n_rays)
    if grad_table is None:
        return value, 0

    rgb_bar = np.sign(diff) * (scale / n_rays)
    tex_grads, xc_bar_tex, n_bar = texture_backward(nets, tex_cache, rgb_bar)
    geo_n, def_n, lat_n, xc_bar_norm = normals_backward(ctx, nets, bundle, n_bar)
    system = prepare_surface_system(ctx, nets, latent, x_c, dirs, max_condition)
    geo_i, def_i, lat_i = contract_implicit(ctx, nets, system, xc_bar_tex + xc_bar_norm)

    accumulate_net_grads(grad_table, "texture", tex_grads)
    accumulate_net_grads(grad_table, "geometry", _merge(geo_n, geo_i))
    accumulate_net_grads(grad_table, "deformation", _merge(def_n, def_i))
    accumulate_latent_grad(grad_table, frame_id, lat_n + lat_i)
    return value, system.excluded


def loss_mask(
    ctx: WarpContext,
    nets: FieldNetworks,
    latent: np.ndarray,
    batch: RayMarchBatch,
    gt_mask: np.ndarray,
    grad_table: dict | None = None,
    scale: float = 1.0,
    frame_id: int = 0,
    occ_clamp: float = 1e-6,
    max_condition: float = 1e8,
) -> tuple[float, int]:
    """Binary cross-entropy between ground-truth coverage and the occupancy
    at the anchor correspondence of every ray without a surface crossing.

    The occupancy probability is clamped to [occ_clamp, 1 - occ_clamp];
    clamped rays contribute no gradient. Geometry learns directly, the
    deformation net through the anchor's implicit dependence on the warp.
    """
    n_rays = len(batch)
    sel = ~batch.hit & batch.anchor_valid
    if n_rays == 0 or not np.any(sel):
        return 0.0, 0
    x_star = batch.anchor_x_c[sel]
    labels = np.asarray(gt_mask, dtype=bool)[sel]

    occ, _, geo_cache = geometry_forward(nets, x_star, latent)
    occ_c = np.clip(occ, occ_clamp, 1.0 - occ_clamp)
    ce = np.where(labels, -np.log(occ_c), -np.log(1.0 - occ_c))
    value = float(ce.sum() / n_rays)
    if grad_table is None:
        return value, 0

    occ_bar = np.where(labels, -1.0 / occ_c, 1.0 / (1.0 - occ_c))
    occ_bar[(occ < occ_clamp) | (occ > 1.0 - occ_clamp)] = 0.0
    raw_bar = occ * (1.0 - occ) * occ_bar * (scale / n_rays)
    system = prepare_mask_system(ctx, nets, latent, x_star, max_condition)
    raw_bar[~system.ok] = 0.0  # an excluded ray contributes no gradient at all
    geo_grads, xc_bar, latent_bar = geometry_backward(nets, geo_cache, raw_bar)
    _, def_grads, _ = contract_implicit(ctx, nets, system, xc_bar)

    accumulate_net_grads(grad_table, "geometry", geo_grads)
    accumulate_net_grads(grad_table, "deformation", def_grads)
    accumulate_latent_grad(grad_table, frame_id, latent_bar)
    return value, system.excluded


def loss_flame(
    nets: FieldNetworks,
    template: MorphableTemplate,
    batch: RayMarchBatch,
    cfg: LossConfig,
    grad_table: dict | None = None,
    scale: float = 1.0,
) -> float:
    """Skinning prior: at each hit's canonical point, the deformation heads
    should match the attributes of the nearest canonical mesh vertex.

    Per hit: lambda_expr*|E_gt - E| + lambda_pose*|P_gt - P| +
    lambda_weights*|W_gt - W|, with unsquared Euclidean norms over the
    flattened blocks (epsilon-guarded at zero), batch-size normalized. The
    hit locations are treated as fixed sample positions; gradients flow to
    the deformation net only.
    """
    n_rays = len(batch)
    hits = batch.hit
    if n_rays == 0 or not np.any(hits):
        return 0.0
    x_c = batch.x_c[hits]
    idx = nearest_vertex_indices(template, x_c)
    E_gt = template.expr_basis[idx]
    P_gt = template.pose_basis[idx]
    W_gt = template.skin_weights[idx]

    E, P, W, cache = deformation_forward(nets, x_c)
    dE = E - E_gt
    dP = P - P_gt
    dW = W - W_gt
    ne = np.linalg.norm(dE.reshape(len(x_c), -1), axis=1)
    npn = np.linalg.norm(dP.reshape(len(x_c), -1), axis=1)
    nw = np.linalg.norm(dW, axis=1)
    value = float(
        (cfg.lambda_expr * ne + cfg.lambda_pose * npn + cfg.lambda_weights * nw).sum()
        / n_rays
    )
    if grad_table is None:
        return value

    eps = cfg.norm_eps
    coef = scale / n_rays
    E_bar = dE * (cfg.lambda_expr * coef / np.maximum(ne, eps))[:, None, None]
    P_bar = dP * (cfg.lambda_pose * coef / np.maximum(npn, eps))[:, None, None]
    W_bar = dW * (cfg.lambda_weights * coef / np.maximum(nw, eps))[:, None]
    def_grads, _ = deformation_backward(nets, cache, E_bar, P_bar, W_bar)
    accumulate_net_grads(grad_table, "deformation", def_grads)
    return value


def loss_total(rgb: float, mask: float, flame: float, cfg: LossConfig) -> float:
    """Weighted sum of the three objective components."""
    return rgb + cfg.lambda_mask * mask + cfg.lambda_flame * flame


def compute_losses(
    ctx: WarpContext,
    nets: FieldNetworks,
    latent: np.ndarray,
    template: MorphableTemplate,
    batch: RayMarchBatch,
    gt_rgb: np.ndarray,
    gt_mask: np.ndarray,
    cfg: LossConfig,
    grad_table: dict | None = None,
    frame_id: int = 0,
    max_condition: float = 1e8,
) -> LossValues:
    """Evaluate all loss terms on one marched batch, accumulating weighted
    gradients when a table is given. A zero skinning weight skips the
    skinning term entirely (the unsupervised variant)."""
    rgb_val, excl_s = loss_rgb(
        ctx, nets, latent, batch, gt_rgb, grad_table, 1.0, frame_id, max_condition
    )
    mask_val, excl_m = loss_mask(
        ctx, nets, latent, batch, gt_mask, grad_table,
        cfg.lambda_mask, frame_id, cfg.occ_clamp, max_condition,
    )
    if cfg.lambda_flame != 0.0:
        flame_val = loss_flame(nets, template, batch, cfg, grad_table, cfg.lambda_flame)
    else:
        flame_val = 0.0
    return LossValues(
        rgb=rgb_val,
        mask=mask_val,
        flame=flame_val,
        total=loss_total(rgb_val, mask_val, flame_val, cfg),
        n_rays=len(batch),
        n_hits=int(batch.hit.sum()),
        excluded=excl_s + excl_m,
    )
