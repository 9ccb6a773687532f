"""Continuous forward warp from canonical to deformed space, and its
inverse via iterative root finding.

The warp composes the deformation field's pointwise outputs with the
frame's bone transforms:

    x_d = LBS(x_c + B_P(theta; P(x_c)) + B_E(psi; E(x_c)),
              J(psi), theta, W(x_c))

Bone transforms are taken relative to the canonical pose, so the warp is
the identity in the canonical frame when the deformation net is at its
zero initialization.

Correspondence search inverts the warp per deformed point with Broyden's
good method from multiple rigid initializations (one per configured init
bone), then picks the reporting candidate by occupancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import BroydenConfig, JOINT_NAMES
from .errors import InvalidInputError
from .mlp import Layer, MlpParams, mlp_forward, mlp_tangent_forward, softmax, softmax_jvp
from .fields import (
    DeformationCache,
    FieldNetworks,
    deformation_backward,
    deformation_forward,
    deformation_tangent_backward,
    deformation_tangent_forward,
    geometry_forward,
)
from .morphable import (
    AnimationParams,
    MorphableTemplate,
    bone_transforms,
    canonical_pose,
    compute_joints,
    pose_feature,
)

# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------


def rigid_inverse(T: np.ndarray) -> np.ndarray:
    """Closed-form inverse of rigid 4x4 transforms (batched)."""
    T = np.asarray(T, dtype=np.float64)
    out = np.zeros_like(T)
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ab,...b->...a", Rt, t)
    out[..., 3, 3] = 1.0
    return out


@dataclass
class WarpContext:
    """Per-frame precomputation: joints, canonical-relative bone
    transforms, and the pose-corrective feature vector."""

    params: AnimationParams
    joints: np.ndarray  # (n_j, 3)
    transforms: np.ndarray  # (n_j, 4, 4), identity at the canonical pose
    pose_feat: np.ndarray  # (n_p * 9,)
    joint_names: tuple[str, ...] = JOINT_NAMES


def make_warp_context(template: MorphableTemplate, params: AnimationParams) -> WarpContext:
    joints = compute_joints(template, params.psi)
    absolute = bone_transforms(params.theta, joints, template.parent)
    star = bone_transforms(canonical_pose(template.n_joints), joints, template.parent)
    transforms = absolute @ rigid_inverse(star)
    return WarpContext(
        params=params,
        joints=joints,
        transforms=transforms,
        pose_feat=pose_feature(params.theta, template.n_joints),
        joint_names=template.joint_names,
    )


# ---------------------------------------------------------------------------
# forward warp with derivative passes
# ---------------------------------------------------------------------------


@dataclass
class WarpCache:
    deform: DeformationCache
    x_c: np.ndarray
    shaped: np.ndarray  # x_c + offsets (N, 3)
    weights: np.ndarray  # (N, n_j)
    blend_R: np.ndarray  # (N, 3, 3)
    dshaped: np.ndarray | None = None  # (N, K, 3) tangent passes only
    dweights: np.ndarray | None = None  # (N, K, n_j)
    dxd: np.ndarray | None = None  # (N, K, 3)


def _blend(ctx: WarpContext, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R = np.einsum("nj,jab->nab", weights, ctx.transforms[:, :3, :3])
    t = weights @ ctx.transforms[:, :3, 3]
    return R, t


def forward_warp_with_cache(
    ctx: WarpContext, nets: FieldNetworks, x_c: np.ndarray
) -> tuple[np.ndarray, WarpCache]:
    x_c = np.asarray(x_c, dtype=np.float64)
    E, P, W, dcache = deformation_forward(nets, x_c)
    offsets = np.einsum("e,nec->nc", ctx.params.psi, E) + np.einsum("k,nkc->nc", ctx.pose_feat, P)
    shaped = x_c + offsets
    blend_R, blend_t = _blend(ctx, W)
    x_d = np.einsum("nab,nb->na", blend_R, shaped) + blend_t
    return x_d, WarpCache(dcache, x_c, shaped, W, blend_R)


def forward_warp(ctx: WarpContext, nets: FieldNetworks, x_c: np.ndarray) -> np.ndarray:
    return forward_warp_with_cache(ctx, nets, x_c)[0]


def forward_warp_backward(
    ctx: WarpContext, nets: FieldNetworks, cache: WarpCache, xd_bar: np.ndarray
) -> tuple[list, np.ndarray]:
    """Reverse pass: returns (deformation-net grads, x_c gradient)."""
    xd_bar = np.asarray(xd_bar, dtype=np.float64)
    A_R = ctx.transforms[:, :3, :3]
    A_t = ctx.transforms[:, :3, 3]
    shaped_bar = np.einsum("nba,nb->na", cache.blend_R, xd_bar)
    per_bone = np.einsum("jab,nb->nja", A_R, cache.shaped) + A_t[None]
    W_bar = np.einsum("na,nja->nj", xd_bar, per_bone)
    E_bar = ctx.params.psi[None, :, None] * shaped_bar[:, None, :]
    P_bar = ctx.pose_feat[None, :, None] * shaped_bar[:, None, :]
    grads, xc_net_bar = deformation_backward(nets, cache.deform, E_bar, P_bar, W_bar)
    return grads, shaped_bar + xc_net_bar


def warp_tangent(
    ctx: WarpContext, nets: FieldNetworks, x_c: np.ndarray, dx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, WarpCache]:
    """Forward warp with K directional derivatives: returns
    (x_d (N,3), dx_d (N,K,3), cache)."""
    x_c = np.asarray(x_c, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    E, P, W, dE, dP, dW, dcache = deformation_tangent_forward(nets, x_c, dx)
    psi, feat = ctx.params.psi, ctx.pose_feat
    offsets = np.einsum("e,nec->nc", psi, E) + np.einsum("k,nkc->nc", feat, P)
    doffsets = np.einsum("e,nkec->nkc", psi, dE) + np.einsum("p,nkpc->nkc", feat, dP)
    shaped = x_c + offsets
    dshaped = dx + doffsets
    blend_R, blend_t = _blend(ctx, W)
    A_R = ctx.transforms[:, :3, :3]
    A_t = ctx.transforms[:, :3, 3]
    x_d = np.einsum("nab,nb->na", blend_R, shaped) + blend_t
    dx_d = (
        np.einsum("nab,nkb->nka", blend_R, dshaped)
        + np.einsum("nkj,jab,nb->nka", dW, A_R, shaped)
        + np.einsum("nkj,ja->nka", dW, A_t)
    )
    cache = WarpCache(dcache, x_c, shaped, W, blend_R, dshaped=dshaped, dweights=dW, dxd=dx_d)
    return x_d, dx_d, cache


def warp_jacobian(
    ctx: WarpContext, nets: FieldNetworks, x_c: np.ndarray
) -> tuple[np.ndarray, WarpCache]:
    """Exact spatial Jacobian J[n, a, b] = d w_a / d x_b, including the
    dependence of the deformation outputs on x_c."""
    x_c = np.asarray(x_c, dtype=np.float64)
    eye = np.broadcast_to(np.eye(3), (len(x_c), 3, 3))
    _, dx_d, cache = warp_tangent(ctx, nets, x_c, eye)
    return np.swapaxes(dx_d, 1, 2), cache


def warp_tangent_backward(
    ctx: WarpContext,
    nets: FieldNetworks,
    cache: WarpCache,
    xd_bar: np.ndarray | None,
    dxd_bar: np.ndarray | None,
) -> tuple[list, np.ndarray, np.ndarray]:
    """Reverse pass through warp_tangent: upstream gradients on x_d and on
    the directional derivatives dx_d. Returns (grads, xc_bar, dx_bar)."""
    if cache.dshaped is None:
        raise InvalidInputError("warp_tangent_backward needs a cache from warp_tangent")
    n, k = cache.dshaped.shape[0], cache.dshaped.shape[1]
    xd_bar = np.zeros((n, 3)) if xd_bar is None else np.asarray(xd_bar, dtype=np.float64)
    dxd_bar = np.zeros((n, k, 3)) if dxd_bar is None else np.asarray(dxd_bar, dtype=np.float64)
    A_R = ctx.transforms[:, :3, :3]
    A_t = ctx.transforms[:, :3, 3]
    psi, feat = ctx.params.psi, ctx.pose_feat
    shaped, dshaped, W, dW = cache.shaped, cache.dshaped, cache.weights, cache.dweights

    # x_d = R(W) shaped + t(W)
    shaped_bar = np.einsum("nba,nb->na", cache.blend_R, xd_bar)
    per_bone = np.einsum("jab,nb->nja", A_R, shaped) + A_t[None]
    W_bar = np.einsum("na,nja->nj", xd_bar, per_bone)

    # dx_d = R dshaped + dR(dW) shaped + dt(dW)
    dshaped_bar = np.einsum("nba,nkb->nka", cache.blend_R, dxd_bar)
    shaped_bar = shaped_bar + np.einsum("nkj,jab,nka->nb", dW, A_R, dxd_bar)
    W_bar = W_bar + np.einsum("nka,nkb,jab->nj", dxd_bar, dshaped, A_R)
    dW_bar = np.einsum("nka,jab,nb->nkj", dxd_bar, A_R, shaped) + np.einsum(
        "nka,ja->nkj", dxd_bar, A_t
    )

    # shaped = x_c + psi.E + feat.P ; dshaped = dx + psi.dE + feat.dP
    E_bar = psi[None, :, None] * shaped_bar[:, None, :]
    P_bar = feat[None, :, None] * shaped_bar[:, None, :]
    dE_bar = psi[None, None, :, None] * dshaped_bar[:, :, None, :]
    dP_bar = feat[None, None, :, None] * dshaped_bar[:, :, None, :]

    grads, xc_net_bar, dx_net_bar = deformation_tangent_backward(
        nets, cache.deform, E_bar, P_bar, W_bar, dE_bar, dP_bar, dW_bar
    )
    return grads, shaped_bar + xc_net_bar, dshaped_bar + dx_net_bar


# ---------------------------------------------------------------------------
# fused per-frame warp evaluator
# ---------------------------------------------------------------------------


def fused_deformation_params(nets: FieldNetworks, psi: np.ndarray, pose_feat: np.ndarray) -> MlpParams:
    """Contract the deformation head with the frame's fixed psi and pose
    features, folding both into the final linear layer.

    The returned network maps x -> [psi.E(x) (3), feat.P(x) (3),
    skinning logits (n_j)]; hidden layers are shared by reference, so the
    construction is exact and cheap. Root finding evaluates the warp many
    times per frame, and this removes the (n_e*3 + n_p*27)-wide head from
    the inner loop.
    """
    c = nets.config
    last = nets.deformation.layers[-1]
    W, b = last.weight, last.bias
    n_e3, n_p27 = c.n_expr * 3, c.n_pose_joints * 27
    W_E = W[:n_e3].reshape(c.n_expr, 3, -1)
    b_E = b[:n_e3].reshape(c.n_expr, 3)
    W_P = W[n_e3 : n_e3 + n_p27].reshape(c.n_pose_joints * 9, 3, -1)
    b_P = b[n_e3 : n_e3 + n_p27].reshape(c.n_pose_joints * 9, 3)
    fused_W = np.concatenate(
        [
            np.einsum("e,ech->ch", psi, W_E),
            np.einsum("p,pch->ch", pose_feat, W_P),
            W[n_e3 + n_p27 :],
        ]
    )
    fused_b = np.concatenate([psi @ b_E, pose_feat @ b_P, b[n_e3 + n_p27 :]])
    layers = list(nets.deformation.layers[:-1])
    layers.append(Layer(fused_W, fused_b, last.activation))
    return MlpParams(layers)


@dataclass
class FusedWarp:
    """Callable warp and spatial Jacobian for one frame, using the fused
    deformation head. Matches forward_warp up to floating-point
    re-association of the head contraction."""

    ctx: WarpContext
    net: MlpParams

    @classmethod
    def build(cls, ctx: WarpContext, nets: FieldNetworks) -> "FusedWarp":
        return cls(ctx, fused_deformation_params(nets, ctx.params.psi, ctx.pose_feat))

    def _assemble(self, x, y):
        shaped = x + y[..., 0:3] + y[..., 3:6]
        weights = softmax(y[..., 6:])
        blend_R, blend_t = _blend(self.ctx, weights)
        x_d = np.einsum("nab,nb->na", blend_R, shaped) + blend_t
        return x_d, shaped, weights, blend_R

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y, _ = mlp_forward(self.net, np.asarray(x, dtype=np.float64))
        return self._assemble(x, y)[0]

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """J[n, a, b] = d w_a / d x_b."""
        x = np.asarray(x, dtype=np.float64)
        eye = np.broadcast_to(np.eye(3), (len(x), 3, 3))
        y, dy, _ = mlp_tangent_forward(self.net, x, eye)
        x_d, shaped, weights, blend_R = self._assemble(x, y)
        dshaped = eye + dy[:, :, 0:3] + dy[:, :, 3:6]
        dW = softmax_jvp(weights, dy[:, :, 6:])
        A_R = self.ctx.transforms[:, :3, :3]
        A_t = self.ctx.transforms[:, :3, 3]
        dx_d = (
            np.einsum("nab,nkb->nka", blend_R, dshaped)
            + np.einsum("nkj,jab,nb->nka", dW, A_R, shaped)
            + np.einsum("nkj,ja->nka", dW, A_t)
        )
        return np.swapaxes(dx_d, 1, 2)


# ---------------------------------------------------------------------------
# correspondence search (Broyden's good method, batched with an active set)
# ---------------------------------------------------------------------------


@dataclass
class CorrespondenceResult:
    """Batched root-finding outcome: C candidates per deformed point."""

    canonical_points: np.ndarray  # (N, C, 3)
    converged: np.ndarray  # (N, C) bool
    selectable: np.ndarray  # (N, C) bool: converged minus duplicates
    occupancies: np.ndarray  # (N, C); NaN where not selectable
    selected: np.ndarray  # (N,) candidate index, -1 when none converged
    iterations: np.ndarray  # (N, C) Broyden steps used

    @property
    def any_converged(self) -> np.ndarray:
        return self.selected >= 0

    def selected_points(self) -> np.ndarray:
        """Canonical point of the selected candidate (undefined rows where
        selected < 0 are zeros)."""
        n = len(self.selected)
        out = np.zeros((n, 3))
        ok = self.selected >= 0
        out[ok] = self.canonical_points[np.arange(n)[ok], self.selected[ok]]
        return out


def _init_candidates(ctx: WarpContext, x_d: np.ndarray, init_bones: tuple[str, ...]) -> np.ndarray:
    """Inverse rigid transforms of the init bones applied to x_d: (N, C, 3)."""
    cands = []
    for bone in init_bones:
        if bone not in ctx.joint_names:
            raise InvalidInputError(f"unknown init bone {bone!r}")
        T_inv = rigid_inverse(ctx.transforms[ctx.joint_names.index(bone)])
        cands.append(x_d @ T_inv[:3, :3].T + T_inv[:3, 3])
    return np.stack(cands, axis=1)


def _safe_inverse_3x3(J: np.ndarray) -> np.ndarray:
    """Batched 3x3 inverse falling back to identity for singular blocks."""
    det = np.linalg.det(J)
    bad = ~np.isfinite(det) | (np.abs(det) < 1e-12)
    if np.any(bad):
        J = J.copy()
        J[bad] = np.eye(3)
    return np.linalg.inv(J)


def broyden_solve(
    warp_fn,
    jac_fn,
    x0: np.ndarray,
    target: np.ndarray,
    cfg: BroydenConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve warp_fn(x) = target per row with Broyden's good method.

    warp_fn: (M, 3) -> (M, 3); jac_fn: (M, 3) -> (M, 3, 3) spatial Jacobian.
    Returns (x (M,3), converged (M,), iterations (M,)).
    """
    x = np.array(x0, dtype=np.float64)
    m = len(x)
    if m == 0:
        return x, np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64)
    g = warp_fn(x) - target
    gnorm = np.linalg.norm(g, axis=1)
    Jinv = _safe_inverse_3x3(jac_fn(x))
    converged = gnorm < cfg.tolerance
    iterations = np.zeros(m, dtype=np.int64)
    active = ~converged
    for step in range(1, cfg.max_steps + 1):
        if not np.any(active):
            break
        ia = np.flatnonzero(active)
        dx = -np.einsum("mab,mb->ma", Jinv[ia], g[ia])
        # damped step: halve while the residual norm increases
        t = np.ones(len(ia))
        x_try = x[ia] + dx
        g_try = warp_fn(x_try) - target[ia]
        gn_try = np.linalg.norm(g_try, axis=1)
        worse = gn_try > gnorm[ia]
        for _ in range(cfg.max_backtracks):
            if not np.any(worse):
                break
            t[worse] *= 0.5
            iw = np.flatnonzero(worse)
            x_retry = x[ia[iw]] + t[iw, None] * dx[iw]
            g_retry = warp_fn(x_retry) - target[ia[iw]]
            x_try[iw] = x_retry
            g_try[iw] = g_retry
            gn_try[iw] = np.linalg.norm(g_retry, axis=1)
            worse_now = np.zeros_like(worse)
            worse_now[iw] = gn_try[iw] > gnorm[ia[iw]]
            worse = worse_now
        # Broyden good update on the inverse-Jacobian estimate
        s = x_try - x[ia]
        y = g_try - g[ia]
        Jy = np.einsum("mab,mb->ma", Jinv[ia], y)
        sJ = np.einsum("ma,mab->mb", s, Jinv[ia])
        denom = np.einsum("ma,ma->m", s, Jy)
        ok = np.abs(denom) > 1e-30
        upd = np.zeros_like(Jinv[ia])
        upd[ok] = (s[ok] - Jy[ok])[:, :, None] * sJ[ok][:, None, :] / denom[ok, None, None]
        Jinv[ia] += upd

        x[ia] = x_try
        g[ia] = g_try
        gnorm[ia] = gn_try
        iterations[ia] = step
        newly = gn_try < cfg.tolerance
        converged[ia[newly]] = True
        active[ia[newly]] = False
    # Full-Newton polish of converged roots: a fixed iteration count makes
    # the result smooth in the underlying fields (the tolerance-gated loop
    # alone leaves iteration-count-sized truncation jumps).
    for _ in range(cfg.polish_steps):
        ic = np.flatnonzero(converged)
        if len(ic) == 0:
            break
        g_cur = warp_fn(x[ic]) - target[ic]
        Jp = _safe_inverse_3x3(jac_fn(x[ic]))
        x[ic] -= np.einsum("mab,mb->ma", Jp, g_cur)
    return x, converged, iterations


def correspondence_search(
    ctx: WarpContext,
    nets: FieldNetworks,
    x_d: np.ndarray,
    latent: np.ndarray,
    cfg: BroydenConfig | None = None,
) -> CorrespondenceResult:
    """Find canonical correspondences for each deformed point.

    Candidates start from the inverse rigid transforms of the configured
    init bones; converged candidates closer than the dedup tolerance are
    merged (lowest index wins); the reported candidate is the one with
    extreme occupancy (minimum by default).
    """
    cfg = cfg or BroydenConfig()
    x_d = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
    n = len(x_d)
    c = len(cfg.init_bones)
    x0 = _init_candidates(ctx, x_d, cfg.init_bones)

    # candidates whose init points coincide (within the dedup tolerance)
    # share the same Broyden trajectory; solve each representative once
    rep = np.zeros((n, c), dtype=np.int64)
    for j in range(1, c):
        rep[:, j] = j
        for i in range(j):
            same = (rep[:, i] == i) & (np.linalg.norm(x0[:, j] - x0[:, i], axis=1) < cfg.dedup_tol)
            rep[same, j] = i

    flat_rep = (rep + np.arange(n)[:, None] * c).reshape(-1)
    own = flat_rep == np.arange(n * c)
    solve_idx = np.flatnonzero(own)

    warped = FusedWarp.build(ctx, nets)
    roots_f, conv_f, iters_f = broyden_solve(
        warped, warped.jacobian, x0.reshape(n * c, 3)[solve_idx],
        np.repeat(x_d, c, axis=0)[solve_idx], cfg,
    )
    back = np.zeros(n * c, dtype=np.int64)
    back[solve_idx] = np.arange(len(solve_idx))
    gather = back[flat_rep]
    roots = roots_f[gather].reshape(n, c, 3)
    converged = conv_f[gather].reshape(n, c)
    iterations = iters_f[gather].reshape(n, c)

    # dedup: later candidates within dedup_tol of an earlier converged one
    # are excluded from selection
    selectable = converged.copy()
    for j in range(1, c):
        for i in range(j):
            dup = (
                selectable[:, j]
                & converged[:, i]
                & (np.linalg.norm(roots[:, j] - roots[:, i], axis=1) < cfg.dedup_tol)
            )
            selectable[:, j] &= ~dup

    occupancies = np.full((n, c), np.nan)
    sel_idx = np.flatnonzero(selectable.reshape(-1))
    if len(sel_idx):
        occ, _, _ = geometry_forward(nets, roots.reshape(-1, 3)[sel_idx], latent)
        occupancies.reshape(-1)[sel_idx] = occ

    selected = select_candidates(occupancies, selectable, cfg.occ_aggregation)
    return CorrespondenceResult(roots, converged, selectable, occupancies, selected, iterations)


def select_candidates(occupancies: np.ndarray, selectable: np.ndarray, rule: str) -> np.ndarray:
    """Pick the reporting candidate per row by extreme occupancy ("min" by
    default, "max" optional); ties break to the lowest candidate index.
    Rows with nothing selectable get -1."""
    n = len(occupancies)
    selected = np.full(n, -1, dtype=np.int64)
    any_ok = selectable.any(axis=1)
    if np.any(any_ok):
        masked = occupancies.copy()
        if rule == "min":
            masked[~selectable] = np.inf
            selected[any_ok] = np.argmin(masked[any_ok], axis=1)
        elif rule == "max":
            masked[~selectable] = -np.inf
            selected[any_ok] = np.argmax(masked[any_ok], axis=1)
        else:
            raise InvalidInputError(f"unknown occupancy aggregation {rule!r}")
    return selected


def deformed_occupancy(
    ctx: WarpContext,
    nets: FieldNetworks,
    x_d: np.ndarray,
    latent: np.ndarray,
    cfg: BroydenConfig | None = None,
) -> tuple[np.ndarray, CorrespondenceResult]:
    """Occupancy of deformed points: the selected candidate's occupancy, or
    0 where no candidate converged (empty space)."""
    result = correspondence_search(ctx, nets, x_d, latent, cfg)
    n = len(result.selected)
    occ = np.zeros(n)
    ok = result.selected >= 0
    occ[ok] = result.occupancies[np.arange(n)[ok], result.selected[ok]]
    return occ, result
