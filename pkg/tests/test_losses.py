"""Objective terms: values, normalization, clamps, and gradient fidelity."""

import dataclasses

import numpy as np
import pytest

from helpers import assert_close, build_scene, fd_entries
from morphhead.config import LossConfig, RenderConfig
from morphhead.fields import (
    deformation_forward,
    geometry_forward,
    texture_forward,
    zero_gradients,
)
from morphhead.losses import (
    LossValues,
    compute_losses,
    loss_flame,
    loss_mask,
    loss_rgb,
    loss_total,
)
from morphhead.morphable import nearest_vertex_indices
from morphhead.rendering import (
    RayMarchBatch,
    deformed_normals,
    march_rays,
)


def march(scene, r_o, r_d, cfg, jitter):
    return march_rays(scene, r_o, r_d, cfg, jitter=jitter)


def mixed_batch(scene, n_side=3, focal=4.5, distance=1.7):
    """A small camera-like bundle of rays with both hits and misses."""
    from morphhead.rendering import generate_rays, make_orbit_camera

    cam = make_orbit_camera(0.1, 0.05, distance, n_side, n_side, focal=focal)
    r_o, r_d = generate_rays(cam)
    cfg = RenderConfig(n_samples=32, n_secant=25)
    jitter = np.random.default_rng(0).random((len(r_o), cfg.n_samples))
    return r_o, r_d, cfg, jitter


def single_anchor_batch(x_star, label_dim=1):
    """Hand-built marching outcome: one miss ray anchored at x_star."""
    z3 = np.zeros((1, 3))
    return RayMarchBatch(
        r_o=z3.copy(), r_d=np.array([[0.0, 0.0, -1.0]]),
        hit=np.array([False]), t=np.array([4.0]), x_c=z3.copy(), x_d=z3.copy(),
        occ=np.array([0.0]), anchor_t=np.array([1.0]),
        anchor_x_d=np.atleast_2d(x_star).copy(),
        anchor_x_c=np.atleast_2d(x_star).copy(),
        anchor_occ=np.array([0.0]), anchor_valid=np.array([True]),
    )


def bisect_occupancy_level(nets, latent, direction, level=0.5, lo=0.0, hi=1.2):
    """Point along `direction` where the occupancy crosses `level`."""
    d = np.asarray(direction) / np.linalg.norm(direction)

    def occ_at(r):
        return geometry_forward(nets, (r * d)[None], latent)[0][0]

    assert occ_at(lo) > level > occ_at(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if occ_at(mid) > level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi) * d


# ---------------------------------------------------------------------------
# color term
# ---------------------------------------------------------------------------


def test_loss_rgb_zero_when_prediction_matches(toy_head):
    scene = build_scene(toy_head, seed=0)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    batch = march(scene, r_o, r_d, cfg, jitter)
    assert batch.hit.any()
    bundle = deformed_normals(scene.ctx, scene.nets, scene.latent, batch.x_c[batch.hit],
                              batch.r_d[batch.hit])
    rgb, _ = texture_forward(scene.nets, batch.x_c[batch.hit], bundle.n_d,
                             scene.ctx.params.jaw, scene.ctx.params.psi)
    gt = np.zeros((len(batch), 3))
    gt[batch.hit] = rgb
    table = zero_gradients(scene.nets)
    value, excluded = loss_rgb(scene.ctx, scene.nets, scene.latent, batch, gt, table)
    assert value == 0.0
    assert excluded == 0
    assert all(np.all(v == 0) for k, v in table.items() if k.startswith("texture"))


def test_loss_rgb_batch_normalization(toy_head):
    # one hit among four rays, per-channel error (0.1, 0.2, 0.3) -> 0.15
    scene = build_scene(toy_head, seed=5)
    r_o = np.array([[0.0, 0.0, 1.7], [1.5, 0.0, 1.7], [0.0, 1.5, 1.7], [-1.5, 0.0, 1.7]])
    r_d = np.tile(np.array([0.0, 0.0, -1.0]), (4, 1))
    cfg = RenderConfig(n_samples=32)
    jitter = np.random.default_rng(0).random((4, cfg.n_samples))
    batch = march(scene, r_o, r_d, cfg, jitter)
    assert batch.hit.tolist() == [True, False, False, False]

    bundle = deformed_normals(scene.ctx, scene.nets, scene.latent, batch.x_c[:1],
                              batch.r_d[:1])
    rgb, _ = texture_forward(scene.nets, batch.x_c[:1], bundle.n_d,
                             scene.ctx.params.jaw, scene.ctx.params.psi)
    gt = np.zeros((4, 3))
    gt[0] = rgb[0] - np.array([0.1, 0.2, 0.3])
    value, _ = loss_rgb(scene.ctx, scene.nets, scene.latent, batch, gt)
    assert value == pytest.approx(0.15, abs=1e-12)


def test_loss_rgb_empty_and_all_miss(toy_head):
    scene = build_scene(toy_head, seed=5)
    empty = march(scene, np.zeros((0, 3)), np.zeros((0, 3)), RenderConfig(),
                  np.zeros((0, RenderConfig().n_samples)))
    assert loss_rgb(scene.ctx, scene.nets, scene.latent, empty, np.zeros((0, 3))) == (0.0, 0)
    r_o = np.array([[2.0, 0.0, 1.7]])
    r_d = np.array([[0.0, 0.0, -1.0]])
    miss = march(scene, r_o, r_d, RenderConfig(), np.random.default_rng(0).random((1, 64)))
    assert not miss.hit.any()
    assert loss_rgb(scene.ctx, scene.nets, scene.latent, miss, np.zeros((1, 3))) == (0.0, 0)


def test_loss_rgb_texture_gradients_fixed_batch(toy_head):
    """Texture parameters do not move the surface, so finite differences on
    a frozen batch are exact for them."""
    scene = build_scene(toy_head, seed=2, posed=True)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    batch = march(scene, r_o, r_d, cfg, jitter)
    gt = np.random.default_rng(1).random((len(batch), 3))
    table = zero_gradients(scene.nets)
    loss_rgb(scene.ctx, scene.nets, scene.latent, batch, gt, table)

    def loss_fn():
        return loss_rgb(scene.ctx, scene.nets, scene.latent, batch, gt)[0]

    rng = np.random.default_rng(2)
    for li, layer in enumerate(scene.nets.texture.layers):
        entries = rng.choice(layer.weight.size, size=4, replace=False)
        fd = fd_entries(loss_fn, layer.weight, entries, eps=1e-4)
        got = table[f"texture.{li}.weight"].ravel()[entries]
        assert_close(got, fd, f"texture.{li}.weight", rtol=1e-3, floor=1e-7)
        fd_b = fd_entries(loss_fn, layer.bias, range(min(3, layer.bias.size)), eps=1e-4)
        assert_close(table[f"texture.{li}.bias"].ravel()[: len(fd_b)], fd_b,
                     f"texture.{li}.bias", rtol=1e-3, floor=1e-7)


def test_loss_rgb_field_gradients_through_remarch(toy_head):
    """Geometry/deformation/latent gradients must match finite differences
    of the full march-shade-compare pipeline."""
    scene = build_scene(toy_head, seed=11, posed=True, tight=True)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    base = march(scene, r_o, r_d, cfg, jitter)
    gt = np.random.default_rng(1).random((len(base), 3))
    table = zero_gradients(scene.nets)
    loss_rgb(scene.ctx, scene.nets, scene.latent, base, gt, table)

    def loss_fn():
        b = march(scene, r_o, r_d, cfg, jitter)
        assert np.array_equal(b.hit, base.hit)
        return loss_rgb(scene.ctx, scene.nets, scene.latent, b, gt)[0]

    rng = np.random.default_rng(3)
    for name, arr in [
        ("geometry.1.weight", scene.nets.geometry.layers[1].weight),
        ("deformation.1.weight", scene.nets.deformation.layers[1].weight),
        ("frame_latents", scene.nets.frame_latents),
    ]:
        entries = rng.choice(arr.size, size=3, replace=False)
        fd = fd_entries(loss_fn, arr, entries, eps=1e-4)
        assert_close(table[name].ravel()[entries], fd, name, rtol=2e-3, floor=1e-6)


# ---------------------------------------------------------------------------
# coverage term
# ---------------------------------------------------------------------------


def test_loss_mask_cross_entropy_values(toy_head):
    scene = build_scene(toy_head, seed=5)
    x_half = bisect_occupancy_level(scene.nets, scene.latent, np.array([1.0, 0.2, 0.1]))
    batch = single_anchor_batch(x_half)
    v_fg, _ = loss_mask(scene.ctx, scene.nets, scene.latent, batch, np.array([True]))
    v_bg, _ = loss_mask(scene.ctx, scene.nets, scene.latent, batch, np.array([False]))
    assert v_fg == pytest.approx(np.log(2.0), abs=1e-9)
    assert v_bg == pytest.approx(np.log(2.0), abs=1e-9)

    # labels select which log-branch applies
    x_deep = bisect_occupancy_level(scene.nets, scene.latent,
                                    np.array([0.3, -1.0, 0.2]), level=0.52)
    occ = geometry_forward(scene.nets, x_deep[None], scene.latent)[0][0]
    b2 = single_anchor_batch(x_deep)
    v1, _ = loss_mask(scene.ctx, scene.nets, scene.latent, b2, np.array([True]))
    v0, _ = loss_mask(scene.ctx, scene.nets, scene.latent, b2, np.array([False]))
    assert v1 == pytest.approx(-np.log(occ), rel=1e-12)
    assert v0 == pytest.approx(-np.log(1.0 - occ), rel=1e-12)


def test_loss_mask_batch_normalization_and_selection(toy_head):
    scene = build_scene(toy_head, seed=5)
    r_o = np.array([[0.0, 0.0, 1.7], [1.0, 0.0, 1.7], [0.0, 1.05, 1.7], [3.0, 0.0, 1.7]])
    r_d = np.tile(np.array([0.0, 0.0, -1.0]), (4, 1))
    cfg = RenderConfig(n_samples=32)
    jitter = np.random.default_rng(0).random((4, cfg.n_samples))
    batch = march(scene, r_o, r_d, cfg, jitter)
    assert batch.hit[0] and not batch.hit[1:].any()
    assert batch.anchor_valid[1:].all()

    labels = np.array([True, True, False, False])
    value, _ = loss_mask(scene.ctx, scene.nets, scene.latent, batch, labels)
    sel = ~batch.hit
    occ = geometry_forward(scene.nets, batch.anchor_x_c[sel], scene.latent)[0]
    occ = np.clip(occ, 1e-6, 1 - 1e-6)
    expected = np.where(labels[sel], -np.log(occ), -np.log(1 - occ)).sum() / 4
    assert value == pytest.approx(expected, rel=1e-12)

    # the hit ray contributes nothing even if its label is background
    value2, _ = loss_mask(scene.ctx, scene.nets, scene.latent, batch,
                          np.array([False, True, False, False]))
    assert value2 == pytest.approx(expected, rel=1e-12)


def test_loss_mask_clamp_blocks_gradient(toy_head):
    scene = build_scene(toy_head, seed=5)
    x = np.array([1.1, 0.0, 0.0])
    occ = geometry_forward(scene.nets, x[None], scene.latent)[0][0]
    clamp = float(occ) + 0.05  # force the clamp: occ < clamp
    batch = single_anchor_batch(x)
    table = zero_gradients(scene.nets)
    value, _ = loss_mask(scene.ctx, scene.nets, scene.latent, batch,
                         np.array([True]), table, occ_clamp=clamp)
    assert value == pytest.approx(-np.log(clamp), rel=1e-12)
    assert all(np.all(v == 0) for v in table.values())


def test_loss_mask_gradients_through_remarch(toy_head):
    scene = build_scene(toy_head, seed=11, posed=True, tight=True,
                        pose_scale=0.05, expr_scale=0.3)
    offsets = np.array([[0.68, 0.0], [0.0, 0.70], [-0.69, 0.1], [0.1, -0.71]])
    r_o = np.column_stack([offsets, np.full(4, 1.7)])
    r_d = np.tile(np.array([0.0, 0.0, -1.0]), (4, 1))
    cfg = RenderConfig(n_samples=32, n_secant=25)
    jitter = np.random.default_rng(0).random((4, cfg.n_samples))
    base = march(scene, r_o, r_d, cfg, jitter)
    assert not base.hit.any() and base.anchor_valid.all()
    labels = np.array([True, True, True, False])
    table = zero_gradients(scene.nets)
    loss_mask(scene.ctx, scene.nets, scene.latent, base, labels, table)

    def loss_fn():
        b = march(scene, r_o, r_d, cfg, jitter)
        assert not b.hit.any()
        return loss_mask(scene.ctx, scene.nets, scene.latent, b, labels)[0]

    rng = np.random.default_rng(4)
    for name, arr in [
        ("geometry.0.weight", scene.nets.geometry.layers[0].weight),
        ("deformation.0.weight", scene.nets.deformation.layers[0].weight),
        ("deformation.1.weight", scene.nets.deformation.layers[1].weight),
        ("frame_latents", scene.nets.frame_latents),
    ]:
        entries = rng.choice(arr.size, size=3, replace=False)
        fd = fd_entries(loss_fn, arr, entries, eps=1e-4)
        assert_close(table[name].ravel()[entries], fd, name, rtol=2e-3, floor=1e-6)


# ---------------------------------------------------------------------------
# skinning-prior term
# ---------------------------------------------------------------------------


def flame_cfg(**kw):
    return LossConfig(**{**dict(lambda_expr=2.0, lambda_pose=3.0, lambda_weights=5.0), **kw})


def test_loss_flame_zero_at_exact_match(toy_head):
    scene = build_scene(toy_head, seed=7)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    batch = march(scene, r_o, r_d, cfg, jitter)
    x_c = batch.x_c[batch.hit]
    E, P, W, _ = deformation_forward(scene.nets, x_c)
    idx = nearest_vertex_indices(toy_head, x_c)
    expr = toy_head.expr_basis.copy()
    pose = toy_head.pose_basis.copy()
    skin = toy_head.skin_weights.copy()
    expr[idx] = E
    pose[idx] = P
    skin[idx] = W
    matched = dataclasses.replace(toy_head, expr_basis=expr, pose_basis=pose,
                                  skin_weights=skin)
    table = zero_gradients(scene.nets)
    value = loss_flame(scene.nets, matched, batch, flame_cfg(), table)
    assert value == 0.0
    assert all(np.all(v == 0) and np.all(np.isfinite(v)) for v in table.values())


def test_loss_flame_value_arithmetic(toy_head):
    scene = build_scene(toy_head, seed=8, posed=True)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    batch = march(scene, r_o, r_d, cfg, jitter)
    x_c = batch.x_c[batch.hit]
    E, P, W, _ = deformation_forward(scene.nets, x_c)
    idx = nearest_vertex_indices(toy_head, x_c)
    ne = np.linalg.norm((E - toy_head.expr_basis[idx]).reshape(len(x_c), -1), axis=1)
    npn = np.linalg.norm((P - toy_head.pose_basis[idx]).reshape(len(x_c), -1), axis=1)
    nw = np.linalg.norm(W - toy_head.skin_weights[idx], axis=1)
    expected = (2.0 * ne + 3.0 * npn + 5.0 * nw).sum() / len(batch)
    value = loss_flame(scene.nets, toy_head, batch, flame_cfg())
    assert value == pytest.approx(expected, rel=1e-12)
    assert loss_flame(scene.nets, toy_head,
                      march(scene, np.zeros((0, 3)), np.zeros((0, 3)), cfg,
                            np.zeros((0, cfg.n_samples))),
                      flame_cfg()) == 0.0


def test_loss_flame_gradients_fixed_batch(toy_head):
    """The skinning prior treats hit locations as fixed samples, so finite
    differences on a frozen batch are exact for deformation parameters."""
    scene = build_scene(toy_head, seed=9, posed=True)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    batch = march(scene, r_o, r_d, cfg, jitter)
    assert batch.hit.sum() >= 3
    lcfg = flame_cfg()
    table = zero_gradients(scene.nets)
    loss_flame(scene.nets, toy_head, batch, lcfg, table)

    def loss_fn():
        return loss_flame(scene.nets, toy_head, batch, lcfg)

    rng = np.random.default_rng(5)
    for li, layer in enumerate(scene.nets.deformation.layers):
        entries = rng.choice(layer.weight.size, size=4, replace=False)
        fd = fd_entries(loss_fn, layer.weight, entries)
        assert_close(table[f"deformation.{li}.weight"].ravel()[entries], fd,
                     f"deformation.{li}.weight", rtol=1e-3, floor=1e-7)
    assert all(np.all(table[k] == 0) for k in table if k.startswith(("geometry", "texture")))
    assert np.all(table["frame_latents"] == 0)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------


def test_loss_total_weighting():
    cfg = LossConfig()
    assert cfg.lambda_mask == 2.0 and cfg.lambda_flame == 1.0
    assert loss_total(1.0, 0.5, 0.2, cfg) == pytest.approx(2.2, abs=1e-15)
    assert loss_total(1.0, 0.5, 0.2, LossConfig(lambda_flame=0.0)) == pytest.approx(2.0)
    assert loss_total(0.0, 0.0, 0.0, cfg) == 0.0
    rng = np.random.default_rng(0)
    for _ in range(5):
        r, m, f = rng.random(3)
        a, b = rng.random(2)
        c2 = LossConfig(lambda_mask=a, lambda_flame=b)
        assert loss_total(r, m, f, c2) == pytest.approx(r + a * m + b * f, rel=1e-15)


def test_compute_losses_matches_individual_terms(toy_head):
    scene = build_scene(toy_head, seed=10, posed=True)
    r_o, r_d, cfg, jitter = mixed_batch(scene, n_side=4, focal=5.0)
    batch = march(scene, r_o, r_d, cfg, jitter)
    assert batch.hit.any() and (~batch.hit).any()
    gt_rgb = np.random.default_rng(2).random((len(batch), 3))
    gt_mask = np.random.default_rng(3).random(len(batch)) > 0.4
    lcfg = LossConfig()

    table = zero_gradients(scene.nets)
    values = compute_losses(scene.ctx, scene.nets, scene.latent, toy_head, batch,
                            gt_rgb, gt_mask, lcfg, table)
    assert isinstance(values, LossValues)
    assert values.total == pytest.approx(
        values.rgb + 2.0 * values.mask + values.flame, rel=1e-15
    )
    assert values.n_rays == len(batch)
    assert values.n_hits == int(batch.hit.sum())

    manual = zero_gradients(scene.nets)
    r, _ = loss_rgb(scene.ctx, scene.nets, scene.latent, batch, gt_rgb, manual, 1.0)
    m, _ = loss_mask(scene.ctx, scene.nets, scene.latent, batch, gt_mask, manual,
                     lcfg.lambda_mask, occ_clamp=lcfg.occ_clamp)
    f = loss_flame(scene.nets, toy_head, batch, lcfg, manual, lcfg.lambda_flame)
    assert values.rgb == r and values.mask == m and values.flame == f
    for key in table:
        assert np.array_equal(table[key], manual[key]), key
    assert any(np.any(v != 0) for v in table.values())
    assert all(np.all(np.isfinite(v)) for v in table.values())


def test_compute_losses_unsupervised_variant_skips_prior(toy_head):
    scene = build_scene(toy_head, seed=10, posed=True)
    r_o, r_d, cfg, jitter = mixed_batch(scene)
    batch = march(scene, r_o, r_d, cfg, jitter)
    gt_rgb = np.zeros((len(batch), 3))
    gt_mask = batch.hit.copy()
    lcfg = LossConfig(lambda_flame=0.0)
    values = compute_losses(scene.ctx, scene.nets, scene.latent, toy_head, batch,
                            gt_rgb, gt_mask, lcfg)
    assert values.flame == 0.0
    assert values.total == pytest.approx(values.rgb + 2.0 * values.mask, rel=1e-15)


def test_compute_losses_empty_batch(toy_head):
    scene = build_scene(toy_head, seed=11)
    empty = march(scene, np.zeros((0, 3)), np.zeros((0, 3)), RenderConfig(),
                  np.zeros((0, 8)))
    values = compute_losses(scene.ctx, scene.nets, scene.latent, toy_head, empty,
                            np.zeros((0, 3)), np.zeros(0, dtype=bool), LossConfig())
    assert values.total == 0.0 and values.n_rays == 0
