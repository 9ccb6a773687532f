"""Shared builders and finite-difference utilities for the test suite."""

import numpy as np

from morphhead.config import BroydenConfig, FieldConfig, N_EXPR, N_JOINTS
from morphhead.fields import build_networks
from morphhead.morphable import AnimationParams, canonical_pose
from morphhead.rendering import FieldScene
from morphhead.warp import make_warp_context

FD_EPS = 3e-5
FD_RTOL = 1e-3
FD_FLOOR = 1e-6


def small_config(**kw):
    defaults = dict(
        pe_freqs=2,
        geometry_hidden=(16, 16),
        deformation_hidden=(16,),
        texture_hidden=(16,),
        seed=0,
    )
    defaults.update(kw)
    return FieldConfig(**defaults)


def fresh_nets(seed=0, n_frames=1, **cfg_kw):
    return build_networks(small_config(seed=seed, **cfg_kw), n_frames)


def perturbed_nets(seed=0, scale=0.05, n_frames=1, **cfg_kw):
    """Deformation net pushed off its zero init: a mild, invertible warp."""
    nets = fresh_nets(seed, n_frames, **cfg_kw)
    rng = np.random.default_rng(seed + 1000)
    last = nets.deformation.layers[-1]
    last.weight[:] = rng.normal(size=last.weight.shape) * scale
    last.bias[:] = rng.normal(size=last.bias.shape) * scale
    return nets


def random_params(rng, pose_scale=0.15, expr_scale=0.5):
    theta = canonical_pose() + rng.normal(size=3 * N_JOINTS) * pose_scale
    psi = rng.normal(size=N_EXPR) * expr_scale
    return AnimationParams(theta=theta, psi=psi)


def canonical_params():
    return AnimationParams(theta=canonical_pose(), psi=np.zeros(N_EXPR))


def build_scene(head, seed=0, posed=False, tight=False, bound=1.2,
                pose_scale=0.1, expr_scale=0.4, perturb=0.05):
    """Learned-field scene over the toy head with a mildly perturbed warp.

    `tight` swaps in a high-precision correspondence solver so that
    finite-difference probes measure the surface, not solver truncation.
    """
    nets = perturbed_nets(seed=seed, scale=perturb)
    params = (
        random_params(np.random.default_rng(seed), pose_scale, expr_scale)
        if posed else canonical_params()
    )
    broyden = BroydenConfig(max_steps=40, tolerance=1e-12) if tight else BroydenConfig()
    return FieldScene(make_warp_context(head, params), nets, nets.frame_latents[0],
                      broyden, bound)


def fd_grad(loss_fn, arr, eps=FD_EPS):
    """Central finite differences of loss_fn() w.r.t. every entry of arr
    (mutated in place and restored)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn()
        flat[i] = old - eps
        lm = loss_fn()
        flat[i] = old
        gflat[i] = (lp - lm) / (2 * eps)
    return g


def fd_entries(loss_fn, arr, entries, eps=FD_EPS):
    """Central finite differences at selected flat indices of arr."""
    flat = arr.ravel()
    out = []
    for i in entries:
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn()
        flat[i] = old - eps
        lm = loss_fn()
        flat[i] = old
        out.append((lp - lm) / (2 * eps))
    return np.array(out)


def assert_close(got, expected, label="", rtol=FD_RTOL, floor=FD_FLOOR):
    got = np.asarray(got)
    expected = np.asarray(expected)
    err = np.abs(got - expected)
    tol = np.maximum(floor, rtol * np.abs(expected))
    assert np.all(err <= tol), (
        f"{label}: max abs err {err.max():.3e}, worst rel "
        f"{(err / np.maximum(np.abs(expected), 1e-300)).max():.3e}"
    )
