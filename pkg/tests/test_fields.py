"""Field networks: encodings, initialization structure, derivative passes.

Finite differences are the oracle for every gradient; initialization
schemes are checked by their observable effects (sphere-like occupancy,
zero blendshapes, uniform skinning weights).
"""

import numpy as np
import pytest

from morphhead.config import FieldConfig
from morphhead.errors import InvalidInputError, TrainingDivergedError
from morphhead.fields import (
    FieldNetworks,
    PositionalEncoder,
    accumulate_net_grads,
    build_networks,
    deformation_backward,
    deformation_forward,
    deformation_tangent_backward,
    deformation_tangent_forward,
    geometry_backward,
    geometry_forward,
    geometry_input_width,
    geometry_tangent_backward,
    geometry_tangent_forward,
    load_networks,
    parameters,
    save_networks,
    texture_backward,
    texture_forward,
    texture_input_width,
    zero_gradients,
)

EPS = 3e-5
RTOL = 1e-3
FLOOR = 1e-6


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


def fd_grad(loss_fn, arr, eps=EPS):
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


def assert_close(got, expected, label=""):
    err = np.abs(got - expected)
    tol = np.maximum(FLOOR, RTOL * np.abs(expected))
    assert np.all(err <= tol), f"{label}: max err {err.max():.3e}"


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------


def test_encoding_at_origin():
    enc = PositionalEncoder(6)
    out = enc.forward(np.zeros((1, 3)))
    assert out.shape == (1, 36)
    blocks = out.reshape(6, 6)
    assert np.allclose(blocks[:, :3], 0.0, atol=0)  # sin terms
    assert np.allclose(blocks[:, 3:], 1.0, atol=0)  # cos terms


def test_encoding_zero_freqs_is_empty():
    enc = PositionalEncoder(0)
    assert enc.forward(np.ones((4, 3))).shape == (4, 0)


def test_encoding_unit_x_single_freq():
    enc = PositionalEncoder(1)
    out = enc.forward(np.array([[1.0, 0.0, 0.0]]))[0]
    assert abs(out[0] - np.sin(np.pi)) < 1e-15  # ~0
    assert out[3] == pytest.approx(-1.0, abs=1e-12)  # cos(pi)
    assert out[1] == 0.0 and out[4] == 1.0  # y coordinate


def test_encoding_jvp_vjp_and_second_order_match_fd():
    enc = PositionalEncoder(3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3)) * 0.5
    dx = rng.normal(size=(4, 2, 3))
    R1 = rng.normal(size=(4, enc.width))
    R2 = rng.normal(size=(4, 2, enc.width))

    dpe = enc.jvp(x, dx)
    eps = 1e-6
    for k in range(2):
        fd = (enc.forward(x + eps * dx[:, k]) - enc.forward(x - eps * dx[:, k])) / (2 * eps)
        assert_close(dpe[:, k], fd, f"jvp[{k}]")

    def loss():
        return float(np.sum(R1 * enc.forward(x)) + np.sum(R2 * enc.jvp(x, dx)))

    x_bar, dx_bar = enc.jvp_backward(x, dx, R1, R2)
    assert_close(x_bar, fd_grad(loss, x), "x_bar")
    assert_close(dx_bar, fd_grad(loss, dx), "dx_bar")

    # plain vjp is the primal-only special case
    def loss_primal():
        return float(np.sum(R1 * enc.forward(x)))

    assert_close(enc.vjp(x, R1), fd_grad(loss_primal, x), "vjp")


# ---------------------------------------------------------------------------
# construction and initialization
# ---------------------------------------------------------------------------


def test_default_dimensions():
    cfg = FieldConfig()
    nets = build_networks(cfg, n_frames=3)
    assert geometry_input_width(cfg) == 71
    assert nets.geometry.d_in == 71 and nets.geometry.d_out == 1
    assert nets.deformation.d_in == 3
    assert nets.deformation.d_out == 50 * 3 + 4 * 9 * 3 + 5 == 263
    assert texture_input_width(cfg) == 59
    assert nets.texture.d_in == 59 and nets.texture.d_out == 3
    assert nets.frame_latents.shape == (3, 32)
    assert np.all(nets.frame_latents == 0.0)


def test_build_is_deterministic():
    a = build_networks(small_config(), 2)
    b = build_networks(small_config(), 2)
    for (ka, va), (kb, vb) in zip(sorted(parameters(a).items()), sorted(parameters(b).items())):
        assert ka == kb and np.array_equal(va, vb)
    c = build_networks(small_config(seed=1), 2)
    assert not np.array_equal(a.geometry.layers[0].weight, c.geometry.layers[0].weight)


def test_geometric_initialization_is_sphere_like():
    nets = build_networks(FieldConfig(), 1)
    latent = np.zeros(32)
    r = nets.config.init_radius
    occ_origin, raw_origin, _ = geometry_forward(nets, np.zeros((1, 3)), latent)
    assert occ_origin[0] > 0.5 and raw_origin[0] > 0.0
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(64, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    occ_far, raw_far, _ = geometry_forward(nets, dirs * (2 * r), latent)
    assert np.all(occ_far < 0.5) and np.all(raw_far < 0.0)
    # inside points are inside
    occ_in, _, _ = geometry_forward(nets, dirs * (0.3 * r), latent)
    assert np.all(occ_in > 0.5)
    # the zero crossing of raw sits near the configured radius: bisect along
    # a few random directions and require the crossing within [0.5r, 1.5r]
    for d in dirs[:8]:
        lo, hi = 0.0, 2.0 * r
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            _, raw_mid, _ = geometry_forward(nets, (d * mid)[None], latent)
            if raw_mid[0] > 0:
                lo = mid
            else:
                hi = mid
        assert 0.5 * r < 0.5 * (lo + hi) < 1.5 * r


def test_deformation_initialization_identity_blend():
    nets = build_networks(small_config(), 1)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(100, 3))
    E, P, W, _ = deformation_forward(nets, x)
    assert np.all(E == 0.0)
    assert np.all(P == 0.0)
    assert np.allclose(W, 1.0 / nets.config.n_joints, atol=0)


def test_skinning_weights_simplex():
    nets = build_networks(small_config(), 1)
    # push the head off its zero init so the softmax is exercised
    rng = np.random.default_rng(2)
    nets.deformation.layers[-1].weight[:] = rng.normal(size=nets.deformation.layers[-1].weight.shape) * 0.5
    x = rng.normal(size=(1000, 3))
    _, _, W, _ = deformation_forward(nets, x)
    assert np.all(W > 0)
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# geometry derivatives
# ---------------------------------------------------------------------------


def test_occupancy_gradient_matches_fd():
    nets = build_networks(small_config(), 1)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 3)) * 0.4
    latent = rng.normal(size=32) * 0.1
    occ, raw, cache = geometry_forward(nets, x, latent)
    # d occ / d x = occ*(1-occ) * d raw / d x
    _, x_bar, _ = geometry_backward(nets, cache, occ * (1 - occ))
    eps = 1e-4
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = eps
        op, _, _ = geometry_forward(nets, x + step, latent)
        om, _, _ = geometry_forward(nets, x - step, latent)
        fd = (op - om) / (2 * eps)
        assert_close(x_bar[:, axis], fd, f"d occ/dx[{axis}]")


def test_geometry_backward_full_fd():
    nets = build_networks(small_config(), 2)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3)) * 0.4
    latent = rng.normal(size=32) * 0.2
    R = rng.normal(size=5)

    def loss():
        _, raw, _ = geometry_forward(nets, x, latent)
        return float(np.sum(R * raw))

    _, _, cache = geometry_forward(nets, x, latent)
    grads, x_bar, latent_bar = geometry_backward(nets, cache, R)
    table = zero_gradients(nets)
    accumulate_net_grads(table, "geometry", grads)
    for i, layer in enumerate(nets.geometry.layers):
        assert_close(table[f"geometry.{i}.weight"], fd_grad(loss, layer.weight), f"W{i}")
        assert_close(table[f"geometry.{i}.bias"], fd_grad(loss, layer.bias), f"b{i}")
    assert_close(x_bar, fd_grad(loss, x), "x")
    assert_close(latent_bar, fd_grad(loss, latent), "latent")


def test_geometry_tangent_forward_is_spatial_jacobian():
    nets = build_networks(small_config(), 1)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3)) * 0.4
    latent = np.zeros(32)
    eye = np.broadcast_to(np.eye(3), (6, 3, 3))
    occ, raw, draw, cache = geometry_tangent_forward(nets, x, latent, eye)
    # tangent along identity directions == gradient from the reverse pass
    _, _, cache_b = geometry_forward(nets, x, latent)
    _, x_bar, _ = geometry_backward(nets, cache_b, np.ones(6))
    assert np.allclose(draw, x_bar, atol=1e-12)


def test_geometry_tangent_backward_full_fd():
    nets = build_networks(small_config(), 1)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 3)) * 0.4
    dx = rng.normal(size=(3, 2, 3))
    latent = rng.normal(size=32) * 0.2
    R1 = rng.normal(size=3)
    R2 = rng.normal(size=(3, 2))

    def loss():
        _, raw, draw, _ = geometry_tangent_forward(nets, x, latent, dx)
        return float(np.sum(R1 * raw) + np.sum(R2 * draw))

    _, _, _, cache = geometry_tangent_forward(nets, x, latent, dx)
    grads, x_bar, dx_bar, latent_bar = geometry_tangent_backward(nets, cache, R1, R2)
    table = zero_gradients(nets)
    accumulate_net_grads(table, "geometry", grads)
    for i, layer in enumerate(nets.geometry.layers):
        assert_close(table[f"geometry.{i}.weight"], fd_grad(loss, layer.weight), f"W{i}")
        assert_close(table[f"geometry.{i}.bias"], fd_grad(loss, layer.bias), f"b{i}")
    assert_close(x_bar, fd_grad(loss, x), "x")
    assert_close(dx_bar, fd_grad(loss, dx), "dx")
    assert_close(latent_bar, fd_grad(loss, latent), "latent")


def test_geometry_nonfinite_raises():
    nets = build_networks(small_config(), 1)
    nets.geometry.layers[0].weight[0, 0] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(TrainingDivergedError):
        geometry_forward(nets, np.zeros((1, 3)), np.zeros(32))


# ---------------------------------------------------------------------------
# deformation derivatives
# ---------------------------------------------------------------------------


def _perturbed_deformation_net(seed=7):
    nets = build_networks(small_config(seed=seed), 1)
    rng = np.random.default_rng(seed + 100)
    # move the zero-initialized head so derivatives are non-trivial
    nets.deformation.layers[-1].weight[:] = rng.normal(size=nets.deformation.layers[-1].weight.shape) * 0.3
    nets.deformation.layers[-1].bias[:] = rng.normal(size=nets.deformation.layers[-1].bias.shape) * 0.1
    return nets, rng


def test_deformation_backward_full_fd():
    nets, rng = _perturbed_deformation_net()
    x = rng.normal(size=(3, 3)) * 0.4
    RE = rng.normal(size=(3, 50, 3))
    RP = rng.normal(size=(3, 36, 3))
    RW = rng.normal(size=(3, 5))

    def loss():
        E, P, W, _ = deformation_forward(nets, x)
        return float(np.sum(RE * E) + np.sum(RP * P) + np.sum(RW * W))

    _, _, _, cache = deformation_forward(nets, x)
    grads, x_bar = deformation_backward(nets, cache, RE, RP, RW)
    table = zero_gradients(nets)
    accumulate_net_grads(table, "deformation", grads)
    for i, layer in enumerate(nets.deformation.layers):
        assert_close(table[f"deformation.{i}.weight"], fd_grad(loss, layer.weight), f"W{i}")
        assert_close(table[f"deformation.{i}.bias"], fd_grad(loss, layer.bias), f"b{i}")
    assert_close(x_bar, fd_grad(loss, x), "x")


def test_deformation_tangent_forward_matches_fd():
    nets, rng = _perturbed_deformation_net(8)
    x = rng.normal(size=(4, 3)) * 0.4
    dx = rng.normal(size=(4, 2, 3))
    E, P, W, dE, dP, dW, _ = deformation_tangent_forward(nets, x, dx)
    eps = 1e-6
    for k in range(2):
        Ep, Pp, Wp, _ = deformation_forward(nets, x + eps * dx[:, k])
        Em, Pm, Wm, _ = deformation_forward(nets, x - eps * dx[:, k])
        assert_close(dE[:, k], (Ep - Em) / (2 * eps), f"dE[{k}]")
        assert_close(dP[:, k], (Pp - Pm) / (2 * eps), f"dP[{k}]")
        assert_close(dW[:, k], (Wp - Wm) / (2 * eps), f"dW[{k}]")


def test_deformation_tangent_backward_full_fd():
    nets, rng = _perturbed_deformation_net(9)
    x = rng.normal(size=(2, 3)) * 0.4
    dx = rng.normal(size=(2, 2, 3))
    RE = rng.normal(size=(2, 50, 3))
    RW = rng.normal(size=(2, 5))
    RdE = rng.normal(size=(2, 2, 50, 3))
    RdW = rng.normal(size=(2, 2, 5))

    def loss():
        E, P, W, dE, dP, dW, _ = deformation_tangent_forward(nets, x, dx)
        return float(np.sum(RE * E) + np.sum(RW * W) + np.sum(RdE * dE) + np.sum(RdW * dW))

    _, _, _, _, _, _, cache = deformation_tangent_forward(nets, x, dx)
    grads, x_bar, dx_bar = deformation_tangent_backward(
        nets, cache, RE, None, RW, RdE, None, RdW
    )
    table = zero_gradients(nets)
    accumulate_net_grads(table, "deformation", grads)
    for i, layer in enumerate(nets.deformation.layers):
        assert_close(table[f"deformation.{i}.weight"], fd_grad(loss, layer.weight), f"W{i}")
        assert_close(table[f"deformation.{i}.bias"], fd_grad(loss, layer.bias), f"b{i}")
    assert_close(x_bar, fd_grad(loss, x), "x")
    assert_close(dx_bar, fd_grad(loss, dx), "dx")


# ---------------------------------------------------------------------------
# texture
# ---------------------------------------------------------------------------


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_texture_range_and_determinism():
    nets = build_networks(small_config(), 1)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1000, 3))
    n = _unit(rng.normal(size=(1000, 3)))
    jaw = np.array([0.2, 0.0, 0.0])
    psi = rng.normal(size=50)
    rgb, _ = texture_forward(nets, x, n, jaw, psi)
    assert np.all(rgb >= 0.0) and np.all(rgb <= 1.0)
    rgb2, _ = texture_forward(nets, x, n, jaw, psi)
    assert np.array_equal(rgb, rgb2)


def test_texture_rejects_bad_normal():
    nets = build_networks(small_config(), 1)
    with pytest.raises(InvalidInputError):
        texture_forward(nets, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros(3), np.zeros(50))


def test_texture_backward_matches_fd():
    nets = build_networks(small_config(), 1)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3)) * 0.4
    n = _unit(rng.normal(size=(4, 3)))
    jaw = np.array([0.1, 0.0, 0.0])
    psi = rng.normal(size=50) * 0.3
    R = rng.normal(size=(4, 3))

    def loss():
        rgb, _ = texture_forward(nets, x, n, jaw, psi)
        return float(np.sum(R * rgb))

    rgb, cache = texture_forward(nets, x, n, jaw, psi)
    grads, x_bar, n_bar = texture_backward(nets, cache, R)
    table = zero_gradients(nets)
    accumulate_net_grads(table, "texture", grads)
    for i, layer in enumerate(nets.texture.layers):
        if layer.activation == "relu" and np.any(np.abs(cache.mlp.preacts[i]) < 1e-3):
            pytest.skip("finite differences unreliable at a relu kink")
        assert_close(table[f"texture.{i}.weight"], fd_grad(loss, layer.weight), f"W{i}")
        assert_close(table[f"texture.{i}.bias"], fd_grad(loss, layer.bias), f"b{i}")
    assert_close(x_bar, fd_grad(loss, x), "x")
    assert_close(n_bar, fd_grad(loss, n), "n")


# ---------------------------------------------------------------------------
# parameter table and checkpoints
# ---------------------------------------------------------------------------


def test_parameters_are_live_references():
    nets = build_networks(small_config(), 2)
    table = parameters(nets)
    table["geometry.0.weight"][0, 0] = 123.0
    assert nets.geometry.layers[0].weight[0, 0] == 123.0
    table["frame_latents"][1, 5] = -4.0
    assert nets.frame_latents[1, 5] == -4.0


def test_zero_gradients_match_parameter_shapes():
    nets = build_networks(small_config(), 2)
    params = parameters(nets)
    grads = zero_gradients(nets)
    assert set(params) == set(grads)
    for k in params:
        assert params[k].shape == grads[k].shape
        assert np.all(grads[k] == 0.0)


def test_mean_latent():
    nets = build_networks(small_config(), 3)
    nets.frame_latents[:] = [[1.0] * 32, [2.0] * 32, [3.0] * 32]
    assert np.allclose(nets.mean_latent(), 2.0, atol=0)


def test_network_save_load_round_trip(tmp_path):
    nets = build_networks(small_config(seed=5), 4)
    rng = np.random.default_rng(12)
    nets.frame_latents[:] = rng.normal(size=nets.frame_latents.shape)
    path = tmp_path / "ckpt.mhc"
    save_networks(path, nets, extra_arrays={"adam.step": np.array([7])}, extra_meta={"epoch": 3})
    loaded, extra, meta = load_networks(path)
    assert meta["epoch"] == 3
    assert extra["adam.step"][0] == 7
    p0, p1 = parameters(nets), parameters(loaded)
    assert set(p0) == set(p1)
    for k in p0:
        assert np.array_equal(p0[k], p1[k]), k
    assert loaded.config == nets.config
    # loaded networks produce identical outputs
    x = rng.normal(size=(5, 3))
    _, raw0, _ = geometry_forward(nets, x, nets.frame_latents[0])
    _, raw1, _ = geometry_forward(loaded, x, loaded.frame_latents[0])
    assert np.array_equal(raw0, raw1)
