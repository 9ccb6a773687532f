"""The three canonical fields: occupancy (geometry), deformation, texture.

Wraps the raw MLP passes with input encodings, output heads, and
initialization schemes:

  geometry     [x, positional encoding, per-frame latent] -> raw scalar;
               occupancy = logistic(raw); the surface is the 0.5 level
               set, i.e. raw = 0. Initialized so the raw field starts as
               an approximate sphere of radius `init_radius` (positive
               inside, negative outside).
  deformation  x -> (expression vectors E, pose-corrective vectors P,
               skinning weights W via softmax). Final layer zero so the
               initial warp is a pure blend of identity bone transforms.
  texture      [x, deformed normal, jaw pose, expression] -> RGB.

Each field exposes forward, reverse (backward), and — for geometry and
deformation — tangent passes carrying K directional derivatives, plus the
reverse pass through those tangents. That last path is how losses on
normals and warp Jacobians reach the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FieldConfig, LATENT_DIM, N_EXPR
from .containers import read_container, write_container
from .errors import InvalidInputError, TrainingDivergedError
from .mlp import (
    Layer,
    MlpCache,
    MlpParams,
    MlpTangentCache,
    _sigmoid,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_tangent_backward,
    mlp_tangent_forward,
    softmax,
    softmax_jvp,
    softmax_jvp_backward,
    softmax_vjp,
)

# ---------------------------------------------------------------------------
# positional encoding with full derivative set
# ---------------------------------------------------------------------------


class PositionalEncoder:
    """Per-coordinate sin/cos ladder: for k < num_freqs emits
    sin(2^k pi x), cos(2^k pi x), laid out frequency-major as
    [sin_k(x), cos_k(x)] blocks of 3."""

    def __init__(self, num_freqs: int):
        if num_freqs < 0:
            raise InvalidInputError("num_freqs must be >= 0")
        self.num_freqs = num_freqs
        self.scales = (2.0 ** np.arange(num_freqs)) * np.pi  # (F,)
        self.width = 6 * num_freqs

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.num_freqs == 0:
            return np.zeros((len(x), 0))
        arg = x[:, None, :] * self.scales[None, :, None]  # (N, F, 3)
        out = np.concatenate([np.sin(arg), np.cos(arg)], axis=2)  # (N, F, 6)
        return out.reshape(len(x), self.width)

    def jvp(self, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
        """Tangents of the encoding; dx is (N, K, 3) -> (N, K, width)."""
        if self.num_freqs == 0:
            return np.zeros((len(x), dx.shape[1], 0))
        arg = x[:, None, :] * self.scales[None, :, None]  # (N, F, 3)
        darg = dx[:, :, None, :] * self.scales[None, None, :, None]  # (N, K, F, 3)
        dsin = np.cos(arg)[:, None] * darg
        dcos = -np.sin(arg)[:, None] * darg
        out = np.concatenate([dsin, dcos], axis=3)  # (N, K, F, 6)
        return out.reshape(len(x), dx.shape[1], self.width)

    def vjp(self, x: np.ndarray, pe_bar: np.ndarray) -> np.ndarray:
        """x_bar from upstream encoding gradient (N, width) -> (N, 3)."""
        if self.num_freqs == 0:
            return np.zeros_like(x)
        arg = x[:, None, :] * self.scales[None, :, None]
        g = pe_bar.reshape(len(x), self.num_freqs, 6)
        sin_bar, cos_bar = g[:, :, :3], g[:, :, 3:]
        contrib = sin_bar * np.cos(arg) - cos_bar * np.sin(arg)
        return np.einsum("nfc,f->nc", contrib, self.scales)

    def jvp_backward(
        self, x: np.ndarray, dx: np.ndarray, pe_bar: np.ndarray | None, dpe_bar: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Reverse through (x, dx) -> (pe, dpe). Returns (x_bar, dx_bar)."""
        if self.num_freqs == 0:
            return np.zeros_like(x), np.zeros_like(dx)
        arg = x[:, None, :] * self.scales[None, :, None]  # (N, F, 3)
        sin_a, cos_a = np.sin(arg), np.cos(arg)
        g = dpe_bar.reshape(len(x), dx.shape[1], self.num_freqs, 6)
        dsin_bar, dcos_bar = g[..., :3], g[..., 3:]  # (N, K, F, 3)
        # dpe_sin = a * cos(a x) * dx ; dpe_cos = -a * sin(a x) * dx
        a = self.scales[None, None, :, None]
        dx_bar = np.sum(a * (cos_a[:, None] * dsin_bar - sin_a[:, None] * dcos_bar), axis=2)
        x_bar = np.sum(
            (a**2) * dx[:, :, None, :] * (-sin_a[:, None] * dsin_bar - cos_a[:, None] * dcos_bar),
            axis=(1, 2),
        )
        if pe_bar is not None:
            x_bar = x_bar + self.vjp(x, pe_bar)
        return x_bar, dx_bar


# ---------------------------------------------------------------------------
# network bundle
# ---------------------------------------------------------------------------


@dataclass
class FieldNetworks:
    geometry: MlpParams
    deformation: MlpParams
    texture: MlpParams
    frame_latents: np.ndarray  # (n_frames, latent_dim), trainable
    config: FieldConfig
    encoder: PositionalEncoder = field(init=False)

    def __post_init__(self):
        self.encoder = PositionalEncoder(self.config.pe_freqs)

    @property
    def deformation_head_width(self) -> int:
        c = self.config
        return c.n_expr * 3 + c.n_pose_joints * 9 * 3 + c.n_joints

    def mean_latent(self) -> np.ndarray:
        """Inference-time latent for novel animation parameters."""
        if len(self.frame_latents) == 0:
            return np.zeros(self.config.latent_dim)
        return self.frame_latents.mean(axis=0)


def geometry_input_width(cfg: FieldConfig) -> int:
    return 3 + 6 * cfg.pe_freqs + cfg.latent_dim


def texture_input_width(cfg: FieldConfig) -> int:
    return 3 + 3 + 3 + cfg.n_expr


def build_networks(cfg: FieldConfig, n_frames: int) -> FieldNetworks:
    """Deterministic construction from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)

    geometry = _geometric_init(cfg, rng)

    deform_sizes = [3, *cfg.deformation_hidden, cfg.n_expr * 3 + cfg.n_pose_joints * 27 + cfg.n_joints]
    deformation = init_mlp(deform_sizes, cfg.deformation_activation, "none", rng)
    # zero final layer: blendshapes start at zero, skinning logits at zero
    # (uniform weights after softmax)
    deformation.layers[-1].weight[:] = 0.0
    deformation.layers[-1].bias[:] = 0.0

    tex_sizes = [texture_input_width(cfg), *cfg.texture_hidden, 3]
    texture = init_mlp(tex_sizes, cfg.texture_activation, "sigmoid", rng)

    latents = np.zeros((n_frames, cfg.latent_dim))
    return FieldNetworks(geometry, deformation, texture, latents, cfg)


def _geometric_init(cfg: FieldConfig, rng: np.random.Generator) -> MlpParams:
    """Initialize the geometry MLP so raw(x) ~ init_radius - ||x||:
    positive (occupancy > 0.5) inside the sphere, negative outside."""
    sizes = [geometry_input_width(cfg), *cfg.geometry_hidden, 1]
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        is_last = i == len(sizes) - 2
        if is_last:
            W = rng.normal(-np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4, size=(fan_out, fan_in))
            b = np.full(fan_out, cfg.init_radius)
            act = "none"
        else:
            W = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            act = cfg.geometry_activation
            if i == 0:
                W[:, 3:] = 0.0  # encoding and latent columns start silent
        layers.append(Layer(W, b, act))
    # Latent inputs are all-zero at initialization, so these columns cannot
    # perturb the sphere — but if they started at zero too, both the codes
    # and the columns would receive identically zero gradients forever
    # (each gradient is a product with the other's zeros). Tiny noise from
    # a stream-independent generator keeps the pathway trainable without
    # shifting any other draw.
    latent_rng = np.random.default_rng([cfg.seed, 0x1A7E])
    layers[0].weight[:, -cfg.latent_dim:] = latent_rng.normal(
        0.0, 1e-4, size=(layers[0].weight.shape[0], cfg.latent_dim)
    )
    return MlpParams(layers)


# ---------------------------------------------------------------------------
# geometry field
# ---------------------------------------------------------------------------


@dataclass
class GeometryCache:
    mlp: MlpCache | MlpTangentCache
    x: np.ndarray
    dx: np.ndarray | None
    latent_was_single: bool


def _geometry_stack(nets: FieldNetworks, x: np.ndarray, latent: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    latent = np.asarray(latent, dtype=np.float64)
    single = latent.ndim == 1
    if single:
        latent = np.broadcast_to(latent, (len(x), latent.shape[0]))
    pe = nets.encoder.forward(x)
    return np.concatenate([x, pe, latent], axis=1), single


def geometry_forward(
    nets: FieldNetworks, x: np.ndarray, latent: np.ndarray
) -> tuple[np.ndarray, np.ndarray, GeometryCache]:
    """Returns (occupancy (N,), raw (N,), cache)."""
    inp, single = _geometry_stack(nets, x, latent)
    raw2d, cache = mlp_forward(nets.geometry, inp)
    raw = raw2d[:, 0]
    if not np.all(np.isfinite(raw)):
        if not nets.geometry.all_finite():
            raise TrainingDivergedError("geometry parameters are non-finite")
        raise TrainingDivergedError("geometry produced non-finite output")
    return _sigmoid(raw), raw, GeometryCache(cache, np.asarray(x, dtype=np.float64), None, single)


def geometry_backward(
    nets: FieldNetworks, cache: GeometryCache, raw_bar: np.ndarray
) -> tuple[list, np.ndarray, np.ndarray]:
    """Reverse pass from upstream gradient on the raw scalar.

    Returns (mlp grads, x_bar (N,3), latent_bar). Callers differentiating
    occupancy must fold d occ/d raw = occ*(1-occ) into raw_bar themselves.
    """
    grads, inp_bar = mlp_backward(cache.mlp, np.asarray(raw_bar, dtype=np.float64)[:, None])
    x_bar, latent_bar = _split_geometry_input_grad(nets, cache.x, inp_bar, cache.latent_was_single)
    return grads, x_bar, latent_bar


def _split_geometry_input_grad(nets, x, inp_bar, latent_was_single):
    pe_w = nets.encoder.width
    x_bar = inp_bar[:, :3] + nets.encoder.vjp(x, inp_bar[:, 3 : 3 + pe_w])
    latent_bar = inp_bar[:, 3 + pe_w :]
    if latent_was_single:
        latent_bar = latent_bar.sum(axis=0)
    return x_bar, latent_bar


def geometry_tangent_forward(
    nets: FieldNetworks, x: np.ndarray, latent: np.ndarray, dx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, GeometryCache]:
    """Directional derivatives of raw along dx (N, K, 3).

    Returns (occ (N,), raw (N,), draw (N, K), cache). The gradient of raw
    w.r.t. x is obtained with dx = identity directions.
    """
    inp, single = _geometry_stack(nets, x, latent)
    x = np.asarray(x, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    dpe = nets.encoder.jvp(x, dx)
    dlat = np.zeros((len(x), dx.shape[1], nets.config.latent_dim))
    dinp = np.concatenate([dx, dpe, dlat], axis=2)
    raw2d, draw3d, cache = mlp_tangent_forward(nets.geometry, inp, dinp)
    raw = raw2d[:, 0]
    if not np.all(np.isfinite(raw)) or not np.all(np.isfinite(draw3d)):
        raise TrainingDivergedError("geometry produced non-finite output")
    return _sigmoid(raw), raw, draw3d[:, :, 0], GeometryCache(cache, x, dx, single)


def geometry_tangent_backward(
    nets: FieldNetworks,
    cache: GeometryCache,
    raw_bar: np.ndarray | None,
    draw_bar: np.ndarray | None,
) -> tuple[list, np.ndarray, np.ndarray, np.ndarray]:
    """Reverse through the tangent pass. raw_bar is (N,), draw_bar (N, K).

    Returns (mlp grads, x_bar, dx_bar, latent_bar).
    """
    tc: MlpTangentCache = cache.mlp
    n, k = tc.tangents[0].shape[0], tc.tangents[0].shape[1]
    y_bar = None if raw_bar is None else np.asarray(raw_bar, dtype=np.float64)[:, None]
    dy_bar = None if draw_bar is None else np.asarray(draw_bar, dtype=np.float64)[:, :, None]
    grads, inp_bar, dinp_bar = mlp_tangent_backward(tc, y_bar, dy_bar)
    pe_w = nets.encoder.width
    x_bar_enc, dx_bar = nets.encoder.jvp_backward(
        cache.x, cache.dx, inp_bar[:, 3 : 3 + pe_w], dinp_bar[:, :, 3 : 3 + pe_w]
    )
    x_bar = inp_bar[:, :3] + x_bar_enc
    dx_bar = dx_bar + dinp_bar[:, :, :3]
    latent_bar = inp_bar[:, 3 + pe_w :]
    if cache.latent_was_single:
        latent_bar = latent_bar.sum(axis=0)
    return grads, x_bar, dx_bar, latent_bar


# ---------------------------------------------------------------------------
# deformation field
# ---------------------------------------------------------------------------


@dataclass
class DeformationCache:
    mlp: MlpCache | MlpTangentCache
    weights: np.ndarray  # softmax output (N, n_j)
    dlogits: np.ndarray | None  # (N, K, n_j) when tangent


def _split_deformation_head(nets: FieldNetworks, y: np.ndarray):
    c = nets.config
    n_e, n_p, n_j = c.n_expr, c.n_pose_joints, c.n_joints
    E = y[..., : n_e * 3].reshape(*y.shape[:-1], n_e, 3)
    P = y[..., n_e * 3 : n_e * 3 + n_p * 27].reshape(*y.shape[:-1], n_p * 9, 3)
    logits = y[..., n_e * 3 + n_p * 27 :]
    return E, P, logits


def _join_deformation_head(nets: FieldNetworks, E_bar, P_bar, logit_bar):
    lead = E_bar.shape[:-2]
    return np.concatenate(
        [E_bar.reshape(*lead, -1), P_bar.reshape(*lead, -1), logit_bar], axis=-1
    )


def deformation_forward(
    nets: FieldNetworks, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, DeformationCache]:
    """Returns (E (N, n_e, 3), P (N, n_p*9, 3), W (N, n_j), cache);
    W rows are strictly positive and sum to 1."""
    x = np.asarray(x, dtype=np.float64)
    y, cache = mlp_forward(nets.deformation, x)
    E, P, logits = _split_deformation_head(nets, y)
    W = softmax(logits)
    return E, P, W, DeformationCache(cache, W, None)


def deformation_backward(
    nets: FieldNetworks, cache: DeformationCache, E_bar, P_bar, W_bar
) -> tuple[list, np.ndarray]:
    """Returns (mlp grads, x_bar)."""
    logit_bar = softmax_vjp(cache.weights, np.asarray(W_bar, dtype=np.float64))
    y_bar = _join_deformation_head(nets, np.asarray(E_bar, dtype=np.float64),
                                   np.asarray(P_bar, dtype=np.float64), logit_bar)
    return mlp_backward(cache.mlp, y_bar)


def deformation_tangent_forward(
    nets: FieldNetworks, x: np.ndarray, dx: np.ndarray
):
    """Forward with K directional derivatives of every head.

    Returns (E, P, W, dE (N,K,n_e,3), dP, dW, cache).
    """
    x = np.asarray(x, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    y, dy, cache = mlp_tangent_forward(nets.deformation, x, dx)
    E, P, logits = _split_deformation_head(nets, y)
    dE, dP, dlogits = _split_deformation_head(nets, dy)
    W = softmax(logits)
    dW = softmax_jvp(W, dlogits)
    return E, P, W, dE, dP, dW, DeformationCache(cache, W, dlogits)


def deformation_tangent_backward(
    nets: FieldNetworks,
    cache: DeformationCache,
    E_bar, P_bar, W_bar,
    dE_bar, dP_bar, dW_bar,
) -> tuple[list, np.ndarray, np.ndarray]:
    """Reverse through the tangent pass; returns (grads, x_bar, dx_bar).
    Upstream arrays may be None when a head does not contribute."""
    n, k = cache.dlogits.shape[0], cache.dlogits.shape[1]
    c = nets.config
    zeros = {
        "E": lambda: np.zeros((n, c.n_expr, 3)),
        "P": lambda: np.zeros((n, c.n_pose_joints * 9, 3)),
        "W": lambda: np.zeros((n, c.n_joints)),
        "dE": lambda: np.zeros((n, k, c.n_expr, 3)),
        "dP": lambda: np.zeros((n, k, c.n_pose_joints * 9, 3)),
        "dW": lambda: np.zeros((n, k, c.n_joints)),
    }
    E_bar = zeros["E"]() if E_bar is None else np.asarray(E_bar, dtype=np.float64)
    P_bar = zeros["P"]() if P_bar is None else np.asarray(P_bar, dtype=np.float64)
    W_bar = zeros["W"]() if W_bar is None else np.asarray(W_bar, dtype=np.float64)
    dE_bar = zeros["dE"]() if dE_bar is None else np.asarray(dE_bar, dtype=np.float64)
    dP_bar = zeros["dP"]() if dP_bar is None else np.asarray(dP_bar, dtype=np.float64)
    dW_bar = zeros["dW"]() if dW_bar is None else np.asarray(dW_bar, dtype=np.float64)

    logit_bar, dlogit_bar = softmax_jvp_backward(cache.weights, cache.dlogits, W_bar, dW_bar)
    y_bar = _join_deformation_head(nets, E_bar, P_bar, logit_bar)
    dy_bar = _join_deformation_head(nets, dE_bar, dP_bar, dlogit_bar)
    grads, x_bar, dx_bar = mlp_tangent_backward(cache.mlp, y_bar, dy_bar)
    return grads, x_bar, dx_bar


# ---------------------------------------------------------------------------
# texture field
# ---------------------------------------------------------------------------


@dataclass
class TextureCache:
    mlp: MlpCache


def texture_forward(
    nets: FieldNetworks, x: np.ndarray, normal: np.ndarray, jaw: np.ndarray, psi: np.ndarray
) -> tuple[np.ndarray, TextureCache]:
    """RGB in [0,1]^3. `normal` rows must be unit length; jaw is the
    3-vector jaw rotation, psi the full expression vector (broadcast if
    passed as single rows)."""
    x = np.asarray(x, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    norms = np.linalg.norm(normal, axis=-1)
    # callers are expected to pre-normalize to 1e-6; enforcement is looser so
    # finite-difference probes of the normal input remain legal
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise InvalidInputError("texture normals must be unit length (callers pre-normalize)")
    jaw = np.broadcast_to(np.asarray(jaw, dtype=np.float64), (len(x), 3))
    psi = np.broadcast_to(np.asarray(psi, dtype=np.float64), (len(x), nets.config.n_expr))
    inp = np.concatenate([x, normal, jaw, psi], axis=1)
    rgb, cache = mlp_forward(nets.texture, inp)
    return rgb, TextureCache(cache)


def texture_backward(
    nets: FieldNetworks, cache: TextureCache, rgb_bar: np.ndarray
) -> tuple[list, np.ndarray, np.ndarray]:
    """Returns (mlp grads, x_bar, normal_bar); jaw/psi are data inputs."""
    grads, inp_bar = mlp_backward(cache.mlp, np.asarray(rgb_bar, dtype=np.float64))
    return grads, inp_bar[:, :3], inp_bar[:, 3:6]


# ---------------------------------------------------------------------------
# parameter table (flat view for the optimizer and checkpoints)
# ---------------------------------------------------------------------------

_NET_NAMES = ("geometry", "deformation", "texture")


def parameters(nets: FieldNetworks) -> dict[str, np.ndarray]:
    """Live references to every trainable array, keyed by stable names."""
    out: dict[str, np.ndarray] = {}
    for net_name in _NET_NAMES:
        net: MlpParams = getattr(nets, net_name)
        for i, layer in enumerate(net.layers):
            out[f"{net_name}.{i}.weight"] = layer.weight
            out[f"{net_name}.{i}.bias"] = layer.bias
    out["frame_latents"] = nets.frame_latents
    return out


def zero_gradients(nets: FieldNetworks) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in parameters(nets).items()}


def accumulate_net_grads(
    grad_table: dict[str, np.ndarray], net_name: str, mlp_grads: list[tuple[np.ndarray, np.ndarray]]
) -> None:
    for i, (dW, db) in enumerate(mlp_grads):
        grad_table[f"{net_name}.{i}.weight"] += dW
        grad_table[f"{net_name}.{i}.bias"] += db


def accumulate_latent_grad(
    grad_table: dict[str, np.ndarray], frame_id: int, latent_bar: np.ndarray
) -> None:
    grad_table["frame_latents"][frame_id] += latent_bar


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def networks_to_arrays(nets: FieldNetworks) -> tuple[dict[str, np.ndarray], dict]:
    arrays = dict(parameters(nets))
    meta = {
        "field_config": _field_config_dict(nets.config),
        "activations": {
            name: [layer.activation for layer in getattr(nets, name).layers] for name in _NET_NAMES
        },
    }
    return arrays, meta


def networks_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> FieldNetworks:
    cfg = FieldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["field_config"].items()})
    nets_layers: dict[str, list[Layer]] = {}
    for net_name in _NET_NAMES:
        acts = meta["activations"][net_name]
        layers = []
        for i, act in enumerate(acts):
            layers.append(Layer(arrays[f"{net_name}.{i}.weight"], arrays[f"{net_name}.{i}.bias"], act))
        nets_layers[net_name] = layers
    return FieldNetworks(
        geometry=MlpParams(nets_layers["geometry"]),
        deformation=MlpParams(nets_layers["deformation"]),
        texture=MlpParams(nets_layers["texture"]),
        frame_latents=arrays["frame_latents"],
        config=cfg,
    )


def _field_config_dict(cfg: FieldConfig) -> dict:
    import dataclasses

    return {
        k: list(v) if isinstance(v, tuple) else v
        for k, v in dataclasses.asdict(cfg).items()
    }


def save_networks(path, nets: FieldNetworks, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> None:
    arrays, meta = networks_to_arrays(nets)
    if extra_arrays:
        overlap = set(arrays) & set(extra_arrays)
        if overlap:
            raise InvalidInputError(f"extra arrays collide with parameter names: {sorted(overlap)}")
        arrays.update(extra_arrays)
    meta["kind"] = "field_networks"
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, arrays, meta)


def load_networks(path) -> tuple[FieldNetworks, dict[str, np.ndarray], dict]:
    """Returns (networks, non-parameter arrays, meta)."""
    arrays, meta = read_container(path)
    nets = networks_from_arrays(arrays, meta)
    param_names = set(parameters(nets))
    extra = {k: v for k, v in arrays.items() if k not in param_names}
    return nets, extra, meta
