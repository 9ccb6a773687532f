"""Small batched MLPs with explicit forward, reverse, and tangent passes.

Everything downstream differentiates through these networks without a
general autodiff system, so this module provides four passes:

  forward           x -> y                      (caches intermediates)
  backward          y_bar -> (param grads, x_bar)
  tangent_forward   (x, dx) -> (y, dy)          directional derivatives,
                                                K directions at once
  tangent_backward  (y_bar, dy_bar) -> grads    reverse pass through the
                                                tangent computation; uses
                                                second derivatives of the
                                                activations

The tangent machinery is what makes gradients of *derived* quantities
(spatial Jacobians, surface normals) flow back into parameters.

Shapes: batch-first. x is (N, d_in); tangents dx are (N, K, d_in).
Weights are (d_out, d_in); biases (d_out,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidStateError

# ---------------------------------------------------------------------------
# activations: value, first and second derivative w.r.t. pre-activation
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def act_value(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "none":
        return z
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "sigmoid":
        return _sigmoid(z)
    if tag == "softplus100":
        return np.logaddexp(0.0, 100.0 * z) / 100.0
    raise InvalidInputError(f"unknown activation {tag!r}")


def act_deriv(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "none":
        return np.ones_like(z)
    if tag == "relu":
        return (z > 0).astype(z.dtype)
    if tag == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    if tag == "softplus100":
        return _sigmoid(100.0 * z)
    raise InvalidInputError(f"unknown activation {tag!r}")


def act_second_deriv(tag: str, z: np.ndarray) -> np.ndarray:
    if tag in ("none", "relu"):
        return np.zeros_like(z)
    if tag == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s) * (1.0 - 2.0 * s)
    if tag == "softplus100":
        s = _sigmoid(100.0 * z)
        return 100.0 * s * (1.0 - s)
    raise InvalidInputError(f"unknown activation {tag!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError("layer weight/bias shapes do not chain")


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise InvalidInputError("consecutive layer dimensions do not chain")

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.layers[-1].weight.shape[0]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weight)) and np.all(np.isfinite(l.bias)) for l in self.layers)


def init_mlp(
    sizes: list[int],
    hidden_activation: str,
    output_activation: str,
    rng: np.random.Generator,
) -> MlpParams:
    """He-style initialization; sizes = [d_in, h1, ..., d_out]."""
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(W, b, act))
    return MlpParams(layers)


def zero_grads(params: MlpParams) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.layers]


def add_grads(into, other) -> None:
    for (gw, gb), (ow, ob) in zip(into, other):
        gw += ow
        gb += ob


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class MlpCache:
    params: MlpParams
    activations: list[np.ndarray]  # a_0 = x, ..., a_L = y
    preacts: list[np.ndarray]  # s_1, ..., s_L


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise InvalidInputError(f"expected input (N, {params.d_in}), got {x.shape}")
    a = x
    activations = [a]
    preacts = []
    for layer in params.layers:
        s = a @ layer.weight.T + layer.bias
        a = act_value(layer.activation, s)
        preacts.append(s)
        activations.append(a)
    return a, MlpCache(params, activations, preacts)


def mlp_backward(
    cache: MlpCache, y_bar: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse pass: returns ([(dW, db) per layer], x_bar)."""
    params = cache.params
    a_bar = np.asarray(y_bar, dtype=np.float64)
    if not cache.preacts or a_bar.shape != cache.activations[-1].shape:
        raise InvalidStateError("backward called without a matching forward cache")
    grads = []
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        s_bar = a_bar * act_deriv(layer.activation, cache.preacts[li])
        dW = s_bar.T @ cache.activations[li]
        db = s_bar.sum(axis=0)
        a_bar = s_bar @ layer.weight
        grads.append((dW, db))
    grads.reverse()
    return grads, a_bar


# ---------------------------------------------------------------------------
# tangent (JVP) forward / backward
# ---------------------------------------------------------------------------


@dataclass
class MlpTangentCache:
    params: MlpParams
    activations: list[np.ndarray]  # a_l, (N, d)
    preacts: list[np.ndarray]  # s_l, (N, d)
    tangents: list[np.ndarray]  # da_l, (N, K, d); da_0 = dx
    pre_tangents: list[np.ndarray]  # ds_l, (N, K, d)


def mlp_tangent_forward(
    params: MlpParams, x: np.ndarray, dx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, MlpTangentCache]:
    """Forward with K directional derivatives: returns (y, dy, cache);
    dy[n, k] = J(x[n]) @ dx[n, k]."""
    x = np.asarray(x, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    if dx.ndim != 3 or dx.shape[0] != x.shape[0] or dx.shape[2] != x.shape[1]:
        raise InvalidInputError(f"expected tangents (N, K, {x.shape[1]}), got {dx.shape}")
    a, da = x, dx
    activations, preacts, tangents, pre_tangents = [a], [], [da], []
    for layer in params.layers:
        s = a @ layer.weight.T + layer.bias
        ds = np.einsum("nki,oi->nko", da, layer.weight)
        phi_p = act_deriv(layer.activation, s)
        a = act_value(layer.activation, s)
        da = phi_p[:, None, :] * ds
        activations.append(a)
        preacts.append(s)
        tangents.append(da)
        pre_tangents.append(ds)
    return a, da, MlpTangentCache(params, activations, preacts, tangents, pre_tangents)


def mlp_tangent_backward(
    cache: MlpTangentCache, y_bar: np.ndarray | None, dy_bar: np.ndarray | None
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray, np.ndarray]:
    """Reverse pass through the tangent-augmented forward.

    Given upstream gradients w.r.t. the primal output y (shape (N, d_out))
    and/or the tangent output dy (shape (N, K, d_out)), produces parameter
    gradients plus gradients w.r.t. x and dx. Activation second derivatives
    enter through the product rule on da = phi'(s) * ds.
    """
    params = cache.params
    a_bar = (
        np.asarray(y_bar, dtype=np.float64)
        if y_bar is not None
        else np.zeros_like(cache.activations[-1])
    )
    da_bar = (
        np.asarray(dy_bar, dtype=np.float64)
        if dy_bar is not None
        else np.zeros_like(cache.tangents[-1])
    )
    if a_bar.shape != cache.activations[-1].shape or da_bar.shape != cache.tangents[-1].shape:
        raise InvalidStateError("tangent backward called without a matching forward cache")
    grads = []
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        s = cache.preacts[li]
        ds = cache.pre_tangents[li]
        a_prev = cache.activations[li]
        da_prev = cache.tangents[li]
        phi_p = act_deriv(layer.activation, s)
        phi_pp = act_second_deriv(layer.activation, s)

        # da = phi'(s) * ds  (elementwise over the K directions)
        ds_bar = phi_p[:, None, :] * da_bar
        s_bar = phi_p * a_bar + phi_pp * np.einsum("nko,nko->no", da_bar, ds)

        # s = a_prev @ W^T + b ; ds = da_prev @ W^T
        dW = s_bar.T @ a_prev + np.einsum("nko,nki->oi", ds_bar, da_prev)
        db = s_bar.sum(axis=0)
        a_bar = s_bar @ layer.weight
        da_bar = np.einsum("nko,oi->nki", ds_bar, layer.weight)
        grads.append((dW, db))
    grads.reverse()
    return grads, a_bar, da_bar


# ---------------------------------------------------------------------------
# softmax head (used for skinning weights) with full derivative set
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(s: np.ndarray, s_bar: np.ndarray) -> np.ndarray:
    """z_bar given s = softmax(z) and upstream s_bar."""
    inner = np.sum(s * s_bar, axis=-1, keepdims=True)
    return s * (s_bar - inner)


def softmax_jvp(s: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """ds given s = softmax(z) and input tangent dz (broadcasts over extra
    leading axes of dz, e.g. (N, K, d) tangents with s of shape (N, d))."""
    if dz.ndim == s.ndim + 1:
        s = s[..., None, :]
    inner = np.sum(s * dz, axis=-1, keepdims=True)
    return s * (dz - inner)


def softmax_jvp_backward(
    s: np.ndarray, dz: np.ndarray, s_bar: np.ndarray | None, ds_bar: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass through (z, dz) -> (s, ds) where ds = softmax_jvp(s, dz).

    Returns (z_bar, dz_bar). `dz` and `ds_bar` may carry an extra direction
    axis (N, K, d) with s of shape (N, d); contributions are summed over K.
    """
    s_b = s[..., None, :] if dz.ndim == s.ndim + 1 else s
    t = np.sum(s_b * dz, axis=-1, keepdims=True)  # <s, dz_k>
    q = ds_bar * s_b  # q_i = ds_bar_i * s_i
    Q = q.sum(axis=-1, keepdims=True)  # <ds_bar, s>
    r = q * (dz - t)
    Rs = r.sum(axis=-1, keepdims=True)
    z_bar_dir = r - s_b * Rs - Q * s_b * (dz - t)
    if dz.ndim == s.ndim + 1:
        z_bar = z_bar_dir.sum(axis=-2)
    else:
        z_bar = z_bar_dir
    if s_bar is not None:
        z_bar = z_bar + softmax_vjp(s, s_bar)
    dz_bar = softmax_jvp(s, ds_bar)  # J_softmax is symmetric
    return z_bar, dz_bar
