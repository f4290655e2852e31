"""The three networks and the compositing math.

Two position-conditioned MLPs produce opacity and an 8-d feature vector;
a small shader MLP turns (feature, view direction) into RGB. Opacity can
be binarized with a straight-through threshold so the same machinery
trains both the continuous and the hard-surface model.

Training runs on the autodiff tape in float64; the ``*_np`` variants are
plain-array mirrors used by baking and rendering (float32 there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PAPER_WIDTH = 384
PAPER_DEGREE = 10
TOY_WIDTH = 64
TOY_DEGREE = 6
FEATURE_DIM = 8
SHADER_WIDTH = 16
TRUNK_DEPTH = 8
SKIP_AT = 4


@dataclass
class FieldNet:
    """Position MLP: 8 relu layers with the encoding re-injected midway."""

    layers: list  # [(Tensor w, Tensor b), ...] trunk
    head: tuple  # (Tensor w, Tensor b), sigmoid
    degree: int
    skip_at: int = SKIP_AT

    def parameters(self):
        out = []
        for w, b in self.layers:
            out += [w, b]
        out += list(self.head)
        return out


@dataclass
class ShaderNet:
    """Two hidden layers of 16, sigmoid RGB head; raw view direction input."""

    layers: list

    def parameters(self):
        out = []
        for w, b in self.layers:
            out += [w, b]
        return out


@dataclass
class FieldParams:
    opacity: FieldNet
    features: FieldNet
    shader: ShaderNet

    def parameters(self):
        return self.opacity.parameters() + self.features.parameters() + self.shader.parameters()

    def shader_parameters(self):
        return self.shader.parameters()

    def feature_parameters(self):
        return self.features.parameters()

    @property
    def degree(self) -> int:
        return self.opacity.degree

    def state_dict(self) -> dict:
        return {p.name: p.values.copy() for p in self.parameters()}

    def load_state_dict(self, d: dict):
        for p in self.parameters():
            p.values[...] = d[p.name]


def _make_field_net(rng, width: int, degree: int, out_dim: int, prefix: str) -> FieldNet:
    in_dim = 3 + 6 * degree
    layers = []
    dims_in = [in_dim] + [width] * (TRUNK_DEPTH - 1)
    for i in range(TRUNK_DEPTH):
        d_in = dims_in[i]
        if i == SKIP_AT:
            d_in += in_dim
        w = ad.Tensor(ad.kaiming_uniform(rng, d_in, width), name=f"{prefix}.layer{i}.w")
        b = ad.Tensor(np.zeros(width), name=f"{prefix}.layer{i}.b")
        layers.append((w, b))
    hw = ad.Tensor(ad.kaiming_uniform(rng, width, out_dim), name=f"{prefix}.head.w")
    hb = ad.Tensor(np.zeros(out_dim), name=f"{prefix}.head.b")
    return FieldNet(layers=layers, head=(hw, hb), degree=degree)


def make_params(width: int = TOY_WIDTH, degree: int = TOY_DEGREE, seed: int = 0) -> FieldParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1E1D]))
    opacity = _make_field_net(rng, width, degree, 1, "opacity")
    features = _make_field_net(rng, width, degree, FEATURE_DIM, "features")
    dims = [(FEATURE_DIM + 3, SHADER_WIDTH), (SHADER_WIDTH, SHADER_WIDTH), (SHADER_WIDTH, 3)]
    layers = []
    for i, (d_in, d_out) in enumerate(dims):
        w = ad.Tensor(ad.kaiming_uniform(rng, d_in, d_out), name=f"shader.layer{i}.w")
        b = ad.Tensor(np.zeros(d_out), name=f"shader.layer{i}.b")
        layers.append((w, b))
    return FieldParams(opacity=opacity, features=features, shader=ShaderNet(layers))


# -- tape forward ------------------------------------------------------------


def _field_net_forward(net: FieldNet, enc: ad.Tensor) -> ad.Tensor:
    h = enc
    for i, (w, b) in enumerate(net.layers):
        if i == net.skip_at:
            h = ad.concat([h, enc], axis=1)
        h = ad.relu(ad.add(ad.matmul(h, w), b))
    hw, hb = net.head
    return ad.sigmoid(ad.add(ad.matmul(h, hw), hb))


def field_eval(params: FieldParams, points: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Opacity in [0,1] and features in [0,1]^8 at world points (N, 3)."""
    enc = ad.positional_encoding(points, params.degree)
    return _field_net_forward(params.opacity, enc), _field_net_forward(params.features, enc)


def shade(params: FieldParams, feats: ad.Tensor, dirs: ad.Tensor) -> ad.Tensor:
    """RGB in [0,1]^3 from features and unit view directions (raw, unencoded)."""
    h = ad.concat([feats, dirs], axis=1)
    n = len(params.shader.layers)
    for i, (w, b) in enumerate(params.shader.layers):
        h = ad.add(ad.matmul(h, w), b)
        h = ad.sigmoid(h) if i == n - 1 else ad.relu(h)
    return h


def binarize(alpha: ad.Tensor) -> ad.Tensor:
    """Hard opacity in {0,1}: forward 1[alpha > 0.5], backward identity."""
    return ad.hard_threshold_ste(alpha, 0.5)


def composite_weights(alpha: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-sample compositing weights T_k * a_k and residual transmittance.

    ``alpha`` is (R, K) sorted near to far, zero-padded past each ray's
    last sample; returns ((R, K) weights, (R, 1) residual).
    """
    k = alpha.values.shape[1]
    trans = ad.exclusive_cumprod(ad.sub(1.0, alpha))
    weights = ad.mul(trans[:, :k], alpha)
    residual = trans[:, k : k + 1]
    return weights, residual


def composite(alphas, values, n_channels: int | None = None):
    """Reference list-in/list-out alpha compositing (plain numpy).

    Returns (accumulated vector, residual transmittance).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(alphas) == 0:
        c = 3 if n_channels is None else n_channels
        return np.zeros(c), 1.0
    if values.ndim == 1:
        values = values[:, None]
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alphas)])
    w = trans[:-1] * alphas
    return w @ values, float(trans[-1])


# -- plain-array inference mirrors -------------------------------------------


def encode_np(points: np.ndarray, degree: int) -> np.ndarray:
    parts = [points]
    for i in range(degree):
        s = (2.0**i) * math.pi * points
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=1)


def _field_net_forward_np(net: FieldNet, enc: np.ndarray) -> np.ndarray:
    h = enc
    for i, (w, b) in enumerate(net.layers):
        if i == net.skip_at:
            h = np.concatenate([h, enc], axis=1)
        h = np.maximum(h @ w.values.astype(enc.dtype) + b.values.astype(enc.dtype), 0.0)
    hw, hb = net.head
    z = h @ hw.values.astype(enc.dtype) + hb.values.astype(enc.dtype)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def field_eval_np(params: FieldParams, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    enc = encode_np(np.asarray(points), params.degree)
    return (
        _field_net_forward_np(params.opacity, enc),
        _field_net_forward_np(params.features, enc),
    )


def opacity_np(params: FieldParams, points: np.ndarray) -> np.ndarray:
    """Opacity only; saves the feature-net cost when that is all we need."""
    enc = encode_np(np.asarray(points), params.degree)
    return _field_net_forward_np(params.opacity, enc)


def shader_layers_np(params: FieldParams, dtype=np.float32) -> list:
    """Shader weights as (w, b, activation) plain arrays, for export/rendering."""
    n = len(params.shader.layers)
    out = []
    for i, (w, b) in enumerate(params.shader.layers):
        act = "sigmoid" if i == n - 1 else "relu"
        out.append((w.values.astype(dtype), b.values.astype(dtype), act))
    return out


def shade_np(layers, feats: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    h = np.concatenate([feats, dirs], axis=1)
    for w, b, act in layers:
        h = h @ w + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "sigmoid":
            with np.errstate(over="ignore"):
                h = 1.0 / (1.0 + np.exp(-h))
        else:
            raise ValueError(f"unknown activation {act!r}")
    return h
