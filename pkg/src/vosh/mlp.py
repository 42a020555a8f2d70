"""Tiny view-dependent head: (diffuse, feature, direction) -> RGB correction.

Fixed architecture: input 3 + F_DIM + 3, two ReLU hidden layers of 16 units,
linear 3-channel output. The correction is added to the accumulated diffuse
color and clamped to [0, 1]. Forward/backward are hand-rolled so training
carries no autograd dependency and gradients can be checked against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .field import F_DIM

IN_DIM = 3 + F_DIM + 3
HIDDEN = 16
OUT_DIM = 3

PARAM_SHAPES = {
    "w1": (IN_DIM, HIDDEN),
    "b1": (HIDDEN,),
    "w2": (HIDDEN, HIDDEN),
    "b2": (HIDDEN,),
    "w3": (HIDDEN, OUT_DIM),
    "b3": (OUT_DIM,),
}


@dataclass
class MlpHead:
    """Weights for the deferred shading head. Activation: ReLU, ReLU, linear."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        for name, shape in PARAM_SHAPES.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise InvalidArgumentError(f"MlpHead: {name} must have shape {shape}")
            setattr(self, name, arr)

    @classmethod
    def zeros(cls) -> "MlpHead":
        return cls(**{k: np.zeros(s) for k, s in PARAM_SHAPES.items()})

    @classmethod
    def seeded(cls, seed: int) -> "MlpHead":
        """He-style init; final layer zeroed so the head starts as identity."""
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, np.sqrt(2.0 / IN_DIM), PARAM_SHAPES["w1"])
        w2 = rng.normal(0.0, np.sqrt(2.0 / HIDDEN), PARAM_SHAPES["w2"])
        return cls(
            w1=w1,
            b1=np.zeros(HIDDEN),
            w2=w2,
            b2=np.zeros(HIDDEN),
            w3=np.zeros(PARAM_SHAPES["w3"]),
            b3=np.zeros(OUT_DIM),
        )

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_SHAPES}

    def copy(self) -> "MlpHead":
        return MlpHead(**{k: getattr(self, k).copy() for k in PARAM_SHAPES})


def mlp_forward(head: MlpHead, diffuse, feature, direction):
    """Raw head output for batched inputs (..., 3), (..., F_DIM), (..., 3).

    Returns (out, cache); cache feeds mlp_backward.
    """
    x = np.concatenate(
        [np.asarray(diffuse), np.asarray(feature), np.asarray(direction)], axis=-1
    )
    h1 = x @ head.w1 + head.b1
    a1 = np.maximum(h1, 0.0)
    h2 = a1 @ head.w2 + head.b2
    a2 = np.maximum(h2, 0.0)
    out = a2 @ head.w3 + head.b3
    cache = (x, h1, a1, h2, a2)
    return out, cache


def mlp_backward(head: MlpHead, cache, g_out):
    """Reverse pass of mlp_forward.

    Returns (g_diffuse, g_feature, g_direction, g_params) where g_params maps
    parameter names to gradients summed over batch dimensions.
    """
    x, h1, a1, h2, a2 = cache
    g_out = np.asarray(g_out)
    flat = lambda a, width: a.reshape(-1, width)
    g_params = {}
    g_params["w3"] = flat(a2, HIDDEN).T @ flat(g_out, OUT_DIM)
    g_params["b3"] = flat(g_out, OUT_DIM).sum(axis=0)
    g_a2 = g_out @ head.w3.T
    g_h2 = g_a2 * (h2 > 0)
    g_params["w2"] = flat(a1, HIDDEN).T @ flat(g_h2, HIDDEN)
    g_params["b2"] = flat(g_h2, HIDDEN).sum(axis=0)
    g_a1 = g_h2 @ head.w2.T
    g_h1 = g_a1 * (h1 > 0)
    g_params["w1"] = flat(x, IN_DIM).T @ flat(g_h1, HIDDEN)
    g_params["b1"] = flat(g_h1, HIDDEN).sum(axis=0)
    g_x = g_h1 @ head.w1.T
    return g_x[..., :3], g_x[..., 3 : 3 + F_DIM], g_x[..., 3 + F_DIM :], g_params


def shade(head: MlpHead, diffuse, feature, direction):
    """Final ray color: clamp(diffuse + head(diffuse, feature, direction), 0, 1).

    Batched; returns (color, cache) with the clamp mask included in cache.
    """
    out, cache = mlp_forward(head, diffuse, feature, direction)
    raw = np.asarray(diffuse) + out
    color = np.clip(raw, 0.0, 1.0)
    inside = (raw > 0.0) & (raw < 1.0)
    return color, (cache, inside)


def shade_backward(head: MlpHead, shade_cache, g_color):
    """Backward of shade. Returns (g_diffuse, g_feature, g_params).

    The residual path adds the clamp-masked upstream gradient to the MLP's
    diffuse-input gradient. Direction gradients are dropped (geometry fixed).
    """
    cache, inside = shade_cache
    g_raw = np.asarray(g_color) * inside
    g_d_mlp, g_f, _g_dir, g_params = mlp_backward(head, cache, g_raw)
    return g_raw + g_d_mlp, g_f, g_params


def mlp_view_color(diffuse, feature, direction, head: MlpHead):
    """Single-ray shaded color with direction validation."""
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,):
        raise InvalidArgumentError("mlp_view_color: direction must be a 3-vector")
    if abs(np.linalg.norm(d) - 1.0) > 1e-4:
        raise InvalidArgumentError("mlp_view_color: direction must be unit length")
    diffuse = np.asarray(diffuse, dtype=np.float64)
    feature = np.asarray(feature, dtype=np.float64)
    if diffuse.shape != (3,) or feature.shape != (F_DIM,):
        raise InvalidArgumentError("mlp_view_color: bad input shapes")
    color, _ = shade(head, diffuse, feature, d)
    return color
