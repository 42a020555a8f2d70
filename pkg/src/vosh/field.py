"""Core radiance-field math: scene contraction, volume rendering weights,
deferred accumulation, and their exact reverse-mode derivatives.

Everything here is a pure function over ndarrays. Single-point convenience
wrappers return the small dataclasses used throughout the package; batched
callers work on arrays directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

# View-dependent feature channels carried alongside diffuse RGB. The deferred
# head consumes (diffuse, feature, direction) = 3 + F_DIM + 3 inputs.
F_DIM = 4


# ---------------------------------------------------------------------------
# contraction


def contract(x):
    """Squeeze world-space points into the bounded domain (-2, 2)^3.

    Identity inside the unit inf-ball. Outside, non-max components are
    projected by 1/||x||_inf and the max-magnitude component (lowest axis
    index on ties) maps to sign(x_j) * (2 - 1/|x_j|), which keeps the map
    continuous and odd.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise InvalidArgumentError("contract: expected 3-vectors, got shape %s" % (x.shape,))
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("contract: non-finite input")
    return _contract_unchecked(x)


def _contract_unchecked(x):
    ax = np.abs(x)
    r = np.max(ax, axis=-1, keepdims=True)
    outside = r > 1.0
    # argmax picks the lowest index on ties
    m = np.argmax(ax, axis=-1)
    safe_r = np.where(outside, r, 1.0)
    out = x / safe_r
    xm = np.take_along_axis(x, m[..., None], axis=-1)
    safe_abs = np.where(outside, np.abs(xm), 1.0)
    proj = (2.0 - 1.0 / safe_abs) * np.sign(xm)
    np.put_along_axis(out, m[..., None], np.where(outside, proj, xm), axis=-1)
    return np.where(outside, out, x)


def uncontract(p):
    """Inverse of contract: map contracted points back to world space."""
    p = np.asarray(p, dtype=np.float64)
    ap = np.abs(p)
    r = np.max(ap, axis=-1, keepdims=True)
    outside = r > 1.0
    m = np.argmax(ap, axis=-1)[..., None]
    pm = np.take_along_axis(p, m, axis=-1)
    world_r = 1.0 / np.maximum(2.0 - np.abs(pm), 1e-12)
    out = p * world_r
    np.put_along_axis(out, m, np.sign(pm) * world_r, axis=-1)
    return np.where(outside, out, p)


def contract_jvp(x, v):
    """Jacobian-vector product of the contraction: J(x) @ v.

    Used by the ray sampler to convert a world-space direction into a
    contracted-space velocity. Piecewise like the map itself.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ax = np.abs(x)
    r = np.max(ax, axis=-1, keepdims=True)
    outside = r > 1.0
    m = np.argmax(ax, axis=-1)[..., None]
    xm = np.take_along_axis(x, m, axis=-1)
    vm = np.take_along_axis(v, m, axis=-1)
    safe_r = np.where(outside, r, 1.0)
    dr = np.sign(xm) * vm
    out = v / safe_r - x * dr / safe_r**2
    np.put_along_axis(out, m, vm / safe_r**2, axis=-1)
    return np.where(outside, out, v)


# ---------------------------------------------------------------------------
# spec-surface dataclasses


@dataclass(frozen=True)
class ContractedPoint:
    """Point in the contracted domain; inf-norm strictly below 2."""

    x: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.x, dtype=np.float64)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise InvalidArgumentError("ContractedPoint: need a finite 3-vector")
        if np.max(np.abs(p)) >= 2.0:
            raise InvalidArgumentError("ContractedPoint: inf-norm must be < 2")
        object.__setattr__(self, "x", p)


@dataclass(frozen=True)
class SamplePoint:
    """One ray-march sample: position, density, segment length, appearance."""

    position: ContractedPoint
    sigma: float
    delta: float
    diffuse: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0.0):
            raise InvalidArgumentError("SamplePoint: sigma must be finite and >= 0")
        if not (np.isfinite(self.delta) and self.delta > 0.0):
            raise InvalidArgumentError("SamplePoint: delta must be finite and > 0")
        d = np.asarray(self.diffuse, dtype=np.float64)
        f = np.asarray(self.feature, dtype=np.float64)
        if d.shape != (3,) or f.shape != (F_DIM,):
            raise InvalidArgumentError("SamplePoint: bad appearance shape")
        if np.any(d < 0) or np.any(d > 1) or np.any(f < 0) or np.any(f > 1):
            raise InvalidArgumentError("SamplePoint: appearance must lie in [0, 1]")
        object.__setattr__(self, "diffuse", d)
        object.__setattr__(self, "feature", f)


@dataclass(frozen=True)
class RayWeights:
    """Per-sample opacities, transmittances, weights, and leftover T."""

    alphas: np.ndarray
    transmittances: np.ndarray
    weights: np.ndarray
    residual: float

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        t = np.asarray(self.transmittances, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if not (a.shape == t.shape == w.shape) or a.ndim != 1:
            raise InvalidArgumentError("RayWeights: mismatched shapes")
        for arr, name in ((a, "alphas"), (t, "transmittances"), (w, "weights")):
            if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
                raise InvalidArgumentError(f"RayWeights: {name} outside [0, 1]")
        if np.any(np.diff(t) > 1e-12):
            raise InvalidArgumentError("RayWeights: transmittances must be non-increasing")
        if abs(w.sum() + self.residual - 1.0) > 1e-6:
            raise InvalidArgumentError("RayWeights: weights + residual must sum to 1")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "transmittances", t)
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class ShadedRay:
    """Deferred-shading output for one ray."""

    diffuse_color: np.ndarray
    feature: np.ndarray
    final_color: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise InvalidArgumentError("ShadedRay: direction must be unit length")
        object.__setattr__(self, "direction", d)


# ---------------------------------------------------------------------------
# rendering weights (forward)


def weights_forward(sigmas, deltas):
    """Batched alpha/transmittance/weight computation.

    sigmas, deltas: (..., N). Zero-length segments (delta == 0) are inert,
    which is how padded tails of batched rays stay contribution-free.
    Returns (alphas, transmittances, weights, residual) with residual (...,).
    """
    sigmas = np.asarray(sigmas)
    deltas = np.asarray(deltas)
    alphas = -np.expm1(-sigmas * deltas)
    one_minus = 1.0 - alphas
    accum = np.cumprod(one_minus, axis=-1)
    trans = np.concatenate(
        [np.ones_like(accum[..., :1]), accum[..., :-1]], axis=-1
    )
    weights = alphas * trans
    residual = accum[..., -1] if sigmas.shape[-1] else np.ones(sigmas.shape[:-1])
    return alphas, trans, weights, residual


def compute_weights(sigmas, deltas) -> RayWeights:
    """Single-ray rendering weights with precondition checks."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if sigmas.shape != deltas.shape or sigmas.ndim != 1:
        raise InvalidArgumentError("compute_weights: sigmas/deltas must be equal-length 1-d")
    if np.any(~np.isfinite(sigmas)) or np.any(sigmas < 0):
        raise InvalidArgumentError("compute_weights: densities must be finite and >= 0")
    if np.any(~np.isfinite(deltas)) or np.any(deltas <= 0):
        raise InvalidArgumentError("compute_weights: segment lengths must be > 0")
    alphas, trans, weights, residual = weights_forward(sigmas, deltas)
    if sigmas.size == 0:
        return RayWeights(alphas, trans, weights, 1.0)
    return RayWeights(alphas, trans, weights, float(residual))


def weights_backward(alphas, trans, g_weights, g_residual=None):
    """Gradient of (weights, residual) w.r.t. alphas.

    Uses the stable recurrence on T (no divisions):
        dL/da_i = T_i * (g_w_i - G_{i+1})
        G_i     = g_w_i * a_i + G_{i+1} * (1 - a_i),  G_{N+1} = g_residual
    Shapes are (..., N); returns g_alphas of the same shape.
    """
    alphas = np.asarray(alphas)
    trans = np.asarray(trans)
    g_weights = np.asarray(g_weights)
    n = alphas.shape[-1]
    g_alpha = np.zeros_like(alphas)
    G = (
        np.zeros(alphas.shape[:-1], dtype=alphas.dtype)
        if g_residual is None
        else np.asarray(g_residual).astype(alphas.dtype, copy=True)
    )
    for i in range(n - 1, -1, -1):
        a = alphas[..., i]
        gw = g_weights[..., i]
        g_alpha[..., i] = trans[..., i] * (gw - G)
        G = gw * a + G * (1.0 - a)
    return g_alpha


def weights_backward_sigma(sigmas, deltas, alphas, trans, g_weights, g_residual=None):
    """Chain weights_backward through alpha_i = 1 - exp(-sigma_i * delta_i)."""
    g_alpha = weights_backward(alphas, trans, g_weights, g_residual)
    return g_alpha * np.asarray(deltas) * (1.0 - np.asarray(alphas))


# ---------------------------------------------------------------------------
# deferred accumulation


def accumulate_deferred_arrays(weights, diffuses, features):
    """Batched Eq-style accumulation: C_d = sum w_i c_i, F = sum w_i f_i.

    weights (..., N), diffuses (..., N, 3), features (..., N, F_DIM).
    """
    weights = np.asarray(weights)
    c = np.einsum("...n,...nc->...c", weights, np.asarray(diffuses))
    f = np.einsum("...n,...nc->...c", weights, np.asarray(features))
    return c, f


def accumulate_deferred(weights: RayWeights, diffuses, features):
    """Single-ray deferred accumulation with length checks."""
    diffuses = np.asarray(diffuses, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64).reshape(-1, F_DIM)
    n = weights.weights.shape[0]
    if diffuses.shape[0] != n or features.shape[0] != n:
        raise InvalidArgumentError("accumulate_deferred: sample-list length mismatch")
    if n == 0:
        return np.zeros(3), np.zeros(F_DIM)
    return accumulate_deferred_arrays(weights.weights, diffuses, features)


def deferred_backward(weights, diffuses, features, g_color, g_feature):
    """Gradients of accumulate_deferred w.r.t. weights and appearance.

    Returns (g_weights, g_diffuses, g_features) matching the input shapes.
    """
    weights = np.asarray(weights)
    g_w = np.einsum("...nc,...c->...n", np.asarray(diffuses), np.asarray(g_color))
    g_w = g_w + np.einsum("...nc,...c->...n", np.asarray(features), np.asarray(g_feature))
    g_d = weights[..., None] * np.asarray(g_color)[..., None, :]
    g_f = weights[..., None] * np.asarray(g_feature)[..., None, :]
    return g_w, g_d, g_f
