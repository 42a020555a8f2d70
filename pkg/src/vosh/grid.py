"""Feature voxel grid over the contracted domain (-2, 2)^3.

Raw parameters are stored unbounded and decoded through softplus (density)
and sigmoid (appearance), so decoded values satisfy their range invariants by
construction. Dead voxels decode to zero density and zero appearance; they
receive no gradients and drop out of baked assets entirely.

Channel layout, both raw and decoded, is a packed (R^3, 8) array:
    [0] density, [1:4] diffuse RGB, [4:8] view-dependent feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .field import F_DIM

N_CHANNELS = 1 + 3 + F_DIM

DOMAIN_HALF = 2.0  # contracted domain is (-2, 2)^3
RAW_DENSITY_INIT = -10.0  # softplus(-10) ~ 4.5e-5: near-transparent start


def softplus(x):
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    x = np.asarray(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p, eps=1e-5):
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


@dataclass
class VoxelGrid:
    """Trainable grid: raw per-voxel parameters plus an alive mask."""

    resolution: int
    raw: np.ndarray  # (R^3, N_CHANNELS) float32
    alive: np.ndarray  # (R^3,) bool

    def __post_init__(self):
        r = self.resolution
        if r < 2:
            raise InvalidArgumentError("VoxelGrid: resolution must be >= 2")
        if self.raw.shape != (r**3, N_CHANNELS):
            raise InvalidArgumentError("VoxelGrid: raw shape mismatch")
        if self.alive.shape != (r**3,):
            raise InvalidArgumentError("VoxelGrid: alive shape mismatch")

    @classmethod
    def create(cls, resolution: int, appearance_raw: float = 0.0) -> "VoxelGrid":
        raw = np.full((resolution**3, N_CHANNELS), appearance_raw, dtype=np.float32)
        raw[:, 0] = RAW_DENSITY_INIT
        alive = np.ones(resolution**3, dtype=bool)
        return cls(resolution, raw, alive)

    @property
    def voxel_edge(self) -> float:
        """Edge length of one voxel in contracted units."""
        return 2.0 * DOMAIN_HALF / self.resolution

    def decode(self) -> "DecodedGrid":
        from . import _kernels

        channels = np.empty_like(self.raw, dtype=np.float32)
        _kernels.decode_channels(self.raw, self.alive.view(np.uint8), channels)
        return DecodedGrid(self.resolution, channels, self.alive.copy())

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.raw.copy(), self.alive.copy())


@dataclass
class DecodedGrid:
    """Decoded field values; the form consumed by rendering, meshing, baking."""

    resolution: int
    channels: np.ndarray  # (R^3, N_CHANNELS) float32, decoded
    alive: np.ndarray  # (R^3,) bool

    @property
    def sigma(self) -> np.ndarray:
        return self.channels[:, 0]

    @property
    def voxel_edge(self) -> float:
        return 2.0 * DOMAIN_HALF / self.resolution

    def sigma_volume(self) -> np.ndarray:
        r = self.resolution
        return self.channels[:, 0].reshape(r, r, r)

    def alive_volume(self) -> np.ndarray:
        r = self.resolution
        return self.alive.reshape(r, r, r)


def voxel_centers(resolution: int) -> np.ndarray:
    """Contracted-space centers of all voxels, shape (R^3, 3), C-order (x, y, z)."""
    edge = 2.0 * DOMAIN_HALF / resolution
    axis = -DOMAIN_HALF + (np.arange(resolution) + 0.5) * edge
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def linear_index(resolution: int, i, j, k):
    return (np.asarray(i) * resolution + np.asarray(j)) * resolution + np.asarray(k)


def sample_decoded(decoded: DecodedGrid, points) -> np.ndarray:
    """Reference trilinear lookup of decoded channels at contracted points.

    points: (..., 3) inside (-2, 2)^3. Cell-centered convention: voxel (i,j,k)
    holds the value at its center; coordinates clamp at the domain edge.
    Returns (..., N_CHANNELS) float64.
    """
    pts = np.asarray(points, dtype=np.float64)
    r = decoded.resolution
    u = (pts + DOMAIN_HALF) / (2.0 * DOMAIN_HALF) * r - 0.5
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    out = np.zeros(pts.shape[:-1] + (N_CHANNELS,), dtype=np.float64)
    values = decoded.channels
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = np.clip(base + offs, 0, r - 1)
        w = np.ones(pts.shape[:-1], dtype=np.float64)
        for a in range(3):
            fa = frac[..., a]
            w = w * np.where(offs[a] == 1, fa, 1.0 - fa)
        lin = linear_index(r, idx[..., 0], idx[..., 1], idx[..., 2])
        out += w[..., None] * values[lin].astype(np.float64)
    return out


def scatter_sample_grads(grid: VoxelGrid, decoded: DecodedGrid, points, g_channels):
    """Reference scatter of decoded-channel gradients back to raw parameters.

    Mirrors sample_decoded; chain rule through softplus/sigmoid uses only the
    decoded values. Returns a dense (R^3, N_CHANNELS) float64 gradient array.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(g_channels, dtype=np.float64).reshape(-1, N_CHANNELS)
    r = grid.resolution
    u = (pts + DOMAIN_HALF) / (2.0 * DOMAIN_HALF) * r - 0.5
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    out = np.zeros((r**3, N_CHANNELS), dtype=np.float64)
    dec = decoded.channels.astype(np.float64)
    alive = grid.alive
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = np.clip(base + offs, 0, r - 1)
        w = np.ones(pts.shape[0], dtype=np.float64)
        for a in range(3):
            fa = frac[:, a]
            w = w * (fa if offs[a] == 1 else 1.0 - fa)
        lin = linear_index(r, idx[:, 0], idx[:, 1], idx[:, 2])
        contrib = w[:, None] * g
        np.add.at(out, lin, contrib)
    # chain through the decode nonlinearities at each voxel
    deriv = np.empty_like(out)
    sig = dec[:, 0]
    deriv[:, 0] = -np.expm1(-sig)  # softplus'(raw) = 1 - exp(-softplus(raw))
    app = dec[:, 1:]
    deriv[:, 1:] = app * (1.0 - app)
    out *= deriv
    out[~alive] = 0.0
    return out
