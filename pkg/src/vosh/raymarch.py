"""Ray marching through the contracted voxel field.

The schedule takes steps of roughly half a voxel edge of *contracted* arc
length, so distant space (which the contraction compresses) is swept with few
samples. Segment lengths fed to the opacity model are contracted chord
lengths; training, the native renderer, and the web renderer all share this
rule, which is what makes their outputs comparable.

Two call styles:
  - render_batch / render_batch_backward: padded-array fast path used by the
    trainers (float32 grid storage, float64 ray math).
  - volume_render_ray / hybrid_render_ray: single-ray reference ops in pure
    float64, also the surface the tests and renderer-parity checks poke.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError
from .field import (
    F_DIM,
    RayWeights,
    ShadedRay,
    accumulate_deferred_arrays,
    weights_forward,
)
from .grid import DOMAIN_HALF, DecodedGrid, N_CHANNELS, VoxelGrid, sample_decoded, sigmoid, softplus
from .mlp import MlpHead, shade, shade_backward

DEFAULT_MARCH_BOUND = 4.0
DEFAULT_NEAR = 0.05


def step_size(resolution: int) -> float:
    """Half a voxel edge in contracted units."""
    return DOMAIN_HALF * 2.0 / resolution * 0.5


def max_schedule_len(resolution: int) -> int:
    """Generous cap on samples per ray for the adaptive schedule."""
    return 3 * resolution + 32


def decode_reference(grid: VoxelGrid) -> DecodedGrid:
    """Float64 decode used by the reference path and gradient checks."""
    raw = grid.raw.astype(np.float64)
    channels = np.empty_like(raw)
    channels[:, 0] = softplus(raw[:, 0])
    channels[:, 1:] = sigmoid(raw[:, 1:])
    channels[~grid.alive] = 0.0
    return DecodedGrid(grid.resolution, channels, grid.alive.copy())


def exit_t(origins, dirs, bound: float):
    """Ray parameter where ||o + t d||_inf leaves the box of half-extent bound."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-bound - origins) / dirs
        t2 = (bound - origins) / dirs
    far = np.where(np.abs(dirs) > 1e-12, np.maximum(t1, t2), np.inf)
    return np.min(far, axis=-1)


def build_schedule(origins, dirs, *, resolution, near, bound, t_limit=None):
    """Adaptive contracted-step schedule for a batch of rays.

    Returns (positions (B,S,3), deltas (B,S), ts (B,S), counts (B,)). Entries
    past counts[b] are stale scratch; consumers must honor counts.
    t_limit, when given, stops emission at a per-ray parameter (surface depth)
    without altering the deltas of emitted samples.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    b = origins.shape[0]
    t_far = exit_t(origins, dirs, bound)
    if t_limit is None:
        limit = np.full(b, np.inf)
    else:
        limit = np.ascontiguousarray(t_limit, dtype=np.float64)
    smax = max_schedule_len(resolution)
    positions = np.empty((b, smax, 3), dtype=np.float64)
    deltas = np.empty((b, smax), dtype=np.float64)
    ts = np.empty((b, smax), dtype=np.float64)
    counts = np.empty(b, dtype=np.int64)
    _kernels.make_schedule(
        origins, dirs, t_far, limit, near, step_size(resolution), positions, deltas, ts, counts
    )
    return positions, deltas, ts, counts


# ---------------------------------------------------------------------------
# batched fast path


class ArrayPool:
    """Reusable scratch arrays keyed by (name); avoids per-step allocation
    and first-touch page faults on multi-megabyte buffers."""

    def __init__(self):
        self._store = {}

    def get(self, name, shape, dtype):
        arr = self._store.get(name)
        if arr is None or arr.shape != shape or arr.dtype != dtype:
            arr = np.empty(shape, dtype=dtype)
            self._store[name] = arr
        return arr


@dataclass
class BatchTrace:
    """Forward cache for render_batch; everything backward needs.

    Per-sample arrays are ray-major (B, S, ...) and only valid up to
    counts[ray]; the tails are stale scratch.
    """

    positions: np.ndarray
    deltas: np.ndarray
    ts: np.ndarray
    counts: np.ndarray
    sampled: np.ndarray  # (B, S, N_CHANNELS) float32 decoded samples
    corner_idx: np.ndarray
    corner_w: np.ndarray
    alphas: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    sum_w: np.ndarray
    hit: np.ndarray
    w_m: np.ndarray
    mesh_diffuse: np.ndarray
    mesh_feature: np.ndarray
    diffuse: np.ndarray
    feature: np.ndarray
    dirs: np.ndarray
    shade_cache: tuple
    pred: np.ndarray

    def ray_slice(self, ray: int) -> dict:
        """Valid per-sample arrays of one ray (testing convenience)."""
        n = int(self.counts[ray])
        return {
            "positions": self.positions[ray, :n],
            "deltas": self.deltas[ray, :n],
            "ts": self.ts[ray, :n],
            "sampled": self.sampled[ray, :n],
            "alphas": self.alphas[ray, :n],
            "trans": self.trans[ray, :n],
            "weights": self.weights[ray, :n],
        }


def render_batch(
    decoded: DecodedGrid,
    head: MlpHead,
    origins,
    dirs,
    *,
    near=DEFAULT_NEAR,
    bound=DEFAULT_MARCH_BOUND,
    hit=None,
    t_stop=None,
    mesh_diffuse=None,
    mesh_feature=None,
    pool: ArrayPool | None = None,
) -> BatchTrace:
    """Volume (or hybrid, when hit/t_stop given) rendering of a ray batch."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    b = origins.shape[0]
    if hit is None:
        hit = np.zeros(b, dtype=bool)
        t_limit = None
        mesh_diffuse = np.zeros((b, 3))
        mesh_feature = np.zeros((b, F_DIM))
    else:
        hit = np.asarray(hit, dtype=bool)
        t_limit = np.where(hit, np.asarray(t_stop, dtype=np.float64), np.inf)
    if pool is None:
        pool = ArrayPool()
    r = decoded.resolution
    smax = max_schedule_len(r)
    t_far = exit_t(origins, dirs, bound)
    if t_limit is None:
        t_limit = np.full(b, np.inf)
    positions = pool.get("positions", (b, smax, 3), np.float64)
    deltas = pool.get("deltas", (b, smax), np.float64)
    ts = pool.get("ts", (b, smax), np.float64)
    counts = pool.get("counts", (b,), np.int64)
    _kernels.make_schedule(
        origins, dirs, t_far, t_limit, near, step_size(r), positions, deltas, ts, counts
    )
    sampled = pool.get("sampled", (b, smax, N_CHANNELS), np.float32)
    corner_idx = pool.get("corner_idx", (b, smax, 8), np.int32)
    corner_w = pool.get("corner_w", (b, smax, 8), np.float32)
    channels = decoded.channels
    if channels.dtype != np.float32:
        channels = channels.astype(np.float32)
    _kernels.gather_trilinear_rays(
        channels, r, positions, counts, sampled, corner_idx, corner_w
    )
    alphas = pool.get("alphas", (b, smax), np.float32)
    trans = pool.get("trans", (b, smax), np.float32)
    weights = pool.get("weights", (b, smax), np.float32)
    sum_w = pool.get("sum_w", (b,), np.float64)
    acc_c = pool.get("acc_c", (b, 3), np.float64)
    acc_f = pool.get("acc_f", (b, F_DIM), np.float64)
    _kernels.ray_forward(sampled, deltas, counts, alphas, trans, weights, sum_w, acc_c, acc_f)
    w_m = np.where(hit, 1.0 - sum_w, 0.0)
    diffuse = acc_c + w_m[:, None] * mesh_diffuse
    feature = acc_f + w_m[:, None] * mesh_feature
    pred, cache = shade(head, diffuse, feature, dirs)
    return BatchTrace(
        positions=positions,
        deltas=deltas,
        ts=ts,
        counts=counts,
        sampled=sampled,
        corner_idx=corner_idx,
        corner_w=corner_w,
        alphas=alphas,
        trans=trans,
        weights=weights,
        sum_w=sum_w,
        hit=hit,
        w_m=w_m,
        mesh_diffuse=np.asarray(mesh_diffuse, dtype=np.float64),
        mesh_feature=np.asarray(mesh_feature, dtype=np.float64),
        diffuse=diffuse,
        feature=feature,
        dirs=dirs,
        shade_cache=cache,
        pred=pred,
    )


def ray_grads(head: MlpHead, trace: BatchTrace, g_pred):
    """Per-ray gradients behind the shading head.

    Returns dict with g_color/g_feature (on the accumulated quantities),
    g_wm (through the mesh blend), per-ray mesh appearance grads, and the
    head parameter grads.
    """
    g_cd, g_f, g_head = shade_backward(head, trace.shade_cache, np.asarray(g_pred))
    hitf = trace.hit.astype(np.float64)
    g_mesh_d = (hitf * trace.w_m)[:, None] * g_cd
    g_mesh_f = (hitf * trace.w_m)[:, None] * g_f
    g_wm = hitf * (
        np.einsum("bc,bc->b", g_cd, trace.mesh_diffuse)
        + np.einsum("bc,bc->b", g_f, trace.mesh_feature)
    )
    return {
        "g_color": g_cd,
        "g_feature": g_f,
        "g_head": g_head,
        "g_mesh_diffuse": g_mesh_d,
        "g_mesh_feature": g_mesh_f,
        "g_wm": g_wm,
    }


def sample_grads(trace: BatchTrace, g_color, g_feature, g_wm, g_wm_ext=None, pool=None):
    """Per-sample decoded-channel grads (B, S, C) via the fused kernel.

    g_wm_ext, when given, produces a separate (B, S) density-grad array whose
    scatter can be masked per voxel (the adjustment loss path).
    """
    b, smax = trace.weights.shape
    if pool is None:
        pool = ArrayPool()
    g_samples = pool.get("g_samples", (b, smax, N_CHANNELS), np.float32)
    use_ext = g_wm_ext is not None
    g_sigma_ext = (
        pool.get("g_sigma_ext", (b, smax), np.float32)
        if use_ext
        else np.empty((1, 1), dtype=np.float32)
    )
    ext = (
        np.ascontiguousarray(g_wm_ext, dtype=np.float64)
        if use_ext
        else np.zeros(b, dtype=np.float64)
    )
    _kernels.ray_backward(
        trace.sampled,
        trace.deltas,
        trace.counts,
        trace.alphas,
        trace.trans,
        trace.weights,
        np.ascontiguousarray(g_color, dtype=np.float64),
        np.ascontiguousarray(g_feature, dtype=np.float64),
        np.ascontiguousarray(g_wm, dtype=np.float64),
        ext,
        use_ext,
        g_samples,
        g_sigma_ext,
    )
    return g_samples, (g_sigma_ext if use_ext else None)


# ---------------------------------------------------------------------------
# reference single-ray ops


@dataclass
class SampleTrace:
    """Per-sample record of one marched ray."""

    positions: np.ndarray
    ts: np.ndarray
    deltas: np.ndarray
    sigmas: np.ndarray
    diffuse: np.ndarray
    feature: np.ndarray


@dataclass
class SurfaceHit:
    """Rasterized surface information for one ray."""

    hit: bool
    depth: float = np.inf
    diffuse: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    feature: np.ndarray = dc_field(default_factory=lambda: np.zeros(F_DIM))
    w_m: float = 0.0

    @classmethod
    def miss(cls) -> "SurfaceHit":
        return cls(hit=False)

    def __post_init__(self):
        if not self.hit and np.isfinite(self.depth):
            raise InvalidArgumentError("SurfaceHit: miss must carry infinite depth")
        self.diffuse = np.asarray(self.diffuse, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)


def _as_decoded(grid) -> DecodedGrid:
    if isinstance(grid, DecodedGrid):
        return grid
    if isinstance(grid, VoxelGrid):
        return decode_reference(grid)
    raise InvalidArgumentError("expected VoxelGrid or DecodedGrid")


def _check_ray(origin, direction):
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if origin.shape != (3,) or direction.shape != (3,):
        raise InvalidArgumentError("ray: origin/direction must be 3-vectors")
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise InvalidArgumentError("ray: direction must be unit length")
    return origin, direction


def hybrid_render_ray(
    grid,
    mesh_hit: SurfaceHit,
    head: MlpHead,
    origin,
    direction,
    *,
    near=DEFAULT_NEAR,
    bound=DEFAULT_MARCH_BOUND,
):
    """Reference hybrid rendering of a single ray (float64 throughout).

    Marching stops at the surface depth; the mesh absorbs w_m = 1 - sum(w).
    With a missing surface this is exactly volume rendering.
    """
    origin, direction = _check_ray(origin, direction)
    decoded = _as_decoded(grid)
    t_limit = np.array([mesh_hit.depth if mesh_hit.hit else np.inf])
    positions, deltas, ts, counts = build_schedule(
        origin[None], direction[None],
        resolution=decoded.resolution, near=near, bound=bound, t_limit=t_limit,
    )
    n = int(counts[0])
    positions = positions[0, :n]
    deltas = deltas[0, :n]
    ts = ts[0, :n]
    sampled = sample_decoded(decoded, positions) if n else np.zeros((0, N_CHANNELS))
    sigmas = sampled[:, 0]
    diffs = sampled[:, 1:4]
    feats = sampled[:, 4:]
    alphas, trans, weights, residual = weights_forward(sigmas, deltas)
    c_d, f = accumulate_deferred_arrays(weights, diffs, feats)
    w_m = 0.0
    if mesh_hit.hit:
        w_m = 1.0 - float(weights.sum())
        c_d = c_d + w_m * mesh_hit.diffuse
        f = f + w_m * mesh_hit.feature
    final, _ = shade(head, c_d, f, direction)
    shaded = ShadedRay(diffuse_color=c_d, feature=f, final_color=final, direction=direction)
    ray_weights = RayWeights(
        alphas=alphas,
        transmittances=trans,
        weights=weights,
        residual=float(residual) if n else 1.0,
    )
    trace = SampleTrace(
        positions=positions, ts=ts, deltas=deltas, sigmas=sigmas,
        diffuse=diffs, feature=feats,
    )
    return shaded, w_m, ray_weights, trace


def volume_render_ray(grid, head: MlpHead, origin, direction, **kw):
    """Pure volume rendering of a single ray: hybrid with no surface."""
    shaded, _w_m, ray_weights, trace = hybrid_render_ray(
        grid, SurfaceHit.miss(), head, origin, direction, **kw
    )
    return shaded, ray_weights, trace
