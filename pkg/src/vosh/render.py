"""Two-pass inference renderer and the speed-proxy benchmark.

Pass 1 rasterizes the mesh into diffuse/feature/depth buffers. Pass 2 walks
the same adaptive schedule as training, skipping samples whose whole
interpolation neighborhood is dead (occupancy pyramid) and stopping at the
rasterized surface depth, then blends via the residual mesh weight and runs
the shading head once per ray.

The headline speed proxy is field evaluations per ray: device-independent,
deterministic, and exactly comparable between hybrid and voxel-only assets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .asset import OccupancyPyramid, VoshAsset, build_occupancy_pyramid
from .errors import ContractViolationError, InvalidArgumentError
from .field import F_DIM
from .hybrid import Vosh
from .mlp import shade
from .raster import rasterize
from .raymarch import DEFAULT_MARCH_BOUND, DEFAULT_NEAR, exit_t, max_schedule_len, step_size
from .scene import Camera


@dataclass(frozen=True)
class Image:
    """Float RGB image in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidArgumentError("Image: expected (H, W, 3)")
        if not np.all(np.isfinite(px)):
            raise InvalidArgumentError("Image: pixels must be finite")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class RenderStats:
    """Per-frame traversal accounting."""

    samples_evaluated: int
    samples_skipped: int
    rays_depth_terminated: int
    rays_total: int
    wall_s: float

    @property
    def samples_per_ray(self) -> float:
        return self.samples_evaluated / max(self.rays_total, 1)


def render_frame(
    asset,
    camera: Camera,
    *,
    use_pyramid: bool = True,
    use_depth: bool = True,
    near: float | None = None,
    march_bound: float | None = None,
):
    """Render one frame from a Vosh or a loaded VoshAsset.

    Returns (Image, RenderStats). Disabling use_pyramid or use_depth is for
    soundness checks; both default on.
    """
    t_start = time.time()
    if isinstance(asset, VoshAsset):
        vosh = asset.vosh
        pyramid = asset.pyramid
        if near is None:
            near = asset.manifest.get("near", DEFAULT_NEAR)
        if march_bound is None:
            march_bound = asset.manifest.get("march_bound", DEFAULT_MARCH_BOUND)
    elif isinstance(asset, Vosh):
        vosh = asset
        pyramid = build_occupancy_pyramid(vosh.grid)
    else:
        raise InvalidArgumentError("render_frame: expected Vosh or VoshAsset")
    if near is None:
        near = DEFAULT_NEAR
    if march_bound is None:
        march_bound = DEFAULT_MARCH_BOUND

    gb = rasterize(vosh.mesh, camera)
    surf_diffuse, surf_feature = gb.interpolate(vosh.mesh)
    t_stop = gb.ray_t(vosh.mesh)
    hit = gb.hit_mask

    h, w = camera.height, camera.width
    dirs = np.ascontiguousarray(camera.pixel_dirs().reshape(-1, 3))
    origin = np.ascontiguousarray(camera.position)
    t_far = exit_t(origin[None], dirs, march_bound)

    r = vosh.grid.resolution
    channels = vosh.grid.channels
    if channels.dtype != np.float32:
        channels = channels.astype(np.float32)
    pyr_flat, pyr_offsets = pyramid.packed()

    n = dirs.shape[0]
    acc_diffuse = np.empty((n, 3), dtype=np.float64)
    acc_feature = np.empty((n, F_DIM), dtype=np.float64)
    sum_w = np.empty(n, dtype=np.float64)
    stats_arr = np.empty((n, 4), dtype=np.int64)
    _kernels.two_pass_march(
        channels,
        r,
        pyr_flat,
        pyr_offsets,
        pyramid.n_levels,
        origin,
        dirs,
        t_far,
        np.ascontiguousarray(t_stop.reshape(-1)),
        near,
        step_size(r),
        max_schedule_len(r),
        use_pyramid,
        use_depth,
        acc_diffuse,
        acc_feature,
        sum_w,
        stats_arr,
    )
    if np.any(stats_arr[:, 0] + stats_arr[:, 1] != stats_arr[:, 3]):
        raise ContractViolationError("render_frame: traversal accounting mismatch")

    hit_flat = hit.reshape(-1)
    w_m = np.where(hit_flat, 1.0 - sum_w, 0.0)
    diffuse = acc_diffuse + w_m[:, None] * surf_diffuse.reshape(-1, 3)
    feature = acc_feature + w_m[:, None] * surf_feature.reshape(-1, F_DIM)
    pred, _ = shade(vosh.head, diffuse, feature, dirs)
    img = Image(pixels=pred.reshape(h, w, 3))
    stats = RenderStats(
        samples_evaluated=int(stats_arr[:, 0].sum()),
        samples_skipped=int(stats_arr[:, 1].sum()),
        rays_depth_terminated=int(stats_arr[:, 2].sum()),
        rays_total=n,
        wall_s=time.time() - t_start,
    )
    return img, stats


def bench(asset, cameras, *, use_pyramid: bool = True, use_depth: bool = True) -> dict:
    """Render a camera path and aggregate traversal stats.

    The report's headline number is mean samples evaluated per ray.
    """
    cameras = list(cameras)
    if len(cameras) < 2:
        raise InvalidArgumentError("bench: need a path of at least 2 cameras")
    frames = []
    total = RenderStats(0, 0, 0, 0, 0.0)
    for cam in cameras:
        _img, st = render_frame(asset, cam, use_pyramid=use_pyramid, use_depth=use_depth)
        frames.append(st)
        total.samples_evaluated += st.samples_evaluated
        total.samples_skipped += st.samples_skipped
        total.rays_depth_terminated += st.rays_depth_terminated
        total.rays_total += st.rays_total
        total.wall_s += st.wall_s
    return {
        "frames": len(frames),
        "samples_per_ray": total.samples_evaluated / max(total.rays_total, 1),
        "skipped_per_ray": total.samples_skipped / max(total.rays_total, 1),
        "depth_terminated_frac": total.rays_depth_terminated / max(total.rays_total, 1),
        "mean_frame_s": total.wall_s / len(frames),
        "samples_evaluated": total.samples_evaluated,
        "samples_skipped": total.samples_skipped,
        "rays_total": total.rays_total,
        "per_frame": [
            {
                "samples_evaluated": st.samples_evaluated,
                "samples_skipped": st.samples_skipped,
                "rays_depth_terminated": st.rays_depth_terminated,
                "rays_total": st.rays_total,
                "wall_s": st.wall_s,
            }
            for st in frames
        ],
    }
