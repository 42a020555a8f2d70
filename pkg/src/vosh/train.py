"""Stage 1: fit the voxel grid and the shading head to posed images.

Stochastic gradient descent on the mean-squared photometric error of randomly
sampled training rays, rendered through the volume path. The grid uses a lazy
per-voxel Adam fused with an incremental re-decode (only touched voxels pay);
the tiny head uses dense Adam. Fully deterministic for a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError
from .grid import DecodedGrid, N_CHANNELS, VoxelGrid
from .mlp import MlpHead
from .raymarch import (
    DEFAULT_MARCH_BOUND,
    DEFAULT_NEAR,
    ArrayPool,
    BatchTrace,
    render_batch,
    ray_grads,
    sample_grads,
)
from .scene import MultiViewDataset

TAU_ALIVE = 0.005  # max-rendering-weight threshold below which a voxel is dead


@dataclass
class TrainConfig:
    resolution: int = 128
    iterations: int = 3000
    batch_rays: int = 1024
    lr_grid: float = 0.1
    lr_mlp: float = 1e-3
    seed: int = 0
    near: float = DEFAULT_NEAR
    march_bound: float = DEFAULT_MARCH_BOUND
    tau_alive: float = TAU_ALIVE
    alive_stride: int = 4  # every k-th train pixel feeds the alive-mask pass

    def __post_init__(self):
        if min(self.resolution, self.iterations, self.batch_rays) < 1:
            raise InvalidArgumentError("TrainConfig: counts must be positive")
        if min(self.lr_grid, self.lr_mlp) <= 0:
            raise InvalidArgumentError("TrainConfig: learning rates must be positive")


class AdamParams:
    """Dense Adam over a dict of float64 arrays (the MLP head)."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


class GridWorkspace:
    """Persistent training state for one grid: cached decode, accumulators,
    and the fused scatter -> Adam -> re-decode update."""

    def __init__(self, grid: VoxelGrid, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.grid = grid
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        n = grid.raw.shape[0]
        self.channels = np.empty_like(grid.raw)
        _kernels.decode_channels(grid.raw, grid.alive.view(np.uint8), self.channels)
        self.acc_main = np.zeros((n, N_CHANNELS), dtype=np.float32)
        self.acc_sigma = np.zeros(n, dtype=np.float32)
        self.m = np.zeros_like(grid.raw)
        self.v = np.zeros_like(grid.raw)
        self.allow = np.ones(n, dtype=np.uint8)

    def decoded(self) -> DecodedGrid:
        return DecodedGrid(self.grid.resolution, self.channels, self.grid.alive)

    def refresh(self) -> None:
        """Full re-decode (after alive-mask edits)."""
        _kernels.decode_channels(
            self.grid.raw, self.grid.alive.view(np.uint8), self.channels
        )

    def accumulate(self, trace: BatchTrace, g_samples, g_sigma_ext=None) -> None:
        _kernels.scatter_add_channels(
            trace.corner_idx, trace.corner_w, trace.counts, g_samples, self.acc_main
        )
        if g_sigma_ext is not None:
            _kernels.scatter_add_sigma(
                trace.corner_idx, trace.corner_w, trace.counts, g_sigma_ext, self.acc_sigma
            )

    def step(self) -> None:
        self.t += 1
        _kernels.fused_grid_update(
            self.channels,
            self.grid.alive.view(np.uint8),
            self.acc_main,
            self.acc_sigma,
            self.allow,
            self.grid.raw,
            self.m,
            self.v,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            1.0 - self.beta1**self.t,
            1.0 - self.beta2**self.t,
        )


def flatten_rays(views) -> tuple:
    """Stack (origins, dirs, colors) over a list of (camera, image) views."""
    origins = []
    dirs = []
    colors = []
    for cam, img in views:
        d = cam.pixel_dirs().reshape(-1, 3)
        dirs.append(d)
        origins.append(np.broadcast_to(cam.position, d.shape).copy())
        colors.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    return (
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(colors),
    )


def smooth_monotone(losses) -> np.ndarray:
    """Running minimum of an EMA: a monotone-non-increasing trend curve."""
    out = np.empty(len(losses))
    ema = None
    best = np.inf
    for i, x in enumerate(losses):
        ema = x if ema is None else 0.95 * ema + 0.05 * x
        best = min(best, ema)
        out[i] = best
    return out


@dataclass
class TrainResult:
    grid: VoxelGrid
    head: MlpHead
    losses: np.ndarray
    losses_smooth: np.ndarray
    seconds: float


def compute_alive_mask(
    decoded: DecodedGrid,
    head: MlpHead,
    views,
    *,
    tau: float = TAU_ALIVE,
    stride: int = 4,
    near=DEFAULT_NEAR,
    bound=DEFAULT_MARCH_BOUND,
    chunk: int = 8192,
) -> np.ndarray:
    """Voxels whose max rendering weight over sampled train rays exceeds tau.

    A sample's weight is attributed to all eight voxels it interpolates from,
    which keeps a conservative halo around surfaces.
    """
    origins, dirs, _ = flatten_rays(views)
    origins = origins[::stride]
    dirs = dirs[::stride]
    max_w = np.zeros(decoded.resolution**3, dtype=np.float32)
    pool = ArrayPool()
    for lo in range(0, origins.shape[0], chunk):
        trace = render_batch(
            decoded, head, origins[lo : lo + chunk], dirs[lo : lo + chunk],
            near=near, bound=bound, pool=pool if lo + chunk <= origins.shape[0] else None,
        )
        _kernels.scatter_max_weight(trace.corner_idx, trace.counts, trace.weights, max_w)
    return max_w > tau


def train_grid(dataset: MultiViewDataset, cfg: TrainConfig) -> TrainResult:
    """Fit grid + head; returns the trained pair and the loss curve."""
    train_views = dataset.train_views()
    if not train_views:
        raise InvalidArgumentError("train_grid: dataset has no train views")
    t_start = time.time()
    rng = np.random.default_rng(cfg.seed)
    grid = VoxelGrid.create(cfg.resolution)
    head = MlpHead.seeded(cfg.seed)
    origins, dirs, colors = flatten_rays(train_views)
    n_rays = origins.shape[0]
    ws = GridWorkspace(grid, cfg.lr_grid)
    head_opt = AdamParams(head.params(), cfg.lr_mlp)
    pool = ArrayPool()
    losses = []
    for _ in range(cfg.iterations):
        idx = rng.integers(0, n_rays, cfg.batch_rays)
        trace = render_batch(
            ws.decoded(), head, origins[idx], dirs[idx],
            near=cfg.near, bound=cfg.march_bound, pool=pool,
        )
        err = trace.pred - colors[idx]
        losses.append(float(np.mean(err**2)))
        g_pred = (2.0 / err.size) * err
        grads = ray_grads(head, trace, g_pred)
        g_samples, _ = sample_grads(
            trace, grads["g_color"], grads["g_feature"], grads["g_wm"], pool=pool
        )
        ws.accumulate(trace, g_samples)
        ws.step()
        head_opt.step(head.params(), grads["g_head"])
    grid.alive = compute_alive_mask(
        ws.decoded(), head, train_views,
        tau=cfg.tau_alive, stride=cfg.alive_stride, near=cfg.near, bound=cfg.march_bound,
    )
    losses = np.asarray(losses)
    return TrainResult(
        grid=grid,
        head=head,
        losses=losses,
        losses_smooth=smooth_monotone(losses),
        seconds=time.time() - t_start,
    )
