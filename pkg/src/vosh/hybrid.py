"""Joint hybrid optimization: volume + surface rendering with a density
adjustment loss, mesh-occupancy bookkeeping, and final voxel pruning.

Training rays that hit the rasterized surface march only up to the hit and
blend the surface appearance with weight w_m = 1 - sum(w_i). The adjustment
loss pushes w_m toward 1 on those rays so redundant voxels fade and can be
pruned; voxels inside mesh-occupied cells receive none of its gradient and
are killed outright at the end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError
from .field import F_DIM, contract
from .grid import DOMAIN_HALF, DecodedGrid, VoxelGrid, logit, sigmoid
from .mesh import TriMesh
from .mlp import MlpHead
from .raster import rasterize
from .raymarch import ArrayPool, DEFAULT_MARCH_BOUND, DEFAULT_NEAR, render_batch, ray_grads, sample_grads
from .scene import MultiViewDataset
from .train import AdamParams, GridWorkspace, TAU_ALIVE, compute_alive_mask, smooth_monotone


@dataclass
class HybridConfig:
    lambda_voxel: float = 0.001
    r_mesh: int = 128  # 0 disables the mesh-occupancy grid
    iterations: int = 1200
    batch_rays: int = 1024
    lr_grid: float = 0.02
    lr_mlp: float = 1e-4
    lr_mesh: float = 0.02
    seed: int = 0
    near: float = DEFAULT_NEAR
    march_bound: float = DEFAULT_MARCH_BOUND
    tau_alive: float = TAU_ALIVE
    alive_stride: int = 4

    def __post_init__(self):
        if self.lambda_voxel < 0:
            raise InvalidArgumentError("HybridConfig: lambda_voxel must be >= 0")
        if self.r_mesh != 0 and not (8 <= self.r_mesh <= 1024):
            raise InvalidArgumentError("HybridConfig: r_mesh must be 0 or in [8, 1024]")
        if self.iterations < 0:
            raise InvalidArgumentError("HybridConfig: iterations must be >= 0")


PRESETS = {
    "base": {"lambda_voxel": 0.001, "r_mesh": 128},
    "light": {"lambda_voxel": 0.1, "r_mesh": 32},
}


@dataclass
class Vosh:
    """The final hybrid representation."""

    grid: DecodedGrid
    mesh: TriMesh
    head: MlpHead
    mesh_occupancy: np.ndarray  # (r_mesh^3,) bool; empty array when disabled
    r_mesh: int

    def __post_init__(self):
        if self.r_mesh and self.mesh_occupancy.shape != (self.r_mesh**3,):
            raise ContractViolationError("Vosh: occupancy grid shape mismatch")
        if self.r_mesh and np.any(self.grid.alive & self._occupied_voxels()):
            raise ContractViolationError("Vosh: alive voxel inside mesh-occupied cell")

    def _occupied_voxels(self) -> np.ndarray:
        return occupied_voxel_mask(self.mesh_occupancy, self.r_mesh, self.grid.resolution)


def voxel_adjust_loss(w_m_values, lambda_voxel: float) -> float:
    """Mean mesh-weight shortfall penalty over surface-hitting rays."""
    w = np.asarray(w_m_values, dtype=np.float64)
    if w.size == 0:
        raise InvalidArgumentError("voxel_adjust_loss: need at least one ray")
    if np.any(w < -1e-9) or np.any(w > 1 + 1e-9):
        raise InvalidArgumentError("voxel_adjust_loss: w_m must lie in [0, 1]")
    return float(lambda_voxel * np.mean(1.0 - np.exp(w - 1.0)))


def voxel_adjust_grad(w_m_values, lambda_voxel: float) -> np.ndarray:
    """d(loss)/d(w_m) per ray; negative, pushing w_m toward 1."""
    w = np.asarray(w_m_values, dtype=np.float64)
    return -lambda_voxel / w.size * np.exp(w - 1.0)


def mesh_occupancy_grid(mesh: TriMesh, train_cameras, r_mesh: int) -> np.ndarray:
    """Mark contracted-space cells containing surface hits under train poses."""
    if r_mesh < 8:
        raise InvalidArgumentError("mesh_occupancy_grid: r_mesh must be >= 8")
    occ = np.zeros(r_mesh**3, dtype=bool)
    if mesh.n_faces == 0:
        return occ
    for cam in train_cameras:
        gb = rasterize(mesh, cam)
        if not np.any(gb.hit_mask):
            continue
        pts = contract(gb.hit_points_world(mesh))
        cells = np.floor((pts + DOMAIN_HALF) / (2.0 * DOMAIN_HALF) * r_mesh).astype(np.int64)
        cells = np.clip(cells, 0, r_mesh - 1)
        lin = (cells[:, 0] * r_mesh + cells[:, 1]) * r_mesh + cells[:, 2]
        occ[lin] = True
    return occ


def occupied_voxel_mask(occ: np.ndarray, r_mesh: int, resolution: int) -> np.ndarray:
    """Per-voxel flag: does the voxel center fall in a mesh-occupied cell?"""
    if r_mesh == 0 or occ.size == 0:
        return np.zeros(resolution**3, dtype=bool)
    r = resolution
    idx = np.arange(r)
    centers = (idx + 0.5) / r * r_mesh
    cell = np.clip(np.floor(centers).astype(np.int64), 0, r_mesh - 1)
    ci, cj, ck = np.meshgrid(cell, cell, cell, indexing="ij")
    lin = (ci * r_mesh + cj) * r_mesh + ck
    return occ[lin.reshape(-1)]


@dataclass
class HybridReport:
    losses: np.ndarray
    losses_smooth: np.ndarray
    adjust_losses: np.ndarray
    voxels_before: int
    voxels_after: int
    killed_occupied: int
    seconds: float
    timings: dict = dc_field(default_factory=dict)


def _gather_surface(mesh: TriMesh, views):
    """Per-ray surface records for every train pixel, stacked across views.

    Returns (origins, dirs, colors, hit, t_stop, face_id, bary) flat arrays.
    """
    origins = []
    dirs = []
    colors = []
    hits = []
    t_stops = []
    fids = []
    barys = []
    for cam, img in views:
        gb = rasterize(mesh, cam)
        d = cam.pixel_dirs().reshape(-1, 3)
        dirs.append(d)
        origins.append(np.broadcast_to(cam.position, d.shape).copy())
        colors.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        hits.append(gb.hit_mask.reshape(-1))
        t_stops.append(gb.ray_t(mesh).reshape(-1))
        fids.append(gb.face_id.reshape(-1).astype(np.int64))
        barys.append(gb.bary.reshape(-1, 3))
    return (
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(colors),
        np.concatenate(hits),
        np.concatenate(t_stops),
        np.concatenate(fids),
        np.concatenate(barys),
    )


def optimize_hybrid(
    grid: VoxelGrid,
    mesh: TriMesh,
    head: MlpHead,
    dataset: MultiViewDataset,
    cfg: HybridConfig,
) -> tuple:
    """Jointly tune grid, mesh appearance, and head under hybrid rendering.

    Returns (Vosh, HybridReport). The input grid/head are not mutated.
    """
    if mesh.vertex_feature.shape[1] != F_DIM:
        raise ContractViolationError("optimize_hybrid: feature width mismatch")
    t_start = time.time()
    timings = {}
    grid = grid.copy()
    head = head.copy()
    mesh = mesh.copy()
    rng = np.random.default_rng(cfg.seed)
    train_views = dataset.train_views()
    if not train_views:
        raise InvalidArgumentError("optimize_hybrid: dataset has no train views")

    t0 = time.time()
    if cfg.r_mesh:
        occ = mesh_occupancy_grid(mesh, [cam for cam, _ in train_views], cfg.r_mesh)
        occupied = occupied_voxel_mask(occ, cfg.r_mesh, grid.resolution)
    else:
        occ = np.zeros(0, dtype=bool)
        occupied = np.zeros(grid.resolution**3, dtype=bool)
    timings["occupancy_s"] = time.time() - t0

    t0 = time.time()
    origins, dirs, colors, hit, t_stop, fids, barys = _gather_surface(mesh, train_views)
    timings["rasterize_s"] = time.time() - t0

    voxels_before = int(grid.alive.sum())
    ws = GridWorkspace(grid, cfg.lr_grid)
    ws.allow = (~occupied).astype(np.uint8)  # adjustment grads skip occupied cells
    head_opt = AdamParams(head.params(), cfg.lr_mlp)
    mesh_raw = np.concatenate([logit(mesh.vertex_diffuse), logit(mesh.vertex_feature)], axis=1)
    mesh_opt = AdamParams({"raw": mesh_raw}, cfg.lr_mesh)
    pool = ArrayPool()
    n_rays = origins.shape[0]
    losses = []
    adj_losses = []

    t0 = time.time()
    for _ in range(cfg.iterations):
        idx = rng.integers(0, n_rays, cfg.batch_rays)
        b_hit = hit[idx]
        attrs = sigmoid(mesh_raw)
        if mesh.n_faces:
            tri = mesh.faces[fids[idx] * b_hit]  # miss rows read face 0; masked below
            bary = barys[idx]
            mesh_d = np.einsum("bk,bkc->bc", bary, attrs[tri][..., :3]) * b_hit[:, None]
            mesh_f = np.einsum("bk,bkc->bc", bary, attrs[tri][..., 3:]) * b_hit[:, None]
        else:
            tri = np.zeros((len(idx), 3), dtype=np.int64)
            bary = barys[idx]
            mesh_d = np.zeros((len(idx), 3))
            mesh_f = np.zeros((len(idx), F_DIM))
        trace = render_batch(
            ws.decoded(), head, origins[idx], dirs[idx],
            near=cfg.near, bound=cfg.march_bound,
            hit=b_hit, t_stop=t_stop[idx], mesh_diffuse=mesh_d, mesh_feature=mesh_f,
            pool=pool,
        )
        err = trace.pred - colors[idx]
        photo = float(np.mean(err**2))
        g_pred = (2.0 / err.size) * err
        grads = ray_grads(head, trace, g_pred)
        n_hit = int(b_hit.sum())
        g_wm_ext = None
        if n_hit and cfg.lambda_voxel > 0:
            w_hit = trace.w_m[b_hit]
            adj_losses.append(voxel_adjust_loss(w_hit, cfg.lambda_voxel))
            g_adj = np.zeros(len(idx))
            g_adj[b_hit] = voxel_adjust_grad(w_hit, cfg.lambda_voxel)
            g_wm_ext = g_adj
        else:
            adj_losses.append(0.0)
        losses.append(photo + adj_losses[-1])
        g_samples, g_sigma_ext = sample_grads(
            trace, grads["g_color"], grads["g_feature"], grads["g_wm"], g_wm_ext, pool=pool
        )
        ws.accumulate(trace, g_samples, g_sigma_ext)
        ws.step()
        head_opt.step(head.params(), grads["g_head"])
        # surface appearance: per-ray grads distribute over the face's vertices
        if mesh.n_faces:
            g_attr_rows = np.concatenate(
                [grads["g_mesh_diffuse"], grads["g_mesh_feature"]], axis=1
            )
            g_attrs = np.zeros_like(attrs)
            if n_hit:
                h_rows = np.flatnonzero(b_hit)
                for k in range(3):
                    np.add.at(
                        g_attrs, tri[h_rows, k], bary[h_rows, k : k + 1] * g_attr_rows[h_rows]
                    )
            mesh_opt.step({"raw": mesh_raw}, {"raw": g_attrs * attrs * (1.0 - attrs)})
    timings["train_s"] = time.time() - t0

    attrs = sigmoid(mesh_raw)
    mesh.vertex_diffuse = attrs[:, :3]
    mesh.vertex_feature = attrs[:, 3:]

    # occupancy kill + weight pruning
    t0 = time.time()
    grid.alive &= ~occupied
    killed = voxels_before - int(grid.alive.sum())
    ws.refresh()
    alive = compute_alive_mask(
        ws.decoded(), head, train_views,
        tau=cfg.tau_alive, stride=cfg.alive_stride, near=cfg.near, bound=cfg.march_bound,
    )
    grid.alive &= alive
    timings["prune_s"] = time.time() - t0
    ws.refresh()

    vosh = Vosh(
        grid=DecodedGrid(grid.resolution, ws.channels.copy(), grid.alive.copy()),
        mesh=mesh,
        head=head,
        mesh_occupancy=occ,
        r_mesh=cfg.r_mesh,
    )
    losses = np.asarray(losses) if losses else np.zeros(0)
    report = HybridReport(
        losses=losses,
        losses_smooth=smooth_monotone(losses) if losses.size else np.zeros(0),
        adjust_losses=np.asarray(adj_losses) if adj_losses else np.zeros(0),
        voxels_before=voxels_before,
        voxels_after=int(grid.alive.sum()),
        killed_occupied=killed,
        seconds=time.time() - t_start,
        timings=timings,
    )
    return vosh, report
